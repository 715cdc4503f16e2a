"""Print feature-pair and density shapes plus parameter counts for both presets."""

import argparse
import time

import numpy as np

from mafnet import tensor as T
from mafnet.model import ModelConfig, describe, encoder_forward, init_params, mma_forward
from mafnet.tensor import Tensor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--preset", choices=("toy", "paper", "both"), default="both")
    ap.add_argument("--size", type=int, help="input side (default 64 toy, 256 paper)")
    args = ap.parse_args()

    presets = ("toy", "paper") if args.preset == "both" else (args.preset,)
    for name in presets:
        cfg = ModelConfig.preset(name)
        size = args.size or (64 if name == "toy" else 256)
        info = describe(cfg)
        params = init_params(cfg, seed=0)
        rng = np.random.default_rng(0)
        rgb = Tensor(rng.uniform(-1, 1, (3, size, size)).astype(np.float32))
        th = Tensor(rng.uniform(-1, 1, (1, size, size)).astype(np.float32))
        start = time.perf_counter()
        with T.no_grad():
            pairs = encoder_forward(rgb, th, params, cfg)
            density = mma_forward(pairs, params)
        print(f"{name} @ {size}x{size}: {info['total_parameters']:,} parameters, "
              f"forward {time.perf_counter() - start:.1f}s")
        for group, count in info["group_parameters"].items():
            print(f"  {group:18s} {count:,}")
        for scale, pair in zip((8, 16, 32), pairs):
            print(f"  1/{scale:<2d} pair  {'x'.join(map(str, pair.rgb.shape[1:]))}")
        print(f"  density    {'x'.join(map(str, density.shape[1:]))}")


if __name__ == "__main__":
    main()
