"""Overfit the toy model on a few synthetic pairs and report loss and counts."""

import argparse
import tempfile
import time

from mafnet.data import SynthConfig, load_dataset, synthesize
from mafnet.train import config_from_dict, dataset_loss, evaluate_pairs, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=4)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--darkness", type=float, default=0.5)
    ap.add_argument("--out", help="checkpoint directory (optional)")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as root:
        synthesize(SynthConfig(pairs=args.pairs, seed=args.seed, darkness_prob=args.darkness), root)
        data = load_dataset(root)
    cfg = config_from_dict({"run": {"max_iters": args.iters, "lr_max": args.lr, "augment": False,
                                    "batch_size": min(4, args.pairs), "seed": args.seed}})
    start = time.perf_counter()
    res = train(cfg, data, out=args.out,
                progress=lambda it, lr, loss: print(f"iter {it:4d} lr {lr:.2e} loss {loss:.5f}")
                if it % 50 == 0 else None)
    final = dataset_loss(res.params, cfg, data)
    initial = res.losses[0][2] if res.losses else final
    print(f"loss {initial:.4f} -> {final:.5f} ({100 * final / initial:.2f}%) in {time.perf_counter() - start:.0f}s")
    for r in evaluate_pairs(res.params, cfg, data)["images"]:
        print(f"  {r['id']}: predicted {r['pred_count']:.2f}, annotated {r['gt_count']:.0f}")


if __name__ == "__main__":
    main()
