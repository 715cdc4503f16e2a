"""Train the toy model with both modalities and with one stream zeroed; compare training MAE."""

import argparse
import tempfile

from mafnet.data import SynthConfig, load_dataset, synthesize
from mafnet.train import config_from_dict, evaluate_pairs, train


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--iters", type=int, default=500)
    ap.add_argument("--lr", type=float, default=1e-3)
    ap.add_argument("--darkness", type=float, default=0.5)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--with-thermal-ablation", action="store_true", help="also train with thermal zeroed")
    args = ap.parse_args()

    with tempfile.TemporaryDirectory() as root:
        synthesize(SynthConfig(pairs=args.pairs, seed=args.seed, darkness_prob=args.darkness), root)
        data = load_dataset(root)
    print("illumination:", " ".join(p.illumination for p in data))
    variants = [("both", {}), ("rgb zeroed", {"zero_rgb": True})]
    if args.with_thermal_ablation:
        variants.append(("thermal zeroed", {"zero_thermal": True}))
    for label, extra in variants:
        run = {"max_iters": args.iters, "lr_max": args.lr, "augment": False, "batch_size": 4,
               "seed": args.seed, **extra}
        cfg = config_from_dict({"run": run})
        rep = evaluate_pairs(train(cfg, data).params, cfg, data)
        print(f"{label:15s} mae {rep['mae']:.4f} rmse {rep['rmse']:.4f} game3 {rep['game3']:.4f}")


if __name__ == "__main__":
    main()
