"""Command line entry point: ``mafnet <command> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checks
from .data import DataError, SynthConfig, load_dataset, load_images, synthesize
from .density import AnnotationError
from .fileio import FormatError, save_tensor, to_uint8_preview, write_pgm
from .model import check_input_size, describe
from .tensor import DimensionError, NumericError
from .train import (CheckpointError, ConfigError, NumericAbort, attention_maps, evaluate, load_checkpoint,
                    load_config, predict_density, train)

log = logging.getLogger("mafnet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    cfg = SynthConfig(pairs=args.pairs, size=args.size, seed=args.seed)
    ids = synthesize(cfg, args.out)
    print(f"wrote {len(ids)} pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config)

    def progress(it, lr, loss):
        if it % 50 == 0 or it == cfg.run.max_iters - 1:
            log.info("iter %d lr %.3g loss %.6g", it, lr, loss)

    result = train(cfg, data=None if args.data is None else _dataset(args.data), out=args.out,
                   progress=progress)
    final = result.losses[-1][2] if result.losses else float("nan")
    print(f"trained {result.iterations} iterations, final loss {final:.6g}; checkpoint in {args.out}")
    return EXIT_OK


def _dataset(root):
    if not Path(root).is_dir():
        raise DataError(f"data directory {root} does not exist")
    return load_dataset(root)


def cmd_eval(args) -> int:
    if not Path(args.data).is_dir():
        raise DataError(f"data directory {args.data} does not exist")
    report = evaluate(args.ckpt, args.data, args.split)
    _write_json(args.report, report)
    print(f"{args.split}: n={report['n_images']} mae={report['mae']:.4f} rmse={report['rmse']:.4f}")
    return EXIT_OK


def _load_inputs(args):
    rgb, th = load_images(args.rgb, args.thermal)
    try:
        check_input_size(*rgb.shape[1:])
    except DimensionError as e:
        raise DataError(str(e)) from e
    return rgb, th


def cmd_predict(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    rgb, th = _load_inputs(args)
    if cfg.run.zero_rgb:
        rgb = np.zeros_like(rgb)
    if cfg.run.zero_thermal:
        th = np.zeros_like(th)
    density = predict_density(params, cfg.model, rgb, th)
    save_tensor(args.out_density, density.astype(np.float32))
    if args.out_pgm:
        write_pgm(args.out_pgm, to_uint8_preview(density))
    print(f"count {float(np.sum(density, dtype=np.float64)):.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = checks.run(args.module)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_attn_maps(args) -> int:
    params, cfg, _ = load_checkpoint(args.ckpt)
    rgb, th = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for m in attention_maps(params, cfg.model, rgb, th):
        stem = f"m{m['module']}_b{m['block']}_{m['branch']}_h{m['head']}"
        save_tensor(out / f"{stem}.maft", m["weights"])
        write_pgm(out / f"{stem}.pgm", to_uint8_preview(m["weights"], rowwise=True))
        index.append({k: m[k] for k in ("module", "stage", "block", "branch", "head")}
                     | {"tensor": f"{stem}.maft", "preview": f"{stem}.pgm", "shape": list(m["weights"].shape)})
    _write_json(out / "index.json", index)
    print(f"wrote {len(index)} attention maps to {out}")
    return EXIT_OK


def cmd_describe(args) -> int:
    cfg = load_config(args.config)
    info = describe(cfg.model, seed=cfg.run.seed)
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mafnet", description="RGB-T crowd counting with multi-attention fusion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic RGB-T dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--pairs", type=int, default=8)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", help="train from a JSON config")
    s.add_argument("--config", required=True)
    s.add_argument("--data", help="dataset directory (overrides run.data_root)")
    s.add_argument("--out", required=True, help="checkpoint directory")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="evaluate a checkpoint")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", choices=("all", "bright", "dark"), default="all")
    s.add_argument("--report", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("predict", help="density map for one image pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rgb", required=True)
    s.add_argument("--thermal", required=True)
    s.add_argument("--out-density", required=True)
    s.add_argument("--out-pgm")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    s.add_argument("--module", choices=tuple(checks.SUITES))
    s.set_defaults(func=cmd_gradcheck)

    s = sub.add_parser("attn-maps", help="export attention maps for one pair")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--rgb", required=True)
    s.add_argument("--thermal", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_attn_maps)

    s = sub.add_parser("describe", help="parameter counts and shapes for a config")
    s.add_argument("--config", required=True)
    s.set_defaults(func=cmd_describe)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, CheckpointError, FormatError, AnnotationError, DimensionError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericAbort, NumericError) as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
