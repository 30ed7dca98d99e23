"""Command-line entry point: one `export` action, flags only.

    mlod-export --model net.pt --taps conv1,layer2 --split calibration=data/cal \
        --split test_id=data/id --split ood=data/ood --out pack/

Exit codes: 0 on success, 1 when the model or image data is broken, 2 when
the request itself is invalid.
"""

from __future__ import annotations

import argparse
import sys

from .errors import BadTapSpec, ExporterError, TapNotFound
from .export import POOLINGS, OdinPerturbation, TapSpec, export

_USAGE_ERRORS = (BadTapSpec, TapNotFound)


def _split_pairs(pairs: list[str]) -> dict[str, str]:
    splits: dict[str, str] = {}
    for pair in pairs:
        name, sep, folder = pair.partition("=")
        if not sep or not name or not folder:
            raise BadTapSpec(f"--split wants name=folder, got {pair!r}")
        if name in splits:
            raise BadTapSpec(f"split {name!r} given twice")
        splits[name] = folder
    return splits


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlod-export",
        description="Tap a torch model over image folders and write a feature pack.")
    parser.add_argument("--model", required=True,
                        help="eager module saved with torch.save")
    parser.add_argument("--taps", required=True,
                        help="comma-separated named submodules to capture")
    parser.add_argument("--split", action="append", required=True,
                        metavar="NAME=FOLDER", help="image folder per split (repeatable)")
    parser.add_argument("--out", required=True, help="pack directory to create")
    parser.add_argument("--pooling", choices=POOLINGS, default="global_average")
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--odin-epsilon", type=float, default=None,
                        help="input perturbation step; omit to disable")
    parser.add_argument("--odin-temperature", type=float, default=1000.0,
                        help="softmax temperature for the perturbation gradient")
    parser.add_argument("--quiet", action="store_true", help="suppress the summary")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        odin = (None if args.odin_epsilon is None else
                OdinPerturbation(epsilon=args.odin_epsilon,
                                 temperature=args.odin_temperature))
        spec = TapSpec(model=args.model,
                       taps=tuple(t.strip() for t in args.taps.split(",") if t.strip()),
                       splits=_split_pairs(args.split),
                       pooling=args.pooling,
                       batch_size=args.batch_size,
                       odin=odin)
        root = export(spec, args.out)
    except _USAGE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except ExporterError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    if not args.quiet:
        print(f"wrote pack {root} (taps {args.taps}, splits "
              f"{', '.join(sorted(spec.splits))})")
    return 0


if __name__ == "__main__":
    sys.exit(main())
