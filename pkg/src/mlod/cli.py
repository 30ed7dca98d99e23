"""Command-line interface.

Four subcommands cover the workflow end to end:

    mlod synth      write a synthetic feature pack from a named scenario or spec file
    mlod calibrate  fit per-layer calibration tables and persist them
    mlod eval       run the full evaluation, writing report.json, report.csv, figures
    mlod detect     fuse one sample's p-values and print the verdicts as JSON

Runs are configured by a JSON file (same dialect as the pack manifest) whose
fields individual flags override. Exit codes: 0 on success, 1 when data or
I/O is broken, 2 when the request itself is invalid. All stdout except
detect's JSON is a human-readable summary; machine output goes to files, and
--quiet silences the summary for parse-safe pipelines.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import calibrator, synthgen
from .combiner import METHODS, CombinerConfig, PValueVector, combine
from .errors import (
    BadWeights,
    ConfigError,
    DimMismatch,
    EmptyInput,
    EmptyPVector,
    KindMismatch,
    MlodError,
    OddDf,
    ShapeMismatch,
    TooFewPoints,
    TooFewSamples,
    UnknownScenario,
    UnknownSplit,
    UnsupportedMethod,
    InvalidSpec,
)
from .evaluator import CALIBRATION_SPLIT, ID_TEST_SPLIT, evaluate
from .featurepack import FeatureMatrix, load_pack, read_manifest
from .scorers import ScorerConfig, build_knn_index, score_layer

_USAGE_ERRORS = (ConfigError, UnknownScenario, InvalidSpec, UnknownSplit,
                 ShapeMismatch, DimMismatch, KindMismatch, BadWeights,
                 UnsupportedMethod, EmptyPVector, TooFewPoints, TooFewSamples,
                 EmptyInput, OddDf)

_CONFIG_KEYS = {"pack", "alpha", "methods", "scorers", "target_tpr", "out",
                "seed", "threads", "grid_size", "figures", "tables"}


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"config {path} must hold a JSON object")
    unknown = set(raw) - _CONFIG_KEYS
    if unknown:
        raise ConfigError(f"config {path} has unknown keys: {sorted(unknown)}")
    return raw


def _threads(flag: int | None, config: dict) -> int:
    if flag is not None:
        value = flag
    elif config.get("threads") is not None:
        value = config["threads"]
    elif os.environ.get("MLOD_THREADS"):
        try:
            value = int(os.environ["MLOD_THREADS"])
        except ValueError as exc:
            raise ConfigError(f"MLOD_THREADS must be an integer: {exc}") from exc
    else:
        value = os.cpu_count() or 1
    if int(value) < 1:
        raise ConfigError(f"threads must be positive, got {value}")
    return int(value)


def _scorer_from_dict(raw: dict) -> ScorerConfig:
    if not isinstance(raw, dict) or "method" not in raw:
        raise ConfigError(f"scorer config must be an object with a 'method': {raw!r}")
    allowed = {"method", "temperature", "k", "normalize"}
    unknown = set(raw) - allowed
    if unknown:
        raise ConfigError(f"scorer config has unknown keys: {sorted(unknown)}")
    try:
        return ScorerConfig(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad scorer config {raw!r}: {exc}") from exc


def _resolve_scorers(manifest, config: dict, args) -> dict[str, ScorerConfig]:
    block = config.get("scorers", {}) or {}
    if not isinstance(block, dict):
        raise ConfigError("'scorers' must be an object")
    unknown = set(block) - {"default", "per_layer"}
    if unknown:
        raise ConfigError(f"'scorers' has unknown keys: {sorted(unknown)}")
    default = _scorer_from_dict(block["default"]) if "default" in block else None
    per_layer_raw = block.get("per_layer", {}) or {}
    layer_names = {layer.name for layer in manifest.layers}
    unknown_layers = set(per_layer_raw) - layer_names
    if unknown_layers:
        raise ConfigError(f"scorers.per_layer names unknown layers: {sorted(unknown_layers)}")
    out = {}
    for layer in manifest.layers:
        if layer.name in per_layer_raw:
            cfg = _scorer_from_dict(per_layer_raw[layer.name])
        elif default is not None and (
                (default.method == "knn") == (layer.kind == "features")):
            cfg = default
        elif layer.kind == "features":
            cfg = ScorerConfig("knn")
        else:
            cfg = ScorerConfig("msp")
        updates = {}
        if getattr(args, "k", None) is not None and cfg.method == "knn":
            updates["k"] = args.k
        if getattr(args, "temperature", None) is not None and cfg.method in ("energy", "odin"):
            updates["temperature"] = args.temperature
        if updates:
            cfg = ScorerConfig(method=cfg.method,
                               temperature=updates.get("temperature", cfg.temperature),
                               k=updates.get("k", cfg.k),
                               normalize=cfg.normalize)
        out[layer.name] = cfg
    return out


def _resolve_methods(config: dict, args) -> list[CombinerConfig]:
    alpha = args.alpha if args.alpha is not None else config.get("alpha", 0.05)
    raw = list(args.method) if args.method else config.get("methods") or list(METHODS)
    out = []
    for entry in raw:
        if isinstance(entry, str):
            out.append(CombinerConfig(entry, alpha=alpha))
        elif isinstance(entry, dict):
            name = entry.get("method")
            weights = tuple(entry["weights"]) if entry.get("weights") else None
            out.append(CombinerConfig(name, alpha=entry.get("alpha", alpha),
                                      weights=weights))
        else:
            raise ConfigError(f"bad method entry {entry!r}")
    return out


def _pack_dir(config: dict, args) -> str:
    pack = getattr(args, "pack", None) or config.get("pack")
    if not pack:
        raise ConfigError("no pack directory given (flag --pack or config 'pack')")
    return pack


# synth ----------------------------------------------------------------------

def _spec_from_file(path: str) -> synthgen.SynthSpec:
    try:
        raw = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read spec {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"spec {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("synth spec must be a JSON object")
    fields = {"m", "dims", "n_cal", "n_id", "n_ood", "shift_layers",
              "shift_magnitude", "correlation", "seed"}
    unknown = set(raw) - fields
    if unknown:
        raise ConfigError(f"spec has unknown keys: {sorted(unknown)}")
    if "dims" in raw:
        raw["dims"] = tuple(raw["dims"])
    if "shift_layers" in raw:
        raw["shift_layers"] = frozenset(raw["shift_layers"])
    try:
        return synthgen.SynthSpec(**raw)
    except TypeError as exc:
        raise ConfigError(f"bad synth spec: {exc}") from exc


def cmd_synth(args) -> int:
    if bool(args.scenario) == bool(args.spec):
        raise ConfigError("give exactly one of --scenario or --spec")
    spec = synthgen.scenario(args.scenario) if args.scenario else _spec_from_file(args.spec)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    pack = synthgen.generate(spec)
    manifest = pack.save(args.out)
    if not args.quiet:
        print(f"wrote pack to {manifest.root}")
        print(f"  layers: {', '.join(f'{s.name}(d={s.dim})' for s in manifest.layers)}")
        print(f"  splits: {', '.join(f'{k}={v}' for k, v in manifest.splits.items())}")
        print(f"  seed: {spec.seed}  shift: {sorted(spec.shift_layers)} "
              f"mu={spec.shift_magnitude} rho={spec.correlation}")
    return 0


# calibrate -------------------------------------------------------------------

def _fit_tables(pack, scorers: dict[str, ScorerConfig], threads: int,
                min_samples: int = calibrator.MIN_SAMPLES):
    tables = {}
    for layer in pack.manifest.layers:
        cfg = scorers[layer.name]
        cal = pack.matrix(layer.name, CALIBRATION_SPLIT)
        if cfg.method == "knn":
            index = build_knn_index(cal, cfg)
            sv = score_layer(cal, cfg, index, exclude_self=True, threads=threads)
        else:
            index = None
            sv = score_layer(cal, cfg)
        tables[layer.name] = (calibrator.fit_calibration(sv, min_samples=min_samples),
                              cfg, index)
    return tables


def cmd_calibrate(args) -> int:
    config = _load_config(args.config)
    threads = _threads(args.threads, config)
    out = args.out or config.get("out")
    if not out:
        raise ConfigError("no output directory given (flag --out or config 'out')")
    pack = load_pack(_pack_dir(config, args))
    scorers = _resolve_scorers(pack.manifest, config, args)
    tables = _fit_tables(pack, scorers, threads)
    for name, (table, _cfg, _idx) in tables.items():
        path = calibrator.save_table(table, out)
        if not args.quiet:
            print(f"{path}  n={table.n}  resolution={table.resolution:.2e}")
    return 0


# eval -------------------------------------------------------------------------

def _print_eval_table(report) -> None:
    datasets = report.config_echo["ood_datasets"]
    rows = list(report.methods.items()) + \
        [(f"layer:{k}", v) for k, v in report.per_layer.items()]
    for ds in datasets:
        print(f"dataset: {ds}")
        print(f"  {'row':<16} {'FPR95':>8} {'AUROC':>8} {'FPR@a':>8} {'TPR@a95':>8}")
        for name, block in rows:
            met = block["datasets"][ds]
            print(f"  {name:<16} {met['fpr95']:>8.4f} {met['auroc']:>8.4f} "
                  f"{met['fpr_at_alpha']:>8.4f} {met['achieved_tpr']:>8.4f}")
    if len(datasets) > 1:
        print("average over datasets")
        print(f"  {'row':<16} {'FPR95':>8} {'AUROC':>8}")
        for name, block in rows:
            avg = block["average"]
            print(f"  {name:<16} {avg['fpr95']:>8.4f} {avg['auroc']:>8.4f}")


def cmd_eval(args) -> int:
    config = _load_config(args.config)
    threads = _threads(args.threads, config)
    out = Path(args.out or config.get("out") or "eval_out")
    figures = config.get("figures", True)
    if args.no_figures:
        figures = False
    pack = load_pack(_pack_dir(config, args))
    scorers = _resolve_scorers(pack.manifest, config, args)
    methods = _resolve_methods(config, args)
    grid_size = args.grid_size or config.get("grid_size", 2001)
    target_tpr = args.target_tpr or config.get("target_tpr", 0.95)
    report = evaluate(pack, scorers, methods, target_tpr=target_tpr,
                      grid_size=grid_size, threads=threads, want_curves=figures)
    json_path = report.save_json(out / "report.json")
    csv_path = report.save_csv(out / "report.csv")
    written = [json_path, csv_path]
    if figures:
        from .plots import render_report_figures
        written += render_report_figures(report, out / "figures",
                                         report.p_matrices,
                                         report.config_echo["layers"])
    if not args.quiet:
        _print_eval_table(report)
        for path in written:
            print(f"wrote {path}")
    return 0


# detect -------------------------------------------------------------------------

def _sample_from_vectors(manifest, entries: list[str]) -> dict[str, np.ndarray]:
    given = {}
    for entry in entries:
        if "=" not in entry:
            raise ConfigError(f"--vector wants LAYER=FILE, got {entry!r}")
        name, _, fpath = entry.partition("=")
        given[name] = fpath
    names = [layer.name for layer in manifest.layers]
    missing = set(names) - set(given)
    if missing:
        raise ConfigError(f"missing --vector for layers: {sorted(missing)}")
    unknown = set(given) - set(names)
    if unknown:
        raise ConfigError(f"--vector names unknown layers: {sorted(unknown)}")
    out = {}
    for layer in manifest.layers:
        fpath = Path(given[layer.name])
        if not fpath.is_file():
            raise ConfigError(f"vector file missing: {fpath}")
        blob = fpath.read_bytes()
        if len(blob) != layer.dim * 4:
            raise DimMismatch(
                f"{fpath}: expected {layer.dim * 4} bytes for dim {layer.dim}, "
                f"got {len(blob)}")
        vec = np.frombuffer(blob, dtype="<f4").astype(np.float64)
        if not np.isfinite(vec).all():
            raise ConfigError(f"{fpath} contains non-finite values")
        out[layer.name] = vec
    return out


def cmd_detect(args) -> int:
    config = _load_config(args.config)
    threads = _threads(args.threads, config)
    if (args.index is None) == (not args.vector):
        raise ConfigError("give exactly one of --index or --vector")
    pack = load_pack(_pack_dir(config, args))
    manifest = pack.manifest
    scorers = _resolve_scorers(manifest, config, args)
    methods = _resolve_methods(config, args)
    tables_dir = args.tables or config.get("tables")

    rows: dict[str, np.ndarray] = {}
    if args.index is not None:
        split = args.split or ID_TEST_SPLIT
        if split not in manifest.splits:
            raise UnknownSplit(f"split {split!r} not in pack")
        if not 0 <= args.index < manifest.splits[split]:
            raise ConfigError(
                f"--index {args.index} out of range for split {split!r} "
                f"({manifest.splits[split]} rows)")
        for layer in manifest.layers:
            rows[layer.name] = pack.matrix(layer.name, split).data[args.index].astype(np.float64)
    else:
        rows = _sample_from_vectors(manifest, args.vector)

    p_entries = []
    layer_names = []
    for layer in manifest.layers:
        cfg = scorers[layer.name]
        cal = pack.matrix(layer.name, CALIBRATION_SPLIT)
        index = build_knn_index(cal, cfg) if cfg.method == "knn" else None
        if tables_dir:
            table = calibrator.load_table(tables_dir, layer.name, cfg.method)
        else:
            if cfg.method == "knn":
                sv = score_layer(cal, cfg, index, exclude_self=True, threads=threads)
            else:
                sv = score_layer(cal, cfg)
            table = calibrator.fit_calibration(sv)
        one = FeatureMatrix(data=rows[layer.name][None, :].astype(np.float32),
                            layer=layer, split="query")
        sv = score_layer(one, cfg, index, threads=threads)
        p_entries.append(calibrator.p_value(table, float(sv.values[0])))
        layer_names.append(layer.name)

    pvec = PValueVector(values=np.asarray(p_entries), layers=layer_names)
    verdicts = {}
    for mc in methods:
        res = combine(pvec, mc)
        verdicts[mc.method] = {
            "decision": res.decision.value,
            "statistic": res.statistic,
            "rejected_layers": list(res.rejected_layers),
            "m0_hat": res.m0_hat,
        }
    payload = {
        "alpha": methods[0].alpha,
        "p_values": {name: p for name, p in zip(layer_names, p_entries)},
        "methods": verdicts,
    }
    print(json.dumps(payload, indent=2))
    return 0


# entry point ---------------------------------------------------------------------

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mlod",
        description="Layer-wise OOD detection: score, calibrate, fuse, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, with_eval_flags=True):
        p.add_argument("--config", help="JSON run config; flags override its fields")
        p.add_argument("--pack", help="feature pack directory")
        p.add_argument("--alpha", type=float, help="detection level (default 0.05)")
        p.add_argument("--method", action="append", choices=METHODS,
                       help="fusion rule; repeat for several")
        p.add_argument("--k", type=int, help="k for the knn scorer")
        p.add_argument("--temperature", type=float, help="temperature for energy/odin")
        p.add_argument("--threads", type=int,
                       help="query-block parallelism (default MLOD_THREADS or cores)")
        p.add_argument("--quiet", action="store_true", help="suppress the summary")

    p_synth = sub.add_parser("synth", help="write a synthetic feature pack")
    p_synth.add_argument("--scenario", choices=synthgen.SCENARIOS)
    p_synth.add_argument("--spec", help="JSON file with SynthSpec fields")
    p_synth.add_argument("--seed", type=int, help="override the spec seed")
    p_synth.add_argument("--out", required=True, help="pack directory to create")
    p_synth.add_argument("--quiet", action="store_true")
    p_synth.set_defaults(func=cmd_synth)

    p_cal = sub.add_parser("calibrate", help="fit and persist calibration tables")
    common(p_cal)
    p_cal.add_argument("--out", help="directory for calib_<layer>_<scorer>.bin files")
    p_cal.set_defaults(func=cmd_calibrate)

    p_eval = sub.add_parser("eval", help="full evaluation with report and figures")
    common(p_eval)
    p_eval.add_argument("--out", help="output directory (default eval_out)")
    p_eval.add_argument("--grid-size", type=int, help="alpha sweep size (default 2001)")
    p_eval.add_argument("--target-tpr", type=float, help="TPR target (default 0.95)")
    p_eval.add_argument("--no-figures", action="store_true", help="skip figure rendering")
    p_eval.set_defaults(func=cmd_eval)

    p_det = sub.add_parser("detect", help="fuse one sample and print JSON verdicts")
    common(p_det)
    p_det.add_argument("--index", type=int, help="row index within --split")
    p_det.add_argument("--split", help="split for --index (default test_id)")
    p_det.add_argument("--vector", action="append", default=[],
                       metavar="LAYER=FILE", help="raw f32le vector file per layer")
    p_det.add_argument("--tables", help="directory of persisted calibration tables")
    p_det.set_defaults(func=cmd_detect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except _USAGE_ERRORS as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    except MlodError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
