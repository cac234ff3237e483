"""Command line entry point: ``svfthick <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import pipeline
from .config import ConfigError, PipelineConfig
from .optim import DivergenceError, register_iterative
from .phantom import generate_cohort, make_phantom
from .regressor import (infer_velocity, init_model, load_checkpoint, save_checkpoint, select_model,
                        oracle_thicknesses, train_amortized)
from .thickness import thickness_report
from .volume import VectorField, VolumeFormatError, load_volume, store_volume

log = logging.getLogger("svfthick")


class UsageError(Exception):
    pass


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_report(report, out: Path) -> None:
    (out / "thickness.csv").write_text(report.to_csv())
    (out / "thickness.json").write_text(report.to_json() + "\n")
    print(f"global mean thickness {report.global_mean_mm:.4f} mm "
          f"(std {report.global_std_mm:.4f} mm, {report.count} interface voxels)")


def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"input file not found: {path}")
    return path


def _load_inputs(args):
    wm = load_volume(_require(args.wm), "pv")
    wmgm = load_volume(_require(args.wmgm), "pv")
    if wm.meta != wmgm.meta:
        raise VolumeFormatError(f"wm and wmgm grids differ: {wm.meta} vs {wmgm.meta}")
    labels = load_volume(_require(args.labels), "label") if args.labels else None
    return wm, wmgm, labels


def _store_fields(result, meta, out: Path) -> None:
    for name, arr in (("velocity", result.velocity), ("phi_forward", result.phi_forward),
                      ("phi_reverse", result.phi_reverse)):
        store_volume(VectorField(arr, meta), out / f"{name}.mvol")
    _write_json(out / "loss.json", {**result.loss.as_dict(), "iterations": result.iterations})


def cmd_phantom(args, cfg: PipelineConfig) -> int:
    c = cfg.raw["phantom"]
    base = cfg.phantom_spec()
    entries = generate_cohort([base] * int(c["subjects"]), c["levels"], cfg.seed)
    manifest = pipeline.write_cohort(entries, args.out)
    print(f"wrote {len(entries)} phantoms to {manifest}")
    return 0


def cmd_register(args, cfg: PipelineConfig) -> int:
    wm, wmgm, labels = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = register_iterative(wm, wmgm, cfg.iterative_config())
    _store_fields(result, wm.meta, out)
    _write_report(thickness_report(result, wm, wmgm, wm.meta, labels, *cfg.thresholds), out)
    return 0


def _split_subjects(rows, n_val: int):
    subjects = sorted({r.subject for r in rows})
    if n_val >= len(subjects):
        raise UsageError(f"need more than {n_val} subjects to hold {n_val} out for validation")
    val_subjects = set(subjects[len(subjects) - n_val:]) if n_val > 0 else set()
    train = [r for r in rows if r.subject not in val_subjects]
    # one validation pair per subject, at its lowest atrophy level
    val = {}
    for r in rows:
        if r.subject in val_subjects and (r.subject not in val or r.atrophy_mm < val[r.subject].atrophy_mm):
            val[r.subject] = r
    return train, [val[s] for s in sorted(val)]


def cmd_train(args, cfg: PipelineConfig) -> int:
    rows = pipeline.read_manifest(_require(args.manifest))
    tcfg = cfg.train_config()
    n_val = int(cfg.raw["train"]["val_subjects"])
    train_rows, val_rows = _split_subjects(rows, n_val)
    train_pairs = [pipeline.load_pair(r) for r in train_rows]
    val_pairs = [pipeline.load_pair(r) for r in val_rows]
    select = bool(cfg.raw["train"]["select"]) and len(val_pairs) >= 2
    oracle = oracle_thicknesses(val_pairs, cfg.iterative_config()) if select else None
    checkpoints = train_amortized(train_pairs, tcfg, val_pairs or None, oracle)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ck in checkpoints:
        save_checkpoint(ck, out / f"epoch_{ck.epoch:04d}.ckpt")
    best = checkpoints[-1]
    if select:
        best = select_model(checkpoints, val_pairs, oracle=oracle)
    save_checkpoint(best, out / "best.ckpt")
    _write_json(out / "checkpoints.json", {
        "best_epoch": best.epoch,
        "checkpoints": [{"epoch": c.epoch, "val_loss": c.val_loss, "metric": c.metric} for c in checkpoints],
    })
    print(f"trained {tcfg.epochs} epochs; best checkpoint epoch {best.epoch} (ICC {best.metric})")
    return 0


def cmd_thickness(args, cfg: PipelineConfig) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint))
    wm, wmgm, labels = _load_inputs(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    icfg = cfg.iterative_config()
    result = infer_velocity(ckpt.model, wm, wmgm, icfg.loss, icfg.image_sigma)
    _store_fields(result, wm.meta, out)
    _write_report(thickness_report(result, wm, wmgm, wm.meta, labels, *cfg.thresholds), out)
    return 0


def cmd_eval(args, cfg: PipelineConfig) -> int:
    result_sets = {}
    for path in args.results or []:
        result_sets[Path(path).stem] = pipeline.read_results(_require(path))
    if args.method:
        if not args.manifest:
            raise UsageError("--method needs --manifest")
        rows = pipeline.read_manifest(_require(args.manifest))
        model = load_checkpoint(_require(args.checkpoint)).model if args.method == "amortized" else None
        if args.method == "amortized" and model is None:
            raise UsageError("--method amortized needs --checkpoint")
        results = pipeline.measure_cohort(rows, args.method, cfg.iterative_config(), model,
                                          cfg.thresholds, cfg.threads)
        result_sets[args.method] = results
        if args.save_results:
            pipeline.write_results(results, args.save_results)
    if not result_sets:
        raise UsageError("eval needs --results files or --method with --manifest")
    report = pipeline.evaluation_report(result_sets)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def cmd_bench(args, cfg: PipelineConfig) -> int:
    if args.wm:
        wm, wmgm, _ = _load_inputs(args)
    else:
        ph = make_phantom(replace(cfg.phantom_spec(), dims=tuple(args.dims)))
        wm, wmgm = ph.wm, ph.wmgm
    if args.checkpoint:
        model = load_checkpoint(_require(args.checkpoint)).model
    else:
        model = init_model(cfg.train_config().unet, cfg.seed)
    report = pipeline.benchmark(wm, wmgm, model, cfg.iterative_config())
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="svfthick", description="Cortical thickness by velocity-field registration.")
    parser.add_argument("--config", help="JSON configuration file")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. --set iterative.max_iters=100")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", dest="sub_config", default=None, help=argparse.SUPPRESS)
    common.add_argument("--set", dest="sub_set", action="append", default=[], help=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("phantom", parents=[common], help="generate a phantom cohort and its manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    for name, func, helptext in (("register", cmd_register, "iterative registration of one pair"),
                                 ("thickness", cmd_thickness, "single-pass thickness with a checkpoint")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--wm", required=True)
        p.add_argument("--wmgm", required=True)
        p.add_argument("--labels")
        p.add_argument("--out", required=True)
        if name == "thickness":
            p.add_argument("--checkpoint", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("train", parents=[common], help="train the velocity regressor on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="agreement and atrophy-sensitivity statistics")
    p.add_argument("--manifest")
    p.add_argument("--method", choices=("iterative", "amortized"))
    p.add_argument("--checkpoint")
    p.add_argument("--results", action="append", help="results CSV (repeatable)")
    p.add_argument("--save-results", help="write the computed per-instance results here")
    p.add_argument("--out", help="write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", parents=[common], help="time iterative against single-pass registration")
    p.add_argument("--wm")
    p.add_argument("--wmgm")
    p.add_argument("--labels")
    p.add_argument("--checkpoint")
    p.add_argument("--dims", type=int, nargs=3, default=[64, 64, 64])
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not getattr(args, "func", None):
        parser.print_usage(sys.stderr)
        print("svfthick: error: a subcommand is required", file=sys.stderr)
        return 2
    try:
        cfg = PipelineConfig.load(args.sub_config or args.config, args.set + args.sub_set)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"svfthick: config error: {exc}", file=sys.stderr)
        return 3
    except FileNotFoundError as exc:
        print(f"svfthick: missing file: {exc}", file=sys.stderr)
        return 4
    except VolumeFormatError as exc:
        print(f"svfthick: bad volume: {exc}", file=sys.stderr)
        return 5
    except DivergenceError as exc:
        print(f"svfthick: diverged: {exc}", file=sys.stderr)
        return 6
    except UsageError as exc:
        print(f"svfthick: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"svfthick: invalid input: {exc}", file=sys.stderr)
        return 7


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
