"""Command-line entry point.

Exit codes: 0 success, 1 the run completed but found data violations,
2 usage or operational error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .annotation import (
    DETAILREFER_SUMMARY,
    DatasetSummary,
    compare_summary,
    dataset_stats,
    load_dataset,
    load_scene_dir,
    validate_dataset,
    write_records,
    write_scene_dir,
)
from .exceptions import DresError, PathUnwritable
from .estimator import DetailBase
from .metrics import MetricsReport, evaluate, read_predictions, report, write_predictions
from .model import load_checkpoint, save_checkpoint
from .pipeline import (
    RECORDS,
    SCENES,
    RunConfig,
    load_data_dir,
    partitions_for,
    samples_from_dir,
)
from .superpoint import OversegmentConfig
from .synth import SynthConfig, gen_dataset, gen_scenes
from .training import train

logger = logging.getLogger("dres3d")

EXIT_OK, EXIT_VIOLATIONS, EXIT_ERROR = 0, 1, 2
FORMATS = ("table", "csv", "structured")


@dataclass
class CommandOutcome:
    exit_code: int
    summary: str
    artifacts: list[str] = field(default_factory=list)


def _write(path: Path, text: str) -> str:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise PathUnwritable(f"cannot write {path}: {exc}") from exc
    return str(path)


def _render(rep, fmt: str, name: str) -> str:
    if fmt == "structured":
        return json.dumps(rep.to_dict(), indent=2, sort_keys=True) + "\n"
    if fmt == "csv":
        return rep.to_csv() if isinstance(rep, MetricsReport) else rep.to_csv(name)
    return rep.to_table(name) + "\n"


def emit_report(rep, fmt: str | None, path, name: str = "model") -> CommandOutcome:
    """Write a metrics report, dataset summary or training log.

    With ``fmt=None`` all three forms are written: ``path`` gets the
    structured JSON and sibling ``.txt`` / ``.csv`` files get the table and CSV.
    """
    path = Path(path)
    if isinstance(rep, list):  # training log
        text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rep)
        return CommandOutcome(EXIT_OK, f"wrote {len(rep)} log records", [_write(path, text)])
    if fmt is not None:
        return CommandOutcome(EXIT_OK, f"wrote {path}", [_write(path, _render(rep, fmt, name))])
    written = [
        _write(path, _render(rep, "structured", name)),
        _write(path.with_suffix(".txt"), _render(rep, "table", name)),
        _write(path.with_suffix(".csv"), _render(rep, "csv", name)),
    ]
    return CommandOutcome(EXIT_OK, _render(rep, "table", name).rstrip(), written)


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, schedule=dataclasses.replace(cfg.schedule, seed=args.seed))
    return cfg


# --- subcommands -----------------------------------------------------------------

def cmd_validate(args) -> CommandOutcome:
    scenes = load_scene_dir(args.scenes)
    descs, violations = load_dataset(args.records, scenes)
    violations = validate_dataset(descs, violations, scenes)
    lines = [f"{len(descs)} descriptions, {len(scenes)} scenes, {len(violations)} violations"]
    lines += [f"  {v}" for v in violations]
    return CommandOutcome(EXIT_VIOLATIONS if violations else EXIT_OK, "\n".join(lines))


def cmd_stats(args) -> CommandOutcome:
    descs, violations = load_dataset(args.records)
    summary = dataset_stats(descs)
    name = args.name or Path(args.records).stem
    if args.out:
        out = emit_report(summary, args.format, args.out, name)
    else:
        out = CommandOutcome(EXIT_OK, _render(summary, args.format or "table", name).rstrip())
    if args.reference:
        ref = (DETAILREFER_SUMMARY if args.reference == "detailrefer"
               else json.loads(Path(args.reference).read_text(encoding="utf-8")))
        checks = compare_summary(summary, ref, args.tolerance)
        out.summary += "\n" + "\n".join(
            f"{'ok  ' if c.ok else 'DIFF'} {c.field}: {c.value:g} vs {c.reference:g} (tolerance {c.tolerance:g})"
            for c in checks)
        if not all(c.ok for c in checks):
            out.exit_code = EXIT_VIOLATIONS
    if violations:
        out.summary += f"\n{len(violations)} violations (run `validate` for details)"
        out.exit_code = EXIT_VIOLATIONS
    return out


def cmd_oversegment(args) -> CommandOutcome:
    scenes = load_scene_dir(args.scenes)
    cfg = OversegmentConfig(k=args.k, color_weight=args.color_weight, scale=args.scale,
                            min_size=args.min_size, target_max_superpoints=args.max_superpoints)
    parts = partitions_for(scenes, cfg, args.out, write_cache=True)
    counts = [p.n_superpoints for p in parts.values()]
    summary = f"{len(parts)} scenes oversegmented into {sum(counts)} superpoints -> {args.out}"
    return CommandOutcome(EXIT_OK, summary, [str(args.out)])


def cmd_synth(args) -> CommandOutcome:
    blob = json.loads(Path(args.config).read_text(encoding="utf-8")) if args.config else {}
    if args.seed is not None:
        blob["seed"] = args.seed
    cfg = SynthConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in blob.items()})
    scenes = gen_scenes(cfg)
    descs = gen_dataset(cfg, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_scene_dir(scenes, out / SCENES)
    write_records(descs, out / RECORDS)
    _write(out / "synth_config.json", json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return CommandOutcome(EXIT_OK, f"{len(scenes)} scenes, {len(descs)} descriptions -> {out}",
                          [str(out)])


def cmd_train(args) -> CommandOutcome:
    cfg = _run_config(args)
    descs, scenes, violations = load_data_dir(args.data)
    if violations:
        lines = [f"{len(violations)} data violations; fix them before training"]
        return CommandOutcome(EXIT_VIOLATIONS, "\n".join(lines + [f"  {v}" for v in violations]))
    samples = samples_from_dir(args.data, cfg, descs, scenes)
    on_epoch = None if args.quiet else (
        lambda r: logger.info("epoch %d  lr %.3g  loss %.4f  mIoU %.4f",
                              r["epoch"], r["lr"], r["total"], r["miou"]))
    result = train(samples, cfg.schedule, cfg.loss, cfg.model, on_epoch=on_epoch)
    save_checkpoint(result.state, args.out)
    artifacts = [str(args.out)]
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log.jsonl")
    artifacts += emit_report(result.log, None, log_path).artifacts
    last = result.log[-1] if result.log else {"total": float("nan"), "miou": float("nan")}
    summary = (f"trained {result.steps} steps on {len(samples)} descriptions; "
               f"final loss {last['total']:.4f}, train mIoU {last['miou']:.4f}")
    return CommandOutcome(EXIT_OK, summary, artifacts)


def cmd_evaluate(args) -> CommandOutcome:
    descs, scenes, violations = load_data_dir(args.data)
    if violations:
        return CommandOutcome(EXIT_VIOLATIONS, "\n".join(
            [f"{len(violations)} data violations"] + [f"  {v}" for v in violations]))
    artifacts = []
    if args.predictions:
        preds = read_predictions(args.predictions, descs, scenes)
    else:
        if not args.ckpt:
            raise DresError("evaluate needs --ckpt or --predictions")
        cfg = _run_config(args)
        state = load_checkpoint(args.ckpt)
        cfg = dataclasses.replace(cfg, model=state.config)
        samples = samples_from_dir(args.data, cfg, descs, scenes)
        est = DetailBase.from_state(state)
        preds = {s.description.description_id: p for s, p in zip(samples, est.predict(samples))}
        if args.save_predictions:
            write_predictions(preds, args.save_predictions)
            artifacts.append(str(args.save_predictions))
    rep = report(evaluate(preds, descs, scenes))
    out = emit_report(rep, None, args.report, args.name)
    out.artifacts = artifacts + out.artifacts
    return out


def cmd_report(args) -> CommandOutcome:
    blob = json.loads(Path(args.input).read_text(encoding="utf-8"))
    if set(blob) <= {"long", "complex", "overall"}:
        rep = MetricsReport.from_dict(blob)
    else:
        rep = DatasetSummary(**blob)
    if args.out:
        return emit_report(rep, args.format, args.out, args.name)
    return CommandOutcome(EXIT_OK, _render(rep, args.format, args.name).rstrip())


# --- parser ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    top = argparse.ArgumentParser(add_help=False)
    top.add_argument("--seed", type=int, default=None, help="override every seed")
    top.add_argument("--quiet", action="store_true", default=False)
    # flags may also follow the subcommand; SUPPRESS keeps them from resetting
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="dres3d", parents=[top],
                                description="Phrase-level 3D referring segmentation toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", metavar="COMMAND")

    s = sub.add_parser("validate", parents=[common], help="check records against scenes")
    s.add_argument("records")
    s.add_argument("scenes", help="directory of *.scene.txt files")
    s.set_defaults(func=cmd_validate)

    s = sub.add_parser("stats", parents=[common], help="dataset statistics")
    s.add_argument("records")
    s.add_argument("--format", choices=FORMATS, default=None)
    s.add_argument("--out", default=None)
    s.add_argument("--name", default=None)
    s.add_argument("--reference", default=None,
                   help="'detailrefer' or a JSON object of expected summary fields")
    s.add_argument("--tolerance", type=float, default=0.10,
                   help="relative tolerance for length-derived fields")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("oversegment", parents=[common], help="cache superpoints per scene")
    s.add_argument("scenes")
    s.add_argument("--out", required=True)
    d = OversegmentConfig()
    s.add_argument("--k", type=int, default=d.k)
    s.add_argument("--color-weight", type=float, default=d.color_weight)
    s.add_argument("--scale", type=float, default=d.scale)
    s.add_argument("--min-size", type=int, default=d.min_size)
    s.add_argument("--max-superpoints", type=int, default=None)
    s.set_defaults(func=cmd_oversegment)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic dataset")
    s.add_argument("--config", default=None, help="JSON object of SynthConfig fields")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("train", parents=[common], help="train a model")
    s.add_argument("--data", required=True)
    s.add_argument("--config", default=None, help="JSON run config")
    s.add_argument("--out", required=True, help="checkpoint path")
    s.add_argument("--log", default=None)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", parents=[common], help="score predictions")
    s.add_argument("--data", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--ckpt")
    src.add_argument("--predictions")
    s.add_argument("--config", default=None)
    s.add_argument("--report", required=True)
    s.add_argument("--save-predictions", default=None)
    s.add_argument("--name", default="model")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("report", parents=[common], help="re-render a structured report")
    s.add_argument("input")
    s.add_argument("--format", choices=FORMATS, default="table")
    s.add_argument("--out", default=None)
    s.add_argument("--name", default="model")
    s.set_defaults(func=cmd_report)
    return p


def dispatch(argv) -> CommandOutcome:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_ERROR
        return CommandOutcome(code, "")
    if args.command is None:
        return CommandOutcome(EXIT_ERROR, parser.format_usage())
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (DresError, OSError, ValueError, KeyError) as exc:
        return CommandOutcome(EXIT_ERROR, f"error: {exc}")


def main(argv=None) -> int:
    outcome = dispatch(sys.argv[1:] if argv is None else argv)
    if outcome.summary:
        stream = sys.stdout if outcome.exit_code != EXIT_ERROR else sys.stderr
        print(outcome.summary, file=stream)
    return outcome.exit_code


if __name__ == "__main__":
    sys.exit(main())
