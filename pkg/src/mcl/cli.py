"""Command-line entry point: ``mcl <subcommand> ...``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure
(including training collapse), 3 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import config as cfgmod
from .errors import ConfigurationError, MCLError

log = logging.getLogger("mcl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3


class MissingPathError(FileNotFoundError):
    def __init__(self, problems):
        super().__init__("missing input paths:\n  " + "\n  ".join(problems))
        self.problems = problems


class _Parser(argparse.ArgumentParser):
    """argparse reports problems as configuration errors instead of exiting."""

    def error(self, message):
        raise ConfigurationError(f"{self.prog}: {message}")


class _JsonFormatter(logging.Formatter):
    def format(self, record):
        entry = {"time": self.formatTime(record), "level": record.levelname, "logger": record.name,
                 "message": record.getMessage()}
        if record.exc_info:
            entry["exc"] = self.formatException(record.exc_info)
        return json.dumps(entry, sort_keys=True)


def setup_logging(level: str = "INFO", as_json: bool = False) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(_JsonFormatter() if as_json else logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


# --- argument parsing -------------------------------------------------------------------

_PATH_ARGS = {"config": "config file", "manifest": "slide manifest", "ckpt": "checkpoint", "resume": "resume checkpoint",
              "image": "image", "spec": "synthetic spec", "splits": "splits file"}


def _config_flags(parser) -> None:
    group = parser.add_argument_group("configuration overrides (take precedence over --config)")
    for key in cfgmod.known_keys():
        if key in ("mode", "seed"):
            continue
        group.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", default=argparse.SUPPRESS, metavar="V")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat TOML config file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--log-json", action="store_true", help="structured JSON-lines logs on stderr")
    _config_flags(common)

    parser = _Parser(prog="mcl", description="Mutual contrastive low-rank learning for paired FFPE/frozen slides.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("preprocess", parents=[common], help="segment, tile, filter and crop slides into a patch store")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("train", parents=[common], help="train and write checkpoints plus a report")
    p.add_argument("--mode", choices=cfgmod.MODES, default=argparse.SUPPRESS)
    p.add_argument("--resume")
    p.add_argument("--splits", help="JSON with train/val/test patient lists (default: seeded stratified split)")

    p = sub.add_parser("eval", parents=[common], help="patient-level metrics from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--modality", choices=("ffpe", "frozen", "both"), default="both")
    p.add_argument("--splits")
    p.add_argument("--out", required=True)

    p = sub.add_parser("cam", parents=[common], help="class activation heatmap for one crop")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--grade", required=True, help="II, III, IV or a class index")
    p.add_argument("--modality", choices=("ffpe", "frozen"), default="ffpe")
    p.add_argument("--out", required=True)

    p = sub.add_parser("export-latents", parents=[common], help="per-crop latent vectors as CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--layer", choices=("h", "z_nmc", "z_lr"), default="h")
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--modality", choices=("ffpe", "frozen", "both"), default="both")
    p.add_argument("--splits")
    p.add_argument("--out", required=True)

    p = sub.add_parser("config", parents=[common], help="print the resolved configuration as commented TOML")

    p = sub.add_parser("synth", help="synthetic benchmark")
    ssub = p.add_subparsers(dest="synth_command", required=True, parser_class=_Parser)
    g = ssub.add_parser("gen", parents=[common], help="write synthetic slides, manifest and splits")
    g.add_argument("--spec")
    g.add_argument("--out", required=True)
    c = ssub.add_parser("compare", parents=[common], help="train/test several modes and loss settings")
    c.add_argument("--spec")
    c.add_argument("--modes", default="single,mixed,mutual")
    c.add_argument("--losses", default="")
    c.add_argument("--work", help="working directory for data and runs (default: next to --out)")
    c.add_argument("--out", required=True)
    t = ssub.add_parser("tau-sweep", parents=[common], help="mutual training across temperatures")
    t.add_argument("--spec")
    t.add_argument("--taus", default="1,0.5,0.1,0.05")
    t.add_argument("--work")
    t.add_argument("--out", required=True)
    return parser


def _overrides(args) -> dict:
    values = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
    for key in ("mode", "seed"):
        if key in vars(args):
            values[key] = getattr(args, key)
    return values


def parse_and_validate(argv) -> tuple[argparse.Namespace, cfgmod.GlobalConfig]:
    """Parse ``argv`` and resolve defaults < config file < flags.

    Every problem found is reported together: bad values raise
    :class:`ConfigurationError`, missing input files :class:`MissingPathError`.
    """
    args = build_parser().parse_args(argv)
    missing = [f"{_PATH_ARGS[name]} not found: {getattr(args, name)}" for name in _PATH_ARGS
               if getattr(args, name, None) and not Path(getattr(args, name)).exists()]
    problems = []
    values = {}
    if getattr(args, "config", None) and Path(args.config).exists():
        try:
            values = cfgmod.read_config_file(args.config)
        except ConfigurationError as exc:
            problems += exc.problems
    args.file_values = dict(values)
    values.update(_overrides(args))
    cfg = None
    try:
        cfg = cfgmod.build_config(values)
    except ConfigurationError as exc:
        problems += exc.problems
    if problems:
        raise ConfigurationError("invalid configuration:\n  " + "\n  ".join(problems + missing), problems + missing)
    if missing:
        raise MissingPathError(missing)
    return args, cfg


# --- subcommands ------------------------------------------------------------------------


def _write_json(path, payload) -> None:
    from .io import write_json

    write_json(Path(path), payload)


def _partitions(data_dir, splits_path, seed, pipeline):
    """Train/val/test datasets from a patch store and an explicit or seeded split."""
    from .data import DatasetSplit, check_no_leakage, load_patch_store, split_dataset

    data_dir = Path(data_dir)
    if not (data_dir / "patch_manifest.json").exists():
        raise FileNotFoundError(f"no patch store at {data_dir} (run `mcl preprocess` first)")
    everything = load_patch_store(data_dir, crop_size=pipeline.crop_size, max_crops_per_bag=pipeline.max_crops_per_bag)
    candidates = [Path(splits_path)] if splits_path else [data_dir / "splits.json", data_dir.parent / "splits.json"]
    for path in candidates:
        if path.exists():
            raw = json.loads(path.read_text())
            split = DatasetSplit(*(sorted(p for p in raw[k] if p in everything.ffpe) for k in ("train", "val", "test")))
            break
    else:
        split = split_dataset({p: everything.ffpe[p].grade for p in everything.patients}, seed=seed)
    check_no_leakage(split)
    return {name: everything.subset(ids) for name, ids in zip(("train", "val", "test"), split)}


def cmd_preprocess(args, cfg) -> int:
    from .data import PreprocessParams, preprocess, read_manifest

    records = read_manifest(args.manifest)
    manifest = preprocess(records, args.out, PreprocessParams.from_pipeline(cfg.pipeline), cfg.train.seed, args.workers)
    log.info("preprocessed %d slides into %s: %s", len(records), args.out, manifest["counts"])
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    from .trainer import fit

    if not cfg.data_dir:
        raise ConfigurationError("train needs data_dir (a patch store written by `mcl preprocess`)")
    parts = _partitions(cfg.data_dir, args.splits, cfg.train.seed, cfg.pipeline)
    result = fit(cfg, parts["train"], parts["val"], Path(cfg.out_dir), resume=args.resume)
    if result.collapsed:
        c = result.report["collapse"]
        log.error("collapse at step %d (epoch %d): %s; partial report in %s", c["step"], c["epoch"], c["reason"],
                  Path(cfg.out_dir) / "train_report.json")
        return EXIT_RUNTIME
    log.info("best epoch %s, report written to %s", result.report["best_epoch"], cfg.out_dir)
    return EXIT_OK


def _load(args, cfg):
    """Models from ``--ckpt`` plus the config they were trained with (data_dir may be overridden)."""
    from .model import load_checkpoint
    from .trainer import load_models

    models = load_models(args.ckpt)
    trained = cfgmod.build_config(json.loads(load_checkpoint(args.ckpt)["config"]))
    data_dir = getattr(args, "cfg_data_dir", None) or (cfg.data_dir if cfg.data_dir else trained.data_dir)
    return models, trained, data_dir


def _modalities(models, choice):
    wanted = ("ffpe", "frozen") if choice == "both" else (choice,)
    absent = [m for m in wanted if m not in models.modalities]
    if absent:
        raise ConfigurationError(f"a {models.mode} checkpoint has no {'/'.join(absent)} branch")
    return wanted


def cmd_eval(args, cfg) -> int:
    from .inference import evaluate

    models, trained, data_dir = _load(args, cfg)
    modalities = _modalities(models, args.modality)
    parts = _partitions(data_dir, args.splits, trained.train.seed, trained.pipeline)
    report = evaluate(models, parts[args.split], modalities, soft_vote=trained.train.soft_vote)
    report.update(split=args.split, config_hash=trained.hash(), config=trained.to_flat())
    _write_json(args.out, report)
    for m, entry in report["modalities"].items():
        log.info("%s %s accuracy %.4f over %d patients", args.split, m, entry["accuracy"], entry["num_patients"])
    return EXIT_OK


def cmd_cam(args, cfg) -> int:
    from .data import GRADES, load_image, parse_grade
    from .inference import compute_cam, save_heatmap

    models, trained, _ = _load(args, cfg)
    _modalities(models, args.modality)
    grade = int(args.grade) if args.grade.isdigit() else parse_grade(args.grade)
    crop = load_image(args.image)
    cam = compute_cam(models.branch(args.modality), crop, grade)
    save_heatmap(args.out, cam, crop)
    _write_json(str(args.out) + ".json", {"config_hash": trained.hash(), "grade": GRADES[grade] if grade < len(GRADES) else grade,
                                          "modality": args.modality, "image": str(args.image)})
    return EXIT_OK


def cmd_export_latents(args, cfg) -> int:
    from .inference import export_latents

    models, trained, data_dir = _load(args, cfg)
    modalities = _modalities(models, args.modality)
    parts = _partitions(data_dir, args.splits, trained.train.seed, trained.pipeline)
    rows = export_latents(models, parts[args.split], args.layer, args.out, modalities)
    _write_json(str(args.out) + ".json", {"config_hash": trained.hash(), "layer": args.layer, "rows": rows,
                                          "split": args.split, "modalities": list(modalities)})
    log.info("wrote %d latent rows to %s", rows, args.out)
    return EXIT_OK


def cmd_config(args, cfg) -> int:
    sys.stdout.write(cfgmod.render_config(cfg))
    return EXIT_OK


def _work_dir(args) -> Path:
    return Path(args.work) if args.work else Path(args.out).resolve().parent / "synth-work"


def _synth_base(spec, args):
    """Spec-implied settings < config file < flags."""
    values = dict(spec.config_values())
    values.update(getattr(args, "file_values", {}))
    values.update(_overrides(args))
    return cfgmod.build_config(values)


def cmd_synth(args, cfg) -> int:
    from . import synthetic

    spec = synthetic.load_spec(args.spec, **({"seed": args.seed} if "seed" in vars(args) else {}))
    if args.synth_command == "gen":
        records = synthetic.generate_synthetic_dataset(spec, args.out)
        log.info("wrote %d synthetic slides to %s", len(records), args.out)
        return EXIT_OK
    base = _synth_base(spec, args)
    if args.synth_command == "compare":
        modes = [m for m in args.modes.split(",") if m]
        loss_names = [x for x in args.losses.split(",") if x]
        experiments = synthetic.mode_experiments(modes) + synthetic.loss_experiments(loss_names)
        report = synthetic.run_comparison(spec, experiments, _work_dir(args), base=base, out=args.out, cache={})
        for row in report["rows"]:
            log.info("%s: %s (%s)", row["name"], {m: v["accuracy"] for m, v in row["metrics"].items()}, row["status"])
        return EXIT_OK
    try:
        taus = [float(t) for t in args.taus.split(",") if t]
    except ValueError:
        raise ConfigurationError(f"--taus must be comma-separated numbers, got {args.taus!r}") from None
    report = synthetic.temperature_sweep(spec, taus, _work_dir(args), base=base, out=args.out, cache={})
    for row in report["rows"]:
        log.info("tau=%g ffpe=%.4f frozen=%.4f collapsed=%s", row["tau"], row["ffpe"], row["frozen"], row["collapsed"])
    return EXIT_OK


COMMANDS = {
    "preprocess": cmd_preprocess,
    "train": cmd_train,
    "eval": cmd_eval,
    "cam": cmd_cam,
    "export-latents": cmd_export_latents,
    "config": cmd_config,
    "synth": cmd_synth,
}


def run(args, cfg) -> int:
    """Dispatch a parsed command and map failures to exit codes."""
    try:
        return COMMANDS[args.command](args, cfg)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("I/O failure: %s", exc)
        return EXIT_IO
    except (MCLError, RuntimeError, ValueError, ArithmeticError) as exc:
        log.exception("runtime failure: %s", exc)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    setup_logging("INFO", "--log-json" in argv)
    try:
        args, cfg = parse_and_validate(argv)
    except ConfigurationError as exc:
        log.error("%s", exc)
        return EXIT_CONFIG
    except MissingPathError as exc:
        log.error("%s", exc)
        return EXIT_IO
    setup_logging(cfg.log_level, args.log_json)
    return run(args, cfg)


if __name__ == "__main__":
    sys.exit(main())
