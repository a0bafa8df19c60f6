"""``selg`` command line: synth-data, train, finetune, evaluate, report, inspect.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path

from ._validation import InvalidInputError

log = logging.getLogger("selg")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class ConfigError(Exception):
    """A configuration problem, reported with the offending field."""


# --------------------------------------------------------------------------
# config parsing


def _load_json(path):
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}: {err.msg}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return data


def _check_fields(section, data, cls, allowed_extra=()):
    known = {f.name for f in fields(cls)} | set(allowed_extra)
    for key in data:
        if key not in known:
            raise ConfigError(f"{section}: unknown field '{key}' (expected one of {sorted(known)})")


def _build(section, factory, data):
    try:
        return factory(data)
    except InvalidInputError as err:
        raise ConfigError(f"{section}: {err}")
    except (TypeError, ValueError, KeyError) as err:
        raise ConfigError(f"{section}: bad value ({err})")


def sim_config(data, seed=None):
    from .datasim import MissingPolicy, SimConfig

    _check_fields("sim", data, SimConfig)
    if "missing" in data:
        _check_fields("sim.missing", data["missing"], MissingPolicy)
    if seed is not None:
        data = {**data, "seed": seed}
    return _build("sim", SimConfig.from_dict, data)


def model_config(data):
    """``{"variant": name, "scale": "desk"|"paper", "separator": {...}, "lip_encoder": "lite"|"resnet18"}``."""
    from .model import VARIANTS, ModelConfig, desk_config
    from .separator import SeparatorConfig
    from .visual import LipEncoderConfig

    allowed = {"variant", "scale", "separator", "lip_encoder"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"model: unknown field '{key}' (expected one of {sorted(allowed)})")
    name = data.get("variant", "selg")
    if name not in VARIANTS:
        raise ConfigError(f"model.variant: unknown variant '{name}' (expected one of {sorted(VARIANTS)})")
    sep = data.get("separator", {})
    _check_fields("model.separator", sep, SeparatorConfig)
    scale = data.get("scale", "desk")
    if scale not in ("desk", "paper"):
        raise ConfigError(f"model.scale: expected 'desk' or 'paper', got '{scale}'")

    def make(_):
        if scale == "desk":
            cfg = desk_config(name, **sep)
        else:
            cfg = ModelConfig(variant=VARIANTS[name], separator=SeparatorConfig(**sep))
        lip = data.get("lip_encoder")
        if lip is not None:
            if lip not in ("lite", "resnet18"):
                raise InvalidInputError(f"lip_encoder must be 'lite' or 'resnet18', got '{lip}'")
            cfg = replace(cfg, lip=LipEncoderConfig() if lip == "lite" else LipEncoderConfig.faithful())
        return cfg

    return _build("model", make, None)


def train_config(data, seed=None, deterministic=None):
    from .losses import LossConfig
    from .training import TrainConfig

    _check_fields("train", data, TrainConfig)
    if "loss" in data:
        _check_fields("train.loss", data["loss"], LossConfig)
    data = dict(data)
    if seed is not None:
        data["seed"] = seed
    if deterministic:
        data["deterministic"] = True
    return _build("train", TrainConfig.from_dict, data)


def _run_file(args):
    data = _load_json(args.config)
    allowed = {"model", "train", "manifest", "teacher", "init"}
    for key in data:
        if key not in allowed:
            raise ConfigError(f"run config: unknown field '{key}' (expected one of {sorted(allowed)})")
    return data


def _manifest_path(args, data):
    path = args.manifest or data.get("manifest")
    if path is None:
        raise ConfigError("no manifest given (use --manifest or the 'manifest' config field)")
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"manifest not found: {path}")
    return path


# --------------------------------------------------------------------------
# commands


def cmd_synth_data(args):
    from .datasim import build_corpus

    cfg = sim_config(_load_json(args.config), seed=args.seed)
    if args.out is None:
        raise ConfigError("--out is required")
    rows = build_corpus(cfg, args.out, jobs=args.jobs)
    print(f"wrote {len(rows)} samples to {args.out}")
    for split in ("train", "val", "test"):
        part = [r for r in rows if r["split"] == split]
        if not part:
            continue
        lip_missing = sum(r["lip_path"] is None for r in part) / len(part)
        with_lip = [r for r in part if r["lip_path"] is not None]
        gesture_missing = sum(r["gesture_path"] is None for r in with_lip) / max(len(with_lip), 1)
        print(f"  {split:5s} n={len(part):5d}  lip missing {lip_missing:6.1%}  "
              f"gesture missing (lip present) {gesture_missing:6.1%}")
    return EXIT_OK


def _datasets(manifest):
    from .training import ManifestDataset

    return ManifestDataset(manifest, "train"), ManifestDataset(manifest, "val")


def _teacher(path):
    from .model import load_checkpoint

    if path is None:
        return None
    model, _ = load_checkpoint(path)
    return model


def cmd_train(args):
    from .training import train

    data = _run_file(args)
    mcfg = model_config(data.get("model", {}))
    tcfg = train_config(data.get("train", {}), seed=args.seed, deterministic=args.deterministic)
    manifest = _manifest_path(args, data)
    if args.out is None:
        raise ConfigError("--out is required")
    train_data, val_data = _datasets(manifest)
    if len(train_data) == 0:
        raise ConfigError(f"{manifest}: no train samples")
    result = train(mcfg, train_data, val_data if len(val_data) else None, tcfg, out_dir=args.out,
                   init=data.get("init"), teacher=_teacher(data.get("teacher")))
    print(f"{result.stopped} after {len(result.history)} epochs / {result.steps} steps; "
          f"best val loss {result.best_val:.3f}; checkpoint {result.best_path}")
    return EXIT_OK


def cmd_finetune(args):
    from .training import finetune_infonce

    data = _run_file(args)
    tcfg = train_config(data.get("train", {}), seed=args.seed, deterministic=args.deterministic)
    manifest = _manifest_path(args, data)
    base = args.checkpoint or data.get("init")
    if base is None:
        raise ConfigError("finetune needs --checkpoint (the SI-SNR-only base model)")
    if args.out is None:
        raise ConfigError("--out is required")
    train_data, val_data = _datasets(manifest)
    result = finetune_infonce(base, train_data, val_data if len(val_data) else None, tcfg, out_dir=args.out,
                              teacher=_teacher(data.get("teacher")))
    print(f"{result.stopped} after {len(result.history)} epochs / {result.steps} steps; "
          f"best val loss {result.best_val:.3f}; checkpoint {result.best_path}")
    return EXIT_OK


def cmd_evaluate(args):
    from .evaluation import evaluate, write_report
    from .model import load_checkpoint
    from .training import ManifestDataset

    if args.checkpoint is None:
        raise ConfigError("evaluate needs --checkpoint")
    if not Path(args.checkpoint).exists():
        raise ConfigError(f"checkpoint not found: {args.checkpoint}")
    manifest = _manifest_path(args, {})
    if args.out is None:
        raise ConfigError("--out is required")
    model, _ = load_checkpoint(args.checkpoint)
    data = ManifestDataset(manifest, args.split)
    if len(data) == 0:
        raise ConfigError(f"{manifest}: no samples in split '{args.split}'")
    report = evaluate(model, data, variant_name=args.name or Path(args.checkpoint).stem)
    write_report(report, args.out)
    d = report.to_json()
    print(f"{d['variant']}: full {d['full']} dB  w/o-missing {d['wo_missing']} dB  "
          f"w/-missing {d['w_missing']} dB  (n={d['counts']['full']})")
    return EXIT_OK


def cmd_report(args):
    from .evaluation import comparison_table, report_from_json
    from .model import VARIANTS

    if not args.reports:
        raise ConfigError("report needs at least one evaluation directory or report.json")
    reports = []
    for item in args.reports:
        path = Path(item)
        path = path / "report.json" if path.is_dir() else path
        if not path.exists():
            raise ConfigError(f"report not found: {path}")
        reports.append(report_from_json(json.loads(path.read_text())))
    table = comparison_table(reports, VARIANTS)
    print(table, end="")
    if args.out is not None:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.md").write_text(table)
        for rep in reports:
            hist = rep.histogram
            if hist.get("counts"):
                _plot_histogram(hist, out / f"histogram_{rep.variant}.png", rep.variant)
    return EXIT_OK


def _plot_histogram(hist, path, title):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    edges, counts = hist["edges"], hist["counts"]
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.bar(edges[:-1], counts, width=edges[1] - edges[0], align="edge", edgecolor="black", linewidth=0.4)
    ax.set_xlabel("SI-SNRi (dB)")
    ax.set_ylabel("samples")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_inspect(args):
    from .datasim import read_manifest

    manifest = _manifest_path(args, {})
    rows = [r for r in read_manifest(manifest) if r["id"] == args.sample_id]
    if not rows:
        raise ConfigError(f"{manifest}: no sample with id '{args.sample_id}'")
    row = rows[0]
    print(f"id:        {row['id']}")
    print(f"split:     {row['split']}")
    print(f"seed:      {row['seed']}")
    print(f"speakers:  {row.get('speakers', [])}")
    print(f"snr_db:    {', '.join(f'{v:.2f}' for v in row['snr_db'])}")
    print(f"has_lip:   {row['lip_path'] is not None}")
    print(f"has_gesture: {row['gesture_path'] is not None}")
    print(f"mixture:   {row['mixture_path']}")
    return EXIT_OK


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "inspect": cmd_inspect,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--deterministic", action="store_true", help="force deterministic kernels")
    common.add_argument("--jobs", type=int, default=1, help="worker processes (synth-data)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="selg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth-data", parents=[common], help="simulate a synthetic audio-visual corpus")
    for name, text in (("train", "train a system"), ("finetune", "InfoNCE fine-tuning from a base checkpoint")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--manifest", help="corpus manifest.jsonl (overrides the config field)")
        if name == "finetune":
            p.add_argument("--checkpoint", help="SI-SNR-only base checkpoint")
    p = sub.add_parser("evaluate", parents=[common], help="SI-SNRi evaluation of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--name", help="system name used in the report")
    p = sub.add_parser("report", parents=[common], help="Table-1 style comparison of evaluation reports")
    p.add_argument("reports", nargs="*", help="evaluation directories or report.json files")
    p = sub.add_parser("inspect", parents=[common], help="print the metadata of one sample")
    p.add_argument("sample_id")
    p.add_argument("--manifest")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if args.jobs < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    if os.environ.get("SELG_CACHE"):
        log.info("intermediate artifacts under %s", os.environ["SELG_CACHE"])
    try:
        return COMMANDS[args.command](args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (InvalidInputError, OSError, RuntimeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
