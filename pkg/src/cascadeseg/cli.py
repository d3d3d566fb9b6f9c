"""Command-line pipeline: phantoms, two-stage training, cascade inference, voting, evaluation.

Every option can come from three places, later ones winning: built-in
defaults, a JSON config file given with ``--config``, and command-line flags.
Config file schema (version 1)::

    {"schema_version": 1, "command": "<subcommand>", "<option>": <value>, ...}

Option keys are the flag names with dashes replaced by underscores. Unknown
keys are rejected. Each command writes its fully resolved config to
``run_config.json`` in its output directory.

Prediction manifests (``predictions.jsonl``) hold one JSON record per line:
``case_id``, ``model_id``, ``stage``, ``labels`` and optionally
``probabilities``; paths are relative to the manifest.
"""

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np

from .data import Case, generate_phantom, load_labels, read_cseg, read_dataset, write_cseg, write_dataset
from .inference import (
    CasePrediction,
    export_attention_maps,
    majority_vote,
    postprocess_labels,
    run_cascades,
)
from .metrics import aggregate, evaluate_case, to_csv, to_pretty
from .models import NetworkConfig, build_network, load_checkpoint, trace_shapes
from .training import LossConfig, TrainConfig, build_expanded_dataset, stage1_samples, train_stage

SCHEMA_VERSION = 1
PRESETS = ("tiny", "full")
# networks whose input exceeds this many voxels need --allow-large
LARGE_VOXELS = 64 ** 3


class CliError(Exception):
    pass


OPTIONS = {
    "gen-phantoms": {
        "out": (None, dict(help="dataset directory to create")),
        "n": (10, dict(type=int, help="number of cases")),
        "seed": (0, dict(type=int, help="global seed")),
        "dims": ([24, 24, 24], dict(type=int, nargs=3, metavar=("D", "H", "W"), help="volume extents")),
        "noise": (0.08, dict(type=float, help="Gaussian noise SD inside the brain")),
    },
    "train": {
        "data": (None, dict(help="dataset directory (from gen-phantoms)")),
        "out": (None, dict(help="output directory for checkpoints and log")),
        "stage": (1, dict(type=int, choices=(1, 2), help="1: single-model training; 2: expanded multi-model training")),
        "preset": ("tiny", dict(help="network/training preset: tiny, full, or a JSON file path")),
        "seed": (0, dict(type=int, help="global seed")),
        "cases": (None, dict(nargs="+", help="case ids to train on (default: all)")),
        "stage1": ([], dict(nargs="+", help="stage-1 checkpoints feeding stage-2 training")),
        "epochs": (None, dict(type=int, help="epochs (default from preset)")),
        "lr0": (None, dict(type=float, help="initial learning rate (default from preset)")),
        "batch_size": (None, dict(type=int, help="batch size (default from preset)")),
        "crop_dims": (None, dict(type=int, nargs=3, metavar=("D", "H", "W"), help="training crop (default from preset)")),
        "checkpoint_epochs": (None, dict(type=int, nargs="+", help="epochs after which to save (default from preset)")),
        "augment": (True, dict(action=argparse.BooleanOptionalAction, help="random intensity shift/scale and flips")),
        "w_l2": (0.1, dict(type=float, help="weight of the reconstruction term")),
        "w_kl": (0.1, dict(type=float, help="weight of the KL term")),
        "model_id": (None, dict(help="checkpoint name prefix (default stage1/stage2)")),
        "resume": (None, dict(help="checkpoint to resume from")),
        "allow_large": (False, dict(action="store_true", help="permit networks above the desk-scale size guard")),
        "dry_run": (False, dict(action="store_true", help="build networks, write shape_trace.json, skip training")),
    },
    "infer": {
        "data": (None, dict(help="dataset directory")),
        "out": (None, dict(help="prediction directory")),
        "stage1": (None, dict(nargs="+", help="stage-1 checkpoints")),
        "stage2": ([], dict(nargs="+", help="stage-2 checkpoints (omit for stage-1 only)")),
        "cases": (None, dict(nargs="+", help="case ids (default: all)")),
        "threshold": (0.5, dict(type=float, help="region probability threshold")),
    },
    "ensemble": {
        "predictions": (None, dict(help="input predictions.jsonl")),
        "out": (None, dict(help="output directory")),
    },
    "postprocess": {
        "predictions": (None, dict(help="input predictions.jsonl")),
        "out": (None, dict(help="output directory")),
        "min_et_voxels": (500, dict(type=int, help="ET below this voxel count is relabelled NCR/NET")),
    },
    "evaluate": {
        "predictions": (None, dict(help="input predictions.jsonl")),
        "data": (None, dict(help="dataset directory with ground-truth labels")),
        "out": (None, dict(help="report directory")),
        "model_id": (None, dict(help="model to evaluate when the manifest holds several")),
    },
    "export-attention": {
        "stage2": (None, dict(help="stage-2 checkpoint with attention gates")),
        "stage1": (None, dict(help="stage-1 checkpoint producing the stage-2 input")),
        "data": (None, dict(help="dataset directory")),
        "case": (None, dict(help="case id")),
        "out": (None, dict(help="output directory")),
        "slices": (True, dict(action=argparse.BooleanOptionalAction, help="also write axial mid-slice PGM images")),
    },
}

REQUIRED = {
    "gen-phantoms": ("out",),
    "train": ("data", "out"),
    "infer": ("data", "out", "stage1"),
    "ensemble": ("predictions", "out"),
    "postprocess": ("predictions", "out"),
    "evaluate": ("predictions", "data", "out"),
    "export-attention": ("stage2", "stage1", "data", "case", "out"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="cascadeseg", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd, opts in OPTIONS.items():
        p = sub.add_parser(cmd, argument_default=argparse.SUPPRESS, help=COMMANDS[cmd].__doc__.split("\n")[0])
        p.add_argument("--config", help="JSON config file (flags override its values)")
        for name, (default, kw) in opts.items():
            kw = dict(kw)
            if default not in (None, [], False) and "help" in kw:
                kw["help"] += f" [default: {default}]"
            p.add_argument("--" + name.replace("_", "-"), dest=name, **kw)
    return parser


def resolve_config(command, namespace):
    """Merge defaults < config file < flags and validate required options."""
    opts = OPTIONS[command]
    cfg = {name: default for name, (default, _) in opts.items()}
    flags = {k: v for k, v in vars(namespace).items() if k not in ("command", "config")}
    path = getattr(namespace, "config", None)
    if path is not None:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}")
        if not isinstance(loaded, dict):
            raise CliError(f"config {path}: top level must be an object")
        version = loaded.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise CliError(f"config {path}: schema_version must be {SCHEMA_VERSION}, got {version!r}")
        cmd = loaded.pop("command", command)
        if cmd != command:
            raise CliError(f"config {path} is for command {cmd!r}, not {command!r}")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise CliError(f"config {path}: unknown keys {unknown}; allowed {sorted(opts)}")
        cfg.update(loaded)
    cfg.update(flags)
    missing = [k for k in REQUIRED[command] if cfg.get(k) in (None, [])]
    if missing:
        raise CliError(f"{command}: missing required option(s) " + ", ".join("--" + m.replace("_", "-") for m in missing))
    return cfg


def _write_run_config(out, command, cfg):
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "run_config.json"), "w") as fh:
        json.dump({"schema_version": SCHEMA_VERSION, "command": command, **cfg}, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_preset(name):
    if name in PRESETS:
        return json.loads(resources.files("cascadeseg").joinpath("presets", f"{name}.json").read_text())
    if not os.path.exists(name):
        raise CliError(f"unknown preset {name!r}: use one of {PRESETS} or a JSON file path")
    with open(name) as fh:
        return json.load(fh)


def _read_manifest(path):
    if not os.path.exists(path):
        raise CliError(f"prediction manifest {path} not found")
    base = os.path.dirname(os.path.abspath(path))
    records = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rec = json.loads(line)
                for key in ("labels", "probabilities"):
                    if key in rec:
                        rec[key] = os.path.join(base, rec[key])
                records.append(rec)
    return records


def _write_manifest(out, records):
    with open(os.path.join(out, "predictions.jsonl"), "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def _load_cases(data, case_ids):
    try:
        cases = read_dataset(data, None if case_ids is None else set(case_ids))
    except FileNotFoundError as exc:
        raise CliError(str(exc))
    if case_ids is not None:
        found = {c.case_id for c in cases}
        missing = [c for c in case_ids if c not in found]
        if missing:
            raise CliError(f"cases not in {data}: {missing}")
        order = {cid: i for i, cid in enumerate(case_ids)}
        cases.sort(key=lambda c: order[c.case_id])
    return cases


def _safe_id(model_id):
    return model_id.replace("+", "__").replace("/", "_")


# ---------------------------------------------------------------------------
# commands


def cmd_gen_phantoms(cfg):
    """Write synthetic 4-channel phantom cases with nested tumor labels."""
    if cfg["n"] < 0:
        raise CliError("--n must be nonnegative")
    cases = []
    for i in range(cfg["n"]):
        image, labels = generate_phantom(cfg["seed"], tuple(cfg["dims"]), noise=cfg["noise"], index=i)
        cases.append(Case(f"case{i:03d}", image, labels))
    try:
        write_dataset(cfg["out"], cases)
    except OSError as exc:
        raise CliError(f"cannot write dataset to {cfg['out']}: {exc}")
    _write_run_config(cfg["out"], "gen-phantoms", cfg)
    print(f"wrote {len(cases)} cases to {cfg['out']}")


def _train_config(cfg, preset, stage):
    defaults = preset[f"train{stage}"]
    pick = lambda k: cfg[k] if cfg[k] is not None else defaults[k]
    cfg.update({k: pick(k) for k in ("epochs", "lr0", "batch_size", "crop_dims", "checkpoint_epochs")})
    return TrainConfig(
        epochs=cfg["epochs"],
        lr0=cfg["lr0"],
        batch_size=cfg["batch_size"],
        crop_dims=tuple(cfg["crop_dims"]),
        augment=cfg["augment"],
        # stage 2: shift/scale only the MRI channels, never the probability maps
        intensity_channels=None if stage == 1 else tuple(range(3, preset["stage2"]["in_channels"])),
        checkpoint_epochs=tuple(cfg["checkpoint_epochs"]),
        loss=LossConfig(cfg["w_l2"], cfg["w_kl"]),
    )


def cmd_train(cfg):
    """Train a stage-1 network, or a stage-2 network on the expanded multi-model dataset."""
    stage = cfg["stage"]
    preset = load_preset(cfg["preset"])
    net_cfg = NetworkConfig.from_dict(preset[f"stage{stage}"])
    if stage == 2 and not cfg["stage1"]:
        raise CliError("train --stage 2 needs --stage1 checkpoints")
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    if cfg["dry_run"]:
        shapes = {}
        for s in (1, 2):
            c = NetworkConfig.from_dict(preset[f"stage{s}"])
            net = build_network(c, cfg["seed"])
            shapes[f"stage{s}"] = {k: list(v) for k, v in trace_shapes(net, (1, c.in_channels) + c.input_dims).items()}
            shapes[f"stage{s}"]["parameters"] = net.num_parameters()
        with open(os.path.join(out, "shape_trace.json"), "w") as fh:
            json.dump(shapes, fh, indent=2)
        _write_run_config(out, "train", cfg)
        print(json.dumps(shapes[f"stage{stage}"]))
        return
    if int(np.prod(net_cfg.input_dims)) > LARGE_VOXELS and not cfg["allow_large"]:
        raise CliError(f"preset {cfg['preset']!r} input {net_cfg.input_dims} exceeds the desk-scale guard; pass --allow-large")
    tcfg = _train_config(cfg, preset, stage)
    cfg["model_id"] = cfg["model_id"] or f"stage{stage}"
    cases = _load_cases(cfg["data"], cfg["cases"])
    if not cases:
        raise CliError(f"no training cases in {cfg['data']}")
    if any(c.labels is None for c in cases):
        raise CliError("training cases need labels")
    if stage == 1:
        samples = stage1_samples(cases)
    else:
        for path in cfg["stage1"]:
            if not os.path.exists(path):
                raise CliError(f"stage-1 checkpoint {path} not found")
        samples = build_expanded_dataset(cfg["stage1"], cases, net_cfg.input_dims)
        with open(os.path.join(out, "expanded_dataset.jsonl"), "w") as fh:
            for s in samples:
                fh.write(json.dumps({"patient_id": s.patient_id, "source_model": s.source_model}) + "\n")
        print(f"expanded dataset: {len(samples)} samples ({len(cfg['stage1'])} stage-1 models x {len(cases)} cases)")
    _write_run_config(out, "train", cfg)
    network = build_network(net_cfg, cfg["seed"])
    paths, history = train_stage(
        network, samples, tcfg, seed=cfg["seed"], out_dir=out, model_id=cfg["model_id"],
        log_path=os.path.join(out, "train_log.jsonl"), resume_from=cfg["resume"],
    )
    if history:
        last = history[-1]
        print(f"epoch {last['epoch']}: L_dice {last['L_dice']:.4f} total {last['total']:.4f}")
    for p in paths:
        print(p)


def cmd_infer(cfg):
    """Run every stage-1 x stage-2 cascade on each case and write one prediction per pair."""
    for path in list(cfg["stage1"]) + list(cfg["stage2"]):
        if not os.path.exists(path):
            raise CliError(f"checkpoint {path} not found")
    stage1 = [load_checkpoint(p, expect_stage=1) for p in cfg["stage1"]]
    stage2 = [load_checkpoint(p, expect_stage=2) for p in cfg["stage2"]]
    ids1 = [m.get("model_id", os.path.basename(p)) for (_, m, _), p in zip(stage1, cfg["stage1"])]
    ids2 = [m.get("model_id", os.path.basename(p)) for (_, m, _), p in zip(stage2, cfg["stage2"])]
    cases = _load_cases(cfg["data"], cfg["cases"])
    out = cfg["out"]
    _write_run_config(out, "infer", cfg)
    records = []
    for case in cases:
        preds = run_cascades([n for n, _, _ in stage1], [n for n, _, _ in stage2], case.image, cfg["threshold"])
        names = [a if not ids2 else f"{a}+{b}" for a in ids1 for b in (ids2 or [None])]
        for pred, model_id in zip(preds, names):
            stem = f"{case.case_id}__{_safe_id(model_id)}"
            write_cseg(os.path.join(out, stem + "_labels.cseg"), pred.label_map, case.image.spacing)
            write_cseg(os.path.join(out, stem + "_probs.cseg"), pred.probabilities, case.image.spacing)
            records.append({
                "case_id": case.case_id, "model_id": model_id, "stage": pred.stage,
                "labels": stem + "_labels.cseg", "probabilities": stem + "_probs.cseg",
            })
    _write_manifest(out, records)
    print(f"{len(records)} predictions for {len(cases)} cases")


def _group(records):
    groups = {}
    for rec in records:
        groups.setdefault(rec["case_id"], []).append(rec)
    return groups


def cmd_ensemble(cfg):
    """Majority-vote all predictions of each case into one label map."""
    records = _read_manifest(cfg["predictions"])
    out = cfg["out"]
    _write_run_config(out, "ensemble", cfg)
    result = []
    for case_id, recs in _group(records).items():
        preds = []
        for rec in recs:
            if "probabilities" not in rec:
                raise CliError(f"prediction {rec['model_id']} for {case_id} has no probabilities; ensemble raw infer output")
            labels, spacing = read_cseg(rec["labels"])
            probs, _ = read_cseg(rec["probabilities"])
            preds.append(CasePrediction(labels, probs, rec["model_id"], rec.get("stage", 0)))
        fused = majority_vote(preds)
        name = f"{case_id}__ensemble_labels.cseg"
        write_cseg(os.path.join(out, name), fused, spacing)
        result.append({"case_id": case_id, "model_id": "ensemble", "members": len(preds), "labels": name})
    _write_manifest(out, result)
    print(f"ensembled {len(records)} predictions into {len(result)} cases")


def cmd_postprocess(cfg):
    """Relabel ET as NCR/NET in predictions with fewer than --min-et-voxels ET voxels."""
    records = _read_manifest(cfg["predictions"])
    out = cfg["out"]
    _write_run_config(out, "postprocess", cfg)
    result = []
    changed = 0
    for rec in records:
        labels, spacing = read_cseg(rec["labels"])
        fixed = postprocess_labels(labels, cfg["min_et_voxels"])
        changed += fixed is not labels
        name = f"{rec['case_id']}__{_safe_id(rec['model_id'])}_labels.cseg"
        write_cseg(os.path.join(out, name), fixed, spacing)
        result.append({"case_id": rec["case_id"], "model_id": rec["model_id"], "labels": name})
    _write_manifest(out, result)
    print(f"postprocessed {len(result)} predictions, {changed} relabelled")


def cmd_evaluate(cfg):
    """Per-region Dice, HD95, sensitivity and specificity against ground truth."""
    records = _read_manifest(cfg["predictions"])
    models = sorted({r["model_id"] for r in records})
    if cfg["model_id"] is not None:
        records = [r for r in records if r["model_id"] == cfg["model_id"]]
        if not records:
            raise CliError(f"model {cfg['model_id']!r} not in manifest; available {models}")
    elif len(models) > 1:
        raise CliError(f"manifest holds {len(models)} models; choose one with --model-id from {models}")
    truth = {c.case_id: c for c in _load_cases(cfg["data"], None)}
    reports = []
    for rec in records:
        case = truth.get(rec["case_id"])
        if case is None or case.labels is None:
            raise CliError(f"no ground truth for case {rec['case_id']} in {cfg['data']}")
        pred = load_labels(rec["labels"])
        reports.append(evaluate_case(pred, case.labels, case.labels.spacing, rec["case_id"]))
    if not reports:
        raise CliError("no predictions to evaluate")
    out = cfg["out"]
    _write_run_config(out, "evaluate", cfg)
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(to_csv(reports))
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(to_pretty(reports))
    with open(os.path.join(out, "per_case.jsonl"), "w") as fh:
        for r in reports:
            fh.write(json.dumps({"case_id": r.case_id, "metrics": r.metrics, "counts": r.counts}, sort_keys=True) + "\n")
    summary = {reg: {m: {"mean": v[0], "sd": v[1]} for m, v in ms.items()} for reg, ms in aggregate(reports).items()}
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(to_pretty(reports), end="")


def cmd_export_attention(cfg):
    """Write the stage-2 attention coefficient volumes for one case."""
    for key in ("stage1", "stage2"):
        if not os.path.exists(cfg[key]):
            raise CliError(f"{key} checkpoint {cfg[key]} not found")
    cases = _load_cases(cfg["data"], [cfg["case"]])
    _write_run_config(cfg["out"], "export-attention", cfg)
    paths = export_attention_maps(cfg["stage2"], cases[0].image, cfg["out"], stage1=cfg["stage1"], slices=cfg["slices"])
    for p in paths:
        print(p)


COMMANDS = {
    "gen-phantoms": cmd_gen_phantoms,
    "train": cmd_train,
    "infer": cmd_infer,
    "ensemble": cmd_ensemble,
    "postprocess": cmd_postprocess,
    "evaluate": cmd_evaluate,
    "export-attention": cmd_export_attention,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        COMMANDS[args.command](cfg)
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"cascadeseg {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
