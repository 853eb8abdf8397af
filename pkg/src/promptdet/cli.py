"""Experiment driver: data generation, training, evaluation and the prompt studies.

Every run is described by one JSON ExperimentConfig. ``--set a.b=value``
overrides any key (values are parsed as JSON, falling back to a string).
All randomness derives from the config's root ``seed``.

    promptdet gen --config exp.json
    promptdet train --config exp.json --set detector.lr=0.01
    promptdet ablate-stages --config exp.json
    promptdet compare runs/a/report.json runs/b/report.json --out delta.csv
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import detector as det
from .evalkit import DEFAULT_THRESHOLDS, EvalReport, collect_sizes, evaluate, fingerprint, size_distribution_stats
from .synthdata import (CLASS_NAMES, align_point_range, generate_frames, load_registry,
                        preset_specs, save_registry, with_range, write_frames)

log = logging.getLogger("promptdet")

SCHEMA_VERSION = 1
KINDS = ("gen", "train", "eval", "ablate-stages", "sweep-alpha", "zeroshot")
STAGES = (
    ("baseline", dict(msbn=False, mask=False, ocrl=False)),
    ("+voxelization", dict(msbn=True, mask=False, ocrl=False)),
    ("+backbone", dict(msbn=True, mask=True, ocrl=False)),
    ("+head", dict(msbn=True, mask=True, ocrl=True)),
)
TRAIN, EVAL = 0, 1


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    kind: str = "train"
    seed: int = 0
    datasets: list = field(default_factory=lambda: ["K-like", "W-like"])
    heldout: str | None = None          # zeroshot: evaluated only, never trained on
    registry: str | None = None         # JSON registry path; built-in presets when None
    train_frames: int = 200
    eval_frames: int = 50
    repeats: int = 1                    # independent seeds averaged by the study commands
    total_steps: int | None = None      # overrides detector.epochs when set
    alphas: list = field(default_factory=lambda: [0.0, 0.1, 0.3, 0.5, 0.7, 1.0])
    detector: dict = field(default_factory=dict)
    thresholds: dict = field(default_factory=lambda: {CLASS_NAMES[c]: t for c, t in DEFAULT_THRESHOLDS.items()})
    size_min_score: float = 0.5
    checkpoint: str | None = None       # eval: model to load
    output_dir: str = "runs/exp"

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**dict(d))

    def detector_config(self) -> det.DetectorConfig:
        try:
            return det.DetectorConfig.from_dict(self.detector)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"detector: {e}") from e

    def specs(self) -> dict:
        return load_registry(self.registry) if self.registry else preset_specs()

    def class_thresholds(self) -> dict:
        out = {}
        for name, t in self.thresholds.items():
            if name not in CLASS_NAMES:
                raise ConfigError(f"unknown class in thresholds: {name!r}")
            out[CLASS_NAMES.index(name)] = float(t)
        return out

    def validate(self) -> None:
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"schema_version {self.schema_version} not supported (expected {SCHEMA_VERSION})")
        if self.kind not in KINDS:
            raise ConfigError(f"unknown kind {self.kind!r}; choose from {KINDS}")
        try:
            specs = self.specs()
        except (OSError, KeyError, ValueError) as e:
            raise ConfigError(f"registry: {e}") from e
        names = list(self.datasets) + ([self.heldout] if self.heldout else [])
        missing = [n for n in names if n not in specs]
        if missing:
            raise ConfigError(f"unknown dataset names {missing}; known: {sorted(specs)}")
        if not self.datasets:
            raise ConfigError("datasets must not be empty")
        if len(set(self.datasets)) != len(self.datasets):
            raise ConfigError("datasets listed twice")
        if self.kind == "zeroshot":
            if not self.heldout:
                raise ConfigError("zeroshot needs a heldout dataset")
            if self.heldout in self.datasets:
                raise ConfigError("heldout dataset is also a training dataset")
        if self.kind == "eval" and not self.checkpoint:
            raise ConfigError("eval needs a checkpoint path")
        for key in ("train_frames", "eval_frames", "repeats"):
            if int(getattr(self, key)) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.total_steps is not None and int(self.total_steps) < 1:
            raise ConfigError("total_steps must be >= 1")
        if self.kind == "sweep-alpha" and (not self.alphas or any(not 0 <= a <= 1 for a in self.alphas)):
            raise ConfigError("alphas must be a non-empty list inside [0, 1]")
        self.detector_config()
        self.class_thresholds()
        out = Path(self.output_dir)
        try:
            out.mkdir(parents=True, exist_ok=True)
            probe = out / ".write_probe"
            probe.write_text("")
            probe.unlink()
        except OSError as e:
            raise ConfigError(f"output directory not writable: {e}") from e


def apply_overrides(doc: dict, assignments) -> dict:
    """Apply ``a.b.c=value`` strings to a nested dict (in place, returned)."""
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"--set {key}: {p} is not a mapping")
        node[parts[-1]] = value
    return doc


def load_config(path=None, overrides=(), kind=None) -> ExperimentConfig:
    doc = json.loads(Path(path).read_text()) if path else {}
    if kind is not None:
        doc["kind"] = kind
    apply_overrides(doc, overrides)
    try:
        return ExperimentConfig.from_dict(doc)
    except TypeError as e:
        raise ConfigError(str(e)) from e


def derive_seed(root: int, *keys: int) -> int:
    return int(np.random.SeedSequence([int(root), *keys]).generate_state(1)[0])


# ---------------------------------------------------------------- building blocks

def make_split(exp: ExperimentConfig, specs, repeat: int, split: int) -> dict:
    """Frames per dataset id; each (repeat, dataset, split) has its own seed."""
    count = exp.train_frames if split == TRAIN else exp.eval_frames
    global_range = exp.detector_config().global_range
    out = {}
    for s in specs:
        frames = generate_frames(s, count, seed=derive_seed(exp.seed, 1, repeat, s.id, split))
        out[s.id] = [align_point_range(f, global_range) for f in frames]
    return out


def train_model(exp: ExperimentConfig, cfg: det.DetectorConfig, specs, frames, out_dir: Path, repeat: int):
    cfg = replace(cfg, seed=derive_seed(exp.seed, 2, repeat))
    out_dir.mkdir(parents=True, exist_ok=True)
    res = det.train(specs, frames, cfg, log_path=out_dir / "train_log.csv",
                    checkpoint_path=out_dir / "checkpoint.bin", total_steps=exp.total_steps)
    return res.model


def evaluate_model(exp: ExperimentConfig, model, specs, frames, prompt_specs=None) -> EvalReport:
    """Predict with each dataset's own prompts (or ``prompt_specs[id]``) and score."""
    preds, gts, sizes = [], [], {}
    for s in specs:
        prompt = (prompt_specs or {}).get(s.id, s)
        p = det.predict_frames(model, frames[s.id], prompt)
        preds += p
        gts += frames[s.id]
        ps, gs = collect_sizes(p, frames[s.id], exp.size_min_score)
        sizes[s.name] = {CLASS_NAMES[c]: v for c, v in size_distribution_stats(ps, gs).items()}
    rep = evaluate(preds, gts, exp.class_thresholds(), {s.id: s.name for s in specs})
    rep.size_stats = sizes
    rep.fingerprint = fingerprint(exp.to_dict())
    return rep


def write_run(out_dir: Path, report: EvalReport) -> None:
    report.to_json(out_dir / "report.json")
    report.to_csv(out_dir / "metrics.csv")


def summary_row(report: EvalReport, names) -> dict:
    row = {}
    for n in names:
        for m in ("bev", "3d"):
            row[f"{n}/mAP_{m}"] = report.map.get((n, m))
        row[f"{n}/mAP"] = report.mean_map(n)
    vals = [row[f"{n}/mAP"] for n in names]
    row["mean_mAP"] = float(np.mean(vals))
    return row


def mean_rows(rows) -> dict:
    out = {}
    for k in rows[0]:
        vals = [r[k] for r in rows if r[k] is not None]
        out[k] = float(np.mean(vals)) if vals else None
    return out


def mean_w1(reports, name) -> dict:
    """Per-class (l, w, h) W1 averaged over reports; None where any run was degenerate."""
    out = {}
    for cls in CLASS_NAMES:
        vals = [r.size_stats.get(name, {}).get(cls, {}).get("w1") for r in reports]
        out[cls] = None if any(v is None for v in vals) else np.mean(vals, axis=0).tolist()
    return out


def write_table(path, label, rows) -> None:
    cols = list(rows[0][1])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([label] + cols)
        for name, r in rows:
            w.writerow([name] + ["" if r[c] is None else f"{r[c]:.10f}" for c in cols])


def read_table(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _check_finite(rows) -> None:
    for name, r in rows:
        for k, v in r.items():
            if v is not None and not math.isfinite(v):
                raise RuntimeError(f"non-finite metric {k} in row {name}")


# ---------------------------------------------------------------- commands

def run_gen(exp, out: Path) -> dict:
    specs = exp.specs()
    chosen = [specs[n] for n in exp.datasets + ([exp.heldout] if exp.heldout else [])]
    save_registry(out / "registry.json", chosen)
    data = out / "data"
    data.mkdir(exist_ok=True)
    for split, tag in ((TRAIN, "train"), (EVAL, "eval")):
        frames = make_split(exp, chosen, 0, split)
        for s in chosen:
            write_frames(data / f"{s.name}_{tag}.jsonl", frames[s.id])
    return {}


def _study(exp, out: Path, variants, train_names):
    """Train each (variant, repeat) and evaluate; returns per-variant mean rows."""
    specs = exp.specs()
    train_specs = [specs[n] for n in train_names]
    base = exp.detector_config()
    per_variant = {}
    for r in range(exp.repeats):
        train_frames = make_split(exp, train_specs, r, TRAIN)
        eval_frames = make_split(exp, train_specs, r, EVAL)
        for name, cfg in variants(base):
            run_dir = out / name.replace("+", "plus_") / f"repeat_{r}"
            model = train_model(exp, cfg, train_specs, train_frames, run_dir, r)
            rep = evaluate_model(exp, model, train_specs, eval_frames)
            write_run(run_dir, rep)
            per_variant.setdefault(name, []).append(rep)
    rows = [(name, mean_rows([summary_row(rep, train_names) for rep in reps])) for name, reps in per_variant.items()]
    return rows, per_variant


def run_train(exp, out: Path) -> dict:
    specs = exp.specs()
    train_specs = [specs[n] for n in exp.datasets]
    model = train_model(exp, exp.detector_config(), train_specs, make_split(exp, train_specs, 0, TRAIN), out, 0)
    rep = evaluate_model(exp, model, train_specs, make_split(exp, train_specs, 0, EVAL))
    write_run(out, rep)
    return {"report": rep}


def run_eval(exp, out: Path) -> dict:
    specs = exp.specs()
    eval_specs = [specs[n] for n in exp.datasets]
    model = det.load_model(exp.checkpoint)
    rep = evaluate_model(exp, model, eval_specs, make_split(exp, eval_specs, 0, EVAL))
    write_run(out, rep)
    return {"report": rep}


def run_ablate(exp, out: Path) -> dict:
    def variants(base):
        for name, flags in STAGES:
            yield name, base.with_prompts(**flags)
    rows, reps = _study(exp, out, variants, exp.datasets)
    _check_finite(rows)
    write_table(out / "metrics.csv", "stage", rows)
    summary = {name: {"metrics": r, "w1": {n: mean_w1(reps[name], n) for n in exp.datasets}} for name, r in rows}
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return {"rows": rows, "reports": reps}


def run_sweep(exp, out: Path) -> dict:
    def variants(base):
        for a in exp.alphas:
            yield f"alpha_{float(a):g}", replace(base.with_prompts(True, True, True), alpha=float(a))
    rows, reps = _study(exp, out, variants, exp.datasets)
    _check_finite(rows)
    write_table(out / "metrics.csv", "alpha", [(n[len("alpha_"):], r) for n, r in rows])
    (out / "report.json").write_text(json.dumps({n: r for n, r in rows}, indent=2, sort_keys=True))
    return {"rows": rows, "reports": reps}


def run_zeroshot(exp, out: Path) -> dict:
    """Train on ``datasets`` with all prompts on; evaluate the held-out spec with its own range mask
    and with an all-ones mask."""
    specs = exp.specs()
    train_specs = [specs[n] for n in exp.datasets]
    target = specs[exp.heldout]
    cfg = exp.detector_config().with_prompts(True, True, True)
    uninformed = with_range(target, cfg.global_range)
    rows = {"spec_prompt": [], "all_ones_mask": []}
    for r in range(exp.repeats):
        run_dir = out / f"repeat_{r}"
        model = train_model(exp, cfg, train_specs, make_split(exp, train_specs, r, TRAIN), run_dir, r)
        frames = make_split(exp, [target], r, EVAL)
        for name, prompt in (("spec_prompt", target), ("all_ones_mask", uninformed)):
            rep = evaluate_model(exp, model, [target], frames, {target.id: prompt})
            rep.to_json(run_dir / f"report_{name}.json")
            rows[name].append(rep)
    table = [(n, mean_rows([summary_row(rep, [target.name]) for rep in reps])) for n, reps in rows.items()]
    _check_finite(table)
    write_table(out / "metrics.csv", "prompt", table)
    (out / "report.json").write_text(json.dumps({n: r for n, r in table}, indent=2, sort_keys=True))
    return {"rows": table, "reports": rows}


RUNNERS = {"gen": run_gen, "train": run_train, "eval": run_eval, "ablate-stages": run_ablate,
           "sweep-alpha": run_sweep, "zeroshot": run_zeroshot}


def run(exp: ExperimentConfig) -> dict:
    """Validate, snapshot the config, then dispatch on ``exp.kind``."""
    exp.validate()
    out = Path(exp.output_dir)
    (out / "config.snapshot.json").write_text(json.dumps(exp.to_dict(), indent=2, sort_keys=True))
    return RUNNERS[exp.kind](exp, out)


# ---------------------------------------------------------------- compare

def compare(report_a: EvalReport, report_b: EvalReport) -> list:
    """Rows (dataset, class, metric, a, b, b - a) over the shared AP grid plus mAP rows."""
    ka, kb = set(report_a.ap), set(report_b.ap)
    if ka != kb:
        diff = sorted(ka ^ kb, key=str)[:5]
        raise ValueError(f"reports do not share the dataset x class grid (e.g. {diff})")
    rows = []
    for key in sorted(ka):
        a, b = report_a.ap[key], report_b.ap[key]
        d, c, m = key
        rows.append((d, CLASS_NAMES[c], m, a, b, None if a is None or b is None else b - a))
    for key in sorted(set(report_a.map) | set(report_b.map)):
        a, b = report_a.map.get(key), report_b.map.get(key)
        rows.append((key[0], "mAP", key[1], a, b, None if a is None or b is None else b - a))
    return rows


def write_compare(path, rows) -> None:
    fmt = lambda v: "" if v is None else f"{v:.10f}"  # noqa: E731
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["dataset", "class", "metric", "a", "b", "delta"])
        for d, c, m, a, b, delta in rows:
            w.writerow([d, c, m, fmt(a), fmt(b), fmt(delta)])


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="promptdet", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    for kind in KINDS:
        p = sub.add_parser(kind)
        p.add_argument("--config", help="JSON experiment config")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="dotted override")
        p.add_argument("--out", help="output directory (same as --set output_dir=...)")
    p = sub.add_parser("compare")
    p.add_argument("report_a")
    p.add_argument("report_b")
    p.add_argument("--out", help="write the delta table as CSV")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "compare":
            rows = compare(EvalReport.from_json(args.report_a), EvalReport.from_json(args.report_b))
            if args.out:
                write_compare(args.out, rows)
            for d, c, m, a, b, delta in rows:
                print(f"{d:>10} {c:>10} {m:>4} {'' if delta is None else f'{delta:+.4f}'}")
            return 0
        overrides = list(args.set) + ([f"output_dir={json.dumps(args.out)}"] if args.out else [])
        exp = load_config(args.config, overrides, kind=args.command)
        run(exp)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except det.TrainingDiverged as e:
        print(f"training diverged: {e}", file=sys.stderr)
        return 3
    except (ValueError, OSError, RuntimeError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
