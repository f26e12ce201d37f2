"""Command-line entry point.

Subcommands cover the full pipeline: dataset generation and combination,
classifier training and (cross-)evaluation, trajectory optimization, the
minimum-defender sweep, and saliency extraction. Every run writes exactly
one ``manifest.json`` into its output directory; rerunning with the same
inputs reproduces the data outputs bitwise. Existing runs are never
overwritten without ``--force``.

Exit codes: 0 success, 2 configuration or input-file error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import fileio
from .cnn import (
    CnnSpec,
    TrainConfig,
    evaluate,
    load_model,
    predict_proba,
    preset_spec,
    saliency_map,
    save_model,
    train,
    write_history_csv,
)
from .configio import Config, ConfigError, engagement_from_config, load_config
from .datasets import (
    LabeledDataset,
    VoiPoint,
    apply_scaler,
    combine,
    combine_files,
    fit_scaler,
    generate_noise_family,
    generate_subdataset,
    load_dataset,
    save_dataset,
    split_dataset,
)
from .engagement import (
    EngagementConfig,
    MotionType,
    Tactic,
    TrajectoryMatrix,
    engagement_motion_plan,
    simulate_engagement,
    write_trajectory_csv,
)
from .optimize import (
    InfeasibleGuessError,
    OperationalArea,
    OptimizationProblem,
    SolverSettings,
    evaluate_initial_trajectories,
    optimize,
)
from .sweep import SweepSpec, run_sweep, write_sweep_csv, write_sweep_json

logger = logging.getLogger(__name__)

# Engagement seeds below this are reserved for dataset generation; the
# optimizer and sweep refuse them unless --allow-train-seeds is given.
RESERVED_EVALUATION_SEED = 1200

DATASET_EXT = ".swtd"
MODEL_EXT = ".swtm"


@dataclass
class RunManifest:
    subcommand: str
    config_path: str | None
    config_sha256: str | None
    seeds: dict
    output_dir: str
    tool_version: str
    wall_clock_s: float
    extra: dict

    def write(self, out_dir: Path) -> None:
        path = out_dir / "manifest.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _prepare_out(args) -> Path:
    out = Path(args.out)
    if (out / "manifest.json").exists() and not args.force:
        raise ConfigError(f"output directory {out} already holds a run "
                          f"(manifest.json present); use --force to replace")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require_absent(paths, force: bool) -> None:
    if force:
        return
    hits = [str(p) for p in paths if Path(p).exists()]
    if hits:
        raise ConfigError(f"refusing to overwrite existing output(s): "
                          f"{', '.join(hits)}; use --force")


def _finish(args, out: Path, seeds: dict, extra: dict, t0: float) -> None:
    config_path = getattr(args, "config", None)
    RunManifest(
        subcommand=args.subcommand,
        config_path=str(config_path) if config_path else None,
        config_sha256=_sha256(config_path) if config_path else None,
        seeds=seeds,
        output_dir=str(out),
        tool_version=__version__,
        wall_clock_s=time.perf_counter() - t0,
        extra=extra,
    ).write(out)


def _load_cfg(args) -> Config:
    return load_config(args.config)


def _split_params(cfg: Config | None) -> tuple[tuple[float, float, float], int]:
    if cfg is None:
        return (0.6, 0.15, 0.25), 0
    fractions = cfg.get_float_list("split.fractions", [0.6, 0.15, 0.25])
    if len(fractions) != 3:
        raise ConfigError("'split.fractions' needs exactly three numbers")
    seed = cfg.get_int("split.seed", 0)
    return (fractions[0], fractions[1], fractions[2]), seed


def _solver_settings(cfg: Config) -> SolverSettings:
    fields = {
        "max_iterations": "get_int", "inner_steps": "get_int",
        "constraint_tolerance": "get_float", "fd_step": "get_float",
        "initial_step": "get_float", "backtracks": "get_int",
        "armijo_c": "get_float", "initial_penalty": "get_float",
        "penalty_growth": "get_float", "violation_decrease": "get_float",
        "gradient_floor": "get_float", "merit_floor": "get_float",
    }
    overrides = {}
    for name, getter in fields.items():
        key = "solver." + name
        if cfg.has(key):
            overrides[name] = getattr(cfg, getter)(key)
    try:
        return replace(SolverSettings(), **overrides)
    except ValueError as exc:
        raise ConfigError(f"invalid solver settings: {exc}") from None


def _area(cfg: Config, key: str = "problem.area") -> OperationalArea:
    try:
        return OperationalArea(cfg.get_polygon(key))
    except ValueError as exc:
        raise ConfigError(f"{key!r}: {exc}") from None


def _problem_fields(cfg: Config) -> dict:
    out = {"d_min": cfg.get_float("problem.d_min", 0.0)}
    for name in ("v_min", "v_max", "a_max"):
        key = f"problem.{name}"
        if cfg.has(key):
            out[name] = cfg.get_float(key)
    if cfg.has("problem.n_rows"):
        out["n_rows"] = cfg.get_int("problem.n_rows")
    return out


def _guard_seed(seed: int, args) -> None:
    if seed < RESERVED_EVALUATION_SEED and not args.allow_train_seeds:
        raise ConfigError(
            f"engagement seed {seed} is inside the training range "
            f"(< {RESERVED_EVALUATION_SEED}); pick an evaluation seed or "
            f"pass --allow-train-seeds")


def _scaled_for_model(ds: LabeledDataset, model_fingerprint: str,
                      scaler) -> LabeledDataset:
    stamped = ds.manifest.get("scaled_with")
    if stamped is not None:
        if stamped != model_fingerprint:
            raise ConfigError(
                f"dataset was standardized with scaler {stamped} but the "
                f"model carries {model_fingerprint}; re-run on raw data")
        return ds
    return apply_scaler(ds, scaler)


def _select_split(ds: LabeledDataset, which: str,
                  fractions, seed: int) -> LabeledDataset:
    if which == "full":
        return ds
    tr, va, te = split_dataset(ds, fractions=fractions, seed=seed)
    return {"train": tr, "val": va, "test": te}[which]


def _fmt_sigma(s: float) -> str:
    return f"{s:g}".replace(".", "p").replace("-", "m")


def _load_many(paths) -> LabeledDataset:
    if len(paths) == 1:
        return load_dataset(paths[0])
    return combine_files(paths)


# ---------------------------------------------------------------------------
# generate / combine
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_cfg(args)
    base = engagement_from_config(cfg)
    axis = cfg.get_str("voi.axis")
    engagements = cfg.get_int("voi.engagements")
    if engagements < 1:
        raise ConfigError("'voi.engagements' must be >= 1")
    if args.scale < 1:
        raise ConfigError("--scale must be >= 1")
    effective = max(1, engagements // args.scale)
    seed_start = cfg.get_int("voi.seed_start", 0)
    window_floor = cfg.get_int("voi.window_floor", 1)

    def sub(point: VoiPoint) -> LabeledDataset:
        return generate_subdataset(base, point, effective,
                                   seed_start=seed_start,
                                   window_floor=window_floor)

    parts: list[tuple[str, LabeledDataset]] = []
    noise_seed = None
    if axis == "defender_number":
        counts = cfg.get_int_list("voi.counts", list(range(1, 16)))
        motion = cfg.get_motion("voi.motion", MotionType.STAR)
        for nd in counts:
            parts.append((f"nd{nd:02d}", sub(VoiPoint(nd, motion))))
    elif axis == "defender_motion":
        motions = cfg.get_motion_list("voi.motions", list(MotionType))
        count = cfg.get_int("voi.count", base.n_defenders)
        for m in motions:
            parts.append((f"motion_{m.name.lower()}", sub(VoiPoint(count, m))))
    elif axis == "noise":
        sigmas = cfg.get_float_list("voi.sigmas")
        count = cfg.get_int("voi.count", base.n_defenders)
        motion = cfg.get_motion("voi.motion", MotionType.STAR)
        noise_seed = cfg.get_int("voi.noise_seed", 0)
        positions_only = cfg.get_bool("voi.positions_only", False)
        clean = sub(VoiPoint(count, motion))
        family = generate_noise_family(clean, sigmas, noise_seed,
                                       positions_only=positions_only)
        for s, ds in zip(sigmas, family):
            parts.append((f"sigma_{_fmt_sigma(s)}", ds))
    elif axis == "cross":
        counts = cfg.get_int_list("voi.counts", list(range(1, 11)))
        motions = cfg.get_motion_list("voi.motions", list(MotionType))
        for nd in counts:
            for m in motions:
                parts.append((f"nd{nd:02d}_{m.name.lower()}",
                              sub(VoiPoint(nd, m))))
    else:
        raise ConfigError(f"'voi.axis' must be one of defender_number, "
                          f"defender_motion, noise, cross; got {axis!r}")
    cfg.require_fully_used()

    out = _prepare_out(args)
    files = [out / f"{name}{DATASET_EXT}" for name, _ in parts]
    combined_path = out / f"combined{DATASET_EXT}"
    _require_absent(files + [combined_path], args.force)
    counts_by_file = {}
    for (name, ds), path in zip(parts, files):
        save_dataset(ds, path)
        counts_by_file[path.name] = ds.n_instances
        print(f"wrote {path} ({ds.n_instances} instances, window "
              f"{ds.window})")
    combined = combine([ds for _, ds in parts])
    save_dataset(combined, combined_path)
    counts_by_file[combined_path.name] = combined.n_instances
    print(f"wrote {combined_path} ({combined.n_instances} instances, window "
          f"{combined.window})")

    seeds = {"engagement_first": seed_start,
             "engagement_last": seed_start + effective - 1}
    if noise_seed is not None:
        seeds["noise"] = noise_seed
    _finish(args, out, seeds,
            {"axis": axis, "scale": args.scale,
             "engagements_per_point": effective,
             "window_floor": window_floor, "instances": counts_by_file}, t0)
    return 0


def cmd_combine(args) -> int:
    t0 = time.perf_counter()
    out = _prepare_out(args)
    target = out / args.name
    _require_absent([target], args.force)
    ds = combine_files(args.inputs, out_path=target)
    print(f"wrote {target} ({ds.n_instances} instances, window {ds.window})")
    _finish(args, out, {},
            {"inputs": [str(p) for p in args.inputs],
             "instances": ds.n_instances}, t0)
    return 0


# ---------------------------------------------------------------------------
# train / evaluate / cross-evaluate
# ---------------------------------------------------------------------------


def _spec_from_config(cfg: Config, features: int) -> CnnSpec:
    preset = cfg.get_str("train.preset", None)
    if preset is not None:
        try:
            spec = preset_spec(preset, features)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if cfg.has("train.window"):
            spec = replace(spec, window=cfg.get_int("train.window"))
        return spec
    try:
        return CnnSpec(
            window=cfg.get_int("train.window"),
            features=features,
            filters=tuple(cfg.get_int_list("train.filters")),
            kernels=tuple(cfg.get_int_list("train.kernels")),
            pool=cfg.get_int("train.pool"),
            dropout=cfg.get_float("train.dropout", 0.0),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid model spec: {exc}") from None


def _train_config(cfg: Config) -> TrainConfig:
    fields = {"learning_rate": "get_float", "batch_size": "get_int",
              "max_epochs": "get_int", "patience": "get_int",
              "seed": "get_int"}
    overrides = {}
    for name, getter in fields.items():
        key = "train." + name
        if cfg.has(key):
            overrides[name] = getattr(cfg, getter)(key)
    try:
        return replace(TrainConfig(), **overrides)
    except ValueError as exc:
        raise ConfigError(f"invalid train settings: {exc}") from None


def cmd_train(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_cfg(args)
    ds = _load_many(args.data)
    if ds.manifest.get("scaled_with"):
        raise ConfigError("training expects raw datasets; this one is "
                          "already standardized")
    spec = _spec_from_config(cfg, ds.n_features)
    tc = _train_config(cfg)
    fractions, split_seed = _split_params(cfg)
    cfg.require_fully_used()

    tr, va, te = split_dataset(ds, fractions=fractions, seed=split_seed)
    stats = fit_scaler(tr)
    if ds.window < spec.window:
        raise ConfigError(f"dataset window {ds.window} is shorter than the "
                          f"model window {spec.window}")
    model, history = train(spec, apply_scaler(tr, stats),
                           apply_scaler(va, stats), tc)
    val = evaluate(model, apply_scaler(va, stats))

    out = _prepare_out(args)
    model_path = out / f"model{MODEL_EXT}"
    history_path = out / "history.csv"
    _require_absent([model_path, history_path], args.force)
    meta = {
        "spec": {"window": spec.window, "features": spec.features,
                 "filters": list(spec.filters), "kernels": list(spec.kernels),
                 "pool": spec.pool, "dropout": spec.dropout},
        "train_config": asdict(tc),
        "split": {"fractions": list(fractions), "seed": split_seed,
                  "sizes": [tr.n_instances, va.n_instances, te.n_instances]},
        "data": [str(p) for p in args.data],
        "epochs_run": len(history.train_loss),
        "best_epoch": history.best_epoch,
        "val_accuracy": val.accuracy,
        "val_ner": val.ner,
    }
    save_model(model, stats, model_path, meta)
    write_history_csv(history, history_path)
    print(f"wrote {model_path} (epochs {len(history.train_loss)}, best "
          f"{history.best_epoch}, val accuracy {val.accuracy:.4f}, "
          f"val NER {val.ner:.4f})")
    _finish(args, out, {"split": split_seed, "train": tc.seed},
            {"sizes": meta["split"]["sizes"],
             "val_accuracy": val.accuracy}, t0)
    return 0


def _write_confusion(path, confusion: np.ndarray) -> None:
    names = [t.name.lower() for t in Tactic]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\predicted"] + names)
        for i, row in enumerate(confusion):
            writer.writerow([names[i]] + [int(v) for v in row])


def cmd_evaluate(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config) if args.config else None
    fractions, split_seed = _split_params(cfg)
    if cfg is not None:
        cfg.require_fully_used()
    model, stats, meta = load_model(args.model)
    ds = load_dataset(args.data)
    part = _select_split(ds, args.split, fractions, split_seed)
    scaled = _scaled_for_model(part, stats.fingerprint(), stats)
    metrics = evaluate(model, scaled)

    out = _prepare_out(args)
    metrics_path = out / "metrics.json"
    confusion_path = out / "confusion.csv"
    _require_absent([metrics_path, confusion_path], args.force)
    doc = {
        "model": str(args.model),
        "data": str(args.data),
        "split": args.split,
        "n": metrics.n,
        "accuracy": metrics.accuracy,
        "ner": metrics.ner,
        "per_class_accuracy": {Tactic(k).name.lower(): v
                               for k, v in metrics.per_class_accuracy.items()},
    }
    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    _write_confusion(confusion_path, metrics.confusion)
    print(f"{args.split} split: n={metrics.n} accuracy={metrics.accuracy:.4f} "
          f"NER={metrics.ner:.4f}")
    _finish(args, out, {"split": split_seed}, doc, t0)
    return 0


def cmd_cross_evaluate(args) -> int:
    t0 = time.perf_counter()
    cfg = load_config(args.config) if args.config else None
    fractions, split_seed = _split_params(cfg)
    if cfg is not None:
        cfg.require_fully_used()
    models = [(Path(p).stem, *load_model(p)[:2]) for p in args.models]
    data_stems = [Path(p).stem for p in args.data]

    acc = np.zeros((len(models), len(args.data)))
    ner = np.zeros_like(acc)
    for j, path in enumerate(args.data):
        ds = load_dataset(path)
        part = _select_split(ds, args.split, fractions, split_seed)
        for i, (stem, model, stats) in enumerate(models):
            scaled = _scaled_for_model(part, stats.fingerprint(), stats)
            m = evaluate(model, scaled)
            acc[i, j] = m.accuracy
            ner[i, j] = m.ner
            print(f"{stem} x {data_stems[j]}: accuracy={m.accuracy:.4f} "
                  f"NER={m.ner:.4f}")

    out = _prepare_out(args)
    paths = [out / "matrix_accuracy.csv", out / "matrix_ner.csv"]
    _require_absent(paths, args.force)
    for path, grid in zip(paths, (acc, ner)):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["model"] + data_stems)
            for (stem, _, _), row in zip(models, grid):
                writer.writerow([stem] + [f"{v:.6f}" for v in row])
    _finish(args, out, {"split": split_seed},
            {"models": [str(p) for p in args.models],
             "data": [str(p) for p in args.data], "split": args.split}, t0)
    return 0


# ---------------------------------------------------------------------------
# optimize / sweep / saliency
# ---------------------------------------------------------------------------

_ITERATION_COLUMNS = ["iteration", "stp", "max_violation", "merit",
                      "step_length", "penalty"]


def _write_bundle(bundle: Path, result, config: EngagementConfig) -> None:
    bundle.mkdir(parents=True, exist_ok=True)
    summary = {
        "stp_initial": result.stp_initial,
        "stp_optimized": result.stp_optimized,
        "per_tactic_true": {t.name.lower(): float(v) for t, v in
                            zip(Tactic, result.per_tactic_true)},
        "max_violation": result.constraints.max_violation,
        "violation_by_family": result.constraints.family_max(),
        "n_iterations": len(result.iterations),
        "n_stack_evaluations": result.n_stack_evaluations,
        "wall_time_s": result.wall_time_s,
    }
    with open(bundle / "summary.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
        fh.write("\n")
    write_trajectory_csv(TrajectoryMatrix(result.trajectory, dt=config.dt),
                         bundle / "defenders.csv", prefix="D")
    for tactic in Tactic:
        sim = simulate_engagement(config, result.trajectory, tactic)
        write_trajectory_csv(sim.adversaries,
                             bundle / f"response_{tactic.name.lower()}.csv",
                             prefix="A")
    with open(bundle / "iterations.csv", "w", newline="",
              encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_ITERATION_COLUMNS)
        for rec in result.iterations:
            writer.writerow([rec.iteration, f"{rec.stp:.6f}",
                             f"{rec.max_violation:.3e}", f"{rec.merit:.6f}",
                             f"{rec.step_length:.6f}", f"{rec.penalty:.3e}"])


def cmd_optimize(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_cfg(args)
    base = engagement_from_config(cfg)
    _guard_seed(base.seed, args)
    model, stats, _ = load_model(args.model)
    area = _area(cfg)
    fields = _problem_fields(cfg)
    settings = _solver_settings(cfg)
    motions = cfg.get_motion_list("problem.motions", list(MotionType))
    include_ramp = cfg.get_bool("problem.ramp_starts", True)
    cfg.require_fully_used()
    problem = OptimizationProblem(model=model, scaler=stats, config=base,
                                  area=area, settings=settings, **fields)

    out = _prepare_out(args)
    comparison_path = out / "comparison.csv"
    bundles = {m: out / f"motion_{m.name.lower()}" for m in motions}
    _require_absent([comparison_path] + list(bundles.values()), args.force)

    rows = []
    failures = 0
    for motion in motions:
        name = motion.name.lower()
        try:
            scores = evaluate_initial_trajectories(
                problem, motions=[motion], include_ramp=include_ramp)
            scores.sort(key=lambda s: (not s.feasible, -s.stp))
            ramp = scores[0].ramp_to_max
            plan = engagement_motion_plan(base, motion, ramp_to_max=ramp)
            result = optimize(problem, plan)
        except (InfeasibleGuessError, RuntimeError) as exc:
            failures += 1
            print(f"motion {name}: failed ({exc})", file=sys.stderr)
            rows.append([name, "", "", "", "", "", "", str(exc)])
            continue
        _write_bundle(bundles[motion], result, base)
        print(f"motion {name}: STP {result.stp_initial:.1f} -> "
              f"{result.stp_optimized:.1f} ({len(result.iterations)} "
              f"iterations, violation {result.constraints.max_violation:.1e})")
        rows.append([name, int(ramp), f"{result.stp_initial:.6f}",
                     f"{result.stp_optimized:.6f}", len(result.iterations),
                     result.n_stack_evaluations,
                     f"{result.constraints.max_violation:.3e}", ""])

    with open(comparison_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["motion", "ramp_start", "stp_initial",
                         "stp_optimized", "n_iterations",
                         "n_stack_evaluations", "max_violation", "error"])
        writer.writerows(rows)
    _finish(args, out, {"engagement": base.seed},
            {"motions": [m.name.lower() for m in motions],
             "failures": failures}, t0)
    if failures == len(motions):
        print("every motion failed", file=sys.stderr)
        return 3
    return 0


def cmd_sweep(args) -> int:
    t0 = time.perf_counter()
    cfg = _load_cfg(args)
    base = engagement_from_config(cfg)
    _guard_seed(base.seed, args)
    model, stats, _ = load_model(args.model)
    area = _area(cfg)
    fields = _problem_fields(cfg)
    if "v_min" in fields or "v_max" in fields or "a_max" in fields:
        raise ConfigError("sweep cells derive speed/acceleration limits from "
                          "the engagement config; drop problem.v_min/v_max/"
                          "a_max")
    settings = _solver_settings(cfg)
    counts = cfg.get_int_list("sweep.counts")
    motions = cfg.get_motion_list("sweep.motions", list(MotionType))
    thresholds = cfg.get_float_list("sweep.thresholds", [])
    include_ramp = cfg.get_bool("problem.ramp_starts", True)
    cfg.require_fully_used()
    try:
        spec = SweepSpec(tuple(counts), base.seed, area,
                         motions=tuple(motions), d_min=fields["d_min"],
                         n_rows=fields.get("n_rows"),
                         include_ramp=include_ramp, settings=settings)
    except ValueError as exc:
        raise ConfigError(f"invalid sweep grid: {exc}") from None

    out = _prepare_out(args)
    csv_path, json_path = out / "sweep.csv", out / "sweep.json"
    _require_absent([csv_path, json_path], args.force)
    result = run_sweep(model, stats, base, spec)
    write_sweep_csv(result, csv_path)
    write_sweep_json(result, json_path, thresholds=thresholds)

    contour = result.contour()
    for count, value in zip(result.defender_counts, contour):
        shown = "failed" if math.isnan(value) else f"{value:.1f}"
        print(f"defenders {count:2d}: best STP {shown}")
    for threshold in thresholds:
        n = result.min_defenders(threshold)
        print(f"STP >= {threshold:g}: "
              + (f"{n} defender(s)" if n is not None else "not reached"))
    failures = sum(not c.ok for c in result.cells)
    if failures:
        print(f"{failures}/{len(result.cells)} cells failed (see sweep.csv)",
              file=sys.stderr)
    _finish(args, out, {"engagement": base.seed},
            {"counts": list(counts),
             "motions": [m.name.lower() for m in motions],
             "failures": failures}, t0)
    return 3 if failures == len(result.cells) else 0


def cmd_saliency(args) -> int:
    t0 = time.perf_counter()
    model, stats, _ = load_model(args.model)
    ds = load_dataset(args.data)
    if not 0 <= args.index < ds.n_instances:
        raise ConfigError(f"--index {args.index} out of range "
                          f"(dataset has {ds.n_instances} instances)")
    scaled = _scaled_for_model(ds, stats.fingerprint(), stats)
    x = scaled.values[args.index].astype(np.float64)
    true_label = int(ds.labels[args.index])
    label = true_label if args.label is None else args.label
    if not 0 <= label < 4:
        raise ConfigError("--label must be 0..3")
    probs = predict_proba(model, x[None])[0]
    grid = saliency_map(model, x, label, aggregate_agents=args.per_agent)

    out = _prepare_out(args)
    sal_path, meta_path = out / "saliency.csv", out / "meta.json"
    _require_absent([sal_path, meta_path], args.force)
    if args.per_agent:
        header = [f"a{i}" for i in range(grid.shape[1])]
    else:
        names = ("x", "y", "vx", "vy")
        header = [f"a{i // 4}_{names[i % 4]}" for i in range(grid.shape[1])]
    with open(sal_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + header)
        for t, row in enumerate(grid):
            writer.writerow([t] + [f"{v:.8e}" for v in row])
    with open(meta_path, "w", encoding="utf-8") as fh:
        json.dump({"index": args.index, "label": label,
                   "true_label": true_label,
                   "predicted": int(probs.argmax()),
                   "probabilities": probs.tolist()}, fh, indent=2)
        fh.write("\n")
    print(f"wrote {sal_path} (instance {args.index}, label {label}, "
          f"predicted {int(probs.argmax())})")
    _finish(args, out, {}, {"index": args.index, "label": label}, t0)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="swarmtactics",
        description="Swarm tactic classification pipeline: simulate, "
                    "enrich, train, evaluate, optimize, sweep.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True,
                        help="output directory for this run")
    common.add_argument("--force", action="store_true",
                        help="replace outputs from a previous run")
    common.add_argument("--threads", type=int, default=None, metavar="N",
                        help="cap native thread pools (default: library "
                             "choice)")
    common.add_argument("-v", "--verbose", action="store_true",
                        help="log per-step progress")

    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("generate", parents=[common],
                       help="simulate one VOI axis into sub-dataset files")
    p.add_argument("--config", required=True, help="run configuration file")
    p.add_argument("--scale", type=int, default=1, metavar="K",
                   help="divide engagements per point by K (desk scale)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("combine", parents=[common],
                       help="concatenate dataset files")
    p.add_argument("inputs", nargs="+", help="dataset files")
    p.add_argument("--name", default=f"combined{DATASET_EXT}",
                   help="output file name inside --out")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("train", parents=[common],
                       help="fit the classifier on raw dataset files")
    p.add_argument("--config", required=True)
    p.add_argument("--data", nargs="+", required=True,
                   help="raw dataset files (combined before splitting)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", parents=[common],
                       help="score a model on one dataset split")
    p.add_argument("--config", default=None,
                   help="optional config carrying split.* settings")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "full"),
                   default="test")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cross-evaluate", parents=[common],
                       help="score every model against every dataset")
    p.add_argument("--config", default=None)
    p.add_argument("--models", nargs="+", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "full"),
                   default="test")
    p.set_defaults(func=cmd_cross_evaluate)

    p = sub.add_parser("optimize", parents=[common],
                       help="optimize defender trajectories against a model")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--allow-train-seeds", action="store_true",
                   help="permit engagement seeds from the training range")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("sweep", parents=[common],
                       help="minimum-defender sweep over a (count, motion) "
                            "grid")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--allow-train-seeds", action="store_true")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("saliency", parents=[common],
                       help="input-gradient saliency for one instance")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--label", type=int, default=None,
                   help="class whose probability is differentiated "
                        "(default: the instance's true label)")
    p.add_argument("--per-agent", action="store_true",
                   help="sum the four channels of each adversary")
    p.set_defaults(func=cmd_saliency)
    return parser


def _apply_thread_cap(n: int | None) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_thread_cap(args.threads)
        return args.func(args)
    except (ConfigError, fileio.FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except InfeasibleGuessError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except (RuntimeError, FloatingPointError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
