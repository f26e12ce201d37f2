"""Labeled time-series datasets built from simulated engagements.

An instance is the adversary-side view of one engagement under one tactic:
per-adversary blocks of [x, y, vx, vy] per time step, with velocities derived
from positions by forward differences. The label is the tactic. Datasets are
enriched along three variation axes (defender count, defender motion family,
measurement noise), stored as single binary files, normalized by a scaler
fitted on the combined training split only, and split 60/15/25 stratified by
class.
"""

from __future__ import annotations

import enum
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np

from . import fileio
from .engagement import (
    EngagementConfig,
    MotionType,
    Tactic,
    simulate_open_loop_batch,
)

logger = logging.getLogger(__name__)

__all__ = [
    "VoiPoint",
    "VoiSpec",
    "InstanceTensor",
    "LabeledDataset",
    "ScalerStats",
    "features_from_positions",
    "generate_subdataset",
    "generate_noise_family",
    "combine",
    "combine_files",
    "add_noise",
    "fit_scaler",
    "apply_scaler",
    "split_dataset",
    "save_dataset",
    "load_dataset",
    "voi_defender_number",
    "voi_defender_motion",
    "voi_noise",
    "voi_cross",
]

_NOISE_CHUNK = 4096  # instances noised per block to bound temporary memory


# ---------------------------------------------------------------------------
# Specs and containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VoiPoint:
    """One grid point along the variations of interest."""

    n_defenders: int
    motion: MotionType
    sigma: float = 0.0

    def as_dict(self) -> dict:
        return {"n_defenders": self.n_defenders,
                "motion": int(self.motion),
                "motion_name": MotionType(self.motion).name.lower(),
                "sigma": self.sigma}


@dataclass(frozen=True)
class VoiSpec:
    """A family of sub-datasets: grid points plus the shared seed policy."""

    dimension: str
    points: tuple[VoiPoint, ...]
    engagements_per_point: int
    seed_start: int = 0
    window_floor: int = 1  # engagements yielding fewer instance rows are dropped

    def __post_init__(self) -> None:
        if not self.points:
            raise ValueError("VoiSpec needs at least one grid point")
        if self.engagements_per_point < 1:
            raise ValueError("engagements_per_point must be >= 1")
        if self.window_floor < 1:
            raise ValueError("window_floor must be >= 1")


def voi_defender_number(values: Iterable[int], engagements: int,
                        motion: MotionType = MotionType.STAR,
                        seed_start: int = 0, window_floor: int = 1) -> VoiSpec:
    pts = tuple(VoiPoint(int(v), motion) for v in values)
    return VoiSpec("defender_number", pts, engagements, seed_start, window_floor)


def voi_defender_motion(motions: Iterable[MotionType], engagements: int,
                        n_defenders: int = 10, seed_start: int = 0,
                        window_floor: int = 1) -> VoiSpec:
    pts = tuple(VoiPoint(n_defenders, MotionType(m)) for m in motions)
    return VoiSpec("defender_motion", pts, engagements, seed_start, window_floor)


def voi_noise(sigmas: Iterable[float], engagements: int,
              n_defenders: int = 10, motion: MotionType = MotionType.STAR,
              seed_start: int = 0, window_floor: int = 1) -> VoiSpec:
    pts = tuple(VoiPoint(n_defenders, motion, float(s)) for s in sigmas)
    return VoiSpec("noise", pts, engagements, seed_start, window_floor)


def voi_cross(n_values: Iterable[int], motions: Iterable[MotionType],
              engagements: int, seed_start: int = 0,
              window_floor: int = 1) -> VoiSpec:
    pts = tuple(VoiPoint(int(n), MotionType(m))
                for n in n_values for m in motions)
    return VoiSpec("defender_number_x_motion", pts, engagements,
                   seed_start, window_floor)


@dataclass
class InstanceTensor:
    """One classification instance with its provenance."""

    values: np.ndarray  # [T, F] float32
    label: int
    seed: int
    point: VoiPoint


@dataclass
class ScalerStats:
    """Per-feature mean and variance of the fitting split."""

    mean: np.ndarray  # [F] float64
    var: np.ndarray   # [F] float64

    def __post_init__(self) -> None:
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.var = np.asarray(self.var, dtype=np.float64)
        if self.mean.shape != self.var.shape or self.mean.ndim != 1:
            raise ValueError("mean and var must be 1-D and equal length")

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(self.mean.tobytes())
        digest.update(self.var.tobytes())
        return digest.hexdigest()[:16]

    def transform(self, values: np.ndarray) -> np.ndarray:
        """Standardize in float64; works on [..., F] arrays."""
        if values.shape[-1] != self.mean.shape[0]:
            raise ValueError(f"scaler fitted for {self.mean.shape[0]} features, "
                             f"got {values.shape[-1]}")
        return (np.asarray(values, dtype=np.float64) - self.mean) / np.sqrt(self.var)


@dataclass
class LabeledDataset:
    """Uniform-length instances with labels and per-instance provenance.

    ``values`` stays float32 end to end so that save/load round trips are
    bit-exact. ``manifest`` records how the set was produced.
    """

    values: np.ndarray        # [N, T, F] float32
    labels: np.ndarray        # [N] int64, tactic codes
    seeds: np.ndarray         # [N] int64 engagement seed
    nd: np.ndarray            # [N] int32 defender count
    motion: np.ndarray        # [N] int8 motion code
    sigma: np.ndarray         # [N] float32 noise level
    split_tag: str = "full"
    manifest: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.seeds = np.asarray(self.seeds, dtype=np.int64)
        self.nd = np.asarray(self.nd, dtype=np.int32)
        self.motion = np.asarray(self.motion, dtype=np.int8)
        self.sigma = np.asarray(self.sigma, dtype=np.float32)
        if self.values.ndim != 3:
            raise ValueError("values must be [N, T, F]")
        n = self.values.shape[0]
        for name in ("labels", "seeds", "nd", "motion", "sigma"):
            if getattr(self, name).shape != (n,):
                raise ValueError(f"{name} must have one entry per instance")

    @property
    def n_instances(self) -> int:
        return self.values.shape[0]

    @property
    def window(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    def instance(self, i: int) -> InstanceTensor:
        return InstanceTensor(values=self.values[i], label=int(self.labels[i]),
                              seed=int(self.seeds[i]),
                              point=VoiPoint(int(self.nd[i]),
                                             MotionType(int(self.motion[i])),
                                             float(self.sigma[i])))

    @property
    def instances(self) -> list[InstanceTensor]:
        return [self.instance(i) for i in range(self.n_instances)]

    def class_counts(self) -> dict[int, int]:
        vals, counts = np.unique(self.labels, return_counts=True)
        return {int(v): int(c) for v, c in zip(vals, counts)}

    def subset(self, idx: np.ndarray, split_tag: str | None = None) -> "LabeledDataset":
        return LabeledDataset(values=self.values[idx], labels=self.labels[idx],
                              seeds=self.seeds[idx], nd=self.nd[idx],
                              motion=self.motion[idx], sigma=self.sigma[idx],
                              split_tag=self.split_tag if split_tag is None else split_tag,
                              manifest=dict(self.manifest))


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------


def features_from_positions(positions: np.ndarray, dt: float) -> np.ndarray:
    """Interleaved [x, y, vx, vy] blocks per agent from a position history.

    positions is [..., N_t, 2*N]; the result is [..., N_t - 1, 4*N] float64
    with velocities from forward differences, matching the integrator's
    position-update convention. Row t pairs P(t) with V(t).
    """
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape[-2] < 2:
        raise ValueError("need at least two trajectory rows for features")
    if positions.shape[-1] % 2 != 0:
        raise ValueError("positions must have an even column count")
    n = positions.shape[-1] // 2
    pos = positions[..., :-1, :]
    vel = np.diff(positions, axis=-2) / dt
    lead = pos.shape[:-1]
    pos_r = pos.reshape(lead + (n, 2))
    vel_r = vel.reshape(lead + (n, 2))
    stacked = np.concatenate([pos_r, vel_r], axis=-1)
    return stacked.reshape(lead + (4 * n,))


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


def generate_subdataset(base_config: EngagementConfig, point: VoiPoint,
                        n_engagements: int, seed_start: int = 0,
                        window_floor: int = 1) -> LabeledDataset:
    """Simulate one grid point under all four tactics and build instances.

    Engagement seeds are ``seed_start .. seed_start + n_engagements - 1``;
    the four tactic responses to one seed share its initialization and
    motion plan. Engagements whose shortest tactic run yields fewer than
    ``window_floor`` instance rows are dropped whole (all four instances) so
    class balance stays exact; dropped seeds are listed in the manifest.
    Instances are truncated to the length of the shortest kept run. Noise is
    not applied here; see :func:`add_noise`.
    """
    cfg = replace(base_config, n_defenders=point.n_defenders, seed=0)
    seeds = np.arange(seed_start, seed_start + n_engagements, dtype=np.int64)
    per_tactic: dict[Tactic, tuple[np.ndarray, np.ndarray]] = {}
    rows = np.full(n_engagements, np.iinfo(np.int64).max, dtype=np.int64)
    for tactic in Tactic:
        abuf_rows = simulate_open_loop_batch(cfg, seeds, point.motion, tactic)
        _, abuf, lengths, _, _ = abuf_rows
        per_tactic[tactic] = (abuf, lengths)
        rows = np.minimum(rows, lengths - 1)  # instance rows available

    keep = rows >= window_floor
    rejected = seeds[~keep]
    if rejected.size:
        logger.warning("dropping %d engagement(s) shorter than %d instance "
                       "rows at point %s: seeds %s", rejected.size,
                       window_floor, point.as_dict(), rejected.tolist())
    if not keep.any():
        raise ValueError(f"every engagement at point {point.as_dict()} is "
                         f"shorter than window_floor={window_floor}")
    t_len = int(rows[keep].min())
    kept_idx = np.nonzero(keep)[0]
    n_keep = kept_idx.size
    f = 4 * cfg.n_adversaries

    values = np.empty((4 * n_keep, t_len, f), dtype=np.float32)
    labels = np.empty(4 * n_keep, dtype=np.int64)
    out_seeds = np.empty(4 * n_keep, dtype=np.int64)
    row = 0
    for tactic in Tactic:
        abuf, lengths = per_tactic[tactic]
        for i in kept_idx:
            feats = features_from_positions(abuf[i, : int(lengths[i])], cfg.dt)
            values[row] = feats[:t_len].astype(np.float32)
            labels[row] = int(tactic)
            out_seeds[row] = seeds[i]
            row += 1

    manifest = {
        "kind": "subdataset",
        "point": point.as_dict(),
        "engagements": int(n_keep),
        "seed_start": int(seed_start),
        "rejected_seeds": rejected.tolist(),
        "window_floor": int(window_floor),
        "dt": cfg.dt,
        "base_config": _config_dict(base_config),
    }
    return LabeledDataset(
        values=values, labels=labels, seeds=out_seeds,
        nd=np.full(4 * n_keep, point.n_defenders, dtype=np.int32),
        motion=np.full(4 * n_keep, int(point.motion), dtype=np.int8),
        sigma=np.full(4 * n_keep, point.sigma, dtype=np.float32),
        manifest=manifest)


def _config_dict(config: EngagementConfig) -> dict:
    d = {k: getattr(config, k) for k in (
        "n_defenders", "n_adversaries", "dt", "max_steps", "defender_v_min",
        "defender_v_max", "defender_a_max", "adversary_v_max",
        "adversary_a_max", "separation", "threat_bearing_deg",
        "defender_radius", "adversary_radius", "capture_radius")}
    return d


def generate_noise_family(base: LabeledDataset, sigmas: Sequence[float],
                          noise_seed: int,
                          positions_only: bool = False) -> list[LabeledDataset]:
    """Noised copies of one clean sub-dataset, one per sigma.

    Every sigma perturbs the same underlying engagements; each gets an
    independent noise stream derived from ``noise_seed``.
    """
    children = np.random.SeedSequence(noise_seed).spawn(len(sigmas))
    return [add_noise(base, float(s), child, positions_only=positions_only)
            for s, child in zip(sigmas, children)]


# ---------------------------------------------------------------------------
# Combination, noise, scaling, splitting
# ---------------------------------------------------------------------------


def combine(parts: Sequence[LabeledDataset]) -> LabeledDataset:
    """Concatenate sub-datasets, truncating every instance to the shortest
    instance length present."""
    if not parts:
        raise ValueError("nothing to combine")
    f = parts[0].n_features
    for p in parts[1:]:
        if p.n_features != f:
            raise ValueError(f"feature width mismatch: {p.n_features} vs {f}; "
                             f"sub-datasets must share the adversary count")
    t_len = min(p.window for p in parts)
    values = np.concatenate([p.values[:, :t_len] for p in parts], axis=0)
    manifest = {
        "kind": "combined",
        "parts": [p.manifest.get("point", p.manifest.get("kind", "?"))
                  for p in parts],
        "window": t_len,
    }
    return LabeledDataset(
        values=values,
        labels=np.concatenate([p.labels for p in parts]),
        seeds=np.concatenate([p.seeds for p in parts]),
        nd=np.concatenate([p.nd for p in parts]),
        motion=np.concatenate([p.motion for p in parts]),
        sigma=np.concatenate([p.sigma for p in parts]),
        manifest=manifest)


def combine_files(paths: Sequence, out_path=None) -> LabeledDataset:
    """Combine saved sub-datasets one file at a time.

    Headers are read first to size the output, then each file is loaded and
    copied into place, keeping peak memory near one part plus the result.
    """
    if not paths:
        raise ValueError("nothing to combine")
    headers = [fileio.read_header(p, fileio.DATASET_MAGIC) for p in paths]
    shapes = [tuple(next(s for s in h["sections"] if s["name"] == "values")["shape"])
              for h in headers]
    f = shapes[0][2]
    for p, s in zip(paths, shapes):
        if s[2] != f:
            raise ValueError(f"feature width mismatch in {p}: {s[2]} vs {f}")
    t_len = min(s[1] for s in shapes)
    n_total = sum(s[0] for s in shapes)
    values = np.empty((n_total, t_len, f), dtype=np.float32)
    labels = np.empty(n_total, dtype=np.int64)
    seeds = np.empty(n_total, dtype=np.int64)
    nd = np.empty(n_total, dtype=np.int32)
    motion = np.empty(n_total, dtype=np.int8)
    sigma = np.empty(n_total, dtype=np.float32)
    points = []
    at = 0
    for p in paths:
        part = load_dataset(p)
        n = part.n_instances
        values[at:at + n] = part.values[:, :t_len]
        labels[at:at + n] = part.labels
        seeds[at:at + n] = part.seeds
        nd[at:at + n] = part.nd
        motion[at:at + n] = part.motion
        sigma[at:at + n] = part.sigma
        points.append(part.manifest.get("point", "?"))
        at += n
        del part
    out = LabeledDataset(values=values, labels=labels, seeds=seeds, nd=nd,
                         motion=motion, sigma=sigma,
                         manifest={"kind": "combined", "parts": points,
                                   "window": t_len})
    if out_path is not None:
        save_dataset(out, out_path)
    return out


def add_noise(ds: LabeledDataset, sigma: float,
              seed: int | np.random.SeedSequence,
              positions_only: bool = False) -> LabeledDataset:
    """Additive N(0, sigma^2) measurement noise on every channel.

    With ``positions_only`` the derived-velocity channels are left clean.
    sigma = 0 returns the values unchanged (bitwise).
    """
    if sigma < 0.0:
        raise ValueError("sigma must be >= 0")
    out = ds.subset(np.arange(ds.n_instances))
    out.manifest = dict(ds.manifest)
    out.manifest["noise_sigma"] = float(sigma)
    out.sigma = np.full(ds.n_instances, sigma, dtype=np.float32)
    if sigma == 0.0:
        return out
    rng = np.random.default_rng(seed)
    col_mask = np.ones(ds.n_features, dtype=bool)
    if positions_only:
        col_mask = (np.arange(ds.n_features) % 4) < 2
    for lo in range(0, ds.n_instances, _NOISE_CHUNK):
        hi = min(lo + _NOISE_CHUNK, ds.n_instances)
        block = out.values[lo:hi].astype(np.float64)
        noise = rng.normal(0.0, sigma, size=block.shape)
        block[..., col_mask] += noise[..., col_mask]
        out.values[lo:hi] = block.astype(np.float32)
    return out


def fit_scaler(ds: LabeledDataset) -> ScalerStats:
    """Per-feature mean/variance over all instances and steps.

    Fit this on the combined training split only; apply it everywhere else.
    """
    flat = ds.values.reshape(-1, ds.n_features).astype(np.float64)
    mean = flat.mean(axis=0)
    var = flat.var(axis=0)
    bad = np.nonzero(var <= 0.0)[0]
    if bad.size:
        raise ValueError(
            f"features {bad.tolist()} have zero variance; standardization "
            f"would divide by zero. Check for constant channels (e.g. a "
            f"degenerate motion family or window of length 1).")
    return ScalerStats(mean=mean, var=var)


def apply_scaler(ds: LabeledDataset, stats: ScalerStats) -> LabeledDataset:
    """Standardize values with the given stats; stamps the manifest."""
    out = ds.subset(np.arange(ds.n_instances))
    for lo in range(0, ds.n_instances, _NOISE_CHUNK):
        hi = min(lo + _NOISE_CHUNK, ds.n_instances)
        out.values[lo:hi] = stats.transform(ds.values[lo:hi]).astype(np.float32)
    out.manifest = dict(ds.manifest)
    out.manifest["scaled_with"] = stats.fingerprint()
    return out


def split_dataset(ds: LabeledDataset,
                  fractions: tuple[float, float, float] = (0.6, 0.15, 0.25),
                  seed: int = 0) -> tuple[LabeledDataset, LabeledDataset, LabeledDataset]:
    """Stratified train/validation/test split.

    Per class: floor(f_train * n) to train, floor(f_val * n) to validation,
    the remainder to test, after a seeded shuffle. Rejects splits that would
    leave a class empty in a nonzero-fraction part.
    """
    fr = np.asarray(fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0.0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError("fractions must be three nonnegative numbers summing to 1")
    rng = np.random.default_rng(seed)
    buckets: list[list[np.ndarray]] = [[], [], []]
    for label in np.unique(ds.labels):
        idx = np.nonzero(ds.labels == label)[0]
        idx = idx[rng.permutation(idx.size)]
        n_train = int(np.floor(fr[0] * idx.size))
        n_val = int(np.floor(fr[1] * idx.size))
        n_test = idx.size - n_train - n_val
        for count, frac, part in ((n_train, fr[0], "train"),
                                  (n_val, fr[1], "validation"),
                                  (n_test, fr[2], "test")):
            if frac > 0.0 and count == 0:
                raise ValueError(
                    f"class {int(label)} has only {idx.size} instances; the "
                    f"{part} fraction {frac} rounds to zero. Generate more "
                    f"engagements or adjust fractions.")
        buckets[0].append(idx[:n_train])
        buckets[1].append(idx[n_train:n_train + n_val])
        buckets[2].append(idx[n_train + n_val:])
    tags = ("train", "val", "test")
    outs = []
    for bucket, tag in zip(buckets, tags):
        sel = np.sort(np.concatenate(bucket))
        outs.append(ds.subset(sel, split_tag=tag))
    return tuple(outs)


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def save_dataset(ds: LabeledDataset, path) -> None:
    header = {"kind": "dataset", "split": ds.split_tag, "manifest": ds.manifest}
    fileio.write_container(path, fileio.DATASET_MAGIC, header, {
        "values": ds.values,
        "labels": ds.labels,
        "seeds": ds.seeds,
        "nd": ds.nd,
        "motion": ds.motion,
        "sigma": ds.sigma,
    })


def load_dataset(path) -> LabeledDataset:
    header, blobs = fileio.read_container(path, fileio.DATASET_MAGIC)
    required = {"values", "labels", "seeds", "nd", "motion", "sigma"}
    missing = required - set(blobs)
    if missing:
        raise fileio.FormatError(f"missing sections {sorted(missing)}",
                                 section=next(iter(sorted(missing))))
    return LabeledDataset(values=blobs["values"], labels=blobs["labels"],
                          seeds=blobs["seeds"], nd=blobs["nd"],
                          motion=blobs["motion"], sigma=blobs["sigma"],
                          split_tag=header.get("split", "full"),
                          manifest=header.get("manifest", {}))
