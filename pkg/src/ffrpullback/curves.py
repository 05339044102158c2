"""Pullback curves and per-point FFR drops on a uniform centerline grid.

An FFR pullback is represented either as the curve itself (FFR value per
grid point, starting at 1.0 at the ostium) or as the per-point drops whose
running sum defines the curve.  All transforms here are pure functions of
numpy arrays; values are copied on construction so instances can be shared
freely between threads.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np

N_LATENT = 32


@dataclass(frozen=True)
class Grid:
    """Uniform 1D sampling grid along the artery centerline."""

    spacing_mm: float = 0.5
    n_points: int = 2

    def __post_init__(self):
        if not self.spacing_mm > 0:
            raise ValueError(f"spacing_mm must be positive, got {self.spacing_mm}")
        if self.n_points < 2:
            raise ValueError(f"n_points must be >= 2, got {self.n_points}")

    @property
    def length_mm(self) -> float:
        return self.spacing_mm * (self.n_points - 1)

    def positions_mm(self) -> np.ndarray:
        return np.arange(self.n_points) * self.spacing_mm


def _as_vector(values, n_points: int, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1 or arr.shape[0] != n_points:
        raise ValueError(f"{name} must be a vector of length {n_points}, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


@dataclass(frozen=True)
class DropProfile:
    """Per-point FFR drops; the cumulative sum from the ostium gives the curve."""

    grid: Grid
    drops: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "drops", _as_vector(self.drops, self.grid.n_points, "drops"))

    def total(self) -> float:
        return float(self.drops.sum())


@dataclass(frozen=True)
class PullbackCurve:
    """FFR values along the artery (1.0 at an unobstructed ostium)."""

    grid: Grid
    ffr: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "ffr", _as_vector(self.ffr, self.grid.n_points, "ffr"))


@dataclass(frozen=True)
class CharacteristicSet:
    """Per-point artery characteristics feeding the prediction network.

    `lumen_area` is in mm^2, the two binary channels mark bifurcation and
    side-branch points, and `latent` holds the 32 per-point encoding means.
    """

    grid: Grid
    lumen_area: np.ndarray
    bifurcation: np.ndarray
    side_branch: np.ndarray
    latent: np.ndarray

    def __post_init__(self):
        n = self.grid.n_points
        object.__setattr__(self, "lumen_area", _as_vector(self.lumen_area, n, "lumen_area"))
        object.__setattr__(self, "bifurcation", _as_vector(self.bifurcation, n, "bifurcation"))
        object.__setattr__(self, "side_branch", _as_vector(self.side_branch, n, "side_branch"))
        lat = np.asarray(self.latent, dtype=np.float64)
        if lat.shape != (N_LATENT, n):
            raise ValueError(f"latent must have shape ({N_LATENT}, {n}), got {lat.shape}")
        if not np.all(np.isfinite(lat)):
            raise ValueError("latent contains non-finite values")
        object.__setattr__(self, "latent", lat)


@dataclass(frozen=True)
class ArteryRecord:
    """One artery: characteristics, reference pullback, and measured extent."""

    id: str
    characteristics: CharacteristicSet
    ref_drops: DropProfile | None
    measurement_end_index: int
    label: str | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        n = self.characteristics.grid.n_points
        if not (0 < self.measurement_end_index < n):
            raise ValueError(
                f"measurement_end_index must lie in (0, {n}), got {self.measurement_end_index}"
            )
        if self.label not in (None, "focal", "diffuse"):
            raise ValueError(f"label must be focal/diffuse/None, got {self.label!r}")

    @property
    def grid(self) -> Grid:
        return self.characteristics.grid


# ---------------------------------------------------------------------------
# transforms
# ---------------------------------------------------------------------------

def drops_to_ffr(profile: DropProfile) -> PullbackCurve:
    """FFR curve from drops: ffr[j] = 1 - sum(drops[:j+1])."""
    return PullbackCurve(profile.grid, 1.0 - np.cumsum(profile.drops))


def ffr_to_drops(curve: PullbackCurve) -> DropProfile:
    """Exact inverse of drops_to_ffr: first drop is 1 - ffr[0]."""
    drops = np.empty_like(curve.ffr)
    drops[0] = 1.0 - curve.ffr[0]
    drops[1:] = curve.ffr[:-1] - curve.ffr[1:]
    return DropProfile(curve.grid, drops)


def pct_diff(lumen_area: np.ndarray) -> np.ndarray:
    """Relative step-to-step narrowing: out[i] = 1 - a[i]/a[i-1], out[0] = 0.

    Invariant under rescaling of the whole area vector, which removes the
    proximal-to-distal taper trend before convolutional processing.
    """
    a = np.asarray(lumen_area, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("lumen_area must be strictly positive")
    out = np.zeros_like(a)
    out[1:] = 1.0 - a[1:] / a[:-1]
    return out


def avg_pool_drops(profile: DropProfile, kernel: int = 4) -> DropProfile:
    """Non-overlapping mean pooling of drops; a trailing partial window is
    averaged over its actual length so no drop is silently discarded."""
    if kernel < 1:
        raise ValueError(f"kernel must be >= 1, got {kernel}")
    d = profile.drops
    n = d.shape[0]
    n_full = n // kernel
    pooled = []
    if n_full:
        pooled.append(d[: n_full * kernel].reshape(n_full, kernel).mean(axis=1))
    if n % kernel:
        pooled.append(np.array([d[n_full * kernel :].mean()]))
    out = np.concatenate(pooled)
    if out.shape[0] < 2:
        raise ValueError(f"profile of {n} points pools to fewer than 2 windows")
    return DropProfile(Grid(profile.grid.spacing_mm * kernel, out.shape[0]), out)


def mask_distal(profile: DropProfile, end_index: int) -> DropProfile:
    """Zero all drops strictly distal to end_index."""
    n = profile.grid.n_points
    if not (0 <= end_index < n):
        raise ValueError(f"end_index must lie in [0, {n}), got {end_index}")
    masked = profile.drops.copy()
    masked[end_index + 1 :] = 0.0
    return DropProfile(profile.grid, masked)


def min_ffr(curve: PullbackCurve) -> float:
    return float(curve.ffr.min())


def resample_linear(curve: PullbackCurve, new_spacing_mm: float) -> PullbackCurve:
    """Linear resampling at 0, s, 2s, ... up to the last position inside the
    curve; never extrapolates beyond the final sample."""
    if new_spacing_mm <= 0:
        raise ValueError(f"new_spacing_mm must be positive, got {new_spacing_mm}")
    total = curve.grid.length_mm
    n_out = int(np.floor(total / new_spacing_mm + 1e-9)) + 1
    if n_out < 2:
        raise ValueError(
            f"curve of length {total} mm too short for spacing {new_spacing_mm} mm"
        )
    new_pos = np.arange(n_out) * new_spacing_mm
    values = np.interp(new_pos, curve.grid.positions_mm(), curve.ffr)
    return PullbackCurve(Grid(new_spacing_mm, n_out), values)


def truncate_curve(curve: PullbackCurve, end_index: int) -> PullbackCurve:
    """Keep samples [0, end_index] of the curve."""
    n = curve.grid.n_points
    if not (1 <= end_index < n):
        raise ValueError(f"end_index must lie in [1, {n}), got {end_index}")
    return PullbackCurve(Grid(curve.grid.spacing_mm, end_index + 1), curve.ffr[: end_index + 1])


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------

CONTINUOUS_CHANNELS = ("lumen_area",) + tuple(f"latent_{k}" for k in range(N_LATENT))


def _continuous_channels(cs: CharacteristicSet) -> list[np.ndarray]:
    return [cs.lumen_area] + [cs.latent[k] for k in range(N_LATENT)]


def compute_normalization_stats(records: list[ArteryRecord]) -> dict:
    """Per-channel mean/std over all points of all records.

    The lumen slot is included as-is: callers that feed the network replace
    it with the relative-narrowing transform before computing stats.
    """
    if not records:
        raise ValueError("cannot compute statistics over an empty record set")
    pooled = [[] for _ in CONTINUOUS_CHANNELS]
    for rec in records:
        for i, ch in enumerate(_continuous_channels(rec.characteristics)):
            pooled[i].append(ch)
    mean, std = [], []
    for name, parts in zip(CONTINUOUS_CHANNELS, pooled):
        values = np.concatenate(parts)
        m = float(values.mean())
        s = float(values.std())
        if s == 0.0:
            raise ValueError(f"channel {name} has zero variance; degenerate dataset")
        mean.append(m)
        std.append(s)
    return {"mean": mean, "std": std}


def normalize_characteristics(
    records: list[ArteryRecord], stats: dict | None = None
) -> tuple[list[ArteryRecord], dict]:
    """Standardize continuous channels, cap binary channels at 1.

    Without `stats` the statistics are computed from `records` (training
    mode); with `stats` the given training statistics are applied unchanged
    (test mode), so no information from the normalized set leaks in.
    """
    if stats is None:
        stats = compute_normalization_stats(records)
    mean = np.asarray(stats["mean"], dtype=np.float64)
    std = np.asarray(stats["std"], dtype=np.float64)
    out = []
    for rec in records:
        cs = rec.characteristics
        lumen = (cs.lumen_area - mean[0]) / std[0]
        latent = (cs.latent - mean[1:, None]) / std[1:, None]
        normalized = CharacteristicSet(
            grid=cs.grid,
            lumen_area=lumen,
            bifurcation=np.minimum(cs.bifurcation, 1.0),
            side_branch=np.minimum(cs.side_branch, 1.0),
            latent=latent,
        )
        out.append(replace(rec, characteristics=normalized))
    return out, stats


# ---------------------------------------------------------------------------
# JSONL dataset I/O
# ---------------------------------------------------------------------------

def record_to_obj(rec: ArteryRecord) -> dict:
    cs = rec.characteristics
    obj = {
        "id": rec.id,
        "spacing_mm": cs.grid.spacing_mm,
        "lumen_area": cs.lumen_area.tolist(),
        "bifurcation": cs.bifurcation.tolist(),
        "side_branch": cs.side_branch.tolist(),
        "latent": cs.latent.tolist(),
        "ref_ffr": None if rec.ref_drops is None else drops_to_ffr(rec.ref_drops).ffr.tolist(),
        "measurement_end_index": rec.measurement_end_index,
    }
    if rec.label is not None:
        obj["label"] = rec.label
    if rec.meta:
        obj["meta"] = rec.meta
    return obj


def record_from_obj(obj: dict) -> ArteryRecord:
    n = len(obj["lumen_area"])
    grid = Grid(float(obj["spacing_mm"]), n)
    cs = CharacteristicSet(
        grid=grid,
        lumen_area=obj["lumen_area"],
        bifurcation=obj["bifurcation"],
        side_branch=obj["side_branch"],
        latent=obj["latent"],
    )
    ref_ffr = obj.get("ref_ffr")
    if ref_ffr is None:
        ref_drops = None
    else:
        # reference pullbacks are renormalized to start at 1.0 at the ostium
        ffr = np.asarray(ref_ffr, dtype=np.float64)
        ffr = ffr + (1.0 - ffr[0])
        ref_drops = ffr_to_drops(PullbackCurve(grid, ffr))
    return ArteryRecord(
        id=str(obj["id"]),
        characteristics=cs,
        ref_drops=ref_drops,
        measurement_end_index=int(obj["measurement_end_index"]),
        label=obj.get("label"),
        meta=obj.get("meta", {}),
    )


def write_dataset(path, records: list[ArteryRecord], header: dict | None = None) -> None:
    with open(path, "w") as fh:
        if header is not None:
            fh.write(json.dumps({"type": "header", **header}) + "\n")
        for rec in records:
            fh.write(json.dumps(record_to_obj(rec)) + "\n")


def read_dataset(path) -> tuple[list[ArteryRecord], dict]:
    """Read a JSONL dataset; returns (records, header). Header may be empty."""
    records, header = [], {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if obj.get("type") == "header":
                header = {k: v for k, v in obj.items() if k != "type"}
            else:
                records.append(record_from_obj(obj))
    return records, header
