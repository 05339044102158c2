"""Convolutional regression of per-point FFR drops from artery characteristics.

The lumen-area channel is converted to relative step-to-step narrowing and
pre-encoded by a stack of dilated convolutions whose receptive field spans a
whole lesion; the latent encodings get a shallower pre-encoder.  Both feature
stacks are concatenated with the raw input characteristics (skip connection)
and regressed to a 1-channel drop sequence, which is average-pooled to the
supervision grid, masked beyond the measured extent, and accumulated into the
FFR curve.  The final layer starts at zero so an untrained network predicts
the healthy curve FFR = 1.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .curves import (
    ArteryRecord,
    CharacteristicSet,
    DropProfile,
    Grid,
    PullbackCurve,
    drops_to_ffr,
    mask_distal,
    min_ffr,
    normalize_characteristics,
    pct_diff,
)

LATENT_MODES = ("standard", "none", "all")


@dataclass(frozen=True)
class NetworkConfig:
    n_filters: int = 16
    kernel: int = 3
    dropout_p: float = 0.5
    lumen_dilations: tuple = (1, 2, 4, 8)
    latent_depth: int = 2
    head_depth: int = 2
    pool_kernel: int = 4
    latent_mode: str = "standard"
    n_latent_extra: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.kernel != 3:
            raise ValueError("only kernel size 3 is supported")
        if self.latent_mode not in LATENT_MODES:
            raise ValueError(f"latent_mode must be one of {LATENT_MODES}")
        if min(self.latent_depth, self.head_depth) < 1 or len(self.lumen_dilations) < 1:
            raise ValueError("all depths must be >= 1")
        if list(self.lumen_dilations) != sorted(set(self.lumen_dilations)):
            raise ValueError("lumen_dilations must be strictly increasing")

    @property
    def n_latent_in(self) -> int:
        from .curves import N_LATENT

        if self.latent_mode == "none":
            return 0
        if self.latent_mode == "all":
            return N_LATENT + self.n_latent_extra
        return N_LATENT

    @property
    def n_concat(self) -> int:
        # pre-encoded lumen + (pre-encoded latent) + pct-diff + bifurcation + side branch
        n = self.n_filters + 3
        if self.latent_mode != "none":
            n += self.n_filters
        return n

    def to_dict(self) -> dict:
        return {
            "n_filters": self.n_filters,
            "kernel": self.kernel,
            "dropout_p": self.dropout_p,
            "lumen_dilations": list(self.lumen_dilations),
            "latent_depth": self.latent_depth,
            "head_depth": self.head_depth,
            "pool_kernel": self.pool_kernel,
            "latent_mode": self.latent_mode,
            "n_latent_extra": self.n_latent_extra,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(obj: dict) -> "NetworkConfig":
        obj = dict(obj)
        if "lumen_dilations" in obj:
            obj["lumen_dilations"] = tuple(obj["lumen_dilations"])
        return NetworkConfig(**obj)


@dataclass(frozen=True)
class Prediction:
    drops_2mm: DropProfile
    ffr_2mm: PullbackCurve
    min_ffr: float


@dataclass(frozen=True)
class ModelInputs:
    """Network-ready channels for one artery (already standardized)."""

    pct: np.ndarray      # (1, n) relative narrowing of the lumen
    binary: np.ndarray   # (2, n) bifurcation and side-branch flags
    latent: np.ndarray   # (n_latent_in, n) encoding channels
    n_points: int
    spacing_mm: float


# ---------------------------------------------------------------------------
# record preparation
# ---------------------------------------------------------------------------

def prepare_records(
    records: list[ArteryRecord], stats: dict | None = None
) -> tuple[list[ArteryRecord], dict]:
    """Replace the raw lumen channel with its relative narrowing, then
    standardize continuous channels (training stats when `stats` is None)."""
    transformed = []
    for rec in records:
        cs = rec.characteristics
        cs = CharacteristicSet(
            grid=cs.grid,
            lumen_area=pct_diff(cs.lumen_area),
            bifurcation=cs.bifurcation,
            side_branch=cs.side_branch,
            latent=cs.latent,
        )
        transformed.append(replace(rec, characteristics=cs))
    return normalize_characteristics(transformed, stats)


def _background_channels(rec_id: str, n_extra: int, n_points: int) -> np.ndarray:
    """Deterministic smoothed-noise channels standing in for encodings that
    carry no artery information."""
    seed = zlib.crc32(rec_id.encode("utf-8"))
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBA5E]))
    noise = rng.normal(0.0, 1.0, (n_extra, n_points + 4))
    kernel = np.ones(5) / 5.0
    smooth = np.stack([np.convolve(row, kernel, mode="valid") for row in noise])
    return smooth


def build_inputs(rec: ArteryRecord, cfg: NetworkConfig) -> ModelInputs:
    cs = rec.characteristics
    n = cs.grid.n_points
    if cfg.latent_mode == "none":
        latent = np.zeros((0, n))
    elif cfg.latent_mode == "all":
        latent = np.concatenate([cs.latent, _background_channels(rec.id, cfg.n_latent_extra, n)])
    else:
        latent = cs.latent
    return ModelInputs(
        pct=cs.lumen_area[None, :],
        binary=np.stack([cs.bifurcation, cs.side_branch]),
        latent=latent,
        n_points=n,
        spacing_mm=cs.grid.spacing_mm,
    )


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------

def _conv_param(name: str, c_out: int, c_in: int, rng, zero=False) -> dict:
    if zero:
        w = np.zeros((c_out, c_in, 3))
    else:
        w = rng.normal(0.0, np.sqrt(2.0 / (c_in * 3)), (c_out, c_in, 3))
    return {
        f"{name}.w": ad.Parameter(f"{name}.w", w),
        f"{name}.b": ad.Parameter(f"{name}.b", np.zeros(c_out)),
    }


def init_params(cfg: NetworkConfig, rng: np.random.Generator) -> dict:
    """He-initialized conv stacks; the output layer starts at zero so the
    initial prediction is the lesion-free curve."""
    f = cfg.n_filters
    params: dict[str, ad.Parameter] = {}
    c_in = 1
    for i, _ in enumerate(cfg.lumen_dilations):
        params.update(_conv_param(f"pre_lumen.{i}", f, c_in, rng))
        c_in = f
    if cfg.latent_mode != "none":
        c_in = cfg.n_latent_in
        for i in range(cfg.latent_depth):
            params.update(_conv_param(f"pre_latent.{i}", f, c_in, rng))
            c_in = f
    c_in = cfg.n_concat
    for i in range(cfg.head_depth):
        params.update(_conv_param(f"head.{i}", f, c_in, rng))
        c_in = f
    params.update(_conv_param("out", 1, c_in, rng, zero=True))
    return params


def params_to_arrays(params: dict) -> dict:
    return {name: p.values.tolist() for name, p in sorted(params.items())}


def params_from_arrays(arrays: dict) -> dict:
    return {name: ad.Parameter(name, np.asarray(vals, dtype=np.float64)) for name, vals in arrays.items()}


# ---------------------------------------------------------------------------
# forward pass
# ---------------------------------------------------------------------------

def _block(x, params, name, dilation, cfg, train, rng):
    return ad.conv_block(
        x, params[f"{name}.w"], params[f"{name}.b"], dilation, cfg.dropout_p, rng, train
    )


def forward_nodes(
    inputs: ModelInputs,
    params: dict,
    cfg: NetworkConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> dict:
    """Build the graph; returns {'raw': per-point drops, 'pooled': supervision-grid drops}."""
    if train and rng is None:
        raise ValueError("training mode requires an RNG for dropout")
    pct = ad.constant(inputs.pct)
    binary = ad.constant(inputs.binary)

    x = pct
    for i, d in enumerate(cfg.lumen_dilations):
        x = _block(x, params, f"pre_lumen.{i}", d, cfg, train, rng)
    parts = [x]

    if cfg.latent_mode != "none":
        z = ad.constant(inputs.latent)
        for i in range(cfg.latent_depth):
            z = _block(z, params, f"pre_latent.{i}", 1, cfg, train, rng)
        parts.append(z)

    merged = ad.concat_channels(parts + [pct, binary])
    h = merged
    for i in range(cfg.head_depth):
        h = _block(h, params, f"head.{i}", 1, cfg, train, rng)
    raw = ad.conv1d(h, params["out.w"], params["out.b"], 1)
    pooled = ad.avg_pool1d(raw, cfg.pool_kernel)
    return {"raw": raw, "pooled": pooled}


def supervision_end_index(rec: ArteryRecord, pool_kernel: int) -> int:
    """Index on the pooled grid of the window containing the last measured point."""
    return rec.measurement_end_index // pool_kernel


def forward(
    rec: ArteryRecord,
    params: dict,
    cfg: NetworkConfig,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Prediction:
    """Full prediction for one (prepared) artery record."""
    nodes = forward_nodes(build_inputs(rec, cfg), params, cfg, train, rng)
    pooled = nodes["pooled"].values[0]
    grid = Grid(rec.grid.spacing_mm * cfg.pool_kernel, pooled.shape[0])
    masked = mask_distal(DropProfile(grid, pooled), supervision_end_index(rec, cfg.pool_kernel))
    ffr = drops_to_ffr(masked)
    return Prediction(drops_2mm=masked, ffr_2mm=ffr, min_ffr=min_ffr(ffr))


def predict_artery_ffr(rec: ArteryRecord, params: dict, cfg: NetworkConfig) -> float:
    """Single per-artery FFR value: the minimum of the predicted curve."""
    return forward(rec, params, cfg, train=False).min_ffr
