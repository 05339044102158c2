"""Training objectives for drop-profile regression.

The positional loss accumulates cumulative differences between predicted and
reference drops (the 1D transport cost between the two profiles), summed in
both the proximal-to-distal and distal-to-proximal directions so that a
displaced drop is penalized symmetrically.  The histogram loss compares
Gaussian-kernel soft histograms of the drop values, which supervises the
shape of the drops while being invariant to their location.  A monotonicity
penalty discourages negative drops, and a plain MAE term is available as a
substitute positional loss for ablation runs.

Every loss has a node-level form (suffix `_node`) operating on autodiff
tensors of shape (1, m) and a convenience form operating on DropProfile
values and returning a float.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .curves import DropProfile


@dataclass(frozen=True)
class HistogramConfig:
    """Soft-histogram bins: Gaussian kernels at equidistant centers."""

    n_bins: int = 32
    sigma: float = 0.1
    low: float = -0.1
    high: float = 0.5
    weight_floor: float = 0.01

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if self.n_bins < 2 or self.high <= self.low:
            raise ValueError("need at least 2 strictly increasing bin centers")

    def centers(self) -> np.ndarray:
        return _bin_arrays(self)[0]

    def weights(self) -> np.ndarray:
        return _bin_arrays(self)[1]


_BIN_CACHE: dict = {}


def _bin_arrays(cfg: HistogramConfig) -> tuple[np.ndarray, np.ndarray]:
    got = _BIN_CACHE.get(cfg)
    if got is None:
        centers = np.linspace(cfg.low, cfg.high, cfg.n_bins)
        # larger drops are rarer but matter more; the floor keeps near-zero
        # bins weakly supervised instead of gradient-free
        weights = np.maximum(centers, 0.0) + cfg.weight_floor
        got = _BIN_CACHE[cfg] = (centers, weights)
    return got


@dataclass(frozen=True)
class LossWeights:
    emd: float = 0.1
    hist: float = 5.0
    mono: float = 20.0
    mae: float = 25.0

    def __post_init__(self):
        if min(self.emd, self.hist, self.mono, self.mae) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass(frozen=True)
class AblationFlags:
    """Which positional / shape terms participate in the total loss."""

    use_emd: bool = True
    use_mae: bool = False
    use_hist: bool = True


def _check_grids(pred: DropProfile, ref: DropProfile):
    if pred.grid != ref.grid:
        raise ValueError(f"grid mismatch: {pred.grid} vs {ref.grid}")


def _check_shapes(pred: ad.Tensor, ref: ad.Tensor):
    if pred.values.shape != ref.values.shape:
        raise ValueError(f"shape mismatch: {pred.values.shape} vs {ref.values.shape}")


def _as_row(profile: DropProfile) -> ad.Tensor:
    return ad.constant(profile.drops[None, :])


# ---------------------------------------------------------------------------
# positional (EMD) losses
# ---------------------------------------------------------------------------

def emd_forward_node(pred: ad.Tensor, ref: ad.Tensor) -> ad.Tensor:
    _check_shapes(pred, ref)
    return ad.sum_(ad.abs_(ad.cumsum(ad.sub(pred, ref))))


def emd_reverse_node(pred: ad.Tensor, ref: ad.Tensor) -> ad.Tensor:
    _check_shapes(pred, ref)
    return ad.sum_(ad.abs_(ad.rcumsum(ad.sub(pred, ref))))


def emd_symmetric_node(pred: ad.Tensor, ref: ad.Tensor) -> ad.Tensor:
    _check_shapes(pred, ref)
    diff = ad.sub(pred, ref)
    fwd = ad.sum_(ad.abs_(ad.cumsum(diff)))
    rev = ad.sum_(ad.abs_(ad.rcumsum(diff)))
    return ad.add(fwd, rev)


def emd_forward_loss(pred: DropProfile, ref: DropProfile) -> float:
    """Accumulated absolute difference of the two pullback curves."""
    _check_grids(pred, ref)
    return emd_forward_node(_as_row(pred), _as_row(ref)).item()


def emd_reverse_loss(pred: DropProfile, ref: DropProfile) -> float:
    """Same accumulation computed from the distal end."""
    _check_grids(pred, ref)
    return emd_reverse_node(_as_row(pred), _as_row(ref)).item()


def emd_symmetric_loss(pred: DropProfile, ref: DropProfile) -> float:
    _check_grids(pred, ref)
    return emd_symmetric_node(_as_row(pred), _as_row(ref)).item()


# ---------------------------------------------------------------------------
# histogram loss
# ---------------------------------------------------------------------------

def soft_histogram_node(drops: ad.Tensor, cfg: HistogramConfig) -> ad.Tensor:
    return ad.soft_histogram_op(drops, cfg.centers(), cfg.sigma)


def soft_histogram(drops: DropProfile, cfg: HistogramConfig) -> np.ndarray:
    return soft_histogram_node(_as_row(drops), cfg).values


def histogram_loss_node(pred: ad.Tensor, ref: ad.Tensor, cfg: HistogramConfig) -> ad.Tensor:
    _check_shapes(pred, ref)
    hp = soft_histogram_node(pred, cfg)
    hr = soft_histogram_node(ref, cfg)
    return ad.weighted_sum(ad.abs_(ad.sub(hp, hr)), cfg.weights())


def histogram_loss(pred: DropProfile, ref: DropProfile, cfg: HistogramConfig) -> float:
    return histogram_loss_node(_as_row(pred), _as_row(ref), cfg).item()


# ---------------------------------------------------------------------------
# regularization and baseline
# ---------------------------------------------------------------------------

def monotonicity_penalty_node(pred: ad.Tensor) -> ad.Tensor:
    return ad.abs_(ad.sum_(ad.min_zero(pred)))


def monotonicity_penalty(pred: DropProfile) -> float:
    return monotonicity_penalty_node(_as_row(pred)).item()


def mae_loss_node(pred: ad.Tensor, ref: ad.Tensor) -> ad.Tensor:
    _check_shapes(pred, ref)
    m = pred.values.size
    return ad.mul_scalar(ad.sum_(ad.abs_(ad.sub(pred, ref))), 1.0 / m)


def mae_loss(pred: DropProfile, ref: DropProfile) -> float:
    _check_grids(pred, ref)
    return mae_loss_node(_as_row(pred), _as_row(ref)).item()


# ---------------------------------------------------------------------------
# combined objective
# ---------------------------------------------------------------------------

def total_loss_node(
    pred: ad.Tensor,
    ref: ad.Tensor,
    weights: LossWeights,
    cfg: HistogramConfig,
    flags: AblationFlags = AblationFlags(),
) -> tuple[ad.Tensor, dict]:
    """Weighted sum of active terms; returns (scalar node, component floats).

    The monotonicity penalty is regularization and participates in every
    configuration (weight 0 disables it).
    """
    terms: list[ad.Tensor] = []
    components: dict[str, float] = {}
    if flags.use_emd and weights.emd > 0:
        emd = emd_symmetric_node(pred, ref)
        components["emd"] = emd.item()
        terms.append(ad.mul_scalar(emd, weights.emd))
    if flags.use_mae and weights.mae > 0:
        mae = mae_loss_node(pred, ref)
        components["mae"] = mae.item()
        terms.append(ad.mul_scalar(mae, weights.mae))
    if flags.use_hist and weights.hist > 0:
        hist = histogram_loss_node(pred, ref, cfg)
        components["hist"] = hist.item()
        terms.append(ad.mul_scalar(hist, weights.hist))
    if weights.mono > 0:
        mono = monotonicity_penalty_node(pred)
        components["mono"] = mono.item()
        terms.append(ad.mul_scalar(mono, weights.mono))
    if not terms:
        total = ad.mul_scalar(ad.sum_(pred), 0.0)
    else:
        total = terms[0]
        for t in terms[1:]:
            total = ad.add(total, t)
    components["total"] = total.item()
    return total, components


def total_loss(
    pred: DropProfile,
    ref: DropProfile,
    weights: LossWeights,
    cfg: HistogramConfig,
    flags: AblationFlags = AblationFlags(),
) -> float:
    _check_grids(pred, ref)
    node, _ = total_loss_node(_as_row(pred), _as_row(ref), weights, cfg, flags)
    return node.item()
