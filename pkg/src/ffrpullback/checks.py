"""Self-contained verification suites: finite-difference gradient checks for
every loss and for the whole network, and loss-landscape sweeps showing how
each objective responds to a displaced drop (positional loss grows with the
displacement, MAE saturates once drops no longer overlap, histogram loss
ignores location entirely)."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .losses import (
    AblationFlags,
    HistogramConfig,
    LossWeights,
    emd_symmetric_node,
    histogram_loss_node,
    mae_loss_node,
    monotonicity_penalty_node,
    total_loss_node,
)
from .network import ModelInputs, NetworkConfig, forward_nodes, init_params

FD_STEP = 1e-6


def rel_error(got: np.ndarray, want: np.ndarray) -> float:
    return float(np.max(np.abs(got - want) / (1.0 + np.abs(want))))


# ---------------------------------------------------------------------------
# gradient checks
# ---------------------------------------------------------------------------

def _loss_builders(cfg: HistogramConfig):
    return {
        "emd_symmetric": lambda p, r: emd_symmetric_node(p, r),
        "histogram": lambda p, r: histogram_loss_node(p, r, cfg),
        "monotonicity": lambda p, r: monotonicity_penalty_node(p),
        "mae": lambda p, r: mae_loss_node(p, r),
    }


def loss_gradient_checks(seed: int, m: int = 18) -> dict[str, float]:
    """Max relative error of each loss gradient vs central differences.

    Inputs are nudged off exact ties so the checks stay away from the
    absolute-value kinks.
    """
    rng = np.random.default_rng(seed)
    cfg = HistogramConfig()
    ref = rng.uniform(0.0, 0.25, (1, m))
    pred0 = ref + rng.uniform(-0.08, 0.08, (1, m))
    pred0[np.abs(pred0 - ref) < 1e-3] += 2e-3
    pred0[np.abs(pred0) < 1e-3] -= 2e-3

    errors = {}
    for name, build in _loss_builders(cfg).items():
        p = ad.Parameter("p", pred0)
        ad.backward(build(p, ad.constant(ref)))
        fd = np.zeros_like(pred0)
        work = pred0.copy()
        for i in range(m):
            orig = work[0, i]
            work[0, i] = orig + FD_STEP
            up = build(ad.constant(work), ad.constant(ref)).item()
            work[0, i] = orig - FD_STEP
            down = build(ad.constant(work), ad.constant(ref)).item()
            work[0, i] = orig
            fd[0, i] = (up - down) / (2 * FD_STEP)
        errors[name] = rel_error(p.grad, fd)
    return errors


def network_gradient_check(
    seed: int,
    n_points: int = 16,
    coords_per_param: int = 3,
    cfg: NetworkConfig | None = None,
) -> float:
    """Whole-network check: loss gradient for sampled parameter coordinates
    vs central differences, dropout in eval mode."""
    cfg = cfg or NetworkConfig()
    rng = np.random.default_rng(seed)
    params = init_params(cfg, rng)
    # the output layer is zero-initialized; randomize it so gradients flow
    params["out.w"].values[:] = rng.normal(0.0, 0.2, params["out.w"].values.shape)
    params["out.b"].values[:] = rng.normal(0.0, 0.1, params["out.b"].values.shape)

    inputs = ModelInputs(
        pct=rng.normal(0.0, 1.0, (1, n_points)),
        binary=(rng.random((2, n_points)) < 0.15).astype(float),
        latent=rng.normal(0.0, 1.0, (cfg.n_latent_in, n_points)),
        n_points=n_points,
        spacing_mm=0.5,
    )
    m2 = int(np.ceil(n_points / cfg.pool_kernel))
    mask = np.ones((1, m2))
    mask[0, m2 - 1 :] = 0.0
    ref = rng.uniform(0.0, 0.2, (1, m2)) * mask
    weights = LossWeights()
    hist_cfg = HistogramConfig()

    def loss_value() -> float:
        nodes = forward_nodes(inputs, params, cfg, train=False)
        masked = ad.mul_const(nodes["pooled"], mask)
        node, _ = total_loss_node(masked, ad.constant(ref), weights, hist_cfg)
        return node.item()

    nodes = forward_nodes(inputs, params, cfg, train=False)
    masked = ad.mul_const(nodes["pooled"], mask)
    node, _ = total_loss_node(masked, ad.constant(ref), weights, hist_cfg)
    for p in params.values():
        p.zero_grad()
    ad.backward(node)

    worst = 0.0
    for name in sorted(params):
        p = params[name]
        flat = p.values.reshape(-1)
        gflat = p.grad.reshape(-1)
        idx = rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + FD_STEP
            up = loss_value()
            flat[i] = orig - FD_STEP
            down = loss_value()
            flat[i] = orig
            fd = (up - down) / (2 * FD_STEP)
            worst = max(worst, abs(gflat[i] - fd) / (1.0 + abs(fd)))
    return worst


def run_gradient_suite(n_seeds: int = 20) -> tuple[bool, list[str]]:
    """One line per check; passes iff every max relative error < 1e-4
    (losses individually < 1e-5)."""
    lines, ok = [], True
    for seed in range(n_seeds):
        errs = loss_gradient_checks(1000 + seed)
        for name, err in errs.items():
            good = err < 1e-5
            ok &= good
            lines.append(f"{'PASS' if good else 'FAIL'} loss-grad {name} seed={seed} rel_err={err:.3e}")
        net_err = network_gradient_check(2000 + seed)
        good = net_err < 1e-4
        ok &= good
        lines.append(f"{'PASS' if good else 'FAIL'} network-grad seed={seed} rel_err={net_err:.3e}")
    return ok, lines


# ---------------------------------------------------------------------------
# loss landscapes
# ---------------------------------------------------------------------------

def loss_landscape(
    n_points: int = 100,
    drop: float = 0.3,
    ref_index: int = 40,
    max_shift: int = 50,
    spacing_mm: float = 2.0,
) -> dict:
    """Loss values for a single reference drop vs the same drop displaced by
    k samples, plus the cost of predicting no drop at all."""
    cfg = HistogramConfig()
    ref = np.zeros((1, n_points))
    ref[0, ref_index] = drop
    refc = ad.constant(ref)

    shifts, emd_vals, mae_vals, hist_vals = [], [], [], []
    for k in range(0, max_shift + 1):
        pred = np.zeros((1, n_points))
        pred[0, ref_index + k] = drop
        predc = ad.constant(pred)
        shifts.append(k * spacing_mm)
        emd_vals.append(emd_symmetric_node(predc, refc).item())
        mae_vals.append(mae_loss_node(predc, refc).item())
        hist_vals.append(histogram_loss_node(predc, refc, cfg).item())

    zero = ad.constant(np.zeros((1, n_points)))
    return {
        "shift_mm": np.array(shifts),
        "shift_samples": np.arange(0, max_shift + 1),
        "emd_symmetric": np.array(emd_vals),
        "mae": np.array(mae_vals),
        "histogram": np.array(hist_vals),
        "emd_no_drop": emd_symmetric_node(zero, refc).item(),
        "mae_no_drop": mae_loss_node(zero, refc).item(),
        "drop": drop,
        "n_points": n_points,
    }


def run_landscape_suite() -> tuple[bool, list[str], dict]:
    land = loss_landscape()
    n = land["n_points"]
    d = land["drop"]
    lines, ok = [], True

    def check(cond, msg):
        nonlocal ok
        ok &= bool(cond)
        lines.append(f"{'PASS' if cond else 'FAIL'} {msg}")

    emd = land["emd_symmetric"]
    ks = land["shift_samples"]
    check(np.all(np.diff(emd) > 0), "EMD strictly increasing with displacement")
    expect = 2 * d * ks
    check(np.max(np.abs(emd - expect)) < 1e-12, "EMD equals 2*d*k for displaced drop")
    no_drop = d * (n + 1)
    check(abs(land["emd_no_drop"] - no_drop) < 1e-12, "EMD no-drop cost equals d*(l+2)")
    below = ks[1:] < (n + 1) / 2
    check(np.all((emd[1:] < land["emd_no_drop"]) == below), "EMD prefers displaced drop iff k < (l+2)/2")
    mae = land["mae"]
    check(np.all(np.abs(mae[1:] - 2 * d / n) < 1e-15), "MAE flat for disjoint displaced drops")
    check(np.all(mae[1:] > land["mae_no_drop"]), "MAE of displaced drop exceeds no-drop cost")
    check(np.max(np.abs(land["histogram"])) < 1e-12, "histogram loss flat in shift")

    focal = ad.constant(np.concatenate([[0.3], np.zeros(9)])[None, :])
    diffuse = ad.constant(np.full((1, 10), 0.03))
    hist_fd = histogram_loss_node(focal, diffuse, HistogramConfig()).item()
    check(hist_fd > 0, "histogram loss separates focal from diffuse shapes")
    return ok, lines, land
