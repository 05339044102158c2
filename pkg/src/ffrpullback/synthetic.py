"""Synthetic artery generator with a deterministic hemodynamic oracle.

Ground truth comes from a two-term drop model on the true lumen area: a
viscous 1/A^2 term that produces gradual decline, and a stenosis term that
switches on sharply where the area falls below a fixed reference caliber and
produces the steep concentrated drops of focal disease.  The viscous
coefficient is calibrated once per dataset so that a lesion-free vessel of
median geometry ends at the configured healthy distal FFR.

What the model sees is intentionally imperfect: the recorded lumen area is
the true area corrupted by bifurcation widening, side-branch step-downs and
multiplicative noise, while the latent channels are noisy mixtures of local
geometry and a plaque-burden signal, mirroring an upstream characterization
network.  Reference pullbacks can additionally be translated by a controlled
misregistration shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .curves import ArteryRecord, CharacteristicSet, DropProfile, Grid, N_LATENT

N_SIGNALS = 5


@dataclass(frozen=True)
class LesionSpec:
    kind: str           # focal | diffuse
    center_mm: float
    extent_mm: float
    severity: float     # fractional area reduction at the lesion peak

    def __post_init__(self):
        if self.kind not in ("focal", "diffuse"):
            raise ValueError(f"lesion kind must be focal/diffuse, got {self.kind!r}")
        if not (0.0 <= self.severity < 1.0):
            raise ValueError(f"severity must lie in [0, 1), got {self.severity}")


@dataclass(frozen=True)
class OracleConfig:
    alpha: float | None = None          # viscous coefficient; calibrated when None
    beta: float = 6e-3                   # stenosis-term coefficient
    ref_area_mm2: float = 6.5            # caliber below which the stenosis term fires
    stenosis_power: float = 3.0
    healthy_distal_ffr: float = 0.97

    def __post_init__(self):
        if self.beta <= 0 or self.ref_area_mm2 <= 0:
            raise ValueError("beta and ref_area_mm2 must be positive")
        if self.alpha is not None and self.alpha <= 0:
            raise ValueError("alpha must be positive when given")


@dataclass(frozen=True)
class SyntheticConfig:
    n_arteries: int = 200
    length_range_mm: tuple = (60.0, 140.0)
    proximal_area_range_mm2: tuple = (9.0, 14.0)
    taper_fraction_range: tuple = (0.45, 0.6)
    wiggle: float = 0.02
    focal_fraction: float = 0.5
    lesion_count_weights: tuple = (0.0, 0.85, 0.15)
    focal_extent_range_mm: tuple = (5.0, 15.0)
    diffuse_extent_range_mm: tuple = (40.0, 75.0)
    focal_severity_range: tuple = (0.72, 0.86)
    diffuse_severity_range: tuple = (0.58, 0.72)
    latent_noise: float = 0.35
    area_noise: float = 0.04
    confuser_count_max: int = 2
    confuser_depth_range: tuple = (0.4, 0.7)
    misregistration_range_mm: tuple = (3.5, 5.0)
    measured_fraction_range: tuple = (0.8, 0.95)
    spacing_mm: float = 0.5
    seed: int = 42
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def __post_init__(self):
        if self.n_arteries < 1:
            raise ValueError("n_arteries must be >= 1")
        if not (0.0 <= self.focal_fraction <= 1.0):
            raise ValueError(f"focal_fraction must lie in [0, 1], got {self.focal_fraction}")
        for name in ("length_range_mm", "proximal_area_range_mm2", "taper_fraction_range",
                     "focal_extent_range_mm", "diffuse_extent_range_mm",
                     "focal_severity_range", "diffuse_severity_range",
                     "measured_fraction_range"):
            lo, hi = getattr(self, name)
            if not (lo <= hi):
                raise ValueError(f"{name} must be a nonempty range, got ({lo}, {hi})")
        if len(self.lesion_count_weights) != 3 or min(self.lesion_count_weights) < 0:
            raise ValueError("lesion_count_weights must be 3 nonnegative weights")
        lo, hi = self.misregistration_range_mm
        if not (0 <= lo <= hi <= 10.0):
            raise ValueError("misregistration_range_mm must satisfy 0 <= lo <= hi <= 10")


# ---------------------------------------------------------------------------
# lumen geometry
# ---------------------------------------------------------------------------

def _smoothstep(t: np.ndarray) -> np.ndarray:
    t = np.clip(t, 0.0, 1.0)
    return t * t * (3.0 - 2.0 * t)


def lesion_factor(
    positions_mm: np.ndarray, lesion: LesionSpec, baseline: np.ndarray | None = None
) -> np.ndarray:
    """Multiplicative area reduction of one lesion, in (0, 1].

    Focal lesions are Gaussian dips.  Diffuse lesions hold a roughly constant
    narrowed caliber over the core of their extent (the reduction factor
    leans against the baseline taper) and recover at the distal edge, so the
    drop rate stays elevated but even across the whole segment.
    """
    x = positions_mm
    if lesion.kind == "focal":
        sigma = lesion.extent_mm / 4.0
        bump = np.exp(-((x - lesion.center_mm) ** 2) / (2.0 * sigma * sigma))
        return 1.0 - lesion.severity * bump
    e, c, s = lesion.extent_mm, lesion.center_mm, lesion.severity
    w_in = _smoothstep((x - (c - 0.5 * e)) / (0.2 * e))
    w_out = 1.0 - _smoothstep((x - (c + 0.3 * e)) / (0.2 * e))
    w = w_in * w_out
    factor = 1.0 - s * w
    if baseline is not None and s > 0.0:
        base_c = float(np.interp(c, x, baseline))
        comp = (base_c / baseline) ** (0.7 * w * min(1.0, s / 0.2))
        factor = np.minimum(factor * comp, 1.0)
    return factor


def gen_lumen_profile(
    rng: np.random.Generator,
    length_mm: float,
    lesions: list[LesionSpec],
    spacing_mm: float = 0.5,
    proximal_area_mm2: float = 10.0,
    taper_fraction: float = 0.45,
    wiggle: float = 0.02,
) -> np.ndarray:
    """True lumen area: smooth exponential taper times lesion reductions."""
    n = int(round(length_mm / spacing_mm)) + 1
    x = np.arange(n) * spacing_mm
    lam = -np.log(taper_fraction) / length_mm
    baseline = proximal_area_mm2 * np.exp(-lam * x)
    if wiggle > 0:
        phase = rng.uniform(0, 2 * np.pi)
        period = rng.uniform(25.0, 45.0)
        baseline = baseline * (1.0 + wiggle * np.sin(2 * np.pi * x / period + phase))
    combined = np.ones(n)
    for lesion in lesions:
        if not (0.0 <= lesion.center_mm <= length_mm):
            raise ValueError(f"lesion at {lesion.center_mm} mm outside vessel of {length_mm} mm")
        combined = combined * lesion_factor(x, lesion, baseline)
    if np.any(combined <= 0.05):
        raise ValueError("combined lesion severity occludes the vessel")
    area = baseline * combined
    if np.any(area <= 0.0):
        raise ValueError("lumen area collapsed to zero")
    return area


# ---------------------------------------------------------------------------
# hemodynamic oracle
# ---------------------------------------------------------------------------

def drop_rates_per_mm(lumen_area: np.ndarray, cfg: OracleConfig) -> np.ndarray:
    """FFR drop per mm at each point; both terms are nonnegative and
    monotone in 1/area, so a pointwise-smaller lumen never drops less."""
    if cfg.alpha is None:
        raise ValueError("OracleConfig.alpha not calibrated; call calibrate_alpha first")
    a = np.asarray(lumen_area, dtype=np.float64)
    if np.any(a <= 0):
        raise ValueError("lumen area must be strictly positive")
    viscous = cfg.alpha / (a * a)
    narrowing = np.maximum(cfg.ref_area_mm2 / a - 1.0, 0.0) ** cfg.stenosis_power
    return viscous + cfg.beta * narrowing


def oracle_ffr(lumen_area: np.ndarray, grid: Grid, cfg: OracleConfig) -> DropProfile:
    """Reference drop profile: zero at the ostium, rate * spacing elsewhere."""
    rates = drop_rates_per_mm(lumen_area, cfg)
    drops = rates * grid.spacing_mm
    drops[0] = 0.0
    return DropProfile(grid, drops)


def _median_geometry_area(cfg: SyntheticConfig) -> tuple[np.ndarray, Grid]:
    length = float(np.mean(cfg.length_range_mm))
    area = gen_lumen_profile(
        np.random.default_rng(0),
        length,
        [],
        spacing_mm=cfg.spacing_mm,
        proximal_area_mm2=float(np.mean(cfg.proximal_area_range_mm2)),
        taper_fraction=float(np.mean(cfg.taper_fraction_range)),
        wiggle=0.0,
    )
    return area, Grid(cfg.spacing_mm, area.shape[0])


def calibrate_alpha(cfg: SyntheticConfig) -> float:
    """Solve for the viscous coefficient so the lesion-free median vessel
    ends exactly at the configured healthy distal FFR."""
    oc = cfg.oracle
    area, grid = _median_geometry_area(cfg)
    dx = grid.spacing_mm
    visc_unit = dx / (area * area)
    visc_unit[0] = 0.0
    sten = dx * oc.beta * np.maximum(oc.ref_area_mm2 / area - 1.0, 0.0) ** oc.stenosis_power
    sten[0] = 0.0
    target_drop = 1.0 - oc.healthy_distal_ffr
    alpha = (target_drop - sten.sum()) / visc_unit.sum()
    if alpha <= 0:
        raise ValueError(
            "stenosis term alone exceeds the healthy drop budget; reduce beta"
        )
    return float(alpha)


# ---------------------------------------------------------------------------
# misregistration
# ---------------------------------------------------------------------------

def inject_misregistration(rec: ArteryRecord, shift_mm: float) -> ArteryRecord:
    """Translate the reference drop profile by a whole number of grid steps
    (zero fill), simulating pullback-to-image registration error."""
    if rec.ref_drops is None:
        raise ValueError("record has no reference pullback")
    grid = rec.ref_drops.grid
    k = int(round(shift_mm / grid.spacing_mm))
    n = grid.n_points
    if abs(k) >= n:
        raise ValueError(f"shift of {shift_mm} mm exceeds vessel length")
    drops = rec.ref_drops.drops
    shifted = np.zeros_like(drops)
    if k >= 0:
        shifted[k:] = drops[: n - k]
    else:
        shifted[:k] = drops[-k:]
    meta = dict(rec.meta)
    meta["misregistration_mm"] = k * grid.spacing_mm
    return replace(rec, ref_drops=DropProfile(grid, shifted), meta=meta)


# ---------------------------------------------------------------------------
# latent channel synthesis
# ---------------------------------------------------------------------------

def build_latent_mixer(rng: np.random.Generator) -> dict:
    """Dataset-level mixing of geometry signals into latent channels; fixed
    per dataset so every artery is encoded by the same 'network'."""
    weights = rng.normal(0.0, 1.0, (N_LATENT, N_SIGNALS))
    keep = np.zeros((N_LATENT, N_SIGNALS))
    for k in range(N_LATENT):
        idx = rng.choice(N_SIGNALS, size=rng.integers(2, 4), replace=False)
        keep[k, idx] = 1.0
    use_tanh = rng.random(N_LATENT) < 0.5
    return {"weights": weights * keep, "use_tanh": use_tanh}


def _smooth(values: np.ndarray, width: int = 5) -> np.ndarray:
    kernel = np.ones(width) / width
    if values.ndim == 1:
        return np.convolve(np.pad(values, width // 2, mode="edge"), kernel, mode="valid")
    return np.stack(
        [np.convolve(np.pad(v, width // 2, mode="edge"), kernel, mode="valid") for v in values]
    )


def _shift_edge_fill(values: np.ndarray, k: int) -> np.ndarray:
    if k == 0:
        return values
    out = np.empty_like(values)
    if k > 0:
        out[k:] = values[:-k]
        out[:k] = values[0]
    else:
        out[:k] = values[-k:]
        out[k:] = values[-1]
    return out


def _geometry_signals(
    observed: np.ndarray,
    plaque: np.ndarray,
    bif: np.ndarray,
    spacing: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-point signals feeding the latent mixer.

    The plaque-burden signal is deliberately blurred and shifted by a couple
    of millimeters per artery: wall changes are visible to an imaging network
    but their boundaries are not sharp, so lesion evidence localizes only
    approximately.
    """
    grad = np.gradient(observed, spacing)
    jitter = int(rng.integers(-4, 5))
    fuzzy_plaque = _smooth(_shift_edge_fill(plaque, jitter), 9)
    return np.stack([
        observed / 10.0,
        np.log(observed / 10.0),
        2.0 * fuzzy_plaque,
        grad / 2.0,
        _smooth(bif, 7),
    ])


def synthesize_latents(
    mixer: dict, signals: np.ndarray, rng: np.random.Generator, noise: float
) -> np.ndarray:
    mixed = mixer["weights"] @ signals
    mixed = np.where(mixer["use_tanh"][:, None], np.tanh(mixed), mixed)
    return mixed + noise * _smooth(rng.normal(0.0, 1.0, mixed.shape), 5)


# ---------------------------------------------------------------------------
# dataset generation
# ---------------------------------------------------------------------------

def _draw_lesions(rng: np.random.Generator, cfg: SyntheticConfig, measured_end_mm: float) -> list[LesionSpec]:
    """One disease pattern per artery: 1-2 lesions of a single kind, placed
    inside the measured extent so the reference pullback sees them."""
    weights = np.asarray(cfg.lesion_count_weights, dtype=float)
    count = int(rng.choice(3, p=weights / weights.sum()))
    focal = rng.random() < cfg.focal_fraction
    lesions = []
    for _ in range(count):
        if focal:
            extent = rng.uniform(*cfg.focal_extent_range_mm)
            severity = rng.uniform(*cfg.focal_severity_range)
            kind = "focal"
        else:
            extent = rng.uniform(*cfg.diffuse_extent_range_mm)
            severity = rng.uniform(*cfg.diffuse_severity_range)
            kind = "diffuse"
        lo = 10.0
        hi = max(measured_end_mm - 8.0, lo + 1.0)
        lesions.append(LesionSpec(kind, float(rng.uniform(lo, hi)), float(extent), float(severity)))
    return lesions


def _soften(lesions: list[LesionSpec]) -> list[LesionSpec]:
    return [replace(les, severity=les.severity * 0.85) for les in lesions]


def _label_from_lesions(
    lesions: list[LesionSpec],
    rng_geom: tuple,
    oracle: OracleConfig,
) -> str | None:
    """Dominant-lesion label: the kind contributing the larger total drop."""
    if not lesions:
        return None
    if len(lesions) == 1 or len({les.kind for les in lesions}) == 1:
        return lesions[0].kind
    length, spacing, proximal, taper, wiggle_seed = rng_geom
    contributions = []
    for les in lesions:
        only = gen_lumen_profile(
            np.random.default_rng(wiggle_seed), length, [les],
            spacing_mm=spacing, proximal_area_mm2=proximal, taper_fraction=taper, wiggle=0.0,
        )
        grid = Grid(spacing, only.shape[0])
        contributions.append(oracle_ffr(only, grid, oracle).total())
    return lesions[int(np.argmax(contributions))].kind


def gen_dataset(cfg: SyntheticConfig) -> tuple[list[ArteryRecord], dict]:
    """Fully deterministic dataset: per-artery RNG streams derived from the
    config seed, oracle calibrated once, labels from the dominant lesion."""
    oracle = cfg.oracle
    if oracle.alpha is None:
        oracle = replace(oracle, alpha=calibrate_alpha(cfg))
    mixer = build_latent_mixer(np.random.default_rng(np.random.SeedSequence(cfg.seed)))

    records = []
    for i in range(cfg.n_arteries):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(i,)))
        length = float(rng.uniform(*cfg.length_range_mm))
        proximal = float(rng.uniform(*cfg.proximal_area_range_mm2))
        taper = float(rng.uniform(*cfg.taper_fraction_range))
        n = int(round(length / cfg.spacing_mm)) + 1
        grid = Grid(cfg.spacing_mm, n)
        measured_frac = float(rng.uniform(*cfg.measured_fraction_range))
        end_index = max(1, min(n - 2, int(round(measured_frac * (n - 1)))))
        lesions = _draw_lesions(rng, cfg, end_index * cfg.spacing_mm)

        wiggle_seed = int(rng.integers(0, 2**31))
        true_area = None
        for _ in range(20):
            try:
                true_area = gen_lumen_profile(
                    np.random.default_rng(wiggle_seed), length, lesions,
                    spacing_mm=cfg.spacing_mm, proximal_area_mm2=proximal,
                    taper_fraction=taper, wiggle=cfg.wiggle,
                )
                ref = oracle_ffr(true_area, grid, oracle)
                if 1.0 - ref.total() >= 0.12:
                    break
            except ValueError:
                pass
            lesions = _soften(lesions)
            true_area = None
        if true_area is None:
            raise RuntimeError(f"artery {i}: could not generate a viable lumen profile")
        ref = oracle_ffr(true_area, grid, oracle)

        # observed lumen: true area plus imaging artifacts
        x = grid.positions_mm()
        observed = true_area.copy()
        n_bif = int(rng.integers(2, 6))
        bif = np.zeros(n)
        for _ in range(n_bif):
            pos = float(rng.uniform(5.0, length - 5.0))
            idx = int(round(pos / cfg.spacing_mm))
            bif[idx] = 1.0
            amp = rng.uniform(0.15, 0.45)
            observed = observed * (1.0 + amp * np.exp(-((x - pos) ** 2) / (2.0 * 1.0**2)))
        side = np.zeros(n)
        if rng.random() < 0.3:
            trans_mm = float(rng.uniform(0.55 * length, 0.85 * length))
            side[x >= trans_mm] = 1.0
            step = rng.uniform(0.65, 0.85)
            observed = observed * (1.0 - (1.0 - step) * _smoothstep((x - trans_mm) / 2.0))
        # stenosis-like imaging artifacts: apparent narrowings with no
        # hemodynamic counterpart (blooming, motion, plaque confusion)
        n_confusers = int(rng.integers(0, cfg.confuser_count_max + 1))
        for _ in range(n_confusers):
            pos = float(rng.uniform(10.0, max(end_index * cfg.spacing_mm - 8.0, 11.0)))
            depth = float(rng.uniform(*cfg.confuser_depth_range))
            width = float(rng.uniform(1.0, 2.5))
            observed = observed * (1.0 - depth * np.exp(-((x - pos) ** 2) / (2.0 * width * width)))
        observed = observed * (1.0 + cfg.area_noise * _smooth(rng.normal(0.0, 1.0, n), 5))
        observed = np.maximum(observed, 0.2)

        # plaque burden: lesion-induced narrowing relative to the lesion-free
        # baseline, the signal an imaging network extracts from the wall
        baseline_only = gen_lumen_profile(
            np.random.default_rng(wiggle_seed), length, [],
            spacing_mm=cfg.spacing_mm, proximal_area_mm2=proximal,
            taper_fraction=taper, wiggle=cfg.wiggle,
        )
        plaque = 1.0 - true_area / baseline_only
        latents = synthesize_latents(
            mixer,
            _geometry_signals(observed, plaque, bif, cfg.spacing_mm, rng),
            rng,
            cfg.latent_noise,
        )

        label = _label_from_lesions(
            lesions, (length, cfg.spacing_mm, proximal, taper, wiggle_seed), oracle
        )
        rec = ArteryRecord(
            id=f"a{i:04d}",
            characteristics=CharacteristicSet(
                grid=grid, lumen_area=observed, bifurcation=bif, side_branch=side, latent=latents
            ),
            ref_drops=ref,
            measurement_end_index=end_index,
            label=label,
            meta={},
        )
        if cfg.misregistration_range_mm[1] > 0:
            magnitude = float(rng.uniform(*cfg.misregistration_range_mm))
            sign = 1.0 if rng.random() < 0.5 else -1.0
            rec = inject_misregistration(rec, sign * magnitude)
        records.append(rec)

    header = {
        "seed": cfg.seed,
        "n_arteries": cfg.n_arteries,
        "oracle_alpha": oracle.alpha,
        "oracle_beta": oracle.beta,
        "oracle_ref_area_mm2": oracle.ref_area_mm2,
        "oracle_stenosis_power": oracle.stenosis_power,
        "healthy_distal_ffr": oracle.healthy_distal_ffr,
    }
    return records, header
