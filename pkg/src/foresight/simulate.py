"""Synthetic L-band scene generator.

Stands in for real imagery and LiDAR: builds a correlated random height
field with hard-edged clearings, derives backscatter through a water
cloud model with gamma-distributed speckle, maps height to temporal
decay parameters, samples per-pair coherence magnitudes with the
look-count estimation bias of the real estimator, and adds geometry
layers (smooth DEM, slope-coupled incidence angle) plus an invalid mask
of random blobs standing in for layover/shadow.

Every stochastic layer draws from its own counter-based substream keyed
on (seed, layer, indices), so output is reproducible bit-for-bit and
independent of evaluation order. Vertical-wavenumber effects are
negligible at the simulated geometry (kz stays ~0.02 rad/m) and are
deliberately not modeled; kz_max is recorded in the manifest only.
"""

import json
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter
from scipy.optimize import brentq

from .coherence import decay_model
from .errors import ConfigurationError, DataError, UsageError
from .raster import Raster, write_raster

POLS = ("hh", "hv")

# coherence estimation looks for the products this pixel spacing mimics
LOOKS_BY_SPACING = {20.0: 21, 40.0: 60, 60.0: 119}

MANIFEST_NAME = "manifest.json"

# substream layer ids
_L_HEIGHT = 0
_L_CLEARINGS = 1
_L_DEM = 2
_L_MASK = 3
_L_SPECKLE = 4
_L_COHERENCE = 5
_L_TEXTURE = 6


def _rng(seed, *key):
    seq = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(seq))


@dataclass
class WcmParams:
    """Water-cloud-model constants for one polarization (linear power)."""

    sigma_ground: float
    sigma_veg: float
    beta: float

    def __post_init__(self):
        if self.sigma_ground <= 0 or self.sigma_veg <= 0:
            raise ConfigurationError("WCM powers must be positive")
        if self.beta <= 0:
            raise ConfigurationError("WCM attenuation beta must be positive")


@dataclass
class DecayMapping:
    """Height-to-decay-parameter map: both parameters fall with height."""

    tau_max: float = 45.0
    tau_min: float = 2.0
    h_tau: float = 8.0
    rho_max: float = 0.7
    rho_min: float = 0.2
    h_rho: float = 8.0

    def __post_init__(self):
        if not self.tau_max > self.tau_min >= 0.5:
            raise ConfigurationError(
                f"need tau_max > tau_min >= 0.5, got {self.tau_max}, {self.tau_min}"
            )
        if not 0.0 <= self.rho_min < self.rho_max <= 1.0:
            raise ConfigurationError(
                f"need 0 <= rho_min < rho_max <= 1, got {self.rho_min}, {self.rho_max}"
            )
        if self.h_tau <= 0 or self.h_rho <= 0:
            raise ConfigurationError("e-folding heights must be positive")


def _default_wcm():
    return {
        "hh": WcmParams(sigma_ground=10 ** -1.4, sigma_veg=10 ** -0.5, beta=0.10),
        "hv": WcmParams(sigma_ground=10 ** -1.6, sigma_veg=10 ** -1.1, beta=0.12),
    }


@dataclass
class SceneConfig:
    """Everything the generator needs; serialized whole into the manifest."""

    size: int = 256
    spacing: float = 20.0
    seed: int = 0
    mean_height: float = 7.8
    max_height: float = 35.0
    corr_length_px: float = 12.0
    n_clearings: int = 12
    clearing_radius_px: tuple = (4.0, 16.0)
    canopy_texture_m: float = 0.0  # crown-scale detail only the reference sees
    acquisitions: int = 9
    revisit_days: float = 14.0
    looks: float = None  # None -> table by spacing; inf -> bias-free estimates
    enl: float = 10.0    # intensity speckle looks; inf -> noiseless intensity
    mask_fraction: float = 0.05
    dem_relief: float = 60.0
    dem_corr_px: float = 24.0
    incidence_deg: float = 28.0
    kz_max: float = 0.02
    wcm: dict = field(default_factory=_default_wcm)
    decay: DecayMapping = field(default_factory=DecayMapping)

    def __post_init__(self):
        if self.size < 8:
            raise ConfigurationError(f"scene size must be >= 8 px, got {self.size}")
        if self.spacing <= 0:
            raise ConfigurationError("pixel spacing must be positive")
        if not 0 < self.mean_height < self.max_height:
            raise ConfigurationError(
                f"need 0 < mean_height < max_height, got "
                f"{self.mean_height}, {self.max_height}"
            )
        if self.acquisitions < 2:
            raise ConfigurationError("need at least two acquisitions")
        if self.revisit_days <= 0:
            raise ConfigurationError("revisit interval must be positive")
        looks = self.resolve_looks()
        if not math.isinf(looks) and looks < 2:
            raise ConfigurationError(f"looks must be >= 2, got {looks}")
        if not math.isinf(self.enl) and self.enl < 1:
            raise ConfigurationError(f"speckle ENL must be >= 1, got {self.enl}")
        if not 0.0 <= self.mask_fraction <= 0.3:
            raise ConfigurationError(
                f"invalid-mask fraction must lie in [0, 0.3], got {self.mask_fraction}"
            )
        if self.canopy_texture_m < 0:
            raise ConfigurationError(
                f"canopy texture must be nonnegative, got {self.canopy_texture_m}"
            )
        if set(self.wcm) != set(POLS):
            raise ConfigurationError(f"wcm must define exactly {POLS}")

    def resolve_looks(self):
        if self.looks is not None:
            return self.looks
        if self.spacing in LOOKS_BY_SPACING:
            return LOOKS_BY_SPACING[self.spacing]
        raise ConfigurationError(
            f"no default look count for spacing {self.spacing}; set looks explicitly"
        )

    def pair_list(self):
        """All acquisition pairs (i, j, lag_days), i < j."""
        out = []
        for i in range(self.acquisitions):
            for j in range(i + 1, self.acquisitions):
                out.append((i, j, (j - i) * self.revisit_days))
        return out

    def lags(self):
        return sorted({lag for _, _, lag in self.pair_list()})


@dataclass
class SyntheticScene:
    """In-memory scene: arrays share one grid; mask is 1=valid, 0=invalid.

    height is the reference product the models are scored against; with
    canopy texture enabled it carries crown-scale detail the radar
    observables do not."""

    config: SceneConfig
    height: np.ndarray
    dem: np.ndarray
    incidence: np.ndarray
    mask: np.ndarray
    sigma: dict
    coherence_pairs: list  # (i, j, lag_days, pol, values)
    tau_true: np.ndarray
    rho_true: np.ndarray


def generate_height_field(config, rng=None):
    """Correlated random canopy-height field with hard-edged clearings.

    A smoothed Gaussian field is rescaled to [0, max_height] through a
    power law whose exponent is solved so the scene mean equals the
    configured target exactly (clearings included).
    """
    if rng is None:
        rng = _rng(config.seed, _L_HEIGHT)
    n = config.size
    u = gaussian_filter(rng.standard_normal((n, n)), config.corr_length_px,
                        mode="wrap")
    u = u - u.min()
    peak = u.max()
    if peak <= 0:
        raise DataError("degenerate height field (smoothing removed all variance)")
    u /= peak

    crng = _rng(config.seed, _L_CLEARINGS)
    lo, hi = config.clearing_radius_px
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(config.n_clearings):
        cy, cx = crng.uniform(0, n, size=2)
        r = crng.uniform(lo, hi)
        u[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0.0

    target = config.mean_height / config.max_height
    if u.mean() <= 0 or target >= 1.0:
        raise ConfigurationError("height target unreachable for this field")

    def gap(p):
        return float(np.mean(u ** p)) - target

    if gap(1e-3) < 0:
        raise ConfigurationError(
            "clearings remove too much area to reach the target mean height"
        )
    p = brentq(gap, 1e-3, 1e3, xtol=1e-13, rtol=1e-15)
    return config.max_height * u ** p


def wcm_backscatter(height, params):
    """Water cloud model: ground return attenuated by canopy, plus
    vegetation volume filling in as height grows. Linear power."""
    height = np.asarray(height, dtype=np.float64)
    if np.any(height < 0):
        raise DataError("heights must be nonnegative")
    att = np.exp(-params.beta * height)
    return params.sigma_ground * att + params.sigma_veg * (1.0 - att)


def height_to_decay(height, mapping):
    """Map canopy height to (tau, rho_inf): taller stands move more in
    wind, so both the decay time and the coherence floor drop with
    height. Strictly decreasing in h."""
    height = np.asarray(height, dtype=np.float64)
    if np.any(height < 0):
        raise DataError("heights must be nonnegative")
    tau = mapping.tau_min + (mapping.tau_max - mapping.tau_min) * np.exp(
        -height / mapping.h_tau)
    rho = mapping.rho_min + (mapping.rho_max - mapping.rho_min) * np.exp(
        -height / mapping.h_rho)
    return tau, rho


def sample_coherence(gamma_true, looks, rng):
    """Sample-coherence magnitude of `looks` correlated complex pairs.

    Reproduces the positive estimation bias of the real estimator at low
    coherence and low look counts. looks=inf returns the true coherence
    (bias-free switch). Pixels with gamma_true exactly 1 yield exactly 1:
    the two series are identical there, so the estimator is 1 by
    construction.
    """
    gamma = np.asarray(gamma_true, dtype=np.float64)
    if np.any(gamma < 0) or np.any(gamma > 1):
        raise DataError("true coherence must lie in [0, 1]")
    if math.isinf(looks):
        return gamma.copy()
    looks = int(looks)
    if looks < 2:
        raise UsageError(f"coherence estimation needs >= 2 looks, got {looks}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    shape = gamma.shape
    mix = np.sqrt(1.0 - gamma ** 2)
    s12 = np.zeros(shape, dtype=np.complex128)
    p1 = np.zeros(shape)
    p2 = np.zeros(shape)
    for _ in range(looks):
        d = rng.standard_normal((4,) + shape)
        z1 = (d[0] + 1j * d[1]) * np.sqrt(0.5)
        w = (d[2] + 1j * d[3]) * np.sqrt(0.5)
        z2 = gamma * z1 + mix * w
        s12 += z1 * np.conj(z2)
        p1 += np.abs(z1) ** 2
        p2 += np.abs(z2) ** 2
    est = np.abs(s12) / np.sqrt(p1 * p2)
    est = np.minimum(est, 1.0)
    return np.where(gamma == 1.0, 1.0, est)


def apply_speckle(intensity, enl, rng):
    """Multiplicative gamma speckle with unit mean; enl=inf is a no-op."""
    intensity = np.asarray(intensity, dtype=np.float64)
    if np.any(intensity <= 0):
        raise DataError("intensity must be positive")
    if math.isinf(enl):
        return intensity.copy()
    if enl < 1:
        raise UsageError(f"speckle ENL must be >= 1, got {enl}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    return intensity * rng.gamma(shape=enl, scale=1.0 / enl,
                                 size=intensity.shape)


def _make_dem(config):
    rng = _rng(config.seed, _L_DEM)
    n = config.size
    dem = gaussian_filter(rng.standard_normal((n, n)), config.dem_corr_px,
                          mode="wrap")
    dem = dem - dem.min()
    peak = dem.max()
    if peak > 0:
        dem = dem / peak * config.dem_relief
    return dem


def _make_incidence(config, dem):
    # east-west terrain slope steers the local look angle around the
    # nominal off-nadir value
    slope = np.gradient(dem, config.spacing, axis=1)
    inc = config.incidence_deg + np.degrees(np.arctan(slope))
    return np.clip(inc, 10.0, 60.0)


def _make_mask(config):
    n = config.size
    mask = np.ones((n, n), dtype=np.float64)
    if config.mask_fraction <= 0:
        return mask
    rng = _rng(config.seed, _L_MASK)
    yy, xx = np.mgrid[0:n, 0:n]
    target_invalid = config.mask_fraction * n * n
    # cap guards against pathological radii never reaching the target
    for _ in range(1000):
        if (mask == 0).sum() >= target_invalid:
            break
        cy, cx = rng.uniform(0, n, size=2)
        r = rng.uniform(0.02 * n, 0.08 * n)
        mask[(yy - cy) ** 2 + (xx - cx) ** 2 <= r * r] = 0.0
    return mask


def simulate_stack(config, out_dir=None):
    """Generate a full synthetic scene; optionally serialize it.

    Returns the in-memory SyntheticScene. With out_dir set, also writes
    one raster file per band plus a manifest; a fixed config yields a
    byte-identical directory.
    """
    stand = generate_height_field(config)
    dem = _make_dem(config)
    incidence = _make_incidence(config, dem)
    mask = _make_mask(config)
    tau_true, rho_true = height_to_decay(stand, config.decay)

    # The radar responds to stand-scale structure; the reference raster
    # additionally carries crown-scale detail below the resolution cell,
    # like LiDAR heights block-averaged onto the SAR grid.
    height = stand
    if config.canopy_texture_m > 0:
        detail = _rng(config.seed, _L_TEXTURE).standard_normal(stand.shape)
        height = np.clip(stand + config.canopy_texture_m * detail,
                         0.0, config.max_height)

    sigma = {}
    for pi, pol in enumerate(POLS):
        clean = wcm_backscatter(stand, config.wcm[pol])
        acqs = [
            apply_speckle(clean, config.enl, _rng(config.seed, _L_SPECKLE, pi, a))
            for a in range(config.acquisitions)
        ]
        sigma[pol] = np.median(np.stack(acqs), axis=0)

    looks = config.resolve_looks()
    pairs = []
    for pi, pol in enumerate(POLS):
        for i, j, lag in config.pair_list():
            gamma = decay_model(lag, tau_true, rho_true)
            est = sample_coherence(gamma, looks,
                                   _rng(config.seed, _L_COHERENCE, pi, i, j))
            pairs.append((i, j, lag, pol, est))

    scene = SyntheticScene(
        config=config, height=height, dem=dem, incidence=incidence,
        mask=mask, sigma=sigma, coherence_pairs=pairs,
        tau_true=tau_true, rho_true=rho_true,
    )
    if out_dir is not None:
        write_scene(scene, out_dir)
    return scene


def _pair_file(i, j, lag, pol):
    return f"coh_{int(round(lag)):03d}_p{i:02d}{j:02d}_{pol}.r32"


def write_scene(scene, out_dir):
    """Serialize the scene as rasters plus manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    cfg = scene.config
    sp = cfg.spacing

    def put(name, values, role, units):
        write_raster(os.path.join(out_dir, name),
                     Raster(values=values, spacing=sp, role=role, units=units))

    bands = {}
    put("height.r32", scene.height, "height", "m")
    bands["height"] = "height.r32"
    put("dem.r32", scene.dem, "dem", "m")
    bands["dem"] = "dem.r32"
    put("incidence.r32", scene.incidence, "inc_angle", "deg")
    bands["inc_angle"] = "incidence.r32"
    put("mask.r32", scene.mask, "mask", "")
    bands["mask"] = "mask.r32"
    put("tau_true.r32", scene.tau_true, "tau_true", "days")
    bands["tau_true"] = "tau_true.r32"
    put("rho_inf_true.r32", scene.rho_true, "rho_inf_true", "")
    bands["rho_inf_true"] = "rho_inf_true.r32"
    for pol in POLS:
        name = f"sigma_{pol}.r32"
        put(name, scene.sigma[pol], f"sigma_{pol}", "linear")
        bands[f"sigma_{pol}"] = name

    pair_entries = []
    for i, j, lag, pol, values in scene.coherence_pairs:
        name = _pair_file(i, j, lag, pol)
        put(name, values, f"coh_{int(round(lag)):03d}_{pol}", "")
        pair_entries.append({
            "file": name, "i": i, "j": j, "lag": lag, "pol": pol,
        })

    manifest = {
        "kind": "scene",
        "version": 1,
        "config": asdict(cfg),
        "looks": scene.config.resolve_looks(),
        "lags": cfg.lags(),
        "pols": list(POLS),
        "bands": bands,
        "coherence_pairs": pair_entries,
    }
    with open(os.path.join(out_dir, MANIFEST_NAME), "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return manifest


def read_manifest(scene_dir):
    path = os.path.join(scene_dir, MANIFEST_NAME)
    if not os.path.exists(path):
        raise DataError(f"no scene manifest at {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)
