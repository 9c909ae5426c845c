"""Feature-stack assembly, normalization, tiling, and dataset splits.

The stack builder reads a scene directory, applies the scene validity
mask, optionally block-aggregates to a coarser mapping unit, and orders
bands canonically so a combo string always yields the same sequence.
Normalization statistics come from training pixels only; patches keep
NaN at invalid pixels until statistics are applied, at which point the
holes are filled with the post-normalization neutral value 0.
"""

import dataclasses
import hashlib
import json
import logging
import os

import numpy as np

from .coherence import median_aggregate
from .errors import ConfigurationError, DataError, DimensionError, UsageError
from .raster import Raster, block_aggregate, read_raster
from .simulate import POLS, read_manifest

log = logging.getLogger(__name__)

CONSTANT_STD = 1e-12
MIN_VALID_FRACTION = 0.05
RESOLUTIONS = (20, 40, 60)

_GROUP_ORDER = {"sigma": 0, "coh": 1, "tau": 2, "rho_inf": 3, "inc": 4,
                "dem": 5}


@dataclasses.dataclass
class BandStats:
    """Per-band z-score statistics, index-aligned with stack roles."""

    means: np.ndarray
    stds: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        self.stds = np.asarray(self.stds, dtype=np.float64)
        if self.means.shape != self.stds.shape or self.means.ndim != 1:
            raise DimensionError("band statistics must be matching 1-D arrays")

    def __len__(self):
        return self.means.size


@dataclasses.dataclass
class FeatureStack:
    """Co-registered feature bands with canonical ordering.

    bands is (C, H, W) float64 with NaN at invalid pixels; stats is set
    exactly when the stack is normalized.
    """

    bands: np.ndarray
    roles: tuple
    spacing: float
    resolution: int
    combo: str
    stats: BandStats = None

    def __post_init__(self):
        self.bands = np.asarray(self.bands, dtype=np.float64)
        if self.bands.ndim != 3:
            raise DimensionError(
                f"stack bands must be (C, H, W), got {self.bands.shape}"
            )
        self.roles = tuple(self.roles)
        if len(self.roles) != self.bands.shape[0]:
            raise DimensionError("one role tag per band required")
        if len(set(self.roles)) != len(self.roles):
            raise ConfigurationError(f"duplicate role tags: {self.roles}")

    @property
    def shape(self):
        return self.bands.shape[1:]

    def valid_mask(self):
        return np.isfinite(self.bands).all(axis=0)


@dataclasses.dataclass
class Patch:
    """One training tile: features (C, s, s), reference and mask (s, s)."""

    features: np.ndarray
    reference: np.ndarray
    mask: np.ndarray
    row: int
    col: int

    @property
    def size(self):
        return self.features.shape[-1]


@dataclasses.dataclass
class DatasetSplit:
    """Disjoint patch-index lists plus the parameters that made them."""

    train: tuple
    val: tuple
    test: tuple
    seed: int
    size: int
    stride: int


# -- combo grammar ----------------------------------------------------------


def parse_combo(combo):
    """Split "<group[+group...]>,<pol>[,<pol>]" into parts.

    Returns (groups, pols) with polarizations in canonical hh-before-hv
    order regardless of how they were written.
    """
    parts = [p.strip().lower() for p in str(combo).split(",")]
    if len(parts) < 2:
        raise UsageError(
            f"combo {combo!r} needs a group spec and at least one polarization"
        )
    groups = tuple(g for g in parts[0].split("+") if g)
    if not groups:
        raise UsageError(f"combo {combo!r} has an empty group spec")
    known = {"sigma", "coh_all", "tau", "rho_inf", "decay", "inc", "dem",
             "all"}
    for g in groups:
        if g in known:
            continue
        if g.startswith("coh_"):
            try:
                float(g[4:])
                continue
            except ValueError:
                pass
        raise UsageError(f"unknown feature group {g!r} in combo {combo!r}")
    pols = parts[1:]
    for pol in pols:
        if pol not in POLS:
            raise UsageError(f"unknown polarization {pol!r} in combo {combo!r}")
    if len(set(pols)) != len(pols):
        raise UsageError(f"repeated polarization in combo {combo!r}")
    pols = tuple(p for p in POLS if p in pols)
    return groups, pols


def _expand_combo(groups, pols, lags):
    """Expand group tokens into (group, lag, pol) band keys, canonically
    ordered: sigma, coherence ascending lag, tau, rho_inf, inc, dem, with
    hh before hv inside each group."""
    lags = sorted(float(l) for l in lags)
    want = set()

    def add(group, lag=None, per_pol=True):
        if per_pol:
            for pol in pols:
                want.add((group, lag, pol))
        else:
            want.add((group, lag, None))

    for g in groups:
        if g == "sigma":
            add("sigma")
        elif g == "coh_all":
            for lag in lags:
                add("coh", lag)
        elif g.startswith("coh_"):
            try:
                lag = float(g[4:])
            except ValueError:
                raise UsageError(f"bad coherence token {g!r}") from None
            if lag not in lags:
                raise DataError(
                    f"lag {g[4:]} not offered by this scene (has {lags})"
                )
            add("coh", lag)
        elif g == "tau":
            add("tau")
        elif g == "rho_inf":
            add("rho_inf")
        elif g == "decay":
            add("tau")
            add("rho_inf")
        elif g == "inc":
            add("inc", per_pol=False)
        elif g == "dem":
            add("dem", per_pol=False)
        elif g == "all":
            add("sigma")
            add("coh", lags[0])
            add("tau")
            add("rho_inf")
            add("inc", per_pol=False)
            add("dem", per_pol=False)
        else:
            raise UsageError(f"unknown feature group {g!r}")

    def key(band):
        group, lag, pol = band
        return (_GROUP_ORDER[group], -1.0 if lag is None else lag,
                -1 if pol is None else POLS.index(pol))

    return sorted(want, key=key)


def _role_tag(band):
    group, lag, pol = band
    if group == "sigma":
        return f"sigma_{pol}"
    if group == "coh":
        return f"coh_{int(round(lag))}_{pol}"
    if group == "tau":
        return f"tau_{pol}"
    if group == "rho_inf":
        return f"rho_inf_{pol}"
    if group == "inc":
        return "inc_angle"
    return "dem"


# -- stack construction -----------------------------------------------------


def _resolve_factor(resolution, native_spacing):
    if resolution not in RESOLUTIONS:
        raise ConfigurationError(
            f"resolution must be one of {RESOLUTIONS}, got {resolution}"
        )
    factor = resolution / native_spacing
    if factor not in (1.0, 2.0, 3.0):
        raise ConfigurationError(
            f"resolution {resolution} is not a 1-3x multiple of the"
            f" native {native_spacing} m grid"
        )
    return int(factor)


def _read_band(scene_dir, filename, spacing):
    r = read_raster(os.path.join(scene_dir, filename))
    if r.spacing != spacing:
        raise DataError(
            f"{filename} spacing {r.spacing} differs from scene {spacing}"
        )
    return r.values.astype(np.float64)


def _median_coherence(scene_dir, manifest, pol, spacing):
    pairs = [
        (float(e["lag"]), _read_band(scene_dir, e["file"], spacing))
        for e in manifest["coherence_pairs"] if e["pol"] == pol
    ]
    if not pairs:
        raise DataError(f"scene has no {pol} coherence pairs")
    return median_aggregate(pairs)


def build_feature_stack(scene_dir, combo, resolution=20):
    """Assemble the requested bands from a scene directory.

    Decay-model bands (tau, rho_inf) come from fit products written next
    to the scene; coherence bands are per-lag medians over all pairs that
    share the lag. The scene validity mask becomes NaN in every band, and
    coarser resolutions are nodata-aware block means of the masked bands.
    """
    manifest = read_manifest(scene_dir)
    spacing = float(manifest["config"]["spacing"])
    factor = _resolve_factor(int(resolution), spacing)
    groups, pols = parse_combo(combo)
    bands_wanted = _expand_combo(groups, pols, manifest["lags"])

    named = manifest["bands"]
    valid = _read_band(scene_dir, named["mask"], spacing) > 0.5

    coh_cache = {}
    planes = []
    for band in bands_wanted:
        group, lag, pol = band
        if group == "sigma":
            values = _read_band(scene_dir, named[f"sigma_{pol}"], spacing)
        elif group == "coh":
            if pol not in coh_cache:
                coh_cache[pol] = _median_coherence(
                    scene_dir, manifest, pol, spacing)
            lag_axis, stack = coh_cache[pol]
            values = stack[int(np.nonzero(lag_axis == lag)[0][0])]
        elif group in ("tau", "rho_inf"):
            filename = f"{group}_{pol}.r32"
            if not os.path.exists(os.path.join(scene_dir, filename)):
                raise DataError(
                    f"band {_role_tag(band)} needs {filename}, which is not"
                    f" in {scene_dir}; run fit-coherence on the scene first"
                )
            values = _read_band(scene_dir, filename, spacing)
        elif group == "inc":
            values = _read_band(scene_dir, named["inc_angle"], spacing)
        else:
            values = _read_band(scene_dir, named["dem"], spacing)
        planes.append(np.where(valid, values, np.nan))

    if factor > 1:
        planes = [
            block_aggregate(Raster(p, spacing, _role_tag(b)), factor).values
            for p, b in zip(planes, bands_wanted)
        ]

    combo_id = ",".join(["+".join(groups), *pols])
    return FeatureStack(
        bands=np.stack(planes),
        roles=tuple(_role_tag(b) for b in bands_wanted),
        spacing=spacing * factor,
        resolution=int(resolution),
        combo=combo_id,
    )


def load_reference(scene_dir, resolution=20):
    """Reference heights on the stack grid, NaN where the scene mask is
    invalid, aggregated with the same nodata-aware block means."""
    manifest = read_manifest(scene_dir)
    spacing = float(manifest["config"]["spacing"])
    factor = _resolve_factor(int(resolution), spacing)
    heights = _read_band(scene_dir, manifest["bands"]["height"], spacing)
    valid = _read_band(scene_dir, manifest["bands"]["mask"], spacing) > 0.5
    heights = np.where(valid, heights, np.nan)
    if factor > 1:
        heights = block_aggregate(
            Raster(heights, spacing, "height", "m"), factor).values
    return heights


# -- normalization ----------------------------------------------------------


def _stats_from_samples(samples):
    """samples: per-band 1-D arrays of finite training values."""
    means = np.empty(len(samples))
    stds = np.empty(len(samples))
    for c, vals in enumerate(samples):
        if vals.size == 0:
            raise DataError(f"band {c} has no valid training pixels")
        if vals.size < 2:
            raise UsageError(
                f"band {c} has {vals.size} training pixel; need at least 2"
            )
        means[c] = vals.mean()
        stds[c] = vals.std()
        if stds[c] < CONSTANT_STD:
            log.warning("band %d is constant over training pixels; it will"
                        " normalize to zeros", c)
    return BandStats(means, stds)


def zscore_fit(stack, train_mask=None):
    """Per-band mean/std over valid training pixels only."""
    valid = stack.valid_mask()
    if train_mask is not None:
        train_mask = np.asarray(train_mask)
        if train_mask.shape != valid.shape:
            raise DimensionError(
                f"training mask {train_mask.shape} does not match"
                f" stack grid {valid.shape}"
            )
        valid = valid & (train_mask > 0)
    return _stats_from_samples([b[valid] for b in stack.bands])


def _normalize_planes(bands, stats):
    out = np.empty_like(bands)
    for c in range(bands.shape[0]):
        if stats.stds[c] < CONSTANT_STD:
            out[c] = bands[c] * 0.0  # keeps NaN holes, zeros elsewhere
        else:
            out[c] = (bands[c] - stats.means[c]) / stats.stds[c]
    return out


def zscore_apply(stack, stats):
    if stack.stats is not None:
        raise UsageError("stack is already normalized")
    if len(stats) != stack.bands.shape[0]:
        raise ConfigurationError(
            f"{len(stats)} band statistics for {stack.bands.shape[0]} bands"
        )
    return dataclasses.replace(
        stack, bands=_normalize_planes(stack.bands, stats), stats=stats)


def zscore_invert(stack, stats=None):
    if stats is None:
        stats = stack.stats
    if stats is None:
        raise UsageError("stack carries no statistics to invert")
    bands = stack.bands * stats.stds[:, None, None] + stats.means[:, None, None]
    return dataclasses.replace(stack, bands=bands, stats=None)


# -- tiling and splitting ----------------------------------------------------


def tile_patches(stack, reference, mask=None, size=128, stride=None,
                 min_valid_fraction=MIN_VALID_FRACTION):
    """Row-major non-overlapping tiles; partial edge tiles are dropped,
    as are tiles whose valid fraction falls below the threshold.

    Patch features keep NaN at invalid pixels; apply_patch_stats fills
    the holes after normalization.
    """
    if stride is None:
        stride = size
    if size < 1 or stride < 1:
        raise UsageError(f"size/stride must be positive, got {size}/{stride}")
    reference = np.asarray(reference, dtype=np.float64)
    h, w = stack.shape
    if reference.shape != (h, w):
        raise DimensionError(
            f"reference {reference.shape} does not match stack grid {(h, w)}"
        )
    valid = stack.valid_mask() & np.isfinite(reference)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != (h, w):
            raise DimensionError(
                f"mask {mask.shape} does not match stack grid {(h, w)}"
            )
        valid = valid & (mask > 0)
    if h < size or w < size:
        raise UsageError(
            f"raster {h}x{w} is smaller than the {size}px patch"
        )

    patches = []
    for row in range(0, h - size + 1, stride):
        for col in range(0, w - size + 1, stride):
            win = (slice(row, row + size), slice(col, col + size))
            tile_valid = valid[win]
            if not tile_valid.any():
                continue
            if tile_valid.mean() < min_valid_fraction:
                continue
            patches.append(Patch(
                features=stack.bands[(slice(None),) + win].copy(),
                reference=reference[win].copy(),
                mask=tile_valid.astype(np.float64),
                row=row,
                col=col,
            ))
    return patches


def split_dataset(patches, seed, stride=None):
    """Seeded shuffle, then contiguous 60/20/20 cut over patch indices."""
    n = len(patches)
    if n < 5:
        raise UsageError(f"need at least 5 patches to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(0.6 * n))
    n_val = int(round(0.2 * n))
    size = patches[0].size
    return DatasetSplit(
        train=tuple(int(i) for i in sorted(perm[:n_train])),
        val=tuple(int(i) for i in sorted(perm[n_train:n_train + n_val])),
        test=tuple(int(i) for i in sorted(perm[n_train + n_val:])),
        seed=int(seed),
        size=size,
        stride=size if stride is None else int(stride),
    )


def split_fingerprint(split, patches):
    """Hash of the split geometry, stored in checkpoints so evaluation can
    refuse test data that does not come from the same split."""
    payload = {
        "seed": split.seed,
        "size": split.size,
        "stride": split.stride,
        "origins": {
            name: [[patches[i].row, patches[i].col]
                   for i in getattr(split, name)]
            for name in ("train", "val", "test")
        },
    }
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("ascii")).hexdigest()


# -- patch-level normalization and pixel tables ------------------------------


def fit_patch_stats(patches, indices):
    """Band statistics from the valid pixels of the given patches only."""
    if not indices:
        raise UsageError("no patches selected for statistics")
    n_bands = patches[indices[0]].features.shape[0]
    samples = [
        np.concatenate([
            patches[i].features[c][patches[i].mask > 0] for i in indices
        ])
        for c in range(n_bands)
    ]
    return _stats_from_samples(samples)


def apply_patch_stats(patches, stats):
    """Normalize patch features and fill invalid pixels with 0 (the
    post-normalization band mean); reference holes also become 0, which
    the masked loss ignores."""
    out = []
    for p in patches:
        feats = _normalize_planes(p.features, stats)
        feats = np.where(np.isfinite(feats), feats, 0.0)
        ref = np.where(p.mask > 0, p.reference, 0.0)
        out.append(dataclasses.replace(p, features=feats, reference=ref))
    return out


def pixel_table(patches, indices=None):
    """Flatten valid patch pixels into (features, target) training rows."""
    if indices is None:
        indices = range(len(patches))
    xs, ys = [], []
    for i in indices:
        p = patches[i]
        keep = p.mask > 0
        xs.append(p.features[:, keep].T)
        ys.append(p.reference[keep])
    if not xs or sum(x.shape[0] for x in xs) == 0:
        raise DataError("pixel table is empty: no valid pixels selected")
    return np.concatenate(xs), np.concatenate(ys)
