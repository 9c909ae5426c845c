"""Deep-regression training loop, checkpoint files, and full-raster
prediction by overlap-averaged patch stitching.

One checkpoint file carries everything needed to reproduce inference:
architecture config, every parameter and running statistic, the band
order and z-score statistics the model was trained against, the loss
log, and the data-split fingerprint for evaluation provenance.
"""

import dataclasses
import math

import numpy as np

from . import autodiff, container, nn, optim
from .errors import (
    ConfigurationError,
    DataError,
    TrainingDivergedError,
    UsageError,
)
from .models import ModelConfig, build_model
from .pipeline import BandStats, zscore_apply
from .raster import Raster

PATCH_SIZE = 128
PATCH_OVERLAP = 64


@dataclasses.dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    patience: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigurationError(
                f"epochs/batch_size must be positive, got"
                f" {self.epochs}/{self.batch_size}"
            )
        if self.lr <= 0:
            raise ConfigurationError(f"lr must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigurationError("weight_decay must be non-negative")
        if self.patience is not None and self.patience < 1:
            raise ConfigurationError("patience must be positive or None")


@dataclasses.dataclass
class Checkpoint:
    model_config: ModelConfig
    state: dict
    roles: tuple
    stats: BandStats
    log_train: np.ndarray
    log_val: np.ndarray
    selection_epoch: int
    seed: int
    combo: str = ""
    resolution: int = 0
    split_fingerprint: str = ""
    # output affine: the net regresses z-scored heights, these map back
    # to meters (identity when a checkpoint is assembled by hand)
    target_mean: float = 0.0
    target_std: float = 1.0

    def build(self):
        model = build_model(self.model_config, self.seed)
        model.load_state_dict(self.state)
        model.eval()
        return model


def _batch_tensors(patches, indices):
    feats = np.stack([patches[i].features for i in indices])
    refs = np.stack([patches[i].reference[None] for i in indices])
    masks = np.stack([patches[i].mask[None] for i in indices])
    dtype = autodiff.default_dtype()
    return (autodiff.Tensor(feats.astype(dtype), requires_grad=False),
            refs.astype(dtype), masks.astype(dtype))


def _epoch_batches(order, batch_size):
    for start in range(0, len(order), batch_size):
        yield order[start:start + batch_size]


def _validation_loss(model, patches, indices, batch_size, t_mean, t_std):
    model.eval()
    total = 0.0
    n_valid = 0
    with autodiff.no_grad():
        for batch in _epoch_batches(np.asarray(indices), batch_size):
            x, ref, mask = _batch_tensors(patches, batch)
            pred = model(x).data * t_std + t_mean
            diff = (pred - ref) * mask
            total += float((diff * diff).sum())
            n_valid += int(mask.sum())
    if n_valid == 0:
        raise DataError("validation set has no valid pixels")
    return total / n_valid


def _target_moments(patches, indices):
    """Mean and spread of the valid training heights; the net learns the
    z-scored residual because Adam moves parameters about lr per step,
    which would make a meter-scale offset unreachable in few epochs."""
    vals = np.concatenate([
        patches[i].reference[patches[i].mask > 0] for i in indices
    ])
    if vals.size == 0:
        raise DataError("training split has no valid reference pixels")
    std = float(vals.std())
    return float(vals.mean()), (std if std > 1e-6 else 1.0)


def train_model(model_config, patches, split, config, roles=(), stats=None,
                combo="", resolution=0, fingerprint=""):
    """Adam plus one-cycle schedule over shuffled patch batches, with
    best-validation checkpointing and patience-based early stopping.

    patches must already be normalized; split carries the train/val
    index lists. Returns a Checkpoint whose parameters are those of the
    epoch with the lowest validation loss.
    """
    if not split.train or not split.val:
        raise UsageError("train and validation splits must be nonempty")
    model = build_model(model_config, config.seed)
    params = list(model.named_parameters().values())
    opt = optim.Adam(params, lr=config.lr, weight_decay=config.weight_decay)
    shuffler = np.random.default_rng(config.seed)
    t_mean, t_std = _target_moments(patches, split.train)

    steps_per_epoch = math.ceil(len(split.train) / config.batch_size)
    total_steps = config.epochs * steps_per_epoch

    log_train, log_val = [], []
    best_val = math.inf
    best_state = None
    best_epoch = -1
    since_best = 0
    step = 0

    for epoch in range(config.epochs):
        model.train()
        order = shuffler.permutation(np.asarray(split.train))
        epoch_loss = 0.0
        for batch in _epoch_batches(order, config.batch_size):
            opt.lr = optim.one_cycle_lr(step, total_steps, config.lr)
            x, ref, mask = _batch_tensors(patches, batch)
            pred = model(x) * t_std + t_mean
            loss = nn.masked_mse(pred, ref, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite training loss at epoch {epoch}, step {step}"
                )
            opt.zero_grad()
            autodiff.backward(loss)
            opt.step()
            epoch_loss += value * len(batch)
            step += 1
        log_train.append(epoch_loss / len(order))

        val = _validation_loss(model, patches, split.val, config.batch_size,
                               t_mean, t_std)
        if not math.isfinite(val):
            raise TrainingDivergedError(
                f"non-finite validation loss at epoch {epoch}"
            )
        log_val.append(val)

        if val < best_val:
            best_val = val
            best_state = model.state_dict()
            best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
            if config.patience is not None and since_best >= config.patience:
                break

    return Checkpoint(
        model_config=model_config,
        state=best_state,
        roles=tuple(roles),
        stats=stats,
        log_train=np.asarray(log_train),
        log_val=np.asarray(log_val),
        selection_epoch=best_epoch,
        seed=config.seed,
        combo=combo,
        resolution=resolution,
        split_fingerprint=fingerprint,
        target_mean=t_mean,
        target_std=t_std,
    )


# -- checkpoint files --------------------------------------------------------


def save_checkpoint(path, ckpt):
    if ckpt.stats is None or not ckpt.roles:
        raise UsageError(
            "checkpoint must carry band roles and statistics before saving"
        )
    names = sorted(ckpt.state)
    meta = {
        "kind": "checkpoint",
        "version": 1,
        "model": ckpt.model_config.to_dict(),
        "roles": list(ckpt.roles),
        "state_names": names,
        "selection_epoch": int(ckpt.selection_epoch),
        "seed": int(ckpt.seed),
        "combo": ckpt.combo,
        "resolution": int(ckpt.resolution),
        "split_fingerprint": ckpt.split_fingerprint,
        "target_mean": float(ckpt.target_mean),
        "target_std": float(ckpt.target_std),
    }
    arrays = {f"state/{n}": ckpt.state[n] for n in names}
    arrays["stats/means"] = ckpt.stats.means
    arrays["stats/stds"] = ckpt.stats.stds
    arrays["log/train"] = np.asarray(ckpt.log_train, dtype=np.float64)
    arrays["log/val"] = np.asarray(ckpt.log_val, dtype=np.float64)
    container.save_container(path, meta, arrays)


def load_checkpoint(path):
    meta, arrays = container.load_container(path)
    if meta.get("kind") != "checkpoint":
        raise DataError(f"{path} is not a checkpoint file")
    state = {n: arrays[f"state/{n}"] for n in meta["state_names"]}
    return Checkpoint(
        model_config=ModelConfig.from_dict(meta["model"]),
        state=state,
        roles=tuple(meta["roles"]),
        stats=BandStats(arrays["stats/means"], arrays["stats/stds"]),
        log_train=arrays["log/train"],
        log_val=arrays["log/val"],
        selection_epoch=int(meta["selection_epoch"]),
        seed=int(meta["seed"]),
        combo=meta["combo"],
        resolution=int(meta["resolution"]),
        split_fingerprint=meta["split_fingerprint"],
        target_mean=float(meta["target_mean"]),
        target_std=float(meta["target_std"]),
    )


# -- full-raster prediction --------------------------------------------------


def _window_starts(extent, size, stride):
    if extent < size:
        raise UsageError(f"raster extent {extent} is below patch size {size}")
    starts = list(range(0, extent - size + 1, stride))
    if starts[-1] + size < extent:
        starts.append(extent - size)
    return starts


def predict_raster(ckpt, stack, model=None, clamp_negative=True,
                   batch_size=16, size=PATCH_SIZE):
    """Tile, predict, and blend overlapping patches by plain averaging.

    The stack comes in raw; checkpoint statistics normalize it here so
    inference always sees the training distribution. Pixels invalid in
    the stack are emitted as nodata. Negative heights clamp to zero in
    the exported map only. On rasters smaller than the window, the
    window shrinks to the largest extent the pooling pyramid accepts.
    """
    if tuple(stack.roles) != tuple(ckpt.roles):
        raise ConfigurationError(
            f"stack bands {stack.roles} do not match checkpoint"
            f" bands {ckpt.roles}"
        )
    if stack.stats is not None:
        raise UsageError("predict expects a raw stack; statistics are"
                         " applied from the checkpoint")
    if model is None:
        model = ckpt.build()
    model.eval()

    normed = zscore_apply(stack, ckpt.stats)
    bands = np.where(np.isfinite(normed.bands), normed.bands, 0.0)
    h, w = stack.shape
    unit = 2 ** (ckpt.model_config.levels - 1)
    size = min(size, min(h, w) // unit * unit)
    if size < unit:
        raise UsageError(
            f"raster {h}x{w} is below the smallest {unit}-divisible window"
        )
    stride = max(size // 2, 1)
    rows = _window_starts(h, size, stride)
    cols = _window_starts(w, size, stride)
    windows = [(r, c) for r in rows for c in cols]

    acc = np.zeros((h, w))
    count = np.zeros((h, w))
    dtype = autodiff.default_dtype()
    with autodiff.no_grad():
        for start in range(0, len(windows), batch_size):
            group = windows[start:start + batch_size]
            tiles = np.stack([
                bands[:, r:r + size, c:c + size] for r, c in group
            ])
            pred = model(autodiff.Tensor(tiles.astype(dtype),
                                         requires_grad=False))
            planes = (pred.data[:, 0].astype(np.float64) * ckpt.target_std
                      + ckpt.target_mean)
            for plane, (r, c) in zip(planes, group):
                acc[r:r + size, c:c + size] += plane
                count[r:r + size, c:c + size] += 1.0
    heights = acc / count
    if clamp_negative:
        heights = np.maximum(heights, 0.0)
    heights = np.where(stack.valid_mask(), heights, np.nan)
    return Raster(values=heights, spacing=stack.spacing,
                  role="height_pred", units="m")
