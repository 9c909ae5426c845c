"""Accuracy metrics over pooled valid pixels, report rows, and scatter
exports.

Sign convention: mean error is prediction minus reference, so a
positive value means overestimated heights. R-squared uses the valid-
pixel reference mean and may be negative; a constant reference leaves
it undefined and raises instead of returning a sentinel.
"""

import csv
import dataclasses
import io

import numpy as np

from . import autodiff
from .errors import DataError, DimensionError, UsageError
from .pipeline import pixel_table, split_fingerprint

REPORT_COLUMNS = ("combo", "model", "resolution", "pols", "me_m", "rmse_m",
                  "r2", "n_pixels", "seed")


def _residuals(pred, ref, mask):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise DimensionError(
            f"prediction {pred.shape} and reference {ref.shape} differ"
        )
    valid = np.isfinite(pred) & np.isfinite(ref)
    if mask is not None:
        mask = np.asarray(mask)
        if mask.shape != pred.shape:
            raise DimensionError(
                f"mask {mask.shape} does not match data {pred.shape}"
            )
        valid &= mask > 0
    if not valid.any():
        raise UsageError("no valid pixels to evaluate")
    return pred[valid], ref[valid]


def mean_error(pred, ref, mask=None):
    p, r = _residuals(pred, ref, mask)
    return float((p - r).mean())


def rmse(pred, ref, mask=None):
    p, r = _residuals(pred, ref, mask)
    d = p - r
    return float(np.sqrt((d * d).mean()))


def r2(pred, ref, mask=None):
    p, r = _residuals(pred, ref, mask)
    if np.ptp(r) == 0.0:
        raise DataError(
            "reference is constant over valid pixels; R^2 is undefined"
        )
    ss_res = float(((p - r) ** 2).sum())
    ss_tot = float(((r - r.mean()) ** 2).sum())
    return 1.0 - ss_res / ss_tot


@dataclasses.dataclass
class EvalRow:
    combo: str
    model: str
    resolution: int
    pols: str
    me_m: float
    rmse_m: float
    r2: float
    n_pixels: int
    seed: int

    def as_record(self):
        return [self.combo, self.model, str(self.resolution), self.pols,
                f"{self.me_m:.6f}", f"{self.rmse_m:.6f}", f"{self.r2:.6f}",
                str(self.n_pixels), str(self.seed)]


def _pols_of(combo):
    parts = [p.strip() for p in combo.split(",")]
    return "+".join(parts[1:]) if len(parts) > 1 else ""


def _pooled_row(pred, ref, combo, model_id, resolution, seed):
    return EvalRow(
        combo=combo,
        model=model_id,
        resolution=int(resolution),
        pols=_pols_of(combo),
        me_m=mean_error(pred, ref),
        rmse_m=rmse(pred, ref),
        r2=r2(pred, ref),
        n_pixels=int(pred.size),
        seed=int(seed),
    )


def check_provenance(ckpt_fingerprint, split, patches):
    """Refuse evaluation when the split at hand is not the one the model
    was trained against."""
    if not ckpt_fingerprint:
        raise UsageError(
            "model carries no split fingerprint; cannot verify that test"
            " patches were held out during training"
        )
    actual = split_fingerprint(split, patches)
    if actual != ckpt_fingerprint:
        raise UsageError(
            f"split fingerprint {actual[:12]}... does not match the model's"
            f" {ckpt_fingerprint[:12]}...; the test data does not come from"
            " the training-time split"
        )


def evaluate_checkpoint(ckpt, patches, split, model=None, clamp=True,
                        batch_size=16, verify_split=True):
    """Pool valid test-patch pixels under the checkpoint model.

    Returns (EvalRow, reference values, predicted values). Predictions
    clamp at zero by default, matching exported maps.
    """
    if verify_split:
        check_provenance(ckpt.split_fingerprint, split, patches)
    if model is None:
        model = ckpt.build()
    model.eval()
    dtype = autodiff.default_dtype()
    preds, refs = [], []
    test = list(split.test)
    with autodiff.no_grad():
        for start in range(0, len(test), batch_size):
            batch = test[start:start + batch_size]
            x = np.stack([patches[i].features for i in batch]).astype(dtype)
            out = model(autodiff.Tensor(x, requires_grad=False)).data[:, 0]
            out = out.astype(np.float64) * ckpt.target_std + ckpt.target_mean
            for plane, i in zip(out, batch):
                keep = patches[i].mask > 0
                preds.append(plane[keep].astype(np.float64))
                refs.append(patches[i].reference[keep])
    pred = np.concatenate(preds)
    ref = np.concatenate(refs)
    if clamp:
        pred = np.maximum(pred, 0.0)
    row = _pooled_row(pred, ref, ckpt.combo, ckpt.model_config.arch,
                      ckpt.resolution, ckpt.seed)
    return row, ref, pred


def evaluate_baseline(model, model_id, patches, split, combo="",
                      resolution=0, seed=0, clamp=True):
    """Same pooling for a pixelwise regressor via the patch pixel table."""
    x, y = pixel_table(patches, split.test)
    pred = np.asarray(model.predict(x), dtype=np.float64)
    if clamp:
        pred = np.maximum(pred, 0.0)
    row = _pooled_row(pred, y, combo, model_id, resolution, seed)
    return row, y, pred


# -- delimited exports -------------------------------------------------------


def write_scatter(path, ref, pred):
    ref = np.asarray(ref, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if ref.shape != pred.shape or ref.ndim != 1:
        raise DimensionError("scatter export needs matching 1-D arrays")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("reference_m\tpredicted_m\n")
        for r, p in zip(ref, pred):
            fh.write(f"{r:.6f}\t{p:.6f}\n")


def rows_to_csv(rows):
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow(row.as_record())
    return buf.getvalue()


def write_report(path, rows):
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.write(rows_to_csv(rows))


def read_report(path):
    with open(path, encoding="ascii", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != REPORT_COLUMNS:
            raise DataError(f"{path} is not a metrics report")
        out = []
        for rec in reader:
            out.append(EvalRow(
                combo=rec[0], model=rec[1], resolution=int(rec[2]),
                pols=rec[3], me_m=float(rec[4]), rmse_m=float(rec[5]),
                r2=float(rec[6]), n_pixels=int(rec[7]), seed=int(rec[8]),
            ))
        return out


def format_matrix(rows):
    """Pivot report rows into one text block per resolution: combos down,
    models across, RMSE with R-squared in parentheses."""
    if not rows:
        return "no evaluation rows\n"
    out = []
    for res in sorted({r.resolution for r in rows}):
        sub = [r for r in rows if r.resolution == res]
        models = sorted({r.model for r in sub})
        combos = sorted({r.combo for r in sub})
        width = max(len(c) for c in combos) + 2
        cell = 18
        out.append(f"resolution {res} m  (RMSE m, R2)")
        out.append(" " * width + "".join(m.ljust(cell) for m in models))
        for combo in combos:
            line = combo.ljust(width)
            for m in models:
                hits = [r for r in sub if r.combo == combo and r.model == m]
                if hits:
                    best = min(hits, key=lambda r: r.rmse_m)
                    line += f"{best.rmse_m:.3f} ({best.r2:.3f})".ljust(cell)
                else:
                    line += "-".ljust(cell)
            out.append(line)
        out.append("")
    return "\n".join(out)
