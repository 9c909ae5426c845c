"""Single-band raster exchange format and block aggregation.

In memory a raster is a 2-D float array where NaN marks nodata, plus the
pixel spacing and a role tag naming what the band means. On disk the
format is deliberately trivial so any language can read it:

    line 1   magic "R32RASTER 1"
    then     key=value lines: width, height, spacing, nodata, role, units
    then     a line reading "end"
    then     width*height little-endian IEEE float32 values, row-major,
             with nodata written as the sentinel from the header

The sentinel is -9999.0. Headers are ASCII, newline-terminated, written
in the fixed order above, so a fixed scene serializes byte-identically.
"""

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError, UsageError

MAGIC = "R32RASTER 1"
NODATA = -9999.0
_HEADER_KEYS = ("width", "height", "spacing", "nodata", "role", "units")


@dataclass
class Raster:
    """2-D grid of physical values; NaN means nodata."""

    values: np.ndarray
    spacing: float
    role: str
    units: str = ""

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 2:
            raise DimensionError(
                f"raster values must be 2-D, got shape {self.values.shape}"
            )
        if self.values.dtype not in (np.float32, np.float64):
            self.values = self.values.astype(np.float64)
        if self.spacing <= 0:
            raise DataError(f"pixel spacing must be positive, got {self.spacing}")

    @property
    def shape(self):
        return self.values.shape

    def valid_mask(self):
        return np.isfinite(self.values)


def write_raster(path, raster):
    """Serialize a raster; NaN becomes the nodata sentinel."""
    for name, text in (("role", raster.role), ("units", raster.units)):
        if "\n" in text or not text.isascii():
            raise DataError(f"raster {name} must be single-line ASCII, got {text!r}")
    vals = np.asarray(raster.values, dtype=np.float32)
    finite_bad = np.isfinite(vals) & (vals <= NODATA + 0.5)
    if np.any(finite_bad):
        raise DataError(
            f"raster contains values at or below the nodata sentinel {NODATA}"
        )
    payload = np.where(np.isfinite(vals), vals, np.float32(NODATA))
    h, w = vals.shape
    header = (
        f"{MAGIC}\n"
        f"width={w}\n"
        f"height={h}\n"
        f"spacing={raster.spacing!r}\n"
        f"nodata={NODATA!r}\n"
        f"role={raster.role}\n"
        f"units={raster.units}\n"
        f"end\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(payload.astype("<f4").tobytes(order="C"))


def read_raster(path):
    """Load a raster written by write_raster; sentinel pixels become NaN."""
    with open(path, "rb") as fh:
        first = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        if first != MAGIC:
            raise DataError(f"{path}: not a raster file (bad magic {first!r})")
        fields = {}
        while True:
            line = fh.readline().decode("ascii", errors="replace").rstrip("\n")
            if line == "end":
                break
            if "=" not in line:
                raise DataError(f"{path}: malformed header line {line!r}")
            key, _, value = line.partition("=")
            fields[key] = value
        missing = [k for k in _HEADER_KEYS if k not in fields]
        if missing:
            raise DataError(f"{path}: header missing keys {missing}")
        w = int(fields["width"])
        h = int(fields["height"])
        raw = fh.read()
    expected = w * h * 4
    if len(raw) != expected:
        raise DataError(
            f"{path}: payload is {len(raw)} bytes, expected {expected}"
        )
    vals = np.frombuffer(raw, dtype="<f4").reshape(h, w).astype(np.float32)
    sentinel = np.float32(float(fields["nodata"]))
    vals = np.where(vals == sentinel, np.float32(np.nan), vals)
    return Raster(values=vals, spacing=float(fields["spacing"]),
                  role=fields["role"], units=fields["units"])


def block_aggregate(raster, factor):
    """Aggregate to a coarser grid by nodata-aware block means.

    factor is the integer block edge (2 halves the grid, 3 thirds it);
    partial blocks at the right/bottom edges are dropped. Blocks that are
    entirely nodata stay nodata. Accumulation runs in float64 so the
    valid-pixel mean is preserved to rounding.
    """
    if int(factor) != factor or factor < 2:
        raise UsageError(f"aggregation factor must be an integer >= 2, got {factor}")
    factor = int(factor)
    vals = np.asarray(raster.values, dtype=np.float64)
    h, w = vals.shape
    ho, wo = h // factor, w // factor
    if ho < 1 or wo < 1:
        raise UsageError(
            f"raster {h}x{w} too small to aggregate by {factor}"
        )
    blocks = vals[:ho * factor, :wo * factor].reshape(ho, factor, wo, factor)
    finite = np.isfinite(blocks)
    total = np.where(finite, blocks, 0.0).sum(axis=(1, 3))
    count = finite.sum(axis=(1, 3))
    out = np.divide(total, count, out=np.full((ho, wo), np.nan),
                    where=count > 0)
    return Raster(values=out, spacing=raster.spacing * factor,
                  role=raster.role, units=raster.units)
