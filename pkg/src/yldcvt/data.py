"""Histogram samples, the YLDH container format, splitting and synthetic data."""

from __future__ import annotations

import dataclasses
import functools
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

BANDS = 11
BINS = 32
INTERVALS = 34
IN_YEAR_INTERVALS = 19

MAGIC = b"YLDH"
FORMAT_VERSION = 1
PROVENANCE_CODES = {"synthetic": 0, "external": 1}
PARAMS_RECORD = 2
_HEADER = struct.Struct("<4sIIIIIB")


class DatasetFormatError(ValueError):
    """Base class for unreadable YLDH files."""


class BadMagicError(DatasetFormatError):
    pass


class UnsupportedVersionError(DatasetFormatError):
    pass


class RecordTypeError(DatasetFormatError):
    pass


class TruncatedFileError(DatasetFormatError):
    def __init__(self, message: str, index: int):
        super().__init__(message)
        self.index = index


@dataclass
class HistogramSample:
    county_id: int
    year: int
    yield_bu_ac: float
    grid: np.ndarray  # [bands, bins, intervals]

    @property
    def intervals(self) -> int:
        return self.grid.shape[-1]


class Dataset:
    """Samples sharing one grid shape; (county_id, year) pairs are unique."""

    def __init__(
        self,
        samples: Sequence[HistogramSample] = (),
        provenance: str = "synthetic",
        grid_shape: tuple[int, int, int] | None = None,
    ):
        if provenance not in PROVENANCE_CODES:
            raise ValueError(f"provenance must be one of {sorted(PROVENANCE_CODES)}")
        self.samples = list(samples)
        self.provenance = provenance
        shapes = {s.grid.shape for s in self.samples}
        if len(shapes) > 1:
            raise ValueError(f"samples have mixed grid shapes: {sorted(shapes)}")
        if shapes:
            grid_shape = shapes.pop()
        self.grid_shape = tuple(grid_shape or (BANDS, BINS, INTERVALS))
        keys = [(s.county_id, s.year) for s in self.samples]
        if len(set(keys)) != len(keys):
            raise ValueError("duplicate (county_id, year) pairs in dataset")

    def __len__(self) -> int:
        return len(self.samples)

    def __iter__(self):
        return iter(self.samples)

    def __getitem__(self, i) -> HistogramSample:
        return self.samples[i]

    def subset(self, indices: Iterable[int]) -> Dataset:
        return Dataset([self.samples[i] for i in indices], self.provenance, self.grid_shape)

    @property
    def years(self) -> np.ndarray:
        return np.array([s.year for s in self.samples], dtype=np.int64)

    @property
    def yields(self) -> np.ndarray:
        return np.array([s.yield_bu_ac for s in self.samples], dtype=np.float64)

    def grids(self, dtype=np.float32) -> np.ndarray:
        if not self.samples:
            return np.zeros((0,) + self.grid_shape, dtype=dtype)
        return np.stack([s.grid for s in self.samples]).astype(dtype, copy=False)

    def identical_to(self, other: Dataset) -> bool:
        """Bit-level equality of metadata and every stored value."""
        if (self.provenance, self.grid_shape, len(self)) != (other.provenance, other.grid_shape, len(other)):
            return False
        for a, b in zip(self.samples, other.samples):
            if (a.county_id, a.year) != (b.county_id, b.year):
                return False
            if np.float32(a.yield_bu_ac).tobytes() != np.float32(b.yield_bu_ac).tobytes():
                return False
            if a.grid.astype("<f4").tobytes() != b.grid.astype("<f4").tobytes():
                return False
        return True


# -- preprocessing --------------------------------------------------------
def normalize_histograms(raw: np.ndarray) -> np.ndarray:
    """Scale every (band, interval) bin column to unit mass; empty columns stay zero."""
    raw = np.asarray(raw, dtype=np.float64)
    if (raw < 0).any():
        raise ValueError("histogram counts must be non-negative")
    mass = raw.sum(axis=-2, keepdims=True)
    safe = np.where(mass > 0, mass, 1.0)
    return np.where(mass > 0, raw / safe, 0.0)


def truncate_in_year(sample: HistogramSample) -> HistogramSample:
    """Keep the first 19 of 34 intervals (day 49 to day 201)."""
    if sample.intervals != INTERVALS:
        raise ValueError(f"in-year truncation needs {INTERVALS} intervals, sample has {sample.intervals}")
    return dataclasses.replace(sample, grid=sample.grid[..., :IN_YEAR_INTERVALS].copy())


def truncate_dataset(ds: Dataset) -> Dataset:
    return Dataset([truncate_in_year(s) for s in ds], ds.provenance, ds.grid_shape[:2] + (IN_YEAR_INTERVALS,))


def pad_intervals(grids: np.ndarray, width: int) -> np.ndarray:
    """Zero-pad the interval axis at the end, e.g. to make token maps even."""
    grids = np.asarray(grids)
    extra = width - grids.shape[-1]
    if extra < 0:
        raise ValueError(f"cannot pad {grids.shape[-1]} intervals down to {width}")
    pad = [(0, 0)] * (grids.ndim - 1) + [(0, extra)]
    return np.pad(grids, pad)


# -- splitting ------------------------------------------------------------
@dataclass(frozen=True)
class SplitSpec:
    test_year: int
    val_fraction: float = 0.10
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")


def split_by_year(ds: Dataset, spec: SplitSpec) -> tuple[Dataset, Dataset, Dataset]:
    """Test = the test year; train/val = a seeded random partition of all earlier years."""
    years = ds.years
    test_idx = np.flatnonzero(years == spec.test_year)
    pool_idx = np.flatnonzero(years < spec.test_year)
    if test_idx.size == 0:
        available = sorted(set(years.tolist()))
        raise ValueError(f"no samples for test year {spec.test_year}; available years: {available}")
    if pool_idx.size == 0:
        raise ValueError(f"no training years before {spec.test_year}")
    n_val = int(np.floor(spec.val_fraction * pool_idx.size))
    rng = np.random.default_rng(spec.seed)
    chosen = np.zeros(pool_idx.size, dtype=bool)
    chosen[rng.choice(pool_idx.size, size=n_val, replace=False)] = True
    return ds.subset(pool_idx[~chosen]), ds.subset(pool_idx[chosen]), ds.subset(test_idx)


# -- synthetic generator --------------------------------------------------
@dataclass(frozen=True)
class GeneratorParams:
    """Knobs of the synthetic stand-in for the real histogram dataset.

    Each band's column is a Gaussian bump over the bins whose center follows
    a seasonal curve. The latent vigor of a sample moves the bump during the
    season; yield is a fixed linear functional of the grid (a weighted
    mean-bin trajectory) rescaled to the target moments, plus noise.
    """

    yield_mean: float = 45.26
    yield_std: float = 10.80
    sigma_noise: float = 0.2  # in units of yield_std
    first_year: int = 2003
    last_year: int = 2021
    bands: int = BANDS
    bins: int = BINS
    intervals: int = INTERVALS
    peak_jitter: float = 1.5  # std of the per-band seasonal peak shift, in intervals
    vigor_shift: float = 3.0  # bins moved per unit vigor at the seasonal peak
    bump_width: float = 2.5  # bins
    background: float = 0.02  # relative noise floor added to every bin

    def __post_init__(self):
        if self.first_year > self.last_year:
            raise ValueError(f"invalid year range {self.first_year}..{self.last_year}")
        if not 0.0 <= self.sigma_noise < 1.0:
            raise ValueError("sigma_noise must lie in [0, 1)")
        if self.yield_std <= 0:
            raise ValueError("yield_std must be positive")

    @property
    def years(self) -> list[int]:
        return list(range(self.first_year, self.last_year + 1))

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> GeneratorParams:
        raw = json.loads(text)
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown generator fields: {sorted(unknown)}")
        return cls(**raw)


def _band_constants(gen: GeneratorParams) -> dict[str, np.ndarray]:
    b = np.arange(gen.bands)
    return {
        "base": 6.0 + (b % 4) * 2.0,
        "amplitude": 8.0 + (b % 3) * 3.0,
        "peak": gen.intervals * (0.45 + 0.05 * (b % 3)),
        "season_width": gen.intervals * (0.18 + 0.02 * (b % 2)),
        "vigor_gain": np.where(b % 2 == 0, 1.0, -0.6),
        "signal_weight": np.linspace(1.0, 0.3, gen.bands),
    }


def _season(gen: GeneratorParams, shift: np.ndarray) -> np.ndarray:
    """Seasonal curve per sample, band and interval: [n, bands, intervals]."""
    c = _band_constants(gen)
    t = np.arange(gen.intervals)
    centre = c["peak"][None, :, None] + shift[:, :, None]
    return np.exp(-0.5 * ((t[None, None, :] - centre) / c["season_width"][None, :, None]) ** 2)


def _grids(gen: GeneratorParams, vigor: np.ndarray, shift: np.ndarray, noise: np.ndarray) -> np.ndarray:
    c = _band_constants(gen)
    season = _season(gen, shift)
    centre = (
        c["base"][None, :, None]
        + c["amplitude"][None, :, None] * season
        + gen.vigor_shift * c["vigor_gain"][None, :, None] * vigor[:, None, None] * season
    )
    k = np.arange(gen.bins, dtype=np.float64)
    bump = np.exp(-0.5 * ((k[None, None, :, None] - centre[:, :, None, :]) / gen.bump_width) ** 2)
    raw = bump + gen.background * noise
    return normalize_histograms(raw).astype(np.float32)


def signal_weights(gen: GeneratorParams) -> np.ndarray:
    """Weights W[band, interval] of the yield functional sum W * mean_bin."""
    c = _band_constants(gen)
    t = np.arange(gen.intervals)
    window = np.exp(-0.5 * ((t - gen.intervals * 0.45) / (gen.intervals * 0.2)) ** 2)
    w = c["signal_weight"][:, None] * c["vigor_gain"][:, None] * window[None, :]
    return w / np.abs(w).sum()


def grid_signal(grids: np.ndarray, gen: GeneratorParams) -> np.ndarray:
    """Raw (unscaled) signal of each grid: linear in the histogram values."""
    grids = np.asarray(grids, dtype=np.float64)
    k = np.arange(grids.shape[-2], dtype=np.float64)
    mean_bin = np.einsum("nbkt,k->nbt", grids, k)
    return np.einsum("nbt,bt->n", mean_bin, signal_weights(gen)[:, : grids.shape[-1]])


def _draw_latents(rng: np.random.Generator, n: int, gen: GeneratorParams):
    vigor = rng.standard_normal(n)
    shift = rng.normal(0.0, gen.peak_jitter, size=(n, gen.bands))
    noise = rng.random((n, gen.bands, gen.bins, gen.intervals))
    return vigor, shift, noise


@functools.lru_cache(maxsize=8)
def signal_moments(gen: GeneratorParams, reference_size: int = 4096) -> tuple[float, float]:
    """Population mean/std of the raw signal, from a fixed reference draw."""
    rng = np.random.default_rng(20240601)
    sig = []
    for start in range(0, reference_size, 512):
        m = min(512, reference_size - start)
        sig.append(grid_signal(_grids(gen, *_draw_latents(rng, m, gen)), gen))
    sig = np.concatenate(sig)
    return float(sig.mean()), float(sig.std())


def yield_from_grid(grids: np.ndarray, gen: GeneratorParams, noise: np.ndarray | float = 0.0) -> np.ndarray:
    mu, sd = signal_moments(gen)
    z = (grid_signal(grids, gen) - mu) / sd
    scaled = np.sqrt(1.0 - gen.sigma_noise**2) * z + gen.sigma_noise * np.asarray(noise)
    return np.maximum(gen.yield_mean + gen.yield_std * scaled, 1.0)


def generate_synthetic(n: int, seed: int = 0, gen: GeneratorParams | None = None) -> Dataset:
    """Seeded synthetic dataset; years assigned round-robin, one county per cycle."""
    gen = gen or GeneratorParams()
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    years = gen.years
    samples = []
    for start in range(0, n, 512):
        m = min(512, n - start)
        grids = _grids(gen, *_draw_latents(rng, m, gen))
        eps = rng.standard_normal(m)
        ys = yield_from_grid(grids, gen, eps).astype(np.float32)
        for j in range(m):
            i = start + j
            samples.append(HistogramSample(i // len(years) + 1, years[i % len(years)], float(ys[j]), grids[j]))
    return Dataset(samples, "synthetic")


# -- YLDH container ---------------------------------------------------------
def _record_dtype(shape: tuple[int, int, int]) -> np.dtype:
    return np.dtype([("county", "<i4"), ("year", "<i4"), ("yield", "<f4"), ("grid", "<f4", shape)])


def write_dataset(ds: Dataset, path: str | Path) -> None:
    b, k, t = ds.grid_shape
    header = _HEADER.pack(MAGIC, FORMAT_VERSION, len(ds), b, k, t, PROVENANCE_CODES[ds.provenance])
    rec = np.zeros(len(ds), dtype=_record_dtype(ds.grid_shape))
    for i, s in enumerate(ds.samples):
        rec[i] = (s.county_id, s.year, s.yield_bu_ac, s.grid)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(rec.tobytes())


def _read_header(buf: bytes, path) -> tuple[int, int, int, int, int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a YLDH file (bad magic {buf[:4]!r})")
    if len(buf) < _HEADER.size:
        raise TruncatedFileError(f"{path}: truncated header", -1)
    _, version, count, b, k, t, kind = _HEADER.unpack_from(buf)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"{path}: unsupported format version {version}")
    return count, b, k, t, kind


def read_dataset(path: str | Path) -> Dataset:
    buf = Path(path).read_bytes()
    count, b, k, t, kind = _read_header(buf, path)
    if kind == PARAMS_RECORD:
        raise RecordTypeError(f"{path}: holds a parameter checkpoint, not a dataset")
    names = {v: key for key, v in PROVENANCE_CODES.items()}
    if kind not in names:
        raise RecordTypeError(f"{path}: unknown provenance code {kind}")
    dtype = _record_dtype((b, k, t))
    body = memoryview(buf)[_HEADER.size :]
    complete = len(body) // dtype.itemsize
    if complete < count:
        raise TruncatedFileError(f"{path}: truncated in sample {complete} of {count}", complete)
    rec = np.frombuffer(body, dtype=dtype, count=count)
    samples = [
        HistogramSample(int(r["county"]), int(r["year"]), float(r["yield"]), np.array(r["grid"], dtype=np.float32))
        for r in rec
    ]
    return Dataset(samples, names[kind], (b, k, t))


def write_params(arrays: dict[str, np.ndarray], path: str | Path) -> None:
    """Named float32 tensors in the YLDH container (record type 'params')."""
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, len(arrays), 0, 0, 0, PARAMS_RECORD)]
    for name, arr in arrays.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)) + raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.astype("<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_params(path: str | Path) -> dict[str, np.ndarray]:
    buf = Path(path).read_bytes()
    count, _, _, _, kind = _read_header(buf, path)
    if kind != PARAMS_RECORD:
        raise RecordTypeError(f"{path}: holds a dataset, not a parameter checkpoint")
    out: dict[str, np.ndarray] = {}
    pos = _HEADER.size

    def take(nbytes: int, index: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(buf):
            raise TruncatedFileError(f"{path}: truncated in tensor record {index} of {count}", index)
        chunk = buf[pos : pos + nbytes]
        pos += nbytes
        return chunk

    for i in range(count):
        (name_len,) = struct.unpack("<I", take(4, i))
        name = take(name_len, i).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4, i))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, i))
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(take(4 * size, i), dtype="<f4").reshape(shape).astype(np.float32)
    return out
