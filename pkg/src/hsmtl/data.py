"""Scene I/O, band alignment, sampling and patch extraction.

Canonical on-disk format is a raw band-sequential (BSQ) little-endian file
plus a small text header:

    samples = <width>
    lines = <height>
    bands = <count>
    interleave = bsq
    data type = 4        # 4 = float32 (cubes), 12 = uint16 (label rasters)
    byte order = 0

Label rasters are single-band uint16 with 0 meaning "unlabeled" and classes
numbered 1..K.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np


class DataFormatError(ValueError):
    """Raised for malformed headers or header/payload mismatches."""


_DTYPE_CODES = {4: np.dtype("<f4"), 12: np.dtype("<u2")}
_CODE_FOR_KIND = {"cube": 4, "labels": 12}


@dataclass
class HyperCube:
    """H x W x C float32 raster with per-band provenance.

    ``band_ids`` holds each band's original 1-based index so crops, repeats
    and inversions stay traceable.
    """
    data: np.ndarray
    band_ids: list[int] = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DataFormatError(f"cube data must be H x W x C, got {self.data.shape}")
        if not self.band_ids:
            self.band_ids = list(range(1, self.data.shape[2] + 1))
        if len(self.band_ids) != self.data.shape[2]:
            raise DataFormatError(
                f"band_ids length {len(self.band_ids)} does not match "
                f"{self.data.shape[2]} bands")

    @property
    def shape(self):
        return self.data.shape

    @property
    def bands(self) -> int:
        return self.data.shape[2]


@dataclass
class LabelRaster:
    """H x W integer raster; 0 = unlabeled, 1..K = classes."""
    data: np.ndarray

    def __post_init__(self):
        if self.data.ndim != 2:
            raise DataFormatError(f"labels must be H x W, got {self.data.shape}")
        if self.data.min() < 0:
            raise DataFormatError("labels must be nonnegative")

    @property
    def num_classes(self) -> int:
        return int(self.data.max())

    @property
    def shape(self):
        return self.data.shape


# ---------------------------------------------------------------------------
# header + raster I/O
# ---------------------------------------------------------------------------

def default_header_path(data_path: str) -> str:
    base, _ = os.path.splitext(data_path)
    return base + ".hdr"


def _parse_header(header_path: str) -> dict:
    fields = {}
    with open(header_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line or "=" not in line:
                continue
            key, value = line.split("=", 1)
            fields[key.strip().lower()] = value.strip()
    required = ("samples", "lines", "bands", "interleave", "data type", "byte order")
    missing = [k for k in required if k not in fields]
    if missing:
        raise DataFormatError(f"header {header_path} is missing fields: {missing}")
    if fields["interleave"].lower() != "bsq":
        raise DataFormatError(
            f"unsupported interleave {fields['interleave']!r} in {header_path}; only bsq is supported")
    if int(fields["byte order"]) != 0:
        raise DataFormatError(f"unsupported byte order {fields['byte order']} (want 0)")
    code = int(fields["data type"])
    if code not in _DTYPE_CODES:
        raise DataFormatError(f"unsupported data type code {code} in {header_path}")
    return {"width": int(fields["samples"]), "height": int(fields["lines"]),
            "bands": int(fields["bands"]), "dtype": _DTYPE_CODES[code], "code": code}


def _read_bsq(data_path: str, header_path: str) -> tuple[np.ndarray, dict]:
    hdr = _parse_header(header_path)
    h, w, c = hdr["height"], hdr["width"], hdr["bands"]
    expected = h * w * c * hdr["dtype"].itemsize
    actual = os.path.getsize(data_path)
    if actual != expected:
        raise DataFormatError(
            f"{data_path}: header declares {expected} bytes "
            f"({h}x{w}x{c} of {hdr['dtype']}), file holds {actual} bytes")
    raw = np.fromfile(data_path, dtype=hdr["dtype"])
    # BSQ is band-major on disk; in memory we want H x W x C
    return np.ascontiguousarray(raw.reshape(c, h, w).transpose(1, 2, 0)), hdr


def read_cube(data_path: str, header_path: str | None = None) -> HyperCube:
    header_path = header_path or default_header_path(data_path)
    arr, hdr = _read_bsq(data_path, header_path)
    if hdr["code"] != 4:
        raise DataFormatError(f"{data_path}: cubes must be float32 (data type 4)")
    return HyperCube(arr)


def read_labels(data_path: str, header_path: str | None = None) -> LabelRaster:
    header_path = header_path or default_header_path(data_path)
    arr, hdr = _read_bsq(data_path, header_path)
    if hdr["code"] != 12:
        raise DataFormatError(f"{data_path}: label rasters must be uint16 (data type 12)")
    if hdr["bands"] != 1:
        raise DataFormatError(f"{data_path}: label rasters must be single-band")
    return LabelRaster(arr[:, :, 0].astype(np.int64))


def _write_bsq(arr: np.ndarray, data_path: str, header_path: str, code: int) -> None:
    h, w, c = arr.shape
    arr.transpose(2, 0, 1).astype(_DTYPE_CODES[code]).tofile(data_path)
    with open(header_path, "w", encoding="utf-8") as fh:
        fh.write(f"samples = {w}\n"
                 f"lines = {h}\n"
                 f"bands = {c}\n"
                 "interleave = bsq\n"
                 f"data type = {code}\n"
                 "byte order = 0\n")


def write_cube(cube: HyperCube, data_path: str, header_path: str | None = None) -> None:
    _write_bsq(cube.data.astype(np.float32), data_path,
               header_path or default_header_path(data_path), code=4)


def write_labels(labels: LabelRaster, data_path: str, header_path: str | None = None) -> None:
    if labels.data.max() > np.iinfo(np.uint16).max:
        raise DataFormatError("label values exceed uint16 range")
    _write_bsq(labels.data[:, :, None], data_path,
               header_path or default_header_path(data_path), code=12)


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def standardize(cube: HyperCube) -> HyperCube:
    """Per-band zero mean / unit variance over all H x W pixels.

    Constant bands (sigma ~ 0) come out as exact zeros rather than noise.
    """
    flat = cube.data.reshape(-1, cube.bands).astype(np.float64)
    mean = flat.mean(axis=0)
    std = flat.std(axis=0)
    out = np.empty_like(flat)
    degenerate = std < 1e-12
    np.divide(flat - mean, np.where(degenerate, 1.0, std), out=out)
    out[:, degenerate] = 0.0
    return HyperCube(out.reshape(cube.data.shape).astype(np.float32),
                     band_ids=list(cube.band_ids))


@dataclass(frozen=True)
class AlignmentSpec:
    """Ordered band manipulations applied left to right.

    Steps: ("crop", first, last) keeps the inclusive 1-based range;
    ("repeat_last", n) appends copies of the final n bands in their original
    order; ("invert",) reverses band order.
    """
    steps: tuple = ()

    @classmethod
    def parse(cls, texts: list[str] | None) -> "AlignmentSpec":
        """Build from strings like "crop 11 113", "repeat_last 57", "invert"."""
        steps = []
        for text in texts or []:
            parts = text.replace(":", " ").split()
            if not parts:
                continue
            op = parts[0].lower()
            if op == "crop" and len(parts) == 3:
                steps.append(("crop", int(parts[1]), int(parts[2])))
            elif op == "repeat_last" and len(parts) == 2:
                steps.append(("repeat_last", int(parts[1])))
            elif op == "invert" and len(parts) == 1:
                steps.append(("invert",))
            else:
                raise DataFormatError(f"unrecognized alignment step {text!r}")
        return cls(tuple(steps))

    def to_strings(self) -> list[str]:
        return [" ".join(str(x) for x in step) for step in self.steps]

    def with_invert(self) -> "AlignmentSpec":
        return AlignmentSpec(self.steps + (("invert",),))

    def output_bands(self, bands: int) -> int:
        """Band count after applying the steps to a cube with ``bands`` bands."""
        for step in self.steps:
            if step[0] == "crop":
                _, first, last = step
                if not (1 <= first <= last <= bands):
                    raise DataFormatError(
                        f"crop {first}..{last} out of range for {bands} bands")
                bands = last - first + 1
            elif step[0] == "repeat_last":
                n = step[1]
                if not (1 <= n <= bands):
                    raise DataFormatError(f"repeat_last({n}) out of range for {bands} bands")
                bands += n
        if bands < 1:
            raise DataFormatError("alignment leaves no bands")
        return bands


def align_bands(cube: HyperCube, spec: AlignmentSpec) -> HyperCube:
    """Apply an AlignmentSpec; band_ids keep tracking original indices."""
    data = cube.data
    ids = list(cube.band_ids)
    for step in spec.steps:
        if step[0] == "crop":
            _, first, last = step
            if not (1 <= first <= last <= data.shape[2]):
                raise DataFormatError(
                    f"crop {first}..{last} out of range for {data.shape[2]} bands")
            data = data[:, :, first - 1:last]
            ids = ids[first - 1:last]
        elif step[0] == "repeat_last":
            n = step[1]
            if not (1 <= n <= data.shape[2]):
                raise DataFormatError(
                    f"repeat_last({n}) out of range for {data.shape[2]} bands")
            data = np.concatenate([data, data[:, :, -n:]], axis=2)
            ids = ids + ids[-n:]
        elif step[0] == "invert":
            data = data[:, :, ::-1]
            ids = ids[::-1]
        else:
            raise DataFormatError(f"unknown alignment step {step!r}")
    return HyperCube(np.ascontiguousarray(data), band_ids=ids)


# ---------------------------------------------------------------------------
# sampling and patches
# ---------------------------------------------------------------------------

@dataclass
class SampleSplit:
    """Per-class training pixels (exactly n each) vs. all remaining labeled pixels."""
    train_rows: np.ndarray
    train_cols: np.ndarray
    train_labels: np.ndarray
    test_rows: np.ndarray
    test_cols: np.ndarray
    test_labels: np.ndarray
    n_per_class: int
    seed: int


def stratified_split(labels: LabelRaster, n_per_class: int, seed: int) -> SampleSplit:
    """Draw exactly ``n_per_class`` training pixels per class, uniformly
    without replacement from a generator seeded with ``seed``; every other
    labeled pixel becomes test."""
    rng = np.random.default_rng(seed)
    tr_r, tr_c, tr_y = [], [], []
    te_r, te_c, te_y = [], [], []
    for cls in range(1, labels.num_classes + 1):
        rows, cols = np.nonzero(labels.data == cls)
        count = rows.size
        if count < n_per_class + 1:
            raise ValueError(
                f"class {cls} has only {count} labeled pixels; "
                f"need at least {n_per_class + 1}")
        pick = rng.choice(count, size=n_per_class, replace=False)
        mask = np.zeros(count, dtype=bool)
        mask[pick] = True
        tr_r.append(rows[mask]); tr_c.append(cols[mask])
        tr_y.append(np.full(n_per_class, cls, dtype=np.int64))
        te_r.append(rows[~mask]); te_c.append(cols[~mask])
        te_y.append(np.full(count - n_per_class, cls, dtype=np.int64))
    return SampleSplit(
        np.concatenate(tr_r), np.concatenate(tr_c), np.concatenate(tr_y),
        np.concatenate(te_r), np.concatenate(te_c), np.concatenate(te_y),
        n_per_class=n_per_class, seed=seed)


def _reflect(indices: np.ndarray, n: int) -> np.ndarray:
    """Mirror indices across the array edges without repeating the edge pixel."""
    idx = np.where(indices < 0, -indices, indices)
    return np.where(idx >= n, 2 * n - 2 - idx, idx)


def extract_patch(cube: HyperCube, row: int, col: int, patch_size: int) -> np.ndarray:
    """P x P x C window centered at (row, col), mirror-reflected at borders."""
    h, w, _ = cube.shape
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"pixel ({row}, {col}) outside {h} x {w} scene")
    half = patch_size // 2
    rows = _reflect(np.arange(row - half, row + half + 1), h)
    cols = _reflect(np.arange(col - half, col + half + 1), w)
    return cube.data[np.ix_(rows, cols)]


def extract_patches(cube: HyperCube, rows: np.ndarray, cols: np.ndarray,
                    patch_size: int) -> np.ndarray:
    """Vectorized window gather for many centers: N x P x P x C."""
    h, w, _ = cube.shape
    half = patch_size // 2
    offs = np.arange(-half, half + 1)
    ri = _reflect(np.asarray(rows)[:, None] + offs[None, :], h)
    ci = _reflect(np.asarray(cols)[:, None] + offs[None, :], w)
    return cube.data[ri[:, :, None, None], ci[:, None, :, None],
                     np.arange(cube.bands)[None, None, None, :]]


def augment4(patch: np.ndarray) -> list[np.ndarray]:
    """Original plus horizontal, vertical and diagonal (transpose) mirrors."""
    if patch.ndim != 3 or patch.shape[0] != patch.shape[1]:
        raise ValueError(f"augment4 needs a square P x P x C patch, got {patch.shape}")
    return [np.ascontiguousarray(patch),
            np.ascontiguousarray(patch[:, ::-1, :]),
            np.ascontiguousarray(patch[::-1, :, :]),
            np.ascontiguousarray(patch.transpose(1, 0, 2))]


def build_training_pool(cube: HyperCube, split: SampleSplit,
                        patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Augmented training arrays: X is (4N, P, P, C) float32, y is (4N,)
    zero-based class indices, ordered sample-major then mirror variant."""
    base = extract_patches(cube, split.train_rows, split.train_cols, patch_size)
    n = base.shape[0]
    x = np.empty((4 * n,) + base.shape[1:], dtype=np.float32)
    for i in range(n):
        for v, aug in enumerate(augment4(base[i])):
            x[4 * i + v] = aug
    y = np.repeat(split.train_labels - 1, 4).astype(np.int64)
    return x, y


# ---------------------------------------------------------------------------
# synthetic multitask scenes
# ---------------------------------------------------------------------------

def _smooth_spectrum(rng: np.random.Generator, bands: int) -> np.ndarray:
    """Smooth random curve: a few random sinusoids, normalized to unit scale."""
    t = np.linspace(0.0, 1.0, bands)
    curve = np.zeros(bands)
    for _ in range(4):
        amp = rng.uniform(0.5, 1.5)
        freq = rng.integers(1, 6)
        phase = rng.uniform(0.0, 2.0 * np.pi)
        curve += amp * np.sin(2.0 * np.pi * freq * t + phase)
    curve -= curve.mean()
    return curve / max(curve.std(), 1e-9)


def _draw_library(rng: np.random.Generator, count: int, bands: int) -> list[np.ndarray]:
    """Endmember spectra with a minimum pairwise separation."""
    spectra: list[np.ndarray] = []
    min_dist = 0.6 * np.sqrt(bands)
    while len(spectra) < count:
        cand = _smooth_spectrum(rng, bands)
        if all(np.linalg.norm(cand - s) >= min_dist for s in spectra):
            spectra.append(cand)
    return spectra


def synth_generate(num_tasks: int, classes_per_task: int, bands: int, size: int,
                   spectral_overlap: float, noise_sigma: float,
                   seed: int) -> list[tuple[HyperCube, LabelRaster]]:
    """Deterministic synthetic task family for dataset-free experiments.

    Each scene is a tiling of class regions; every pixel is its class
    endmember spectrum plus iid Gaussian noise. ``spectral_overlap`` sets the
    fraction of each task's class library drawn from one shared library
    (1.0 = identical spectra across tasks, 0.0 = fully disjoint).
    """
    if not 0.0 <= spectral_overlap <= 1.0:
        raise ValueError(f"spectral_overlap must be in [0, 1], got {spectral_overlap}")
    if num_tasks < 1 or classes_per_task < 2 or bands < 2 or size < 4:
        raise ValueError("synth_generate needs >=1 task, >=2 classes, >=2 bands, size >=4")
    rng = np.random.default_rng(seed)
    n_shared = int(round(spectral_overlap * classes_per_task))
    shared = _draw_library(rng, n_shared, bands)

    scenes = []
    grid = 2 * int(np.ceil(np.sqrt(classes_per_task)))
    edges = np.linspace(0, size, grid + 1).astype(int)
    for _ in range(num_tasks):
        library = shared + _draw_library(rng, classes_per_task - n_shared, bands)
        order = rng.permutation(classes_per_task)
        labels = np.zeros((size, size), dtype=np.int64)
        for bi in range(grid):
            for bj in range(grid):
                cls = int(order[(bi * grid + bj) % classes_per_task]) + 1
                labels[edges[bi]:edges[bi + 1], edges[bj]:edges[bj + 1]] = cls
        spectra = np.stack(library)  # K x bands
        data = spectra[labels - 1].astype(np.float64)
        if noise_sigma > 0:
            data = data + rng.normal(0.0, noise_sigma, data.shape)
        scenes.append((HyperCube(data.astype(np.float32)), LabelRaster(labels)))
    return scenes
