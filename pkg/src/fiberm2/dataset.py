"""Labelled beam-pattern datasets: generation, label scaling and on-disk format.

A dataset directory holds ``manifest.json`` plus three raw little-endian
arrays, all sample-major and row-major:

``images.f32``  float32, ``(count, res, res)`` peak-normalised intensity
``labels.f64``  float64, ``(count, 2)`` unscaled ``(M_x^2, M_y^2)``
``modal.f64``   float64, ``(count, 2 N)`` amplitudes followed by phases
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import warnings
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .beam_quality import ModalM2
from .field_synthesis import (
    CASES,
    STREAM_NOISE,
    STREAM_TEST,
    STREAM_TRAIN,
    ModalVector,
    derive_rng,
    sample_modal_vector,
)
from .fiber_modes import DEFAULT_FIBER, FiberSpec, Grid, mode_fields

__all__ = [
    "FORMAT_VERSION",
    "SCALING_CONSTANTS",
    "DatasetError",
    "UnsupportedVersionError",
    "LabelRangeError",
    "SampleRecord",
    "DatasetManifest",
    "Dataset",
    "PatternGenerator",
    "scaling_constant",
    "scale_label",
    "unscale_label",
    "generate_dataset",
    "stream_online",
    "online_batches",
    "load_dataset",
    "load_arrays",
]

FORMAT_VERSION = 1
SCALING_CONSTANTS = {3: 3.0, 5: 3.0, 6: 4.5, 8: 4.5, 10: 4.5}
SPLITS = {"train": STREAM_TRAIN, "test": STREAM_TEST}
IMAGE_EXTENT = 3.0
LABEL_GRID_N = 128
LABEL_EXTENT = 6.0
SAMPLES_PER_EPOCH = 10000
M2_FLOOR = 1.0 - 1e-3

_FILES = {
    "images": ("images.f32", "<f4"),
    "labels": ("labels.f64", "<f8"),
    "modal": ("modal.f64", "<f8"),
}


class DatasetError(IOError):
    """Dataset files are missing, truncated or fail their checksum."""


class UnsupportedVersionError(DatasetError):
    pass


class LabelRangeError(ValueError):
    """A label lies outside the range allowed for its case."""


def scaling_constant(case: int) -> float:
    try:
        return SCALING_CONSTANTS[case]
    except KeyError:
        raise ValueError(f"case must be one of {CASES}, got {case}") from None


def scale_label(m2_pair, c: float, strict: bool = True) -> np.ndarray:
    """Divide ``(M_x^2, M_y^2)`` by the case constant ``c``.

    With ``strict`` a value above ``c`` raises :class:`LabelRangeError`.
    """
    if not c > 0:
        raise ValueError(f"scaling constant must be > 0, got {c}")
    m2 = np.asarray(m2_pair, dtype=float)
    if strict and np.any(m2 > c):
        raise LabelRangeError(f"M^2 value {np.max(m2):.4f} exceeds scaling constant {c}")
    return m2 / c


def unscale_label(pair, c: float) -> np.ndarray:
    """Inverse of :func:`scale_label`; warns when a result falls below M^2 = 1."""
    if not c > 0:
        raise ValueError(f"scaling constant must be > 0, got {c}")
    out = np.asarray(pair, dtype=float) * c
    if np.any(out < M2_FLOOR):
        warnings.warn(
            f"unscaled M^2 {np.min(out):.4f} is below the diffraction limit 1.0",
            RuntimeWarning,
            stacklevel=2,
        )
    return out


@dataclass(frozen=True, eq=False)
class SampleRecord:
    image: np.ndarray
    label_m2: np.ndarray
    modal_vector: ModalVector
    case_id: int
    seed_index: int
    epoch: int = 0

    @property
    def m2_eff(self) -> float:
        return math.sqrt(float(self.label_m2[0] * self.label_m2[1]))


@dataclass
class DatasetManifest:
    case_id: int
    count: int
    resolution: int
    grid_half_width: float
    fiber: dict
    noise_sigma: float
    master_seed: int
    scaling_constant: float
    split: str = "train"
    epoch: int = 0
    label_grid: dict | None = None
    checksums: dict | None = None
    format_version: int = FORMAT_VERSION
    byte_order: str = "little"
    image_normalization: str = "peak"
    files: dict | None = None

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        version = d.get("format_version")
        if version != FORMAT_VERSION:
            raise UnsupportedVersionError(
                f"dataset format version {version!r} is not supported "
                f"(expected {FORMAT_VERSION})"
            )
        known = set(cls.__dataclass_fields__)
        return cls(**{k: v for k, v in d.items() if k in known})

    @property
    def fiber_spec(self) -> FiberSpec:
        return FiberSpec(**self.fiber)


@dataclass(frozen=True, eq=False)
class Dataset:
    manifest: DatasetManifest
    images: np.ndarray
    labels: np.ndarray
    modal: np.ndarray

    def __len__(self):
        return self.images.shape[0]

    @property
    def m2_eff(self) -> np.ndarray:
        return np.sqrt(self.labels[:, 0] * self.labels[:, 1])


class PatternGenerator:
    """Renders images and direct-M^2 labels for one case of one fiber.

    Images are sampled on ``resolution`` points over ``image_extent`` core
    radii. Labels come from a separate, wider grid so slowly decaying
    near-cutoff modes stay inside the window.
    """

    def __init__(self, case: int, spec: FiberSpec = DEFAULT_FIBER, resolution: int = 64,
                 image_extent: float = IMAGE_EXTENT, label_grid: Grid | None = None):
        self.case = int(case)
        self.c = scaling_constant(self.case)
        self.spec = spec
        self.image_grid = Grid.for_fiber(spec, n=resolution, extent=image_extent)
        self.label_grid = label_grid or Grid.for_fiber(spec, n=LABEL_GRID_N, extent=LABEL_EXTENT)
        self.image_modes = mode_fields(spec, self.image_grid, self.case)
        self.label_modes = mode_fields(spec, self.label_grid, self.case)
        self.labeler = _labeler(spec, self.label_grid, self.case)

    @property
    def resolution(self) -> int:
        return self.image_grid.n

    def modal_vectors(self, master_seed: int, stream: int, epoch: int, indices):
        return [sample_modal_vector(self.case, derive_rng(master_seed, stream, epoch, int(i)))
                for i in indices]

    def labels(self, coefficients) -> np.ndarray:
        return self.labeler.m2(coefficients)

    def images(self, coefficients, noise_sigma: float = 0.0, noise_rngs=None) -> np.ndarray:
        """Peak-normalised intensity stack for coefficient rows, float64."""
        coef = np.atleast_2d(np.asarray(coefficients, dtype=complex))
        field = np.tensordot(coef, self.image_modes, axes=1)
        inten = field.real ** 2 + field.imag ** 2
        if noise_sigma > 0:
            for i, rng in enumerate(noise_rngs):
                factor = 1.0 + noise_sigma * rng.standard_normal(inten.shape[1:])
                inten[i] = np.maximum(inten[i] * factor, 0.0)
        peaks = inten.max(axis=(1, 2), keepdims=True)
        return inten / peaks

    def batch(self, master_seed: int, stream: int, epoch: int, indices,
              noise_sigma: float = 0.0, label_overflow: str = "raise"):
        """``(images, labels, modal_vectors)`` for the given sample indices."""
        indices = list(indices)
        mvs = self.modal_vectors(master_seed, stream, epoch, indices)
        coef = np.stack([mv.coefficients for mv in mvs])
        labels = self.labels(coef)
        check_labels(labels, self.c, label_overflow, self.case)
        rngs = None
        if noise_sigma > 0:
            rngs = [derive_rng(master_seed, STREAM_NOISE, stream, epoch, int(i)) for i in indices]
        imgs = self.images(coef, noise_sigma, rngs)
        return imgs, labels, mvs


@lru_cache(maxsize=16)
def _labeler(spec: FiberSpec, grid: Grid, case: int) -> ModalM2:
    return ModalM2(mode_fields(spec, grid, case), grid)


@lru_cache(maxsize=16)
def _generator(case, spec, resolution, image_extent, label_grid):
    return PatternGenerator(case, spec, resolution, image_extent, label_grid)


def check_labels(labels, c: float, policy: str = "raise", case: int | None = None):
    """Validate direct-M^2 labels: each axis above the diffraction floor and
    the effective M^2 at most ``c``.

    ``policy`` is ``"raise"``, ``"warn"`` or ``"ignore"`` for the upper bound;
    values below the floor always raise since they indicate a numerical fault.
    """
    labels = np.atleast_2d(labels)
    if np.any(labels < M2_FLOOR):
        raise LabelRangeError(f"label M^2 {labels.min():.6f} is below the diffraction limit")
    eff = np.sqrt(labels[:, 0] * labels[:, 1])
    over = eff > c
    if np.any(over):
        msg = (f"{int(over.sum())} label(s) with effective M^2 up to {eff.max():.4f} exceed "
               f"the scaling constant {c} of case {case}")
        if policy == "raise":
            raise LabelRangeError(msg)
        if policy == "warn":
            warnings.warn(msg, RuntimeWarning, stacklevel=3)
        elif policy != "ignore":
            raise ValueError(f"unknown label overflow policy {policy!r}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def generate_dataset(case: int, count: int, master_seed: int, out_dir,
                     resolution: int = 64, noise_sigma: float = 0.0,
                     spec: FiberSpec = DEFAULT_FIBER, split: str = "train", epoch: int = 0,
                     image_extent: float = IMAGE_EXTENT, label_grid: Grid | None = None,
                     label_overflow: str = "raise", chunk: int = 1000) -> DatasetManifest:
    """Write ``count`` samples and a manifest into ``out_dir``.

    Sample ``i`` is drawn from stream ``(master_seed, split, epoch, i)``; the
    same sample is produced by :func:`stream_online` for that epoch.
    """
    if split not in SPLITS:
        raise ValueError(f"split must be one of {sorted(SPLITS)}, got {split!r}")
    if count < 1:
        raise ValueError("count must be positive")
    if noise_sigma < 0:
        raise ValueError("noise sigma must be >= 0")
    gen = _generator(case, spec, resolution, image_extent, label_grid)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    stream = SPLITS[split]

    paths = {k: out / name for k, (name, _) in _FILES.items()}
    handles = {k: open(p, "wb") for k, p in paths.items()}
    try:
        for start in range(0, count, chunk):
            idx = range(start, min(start + chunk, count))
            imgs, labels, mvs = gen.batch(master_seed, stream, epoch, idx, noise_sigma,
                                          label_overflow)
            modal = np.stack([mv.to_array() for mv in mvs])
            handles["images"].write(imgs.astype("<f4").tobytes())
            handles["labels"].write(labels.astype("<f8").tobytes())
            handles["modal"].write(modal.astype("<f8").tobytes())
    finally:
        for fh in handles.values():
            fh.close()

    manifest = DatasetManifest(
        case_id=int(case),
        count=int(count),
        resolution=int(resolution),
        grid_half_width=gen.image_grid.half_width,
        fiber={"core_radius": spec.core_radius,
               "numerical_aperture": spec.numerical_aperture,
               "wavelength": spec.wavelength},
        noise_sigma=float(noise_sigma),
        master_seed=int(master_seed),
        scaling_constant=gen.c,
        split=split,
        epoch=int(epoch),
        label_grid={"n": gen.label_grid.n, "half_width": gen.label_grid.half_width},
        checksums={_FILES[k][0]: _sha256(p) for k, p in paths.items()},
        files={
            _FILES["images"][0]: {"dtype": "<f4", "shape": [count, resolution, resolution]},
            _FILES["labels"][0]: {"dtype": "<f8", "shape": [count, 2]},
            _FILES["modal"][0]: {"dtype": "<f8", "shape": [count, 2 * int(case)]},
        },
    )
    tmp = out / "manifest.json.tmp"
    tmp.write_text(manifest.to_json(), encoding="utf-8")
    os.replace(tmp, out / "manifest.json")
    return manifest


def _manifest_path(path) -> Path:
    p = Path(path)
    return p / "manifest.json" if p.is_dir() else p


def read_manifest(path) -> DatasetManifest:
    mpath = _manifest_path(path)
    try:
        raw = json.loads(mpath.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DatasetError(f"no dataset manifest at {mpath}") from exc
    except json.JSONDecodeError as exc:
        raise DatasetError(f"manifest {mpath} is not valid JSON: {exc}") from exc
    return DatasetManifest.from_dict(raw)


def load_arrays(path) -> Dataset:
    """Verify checksums and sizes, then return all arrays of a dataset."""
    mpath = _manifest_path(path)
    manifest = read_manifest(mpath)
    root = mpath.parent
    arrays = {}
    for key, (name, dtype) in _FILES.items():
        fpath = root / name
        if not fpath.exists():
            raise DatasetError(f"missing data file {fpath}")
        expected = (manifest.checksums or {}).get(name)
        if expected is None:
            raise DatasetError(f"manifest has no checksum for {name}")
        if _sha256(fpath) != expected:
            raise DatasetError(f"checksum mismatch for {fpath}")
        shape = tuple(manifest.files[name]["shape"])
        data = np.fromfile(fpath, dtype=np.dtype(dtype))
        if data.size != int(np.prod(shape)):
            raise DatasetError(f"{fpath} holds {data.size} values, expected {np.prod(shape)}")
        arrays[key] = data.reshape(shape)
    return Dataset(manifest, arrays["images"], arrays["labels"], arrays["modal"])


def load_dataset(path):
    """Yield the stored :class:`SampleRecord` objects in order.

    All files are verified before the first record is produced.
    """
    ds = load_arrays(path)
    m = ds.manifest

    def records():
        for i in range(len(ds)):
            yield SampleRecord(
                image=ds.images[i],
                label_m2=ds.labels[i],
                modal_vector=ModalVector.from_array(ds.modal[i]),
                case_id=m.case_id,
                seed_index=i,
                epoch=m.epoch,
            )

    return records()


def online_batches(case: int, master_seed: int, epoch: int, count: int = SAMPLES_PER_EPOCH,
                   batch_size: int = 256, resolution: int = 64, spec: FiberSpec = DEFAULT_FIBER,
                   noise_sigma: float = 0.0, label_overflow: str = "raise",
                   image_extent: float = IMAGE_EXTENT):
    """Yield ``(images, labels)`` array chunks of one online training epoch."""
    gen = _generator(case, spec, resolution, image_extent, None)
    for start in range(0, count, batch_size):
        idx = range(start, min(start + batch_size, count))
        imgs, labels, _ = gen.batch(master_seed, STREAM_TRAIN, epoch, idx, noise_sigma,
                                    label_overflow)
        yield imgs, labels


def stream_online(case: int, master_seed: int, epoch_index: int,
                  count: int = SAMPLES_PER_EPOCH, resolution: int = 64,
                  spec: FiberSpec = DEFAULT_FIBER, noise_sigma: float = 0.0,
                  label_overflow: str = "raise", chunk: int = 256):
    """Yield freshly generated training records for one epoch.

    ``(epoch_index, i)`` fully determines record ``i``; epoch 0 reproduces
    :func:`generate_dataset` with the same seed and ``split="train"``.
    """
    gen = _generator(case, spec, resolution, IMAGE_EXTENT, None)
    for start in range(0, count, chunk):
        idx = range(start, min(start + chunk, count))
        imgs, labels, mvs = gen.batch(master_seed, STREAM_TRAIN, epoch_index, idx,
                                      noise_sigma, label_overflow)
        for j, i in enumerate(idx):
            yield SampleRecord(imgs[j], labels[j], mvs[j], int(case), i, int(epoch_index))
