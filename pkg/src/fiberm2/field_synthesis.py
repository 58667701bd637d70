"""Modal superposition, intensity rendering and the multiplicative noise model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import check_images
from .fiber_modes import Grid

__all__ = [
    "CASES",
    "ModalVector",
    "ComplexField",
    "IntensityImage",
    "derive_rng",
    "superpose",
    "intensity",
    "sample_modal_vector",
    "sample_modal_batch",
    "add_noise",
    "normalize_for_input",
    "PeakNormalizer",
    "MultiplicativeNoise",
]

CASES = (3, 5, 6, 8, 10)

# spawn-key tags keeping independent random streams apart
STREAM_TRAIN = 0
STREAM_TEST = 1
STREAM_NOISE = 2


def derive_rng(master_seed: int, *key: int) -> np.random.Generator:
    """Independent PCG64 stream for ``(master_seed, *key)``.

    Streams are derived with :class:`numpy.random.SeedSequence` using ``key``
    as the spawn key, so ``(seed, epoch, index)`` tuples never collide the
    way ``seed ^ index`` would.
    """
    if master_seed < 0 or any(k < 0 for k in key):
        raise ValueError("seeds and stream keys must be non-negative")
    ss = np.random.SeedSequence(int(master_seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def _as_rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return np.random.default_rng(rng)


@dataclass(frozen=True, eq=False)
class ModalVector:
    rho: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.rho, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "theta", theta)
        if rho.ndim != 1 or rho.shape != theta.shape:
            raise ValueError(f"rho {rho.shape} and theta {theta.shape} must be equal 1-D")
        if np.any(rho < 0):
            raise ValueError("amplitudes must be non-negative")
        if abs(np.sum(rho ** 2) - 1.0) > 1e-9:
            raise ValueError(f"sum of rho^2 must be 1, got {np.sum(rho ** 2)!r}")
        if np.any(np.abs(theta) > math.pi):
            raise ValueError("phases must lie in [-pi, pi]")

    @property
    def n_modes(self) -> int:
        return self.rho.size

    @property
    def coefficients(self) -> np.ndarray:
        return self.rho * np.exp(1j * self.theta)

    def to_array(self) -> np.ndarray:
        return np.concatenate([self.rho, self.theta])

    @classmethod
    def from_array(cls, arr) -> "ModalVector":
        arr = np.asarray(arr, dtype=float)
        n = arr.size // 2
        return cls(arr[:n], arr[n:])


@dataclass(frozen=True, eq=False)
class ComplexField:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=complex)
        object.__setattr__(self, "values", values)
        if values.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"field shape {values.shape} does not match grid n={self.grid.n}")
        if not np.all(np.isfinite(values)):
            raise ValueError("field contains non-finite samples")

    @property
    def power(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2) * self.grid.cell_area)


@dataclass(frozen=True, eq=False)
class IntensityImage:
    values: np.ndarray
    grid: Grid

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "values", values)
        if values.shape != (self.grid.n, self.grid.n):
            raise ValueError(f"image shape {values.shape} does not match grid n={self.grid.n}")
        if np.any(values < 0):
            raise ValueError("intensity must be non-negative")


def superpose(modes, mv: ModalVector, grid: Grid) -> ComplexField:
    """Complex sum of ``rho_n exp(i theta_n) psi_n`` over the mode stack."""
    modes = np.asarray(modes)
    if modes.ndim != 3 or modes.shape[0] != mv.n_modes:
        raise ValueError(
            f"{mv.n_modes} coefficients for a mode stack of shape {modes.shape}"
        )
    if modes.shape[1:] != (grid.n, grid.n):
        raise ValueError(f"mode stack {modes.shape[1:]} does not match grid n={grid.n}")
    values = np.tensordot(mv.coefficients, modes, axes=1)
    return ComplexField(values, grid)


def intensity(field: ComplexField) -> IntensityImage:
    v = field.values
    return IntensityImage(v.real ** 2 + v.imag ** 2, field.grid)


def sample_modal_vector(n_modes: int, rng) -> ModalVector:
    """Uniform amplitudes normalised onto the unit sphere, uniform phases.

    ``a_n ~ U[0, 1]`` is drawn first, then ``theta_n ~ U[-pi, pi]``; the draw
    order is part of the reproducibility contract.
    """
    if n_modes not in CASES:
        raise ValueError(f"mode count must be one of {CASES}, got {n_modes}")
    rng = _as_rng(rng)
    while True:
        a = rng.uniform(0.0, 1.0, n_modes)
        norm = math.sqrt(float(np.sum(a * a)))
        if norm > 0.0:
            break
    theta = rng.uniform(-math.pi, math.pi, n_modes)
    return ModalVector(a / norm, theta)


def sample_modal_batch(n_modes: int, master_seed: int, keys) -> np.ndarray:
    """Coefficient matrix ``(len(keys), n_modes)`` for a list of stream keys."""
    out = np.empty((len(keys), n_modes), dtype=complex)
    for i, key in enumerate(keys):
        out[i] = sample_modal_vector(n_modes, derive_rng(master_seed, *key)).coefficients
    return out


def add_noise(img: IntensityImage, sigma: float, rng) -> IntensityImage:
    """Multiply every pixel by ``1 + sigma * N(0, 1)`` and clamp at zero."""
    if sigma < 0:
        raise ValueError(f"noise sigma must be >= 0, got {sigma}")
    if sigma == 0:
        return IntensityImage(img.values.copy(), img.grid)
    noisy = _noisy(img.values, sigma, _as_rng(rng))
    return IntensityImage(noisy, img.grid)


def _noisy(values: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    factor = 1.0 + sigma * rng.standard_normal(values.shape)
    return np.maximum(values * factor, 0.0)


def normalize_for_input(img) -> np.ndarray:
    """Divide by the peak pixel so the image spans ``[0, 1]``."""
    values = img.values if isinstance(img, IntensityImage) else np.asarray(img, dtype=float)
    peak = float(np.max(values))
    if not peak > 0:
        raise ValueError("image has no positive pixel")
    return values / peak


class PeakNormalizer(TransformerMixin, BaseEstimator):
    """Stateless transformer scaling each image in a stack to unit peak."""

    def fit(self, X, y=None):
        X = check_images(X)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        X = check_images(X)
        peaks = X.max(axis=(1, 2), keepdims=True)
        if np.any(peaks <= 0):
            raise ValueError("image has no positive pixel")
        return X / peaks


class MultiplicativeNoise(TransformerMixin, BaseEstimator):
    """Apply the ``1 + sigma N(0,1)`` pixel noise to each image of a stack.

    Each call to ``transform`` draws image ``i`` from stream
    ``(random_state, STREAM_NOISE, i)``, so transforming the same stack twice
    gives identical output.
    """

    def __init__(self, sigma=0.0, random_state=0, renormalize=True):
        self.sigma = sigma
        self.random_state = random_state
        self.renormalize = renormalize

    def fit(self, X, y=None):
        if self.sigma < 0:
            raise ValueError(f"noise sigma must be >= 0, got {self.sigma}")
        X = check_images(X)
        self.n_features_in_ = X.shape[1] * X.shape[2]
        return self

    def transform(self, X):
        X = check_images(X)
        if self.sigma == 0:
            return X.copy()
        out = np.empty_like(X)
        for i, img in enumerate(X):
            rng = derive_rng(self.random_state, STREAM_NOISE, i)
            out[i] = _noisy(img, self.sigma, rng)
            if self.renormalize:
                peak = out[i].max()
                if peak > 0:
                    out[i] /= peak
        return out
