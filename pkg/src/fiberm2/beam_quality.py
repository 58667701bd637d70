"""Beam propagation factor of a sampled complex field.

Two independent routes are provided. :func:`m2_direct` evaluates the
second-moment formulas on the near field alone, using spectral derivatives.
:func:`m2_vcm` propagates the field through free space with the angular
spectrum method and fits the caustic ``sigma^2(z)``. All integrals are grid
Riemann sums.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .field_synthesis import ComplexField
from .fiber_modes import Grid

__all__ = [
    "NumericalError",
    "FieldContainmentError",
    "WindowOverflowError",
    "MomentSet",
    "M2Result",
    "CausticFit",
    "spectral_derivative",
    "moments",
    "m2_direct",
    "propagate",
    "default_planes",
    "m2_vcm",
    "m2_effective",
    "prediction_error",
    "ModalM2",
]

CONTAINMENT_TOL = 1e-6
RADICAND_TOL = 1e-9
CAUSTIC_RESIDUAL_TOL = 1e-4


class NumericalError(ArithmeticError):
    """A computation left its domain of validity (negative radicand, bad fit)."""


class FieldContainmentError(ValueError):
    """The field is not contained in its sampling window."""


class WindowOverflowError(FieldContainmentError):
    """A propagated field reached the edge of the padded window."""


@dataclass(frozen=True)
class MomentSet:
    centroid_x: float
    centroid_y: float
    sigma2_x: float
    sigma2_y: float
    a_x: float
    a_y: float
    b_x: float
    b_y: float

    def axis(self, k: str):
        """``(centroid, sigma2, A, B)`` for axis ``'x'`` or ``'y'``."""
        if k not in ("x", "y"):
            raise ValueError(f"axis must be 'x' or 'y', got {k!r}")
        return tuple(getattr(self, f"{name}_{k}") for name in ("centroid", "sigma2", "a", "b"))


@dataclass(frozen=True, eq=False)
class CausticFit:
    z: np.ndarray
    sigma2: np.ndarray
    p0: float
    p1: float
    p2: float
    residual_norm: float

    @property
    def discriminant(self) -> float:
        return self.p0 * self.p2 - self.p1 ** 2 / 4.0

    @property
    def waist_position(self) -> float:
        return -self.p1 / (2.0 * self.p2)


@dataclass(frozen=True)
class M2Result:
    m2_x: float
    m2_y: float
    method: str
    m2_eff: float = dc_field(init=False)
    caustics: tuple | None = None
    elapsed: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "m2_eff", math.sqrt(self.m2_x * self.m2_y))

    def to_dict(self) -> dict:
        out = {"method": self.method, "m2_x": self.m2_x, "m2_y": self.m2_y,
               "m2_eff": self.m2_eff}
        if self.elapsed is not None:
            out["elapsed_s"] = self.elapsed
        return out


def _axis_index(axis: str) -> int:
    if axis == "x":
        return 1
    if axis == "y":
        return 0
    raise ValueError(f"axis must be 'x' or 'y', got {axis!r}")


def _check_contained(values: np.ndarray, tol: float = CONTAINMENT_TOL):
    inten = np.abs(values) ** 2
    peak = inten.max()
    if peak == 0:
        return
    edge = max(inten[0].max(), inten[-1].max(), inten[:, 0].max(), inten[:, -1].max())
    if edge > tol * peak:
        raise FieldContainmentError(
            f"field not contained in window: edge intensity {edge / peak:.2e} of peak"
        )


def _spectral_derivative_array(values: np.ndarray, spacing: float, axis: int) -> np.ndarray:
    n = values.shape[axis]
    freq = np.fft.fftfreq(n, d=spacing)
    ik = 2j * np.pi * freq
    if n % 2 == 0:
        # the Nyquist bin has no signed frequency; zero it to keep real fields real
        ik[n // 2] = 0.0
    shape = [1] * values.ndim
    shape[axis] = n
    spec = np.fft.fft(values, axis=axis)
    return np.fft.ifft(spec * ik.reshape(shape), axis=axis)


def spectral_derivative(field: ComplexField, axis: str, check: bool = True) -> ComplexField:
    """``dE/dx`` or ``dE/dy`` by multiplication with ``i 2 pi f`` in Fourier space."""
    ax = _axis_index(axis)
    if check:
        _check_contained(field.values)
    d = _spectral_derivative_array(field.values, field.grid.spacing, ax)
    return ComplexField(d, field.grid)


def moments(field: ComplexField, check: bool = True) -> MomentSet:
    """Centroids, variances and the A/B derivative integrals for both axes.

    ``A_k`` is stored as the real number ``Im{2 sum (k - <k>) E dE*/dk}`` and
    ``B_k = sum |dE/dk|^2 - (Im{2 sum E dE*/dk})^2 / 4``; the field is scaled
    to unit power first.
    """
    values = field.values
    grid = field.grid
    da = grid.cell_area
    power = float(np.sum(np.abs(values) ** 2) * da)
    if not power > 0:
        raise ValueError("zero field has no moments")
    if check:
        _check_contained(values)
    e = values / math.sqrt(power)
    inten = np.abs(e) ** 2
    c = grid.coords
    out = {}
    for k, ax in (("x", 1), ("y", 0)):
        coord = c[None, :] if ax == 1 else c[:, None]
        centroid = float(np.sum(coord * inten) * da)
        dk = coord - centroid
        sigma2 = float(np.sum(dk * dk * inten) * da)
        de = _spectral_derivative_array(e, grid.spacing, ax)
        cross = e * np.conj(de)
        a = 2.0 * float(np.sum(dk * cross).imag * da)
        tilt = 2.0 * float(np.sum(cross).imag * da)
        b = float(np.sum(np.abs(de) ** 2) * da) - 0.25 * tilt ** 2
        out[k] = (centroid, sigma2, a, b)
    return MomentSet(
        centroid_x=out["x"][0], centroid_y=out["y"][0],
        sigma2_x=out["x"][1], sigma2_y=out["y"][1],
        a_x=out["x"][2], a_y=out["y"][2],
        b_x=out["x"][3], b_y=out["y"][3],
    )


def _m2_from_moments(sigma2, a, b):
    radicand = 4.0 * b * sigma2 - a * a
    if np.any(radicand < -RADICAND_TOL):
        raise NumericalError(f"negative M^2 radicand {np.min(radicand):.3e}")
    return np.sqrt(np.maximum(radicand, 0.0))


def m2_direct(field: ComplexField, check: bool = True) -> M2Result:
    """``M_k^2 = sqrt(4 B_k sigma_k^2 - A_k^2)`` from the near field alone."""
    ms = moments(field, check=check)
    mx = float(_m2_from_moments(ms.sigma2_x, ms.a_x, ms.b_x))
    my = float(_m2_from_moments(ms.sigma2_y, ms.a_y, ms.b_y))
    return M2Result(mx, my, "direct")


def _pad(field: ComplexField, factor: int) -> ComplexField:
    if factor == 1:
        return field
    if factor < 1 or int(factor) != factor:
        raise ValueError(f"pad factor must be a positive integer, got {factor}")
    n = field.grid.n
    big = field.grid.padded(factor)
    out = np.zeros((big.n, big.n), dtype=complex)
    # keep the axis sample at index n//2 of the new grid
    off = big.n // 2 - n // 2
    out[off:off + n, off:off + n] = field.values
    return ComplexField(out, big)


def _transfer_function(grid: Grid, dz: float, wavelength: float) -> np.ndarray:
    f = np.fft.fftfreq(grid.n, d=grid.spacing)
    fx = f[None, :]
    fy = f[:, None]
    kz2 = (1.0 / wavelength) ** 2 - fx * fx - fy * fy
    prop = kz2 > 0
    kz = 2.0 * np.pi * np.sqrt(np.where(prop, kz2, 0.0))
    return np.where(prop, np.exp(1j * dz * kz), 0.0)


def propagate(field: ComplexField, dz: float, wavelength: float, pad_factor: int = 2,
              check: bool = True) -> ComplexField:
    """Angular-spectrum free-space propagation over ``dz``.

    The field is zero-padded by ``pad_factor`` first and the result lives on
    the padded grid. Evanescent components are dropped. With ``check`` set a
    result whose edge intensity exceeds ``1e-6`` of its peak raises
    :class:`WindowOverflowError`.
    """
    if not wavelength > 0:
        raise ValueError(f"wavelength must be > 0, got {wavelength}")
    padded = _pad(field, pad_factor)
    if dz == 0:
        return ComplexField(padded.values.copy(), padded.grid)
    spectrum = np.fft.fft2(np.fft.ifftshift(padded.values))
    spectrum *= _transfer_function(padded.grid, dz, wavelength)
    out = np.fft.fftshift(np.fft.ifft2(spectrum))
    if check:
        try:
            _check_contained(out)
        except FieldContainmentError as exc:
            raise WindowOverflowError(f"propagation by dz={dz} um overflowed: {exc}") from exc
    return ComplexField(out, padded.grid)


def _rayleigh_estimate(field: ComplexField, wavelength: float) -> float:
    """Shorter of the two axis Rayleigh ranges, from the angular spectrum."""
    e = field.values
    inten = np.abs(e) ** 2
    p = inten.sum()
    c = field.grid.coords
    spec = np.abs(np.fft.fft2(np.fft.ifftshift(e))) ** 2
    f = np.fft.fftfreq(field.grid.n, d=field.grid.spacing)
    s = spec.sum()
    ranges = []
    for ax in (1, 0):
        coord = c[None, :] if ax == 1 else c[:, None]
        fk = f[None, :] if ax == 1 else f[:, None]
        mean = np.sum(coord * inten) / p
        var = np.sum((coord - mean) ** 2 * inten) / p
        fmean = np.sum(fk * spec) / s
        fvar = np.sum((fk - fmean) ** 2 * spec) / s
        angle_var = wavelength ** 2 * fvar
        ranges.append(math.sqrt(var / angle_var))
    return min(ranges)


def default_planes(field: ComplexField, wavelength: float, count: int = 21,
                   span: float = 1.0) -> np.ndarray:
    """``count`` planes uniform over ``[-span z_R, +span z_R]`` about the facet."""
    z_r = _rayleigh_estimate(field, wavelength)
    return np.linspace(-span * z_r, span * z_r, count)


def _fit_caustic(z: np.ndarray, sigma2: np.ndarray) -> CausticFit:
    design = np.vander(z, 3, increasing=True)
    coef, *_ = np.linalg.lstsq(design, sigma2, rcond=None)
    resid = sigma2 - design @ coef
    return CausticFit(z=z.copy(), sigma2=sigma2.copy(), p0=float(coef[0]),
                      p1=float(coef[1]), p2=float(coef[2]),
                      residual_norm=float(np.linalg.norm(resid)))


def m2_vcm(field: ComplexField, wavelength: float, planes=None, pad_factor: int = 2,
           check: bool = True) -> M2Result:
    """Virtual caustic measurement.

    The field is propagated to each plane, the second moments are fitted with
    ``sigma^2(z) = p0 + p1 z + p2 z^2`` and ``M^2 = (4 pi / lambda)
    sqrt(p0 p2 - p1^2 / 4)``. The fits are returned in ``result.caustics``.
    """
    if planes is None:
        planes = default_planes(field, wavelength)
    z = np.asarray(planes, dtype=float)
    if z.ndim != 1 or z.size < 10:
        raise ValueError(f"need at least 10 caustic planes, got {z.size}")
    if check:
        _check_contained(field.values)
    padded = _pad(field, pad_factor)
    grid = padded.grid
    c = grid.coords
    spectrum = np.fft.fft2(np.fft.ifftshift(padded.values))
    s2 = np.empty((2, z.size))
    for j, dz in enumerate(z):
        out = np.fft.fftshift(np.fft.ifft2(spectrum * _transfer_function(grid, dz, wavelength)))
        if check:
            try:
                _check_contained(out)
            except FieldContainmentError as exc:
                raise WindowOverflowError(
                    f"caustic plane z={dz:.1f} um overflowed: {exc}"
                ) from exc
        inten = np.abs(out) ** 2
        p = inten.sum()
        px = inten.sum(axis=0) / p
        py = inten.sum(axis=1) / p
        for row, marg in ((0, px), (1, py)):
            mean = np.dot(c, marg)
            s2[row, j] = np.dot((c - mean) ** 2, marg)

    fits = []
    m2 = []
    for row, name in ((0, "x"), (1, "y")):
        fit = _fit_caustic(z, s2[row])
        rel = fit.residual_norm / float(np.mean(s2[row]))
        if check and rel > CAUSTIC_RESIDUAL_TOL:
            raise NumericalError(
                f"caustic fit residual {rel:.2e} along {name} exceeds {CAUSTIC_RESIDUAL_TOL}"
            )
        if fit.p2 <= 0 or fit.discriminant <= 0:
            raise NumericalError(
                f"caustic along {name} is not a diverging beam "
                f"(p2={fit.p2:.3e}, discriminant={fit.discriminant:.3e})"
            )
        fits.append(fit)
        m2.append(4.0 * math.pi / wavelength * math.sqrt(fit.discriminant))
    return M2Result(m2[0], m2[1], "vcm", caustics=tuple(fits))


def m2_effective(m2_x, m2_y):
    """Geometric mean ``sqrt(M_x^2 M_y^2)``."""
    m2_x = np.asarray(m2_x, dtype=float)
    m2_y = np.asarray(m2_y, dtype=float)
    if np.any(m2_x <= 0) or np.any(m2_y <= 0):
        raise ValueError("M^2 values must be positive")
    out = np.sqrt(m2_x * m2_y)
    return float(out) if out.ndim == 0 else out


def prediction_error(predicted, label):
    """``|predicted - label| / label`` elementwise."""
    predicted = np.asarray(predicted, dtype=float)
    label = np.asarray(label, dtype=float)
    if np.any(label <= 0):
        raise ValueError("label M^2 must be positive")
    out = np.abs(predicted - label) / label
    return float(out) if out.ndim == 0 else out


class ModalM2:
    """Direct M^2 for many superpositions of one fixed mode basis.

    Every integral in :func:`moments` is a Hermitian form in the modal
    coefficients, so the grid sums are done once per basis and each sample
    costs ``O(N^2)``. Results match :func:`m2_direct` on the superposed field
    to rounding.
    """

    def __init__(self, modes, grid: Grid, check: bool = True):
        psi = np.asarray(modes, dtype=float)
        if psi.ndim != 3 or psi.shape[1:] != (grid.n, grid.n):
            raise ValueError(f"mode stack {psi.shape} does not match grid n={grid.n}")
        if check:
            for p in psi:
                _check_contained(p)
        self.grid = grid
        self.n_modes = psi.shape[0]
        da = grid.cell_area
        c = grid.coords
        flat = psi.reshape(self.n_modes, -1)
        self._gram = flat @ flat.T * da
        self._forms = {}
        for k, ax in (("x", 1), ("y", 0)):
            coord = np.broadcast_to(c[None, :] if ax == 1 else c[:, None], psi.shape[1:])
            coord = coord.reshape(-1)
            dpsi = _spectral_derivative_array(psi, grid.spacing, ax + 1).real
            dflat = dpsi.reshape(self.n_modes, -1)
            self._forms[k] = {
                "k": (flat * coord) @ flat.T * da,
                "k2": (flat * coord * coord) @ flat.T * da,
                "d": dflat @ dflat.T * da,
                "g": flat @ dflat.T * da,
                "h": (flat * coord) @ dflat.T * da,
            }

    @staticmethod
    def _form(coef: np.ndarray, mat: np.ndarray) -> np.ndarray:
        # sum_mn c_m conj(c_n) M_mn for each row of coef
        return np.einsum("sm,mn,sn->s", coef, mat, np.conj(coef))

    def moments(self, coefficients) -> dict:
        coef = np.atleast_2d(np.asarray(coefficients, dtype=complex))
        if coef.shape[1] != self.n_modes:
            raise ValueError(f"expected {self.n_modes} coefficients, got {coef.shape[1]}")
        power = self._form(coef, self._gram).real
        if np.any(power <= 0):
            raise ValueError("zero field has no moments")
        out = {}
        for k, f in self._forms.items():
            centroid = self._form(coef, f["k"]).real / power
            sigma2 = self._form(coef, f["k2"]).real / power - centroid ** 2
            g = self._form(coef, f["g"]) / power
            h = self._form(coef, f["h"]) / power
            a = 2.0 * (h - centroid * g).imag
            b = self._form(coef, f["d"]).real / power - 0.25 * (2.0 * g.imag) ** 2
            out[k] = (centroid, sigma2, a, b)
        return out

    def m2(self, coefficients) -> np.ndarray:
        """``(n_samples, 2)`` array of ``(M_x^2, M_y^2)``."""
        mom = self.moments(coefficients)
        cols = [_m2_from_moments(mom[k][1], mom[k][2], mom[k][3]) for k in ("x", "y")]
        return np.stack(cols, axis=1)
