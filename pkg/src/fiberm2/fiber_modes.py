"""Weakly-guiding LP modes of a step-index fiber.

Lengths are in micrometres throughout. Sampled fields are indexed
``values[iy, ix]`` so the x axis runs along array columns.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.optimize import brentq
from scipy.special import jv, kv

__all__ = [
    "FiberSpec",
    "LPMode",
    "Grid",
    "ModeSolveError",
    "v_number",
    "solve_modes",
    "mode_field",
    "mode_fields",
    "mode_orthogonality_check",
    "DEFAULT_FIBER",
    "EXPERIMENT_FIBER",
]

SCAN_STEP = 0.005
ROOT_XTOL = 1e-13
RESIDUAL_TOL = 1e-8
W_MIN = 1e-250
SMALL_W = 0.05


class ModeSolveError(RuntimeError):
    """Raised when the dispersion relation cannot be solved."""


@dataclass(frozen=True)
class FiberSpec:
    core_radius: float
    numerical_aperture: float
    wavelength: float

    def __post_init__(self):
        if not self.core_radius > 0:
            raise ValueError(f"core_radius must be > 0, got {self.core_radius}")
        if not 0 < self.numerical_aperture < 1:
            raise ValueError(
                f"numerical_aperture must lie in (0, 1), got {self.numerical_aperture}"
            )
        if not self.wavelength > 0:
            raise ValueError(f"wavelength must be > 0, got {self.wavelength}")
        v = v_number(self)
        if not (math.isfinite(v) and v > 0):
            raise ValueError(f"V-number must be finite and positive, got {v}")

    @property
    def v(self) -> float:
        return v_number(self)

    @classmethod
    def from_diameter(cls, core_diameter, numerical_aperture, wavelength):
        return cls(core_diameter / 2.0, numerical_aperture, wavelength)


@dataclass(frozen=True)
class LPMode:
    l: int
    m: int
    parity: str
    u: float
    w: float

    def __post_init__(self):
        if self.l < 0 or self.m < 1:
            raise ValueError(f"invalid mode indices l={self.l}, m={self.m}")
        if self.parity not in ("even", "odd"):
            raise ValueError(f"parity must be 'even' or 'odd', got {self.parity!r}")
        if self.l == 0 and self.parity != "even":
            raise ValueError("LP0m modes have no odd member")
        if not (self.u > 0 and self.w > 0):
            raise ValueError("eigenvalues u and w must be positive")

    @property
    def name(self) -> str:
        suffix = "" if self.l == 0 else ("e" if self.parity == "even" else "o")
        return f"LP{self.l}{self.m}{suffix}"

    def to_dict(self) -> dict:
        return {"name": self.name, "l": self.l, "m": self.m, "parity": self.parity,
                "u": self.u, "w": self.w}


@dataclass(frozen=True)
class Grid:
    """Square uniform grid centred on the fiber axis.

    Sample ``i`` sits at ``(i - n//2) * spacing``, so the axis itself is
    sampled and the layout matches ``numpy.fft.fftshift`` ordering.
    """

    n: int
    half_width: float

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 32:
            raise ValueError(f"grid needs n >= 32 samples per axis, got {self.n}")
        if self.n % 2:
            raise ValueError(f"grid size must be even, got {self.n}")
        if not self.half_width > 0:
            raise ValueError(f"half_width must be > 0, got {self.half_width}")

    @classmethod
    def for_fiber(cls, spec: FiberSpec, n: int = 128, extent: float = 3.0) -> "Grid":
        """Grid whose half-width is ``extent`` core radii."""
        return cls(n, extent * spec.core_radius)

    @property
    def spacing(self) -> float:
        return 2.0 * self.half_width / self.n

    @property
    def cell_area(self) -> float:
        return self.spacing ** 2

    @property
    def coords(self) -> np.ndarray:
        return (np.arange(self.n) - self.n // 2) * self.spacing

    def mesh(self):
        """Return ``(X, Y)`` coordinate arrays indexed ``[iy, ix]``."""
        c = self.coords
        return np.meshgrid(c, c, indexing="xy")

    def padded(self, factor: int) -> "Grid":
        return Grid(self.n * factor, self.half_width * factor)

    def check_contains(self, spec: FiberSpec):
        if self.half_width < spec.core_radius:
            raise ValueError(
                f"grid half_width {self.half_width} um is smaller than the core radius "
                f"{spec.core_radius} um"
            )


def v_number(spec: FiberSpec) -> float:
    """Normalised frequency ``2 pi a NA / lambda``."""
    return 2.0 * math.pi * spec.core_radius * spec.numerical_aperture / spec.wavelength


# 25 um core, NA 0.08 at 1064 nm: ten LP modes.
DEFAULT_FIBER = FiberSpec(12.5, 0.08, 1.064)
# 25 um core, NA 0.065 at 1064 nm: six LP modes, V = 4.80.
EXPERIMENT_FIBER = FiberSpec(12.5, 0.065, 1.064)


def _dispersion_sides(l: int, u: float, v: float, w: float | None = None) -> tuple[float, float]:
    if w is None:
        w = math.sqrt(max(v * v - u * u, 0.0))
    lhs = u * jv(l + 1, u) / jv(l, u)
    rhs = w * kv(l + 1, w) / kv(l, w)
    return lhs, rhs


def dispersion_residual(l: int, u: float, v: float, w: float | None = None) -> float:
    """Relative mismatch of ``u J_{l+1}/J_l = w K_{l+1}/K_l`` at ``u``.

    Pass ``w`` explicitly for modes so close to cutoff that ``sqrt(v^2 - u^2)``
    loses it to rounding.
    """
    lhs, rhs = _dispersion_sides(l, u, v, w)
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs))


def _roots_for_order(l: int, v: float) -> list[float]:
    def f(u):
        lhs, rhs = _dispersion_sides(l, u, v)
        return lhs - rhs

    n_steps = max(int(math.ceil(v / SCAN_STEP)), 2)
    # keep w strictly positive at the upper end
    lattice = np.linspace(v * 1e-9, v * (1.0 - 1e-12), n_steps + 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = np.array([f(u) for u in lattice])
        j_l = jv(l, lattice)

    roots = []
    for i in range(len(lattice) - 1):
        lo, hi = lattice[i], lattice[i + 1]
        f_lo, f_hi = vals[i], vals[i + 1]
        if not (np.isfinite(f_lo) and np.isfinite(f_hi)):
            continue
        if f_lo == 0.0:
            roots.append((float(lo), math.sqrt(v * v - lo * lo)))
            continue
        if np.sign(f_lo) == np.sign(f_hi):
            continue
        # sign flips across a zero of J_l are poles of the left-hand side
        if np.sign(j_l[i]) != np.sign(j_l[i + 1]):
            continue
        w_hi = math.sqrt(v * v - hi * hi)
        try:
            if w_hi < SMALL_W:
                # sqrt(v^2 - u^2) loses w to cancellation here; solve for w instead
                w = brentq(lambda t: _mismatch_w(l, v, t), w_hi, math.sqrt(v * v - lo * lo),
                           xtol=1e-300, rtol=4 * np.finfo(float).eps, maxiter=400)
                root = math.sqrt(v * v - w * w)
            else:
                root = brentq(f, lo, hi, xtol=ROOT_XTOL, rtol=4 * np.finfo(float).eps,
                              maxiter=200)
                w = math.sqrt(v * v - root * root)
        except (ValueError, RuntimeError) as exc:
            raise ModeSolveError(
                f"could not refine LP{l}x root in [{lo:.6f}, {hi:.6f}]: {exc}"
            ) from exc
        if dispersion_residual(l, root, v, w) >= RESIDUAL_TOL:
            raise ModeSolveError(
                f"LP{l}x root at u={root:.12f} has residual "
                f"{dispersion_residual(l, root, v, w):.3e}"
            )
        roots.append((float(root), w))
    roots.extend(_roots_near_cutoff(l, v, lattice[-1]))
    return roots


def _mismatch_w(l: int, v: float, w: float) -> float:
    lhs, rhs = _dispersion_sides(l, math.sqrt(v * v - w * w), v, w)
    return lhs - rhs


def _roots_near_cutoff(l: int, v: float, u_end: float) -> list[tuple[float, float]]:
    """Roots with ``u`` beyond the last lattice node, searched in log ``w``.

    Just above an LP0m cutoff the right-hand side vanishes only like
    ``1/ln(1/w)``, so the root can sit at ``w ~ 1e-10`` where ``u`` equals
    ``v`` to double precision.
    """
    w_end = math.sqrt(v * v - u_end * u_end)
    ws = np.geomspace(w_end, W_MIN, 200)
    with np.errstate(divide="ignore", invalid="ignore"):
        vals = [_mismatch_w(l, v, w) for w in ws]
    out = []
    for i in range(len(ws) - 1):
        hi, lo = ws[i], ws[i + 1]
        f_hi, f_lo = vals[i], vals[i + 1]
        if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or np.sign(f_lo) == np.sign(f_hi):
            continue
        if np.sign(jv(l, math.sqrt(v * v - hi * hi))) != np.sign(jv(l, v)):
            continue
        w = brentq(lambda t: _mismatch_w(l, v, t), lo, hi, xtol=1e-300,
                   rtol=4 * np.finfo(float).eps, maxiter=400)
        u = math.sqrt(v * v - w * w)
        if dispersion_residual(l, u, v, w) >= RESIDUAL_TOL:
            raise ModeSolveError(f"LP{l}x near-cutoff root at w={w:.3e} did not converge")
        out.append((u, w))
    return out


@lru_cache(maxsize=64)
def _solve_cached(core_radius, numerical_aperture, wavelength):
    spec = FiberSpec(core_radius, numerical_aperture, wavelength)
    v = v_number(spec)
    found = []
    for l in range(0, 64):
        # LP_l1 cutoff lies above the first zero of J_{l-1}, which exceeds l - 1
        if l >= 2 and l - 1 >= v:
            break
        roots = _roots_for_order(l, v)
        if not roots:
            if l >= 1:
                break
            continue
        for m, (u, w) in enumerate(roots, start=1):
            found.append((u, l, m, w))
    if not found:
        raise ModeSolveError(f"no guided mode found for V = {v:.6f}")

    found.sort()
    modes = []
    for u, l, m, w in found:
        if l == 0:
            modes.append(LPMode(l, m, "even", u, w))
        else:
            modes.append(LPMode(l, m, "even", u, w))
            modes.append(LPMode(l, m, "odd", u, w))
    return tuple(modes)


def solve_modes(spec: FiberSpec) -> list[LPMode]:
    """All guided LP modes, ordered by increasing ``u`` (decreasing propagation constant).

    Modes with ``l >= 1`` appear as an even/odd pair sharing ``u`` and ``w``.
    For the ten-mode fiber the order is LP01, LP11e, LP11o, LP21e, LP21o,
    LP02, LP31e, LP31o, LP12e, LP12o.
    """
    return list(_solve_cached(spec.core_radius, spec.numerical_aperture, spec.wavelength))


def _check_mode(mode: LPMode, spec: FiberSpec):
    v = v_number(spec)
    if abs(mode.u ** 2 + mode.w ** 2 - v ** 2) > 1e-8 * v ** 2:
        raise ValueError(
            f"{mode.name} (u={mode.u}, w={mode.w}) does not belong to a fiber with V={v}"
        )
    if dispersion_residual(mode.l, mode.u, v, mode.w) >= RESIDUAL_TOL:
        raise ValueError(f"{mode.name} is not a solution of the dispersion relation")


def radial_profile(mode: LPMode, r_over_a: np.ndarray) -> np.ndarray:
    r = np.asarray(r_over_a, dtype=float)
    out = np.empty_like(r)
    core = r <= 1.0
    out[core] = jv(mode.l, mode.u * r[core]) / jv(mode.l, mode.u)
    clad = ~core
    out[clad] = kv(mode.l, mode.w * r[clad]) / kv(mode.l, mode.w)
    return out


def _unnormalized_field(mode: LPMode, spec: FiberSpec, grid: Grid) -> np.ndarray:
    x, y = grid.mesh()
    r = np.hypot(x, y) / spec.core_radius
    phi = np.arctan2(y, x)
    azimuth = np.cos(mode.l * phi) if mode.parity == "even" else np.sin(mode.l * phi)
    return radial_profile(mode, r) * azimuth


def mode_field(mode: LPMode, spec: FiberSpec, grid: Grid) -> np.ndarray:
    """Sampled transverse field of ``mode`` scaled to unit discrete power."""
    _check_mode(mode, spec)
    grid.check_contains(spec)
    psi = _unnormalized_field(mode, spec, grid)
    power = np.sum(psi * psi) * grid.cell_area
    return psi / math.sqrt(power)


@lru_cache(maxsize=32)
def _mode_stack(spec: FiberSpec, grid: Grid, count: int) -> np.ndarray:
    modes = solve_modes(spec)
    if count > len(modes):
        raise ValueError(
            f"fiber with V={spec.v:.3f} guides {len(modes)} modes, {count} requested"
        )
    stack = np.stack([mode_field(m, spec, grid) for m in modes[:count]])
    stack.setflags(write=False)
    return stack


def mode_fields(spec: FiberSpec, grid: Grid, count: int | None = None) -> np.ndarray:
    """Stack of the first ``count`` normalised mode fields, shape ``(count, n, n)``.

    Results are cached and returned read-only.
    """
    if count is None:
        count = len(solve_modes(spec))
    return _mode_stack(spec, grid, int(count))


def mode_orthogonality_check(fields, grid: Grid) -> np.ndarray:
    """Gram matrix of discrete inner products ``sum(conj(a) * b) dx dy``."""
    fields = [np.asarray(f) for f in fields]
    if not fields:
        raise ValueError("need at least one field")
    for f in fields:
        if f.shape != (grid.n, grid.n):
            raise ValueError(f"field shape {f.shape} does not match grid {grid.n}x{grid.n}")
    flat = np.stack([f.ravel() for f in fields])
    gram = np.conj(flat) @ flat.T * grid.cell_area
    if not np.iscomplexobj(gram):
        return gram
    return gram.real if np.allclose(gram.imag, 0.0) else gram
