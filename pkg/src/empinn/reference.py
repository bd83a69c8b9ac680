"""Reference solutions, the relative L2 metric and the plain-text grid format."""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .diffcore import ConfigurationError, Jet
from .pde import (
    AC_DIFFUSION,
    AC_REACTION,
    ADVECTION_BETA,
    HELMHOLTZ_A1,
    HELMHOLTZ_A2,
)


class UndefinedMetricError(ArithmeticError):
    pass


def relative_l2(u_pred, u_ref):
    u_pred = np.asarray(u_pred, dtype=np.float64)
    u_ref = np.asarray(u_ref, dtype=np.float64)
    if u_pred.shape != u_ref.shape:
        raise ConfigurationError(f"shape mismatch {u_pred.shape} vs {u_ref.shape}")
    ref_norm = np.linalg.norm(u_ref.ravel())
    if ref_norm == 0:
        raise UndefinedMetricError("reference field has zero norm")
    return float(np.linalg.norm((u_pred - u_ref).ravel()) / ref_norm)


# --------------------------------------------------------------------------
# exact solutions
# --------------------------------------------------------------------------


def exact_helmholtz(x, y, a1=HELMHOLTZ_A1, a2=HELMHOLTZ_A2):
    return np.sin(a1 * np.pi * np.asarray(x)) * np.sin(a2 * np.pi * np.asarray(y))


def exact_helmholtz_jet(x, y, layout, a1=HELMHOLTZ_A1, a2=HELMHOLTZ_A2):
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    wx, wy = a1 * np.pi, a2 * np.pi
    sx, cx, sy, cy = np.sin(wx * x), np.cos(wx * x), np.sin(wy * y), np.cos(wy * y)
    d1 = {"x": wx * cx * sy, "y": wy * sx * cy}
    d2 = {"x": -wx * wx * sx * sy, "y": -wy * wy * sx * sy}
    return Jet.from_parts(layout, sx * sy, {c: d1[c] for c in layout.coords}, {c: d2[c] for c in layout.second})


def exact_advection(t, x, beta=ADVECTION_BETA):
    """sin(x - beta t), evaluated on the periodic representative of x - beta t."""
    xi = np.mod(np.asarray(x, dtype=np.float64) - beta * np.asarray(t, dtype=np.float64), 2.0 * np.pi)
    return np.sin(xi)


def exact_advection_jet(t, x, layout, beta=ADVECTION_BETA):
    xi = np.asarray(x, dtype=np.float64) - beta * np.asarray(t, dtype=np.float64)
    s, c = np.sin(xi), np.cos(xi)
    d1 = {"t": -beta * c, "x": c}
    d2 = {"t": -beta * beta * s, "x": -s}
    return Jet.from_parts(layout, s, {k: d1[k] for k in layout.coords}, {k: d2[k] for k in layout.second})


# --------------------------------------------------------------------------
# Allen-Cahn spectral reference
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class AllenCahnGridSpec:
    """Spectral resolution and output sampling for the Allen-Cahn reference.

    The solve runs on ``n_modes`` equispaced nodes of [-1, 1); output is
    taken every ``n_modes // (n_x - 1)`` nodes plus the duplicated endpoint
    x = 1, at ``n_t`` equispaced times in [0, t_final].
    """

    n_modes: int = 2048
    dt: float = 1e-3
    n_t: int = 201
    n_x: int = 513
    t_final: float = 1.0
    contour_points: int = 64

    def __post_init__(self):
        if self.n_modes < 4 or self.n_modes & (self.n_modes - 1):
            raise ConfigurationError(f"n_modes must be a power of two, got {self.n_modes}")
        if self.n_x < 2 or self.n_modes % (self.n_x - 1):
            raise ConfigurationError(f"n_x - 1 = {self.n_x - 1} must divide n_modes = {self.n_modes}")
        steps = self.t_final / self.dt
        per_slice = steps / (self.n_t - 1)
        if abs(per_slice - round(per_slice)) > 1e-9 or round(per_slice) < 1:
            raise ConfigurationError("dt must divide the output time spacing")


@dataclass
class SolutionGrid:
    """Field on a tensor-product grid.  ``axes`` are in array-axis order."""

    axis_names: tuple
    axes: tuple
    u_ref: np.ndarray
    u_pred: np.ndarray | None = None
    norm_mask: np.ndarray | None = None  # nodes included in error norms

    def _masked(self, a):
        return a if self.norm_mask is None else a[self.norm_mask]

    @property
    def rel_l2(self):
        return relative_l2(self._masked(self.u_pred), self._masked(self.u_ref))

    @property
    def max_abs_err(self):
        return float(np.max(np.abs(self._masked(self.u_pred) - self._masked(self.u_ref))))

    @property
    def error(self):
        return np.abs(self.u_pred - self.u_ref)

    def points(self):
        mesh = np.meshgrid(*self.axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=1)


def _etdrk4_coefficients(lin, dt, n_contour):
    """Kassam-Trefethen contour-integral evaluation of the ETDRK4 phi-functions."""
    r = np.exp(1j * np.pi * (np.arange(1, n_contour + 1) - 0.5) / n_contour)
    lr = dt * lin[:, None] + r[None, :]
    e_lr = np.exp(lr)
    q = dt * np.real(np.mean((np.exp(lr / 2) - 1) / lr, axis=1))
    f1 = dt * np.real(np.mean((-4 - lr + e_lr * (4 - 3 * lr + lr**2)) / lr**3, axis=1))
    f2 = dt * np.real(np.mean((2 + lr + e_lr * (lr - 2)) / lr**3, axis=1))
    f3 = dt * np.real(np.mean((-4 - 3 * lr - lr**2 + e_lr * (4 - lr)) / lr**3, axis=1))
    return np.exp(dt * lin), np.exp(dt * lin / 2), q, f1, f2, f3


def _x2cos_moment(m):
    """Integral of x^2 cos(m pi x) over [-1, 1]."""
    m = np.abs(m).astype(float)
    safe = np.where(m == 0, 1.0, m)
    return np.where(m == 0, 2.0 / 3.0, 4.0 * (-1.0) ** m / (np.pi * safe) ** 2)


def initial_coefficients(n):
    """rfft-layout coefficients of x^2 cos(pi x) from its exact Fourier series.

    The initial condition has a derivative jump across the periodic seam, so
    sampling it at the nodes aliases an O(n^-2) error into the resolved modes
    that lingers for most of the run.  Projecting analytically keeps the
    resolved modes exact.  The Nyquist mode is dropped.
    """
    idx = np.arange(n // 2 + 1)
    c = 0.25 * (_x2cos_moment(idx + 1) + _x2cos_moment(idx - 1))
    v = n * (-1.0) ** idx * c
    v[-1] = 0.0
    return v.astype(complex)


def solve_allen_cahn_reference(spec=AllenCahnGridSpec(), diffusion=AC_DIFFUSION, reaction=AC_REACTION):
    """ETDRK4 Fourier pseudo-spectral solve of u_t = D u_xx + r (u - u^3) on [-1, 1) periodic.

    Returns a :class:`SolutionGrid` with axes (t, x), x including both
    endpoints; the duplicated x = 1 column is excluded from norms.
    """
    n = spec.n_modes
    x_full = -1.0 + 2.0 * np.arange(n) / n
    k = np.fft.rfftfreq(n, d=2.0 / n) * 2.0 * np.pi
    lin = -diffusion * k**2 + reaction
    e, e2, q, f1, f2, f3 = _etdrk4_coefficients(lin, spec.dt, spec.contour_points)

    def nonlinear(v_hat):
        u = np.fft.irfft(v_hat, n)
        return -reaction * np.fft.rfft(u**3)

    stride = n // (spec.n_x - 1)
    steps_per_slice = int(round(spec.t_final / spec.dt / (spec.n_t - 1)))
    u0 = x_full**2 * np.cos(np.pi * x_full)
    out = np.empty((spec.n_t, spec.n_x))
    out[0, :-1] = u0[::stride]
    v = initial_coefficients(n)
    for i in range(1, spec.n_t):
        for _ in range(steps_per_slice):
            nv = nonlinear(v)
            a = e2 * v + q * nv
            na = nonlinear(a)
            b = e2 * v + q * na
            nb = nonlinear(b)
            c = e2 * a + q * (2 * nb - nv)
            nc = nonlinear(c)
            v = e * v + nv * f1 + 2 * (na + nb) * f2 + nc * f3
        out[i, :-1] = np.fft.irfft(v, n)[::stride]
    out[:, -1] = out[:, 0]
    t = np.linspace(0.0, spec.t_final, spec.n_t)
    x = np.linspace(-1.0, 1.0, spec.n_x)
    mask = np.ones(out.shape, dtype=bool)
    mask[:, -1] = False
    return SolutionGrid(("t", "x"), (t, x), out, norm_mask=mask)


@lru_cache(maxsize=4)
def _cached_allen_cahn(spec):
    return solve_allen_cahn_reference(spec)


# --------------------------------------------------------------------------
# evaluation grids
# --------------------------------------------------------------------------


def reference_grid(problem_name, shape=None, reference_path=None, ac_spec=None):
    """Reference field on the default evaluation grid of a benchmark.

    ``reference_path`` loads an external grid file instead (import hook).
    """
    if reference_path is not None:
        return read_grid(reference_path, problem_name)
    if problem_name == "allen_cahn":
        spec = ac_spec or AllenCahnGridSpec()
        if shape is not None:
            spec = AllenCahnGridSpec(n_modes=spec.n_modes, dt=spec.dt, n_t=shape[0], n_x=shape[1])
        g = _cached_allen_cahn(spec)
        return SolutionGrid(g.axis_names, g.axes, g.u_ref.copy(), norm_mask=g.norm_mask)
    if problem_name == "helmholtz":
        nx, ny = shape or (101, 101)
        x, y = np.linspace(-1, 1, nx), np.linspace(-1, 1, ny)
        X, Y = np.meshgrid(x, y, indexing="ij")
        return SolutionGrid(("x", "y"), (x, y), exact_helmholtz(X, Y))
    if problem_name == "advection":
        nt, nx = shape or (201, 257)
        t, x = np.linspace(0, 1, nt), np.linspace(0, 2 * np.pi, nx)
        T, X = np.meshgrid(t, x, indexing="ij")
        mask = np.ones((nt, nx), dtype=bool)
        mask[:, -1] = False
        return SolutionGrid(("t", "x"), (t, x), exact_advection(T, X), norm_mask=mask)
    raise ConfigurationError(f"no reference for problem {problem_name!r}")


# --------------------------------------------------------------------------
# grid files
# --------------------------------------------------------------------------


def write_grid(path, axes, values):
    """Header row of axis sizes, then one ``coords..., value`` row per node, 17 significant digits."""
    values = np.asarray(values, dtype=np.float64)
    shape = tuple(len(a) for a in axes)
    if values.shape != shape:
        raise ConfigurationError(f"values {values.shape} do not match axes {shape}")
    mesh = np.meshgrid(*axes, indexing="ij")
    table = np.column_stack([m.ravel() for m in mesh] + [values.ravel()])
    with open(path, "w") as fh:
        fh.write(",".join(str(n) for n in shape) + "\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")


def read_grid_raw(path):
    with open(path) as fh:
        shape = tuple(int(v) for v in fh.readline().strip().split(","))
        table = np.loadtxt(fh, delimiter=",", ndmin=2)
    d = len(shape)
    if table.shape != (int(np.prod(shape)), d + 1):
        raise ConfigurationError(f"{path}: expected {np.prod(shape)} rows of {d + 1} columns")
    coords = table[:, :d].reshape(shape + (d,))
    axes = []
    for i in range(d):
        index = [0] * d
        index[i] = slice(None)
        axes.append(coords[tuple(index) + (i,)].copy())
    return tuple(axes), table[:, d].reshape(shape)


def read_grid(path, problem_name=None):
    axes, values = read_grid_raw(path)
    names = {"allen_cahn": ("t", "x"), "helmholtz": ("x", "y"), "advection": ("t", "x")}
    axis_names = names.get(problem_name, tuple(f"a{i}" for i in range(len(axes))))
    mask = None
    if problem_name in ("allen_cahn", "advection"):
        mask = np.ones(values.shape, dtype=bool)
        mask[:, -1] = False
    return SolutionGrid(axis_names, axes, values, norm_mask=mask)
