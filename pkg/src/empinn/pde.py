"""Benchmark problems, residuals over jets, collocation sampling and loss assembly."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .diffcore import (
    ConfigurationError,
    Jet,
    JetLayout,
    VALUE_ONLY,
    channel,
    loss_and_param_grad,
    mean_square,
    value_of,
)
from .network import prepare_inputs, run_prepared

AC_DIFFUSION = 1e-4
AC_REACTION = 5.0
HELMHOLTZ_A1 = 1.0
HELMHOLTZ_A2 = 4.0
HELMHOLTZ_K = 1.0
ADVECTION_BETA = 100.0

BC_MODES = ("exact_via_embedding", "exact_via_adf", "loss_term")


def residual_allen_cahn(jet, diffusion=AC_DIFFUSION, reaction=AC_REACTION):
    u = jet.value
    return jet.d1("t") - diffusion * jet.d2("x") + reaction * u**3 - reaction * u


def helmholtz_source(x, y, a1=HELMHOLTZ_A1, a2=HELMHOLTZ_A2, k=HELMHOLTZ_K):
    s = np.sin(a1 * np.pi * x) * np.sin(a2 * np.pi * y)
    return -((a1 * np.pi) ** 2) * s - (a2 * np.pi) ** 2 * s + k**2 * s


def residual_helmholtz(jet, x, y, a1=HELMHOLTZ_A1, a2=HELMHOLTZ_A2, k=HELMHOLTZ_K):
    return jet.d2("x") + jet.d2("y") + k**2 * jet.value - helmholtz_source(x, y, a1, a2, k)


def residual_advection(jet, beta=ADVECTION_BETA):
    return jet.d1("t") + beta * jet.d1("x")


@dataclass(frozen=True)
class PdeProblem:
    name: str
    coords: tuple
    bounds: dict
    layout: JetLayout
    residual: Callable  # (Jet, points) -> residual array/Var
    ic: Callable | None = None  # g(x) for u(0, x)
    bc: str = "exact_via_embedding"
    bc_kind: str = ""  # "dirichlet_zero" | "periodic_x" when bc == "loss_term"
    lambda_ic: float = 0.0
    lambda_bc: float = 0.0
    lambda_r: float = 1.0
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.bc not in BC_MODES:
            raise ConfigurationError(f"unknown bc mode {self.bc!r}")
        if self.bc == "loss_term" and not self.bc_kind:
            raise ConfigurationError(f"{self.name}: loss_term boundary needs a bc_kind")


def allen_cahn(lambda_ic=100.0, lambda_r=1.0):
    return PdeProblem(
        name="allen_cahn",
        coords=("t", "x"),
        bounds={"t": (0.0, 1.0), "x": (-1.0, 1.0)},
        layout=JetLayout(("t", "x"), ("x",)),
        residual=lambda jet, pts: residual_allen_cahn(jet),
        ic=lambda x: x**2 * np.cos(np.pi * x),
        bc="exact_via_embedding",
        lambda_ic=lambda_ic,
        lambda_r=lambda_r,
        constants={"diffusion": AC_DIFFUSION, "reaction": AC_REACTION},
    )


def helmholtz(bc="exact_via_adf", lambda_bc=1.0, lambda_r=1.0):
    if bc not in ("exact_via_adf", "loss_term"):
        raise ConfigurationError(f"helmholtz boundary must be exact_via_adf or loss_term, got {bc!r}")
    return PdeProblem(
        name="helmholtz",
        coords=("x", "y"),
        bounds={"x": (-1.0, 1.0), "y": (-1.0, 1.0)},
        layout=JetLayout(("x", "y"), ("x", "y")),
        residual=lambda jet, pts: residual_helmholtz(jet, pts[:, 0], pts[:, 1]),
        bc=bc,
        bc_kind="dirichlet_zero" if bc == "loss_term" else "",
        lambda_bc=lambda_bc if bc == "loss_term" else 0.0,
        lambda_r=lambda_r,
        constants={"a1": HELMHOLTZ_A1, "a2": HELMHOLTZ_A2, "k": HELMHOLTZ_K},
    )


def advection(bc="exact_via_embedding", lambda_ic=100.0, lambda_bc=1.0, lambda_r=1.0):
    if bc not in ("exact_via_embedding", "loss_term"):
        raise ConfigurationError(f"advection boundary must be exact_via_embedding or loss_term, got {bc!r}")
    return PdeProblem(
        name="advection",
        coords=("t", "x"),
        bounds={"t": (0.0, 1.0), "x": (0.0, 2.0 * np.pi)},
        layout=JetLayout(("t", "x")),
        residual=lambda jet, pts: residual_advection(jet),
        ic=np.sin,
        bc=bc,
        bc_kind="periodic_x" if bc == "loss_term" else "",
        lambda_ic=lambda_ic,
        lambda_bc=lambda_bc if bc == "loss_term" else 0.0,
        lambda_r=lambda_r,
        constants={"beta": ADVECTION_BETA},
    )


PROBLEMS = {"allen_cahn": allen_cahn, "helmholtz": helmholtz, "advection": advection}


def make_problem(name, **kwargs):
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)


# --------------------------------------------------------------------------
# collocation
# --------------------------------------------------------------------------


@dataclass
class CollocationSet:
    residual: np.ndarray
    ic: np.ndarray | None = None
    bc: np.ndarray | None = None
    bc_pair: np.ndarray | None = None  # periodic partner of each bc point
    seed: int = 0
    strategy: str = "uniform_random"


def _grid_side(count, what):
    side = int(round(np.sqrt(count)))
    if side * side != count or side < 2:
        raise ConfigurationError(f"grid strategy needs a perfect-square {what} count, got {count}")
    return side


def _box(problem):
    lo = np.array([problem.bounds[c][0] for c in problem.coords])
    hi = np.array([problem.bounds[c][1] for c in problem.coords])
    return lo, hi


def sample_collocation(problem, counts, seed, strategy="uniform_random", epoch=0):
    """Draw residual / IC / BC point sets for ``problem``.

    ``counts`` maps ``residual``, ``ic`` and ``bc`` to point counts; IC and
    BC sets are only built when the problem uses them.  ``epoch > 0``
    gives an independent redraw for the same seed.
    """
    if strategy not in ("uniform_random", "grid"):
        raise ConfigurationError(f"unknown collocation strategy {strategy!r}")
    n_res = int(counts.get("residual", 0))
    if n_res <= 0:
        raise ConfigurationError("residual point count must be positive")
    entropy = [int(seed), 0xC011] + ([int(epoch)] if epoch else [])
    rng = np.random.default_rng(np.random.SeedSequence(entropy))
    lo, hi = _box(problem)
    d = len(problem.coords)

    if strategy == "grid":
        if d != 2:
            raise ConfigurationError("grid strategy supports 2-D problems only")
        side = _grid_side(n_res, "residual")
        axes = [np.linspace(lo[i], hi[i], side) for i in range(d)]
        mesh = np.meshgrid(*axes, indexing="ij")
        residual = np.stack([m.ravel() for m in mesh], axis=1)
    else:
        residual = lo + (hi - lo) * rng.random((n_res, d))

    colloc = CollocationSet(residual=residual, seed=int(seed), strategy=strategy)

    if problem.ic is not None:
        n_ic = int(counts.get("ic", 0))
        if n_ic <= 0:
            raise ConfigurationError(f"{problem.name} needs initial-condition points")
        ix = problem.coords.index("x")
        xlo, xhi = problem.bounds["x"]
        xs = np.linspace(xlo, xhi, n_ic) if strategy == "grid" else rng.uniform(xlo, xhi, n_ic)
        ic = np.zeros((n_ic, d))
        ic[:, ix] = xs
        colloc.ic = ic

    if problem.bc == "loss_term":
        n_bc = int(counts.get("bc", 0))
        if problem.bc_kind == "dirichlet_zero":
            if strategy == "grid":
                on_edge = np.any((residual == lo) | (residual == hi), axis=1)
                colloc.bc = residual[on_edge]
            else:
                if n_bc <= 0:
                    raise ConfigurationError("boundary loss needs bc points")
                pts = lo + (hi - lo) * rng.random((n_bc, d))
                axis, side_ = np.divmod(rng.integers(0, 2 * d, n_bc), 2)
                pts[np.arange(n_bc), axis] = np.where(side_ == 1, hi[axis], lo[axis])
                colloc.bc = pts
        else:  # periodic_x
            if n_bc <= 0:
                raise ConfigurationError("periodic boundary loss needs bc points")
            ix = problem.coords.index("x")
            it = problem.coords.index("t")
            tlo, thi = problem.bounds["t"]
            ts = np.linspace(tlo, thi, n_bc) if strategy == "grid" else rng.uniform(tlo, thi, n_bc)
            left = np.zeros((n_bc, d))
            left[:, it] = ts
            left[:, ix] = problem.bounds["x"][0]
            right = left.copy()
            right[:, ix] = problem.bounds["x"][1]
            colloc.bc, colloc.bc_pair = left, right
    return colloc


# --------------------------------------------------------------------------
# loss
# --------------------------------------------------------------------------


@dataclass
class LossTerms:
    l_ic: float
    l_bc: float
    l_r: float
    total: float
    lambda_ic: float
    lambda_bc: float
    lambda_r: float

    def as_dict(self):
        return {"l_ic": self.l_ic, "l_bc": self.l_bc, "l_r": self.l_r, "total": self.total}


def compose_total(l_ic, l_bc, l_r, lambda_ic, lambda_bc, lambda_r):
    return lambda_ic * l_ic + lambda_bc * l_bc + lambda_r * l_r


def prepare_collocation(problem, config, colloc, fourier=None):
    """Embed every point set of ``colloc`` once; reused across loss evaluations."""
    if colloc.residual is None or len(colloc.residual) == 0:
        raise ConfigurationError("empty residual point set")
    prep = {"residual": prepare_inputs(config, colloc.residual, problem.coords, problem.layout, fourier)}
    if problem.ic is not None:
        if colloc.ic is None or len(colloc.ic) == 0:
            raise ConfigurationError(f"{problem.name}: empty initial-condition point set")
        prep["ic"] = prepare_inputs(config, colloc.ic, problem.coords, VALUE_ONLY, fourier)
    if problem.bc == "loss_term":
        if colloc.bc is None or len(colloc.bc) == 0:
            raise ConfigurationError(f"{problem.name}: empty boundary point set")
        prep["bc"] = prepare_inputs(config, colloc.bc, problem.coords, VALUE_ONLY, fourier)
        if problem.bc_kind == "periodic_x":
            prep["bc_pair"] = prepare_inputs(config, colloc.bc_pair, problem.coords, VALUE_ONLY, fourier)
    return prep


def loss_graph(problem, params, config, colloc, prepared=None):
    """Build (total, l_ic, l_bc, l_r); entries are Vars when ``params`` are taped."""
    if prepared is None:
        prepared = prepare_collocation(problem, config, colloc, params.fourier)
    pts = colloc.residual
    u = run_prepared(params, config, prepared["residual"])
    jet = Jet(channel(u, (slice(None), slice(None), 0)), problem.layout)
    l_r = mean_square(problem.residual(jet, pts))

    l_ic = 0.0
    if problem.ic is not None:
        u0 = _values(params, config, prepared["ic"])
        l_ic = mean_square(u0 - problem.ic(colloc.ic[:, problem.coords.index("x")]))

    l_bc = 0.0
    if problem.bc == "loss_term":
        ub = _values(params, config, prepared["bc"])
        if problem.bc_kind == "periodic_x":
            ub = ub - _values(params, config, prepared["bc_pair"])
        l_bc = mean_square(ub)

    total = compose_total(l_ic, l_bc, l_r, problem.lambda_ic, problem.lambda_bc, problem.lambda_r)
    return total, l_ic, l_bc, l_r


def _values(params, config, prepared):
    return channel(run_prepared(params, config, prepared), (0, slice(None), 0))


def _terms(problem, total, l_ic, l_bc, l_r):
    f = lambda v: float(value_of(v))
    return LossTerms(f(l_ic), f(l_bc), f(l_r), f(total), problem.lambda_ic, problem.lambda_bc, problem.lambda_r)


def assemble_loss(problem, params, config, colloc):
    return _terms(problem, *loss_graph(problem, params, config, colloc))


class Objective:
    """Flat-vector loss and gradient over a fixed collocation set.

    The most recent loss terms are kept in ``last_terms`` for logging.
    """

    def __init__(self, problem, config, colloc, template):
        self.problem = problem
        self.config = config
        self.colloc = colloc
        self.template = template
        self.prepared = prepare_collocation(problem, config, colloc, template.fourier)
        self.last_terms = None
        self.n_evals = 0

    def __call__(self, flat, step=None):
        captured = {}

        def loss_fn(leaves):
            params = self.template.with_arrays(leaves)
            total, l_ic, l_bc, l_r = loss_graph(self.problem, params, self.config, self.colloc, self.prepared)
            captured["terms"] = (total, l_ic, l_bc, l_r)
            return total

        arrays = self.template.unflatten(flat).arrays()
        loss, grad = loss_and_param_grad(arrays, loss_fn, step=step)
        self.last_terms = _terms(self.problem, *captured["terms"])
        self.n_evals += 1
        return loss, grad
