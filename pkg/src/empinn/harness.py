"""Experiment orchestration: training runs, ablations, the pathology probe and grid export.

Run directory layout::

    <run>/run.json                 RunRecord (config snapshot, per-seed results, aggregates)
    <run>/seed_<k>/metrics.csv     step, l_ic, l_bc, l_r, total, lr, elapsed_s
    <run>/seed_<k>/solution.grid   prediction on the evaluation grid
    <run>/seed_<k>/error.grid      |u_pred - u_ref| on the same grid
    <run>/seed_<k>/params.npz      trained flat parameter vector
"""
from __future__ import annotations

import csv
import itertools
import json
import logging
import time
from contextlib import nullcontext
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import pde
from .config import ExperimentConfig, from_dict, to_dict
from .diffcore import ConfigurationError, DivergedTrainingError
from .network import EmbeddingSpec, NetworkConfig, init_params, pathology_probe, predict
from .optim import AdamState, adam_step, lbfgs_minimize
from .reference import AllenCahnGridSpec, SolutionGrid, reference_grid, write_grid

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "l_ic", "l_bc", "l_r", "total", "lr", "elapsed_s")
PERIODIC_KINDS = ("periodic_1d_plus_time", "periodic_x_and_t")
PREDICT_CHUNK = 16384


def problem_for(config):
    """Build the PdeProblem; the boundary mode follows from the network config."""
    w = config.weights
    net = config.network
    if config.problem == "allen_cahn":
        return pde.allen_cahn(lambda_ic=w.lambda_ic, lambda_r=w.lambda_r)
    if config.problem == "helmholtz":
        bc = "exact_via_adf" if net.output_transform == "adf_helmholtz" else "loss_term"
        return pde.helmholtz(bc=bc, lambda_bc=w.lambda_bc, lambda_r=w.lambda_r)
    if config.problem == "advection":
        bc = "exact_via_embedding" if net.embedding.kind in PERIODIC_KINDS else "loss_term"
        return pde.advection(bc=bc, lambda_ic=w.lambda_ic, lambda_bc=w.lambda_bc, lambda_r=w.lambda_r)
    raise ConfigurationError(f"unknown problem {config.problem!r}")


@dataclass
class SeedRecord:
    seed: int
    status: str = "ok"  # ok | diverged
    rel_l2: float | None = None
    max_abs_err: float | None = None
    final_terms: dict = field(default_factory=dict)
    steps_completed: int = 0
    lbfgs_status: str | None = None
    lbfgs_iterations: int = 0
    wall_clock_s: float = 0.0
    error: str | None = None
    metrics: list = field(default_factory=list)


@dataclass
class RunRecord:
    config: dict
    seeds: list
    mean_rel_l2: float | None
    best_rel_l2: float | None
    status: str  # ok | partial | diverged
    run_dir: str | None = None

    @property
    def rel_l2(self):
        return {s.seed: s.rel_l2 for s in self.seeds}

    def to_json(self):
        return {
            "config": self.config,
            "seeds": [vars(s) for s in self.seeds],
            "mean_rel_l2": self.mean_rel_l2,
            "best_rel_l2": self.best_rel_l2,
            "status": self.status,
            "run_dir": self.run_dir,
        }

    @classmethod
    def from_json(cls, data):
        return cls(
            config=data["config"],
            seeds=[SeedRecord(**s) for s in data["seeds"]],
            mean_rel_l2=data["mean_rel_l2"],
            best_rel_l2=data["best_rel_l2"],
            status=data["status"],
            run_dir=data.get("run_dir"),
        )

    @classmethod
    def load(cls, path):
        path = Path(path)
        if path.is_dir():
            path = path / "run.json"
        return cls.from_json(json.loads(path.read_text()))


def aggregate(config_dict, seeds, run_dir=None):
    """Seed mean and best over seeds that finished; status reflects divergences."""
    done = [s.rel_l2 for s in seeds if s.status == "ok" and s.rel_l2 is not None]
    mean = float(np.mean(done)) if done else None
    best = float(np.min(done)) if done else None
    if len(done) == len(seeds):
        status = "ok"
    elif done:
        status = "partial"
    else:
        status = "diverged"
    return RunRecord(config_dict, seeds, mean, best, status, run_dir)


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


class _MetricLog:
    def __init__(self, deterministic):
        self.rows = []
        self.start = time.perf_counter()
        self.deterministic = deterministic

    def elapsed(self):
        return time.perf_counter() - self.start

    def add(self, step, terms, lr):
        elapsed = 0.0 if self.deterministic else self.elapsed()
        self.rows.append({"step": int(step), **terms.as_dict(), "lr": float(lr), "elapsed_s": elapsed})

    def write(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(METRIC_COLUMNS)
            for row in self.rows:
                writer.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def predict_grid(params, config, grid):
    """Network prediction reshaped onto ``grid``; evaluated in chunks to bound memory."""
    pts = grid.points()
    out = np.concatenate([
        predict(params, config.network, pts[i:i + PREDICT_CHUNK], grid.axis_names)
        for i in range(0, len(pts), PREDICT_CHUNK)
    ])
    return out.reshape(grid.u_ref.shape)


def evaluation_grid(config):
    return reference_grid(config.problem, shape=config.eval_shape, reference_path=config.reference_path)


def train_seed(config, seed, seed_dir=None, deterministic=False, grid=None):
    """Train one seed: init, sample, Adam, optional L-BFGS, evaluate, write artifacts."""
    problem = problem_for(config)
    tr = config.train
    col = config.collocation
    record = SeedRecord(seed=int(seed))
    metrics = _MetricLog(deterministic)
    params = init_params(config.network, seed)
    counts = {"residual": col.residual, "ic": col.ic, "bc": col.bc}
    colloc = pde.sample_collocation(problem, counts, seed, col.strategy)
    objective = pde.Objective(problem, config.network, colloc, params)
    resample = tr.resample_every if col.strategy != "grid" else 0
    theta = params.flatten()

    try:
        adam = AdamState.create(theta.size, tr.adam.lr, tr.adam.decay_steps, tr.adam.decay_rate)
        for step in range(tr.adam.steps):
            if resample and step and step % resample == 0:
                colloc = pde.sample_collocation(problem, counts, seed, col.strategy, epoch=step // resample)
                objective = pde.Objective(problem, config.network, colloc, params)
            _, grad = objective(theta, step)
            if step % tr.log_every == 0:
                metrics.add(step, objective.last_terms, adam.lr())
            adam, theta = adam_step(adam, theta, grad)
            record.steps_completed = step + 1
        theta, lbfgs_info = _run_lbfgs(objective, theta, tr, metrics)
        record.lbfgs_status, record.lbfgs_iterations = lbfgs_info
        record.steps_completed = tr.adam.steps + record.lbfgs_iterations
    except DivergedTrainingError as exc:
        record.status = "diverged"
        record.error = str(exc)
        log.warning("seed %s diverged: %s", seed, exc)

    record.wall_clock_s = metrics.elapsed()
    record.metrics = metrics.rows
    if seed_dir is not None:
        seed_dir = Path(seed_dir)
        seed_dir.mkdir(parents=True, exist_ok=True)
        metrics.write(seed_dir / "metrics.csv")
    if record.status != "ok":
        return record, None

    trained = params.unflatten(theta)
    if metrics.rows:
        record.final_terms = {k: metrics.rows[-1][k] for k in ("l_ic", "l_bc", "l_r", "total")}
    grid = grid if grid is not None else evaluation_grid(config)
    grid = SolutionGrid(grid.axis_names, grid.axes, grid.u_ref, predict_grid(trained, config, grid), grid.norm_mask)
    record.rel_l2 = grid.rel_l2
    record.max_abs_err = grid.max_abs_err
    if seed_dir is not None:
        export_grid(grid, seed_dir / "solution.grid")
        save_params(trained, seed_dir / "params.npz")
    return record, trained


def _run_lbfgs(objective, theta, tr, metrics):
    """L-BFGS phase; trial points with a non-finite loss are rejected by the line search."""
    if tr.lbfgs.max_iter == 0:
        objective(theta, tr.adam.steps)
        metrics.add(tr.adam.steps, objective.last_terms, 0.0)
        return theta, (None, 0)

    seen = {}
    first = []

    def f_and_grad(x):
        try:
            loss, grad = objective(x, tr.adam.steps)
        except DivergedTrainingError:
            if not first:
                raise
            return np.inf, np.zeros_like(x)
        seen[loss] = objective.last_terms
        if not first:
            first.append(loss)
            metrics.add(tr.adam.steps, objective.last_terms, tr.lbfgs.lr)
        return loss, grad

    def callback(it, x, f, g):
        metrics.add(tr.adam.steps + it, seen[f], tr.lbfgs.lr)
        seen.clear()

    result = lbfgs_minimize(f_and_grad, theta, m_hist=tr.lbfgs.m_hist, max_iter=tr.lbfgs.max_iter,
                            tol=tr.lbfgs.tol, lr=tr.lbfgs.lr, callback=callback)
    return result.params, (result.status, result.n_iter)


def run_experiment(config, out_dir=None, deterministic=False):
    """Train every seed of ``config`` and aggregate.  A diverged seed never aborts the run."""
    config.validate()
    run_dir = Path(out_dir) if out_dir is not None else Path(config.out_dir) / config.name
    run_dir.mkdir(parents=True, exist_ok=True)
    limits = threadpool_limits(limits=1) if deterministic else nullcontext()
    with limits:
        grid = evaluation_grid(config)
        seeds = []
        for seed in config.seeds:
            record, _ = train_seed(config, seed, run_dir / f"seed_{seed}", deterministic, grid)
            log.info("seed %s: status=%s rel_l2=%s", seed, record.status, record.rel_l2)
            seeds.append(record)
    run = aggregate(to_dict(config), seeds, str(run_dir))
    (run_dir / "run.json").write_text(json.dumps(run.to_json(), indent=2))
    return run


def save_params(params, path):
    extra = {"fourier": params.fourier} if params.fourier is not None else {}
    np.savez(path, flat=params.flatten(), **extra)


def evaluate_run(run_dir):
    """Re-evaluate the saved parameters of every finished seed against the reference."""
    run = RunRecord.load(run_dir)
    config = from_dict(run.config)
    grid = evaluation_grid(config)
    out = {}
    for s in run.seeds:
        path = Path(run_dir) / f"seed_{s.seed}" / "params.npz"
        if s.status != "ok" or not path.exists():
            out[s.seed] = None
            continue
        params = init_params(config.network, s.seed).unflatten(np.load(path)["flat"])
        g = SolutionGrid(grid.axis_names, grid.axes, grid.u_ref, predict_grid(params, config, grid), grid.norm_mask)
        out[s.seed] = g.rel_l2
    return out


# --------------------------------------------------------------------------
# ablations
# --------------------------------------------------------------------------

ABLATION_TOGGLES = {
    "helmholtz": ("fourier_feature", "adf"),
    "advection": ("periodic_embedding", "time_embedding"),
}


def _current_toggles(config):
    net = config.network
    kind = net.embedding.kind
    if config.problem == "helmholtz":
        return {"fourier_feature": kind == "gaussian_fourier", "adf": net.output_transform == "adf_helmholtz"}
    return {"periodic_embedding": kind in PERIODIC_KINDS, "time_embedding": kind == "periodic_x_and_t"}


def apply_toggles(config, settings):
    """Config variant with the given toggles switched on/off."""
    net = config.network
    emb = net.embedding
    if config.problem == "helmholtz":
        if "fourier_feature" in settings:
            if not settings["fourier_feature"]:
                emb = EmbeddingSpec()
            elif emb.kind != "gaussian_fourier":
                emb = EmbeddingSpec("gaussian_fourier", scale=2.0, num_features=32)
        transform = net.output_transform
        if "adf" in settings:
            transform = "adf_helmholtz" if settings["adf"] else "none"
        net = replace(net, embedding=emb, output_transform=transform)
    else:
        state = {**_current_toggles(config), **settings}
        if not state["periodic_embedding"]:
            emb = EmbeddingSpec()
        elif state["time_embedding"]:
            emb = EmbeddingSpec("periodic_x_and_t", period_x=2 * np.pi, period_t=2 * np.pi)
        else:
            emb = EmbeddingSpec("periodic_1d_plus_time", m=1, period_x=2 * np.pi)
        net = replace(net, embedding=emb)
    tag = "_".join(f"{k}-{'on' if v else 'off'}" for k, v in settings.items())
    return replace(config, network=net, name=f"{config.name}__{tag}" if tag else config.name).validate()


def ablation_combinations(config, toggles):
    """Toggle settings to run, in table order (all-on first)."""
    toggles = list(toggles)
    allowed = ABLATION_TOGGLES.get(config.problem, ())
    bad = [t for t in toggles if t not in allowed]
    if bad:
        raise ConfigurationError(f"toggle(s) {bad} do not apply to {config.problem}; allowed: {list(allowed)}")
    toggles = [t for t in allowed if t in toggles]
    combos = []
    for values in itertools.product((True, False), repeat=len(toggles)):
        settings = dict(zip(toggles, values))
        state = {**_current_toggles(config), **settings}
        # time embedding only exists alongside the periodic one; untoggled, it follows periodic off
        if config.problem == "advection" and settings.get("time_embedding") and not state["periodic_embedding"]:
            continue
        combos.append(settings)
    return combos


def run_ablation(base_config, toggles, out_dir=None, deterministic=False):
    """One run per toggle combination; writes ``ablation.csv`` keyed by the on/off pattern."""
    base_config.validate()
    combos = ablation_combinations(base_config, toggles)
    root = Path(out_dir) if out_dir is not None else Path(base_config.out_dir) / f"{base_config.name}__ablation"
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    for settings in combos:
        variant = apply_toggles(base_config, settings)
        run = run_experiment(variant, root / variant.name, deterministic)
        rows.append((settings, run))
    names = list(combos[0]) if combos else []
    with open(root / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(names + ["mean_rel_l2", "best_rel_l2", "seed_rel_l2", "status"])
        for settings, run in rows:
            per_seed = ";".join(f"{s.seed}:{s.rel_l2!r}" for s in run.seeds)
            writer.writerow(["✓" if settings[n] else "✗" for n in names]
                            + [run.mean_rel_l2, run.best_rel_l2, per_seed, run.status])
    return rows


# --------------------------------------------------------------------------
# pathology probe
# --------------------------------------------------------------------------

PROBE_MLP_MAX = 1e-12
PROBE_EM_MIN = 1e-6


def run_probe(depths=(2, 4, 8), width=16, seeds=range(5), zero_second_factor=False, n_points=101):
    """Tabulate du/dx spreads of linear-regime MLP and EM nets.

    Status is ``separated`` when every MLP spread is at most 1e-12 and every
    EM spread at least 1e-6, ``degenerate`` when an EM spread collapses to
    the MLP level, and ``not_separated`` otherwise.
    """
    points = np.linspace(-1.0, 1.0, n_points)
    rows = []
    for depth in depths:
        cfg = NetworkConfig(arch="em", num_blocks=int(depth), width=int(width), n_inputs=1)
        for seed in seeds:
            spread = pathology_probe(cfg, int(seed), points, zero_second_factor=zero_second_factor)
            rows.append({"depth": int(depth), "seed": int(seed), **spread})
    if any(r["em_d1_spread"] <= PROBE_MLP_MAX for r in rows):
        status = "degenerate"
    elif all(r["mlp_d1_spread"] <= PROBE_MLP_MAX and r["em_d1_spread"] >= PROBE_EM_MIN for r in rows):
        status = "separated"
    else:
        status = "not_separated"
    return {"status": status, "width": int(width), "rows": rows}


# --------------------------------------------------------------------------
# grids
# --------------------------------------------------------------------------


def _error_path(path):
    path = Path(path)
    if path.name == "solution.grid":
        return path.with_name("error.grid")
    return path.with_name(f"{path.stem}.error{path.suffix}")


def export_grid(grid, path, error_path=None):
    """Write ``u_pred`` (or ``u_ref`` when absent) plus the companion |u_pred - u_ref| grid."""
    values = grid.u_pred if grid.u_pred is not None else grid.u_ref
    write_grid(path, grid.axes, values)
    err = grid.error if grid.u_pred is not None else np.zeros_like(grid.u_ref)
    write_grid(error_path or _error_path(path), grid.axes, err)


def parse_grid_spec(text):
    """``"201x513"`` or ``"201x513@2048"`` (Allen-Cahn mode count after ``@``)."""
    shape_part, _, modes = text.partition("@")
    try:
        shape = [int(v) for v in shape_part.lower().replace(",", "x").split("x")]
        n_modes = int(modes) if modes else None
    except ValueError:
        raise ConfigurationError(f"bad grid spec {text!r}; expected e.g. 201x513 or 201x513@2048") from None
    if len(shape) != 2 or min(shape) < 2:
        raise ConfigurationError(f"grid spec {text!r} must give two axis sizes >= 2")
    return shape, n_modes


def generate_reference(problem_name, grid_spec, path):
    """Write the reference field for ``problem_name`` on ``grid_spec`` (see :func:`parse_grid_spec`)."""
    shape, n_modes = parse_grid_spec(grid_spec) if isinstance(grid_spec, str) else (list(grid_spec), None)
    ac_spec = None
    if problem_name == "allen_cahn":
        ac_spec = AllenCahnGridSpec(n_modes=n_modes or AllenCahnGridSpec.n_modes, n_t=shape[0], n_x=shape[1])
    elif n_modes is not None:
        raise ConfigurationError("a mode count only applies to allen_cahn")
    grid = reference_grid(problem_name, shape=shape, ac_spec=ac_spec)
    export_grid(grid, path)
    return grid
