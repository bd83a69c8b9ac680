"""Adam with exponential learning-rate decay and L-BFGS with a strong-Wolfe line search.

Both work on flat float64 parameter vectors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from decimal import Decimal, localcontext

import numpy as np

from .diffcore import DivergedTrainingError


@dataclass(frozen=True)
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    initial_lr: float = 1e-3
    decay_steps: int = 0
    decay_rate: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def create(cls, n, initial_lr=1e-3, decay_steps=0, decay_rate=1.0, **kw):
        return cls(np.zeros(n), np.zeros(n), 0, initial_lr, decay_steps, decay_rate, **kw)

    def lr(self, step=None):
        return exponential_decay(self.step if step is None else step, self.initial_lr, self.decay_steps, self.decay_rate)


def exponential_decay(step, initial_lr, decay_steps, decay_rate):
    """initial_lr * decay_rate ** (step / decay_steps), continuous exponent.

    Whole decay periods are applied in decimal to the shortest repr of the
    configured values, so lr(8000) with 1e-3 and 0.9 is exactly 9e-4 rather
    than one ulp above it.  Only the fractional remainder goes through float pow.
    """
    if not decay_steps or decay_rate == 1.0:
        return initial_lr
    whole, part = divmod(int(step), int(decay_steps))
    with localcontext() as ctx:
        ctx.prec = 40
        lr = float(Decimal(repr(float(initial_lr))) * Decimal(repr(float(decay_rate))) ** whole)
    return lr if part == 0 else lr * decay_rate ** (part / decay_steps)


def adam_step(state, params, grad):
    """One bias-corrected Adam update using the scheduled rate at ``state.step``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != params.shape:
        raise ValueError(f"gradient shape {grad.shape} does not match params {params.shape}")
    if not np.all(np.isfinite(grad)):
        raise DivergedTrainingError(state.step, "non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = m / (1.0 - state.beta1**t)
    v_hat = v / (1.0 - state.beta2**t)
    new_params = params - state.lr() * m_hat / (np.sqrt(v_hat) + state.eps)
    return replace(state, m=m, v=v, step=t), new_params


# --------------------------------------------------------------------------
# L-BFGS
# --------------------------------------------------------------------------


@dataclass
class LbfgsState:
    m_hist: int = 50
    s_hist: list = field(default_factory=list)
    y_hist: list = field(default_factory=list)
    iteration: int = 0

    def push(self, s, y):
        """Store a curvature pair; pairs with s.y <= 0 are skipped."""
        sy = float(s @ y)
        if self.m_hist <= 0 or sy <= np.finfo(float).eps * float(y @ y):
            return False
        self.s_hist.append(s)
        self.y_hist.append(y)
        if len(self.s_hist) > self.m_hist:
            self.s_hist.pop(0)
            self.y_hist.pop(0)
        return True

    def direction(self, g):
        """Two-loop recursion: -H g with H0 = (s.y / y.y) I."""
        q = g.copy()
        alphas = []
        for s, y in zip(reversed(self.s_hist), reversed(self.y_hist)):
            rho = 1.0 / (y @ s)
            a = rho * (s @ q)
            q -= a * y
            alphas.append((rho, a))
        if self.s_hist:
            s, y = self.s_hist[-1], self.y_hist[-1]
            q *= (s @ y) / (y @ y)
        for (s, y), (rho, a) in zip(zip(self.s_hist, self.y_hist), reversed(alphas)):
            b = rho * (y @ q)
            q += (a - b) * s
        return -q


@dataclass
class LbfgsResult:
    params: np.ndarray
    f: float
    grad: np.ndarray
    status: str
    n_iter: int
    n_evals: int
    trace: list


def _cubic_min(a, fa, da, b, fb, db):
    """Minimizer of the cubic interpolating (a, fa, da) and (b, fb, db), or None."""
    d1 = da + db - 3.0 * (fa - fb) / (a - b)
    disc = d1 * d1 - da * db
    if disc < 0:
        return None
    d2 = np.sign(b - a) * np.sqrt(disc)
    denom = db - da + 2.0 * d2
    if denom == 0:
        return None
    return b - (b - a) * (db + d2 - d1) / denom


def _interpolate(a, fa, da, b, fb, db):
    lo, hi = min(a, b), max(a, b)
    x = _cubic_min(a, fa, da, b, fb, db)
    if x is None or not np.isfinite(x) or x <= lo + 0.1 * (hi - lo) or x >= hi - 0.1 * (hi - lo):
        x = 0.5 * (lo + hi)
    return x


def strong_wolfe(phi, f0, d0, alpha0=1.0, c1=1e-4, c2=0.9, max_evals=25, alpha_max=1e10):
    """Bracketing + zoom search for a step meeting the strong Wolfe conditions.

    ``phi(alpha)`` returns ``(f, dphi, payload)``.  Returns
    ``(alpha, f, payload, n_evals)`` for the accepted step, or ``None`` for
    alpha (with the best point seen) when no such step was found.
    """
    n = 0
    best = (0.0, f0, None)
    a_prev, f_prev, d_prev = 0.0, f0, d0
    alpha = alpha0
    bracket = None
    while n < max_evals:
        f, d, payload = phi(alpha)
        n += 1
        if np.isfinite(f) and f < best[1]:
            best = (alpha, f, payload)
        if not np.isfinite(f) or f > f0 + c1 * alpha * d0 or (n > 1 and f >= f_prev):
            bracket = (a_prev, f_prev, d_prev, alpha, f, d)
            break
        if abs(d) <= -c2 * d0:
            return alpha, f, payload, n
        if d >= 0:
            bracket = (alpha, f, d, a_prev, f_prev, d_prev)
            break
        a_prev, f_prev, d_prev = alpha, f, d
        alpha = min(2.0 * alpha, alpha_max)
    if bracket is None:
        return None, best[1], best, n

    lo, f_lo, d_lo, hi, f_hi, d_hi = bracket
    while n < max_evals:
        if not np.isfinite(f_hi):
            alpha = 0.5 * (lo + hi)
        else:
            alpha = _interpolate(lo, f_lo, d_lo, hi, f_hi, d_hi)
        if abs(hi - lo) <= 1e-16 * max(1.0, abs(lo)):
            break
        f, d, payload = phi(alpha)
        n += 1
        if np.isfinite(f) and f < best[1]:
            best = (alpha, f, payload)
        if not np.isfinite(f) or f > f0 + c1 * alpha * d0 or f >= f_lo:
            hi, f_hi, d_hi = alpha, f, d
        else:
            if abs(d) <= -c2 * d0:
                return alpha, f, payload, n
            if d * (hi - lo) >= 0:
                hi, f_hi, d_hi = lo, f_lo, d_lo
            lo, f_lo, d_lo = alpha, f, d
    return None, best[1], best, n


def lbfgs_minimize(f_and_grad, params0, m_hist=50, max_iter=500, tol=1e-12, lr=1.0,
                   c1=1e-4, c2=0.9, max_ls_evals=25, callback=None):
    """Minimize ``f_and_grad`` from ``params0``.

    The first step length is ``lr * min(1, 1/|g|_1)``; later iterations
    start from ``lr``.  Stops when the gradient norm is at most ``tol``,
    after ``max_iter`` iterations, or when the line search fails (the best
    point so far is returned with status ``line_search_failed``).
    ``callback(iteration, x, f, g)`` is called after every accepted step.
    """
    x = np.array(params0, dtype=np.float64)
    f, g = f_and_grad(x)
    n_evals = 1
    if not np.isfinite(f):
        raise DivergedTrainingError(0, f)
    state = LbfgsState(m_hist=m_hist)
    trace = [{"iteration": 0, "f": float(f), "grad_norm": float(np.linalg.norm(g)), "step": 0.0, "n_evals": 1}]
    status = "max_iter"

    for it in range(1, max_iter + 1):
        if np.linalg.norm(g) <= tol:
            status = "converged"
            break
        d = state.direction(g) if state.s_hist else -g
        d0 = float(g @ d)
        if d0 >= 0:
            state = LbfgsState(m_hist=m_hist)
            d = -g
            d0 = float(g @ d)
        alpha0 = lr * min(1.0, 1.0 / np.abs(g).sum()) if not state.s_hist else lr

        def phi(alpha):
            fa, ga = f_and_grad(x + alpha * d)
            return fa, float(ga @ d), ga

        alpha, f_new, payload, n_ls = strong_wolfe(phi, f, d0, alpha0, c1, c2, max_ls_evals)
        n_evals += n_ls
        if alpha is None:
            best_alpha, best_f, best_g = payload
            if best_g is not None and best_f < f:
                s = best_alpha * d
                x, f, g = x + s, best_f, best_g
                trace.append({"iteration": it, "f": float(f), "grad_norm": float(np.linalg.norm(g)),
                              "step": float(best_alpha), "n_evals": n_evals})
                if callback is not None:
                    callback(it, x, f, g)
            status = "line_search_failed"
            break
        s = alpha * d
        g_new = payload
        state.push(s, g_new - g)
        x, f, g = x + s, f_new, g_new
        state.iteration = it
        trace.append({"iteration": it, "f": float(f), "grad_norm": float(np.linalg.norm(g)),
                      "step": float(alpha), "n_evals": n_evals})
        if callback is not None:
            callback(it, x, f, g)
    else:
        if np.linalg.norm(g) <= tol:
            status = "converged"
    return LbfgsResult(x, float(f), g, status, len(trace) - 1, n_evals, trace)
