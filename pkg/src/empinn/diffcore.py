"""Second-order input jets and a reverse-mode tape over jet programs.

A jet batch is stored as one float64 array of shape ``(C, N, W)``:
channel 0 holds values, channels ``1..k`` hold first derivatives with
respect to the tracked coordinates, and the remaining channels hold pure
second derivatives for a subset of those coordinates.  Affine maps act on
all channels with a single GEMM on the ``(C*N, W)`` view; nonlinear
primitives run as compiled per-element kernels.

Parameter gradients come from a tape of backward closures recorded while
the jet program executes, so ``d/dtheta`` of anything built from jets
(residuals, mean squares, ...) is exact.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


class ConfigurationError(ValueError):
    """Shapes, layouts or settings that cannot describe a valid computation."""


class DivergedTrainingError(FloatingPointError):
    def __init__(self, step, value):
        self.step = step
        self.value = value
        super().__init__(f"non-finite loss {value!r} at step {step}")


@dataclass(frozen=True)
class JetLayout:
    """Which derivatives a jet carries.

    ``coords`` names every tracked coordinate (one first-derivative channel
    each); ``second`` lists the coordinates that also get a pure
    second-derivative channel.
    """

    coords: tuple = ()
    second: tuple = ()
    parents: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "coords", tuple(self.coords))
        object.__setattr__(self, "second", tuple(self.second))
        unknown = [c for c in self.second if c not in self.coords]
        if unknown:
            raise ConfigurationError(f"second derivative requested for untracked coordinate(s) {unknown}")
        if len(set(self.coords)) != len(self.coords) or len(set(self.second)) != len(self.second):
            raise ConfigurationError("duplicate coordinate in jet layout")
        parents = np.array([1 + self.coords.index(c) for c in self.second], dtype=np.int64)
        object.__setattr__(self, "parents", parents)

    @property
    def n_first(self):
        return len(self.coords)

    @property
    def n_channels(self):
        return 1 + len(self.coords) + len(self.second)

    def d1_channel(self, name):
        try:
            return 1 + self.coords.index(name)
        except ValueError:
            raise ConfigurationError(f"jet does not track d/d{name}") from None

    def d2_channel(self, name):
        try:
            return 1 + len(self.coords) + self.second.index(name)
        except ValueError:
            raise ConfigurationError(f"jet does not track d2/d{name}2") from None


VALUE_ONLY = JetLayout()


# --------------------------------------------------------------------------
# tape
# --------------------------------------------------------------------------


class Tape:
    """Records backward closures in execution order."""

    def __init__(self):
        self._ops = []

    def leaf(self, array):
        return Var(np.asarray(array, dtype=np.float64), tape=self, needs_grad=True)

    def record(self, backward):
        self._ops.append(backward)

    def backward(self, out):
        if out.value.size != 1:
            raise ConfigurationError("backward() needs a scalar output")
        out.grad = np.ones_like(out.value)
        for op in reversed(self._ops):
            op()
        self._ops.clear()


class Var:
    """An array on a tape.  Arithmetic on Vars is recorded for reverse mode."""

    __slots__ = ("value", "grad", "tape", "needs_grad", "_owns_grad")
    __array_priority__ = 100

    def __init__(self, value, tape=None, needs_grad=False):
        self.value = value
        self.grad = None
        self.tape = tape
        self.needs_grad = needs_grad
        self._owns_grad = False

    @property
    def shape(self):
        return self.value.shape

    def accumulate(self, g, owned=False):
        """Add ``g`` into ``grad``.  ``owned`` marks ``g`` as a fresh array nobody else holds."""
        if not self.needs_grad:
            return
        if self.grad is None:
            self.grad = g
            self._owns_grad = owned
        elif self._owns_grad:
            self.grad += g
        else:
            self.grad = self.grad + g
            self._owns_grad = True

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(other))

    def __rsub__(self, other):
        return add(other, neg(self))

    def __neg__(self):
        return neg(self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __pow__(self, p):
        return power(self, p)

    def __repr__(self):
        return f"Var(shape={self.value.shape}, needs_grad={self.needs_grad})"


def value_of(x):
    return x.value if isinstance(x, Var) else x


def _tracked(*xs):
    """Return the tape if any argument needs a gradient, else None."""
    for x in xs:
        if isinstance(x, Var) and x.needs_grad:
            return x.tape
    return None


def _wrap(value, tape):
    return Var(value, tape=tape, needs_grad=True) if tape is not None else value


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    g = g.sum(axis=tuple(range(g.ndim - len(shape))))
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# --------------------------------------------------------------------------
# plain array arithmetic (residuals, losses)
# --------------------------------------------------------------------------


def add(a, b):
    av, bv = value_of(a), value_of(b)
    tape = _tracked(a, b)
    out = _wrap(av + bv, tape)
    if tape is not None:

        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Var):
                a.accumulate(_unbroadcast(g, np.shape(av)))
            if isinstance(b, Var):
                b.accumulate(_unbroadcast(g, np.shape(bv)))

        tape.record(backward)
    return out


def neg(a):
    tape = _tracked(a)
    out = _wrap(-value_of(a), tape)
    if tape is not None:
        tape.record(lambda: out.grad is not None and a.accumulate(-out.grad))
    return out


def mul(a, b):
    av, bv = value_of(a), value_of(b)
    tape = _tracked(a, b)
    out = _wrap(av * bv, tape)
    if tape is not None:

        def backward():
            g = out.grad
            if g is None:
                return
            if isinstance(a, Var):
                a.accumulate(_unbroadcast(g * bv, np.shape(av)))
            if isinstance(b, Var):
                b.accumulate(_unbroadcast(g * av, np.shape(bv)))

        tape.record(backward)
    return out


def power(a, p):
    if not float(p).is_integer() or p < 1:
        raise ConfigurationError("only positive integer powers are supported")
    p = int(p)
    av = value_of(a)
    tape = _tracked(a)
    out = _wrap(av**p, tape)
    if tape is not None:
        tape.record(lambda: out.grad is not None and a.accumulate(out.grad * p * av ** (p - 1)))
    return out


def mean_square(a):
    """Mean of squared entries; pairwise summation in storage order."""
    av = value_of(a)
    if av.size == 0:
        raise ConfigurationError("mean of an empty point set")
    tape = _tracked(a)
    out = _wrap(np.asarray(np.mean(av * av)), tape)
    if tape is not None:
        tape.record(lambda: out.grad is not None and a.accumulate(out.grad * (2.0 / av.size) * av))
    return out


# --------------------------------------------------------------------------
# compiled jet kernels
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _tanh_fwd(z, t_val, k, parents):
    C, N, W = z.shape
    out = np.empty_like(z)
    s1 = np.empty(W)
    s2 = np.empty(W)
    for n in range(N):
        for w in range(W):
            t = t_val[n, w]
            s1[w] = 1.0 - t * t
            s2[w] = -2.0 * t * s1[w]
            out[0, n, w] = t
        for i in range(1, k + 1):
            for w in range(W):
                out[i, n, w] = s1[w] * z[i, n, w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                zp = z[p, n, w]
                out[c, n, w] = s2[w] * zp * zp + s1[w] * z[c, n, w]
    return out


@numba.njit(cache=True)
def _tanh_bwd(g, z, t_val, k, parents):
    C, N, W = z.shape
    dz = np.empty_like(z)
    s1 = np.empty(W)
    s2 = np.empty(W)
    s3 = np.empty(W)
    for n in range(N):
        for w in range(W):
            t = t_val[n, w]
            s1[w] = 1.0 - t * t
            s2[w] = -2.0 * t * s1[w]
            s3[w] = -2.0 * s1[w] * (1.0 - 3.0 * t * t)
            dz[0, n, w] = g[0, n, w] * s1[w]
        for i in range(1, k + 1):
            for w in range(W):
                dz[0, n, w] += g[i, n, w] * s2[w] * z[i, n, w]
                dz[i, n, w] = g[i, n, w] * s1[w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                gc = g[c, n, w]
                zp = z[p, n, w]
                dz[0, n, w] += gc * (s3[w] * zp * zp + s2[w] * z[c, n, w])
                dz[p, n, w] += 2.0 * gc * s2[w] * zp
                dz[c, n, w] = gc * s1[w]
    return dz


@numba.njit(cache=True)
def _hadamard_fwd(a, b, k, parents):
    C, N, W = a.shape
    out = np.empty_like(a)
    for n in range(N):
        for w in range(W):
            out[0, n, w] = a[0, n, w] * b[0, n, w]
        for i in range(1, k + 1):
            for w in range(W):
                out[i, n, w] = a[i, n, w] * b[0, n, w] + a[0, n, w] * b[i, n, w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                out[c, n, w] = a[c, n, w] * b[0, n, w] + 2.0 * a[p, n, w] * b[p, n, w] + a[0, n, w] * b[c, n, w]
    return out


@numba.njit(cache=True)
def _hadamard_bwd(g, a, b, k, parents):
    C, N, W = a.shape
    da = np.empty_like(a)
    db = np.empty_like(b)
    for n in range(N):
        for w in range(W):
            da[0, n, w] = g[0, n, w] * b[0, n, w]
            db[0, n, w] = g[0, n, w] * a[0, n, w]
        for i in range(1, k + 1):
            for w in range(W):
                gi = g[i, n, w]
                da[0, n, w] += gi * b[i, n, w]
                db[0, n, w] += gi * a[i, n, w]
                da[i, n, w] = gi * b[0, n, w]
                db[i, n, w] = gi * a[0, n, w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                gc = g[c, n, w]
                da[0, n, w] += gc * b[c, n, w]
                db[0, n, w] += gc * a[c, n, w]
                da[p, n, w] += 2.0 * gc * b[p, n, w]
                db[p, n, w] += 2.0 * gc * a[p, n, w]
                da[c, n, w] = gc * b[0, n, w]
                db[c, n, w] = gc * a[0, n, w]
    return da, db


@numba.njit(cache=True)
def _act_row(z, t_val, n, k, parents, use_tanh, out, s1, s2, s3):
    """Activation jet of row ``n`` into ``out`` (C, W), plus the first three derivatives of sigma."""
    W = z.shape[2]
    for w in range(W):
        if use_tanh:
            t = t_val[n, w]
            s1[w] = 1.0 - t * t
            s2[w] = -2.0 * t * s1[w]
            s3[w] = -2.0 * s1[w] * (1.0 - 3.0 * t * t)
        else:
            t = z[0, n, w]
            s1[w] = 1.0
            s2[w] = 0.0
            s3[w] = 0.0
        out[0, w] = t
    for i in range(1, k + 1):
        for w in range(W):
            out[i, w] = s1[w] * z[i, n, w]
    for j in range(parents.shape[0]):
        c = k + 1 + j
        p = parents[j]
        for w in range(W):
            zp = z[p, n, w]
            out[c, w] = s2[w] * zp * zp + s1[w] * z[c, n, w]


@numba.njit(cache=True)
def _act_row_bwd(da, z, n, k, parents, s1, s2, s3, dz):
    W = z.shape[2]
    for w in range(W):
        dz[0, n, w] = da[0, w] * s1[w]
    for i in range(1, k + 1):
        for w in range(W):
            dz[0, n, w] += da[i, w] * s2[w] * z[i, n, w]
            dz[i, n, w] = da[i, w] * s1[w]
    for j in range(parents.shape[0]):
        c = k + 1 + j
        p = parents[j]
        for w in range(W):
            gc = da[c, w]
            zp = z[p, n, w]
            dz[0, n, w] += gc * (s3[w] * zp * zp + s2[w] * z[c, n, w])
            dz[p, n, w] += 2.0 * gc * s2[w] * zp
            dz[c, n, w] = gc * s1[w]


@numba.njit(cache=True)
def _em_fwd(z1, z2, t1, t2, k, parents, use_tanh):
    C, N, W = z1.shape
    out = np.empty_like(z1)
    a = np.empty((C, W))
    b = np.empty((C, W))
    s = np.empty((6, W))
    for n in range(N):
        _act_row(z1, t1, n, k, parents, use_tanh, a, s[0], s[1], s[2])
        _act_row(z2, t2, n, k, parents, use_tanh, b, s[3], s[4], s[5])
        for w in range(W):
            out[0, n, w] = a[0, w] * b[0, w]
        for i in range(1, k + 1):
            for w in range(W):
                out[i, n, w] = a[i, w] * b[0, w] + a[0, w] * b[i, w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                out[c, n, w] = a[c, w] * b[0, w] + 2.0 * a[p, w] * b[p, w] + a[0, w] * b[c, w]
    return out


@numba.njit(cache=True)
def _em_bwd(g, z1, z2, t1, t2, k, parents, use_tanh):
    C, N, W = z1.shape
    dz1 = np.empty_like(z1)
    dz2 = np.empty_like(z2)
    a = np.empty((C, W))
    b = np.empty((C, W))
    da = np.empty((C, W))
    db = np.empty((C, W))
    s = np.empty((6, W))
    for n in range(N):
        _act_row(z1, t1, n, k, parents, use_tanh, a, s[0], s[1], s[2])
        _act_row(z2, t2, n, k, parents, use_tanh, b, s[3], s[4], s[5])
        for w in range(W):
            da[0, w] = g[0, n, w] * b[0, w]
            db[0, w] = g[0, n, w] * a[0, w]
        for i in range(1, k + 1):
            for w in range(W):
                gi = g[i, n, w]
                da[0, w] += gi * b[i, w]
                db[0, w] += gi * a[i, w]
                da[i, w] = gi * b[0, w]
                db[i, w] = gi * a[0, w]
        for j in range(parents.shape[0]):
            c = k + 1 + j
            p = parents[j]
            for w in range(W):
                gc = g[c, n, w]
                da[0, w] += gc * b[c, w]
                db[0, w] += gc * a[c, w]
                da[p, w] += 2.0 * gc * b[p, w]
                db[p, w] += 2.0 * gc * a[p, w]
                da[c, w] = gc * b[0, w]
                db[c, w] = gc * a[0, w]
        _act_row_bwd(da, z1, n, k, parents, s[0], s[1], s[2], dz1)
        _act_row_bwd(db, z2, n, k, parents, s[3], s[4], s[5], dz2)
    return dz1, dz2


# --------------------------------------------------------------------------
# jet primitives
# --------------------------------------------------------------------------


def _check_jet(x, layout, what):
    v = value_of(x)
    if v.ndim != 3 or v.shape[0] != layout.n_channels:
        raise ConfigurationError(
            f"{what}: expected jet with {layout.n_channels} channels, got array of shape {v.shape}"
        )
    return v


def jet_affine(W, b, x, layout, name="affine"):
    """value' = W value + b, derivative channels' = W derivative channels."""
    Wv, bv = value_of(W), value_of(b)
    xv = _check_jet(x, layout, name)
    C, N, n_in = xv.shape
    if Wv.ndim != 2 or Wv.shape[1] != n_in or bv.shape != (Wv.shape[0],):
        raise ConfigurationError(
            f"{name}: weight {Wv.shape} / bias {np.shape(bv)} do not match incoming width {n_in}"
        )
    x2 = xv.reshape(C * N, n_in)
    out2 = x2 @ Wv.T
    out2[:N] += bv
    tape = _tracked(W, b, x)
    out = _wrap(out2.reshape(C, N, Wv.shape[0]), tape)
    if tape is not None:

        def backward():
            g = out.grad
            if g is None:
                return
            g2 = g.reshape(C * N, -1)
            if isinstance(W, Var) and W.needs_grad:
                W.accumulate(g2.T @ x2)
            if isinstance(b, Var) and b.needs_grad:
                b.accumulate(g[0].sum(axis=0))
            if isinstance(x, Var) and x.needs_grad:
                x.accumulate((g2 @ Wv).reshape(C, N, n_in), owned=True)

        tape.record(backward)
    return out


def jet_activation(x, act, layout):
    """Apply tanh or identity with the order-2 chain rule on every channel."""
    if act == "identity":
        return x
    if act != "tanh":
        raise ConfigurationError(f"unsupported activation {act!r}")
    zv = np.ascontiguousarray(_check_jet(x, layout, "activation"))
    out_v = _tanh_fwd(zv, np.tanh(zv[0]), layout.n_first, layout.parents)
    tape = _tracked(x)
    out = _wrap(out_v, tape)
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            t_val = out_v[0]
            dz = _tanh_bwd(np.ascontiguousarray(out.grad), zv, t_val, layout.n_first, layout.parents)
            x.accumulate(dz, owned=True)

        tape.record(backward)
    return out


def jet_hadamard(a, b, layout):
    """Element-wise product with the order-2 Leibniz rule."""
    av = np.ascontiguousarray(_check_jet(a, layout, "hadamard"))
    bv = np.ascontiguousarray(_check_jet(b, layout, "hadamard"))
    if av.shape != bv.shape:
        raise ConfigurationError(f"hadamard: width/point mismatch {av.shape} vs {bv.shape}")
    tape = _tracked(a, b)
    out = _wrap(_hadamard_fwd(av, bv, layout.n_first, layout.parents), tape)
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            da, db = _hadamard_bwd(np.ascontiguousarray(out.grad), av, bv, layout.n_first, layout.parents)
            if isinstance(a, Var):
                a.accumulate(da, owned=True)
            if isinstance(b, Var):
                b.accumulate(db, owned=True)

        tape.record(backward)
    return out


def jet_em_product(z1, z2, act, layout):
    """act(z1) * act(z2) as one fused primitive; equals jet_hadamard of two jet_activation calls."""
    if act not in ("tanh", "identity"):
        raise ConfigurationError(f"unsupported activation {act!r}")
    z1v = np.ascontiguousarray(_check_jet(z1, layout, "em_product"))
    z2v = np.ascontiguousarray(_check_jet(z2, layout, "em_product"))
    if z1v.shape != z2v.shape:
        raise ConfigurationError(f"em_product: width/point mismatch {z1v.shape} vs {z2v.shape}")
    use_tanh = act == "tanh"
    t1 = np.tanh(z1v[0]) if use_tanh else z1v[0]
    t2 = np.tanh(z2v[0]) if use_tanh else z2v[0]
    k, parents = layout.n_first, layout.parents
    tape = _tracked(z1, z2)
    out = _wrap(_em_fwd(z1v, z2v, t1, t2, k, parents, use_tanh), tape)
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            d1, d2 = _em_bwd(np.ascontiguousarray(out.grad), z1v, z2v, t1, t2, k, parents, use_tanh)
            if isinstance(z1, Var):
                z1.accumulate(d1, owned=True)
            if isinstance(z2, Var):
                z2.accumulate(d2, owned=True)

        tape.record(backward)
    return out


def jet_add(a, b):
    if np.shape(value_of(a)) != np.shape(value_of(b)):
        raise ConfigurationError(f"jet_add: shape mismatch {np.shape(value_of(a))} vs {np.shape(value_of(b))}")
    return add(a, b)


def channel(x, idx):
    """Slice one channel out of a jet, keeping it on the tape."""
    xv = value_of(x)
    tape = _tracked(x)
    out = _wrap(xv[idx], tape)
    if tape is not None:

        def backward():
            if out.grad is None:
                return
            g = np.zeros_like(xv)
            g[idx] = out.grad
            x.accumulate(g)

        tape.record(backward)
    return out


class Jet:
    """Named access to the channels of a width-1 jet batch.

    ``data`` is a ``(C, N)`` array or Var (or ``(C,)`` for a single point).
    Accessors return arrays or Vars, so residual formulas written against a
    Jet work both for plain evaluation and under a tape.
    """

    def __init__(self, data, layout):
        if np.shape(value_of(data))[0] != layout.n_channels:
            raise ConfigurationError("jet data does not match layout")
        self.data = data
        self.layout = layout

    @classmethod
    def from_parts(cls, layout, value, d1=None, d2=None):
        d1 = d1 or {}
        d2 = d2 or {}
        value = np.asarray(value, dtype=np.float64)
        data = np.zeros((layout.n_channels,) + value.shape)
        data[0] = value
        for name, v in d1.items():
            data[layout.d1_channel(name)] = v
        for name, v in d2.items():
            data[layout.d2_channel(name)] = v
        return cls(data, layout)

    def _get(self, idx):
        return channel(self.data, idx) if isinstance(self.data, Var) else self.data[idx]

    @property
    def value(self):
        return self._get(0)

    def d1(self, name):
        return self._get(self.layout.d1_channel(name))

    def d2(self, name):
        return self._get(self.layout.d2_channel(name))


def loss_and_param_grad(arrays, loss_fn, step=None):
    """Evaluate ``loss_fn`` on taped copies of ``arrays`` and return (loss, flat gradient).

    ``arrays`` is a sequence of parameter arrays in flattening order;
    ``loss_fn`` receives the matching list of Vars and returns a scalar Var.
    """
    tape = Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = loss_fn(leaves)
    loss = float(value_of(out))
    if not np.isfinite(loss):
        raise DivergedTrainingError(step, loss)
    if isinstance(out, Var) and out.needs_grad:
        tape.backward(out)
    grads = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value) for leaf in leaves]
    flat = np.concatenate([g.ravel() for g in grads]) if grads else np.zeros(0)
    return loss, flat
