"""EM network, plain MLP baseline, input embeddings and output transforms."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .diffcore import (
    ConfigurationError,
    Jet,
    JetLayout,
    jet_activation,
    jet_add,
    jet_affine,
    jet_em_product,
    jet_hadamard,
    value_of,
)

EMBEDDING_KINDS = ("none", "gaussian_fourier", "periodic_1d_plus_time", "periodic_x_and_t")


@dataclass(frozen=True)
class EmbeddingSpec:
    kind: str = "none"
    scale: float = 1.0
    num_features: int = 0
    m: int = 0
    period_x: float = 2.0
    period_t: float = 2.0 * np.pi

    def __post_init__(self):
        if self.kind not in EMBEDDING_KINDS:
            raise ConfigurationError(f"unknown embedding kind {self.kind!r}")
        if self.kind == "gaussian_fourier" and (self.num_features < 1 or self.scale <= 0):
            raise ConfigurationError("gaussian_fourier needs num_features >= 1 and scale > 0")
        if self.m < 0:
            raise ConfigurationError("m must be non-negative")
        if self.period_x <= 0 or self.period_t <= 0:
            raise ConfigurationError("periods must be positive")

    def output_dim(self, n_inputs):
        if self.kind == "none":
            return n_inputs
        if self.kind == "gaussian_fourier":
            return 2 * self.num_features
        if self.kind == "periodic_1d_plus_time":
            return 2 + 2 * self.m
        return 5


@dataclass(frozen=True)
class NetworkConfig:
    arch: str = "em"
    num_blocks: int = 1
    width: int = 64
    activation: str = "tanh"
    embedding: EmbeddingSpec = field(default_factory=EmbeddingSpec)
    output_transform: str = "none"
    out_dim: int = 1
    n_inputs: int = 2

    def __post_init__(self):
        if isinstance(self.embedding, dict):
            object.__setattr__(self, "embedding", EmbeddingSpec(**self.embedding))
        if self.arch not in ("em", "mlp"):
            raise ConfigurationError(f"unknown architecture {self.arch!r}")
        if self.width < 1 or self.num_blocks < 1 or self.out_dim < 1:
            raise ConfigurationError("width, num_blocks and out_dim must be positive")
        if self.activation not in ("tanh", "identity"):
            raise ConfigurationError(f"unsupported activation {self.activation!r}")
        if self.output_transform not in ("none", "adf_helmholtz"):
            raise ConfigurationError(f"unknown output transform {self.output_transform!r}")

    @property
    def input_dim(self):
        return self.embedding.output_dim(self.n_inputs)


@dataclass
class NetworkParams:
    """Weights ``W`` are stored (out, in) so that a layer computes ``W @ h + b``."""

    stem: list = field(default_factory=list)
    blocks: list = field(default_factory=list)
    hidden: list = field(default_factory=list)
    head: tuple = ()
    fourier: np.ndarray | None = None

    def arrays(self):
        out = []
        for W, b in self.stem:
            out += [W, b]
        for block in self.blocks:
            for W, b in block:
                out += [W, b]
        for W, b in self.hidden:
            out += [W, b]
        out += list(self.head)
        return out

    def with_arrays(self, arrays):
        it = iter(arrays)

        def pairs(n):
            return [(next(it), next(it)) for _ in range(n)]

        return NetworkParams(
            stem=pairs(len(self.stem)),
            blocks=[pairs(len(block)) for block in self.blocks],
            hidden=pairs(len(self.hidden)),
            head=tuple(next(it) for _ in self.head),
            fourier=self.fourier,
        )

    def flatten(self):
        return np.concatenate([np.ravel(a) for a in self.arrays()])

    def unflatten(self, flat):
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != self.size:
            raise ConfigurationError(f"flat vector has {flat.size} entries, params need {self.size}")
        out, pos = [], 0
        for a in self.arrays():
            out.append(flat[pos : pos + a.size].reshape(a.shape).copy())
            pos += a.size
        return self.with_arrays(out)

    @property
    def size(self):
        return sum(np.size(a) for a in self.arrays())


def init_params(config, seed):
    """Xavier-normal weights, zero biases; Gaussian Fourier matrix drawn once."""
    rng = np.random.default_rng(seed)

    def dense(n_in, n_out):
        std = np.sqrt(2.0 / (n_in + n_out))
        return (rng.normal(0.0, std, size=(n_out, n_in)), np.zeros(n_out))

    d_in, w = config.input_dim, config.width
    params = NetworkParams()
    if config.arch == "em":
        params.stem = [dense(d_in, w), dense(d_in, w)]
        params.blocks = [[dense(w, w) for _ in range(4)] for _ in range(config.num_blocks)]
    else:
        params.hidden = [dense(d_in if i == 0 else w, w) for i in range(config.num_blocks)]
    params.head = dense(w, config.out_dim)
    emb = config.embedding
    if emb.kind == "gaussian_fourier":
        params.fourier = rng.normal(0.0, emb.scale, size=(emb.num_features, config.n_inputs))
    return params


def param_count(config):
    d_in, w, o = config.input_dim, config.width, config.out_dim
    head = o * w + o
    if config.arch == "em":
        return 2 * (w * d_in + w) + 4 * config.num_blocks * (w * w + w) + head
    return (w * d_in + w) + (config.num_blocks - 1) * (w * w + w) + head


# --------------------------------------------------------------------------
# embeddings
# --------------------------------------------------------------------------


def _periodic_features(x, period, m):
    """(cos k w x, sin k w x) for k = 1..m, w = 2 pi / period, with first and second x-derivatives.

    ``x`` is first reduced modulo the period so periodic images give bit-identical features.
    """
    k = np.arange(1, m + 1) * (2.0 * np.pi / period)
    phase = np.mod(x, period)[:, None] * k
    c, s = np.cos(phase), np.sin(phase)
    value = np.empty((x.size, 2 * m))
    d1 = np.empty_like(value)
    d2 = np.empty_like(value)
    value[:, 0::2], value[:, 1::2] = c, s
    d1[:, 0::2], d1[:, 1::2] = -k * s, k * c
    d2[:, 0::2], d2[:, 1::2] = -k * k * c, -k * k * s
    return value, d1, d2


def embed(points, coord_names, spec, layout, fourier=None):
    """Embed raw coordinates and seed the jet channels with exact derivatives.

    ``points`` is ``(N, d)`` with columns named by ``coord_names``.  Returns
    a ``(C, N, D)`` jet array for ``layout``.
    """
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    n, d = points.shape
    if d != len(coord_names):
        raise ConfigurationError(f"points have {d} columns, expected coordinates {coord_names}")
    for c in layout.coords:
        if c not in coord_names:
            raise ConfigurationError(f"layout tracks {c!r}, which is not an input coordinate")
    col = {c: i for i, c in enumerate(coord_names)}
    kind = spec.kind
    dim = spec.output_dim(d)
    # per raw coordinate: (first, second) derivative of every feature
    value = np.zeros((n, dim))
    deriv = {c: (np.zeros((n, dim)), np.zeros((n, dim))) for c in coord_names}

    if kind == "none":
        value[:] = points
        for c, i in col.items():
            deriv[c][0][:, i] = 1.0
    elif kind == "gaussian_fourier":
        if fourier is None or fourier.shape != (spec.num_features, d):
            raise ConfigurationError("gaussian_fourier embedding needs the Fourier matrix B of shape (features, d)")
        phase = points @ fourier.T
        c_, s_ = np.cos(phase), np.sin(phase)
        f = spec.num_features
        value[:, :f], value[:, f:] = c_, s_
        for c, i in col.items():
            bi = fourier[:, i]
            deriv[c][0][:, :f], deriv[c][0][:, f:] = -s_ * bi, c_ * bi
            deriv[c][1][:, :f], deriv[c][1][:, f:] = -c_ * bi**2, -s_ * bi**2
    elif kind == "periodic_1d_plus_time":
        if "t" not in col or "x" not in col:
            raise ConfigurationError("periodic_1d_plus_time needs coordinates 't' and 'x'")
        t, x = points[:, col["t"]], points[:, col["x"]]
        value[:, 0] = t
        value[:, 1] = 1.0
        deriv["t"][0][:, 0] = 1.0
        if spec.m:
            v, d1, d2 = _periodic_features(x, spec.period_x, spec.m)
            value[:, 2:] = v
            deriv["x"][0][:, 2:] = d1
            deriv["x"][1][:, 2:] = d2
    else:  # periodic_x_and_t
        if "t" not in col or "x" not in col:
            raise ConfigurationError("periodic_x_and_t needs coordinates 't' and 'x'")
        t, x = points[:, col["t"]], points[:, col["x"]]
        vt, dt1, dt2 = _periodic_features(t, spec.period_t, 1)
        vx, dx1, dx2 = _periodic_features(x, spec.period_x, 1)
        value[:, 0:2], value[:, 2], value[:, 3:5] = vt, 1.0, vx
        deriv["t"][0][:, 0:2], deriv["t"][1][:, 0:2] = dt1, dt2
        deriv["x"][0][:, 3:5], deriv["x"][1][:, 3:5] = dx1, dx2

    jet = np.zeros((layout.n_channels, n, dim))
    jet[0] = value
    for c in layout.coords:
        jet[layout.d1_channel(c)] = deriv[c][0]
    for c in layout.second:
        jet[layout.d2_channel(c)] = deriv[c][1]
    return jet


# --------------------------------------------------------------------------
# forward pass
# --------------------------------------------------------------------------


def _em_layer(pair_a, pair_b, h, act, layout):
    return jet_em_product(jet_affine(*pair_a, h, layout), jet_affine(*pair_b, h, layout), act, layout)


def forward(params, config, seed, layout):
    """Propagate an embedded jet batch ``(C, N, D)`` to the ``(C, N, out_dim)`` output jet."""
    act = config.activation
    if config.arch == "em":
        if len(params.stem) != 2:
            raise ConfigurationError("EM network needs two stem layers")
        h = _em_layer(params.stem[0], params.stem[1], seed, act, layout)
        for block in params.blocks:
            h1 = _em_layer(block[0], block[1], h, act, layout)
            h2 = _em_layer(block[2], block[3], h1, act, layout)
            h = jet_add(h2, h)
    else:
        h = seed
        for W, b in params.hidden:
            h = jet_activation(jet_affine(W, b, h, layout), act, layout)
    return jet_affine(*params.head, h, layout, name="head")


def adf_jet(points, coord_names, layout):
    """phi(x, y) = (1 - x^2)(1 - y^2) with its exact derivatives, as a jet."""
    col = {c: i for i, c in enumerate(coord_names)}
    if set(col) != {"x", "y"}:
        raise ConfigurationError("adf_helmholtz requires 2-D inputs named x and y")
    x, y = points[:, col["x"]], points[:, col["y"]]
    fx, fy = 1.0 - x * x, 1.0 - y * y
    d1 = {"x": -2.0 * x * fy, "y": -2.0 * y * fx}
    d2 = {"x": -2.0 * fy, "y": -2.0 * fx}
    return Jet.from_parts(
        layout,
        fx * fy,
        d1={c: d1[c] for c in layout.coords},
        d2={c: d2[c] for c in layout.second},
    ).data


def apply_output_transform(u, points, coord_names, transform, layout, g=None):
    """u_bc = phi * u + g, applied channel-wise with the product rule.

    ``u`` is a ``(C, N, out_dim)`` jet; ``g`` an optional constant jet of the
    same shape (zero for the homogeneous Helmholtz boundary).
    """
    if transform == "none":
        return u
    phi = _transform_jet(points, coord_names, transform, layout, np.shape(value_of(u))[2])
    return _apply_phi(u, phi, layout, g)


def _transform_jet(points, coord_names, transform, layout, out_dim):
    if transform != "adf_helmholtz":
        raise ConfigurationError(f"unknown output transform {transform!r}")
    return np.repeat(adf_jet(points, coord_names, layout)[:, :, None], out_dim, axis=2)


def _apply_phi(u, phi, layout, g=None):
    out = jet_hadamard(u, phi, layout)
    if g is not None:
        out = jet_add(out, np.asarray(g, dtype=np.float64))
    return out


@dataclass
class PreparedInputs:
    """Embedded seed jet and output-transform jet for a fixed point set."""

    points: np.ndarray
    coord_names: tuple
    layout: JetLayout
    seed: np.ndarray
    phi: np.ndarray | None


def prepare_inputs(config, points, coord_names, layout, fourier=None):
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    seed = embed(points, coord_names, config.embedding, layout, fourier)
    phi = None
    if config.output_transform != "none":
        phi = _transform_jet(points, coord_names, config.output_transform, layout, config.out_dim)
    return PreparedInputs(points, tuple(coord_names), layout, seed, phi)


def run_prepared(params, config, prepared):
    u = forward(params, config, prepared.seed, prepared.layout)
    if prepared.phi is not None:
        u = _apply_phi(u, prepared.phi, prepared.layout)
    return u


def evaluate(params, config, points, coord_names, layout):
    """Network output jet (C, N, out_dim) at raw ``points``, embedding and transform included."""
    return run_prepared(params, config, prepare_inputs(config, points, coord_names, layout, params.fourier))


def predict(params, config, points, coord_names):
    """Plain values u(points), shape (N,) for scalar outputs."""
    u = value_of(evaluate(params, config, points, coord_names, JetLayout()))[0]
    return u[:, 0] if u.shape[1] == 1 else u


# --------------------------------------------------------------------------
# initialization-pathology probe
# --------------------------------------------------------------------------


def pathology_probe(config, seed, points, zero_second_factor=False):
    """Spread of du/dx across ``points`` for fresh MLP and EM nets in the linear regime.

    Both nets use identity activation and zero biases.  The MLP gets
    ``2 * num_blocks`` hidden layers of the same width, matching the EM
    net's count of width-to-width affine maps.  ``zero_second_factor``
    zeroes the stem's second weight matrix and each block's ``W2``.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 1)
    layout = JetLayout(("x",))
    em_cfg = replace(config, arch="em", activation="identity", embedding=EmbeddingSpec(), n_inputs=1,
                     output_transform="none")
    mlp_cfg = replace(em_cfg, arch="mlp", num_blocks=2 * config.num_blocks)

    spreads = {}
    for key, cfg in (("mlp_d1_spread", mlp_cfg), ("em_d1_spread", em_cfg)):
        params = init_params(cfg, seed)
        if key == "em_d1_spread" and zero_second_factor:
            params.stem[1] = (np.zeros_like(params.stem[1][0]), params.stem[1][1])
            for block in params.blocks:
                block[1] = (np.zeros_like(block[1][0]), block[1][1])
        out = value_of(evaluate(params, cfg, points, ("x",), layout))
        spreads[key] = float(np.std(out[layout.d1_channel("x"), :, 0]))
    return spreads
