"""Compact associative memory: a constant-size temporal attention cell.

The cell maintains a low-rank summary (mem, norm) of every (key, value)
pair it has seen, discounted exponentially. Updates are O(1) in stream
length; queries return a convex combination of stored values through
positive random features. A "thickened" variant keeps one summary slice
per grid value of the feature parameter rho and picks the slice matching
the streaming dispersion statistic at query time.

All state and weight fields are autodiff Tensors so meta-gradients flow
through both the update and the query paths.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import rf
from . import rng as rngmod
from .autodiff import Tensor, concat, matmul


class CamMemoryError(RuntimeError):
    """Raised for queries against empty or numerically degenerate memory."""


DENOM_GUARD = 1e-30


@dataclass(frozen=True)
class CamConfig:
    """Shapes and constants of one temporal-encoder stack."""

    input_dim: int
    qk_dim: int = 16
    heads: int = 1
    r: int = 16
    discount: float = 0.1
    mechanism: str = rf.FAVOR_PLUS
    rho: float = None
    num_layers: int = 2
    thickened: bool = False
    grid_size: int = 8
    orthogonal: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.discount < 0:
            raise ValueError(f"discount must be >= 0, got {self.discount}")
        if self.qk_dim % self.heads != 0:
            raise ValueError(
                f"heads must divide qk_dim, got {self.heads} and {self.qk_dim}")
        if self.input_dim % self.heads != 0:
            raise ValueError(
                f"heads must divide input_dim, got {self.heads} and {self.input_dim}")
        if self.mechanism == rf.HYPERBOLIC and self.r % 2 != 0:
            raise ValueError(f"hyperbolic features need even r, got {self.r}")
        if self.mechanism == rf.FAVOR_PP and not self.thickened:
            if self.rho is None or not (0.0 < self.rho < 1.0):
                raise ValueError(f"rho must lie strictly in (0,1), got {self.rho}")
        if self.thickened and self.grid_size < 1:
            raise ValueError(f"grid_size must be >= 1, got {self.grid_size}")
        if self.thickened and self.mechanism != rf.FAVOR_PP:
            raise ValueError("thickened mode requires the favor_pp mechanism")

    @property
    def head_dim(self):
        return self.qk_dim // self.heads

    @property
    def value_dim(self):
        return self.input_dim // self.heads

    @property
    def omega_rows(self):
        return self.r // 2 if self.mechanism == rf.HYPERBOLIC else self.r


def grid_centers(c):
    """rho grid: centers of the c equal sub-intervals of (0,1)."""
    return (2.0 * np.arange(1, c + 1) - 1.0) / (2.0 * c)


@dataclass(frozen=True)
class CamFeatures:
    """Sampled projection rows shared by all grid slices of one layer."""

    omega: np.ndarray       # (heads, rows, head_dim)
    omega_t: Tensor         # (heads, head_dim, rows), tape constant
    sq_norms: np.ndarray    # (heads, rows)
    grid: np.ndarray        # thickened rho grid, or None


def build_features(config, layer=0):
    rows = config.omega_rows
    gen = rngmod.make_generator(config.seed, f"cam-omega-layer{layer}")
    omega = np.stack([
        rf.sample_projection_matrix(gen, rows, config.head_dim,
                                    orthogonal=config.orthogonal)
        for _ in range(config.heads)])
    grid = grid_centers(config.grid_size) if config.thickened else None
    return CamFeatures(omega=omega,
                       omega_t=Tensor(omega.transpose(0, 2, 1)),
                       sq_norms=np.sum(omega**2, axis=2),
                       grid=grid)


def build_stack_features(config):
    return [build_features(config, layer) for layer in range(config.num_layers)]


@dataclass(frozen=True)
class CamLayerWeights:
    """Learned projections; heads partition the rows of w_q/w_k/w_v."""

    w_q: Tensor  # (qk_dim, input_dim)
    w_k: Tensor  # (qk_dim, input_dim)
    w_v: Tensor  # (input_dim, input_dim)


def init_weights(config, run_seed=0):
    """Gaussian init, std 1/sqrt(fan_in), one weight set per layer.

    Query/key projections carry an extra head_dim^(-1/4) temper so that
    initial feature exponents exp(w'z - |z|^2/2) stay far from the
    denominator underflow guard; the factor is absorbed into the learned
    weights rather than the update equations.
    """
    layers = []
    temper = 1.0 / config.head_dim**0.25
    for layer in range(config.num_layers):
        gen = rngmod.make_generator(run_seed, f"cam-weights-layer{layer}-{config.seed}")
        std = 1.0 / np.sqrt(config.input_dim)
        layers.append(CamLayerWeights(
            w_q=Tensor(std * temper * gen.standard_normal((config.qk_dim, config.input_dim)),
                       requires_grad=True),
            w_k=Tensor(std * temper * gen.standard_normal((config.qk_dim, config.input_dim)),
                       requires_grad=True),
            w_v=Tensor(std * gen.standard_normal((config.input_dim, config.input_dim)),
                       requires_grad=True)))
    return layers


@dataclass(frozen=True)
class CamState:
    """One layer's memory; constant-size regardless of t.

    Plain mode uses (mem, norm); thickened mode uses one slice pair per
    grid rho plus the running key statistics used to pick a slice.
    """

    t: int
    batch: int
    mem: Tensor = None          # (b, h, rows_or_r, value_dim) feature-indexed
    norm: Tensor = None         # (b, h, r)
    mem_grid: Tensor = None     # (c, b, h, r, value_dim)
    norm_grid: Tensor = None    # (c, b, h, r)
    key_sum: np.ndarray = None  # (b, h, head_dim)
    sq_sum: np.ndarray = None   # (b, h)
    last_index: np.ndarray = None  # (b, h) slice picked by the latest query


def cam_init(config, batch=1):
    b, h, r, dv = batch, config.heads, config.r, config.value_dim
    if config.thickened:
        c = config.grid_size
        return CamState(
            t=0, batch=batch,
            mem_grid=Tensor(np.zeros((c, b, h, r, dv))),
            norm_grid=Tensor(np.zeros((c, b, h, r))),
            key_sum=np.zeros((b, h, config.head_dim)),
            sq_sum=np.zeros((b, h)))
    return CamState(t=0, batch=batch,
                    mem=Tensor(np.zeros((b, h, r, dv))),
                    norm=Tensor(np.zeros((b, h, r))))


def stack_init(config, batch=1):
    return [cam_init(config, batch) for _ in range(config.num_layers)]


def detach_state(state):
    """Sever the state from the tape (truncation boundary)."""
    def d(t):
        return None if t is None else t.detach()
    return replace(state, mem=d(state.mem), norm=d(state.norm),
                   mem_grid=d(state.mem_grid), norm_grid=d(state.norm_grid))


def _stack0(tensors):
    return concat([t.reshape((1,) + t.shape) for t in tensors], axis=0)


def phi_features(config, features, z, rho=None):
    """Tape-domain positive feature map, input z: (..., h, head_dim)."""
    zz = (z * z).sum(axis=-1, keepdims=True)
    lead = z.shape[:-1]
    dots = matmul(z.reshape(lead + (1, config.head_dim)), features.omega_t)
    dots = dots.reshape(lead + (config.omega_rows,))
    if config.mechanism == rf.FAVOR_PLUS:
        scale = (zz * -0.5).exp() * (1.0 / np.sqrt(config.r))
        return scale * dots.exp()
    if config.mechanism == rf.HYPERBOLIC:
        scale = (zz * -0.5).exp() * (1.0 / np.sqrt(config.r))
        half = config.r // 2
        pairs = concat([dots.exp().reshape(lead + (half, 1)),
                        (-dots).exp().reshape(lead + (half, 1))], axis=-1)
        return scale * pairs.reshape(lead + (config.r,))
    # bounded tilted features at a fixed rho
    if rho is None:
        rho = config.rho
    a_hat, bcoef, ccoef, log_d = rf.favor_pp_constants(rho, config.head_dim)
    log_scale = log_d - 0.5 * np.log(config.r)
    row_term = Tensor(-a_hat * features.sq_norms)  # (h, rows)
    return (row_term + dots * bcoef + zz * ccoef + log_scale).exp()


def project_qkv(weights, xi, config):
    """xi: (b, input_dim) -> per-head q, k: (b, h, head_dim), v: (b, h, value_dim)."""
    b = xi.shape[0]
    q = matmul(xi, weights.w_q.T).reshape(b, config.heads, config.head_dim)
    k = matmul(xi, weights.w_k.T).reshape(b, config.heads, config.head_dim)
    v = matmul(xi, weights.w_v.T).reshape(b, config.heads, config.value_dim)
    return q, k, v


def _check_kv(state, config, k, v):
    b, h = state.batch, config.heads
    want_k = (b, h, config.head_dim)
    want_v = (b, h, config.value_dim)
    if tuple(k.shape) != want_k:
        raise ValueError(f"cam_update: key shape {tuple(k.shape)} != {want_k}")
    if tuple(v.shape) != want_v:
        raise ValueError(f"cam_update: value shape {tuple(v.shape)} != {want_v}")


def cam_update(state, k, v, config, features):
    """Fold one (key, value) pair into the memory; O(1) in stream length."""
    _check_kv(state, config, k, v)
    decay = float(np.exp(-config.discount))
    b, h = state.batch, config.heads
    vq = v.reshape(b, h, 1, config.value_dim)
    if not config.thickened:
        phi_k = phi_features(config, features, k)
        outer = phi_k.reshape(b, h, config.r, 1) * vq
        return replace(state, t=state.t + 1,
                       mem=state.mem * decay + outer,
                       norm=state.norm * decay + phi_k)
    slices_m, slices_n = [], []
    for rho in features.grid:
        phi_k = phi_features(config, features, k, rho=rho)
        slices_m.append(phi_k.reshape(b, h, config.r, 1) * vq)
        slices_n.append(phi_k)
    return replace(state, t=state.t + 1,
                   mem_grid=state.mem_grid * decay + _stack0(slices_m),
                   norm_grid=state.norm_grid * decay + _stack0(slices_n),
                   key_sum=state.key_sum + k.data,
                   sq_sum=state.sq_sum + np.sum(k.data**2, axis=-1))


def _delta_from(mem, norm, phi_q, config, b):
    """Convex read: mem' phi(q) / (phi(q)' norm), guarded."""
    h = config.heads
    den = (phi_q * norm).sum(axis=-1, keepdims=True)
    if np.any(den.data < DENOM_GUARD):
        raise CamMemoryError(
            "degenerate memory: attention denominator underflowed below 1e-30")
    num = matmul(phi_q.reshape(b, h, 1, config.r), mem).reshape(b, h, config.value_dim)
    return num / (den + DENOM_GUARD)


def cam_step(state, weights, xi, config, features):
    """Residual read xi + Delta(xi) for the plain (fixed-phi) cell."""
    if state.t < 1:
        raise CamMemoryError("empty memory: query before any stored pattern (t=0)")
    b = state.batch
    q = matmul(xi, weights.w_q.T).reshape(b, config.heads, config.head_dim)
    phi_q = phi_features(config, features, q)
    delta = _delta_from(state.mem, state.norm, phi_q, config, b)
    return xi + delta.reshape(b, config.input_dim)


def select_rho_indices(state, q_data, grid, t):
    """Streaming dispersion -> optimal rho -> nearest grid slice (per cell).

    Ties snap to the lower index. Pure numpy: slice choice is a control
    decision, not a differentiable quantity.
    """
    qq = np.sum(q_data * q_data, axis=-1)
    gamma = qq + (state.sq_sum + 2.0 * np.sum(q_data * state.key_sum, axis=-1)) / t
    gamma = np.maximum(gamma, 0.0)  # exact cancellation can round negative
    n = q_data.shape[-1]
    safe = np.where(gamma == 0, 1.0, gamma)
    rho = (np.sqrt((2 * safe + n) ** 2 + 8 * n * safe) - 2 * safe - n) / (4 * safe)
    rho = np.where(gamma == 0, 1.0 - 1e-6, rho)
    dist = np.abs(rho[..., None] - grid)
    return np.argmin(dist, axis=-1)


def cam_step_thickened(state, weights, xi, config, features):
    """Residual read through the grid slice matching the stream statistics."""
    if state.t < 1:
        raise CamMemoryError("empty memory: query before any stored pattern (t=0)")
    b, h, c = state.batch, config.heads, config.grid_size
    q = matmul(xi, weights.w_q.T).reshape(b, config.heads, config.head_dim)
    idx = select_rho_indices(state, q.data, features.grid, state.t)
    onehot = np.zeros((c, b, h))
    for j in range(c):
        onehot[j][idx == j] = 1.0
    deltas = []
    for j, rho in enumerate(features.grid):
        phi_q = phi_features(config, features, q, rho=rho)
        deltas.append(_delta_from(state.mem_grid[j], state.norm_grid[j],
                                  phi_q, config, b))
    picked = (_stack0(deltas) * Tensor(onehot[..., None])).sum(axis=0)
    new_state = replace(state, last_index=idx)
    return new_state, xi + picked.reshape(b, config.input_dim)


def cam_forward_batch(states, weights, xis, config, features_per_layer):
    """Full-stack forward for b independent cells: update, then read.

    states: one CamState per layer (batched over cells); xis: (b, input_dim).
    Returns (new_states, outputs).
    """
    out = xis
    new_states = []
    for layer, (state, lw, feats) in enumerate(zip(states, weights, features_per_layer)):
        q, k, v = project_qkv(lw, out, config)
        state = cam_update(state, k, v, config, feats)
        if config.thickened:
            state, out = cam_step_thickened(state, lw, out, config, feats)
        else:
            out = cam_step(state, lw, out, config, feats)
        new_states.append(state)
    return new_states, out


def serialize_state(state):
    """Named float64 arrays capturing the full state (fixed size in t)."""
    items = [("t", np.array([float(state.t)])),
             ("batch", np.array([float(state.batch)]))]
    for name in ("mem", "norm", "mem_grid", "norm_grid"):
        val = getattr(state, name)
        if val is not None:
            items.append((name, np.asarray(val.data, dtype=np.float64)))
    for name in ("key_sum", "sq_sum"):
        val = getattr(state, name)
        if val is not None:
            items.append((name, np.asarray(val, dtype=np.float64)))
    return items


def state_from_arrays(config, items):
    """Inverse of serialize_state."""
    d = dict(items)
    t = int(d["t"][0])
    batch = int(d["batch"][0])
    def wrap(name):
        return Tensor(d[name]) if name in d else None
    return CamState(t=t, batch=batch,
                    mem=wrap("mem"), norm=wrap("norm"),
                    mem_grid=wrap("mem_grid"), norm_grid=wrap("norm_grid"),
                    key_sum=d.get("key_sum"), sq_sum=d.get("sq_sum"))


class ExactKernelCam:
    """Quadratic-cost reference cell: explicit storage, exact exp(q'k) kernel.

    Same discount and convex-read semantics as the compact cell, with the
    true softmax kernel instead of random features. Used as an oracle.
    """

    def __init__(self, discount=0.0):
        if discount < 0:
            raise ValueError(f"discount must be >= 0, got {discount}")
        self.discount = discount
        self.keys = []
        self.values = []

    @property
    def t(self):
        return len(self.keys)

    def update(self, k, v):
        self.keys.append(np.asarray(k, dtype=np.float64).copy())
        self.values.append(np.asarray(v, dtype=np.float64).copy())

    def weights_for(self, q):
        """Discounted kernel weights, normalized to a probability vector."""
        if self.t == 0:
            raise CamMemoryError("empty memory: query before any stored pattern (t=0)")
        q = np.asarray(q, dtype=np.float64)
        logs = np.array([k @ q for k in self.keys])
        ages = self.discount * (self.t - 1 - np.arange(self.t))
        logs = logs - ages
        logs -= logs.max()
        w = np.exp(logs)
        return w / w.sum()

    def step(self, q):
        w = self.weights_for(q)
        return w @ np.stack(self.values)
