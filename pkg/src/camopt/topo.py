"""Hierarchical pooling encoders over per-parameter gradient tokens.

A parameter tensor is flattened into a sequence of small representation
tokens, compressed by repeated chunked attention into a handful of
meta-tokens, and later summarized into a single latent vector. Attention
is linear-time: positive random features approximate the softmax kernel,
so a chunk of n tokens costs O(n * r * d) instead of O(n^2 * d).
"""

from dataclasses import dataclass

import numpy as np

from . import rf
from .autodiff import Tensor, concat, matmul
from .rng import make_generator

REPR_DIM = 2


@dataclass(frozen=True)
class ReprSeq:
    """Flattened gradient tokens: row i is (|g_i|, sign(g_i)), row-major."""

    length: int
    tokens: np.ndarray


@dataclass(frozen=True)
class HpeConfig:
    """Shape of the hierarchical pooling stack.

    h_pool=None means the pooling depth is chosen per input so that the
    final meta-token count is at most l_max. feature_spec=None selects
    positive softmax features of the latent width with 32 rows.
    """

    latent_dim: int
    chunk_len: int = 128
    l_max: int = 8
    h_pool: int | None = None
    feature_spec: rf.RfSpec | None = None

    def __post_init__(self):
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be at least 1")
        if self.chunk_len < 2:
            raise ValueError("chunk_len must be at least 2")
        if self.l_max < 1:
            raise ValueError("l_max must be at least 1")
        if self.h_pool is not None and self.h_pool < 0:
            raise ValueError("h_pool must be nonnegative")

    def resolved_spec(self):
        if self.feature_spec is not None:
            return self.feature_spec
        return rf.RfSpec(rf.FAVOR_PLUS, r=32, input_dim=self.latent_dim)


@dataclass(frozen=True)
class PerformerWeights:
    """One bidirectional attention layer plus its residual two-layer MLP.

    omega rows are frozen random features, not learned; mechanism and rho
    travel with the weights so a layer is self-contained.
    """

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    omega: np.ndarray
    sq_norms: np.ndarray
    mechanism: str
    rho: float | None


@dataclass(frozen=True)
class TopoWeights:
    """level0 embeds raw tokens, pool is shared by all deeper levels,
    summarizer produces the fixed-size encoding."""

    level0: PerformerWeights
    pool: PerformerWeights
    summarizer: PerformerWeights


def make_repr_seq(grad):
    """Flatten a gradient array into (|g|, sign(g)) tokens, row-major."""
    g = np.asarray(grad, dtype=np.float64)
    if not np.isfinite(g).all():
        raise ValueError("gradient contains NaN or infinite entries")
    flat = g.reshape(-1)
    tokens = np.stack([np.abs(flat), np.sign(flat)], axis=1)
    return ReprSeq(length=flat.size, tokens=tokens)


def init_performer_weights(d_in, d_out, spec, run_seed=0, name="layer"):
    gen = make_generator(run_seed, f"topo-weights-{name}")
    hidden = 2 * d_out
    # query/key projections tempered by input_dim^(-1/4) so initial
    # feature exponents stay in a safe floating-point range
    temper = 1.0 / spec.input_dim**0.25

    def draw(rows, cols, scale=1.0):
        data = scale * gen.standard_normal((rows, cols)) / np.sqrt(cols)
        return Tensor(data, requires_grad=True)

    omega_gen = make_generator(spec.seed, f"topo-omega-{name}")
    omega = rf.sample_projection_matrix(omega_gen, spec.omega_rows,
                                        spec.input_dim, spec.orthogonal)
    return PerformerWeights(
        w_q=draw(spec.input_dim, d_in, temper),
        w_k=draw(spec.input_dim, d_in, temper),
        w_v=draw(d_out, d_in),
        w1=draw(hidden, d_out),
        b1=Tensor(np.zeros(hidden), requires_grad=True),
        w2=draw(d_out, hidden),
        b2=Tensor(np.zeros(d_out), requires_grad=True),
        omega=omega,
        sq_norms=(omega * omega).sum(axis=1),
        mechanism=spec.mechanism,
        rho=spec.rho,
    )


def init_topo_weights(config, repr_dim=REPR_DIM, run_seed=0):
    spec = config.resolved_spec()
    d = config.latent_dim
    return TopoWeights(
        level0=init_performer_weights(repr_dim, d, spec, run_seed, "level0"),
        pool=init_performer_weights(d, d, spec, run_seed, "pool"),
        summarizer=init_performer_weights(d, d, spec, run_seed, "spe"),
    )


def performer_parameters(weights):
    """Learnable tensors of one attention layer, in a fixed order."""
    return [weights.w_q, weights.w_k, weights.w_v,
            weights.w1, weights.b1, weights.w2, weights.b2]


def _swap_last(t):
    axes = tuple(range(t.ndim - 2)) + (t.ndim - 1, t.ndim - 2)
    return t.transpose(axes)


def _phi(weights, z):
    """Positive feature map of z (..., qk) under the layer's mechanism."""
    rows = weights.omega.shape[0]
    r = 2 * rows if weights.mechanism == rf.HYPERBOLIC else rows
    scale = 1.0 / np.sqrt(r)
    zz = (z * z).sum(axis=-1, keepdims=True)
    dots = matmul(z, Tensor(weights.omega.T.copy()))
    if weights.mechanism == rf.FAVOR_PLUS:
        return (dots - zz * 0.5 + np.log(scale)).exp()
    if weights.mechanism == rf.HYPERBOLIC:
        lead = z.shape[:-1]
        pos = (dots - zz * 0.5 + np.log(scale)).exp()
        neg = (dots * -1.0 - zz * 0.5 + np.log(scale)).exp()
        pos = pos.reshape(lead + (rows, 1))
        neg = neg.reshape(lead + (rows, 1))
        return concat([pos, neg], axis=-1).reshape(lead + (r,))
    a_hat, bcoef, ccoef, log_d = rf.favor_pp_constants(weights.rho, z.shape[-1])
    shift = Tensor(-a_hat * weights.sq_norms)
    return (dots * bcoef + zz * ccoef + shift + (log_d + np.log(scale))).exp()


def bidir_performer_encode(tokens, weights):
    """Bidirectional linear attention plus residual MLP.

    tokens: (..., n, d_in); leading axes are independent batches (chunks).
    Every output token mixes all n inputs of its batch through normalized
    positive-feature attention, so cost is linear in n.
    """
    q = matmul(tokens, weights.w_q.T)
    k = matmul(tokens, weights.w_k.T)
    v = matmul(tokens, weights.w_v.T)
    phi_q = _phi(weights, q)
    phi_k = _phi(weights, k)
    kv = matmul(_swap_last(phi_k), v)
    num = matmul(phi_q, kv)
    den = matmul(phi_q, _swap_last(phi_k.sum(axis=-2, keepdims=True)))
    att = num / den
    hidden = (matmul(att, weights.w1.T) + weights.b1).relu()
    return att + matmul(hidden, weights.w2.T) + weights.b2


def chunk_encode(seq, weights, chunk_len):
    """Encode chunks of chunk_len tokens; summary = latent of token 0.

    The last chunk may be shorter. Output length is ceil(n / chunk_len).
    """
    n = seq.shape[0]
    full = n // chunk_len
    parts = []
    if full:
        stacked = seq[: full * chunk_len].reshape(full, chunk_len, seq.shape[1])
        parts.append(bidir_performer_encode(stacked, weights)[:, 0, :])
    if n % chunk_len:
        tail = bidir_performer_encode(seq[full * chunk_len:], weights)
        parts.append(tail[0:1])
    return parts[0] if len(parts) == 1 else concat(parts, axis=0)


def pooled_length(n, chunk_len, levels):
    for _ in range(levels):
        n = -(-n // chunk_len)
    return n


def required_levels(n, chunk_len, l_max):
    levels = 0
    while n > l_max:
        n = -(-n // chunk_len)
        levels += 1
    return levels


def meta_token_count(n, config):
    """Output length of hpe for an n-token input, without encoding."""
    if config.h_pool is not None:
        levels = config.h_pool
    else:
        levels = required_levels(n, config.chunk_len, config.l_max)
    if n <= config.l_max or levels == 0:
        return n
    return pooled_length(n, config.chunk_len, levels)


def hpe(seq, weights, config):
    """Pool a token sequence down to at most l_max meta-tokens.

    Sequences already at most l_max tokens long skip pooling entirely and
    are only projected to the latent width.
    """
    tokens = seq if isinstance(seq, Tensor) else Tensor(seq.tokens)
    n = tokens.shape[0]
    if config.h_pool is not None:
        levels = config.h_pool
    else:
        levels = required_levels(n, config.chunk_len, config.l_max)
    if n <= config.l_max or levels == 0:
        return matmul(tokens, weights.level0.w_v.T)
    out = chunk_encode(tokens, weights.level0, config.chunk_len)
    for _ in range(levels - 1):
        out = chunk_encode(out, weights.pool, config.chunk_len)
    return out


def spe(tokens, weights):
    """Fixed-size encoding: one attention layer, keep token 0's latent."""
    return bidir_performer_encode(tokens, weights)[0]


def broadcast_concat(tokens, encoding):
    """Append the same encoding vector to every token row."""
    if not isinstance(tokens, Tensor):
        tokens = Tensor(tokens)
    n = tokens.shape[0]
    d = encoding.shape[0]
    tiled = encoding.reshape(1, d) * Tensor(np.ones((n, 1)))
    return concat([tokens, tiled], axis=1)
