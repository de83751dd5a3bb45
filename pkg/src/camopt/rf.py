"""Random-feature linearizations of the softmax kernel exp(x'y).

Three positive-feature mechanisms (exponential, antithetic hyperbolic-cosine
pairs, and bounded tilted features with a tunable concentration parameter
rho), block-orthogonal projection sampling, and the closed-form optimal rho
for a given query/key dispersion statistic gamma.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from . import rng as rngmod

FAVOR_PLUS = "favor_plus"
HYPERBOLIC = "hyperbolic"
FAVOR_PP = "favor_pp"
MECHANISMS = (FAVOR_PLUS, HYPERBOLIC, FAVOR_PP)


@dataclass(frozen=True)
class RfSpec:
    """Configuration of one random-feature map."""

    mechanism: str
    r: int
    input_dim: int
    orthogonal: bool = True
    rho: float = None
    seed: int = 0

    def __post_init__(self):
        if self.mechanism not in MECHANISMS:
            raise ValueError(f"unknown mechanism {self.mechanism!r}")
        if self.r < 1:
            raise ValueError(f"feature count must be >= 1, got {self.r}")
        if self.mechanism == HYPERBOLIC and self.r % 2 != 0:
            raise ValueError(f"hyperbolic features need even r, got {self.r}")
        if self.mechanism == FAVOR_PP:
            _check_rho(self.rho)

    @property
    def omega_rows(self):
        return self.r // 2 if self.mechanism == HYPERBOLIC else self.r


@dataclass(frozen=True)
class RfProjection:
    """Sampled projection directions plus cached squared row norms."""

    spec: RfSpec
    omega: np.ndarray
    sq_norms: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.sq_norms is None:
            object.__setattr__(self, "sq_norms", np.sum(self.omega**2, axis=1))


def _check_rho(rho):
    if rho is None or not (0.0 < rho < 1.0):
        raise ValueError(f"rho must lie strictly in (0,1), got {rho}")


def favor_pp_constants(rho, n):
    """(a_hat, b, c, log_d) for the bounded-feature map at a given rho."""
    _check_rho(rho)
    a_hat = 1.0 / rho - 1.0
    b = np.sqrt(1.0 + 4.0 * a_hat)
    c = -0.5
    log_d = 0.25 * n * np.log(1.0 + 4.0 * a_hat)
    return a_hat, b, c, log_d


def sample_projection_matrix(rng, rows, n, orthogonal=True):
    """Sample a (rows, n) Gaussian projection matrix.

    orthogonal=True builds independent n x n blocks, orthonormalizes each
    (QR with the R-diagonal sign fix), and rescales every row to an
    independently drawn chi(n) norm, so row marginals stay N(0, I_n).
    """
    if rows < 1:
        raise ValueError(f"rows must be >= 1, got {rows}")
    if not orthogonal:
        return rng.standard_normal((rows, n))
    nblocks = -(-rows // n)
    gauss = rng.standard_normal((nblocks, n, n))
    q, r = np.linalg.qr(gauss)
    signs = np.sign(np.diagonal(r, axis1=-2, axis2=-1))
    signs = np.where(signs == 0, 1.0, signs)
    q = q * signs[:, None, :]
    block_rows = q.reshape(nblocks * n, n)[:rows]
    norms = np.sqrt(rng.chisquare(df=n, size=rows))
    return block_rows * norms[:, None]


def sample_projections(spec):
    """Deterministically sample the projection for a spec (seed-bound)."""
    gen = rngmod.make_generator(spec.seed, f"rf-projection-{spec.mechanism}")
    omega = sample_projection_matrix(gen, spec.omega_rows, spec.input_dim,
                                     orthogonal=spec.orthogonal)
    return RfProjection(spec=spec, omega=omega)


def _check_input(proj, z, op):
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != proj.omega.shape[1]:
        raise ValueError(
            f"{op}: input dim {z.shape[-1]} != projection dim {proj.omega.shape[1]}")
    if not np.all(np.isfinite(z)):
        raise ValueError(f"{op}: non-finite input")
    return z


def phi_favor_plus(proj, z):
    """Positive exponential features: (1/sqrt r) exp(-|z|^2/2) exp(w_i'z)."""
    z = _check_input(proj, z, "phi_favor_plus")
    r = proj.omega.shape[0]
    scale = np.exp(-0.5 * np.sum(z * z, axis=-1, keepdims=True)) / np.sqrt(r)
    return scale * np.exp(z @ proj.omega.T)


def phi_hyperbolic(proj, z):
    """Antithetic pairs (exp(w'z), exp(-w'z)) sharing the same scale."""
    z = _check_input(proj, z, "phi_hyperbolic")
    r = 2 * proj.omega.shape[0]
    scale = np.exp(-0.5 * np.sum(z * z, axis=-1, keepdims=True)) / np.sqrt(r)
    dots = z @ proj.omega.T
    feats = np.stack([np.exp(dots), np.exp(-dots)], axis=-1)
    return scale * feats.reshape(*dots.shape[:-1], r)


def phi_favor_pp_log(proj, z, rho=None):
    """Log-magnitudes of the bounded tilted features (always positive)."""
    z = _check_input(proj, z, "phi_favor_pp")
    if rho is None:
        rho = proj.spec.rho
    n = proj.omega.shape[1]
    r = proj.omega.shape[0]
    a_hat, b, c, log_d = favor_pp_constants(rho, n)
    zz = np.sum(z * z, axis=-1, keepdims=True)
    return (log_d - 0.5 * np.log(r) - a_hat * proj.sq_norms
            + b * (z @ proj.omega.T) + c * zz)


def phi_favor_pp(proj, z, rho=None):
    """Bounded tilted features in the standard domain (overflows for large n)."""
    return np.exp(phi_favor_pp_log(proj, z, rho=rho))


def kernel_estimate(proj, x, y, rho=None):
    """phi(x)'phi(y) for the projection's mechanism (log path for favor_pp)."""
    mech = proj.spec.mechanism
    if mech == FAVOR_PLUS:
        return phi_favor_plus(proj, x) @ phi_favor_plus(proj, y)
    if mech == HYPERBOLIC:
        return phi_hyperbolic(proj, x) @ phi_hyperbolic(proj, y)
    return float(np.exp(logsumexp(phi_favor_pp_log(proj, x, rho)
                                  + phi_favor_pp_log(proj, y, rho))))


def optimal_rho(gamma, n):
    """Variance-optimal rho for dispersion gamma and input dim n."""
    if gamma < 0:
        raise ValueError(f"gamma must be nonnegative, got {gamma}")
    if gamma == 0:
        return 1.0 - 1e-6
    return (np.sqrt((2 * gamma + n) ** 2 + 8 * n * gamma) - 2 * gamma - n) / (4 * gamma)


def gamma_bidirectional(queries, keys):
    """Mean of |q_i + k_j|^2 over all query/key pairs."""
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    return float(np.mean(np.sum(q * q, axis=1)) + np.mean(np.sum(k * k, axis=1))
                 + 2.0 * q.mean(axis=0) @ k.mean(axis=0))


def gamma_unidirectional_stream(key_sum, sq_norm_sum, q_t, t):
    """Streaming mean of |q_t + k_j|^2 over the first t keys, O(1) per step.

    key_sum: running sum of keys; sq_norm_sum: running sum of |k_j|^2.
    """
    if t < 1:
        raise ValueError(f"t must be >= 1, got {t}")
    q = np.asarray(q_t, dtype=np.float64)
    return float(q @ q + (sq_norm_sum + 2.0 * q @ np.asarray(key_sum)) / t)
