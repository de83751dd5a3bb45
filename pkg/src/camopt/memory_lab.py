"""Desk-scale associative-memory experiments: exact exponential energy,
its random-feature compression, asynchronous flip dynamics, a capacity-bound
sign test, and the closed-form variance of single-flip energy changes.

Energies reach exp(N) scale, so every quantity here is carried as a
(log-magnitude, sign) pair and only exponentiated at desk sizes."""

import time
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import rf
from .rng import derive_seed, make_generator

REGULAR_EXP = "regular_exp"
COMPACT_RF = "compact_rf"
REJECTION_BUDGET = 100000


@dataclass(frozen=True)
class PatternSet:
    dim: int
    count: int
    patterns: np.ndarray
    min_distance: int


@dataclass(frozen=True)
class RegularEnergy:
    patterns: np.ndarray


@dataclass(frozen=True)
class CompactEnergy:
    """Random-feature memory: M-vector stored as log-magnitude + sign."""

    projection: object
    rho: float
    log_mag: np.ndarray
    sign: np.ndarray
    count: int


@dataclass(frozen=True)
class FlipTrajectory:
    final: np.ndarray
    proposals: int
    flips: int
    energies: list
    converged: bool


@dataclass(frozen=True)
class RetrievalResult:
    kind: str
    n_dim: int
    count: int
    rho: float
    tau_sep: float
    r: int
    mechanism: str
    success_rate: float
    wall_time: float


@dataclass(frozen=True)
class SignConfigResult:
    case: str
    expected_sign: int
    mean: float
    sem: float
    conclusive: bool
    agree: bool


@dataclass(frozen=True)
class SignCheckReport:
    n_dim: int
    count: int
    tau_sep: float
    rho: float
    rf_rho: float
    r: int
    num_draws: int
    configs: list
    wall_time: float

    @property
    def conclusive_count(self):
        return sum(c.conclusive for c in self.configs)

    @property
    def agreement_rate(self):
        conclusive = [c for c in self.configs if c.conclusive]
        if not conclusive:
            return float("nan")
        return sum(c.agree for c in conclusive) / len(conclusive)


def _check_spin(xi):
    xi = np.asarray(xi, dtype=np.float64)
    if not np.all(np.abs(xi) == 1.0):
        raise ValueError("pattern entries must be +-1")
    return xi


def min_pairwise_distance(patterns):
    """Brute-force minimum pairwise Hamming distance (dim for a singleton)."""
    count, n = patterns.shape
    if count < 2:
        return n
    gram = patterns @ patterns.T
    np.fill_diagonal(gram, -np.inf)
    return int(round((n - gram.max()) / 2.0))


def make_pattern_set(patterns):
    patterns = np.atleast_2d(_check_spin(patterns))
    return PatternSet(dim=patterns.shape[1], count=patterns.shape[0],
                      patterns=patterns,
                      min_distance=min_pairwise_distance(patterns))


def antipodal_pair(n_dim, rng):
    """Exactly tau=1 separated pair (xi, -xi)."""
    xi = rng.integers(0, 2, size=n_dim) * 2.0 - 1.0
    return make_pattern_set(np.stack([xi, -xi]))


def sample_pattern_set(n_dim, count, tau_sep, rng, budget=REJECTION_BUDGET):
    """Rejection-sample count patterns with min separation >= tau_sep * dim."""
    need = tau_sep * n_dim - 1e-9
    for _ in range(budget):
        patterns = rng.integers(0, 2, size=(count, n_dim)) * 2.0 - 1.0
        if count < 2 or min_pairwise_distance(patterns) >= need:
            return make_pattern_set(patterns)
    raise ValueError(f"could not draw {count} patterns of dim {n_dim} with "
                     f"separation {tau_sep:g}*{n_dim} in {budget} attempts")


def corrupt(xi, num_bits, rng):
    """Flip num_bits distinct random coordinates; returns (copy, indices)."""
    out = np.array(xi, dtype=np.float64)
    idx = rng.choice(len(out), size=num_bits, replace=False)
    out[idx] *= -1.0
    return out, np.sort(idx)


def log_energy_regular(xi, patterns):
    """E_reg = -sum_mu exp(xi' xi^mu) as (log-magnitude, sign)."""
    xi = _check_spin(xi)
    return float(logsumexp(np.atleast_2d(patterns) @ xi)), -1.0


def energy_regular(xi, patterns):
    log_mag, sign = log_energy_regular(xi, patterns)
    return sign * np.exp(log_mag)


def compact_model(projection, patterns=None, rho=None):
    """Build the compact memory; empty when patterns is None."""
    if rho is None:
        rho = projection.spec.rho
    r = projection.omega.shape[0]
    if patterns is None or len(patterns) == 0:
        return CompactEnergy(projection=projection, rho=rho,
                             log_mag=np.full(r, -np.inf),
                             sign=np.zeros(r), count=0)
    logphi = rf.phi_favor_pp_log(projection, np.atleast_2d(patterns), rho)
    log_mag, sign = logsumexp(logphi, b=-np.ones((len(patterns), 1)),
                              axis=0, return_sign=True)
    return CompactEnergy(projection=projection, rho=rho, log_mag=log_mag,
                         sign=sign, count=len(patterns))


def insert_pattern(model, xi):
    """Streaming insert: M-vector += -phi(xi), in O(r) after features."""
    logphi = rf.phi_favor_pp_log(model.projection, _check_spin(xi), model.rho)
    stacked = np.stack([model.log_mag, logphi])
    signs = np.stack([model.sign, -np.ones_like(logphi)])
    log_mag, sign = logsumexp(stacked, b=signs, axis=0, return_sign=True)
    return CompactEnergy(projection=model.projection, rho=model.rho,
                         log_mag=log_mag, sign=sign, count=model.count + 1)


def log_energy_compact(xi, model):
    if model.count == 0:
        return -np.inf, 0.0
    logphi = rf.phi_favor_pp_log(model.projection, _check_spin(xi), model.rho)
    log_mag, sign = logsumexp(logphi + model.log_mag, b=model.sign,
                              return_sign=True)
    return float(log_mag), float(sign)


def energy_compact(xi, model):
    log_mag, sign = log_energy_compact(xi, model)
    return sign * np.exp(log_mag)


def log_energy(xi, model):
    if isinstance(model, RegularEnergy):
        return log_energy_regular(xi, model.patterns)
    return log_energy_compact(xi, model)


def energy_compare(a, b):
    """sign(E_a - E_b) for (log_mag, sign) pairs, exact in the log domain."""
    la, sa = a
    lb, sb = b
    if sa == sb:
        if sa == 0.0 or la == lb:
            return 0
        return (1 if la > lb else -1) * (1 if sa > 0 else -1)
    return 1 if sa > sb else -1


def flip_dynamics(xi0, model, max_steps, seed=0):
    """Asynchronous single-coordinate descent on the model's energy.

    Coordinates are proposed in random-permutation sweeps; each proposal
    evaluates both values of the coordinate and keeps the lower-energy one
    (exact ties keep the current value). Terminates after max_steps
    proposals or once a full sweep of dim consecutive proposals changes
    nothing."""
    xi = _check_spin(xi0).copy()
    n = len(xi)
    gen = make_generator(seed, "flip-order")
    energies = [log_energy(xi, model)]
    proposals = 0
    flips = 0
    converged = False
    while proposals < max_steps and not converged:
        swept_clean = True
        for j in gen.permutation(n):
            if proposals >= max_steps:
                swept_clean = False
                break
            proposals += 1
            saved = xi[j]
            xi[j] = -1.0
            e_minus = log_energy(xi, model)
            xi[j] = 1.0
            e_plus = log_energy(xi, model)
            cmp = energy_compare(e_minus, e_plus)
            if cmp == 0:
                new = saved
            else:
                new = 1.0 if cmp > 0 else -1.0
            xi[j] = new
            if new != saved:
                flips += 1
                swept_clean = False
                energies.append(e_minus if new == -1.0 else e_plus)
        converged = swept_clean
    return FlipTrajectory(final=xi, proposals=proposals, flips=flips,
                          energies=energies, converged=converged)


def energy_trace_nonincreasing(trajectory):
    """Audit: accepted flips never increase the evaluated energy."""
    return all(energy_compare(b, a) <= 0 for a, b in
               zip(trajectory.energies, trajectory.energies[1:]))


def default_rf_rho(n_dim):
    """Variance-optimal rho for +-1 queries/keys (max ||x+y||^2 = 4 dim)."""
    return rf.optimal_rho(4.0 * n_dim, n_dim)


def retrieval_experiment(n_dim, count, rho, tau_sep, r, trials, seed=0,
                         rf_rho=None, max_steps=None,
                         budget=REJECTION_BUDGET):
    """Corrupt floor(rho*dim) bits of a stored pattern and report the exact
    recovery rate of flip dynamics under both energy models."""
    if not rho < tau_sep / 2.0:
        raise ValueError(f"corruption fraction rho={rho} must be below "
                         f"tau_sep/2={tau_sep / 2.0}")
    if rf_rho is None:
        rf_rho = default_rf_rho(n_dim)
    if max_steps is None:
        max_steps = 60 * n_dim
    num_bits = int(rho * n_dim)
    successes = {REGULAR_EXP: 0, COMPACT_RF: 0}
    times = {REGULAR_EXP: 0.0, COMPACT_RF: 0.0}
    for t in range(trials):
        gen = make_generator(seed, f"retrieval-trial-{t}")
        pset = sample_pattern_set(n_dim, count, tau_sep, gen, budget=budget)
        target = pset.patterns[int(gen.integers(count))]
        xi0, _ = corrupt(target, num_bits, gen)
        spec = rf.RfSpec(mechanism=rf.FAVOR_PP, r=r, input_dim=n_dim,
                         rho=rf_rho,
                         seed=derive_seed(seed, f"retrieval-proj-{t}"))
        models = {REGULAR_EXP: RegularEnergy(patterns=pset.patterns),
                  COMPACT_RF: compact_model(rf.sample_projections(spec),
                                            pset.patterns)}
        for kind, model in models.items():
            start = time.perf_counter()
            traj = flip_dynamics(xi0, model, max_steps,
                                 seed=derive_seed(seed, f"flip-{kind}-{t}"))
            times[kind] += time.perf_counter() - start
            if np.array_equal(traj.final, target):
                successes[kind] += 1
    return [RetrievalResult(kind=kind, n_dim=n_dim, count=count, rho=rho,
                            tau_sep=tau_sep, r=(r if kind == COMPACT_RF
                                                else 0),
                            mechanism=(rf.FAVOR_PP if kind == COMPACT_RF
                                       else "exact"),
                            success_rate=successes[kind] / trials,
                            wall_time=times[kind])
            for kind in (REGULAR_EXP, COMPACT_RF)]


def capacity_bound_log(n_dim, tau, rho):
    """log of the pattern-count bound exp(2N(tau-2rho)) (1-e^-2) / (2e^2)."""
    return (2.0 * n_dim * (tau - 2.0 * rho)
            + np.log1p(-np.exp(-2.0)) - np.log(2.0) - 2.0)


def delta_energy_samples(patterns, xi_hat, flip_index, rho, r, draws,
                         rng, chunk=2048):
    """Monte Carlo draws of Delta(E_rand) for flipping one coordinate.

    Each draw uses a fresh iid Gaussian projection of r features; returns an
    array of length draws. Linear-domain, so desk-scale dims only."""
    patterns = np.atleast_2d(np.asarray(patterns, dtype=np.float64))
    n = patterns.shape[1]
    xi_hat = np.asarray(xi_hat, dtype=np.float64)
    xi_tilde = xi_hat.copy()
    xi_tilde[flip_index] *= -1.0
    a_hat, b, _, log_d = rf.favor_pp_constants(rho, n)
    # cap the chunk so the (chunk * r, n) scratch block stays modest
    chunk = max(1, min(chunk, (1 << 21) // max(r, 1)))
    out = np.empty(draws)
    done = 0
    while done < draws:
        m = min(chunk, draws - done)
        omega = rng.standard_normal((m * r, n))
        base = (2.0 * log_d - n
                - 2.0 * a_hat * np.sum(omega * omega, axis=1))
        d_pat = omega @ patterns.T
        d_hat = omega @ xi_hat
        d_til = omega @ xi_tilde
        term_hat = np.exp(base[:, None] + b * (d_hat[:, None] + d_pat))
        term_til = np.exp(base[:, None] + b * (d_til[:, None] + d_pat))
        # E(q) = -sum_mu phi(q)'phi(xi^mu), so the flip's energy change is
        # sum over patterns and features of (term_hat - term_til) / r
        diff = (term_hat - term_til).sum(axis=1)
        out[done:done + m] = diff.reshape(m, r).mean(axis=1)
        done += m
    return out


def theorem1_sign_check(n_dim, count, tau_sep, rho, num_draws,
                        num_configs=1, r=1, rf_rho=None, seed=0,
                        coordinate_kind=None, budget=REJECTION_BUDGET):
    """Monte Carlo check that E[Delta(E_rand)] has the predicted sign.

    For each sampled configuration (pattern set, corrupted input,
    coordinate) the mean energy change over num_draws fresh projections is
    compared against the storage theorem's prediction: positive when the
    flip moves away from the near pattern, negative when it repairs a
    corrupted bit. Configurations whose mean is within 3 standard errors of
    zero are reported as inconclusive rather than counted either way."""
    if not 0.0 < rho < tau_sep / 2.0:
        raise ValueError(f"hypothesis violated: need 0 < rho < tau_sep/2, "
                         f"got rho={rho}, tau_sep={tau_sep}")
    log_bound = capacity_bound_log(n_dim, tau_sep, rho)
    if np.log(count) > log_bound:
        raise ValueError(f"hypothesis violated: pattern count {count} "
                         f"exceeds the capacity bound "
                         f"(log M_max = {log_bound:.4f})")
    if rf_rho is None:
        rf_rho = default_rf_rho(n_dim)
    num_bits = int(rho * n_dim)
    start = time.perf_counter()
    results = []
    for c in range(num_configs):
        gen = make_generator(seed, f"sign-config-{c}")
        if count == 2 and tau_sep == 1.0:
            pset = antipodal_pair(n_dim, gen)
        else:
            pset = sample_pattern_set(n_dim, count, tau_sep, gen,
                                      budget=budget)
        target = pset.patterns[int(gen.integers(count))]
        xi_hat, flipped = corrupt(target, num_bits, gen)
        if coordinate_kind == "corrupted":
            if num_bits == 0:
                raise ValueError("no corrupted coordinates at rho=0")
            j = int(flipped[gen.integers(len(flipped))])
        elif coordinate_kind == "match":
            intact = np.setdiff1d(np.arange(n_dim), flipped)
            j = int(intact[gen.integers(len(intact))])
        else:
            j = int(gen.integers(n_dim))
        expected = 1 if xi_hat[j] == target[j] else -1
        samples = delta_energy_samples(pset.patterns, xi_hat, j, rf_rho, r,
                                       num_draws, gen)
        mean = float(samples.mean())
        sem = float(samples.std(ddof=1) / np.sqrt(num_draws))
        conclusive = abs(mean) > 3.0 * sem
        agree = conclusive and (np.sign(mean) == expected)
        results.append(SignConfigResult(
            case="match" if expected > 0 else "corrupted",
            expected_sign=expected, mean=mean, sem=sem,
            conclusive=conclusive, agree=agree))
    return SignCheckReport(n_dim=n_dim, count=count, tau_sep=tau_sep,
                           rho=rho, rf_rho=rf_rho, r=r, num_draws=num_draws,
                           configs=results,
                           wall_time=time.perf_counter() - start)


def _check_variance_rho(rho):
    if not rho > 8.0 / 9.0:
        raise ValueError("variance formula diverges (requires rho > 8/9)")


def log_psi(sq_norm, rho, n_dim):
    """log Psi(x) for ||x||^2 = sq_norm: the projection-draw second moment
    of a single-feature product pair."""
    _check_variance_rho(rho)
    a_hat, b, _, log_d = rf.favor_pp_constants(rho, n_dim)
    return (4.0 * log_d - 2.0 * n_dim
            - 0.5 * n_dim * np.log1p(8.0 * a_hat)
            + b * b * sq_norm / (2.0 * (1.0 + 8.0 * a_hat)))


def log_variance_closed_form(patterns, xi_hat, flip_index, rho, r):
    """Closed-form Var(Delta(E_rand)) as (log-magnitude, sign).

    Var = (V1 + V2 - 2 V3 - V4 - V5 + 2 V6) / r, where V1..V3 are pair sums
    of Psi at the three query combinations and V4..V6 are pair sums of exact
    exponentials of inner products."""
    _check_variance_rho(rho)
    patterns = np.atleast_2d(np.asarray(patterns, dtype=np.float64))
    n = patterns.shape[1]
    xi_hat = _check_spin(xi_hat)
    xi_tilde = xi_hat.copy()
    xi_tilde[flip_index] *= -1.0
    gram = patterns @ patterns.T
    d_hat = patterns @ xi_hat
    d_til = patterns @ xi_tilde

    def psi_pairsum(u):
        # ||xi_m1 + xi_m2 + u||^2 expanded through the Gram matrix
        w = patterns @ u
        sq = (2.0 * n + float(u @ u) + 2.0 * gram
              + 2.0 * (w[:, None] + w[None, :]))
        return logsumexp(log_psi(sq, rho, n))

    log_v = np.array([
        psi_pairsum(2.0 * xi_hat),
        psi_pairsum(2.0 * xi_tilde),
        psi_pairsum(xi_hat + xi_tilde),
        logsumexp(d_hat) + logsumexp(d_hat),
        logsumexp(d_til) + logsumexp(d_til),
        logsumexp(d_hat) + logsumexp(d_til),
    ])
    coeff = np.array([1.0, 1.0, -2.0, -1.0, -1.0, 2.0])
    log_mag, sign = logsumexp(log_v, b=coeff, return_sign=True)
    return float(log_mag - np.log(r)), float(sign)


def variance_closed_form(patterns, xi_hat, flip_index, rho, r):
    log_mag, sign = log_variance_closed_form(patterns, xi_hat, flip_index,
                                             rho, r)
    return sign * np.exp(log_mag)


def mc_delta_energy_variance(patterns, xi_hat, flip_index, rho, r, draws,
                             seed=0):
    """Sample variance of Delta(E_rand) over fresh projection draws."""
    gen = make_generator(seed, "variance-mc")
    samples = delta_energy_samples(patterns, xi_hat, flip_index, rho, r,
                                   draws, gen)
    return float(samples.var(ddof=1))
