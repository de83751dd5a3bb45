import numpy as np
import pytest
from numpy.polynomial.hermite_e import hermegauss

from camopt import memory_lab as lab
from camopt import rf
from camopt.rng import make_generator


def spins(rng, *shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def make_projection(n_dim, r, seed, rho, orthogonal=True):
    spec = rf.RfSpec(mechanism=rf.FAVOR_PP, r=r, input_dim=n_dim, rho=rho,
                     orthogonal=orthogonal, seed=seed)
    return rf.sample_projections(spec)


def test_pattern_set_validation_and_distance():
    with pytest.raises(ValueError, match="must be \\+-1"):
        lab.make_pattern_set(np.array([[1.0, 0.5]]))
    pset = lab.make_pattern_set(np.array([[1.0, 1.0, 1.0, 1.0],
                                          [1.0, 1.0, -1.0, -1.0],
                                          [-1.0, -1.0, -1.0, -1.0]]))
    assert pset.min_distance == 2
    single = lab.make_pattern_set(np.ones((1, 5)))
    assert single.min_distance == 5


def test_antipodal_pair_has_full_separation():
    pset = lab.antipodal_pair(12, make_generator(0, "pair"))
    assert pset.min_distance == 12
    np.testing.assert_array_equal(pset.patterns[0], -pset.patterns[1])


def test_sample_pattern_set_respects_separation():
    gen = make_generator(1, "sample")
    for _ in range(10):
        pset = lab.sample_pattern_set(16, 3, 0.5, gen)
        assert pset.min_distance >= 8


def test_sample_pattern_set_budget_error():
    gen = make_generator(2, "sample")
    with pytest.raises(ValueError, match="attempts"):
        lab.sample_pattern_set(8, 6, 1.0, gen, budget=50)


def test_energy_regular_single_pattern():
    xi = np.ones(10)
    assert lab.energy_regular(xi, xi[None, :]) == pytest.approx(-np.exp(10))


def test_energy_regular_orthogonal_query():
    # each pattern disagrees with the query on exactly half the coordinates
    query = np.ones(6)
    patterns = np.array([[1, 1, 1, -1, -1, -1],
                         [-1, -1, 1, 1, 1, -1],
                         [1, -1, -1, -1, 1, 1]], dtype=float)
    assert patterns @ query == pytest.approx(np.zeros(3))
    assert lab.energy_regular(query, patterns) == pytest.approx(-3.0)


def test_energy_regular_matches_naive_sum():
    gen = make_generator(3, "naive")
    patterns = spins(gen, 3, 6)
    for _ in range(20):
        xi = spins(gen, 6)
        naive = -sum(np.exp(float(p @ xi)) for p in patterns)
        assert lab.energy_regular(xi, patterns) == pytest.approx(naive,
                                                                 rel=1e-10)


def test_energy_compact_empty_is_zero():
    proj = make_projection(8, 16, seed=0, rho=0.5)
    model = lab.compact_model(proj)
    assert lab.energy_compact(np.ones(8), model) == 0.0


def test_streaming_inserts_match_batch_and_commute():
    gen = make_generator(4, "stream")
    patterns = spins(gen, 5, 8)
    proj = make_projection(8, 32, seed=7, rho=0.5)
    batch = lab.compact_model(proj, patterns)
    streamed = lab.compact_model(proj)
    for p in patterns:
        streamed = lab.insert_pattern(streamed, p)
    np.testing.assert_allclose(streamed.log_mag, batch.log_mag, atol=1e-10)
    np.testing.assert_array_equal(streamed.sign, batch.sign)
    shuffled = lab.compact_model(proj)
    for p in patterns[::-1]:
        shuffled = lab.insert_pattern(shuffled, p)
    np.testing.assert_allclose(shuffled.log_mag, streamed.log_mag,
                               atol=1e-12)
    assert streamed.count == batch.count == 5


def test_compact_energy_error_slope_is_half():
    gen = make_generator(5, "slope")
    patterns = spins(gen, 3, 6)
    xi = spins(gen, 6)
    exact = lab.energy_regular(xi, patterns)
    rho = 0.625
    rs = [64, 256, 1024, 4096]
    rmss = []
    for r in rs:
        errs = []
        for draw in range(200):
            proj = make_projection(6, r, seed=1000 * r + draw, rho=rho,
                                   orthogonal=False)
            model = lab.compact_model(proj, patterns)
            errs.append(lab.energy_compact(xi, model) - exact)
        rmss.append(np.sqrt(np.mean(np.square(errs))))
    slope = np.polyfit(np.log(rs), np.log(rmss), 1)[0]
    assert abs(slope + 0.5) < 0.1, f"slope {slope}"


def test_compact_energy_accuracy_at_feasible_scale():
    gen = make_generator(6, "acc")
    patterns = spins(gen, 4, 6)
    xi = spins(gen, 6)
    exact = lab.energy_regular(xi, patterns)
    hits = 0
    for seed in range(20):
        proj = make_projection(6, 65536, seed=seed, rho=0.625)
        model = lab.compact_model(proj, patterns)
        rel = abs(lab.energy_compact(xi, model) - exact) / abs(exact)
        hits += rel < 0.05
    assert hits >= 18, f"{hits}/20 within 5%"


def test_flip_dynamics_fixed_point_at_stored_pattern():
    gen = make_generator(7, "fixed")
    pset = lab.sample_pattern_set(10, 2, 0.6, gen)
    target = pset.patterns[0]
    model = lab.RegularEnergy(patterns=pset.patterns)
    # exhaustive audit: no single flip reaches lower energy
    base = lab.log_energy(target, model)
    for j in range(10):
        flipped = target.copy()
        flipped[j] *= -1.0
        assert lab.energy_compare(lab.log_energy(flipped, model), base) >= 0
    traj = lab.flip_dynamics(target, model, max_steps=500, seed=1)
    assert traj.flips == 0
    assert traj.converged
    np.testing.assert_array_equal(traj.final, target)


def test_flip_dynamics_single_pattern_basin_exhaustive():
    pattern = np.array([1.0, -1.0, 1.0, 1.0, -1.0, -1.0, 1.0, -1.0])
    model = lab.RegularEnergy(patterns=pattern[None, :])
    for code in range(256):
        xi0 = np.array([1.0 if code & (1 << b) else -1.0 for b in range(8)])
        traj = lab.flip_dynamics(xi0, model, max_steps=2000, seed=code)
        assert traj.converged
        np.testing.assert_array_equal(traj.final, pattern)


def test_flip_dynamics_energy_monotone():
    gen = make_generator(8, "mono")
    pset = lab.sample_pattern_set(8, 2, 0.5, gen)
    proj = make_projection(8, 64, seed=3, rho=lab.default_rf_rho(8))
    for model in (lab.RegularEnergy(patterns=pset.patterns),
                  lab.compact_model(proj, pset.patterns)):
        for s in range(10):
            xi0 = spins(make_generator(s, "start"), 8)
            traj = lab.flip_dynamics(xi0, model, max_steps=800, seed=s)
            assert lab.energy_trace_nonincreasing(traj)
            for a, b in zip(traj.energies, traj.energies[1:]):
                assert lab.energy_compare(b, a) < 0  # strict decrease


def test_flip_dynamics_tie_keeps_current_value():
    proj = make_projection(6, 16, seed=0, rho=0.5)
    empty = lab.compact_model(proj)  # energy identically zero
    xi0 = np.array([1.0, -1.0, 1.0, -1.0, 1.0, 1.0])
    traj = lab.flip_dynamics(xi0, empty, max_steps=100, seed=5)
    assert traj.flips == 0
    assert traj.converged
    assert traj.proposals == 6
    np.testing.assert_array_equal(traj.final, xi0)


def test_retrieval_rho_zero_regular_is_perfect():
    results = lab.retrieval_experiment(n_dim=12, count=2, rho=0.0,
                                       tau_sep=0.5, r=128, trials=5, seed=0)
    by_kind = {res.kind: res for res in results}
    assert by_kind[lab.REGULAR_EXP].success_rate == 1.0
    assert by_kind[lab.REGULAR_EXP].mechanism == "exact"
    assert by_kind[lab.COMPACT_RF].mechanism == rf.FAVOR_PP
    assert by_kind[lab.COMPACT_RF].r == 128


def test_retrieval_small_scale():
    # feature noise grows like exp(0.48 * dim), so the compact model only
    # denoises reliably at dims where r can dominate it
    results = lab.retrieval_experiment(n_dim=6, count=2, rho=0.2,
                                       tau_sep=0.5, r=32768, trials=10,
                                       seed=1, rf_rho=0.45)
    by_kind = {res.kind: res for res in results}
    assert by_kind[lab.REGULAR_EXP].success_rate == 1.0
    assert by_kind[lab.COMPACT_RF].success_rate >= 0.9


def test_retrieval_precondition():
    with pytest.raises(ValueError, match="below tau_sep/2"):
        lab.retrieval_experiment(n_dim=8, count=2, rho=0.3, tau_sep=0.5,
                                 r=16, trials=1)


def test_compact_query_time_invariant_in_count():
    import time as _time

    gen = make_generator(9, "timing")
    proj = make_projection(64, 2048, seed=0, rho=0.9)
    small = lab.compact_model(proj, spins(gen, 10, 64))
    big = lab.compact_model(proj, spins(gen, 10000, 64))
    query = spins(gen, 64)

    def median_query_time(model, reps=60):
        times = []
        for _ in range(reps):
            t0 = _time.perf_counter()
            lab.log_energy_compact(query, model)
            times.append(_time.perf_counter() - t0)
        return float(np.median(times))

    median_query_time(small, reps=10)  # warm-up
    t_small = median_query_time(small)
    t_big = median_query_time(big)
    assert t_big <= 1.2 * t_small + 5e-6, (t_small, t_big)

    def median_regular_time(patterns, reps=60):
        times = []
        for _ in range(reps):
            t0 = _time.perf_counter()
            lab.log_energy_regular(query, patterns)
            times.append(_time.perf_counter() - t0)
        return float(np.median(times))

    reg_small = median_regular_time(spins(gen, 10, 64))
    reg_big = median_regular_time(spins(gen, 10000, 64))
    assert reg_big > 3.0 * reg_small


def test_capacity_bound_log_value():
    got = lab.capacity_bound_log(100, 0.5, 0.1)
    expected = 60.0 + np.log(1 - np.exp(-2.0)) - np.log(2.0) - 2.0
    assert got == pytest.approx(expected, abs=1e-12)
    assert got == pytest.approx(57.1614, abs=1e-3)


def test_sign_check_hypothesis_errors():
    with pytest.raises(ValueError, match="rho"):
        lab.theorem1_sign_check(16, 2, tau_sep=0.5, rho=0.25, num_draws=10)
    with pytest.raises(ValueError, match="capacity bound"):
        lab.theorem1_sign_check(8, 100, tau_sep=0.5, rho=0.2, num_draws=10)


def test_sign_check_case_directions():
    # The per-feature estimate is heavy tailed, so at a desk budget some
    # configurations land inside the 3 sigma filter.  The contract is that
    # every conclusive configuration agrees with the predicted direction
    # and that the filter reports the rest as inconclusive.
    kw = dict(n_dim=16, count=2, tau_sep=1.0, rho=0.125, num_draws=200000,
              num_configs=2, r=64, rf_rho=0.45, seed=0)
    toward = lab.theorem1_sign_check(coordinate_kind="corrupted", **kw)
    away = lab.theorem1_sign_check(coordinate_kind="match", **kw)
    for cfg in toward.configs:
        assert cfg.case == "corrupted"
        assert cfg.expected_sign == -1
        assert cfg.mean < 0.0
    for cfg in away.configs:
        assert cfg.case == "match"
        assert cfg.expected_sign == 1
        assert cfg.mean > 0.0
    for report in (toward, away):
        assert report.conclusive_count >= 1
        assert report.agreement_rate == 1.0
        for cfg in report.configs:
            assert cfg.agree == (cfg.conclusive
                                 and np.sign(cfg.mean) == cfg.expected_sign)


def test_sign_check_report_rate_nan_when_inconclusive():
    report = lab.SignCheckReport(
        n_dim=8, count=2, tau_sep=1.0, rho=0.1, rf_rho=0.5, r=1,
        num_draws=1, wall_time=0.0,
        configs=[lab.SignConfigResult(case="match", expected_sign=1,
                                      mean=0.0, sem=1.0, conclusive=False,
                                      agree=False)])
    assert report.conclusive_count == 0
    assert np.isnan(report.agreement_rate)


def test_variance_rho_guard():
    patterns = np.ones((1, 4))
    with pytest.raises(ValueError,
                       match="variance formula diverges \\(requires rho > 8/9\\)"):
        lab.variance_closed_form(patterns, np.ones(4), 0, rho=0.5, r=4)
    with pytest.raises(ValueError, match="requires rho > 8/9"):
        lab.log_psi(0.0, rho=8.0 / 9.0, n_dim=4)


def test_psi_at_zero_matches_prefactor():
    rho, n = 0.95, 4
    a_hat, _, _, log_d = rf.favor_pp_constants(rho, n)
    expected = 4 * log_d - 2 * n - 0.5 * n * np.log(1 + 8 * a_hat)
    assert lab.log_psi(0.0, rho, n) == pytest.approx(expected, rel=1e-14)


def test_variance_r_doubling_halves_exactly():
    gen = make_generator(10, "var")
    patterns = spins(gen, 2, 4)
    xi_hat = spins(gen, 4)
    v1 = lab.variance_closed_form(patterns, xi_hat, 1, rho=0.95, r=8)
    v2 = lab.variance_closed_form(patterns, xi_hat, 1, rho=0.95, r=16)
    assert v1 / v2 == pytest.approx(2.0, rel=1e-12)
    assert v1 > 0.0


def quadrature_variance(pattern, xi_hat, flip_index, rho, r, nodes=150):
    """Gauss-Hermite oracle for Var(Delta E) at N=2, M=1."""
    n = 2
    a_hat, b, _, log_d = rf.favor_pp_constants(rho, n)
    xi_tilde = xi_hat.copy()
    xi_tilde[flip_index] *= -1.0
    x, w = hermegauss(nodes)
    om0, om1 = np.meshgrid(x, x, indexing="ij")
    weight = np.outer(w, w) / (2.0 * np.pi)
    sq = om0 ** 2 + om1 ** 2

    def feat_product(q):
        dot = om0 * (q[0] + pattern[0]) + om1 * (q[1] + pattern[1])
        return np.exp(2.0 * log_d - n - 2.0 * a_hat * sq + b * dot)

    delta = feat_product(xi_hat) - feat_product(xi_tilde)
    mean = float((weight * delta).sum())
    second = float((weight * delta ** 2).sum())
    return (second - mean ** 2) / r


def test_variance_closed_form_matches_quadrature():
    pattern = np.array([1.0, 1.0])
    xi_hat = np.array([1.0, -1.0])
    for rho in (0.92, 0.95, 0.99):
        closed = lab.variance_closed_form(pattern[None, :], xi_hat, 0,
                                          rho=rho, r=3)
        oracle = quadrature_variance(pattern, xi_hat, 0, rho=rho, r=3)
        assert closed == pytest.approx(oracle, rel=1e-8), rho


def test_variance_closed_form_matches_monte_carlo():
    gen = make_generator(11, "mcvar")
    pattern = spins(gen, 1, 4)
    xi_hat = -pattern[0]  # far query concentrates the estimator
    closed = lab.variance_closed_form(pattern, xi_hat, 2, rho=0.95, r=8)
    sampled = lab.mc_delta_energy_variance(pattern, xi_hat, 2, rho=0.95,
                                           r=8, draws=40000, seed=1)
    assert sampled == pytest.approx(closed, rel=0.15)
