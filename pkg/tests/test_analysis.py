import numpy as np
import pytest
from scipy import special

from ccra import analysis, config


X3 = ((3, 1.0),)


def test_edge_from_node_single_degree():
    assert analysis.edge_from_node(X3) == ((3, 1.0),)


def test_edge_from_node_mixed():
    lam = dict(analysis.edge_from_node(((2, 0.5), (4, 0.5))))
    assert lam[2] == pytest.approx(1 / 3)
    assert lam[4] == pytest.approx(2 / 3)


def test_slot_edge_dist_normalized():
    for G in (0.2, 0.8, 1.5):
        omega = analysis.slot_edge_dist(G, X3)
        assert omega[0] == 0.0
        assert omega.sum() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(analysis.AnalysisError):
        analysis.slot_edge_dist(0.0, X3)


def test_degenerate_distribution_rejected():
    with pytest.raises(analysis.AnalysisError):
        analysis.edge_from_node(((2, 0.5),))


def test_singleton_reduction_matches_closed_form():
    rng = np.random.default_rng(8)
    for _ in range(30):
        degs = rng.choice(np.arange(2, 9), size=rng.integers(1, 4), replace=False)
        probs = rng.dirichlet(np.ones(len(degs)))
        dist = tuple((int(d), float(p)) for d, p in zip(degs, probs))
        G = float(rng.uniform(0.1, 1.2))
        omega = analysis.slot_edge_dist(G, dist)
        pi = analysis.CaptureTable.singleton_only(len(omega) - 1)
        res = analysis.and_or_tree(omega, dist, pi, max_iter=60, tol=0.0)
        lam = analysis.edge_from_node(dist)
        q = 1.0
        for i in range(60):
            p = 1.0 - sum(omega[j] * (1 - q) ** (j - 1)
                          for j in range(1, len(omega)))
            q = analysis.edge_poly(lam, p)
            assert abs(p - res.p_traj[i]) <= 1e-12
            assert abs(q - res.q_traj[i]) <= 1e-12


def test_always_capture_resolves_instantly():
    dist = ((2, 0.5), (3, 0.5))      # lambda_1 = 0
    omega = analysis.slot_edge_dist(0.7, dist)
    pi = analysis.CaptureTable.always(len(omega) - 1)
    res = analysis.and_or_tree(omega, dist, pi)
    assert res.p_traj[0] == pytest.approx(0.0, abs=1e-12)
    assert res.q_traj[0] == pytest.approx(0.0, abs=1e-12)
    assert res.pd_edge == pytest.approx(1.0)


def test_x3_load_levels_and_threshold():
    lo = analysis.de_for_load(0.5, X3)
    hi = analysis.de_for_load(1.0, X3)
    assert lo.pd_edge >= 1 - 1e-3
    assert hi.pd_edge < 0.9
    g_star = analysis.de_threshold(X3)
    assert 0.75 < g_star < 0.90


def test_de_monotone_q():
    res = analysis.de_for_load(0.9, X3)
    q = np.array(res.q_traj)
    assert np.all(np.diff(q) <= 1e-12)
    assert np.all((0 <= q) & (q <= 1))
    assert res.converged


def test_degenerate_all_singleton_slots():
    omega = np.array([0.0, 1.0])          # all edges see degree-1 slots
    pi = analysis.CaptureTable.singleton_only(1)
    res = analysis.and_or_tree(omega, X3, pi)
    assert res.p_traj[0] == 0.0
    assert res.pd_node == pytest.approx(1.0)


def test_capture_coverage_enforced():
    omega = analysis.slot_edge_dist(0.9, X3)
    pi = analysis.CaptureTable.singleton_only(2)   # far too short
    with pytest.raises(analysis.AnalysisError, match="covers"):
        analysis.and_or_tree(omega, X3, pi)


def test_strict_paper_mode_differs_and_is_labeled():
    res = analysis.de_for_load(0.7, X3)
    strict = analysis.de_for_load(0.7, X3, strict_paper=True)
    assert res.convention == "consistent"
    assert strict.convention == "strict-paper"
    assert abs(res.q_inf - strict.q_inf) > 1e-3


def test_capture_table_validation():
    with pytest.raises(analysis.AnalysisError):
        analysis.CaptureTable.from_rows({2: [0.5]})
    with pytest.raises(analysis.AnalysisError):
        analysis.CaptureTable.from_rows({1: [1.5]})
    with pytest.warns(UserWarning, match="monotone"):
        t = analysis.CaptureTable.from_rows({3: [0.5, 0.4, 0.9]})
    assert t.monotonized
    assert t.prob(1, 3) == 0.5


def test_c1_values():
    assert analysis.c1_of_delta(0.0) == pytest.approx(4.0)
    assert analysis.c1_of_delta(0.2) == pytest.approx(8.4728, abs=2e-4)
    with pytest.raises(analysis.AnalysisError):
        analysis.c1_of_delta(np.sqrt(2) - 1)
    grid = np.linspace(0, np.sqrt(2) - 1 - 1e-6, 50)
    vals = [analysis.c1_of_delta(d) for d in grid]
    assert np.all(np.diff(vals) > 0)


def bound_inputs(**kw):
    base = dict(alpha=0.3, noise_var=0.01, m=839, n=24576, k2=10,
                delta2k=0.2, pbar_md=0.95, e_log=5.0, n_colliders=1)
    base.update(kw)
    return analysis.RateBoundInputs(**base)


def test_bounds_alpha_one_is_zero():
    inp = bound_inputs(alpha=1.0, e_log=0.0)
    assert analysis.rate_bound_singleton(inp) == 0.0
    assert analysis.rate_bound_collision(inp) == 0.0


def test_bounds_alpha_zero_diverges():
    inp = bound_inputs(alpha=0.0)
    assert analysis.rate_bound_singleton(inp) == -np.inf


def test_collision_bound_below_singleton():
    for a in (0.1, 0.3, 0.6, 0.9):
        for c in (1, 2, 4):
            inp = bound_inputs(alpha=a, n_colliders=c)
            assert analysis.rate_bound_collision(inp) <= analysis.rate_bound_singleton(inp)


def test_bounds_monotone_in_colliders_and_per_term_noise():
    coll = [analysis.rate_bound_collision(bound_inputs(n_colliders=c))
            for c in (0, 1, 2, 4, 8)]
    assert np.all(np.diff(coll) <= 0)
    # the full bound is NOT monotone in noise (both log terms vanish as
    # sigma^2 grows, so the bound rises toward 0 from below); each term is
    grid = (0.001, 0.01, 0.1, 1.0)
    elogs = [np.log1p(0.7 / v) for v in grid]
    assert np.all(np.diff(elogs) <= 0)
    pens = [analysis.rate_bound_singleton(bound_inputs(noise_var=v, e_log=0.0))
            for v in grid]            # -penalty alone
    assert np.all(np.diff(pens) >= 0)


def test_bound_zero_at_no_noise_penalty_limit():
    # sanity: with a huge noise floor both terms die and the bound -> 0-
    inp = bound_inputs(noise_var=1e12, e_log=1e-12)
    assert -1e-6 < analysis.rate_bound_singleton(inp) <= 1e-6


def small_chan_cfg(k1=1, alpha=0.5, noise_var=0.1):
    return config.validate(config.SystemConfig(
        n=256, control_band=config.spread_band(256, 64), s_cp=32, s_d=16,
        k1=k1, U=4, k2=1, alpha=alpha, noise_var=noise_var, num_data_slots=8,
        master_seed=77))


def test_expected_log_high_noise_vanishes():
    cfg = small_chan_cfg(noise_var=1e12)
    val = analysis.expected_log_term(cfg, 0.0, 200, seed=1)
    assert val <= 1e-9


def test_expected_log_matches_rayleigh_closed_form():
    # k1=1 unit-variance tap: per-subcarrier gain is Exp(1); the closed
    # form is exp(1/g)*E1(1/g) with g = (1-alpha)/sigma^2
    cfg = small_chan_cfg()
    gbar = (1 - cfg.alpha) / cfg.noise_var
    want = float(np.exp(1 / gbar) * special.exp1(1 / gbar))
    got = analysis.expected_log_term(cfg, 0.0, 4000, seed=2)
    assert abs(got - want) / want <= 0.01


def test_expected_log_monotone_in_threshold():
    cfg = small_chan_cfg(k1=3)
    vals = [analysis.expected_log_term(cfg, xi, 3000, seed=3)
            for xi in (0.0, 0.3, 0.8)]
    assert vals[0] <= vals[1] <= vals[2]


def test_expected_log_conditioning_too_rare():
    cfg = small_chan_cfg()
    with pytest.raises(analysis.AnalysisError, match="rare"):
        analysis.expected_log_term(cfg, 1e9, 200, seed=4)


def test_rayleigh_reference_curve():
    assert analysis.rayleigh_bpsk_ser(0.0) == pytest.approx(0.5)
    assert analysis.rayleigh_bpsk_ser(np.inf) == 0.0
    assert analysis.rayleigh_bpsk_ser(99.0) == pytest.approx(2.5063e-3, rel=1e-3)
    grid = np.logspace(-1, 3, 20)
    vals = [analysis.rayleigh_bpsk_ser(g) for g in grid]
    assert np.all(np.diff(vals) < 0)


def capture_cfg():
    return config.validate(config.SystemConfig(
        n=256, control_band=config.spread_band(256, 64), s_cp=32, s_d=16,
        k1=2, U=10, k2=2, alpha=0.5, noise_var=0.01, num_data_slots=6,
        master_seed=5))


def test_capture_table_from_phy():
    cfg = capture_cfg()
    table = analysis.capture_table_from_phy(cfg, trials=25, j_max=3)
    assert table.prob(0, 1) >= 0.9
    # more interferers cannot help a fresh attempt
    assert table.prob(0, 1) >= table.prob(0, 2) >= table.prob(0, 3)
    # non-decreasing in cancelled interferers (clamped if noisy)
    assert table.prob(1, 2) >= table.prob(0, 2)


def test_capture_table_feeds_de_consistently():
    # end-to-end: a measured table driving the and-or tree stays close to
    # the load-frame simulation using the same capture behaviour
    cfg = capture_cfg()
    table = analysis.capture_table_from_phy(cfg, trials=30, j_max=4)
    G = 0.5
    omega = analysis.slot_edge_dist(G, cfg.degree_dist)
    de = analysis.de_for_load(G, cfg.degree_dist,
                              table.extended(len(omega) - 1))
    losses = []
    for t in range(60):
        r = mac_run(cfg, G, table, t)
        losses.append(1 - r.n_decoded / max(r.n_active, 1))
    emp = float(np.mean(losses))
    sigma = float(np.std(losses) / np.sqrt(len(losses)))
    assert abs(emp - de.ploss_node) <= max(3 * sigma, 0.05)


def mac_run(cfg, G, table, trial):
    from ccra import mac
    n_users = int(round(G * 200))
    return mac.run_abstract_load_frame(200, cfg.degree_dist, n_users,
                                       seed=123, capture_table=table,
                                       trial=trial)
