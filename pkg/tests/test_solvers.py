import math

import numpy as np
import pytest

from solver_checks import (BETAS, FIXTURE_NAMES, KNOWN_BETA_FAILURES, SOLVERS, beta_violation, clipping_ok,
                           fixture, greedy_ok, normal_equation_residual, tv_pevi_gap)
from rrmdp.duals import CHI2_CONJUGATE, KL_CONJUGATE, AlphaSearchConfig
from rrmdp.environments import HardInstanceParams, build_hard_instance, hard_instance_optimal_actions, \
    hard_instance_actions, random_sign_pattern
from rrmdp.mdp_core import DivergenceSpec, OfflineDataset
from rrmdp.solvers import (StageRegression, beta_recommendation, build_gram, estimate_w_chi2, estimate_w_drpvi,
                           estimate_w_drvi_l, estimate_w_generic, estimate_w_kl, estimate_w_plain, estimate_w_tv,
                           pessimism_penalty, solve, solve_drpvi, solve_drvi_l, solve_pevi, solve_r2pvi,
                           stage_regressions)


def nonnegative_hat_dims(data, env, gamma):
    """Per stage, the dimensions whose ridge weights are all non-negative.

    On these dimensions the ridge estimate of a clipped value is monotone in the
    clip level, so the per-dimension dual searches have the same limits as the
    population duals.
    """
    return [np.all(st.hat >= 0, axis=0) & (np.abs(st.hat).sum(axis=0) > 0)
            for st in stage_regressions(data, env.features, gamma)]


def one_sample_stage(d=3, gamma=0.1):
    phi = np.zeros((1, d))
    phi[0, 0] = 1.0
    return StageRegression(phi, np.array([1]), gamma)


# --- gram and penalty ---

def test_gram_empty_dataset(sim_env):
    g = build_gram(OfflineDataset.empty(sim_env.H), sim_env.features, 0.5)
    assert np.allclose(g.gram, 0.5 * np.eye(sim_env.d)) and np.allclose(g.gram_inv, 2.0 * np.eye(sim_env.d))


def test_gram_one_hot():
    stage = one_sample_stage(4, 0.2)
    assert np.allclose(stage.gram, np.diag([1.2, 0.2, 0.2, 0.2]))


def test_gram_eigenvalues(sim_env, sim_data):
    g = build_gram(sim_data, sim_env.features, 0.3)
    for h in range(sim_env.H):
        assert np.linalg.eigvalsh(g.gram[h]).min() >= 0.3 - 1e-10
    with pytest.raises(ValueError):
        build_gram(sim_data, sim_env.features, 0.0)


def test_penalty_examples():
    phi = np.array([0.5, 0.5, 0.0])
    assert pessimism_penalty(phi, np.eye(3), 0.0) == 0.0
    assert pessimism_penalty(phi, np.eye(3), 2.0) == pytest.approx(2.0)


# --- estimators ---

def test_tv_estimator_examples(sim_env, sim_data):
    stage = stage_regressions(sim_data, sim_env.features, 0.1)[0]
    w, _ = estimate_w_tv(stage, np.zeros(sim_env.n_states), 0.5)
    assert np.all(w == 0)
    V = np.array([0.0, 0.5, 1.0, 0.0, 2.0])
    assert np.allclose(estimate_w_tv(stage, V, 2.0)[0], estimate_w_plain(stage, V)[0], atol=0)
    w, _ = estimate_w_tv(one_sample_stage(), np.array([0.0, 1.0]), 0.4)
    assert np.allclose(w, [0.4 / 1.1, 0, 0], atol=1e-15)
    with pytest.raises(ValueError):
        estimate_w_tv(stage, V, 0.5, state_grid=[])


def test_kl_estimator_examples(sim_env, sim_data):
    H = 3.0
    stage = stage_regressions(sim_data, sim_env.features, 0.1)[0]
    w, _ = estimate_w_kl(stage, np.zeros(sim_env.n_states), 0.5, H)
    assert np.all(w >= -1e-12) and np.all(w <= H)
    w, _ = estimate_w_kl(stage, np.full(sim_env.n_states, H), 1e-3, H)
    assert np.allclose(w, H, atol=0)
    w, _ = estimate_w_kl(one_sample_stage(), np.array([0.0, 1.0]), 1.0, H)
    assert math.isclose(w[0], 1.0 + math.log(1.1), rel_tol=1e-12)
    assert np.allclose(w[1:], H)
    with pytest.raises(ValueError):
        estimate_w_kl(stage, np.zeros(5), 0.0, H)


def test_chi2_estimator_examples(sim_env, sim_data_large):
    H = 3.0
    stage = stage_regressions(sim_data_large, sim_env.features, 0.1)[1]
    lam = 0.7
    w, _ = estimate_w_chi2(stage, np.full(sim_env.n_states, 1.5), lam, H)
    assert np.all(w >= 0) and np.all(w <= H + H * H / (2 * lam))
    V = np.array([0.0, 0.5, 1.0, 0.0, 2.0])
    w_big, _ = estimate_w_chi2(stage, V, 1e9, H)
    w_ref = np.clip(estimate_w_plain(stage, V)[0], 0, H)
    mono = nonnegative_hat_dims(sim_data_large, sim_env, 0.1)[1]
    assert mono.any()
    assert np.allclose(w_big[mono], w_ref[mono], atol=1e-4)
    # elsewhere alpha = V_max is still a candidate, so the search can only do better
    assert np.all(w_big >= w_ref - 1e-4)
    empty = StageRegression(np.zeros((0, sim_env.d)), np.zeros(0, dtype=int), 0.1)
    assert np.all(estimate_w_chi2(empty, V, lam, H)[0] == 0)
    with pytest.raises(ValueError):
        estimate_w_chi2(stage, V, -1.0, H)


def test_generic_estimator_cross_checks(sim_env, sim_data_large):
    H = 3.0
    stage = stage_regressions(sim_data_large, sim_env.features, 0.1)[0]
    V = np.array([0.0, 0.5, 1.0, 0.0, 2.0])
    lam = 1.0
    w_gen, _ = estimate_w_generic(stage, V, lam, KL_CONJUGATE)
    w_kl, _ = estimate_w_kl(stage, V, lam, H)
    # only dimensions the data covers carry information
    covered = np.diag(stage.gram) > 100
    assert np.all(np.abs(w_gen - w_kl)[covered] <= 5e-2 * H)
    w_gen, _ = estimate_w_generic(stage, V, lam, CHI2_CONJUGATE)
    w_chi, _ = estimate_w_chi2(stage, V, lam, H)
    assert np.all(np.abs(w_gen - w_chi)[covered] <= 5e-2 * H)


def test_generic_estimator_empty_dataset():
    V = np.array([0.0, 0.4, 1.2])
    empty = StageRegression(np.zeros((0, 4)), np.zeros(0, dtype=int), 0.1)
    w, _ = estimate_w_generic(empty, V, 0.5, KL_CONJUGATE)
    assert np.allclose(w, V.max() + 0.5, atol=1e-8)


def test_generic_estimator_rejects_nonfinite(sim_env, sim_data):
    from rrmdp.duals import Conjugate
    stage = stage_regressions(sim_data, sim_env.features, 0.1)[0]
    bad = Conjugate(lambda t: np.where(t > 0.1, np.nan, t))
    with pytest.raises(ValueError, match="not finite"):
        estimate_w_generic(stage, np.array([0.0, 0.5, 1.0, 0.0, 2.0]), 1.0, bad)


@pytest.mark.parametrize("estimator", [
    lambda st, v: estimate_w_chi2(st, v, 0.6, 3.0),
    lambda st, v: estimate_w_drpvi(st, v, 0.2),
    lambda st, v: estimate_w_drvi_l(st, v, 0.2, 3.0),
])
def test_dimension_decoupling(estimator, sim_env, sim_data):
    stage = stage_regressions(sim_data, sim_env.features, 0.1)[0]
    perm = np.random.default_rng(0).permutation(sim_env.d)
    permuted = StageRegression(stage.phi[:, perm], stage.next_states, 0.1)
    V = np.array([0.0, 0.5, 1.0, 0.0, 2.0])
    w, _ = estimator(stage, V)
    wp, _ = estimator(permuted, V)
    assert np.allclose(wp, w[perm], atol=1e-10, rtol=0)


# --- solvers ---

def test_large_lambda_kl_matches_pevi(sim_env, sim_data_large):
    # -lam log(ridge) amplifies the ridge shrinkage of the constant target by lam,
    # so the large-lambda limit needs a vanishing gamma as well
    kl = solve_r2pvi(sim_data_large, sim_env, DivergenceSpec("KL", 1e6), 0.0, 1e-8)
    pe = solve_pevi(sim_data_large, sim_env, 0.0, 1e-8)
    init = sim_env.initial_dist
    assert abs(init @ kl.v_tables[0] - init @ pe.v_tables[0]) <= 1e-3


def test_empty_dataset_is_fully_pessimistic(sim_env):
    empty = OfflineDataset.empty(sim_env.H)
    beta, gamma = 0.3, 0.5
    table = sim_env.features.table
    for out in (solve_pevi(empty, sim_env, beta, gamma),
                solve_r2pvi(empty, sim_env, DivergenceSpec("TV", 1.0), beta, gamma),
                solve_r2pvi(empty, sim_env, DivergenceSpec("Chi2", 1.0), beta, gamma)):
        assert np.all(out.w_hat == 0)
        for h in range(sim_env.H):
            expected = np.clip(table @ sim_env.theta[h] - beta * table.sum(axis=2) / math.sqrt(gamma), 0, sim_env.H - h)
            assert np.allclose(out.q_tables[h], expected, atol=1e-12)


def test_kl_shrinkage_bias_grows_with_lambda(sim_env, sim_data_large):
    pe = solve_pevi(sim_data_large, sim_env, 0.0, 0.1).v_tables[0, 0]
    gaps = [abs(solve_r2pvi(sim_data_large, sim_env, DivergenceSpec("KL", lam), 0.0, 0.1).v_tables[0, 0] - pe)
            for lam in (1e2, 1e6)]
    assert gaps[1] > 100 * gaps[0] > 0


def test_drpvi_rho_zero_matches_pevi(sim_env, sim_data):
    dr = solve_drpvi(sim_data, sim_env, 0.0, 1.0, 0.1)
    pe = solve_pevi(sim_data, sim_env, 1.0, 0.1)
    masks = nonnegative_hat_dims(sim_data, sim_env, 0.1)
    for h in reversed(range(len(masks))):
        mono = masks[h]
        # same V tables only while the stages above agree, so compare stage by stage from the top
        if not np.allclose(dr.v_tables[h + 1:], pe.v_tables[h + 1:]):
            break
        assert np.allclose(dr.w_hat[h][mono], pe.w_hat[h][mono], atol=1e-8)
        assert np.all(dr.w_hat[h] >= pe.w_hat[h] - 1e-8)


def test_drvi_l_small_rho_matches_pevi(sim_env, sim_data_large):
    dl = solve_drvi_l(sim_data_large, sim_env, 1e-8, 1.0, 0.1)
    pe = solve_pevi(sim_data_large, sim_env, 1.0, 0.1)
    masks = nonnegative_hat_dims(sim_data_large, sim_env, 0.1)
    checked = 0
    for h in reversed(range(len(masks))):
        mono = masks[h]
        if not np.allclose(dl.v_tables[h + 1:], pe.v_tables[h + 1:], atol=1e-3):
            break
        assert np.abs(dl.w_hat[h] - pe.w_hat[h])[mono].max() <= 1e-3
        checked += int(mono.sum())
    assert checked > 0


def test_solve_dispatch_and_errors(sim_env, sim_data):
    assert solve("PEVI", sim_data, sim_env, 1.0, 0.1).algo == "PEVI"
    with pytest.raises(ValueError):
        solve("R2PVI", sim_data, sim_env, 1.0, 0.1)
    with pytest.raises(ValueError):
        solve("SAC", sim_data, sim_env, 1.0, 0.1)
    with pytest.raises(ValueError):
        solve_drpvi(sim_data, sim_env, 1.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        solve_drvi_l(sim_data, sim_env, 0.0, 1.0, 0.1)
    with pytest.raises(ValueError):
        solve_pevi(sim_data, sim_env, -1.0, 0.1)


def test_solver_csv(tmp_path, sim_env, sim_data):
    out = solve_r2pvi(sim_data, sim_env, DivergenceSpec("Chi2", 1.0), 1.0, 0.1)
    paths = out.to_csv(tmp_path, "chi2")
    q = np.loadtxt(paths["q"], delimiter=",", skiprows=1)
    assert q.shape == (sim_env.H * sim_env.n_states * sim_env.n_actions, 4)
    assert q[:, 0].min() == 1 and q[:, 0].max() == sim_env.H
    diag = np.loadtxt(paths["diagnostics"], delimiter=",", skiprows=1)
    assert np.all(diag[:, 2] > 0)


def test_action_agreement_on_hard_instance():
    H, d = 3, 4
    agree = total = 0
    acts = hard_instance_actions(d)
    for seed in range(10):
        xi = random_sign_pattern(H, d, seed)
        env, _, data = build_hard_instance(HardInstanceParams(xi=xi, K=100_000, lam=1.0, divergence="TV"), seed)
        out = solve_r2pvi(data, env, DivergenceSpec("TV", 1.0), 0.1, 1.0)
        learned = acts[out.policy.actions[:, 0]]
        target = acts[hard_instance_optimal_actions(xi)]
        agree += int((learned == target).sum())
        total += H * d
    assert agree >= 0.9 * total


# --- invariant suite ---

@pytest.mark.parametrize("fixture_name", FIXTURE_NAMES)
@pytest.mark.parametrize("solver", list(SOLVERS))
def test_clipping_and_greedy(fixture_name, solver):
    env, data = fixture(fixture_name)
    for beta in BETAS:
        out = SOLVERS[solver](data, env, beta)
        assert clipping_ok(out, env)
        assert greedy_ok(out)


@pytest.mark.parametrize("fixture_name", FIXTURE_NAMES)
@pytest.mark.parametrize("solver", list(SOLVERS))
def test_beta_monotone(fixture_name, solver, request):
    if (fixture_name, solver) in KNOWN_BETA_FAILURES:
        request.applymarker(pytest.mark.xfail(strict=True, reason="negative ridge weights make the log "
                                                                       "transform of ridge estimates non-monotone across stages"))
    env, data = fixture(fixture_name)
    outs = [SOLVERS[solver](data, env, b) for b in BETAS]
    assert beta_violation(outs) <= 0.0


@pytest.mark.parametrize("fixture_name", FIXTURE_NAMES)
def test_tv_pevi_coincidence(fixture_name):
    env, data = fixture(fixture_name)
    assert tv_pevi_gap(data, env) <= 1e-12


@pytest.mark.parametrize("fixture_name", FIXTURE_NAMES)
def test_normal_equations(fixture_name):
    env, data = fixture(fixture_name)
    out = SOLVERS["PEVI"](data, env, 0.5)
    assert normal_equation_residual(data, env, out) <= 1e-8


def test_last_stage_beta_monotone_always():
    # with V_{H+1} = 0 the only beta dependence is the subtractive penalty
    env, data = fixture("put-d10")
    outs = [SOLVERS["R2PVI-KL"](data, env, b) for b in BETAS]
    assert all(np.all(b.q_tables[-1] <= a.q_tables[-1]) for a, b in zip(outs, outs[1:]))


# --- beta formulas ---

def test_beta_tv_example():
    val = beta_recommendation("TV", 4, 3, 100, 1.0, 0.1)
    assert abs(val - 1221.4) < 0.1


def test_beta_chi2_large_lambda_limit():
    d, H, K, delta = 4, 3, 100, 0.1
    xi = math.log(192 * K ** 5 * H ** 6 * d ** 3 / delta)
    assert math.isclose(beta_recommendation("Chi2", d, H, K, 1e12, delta), 8 * d * H * math.sqrt(xi), rel_tol=1e-9)


def test_beta_rejections():
    with pytest.raises(ValueError, match="700"):
        beta_recommendation("KL", 4, 100, 10, 0.1, 0.1)
    with pytest.raises(ValueError):
        beta_recommendation("TV", 4, 3, 100, 1.0, 1.5)
    with pytest.raises(ValueError):
        beta_recommendation("Hellinger", 4, 3, 100, 1.0, 0.1)
