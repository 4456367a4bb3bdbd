from collections import deque

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy.stats import ortho_group

from conftest import DESIGN_POWER, DESIGN_WIND, random_stable
from oracles import hankel_norm, random_operating_points, tf_eval
from windshape import equilibrium as eq
from windshape import loopshape as ls
from windshape import matkernel as mk
from windshape.errors import ConfigurationError, SynthesisError
from windshape.linearize import StateSpaceModel, feedback, freq_response, linearize_at

FIRST_ORDER = StateSpaceModel([[-1.0]], [[1.0]], [[1.0]], [[0.0]])
IDENTITY_WEIGHTS = ls.WeightSpec(pre=[((1.0,), (1.0,))] * 2, post=[((1.0,), (1.0,))] * 4)


def weight_matrix(elements, gains, s):
    return np.diag([g * tf_eval(n, d, s) for (n, d), g in zip(elements, gains)])


# ---------------------------------------------------------------------------
# weights


def test_base_weight_tables():
    # values as printed for the 3.4 MW reference design
    assert ls.BASE_W2_PRE == (((5.2,), (1.0, 2.0)), ((1579.0,), (1.0, 50.0)))
    assert ls.BASE_W3_PRE == (((10.4,), (1.0, 2.0)), ((6.315,), (1.0, 2.0)))
    assert ls.BASE_W2_POST[1] == ((0.5, 0.25), (0.01, 1.0, 0.0))
    assert ls.BASE_W3_POST[0] == ((6.1, 0.76), (1e3, 0.0))
    assert ls.BASE_W3_POST[2] == ((1.18, 2.37), (2e5, 0.0))


@pytest.mark.parametrize("region", [2, 3])
def test_default_weights_dimensions(region):
    w = ls.default_weights(region)
    assert (w.w_pre.ninputs, w.w_pre.noutputs) == (2, 2)
    assert (w.w_post.ninputs, w.w_post.noutputs) == (4, 4)
    for W, elems, gains in ((w.w_pre, w.pre, w.pre_gain), (w.w_post, w.post, w.post_gain)):
        for omega in (0.05, 3.0, 200.0):
            assert_allclose(freq_response(W, omega), weight_matrix(elems, gains, 1j * omega),
                            rtol=1e-12, atol=1e-300)


@pytest.mark.parametrize("element", [((1.0, 0.0, 0.0), (1.0, 1.0)),  # improper
                                     ((1.0,), (1.0, -1.0)),  # unstable pole
                                     ((1.0,), (1.0, 0.0, 4.0)),  # poles on the axis
                                     ((1.0,), (0.0,)),  # zero denominator
                                     ("abc", (1.0,))])
def test_weight_validation(element):
    with pytest.raises(ConfigurationError):
        ls.WeightSpec(pre=[element], post=[((1.0,), (1.0,))])


def test_weight_integrator_admitted():
    w = ls.WeightSpec(pre=[((1.0,), (1.0, 0.0))], post=[((2.0, 1.0), (1.0, 0.0))])
    assert w.w_pre.nstates == 1


def test_weight_gain_validation():
    with pytest.raises(ConfigurationError):
        ls.WeightSpec(pre=[((1.0,), (1.0,))], post=[((1.0,), (1.0,))], pre_gain=[1.0, 2.0])
    with pytest.raises(ConfigurationError):
        ls.WeightSpec(pre=[((1.0,), (1.0,))], post=[((1.0,), (1.0,))], post_gain=[-1.0])


def test_weight_dict_round_trip():
    w = ls.default_weights(2)
    again = ls.WeightSpec.from_dict(w.to_dict())
    assert again == w


def test_weight_from_dict_reports_location():
    with pytest.raises(ConfigurationError, match="here"):
        ls.WeightSpec.from_dict({"pre": [{"num": [1.0]}], "post": []}, where="here")


# ---------------------------------------------------------------------------
# shaping and minimal realizations


def test_identity_weights_leave_plant_unchanged(params, design_points):
    Gn = linearize_at(params, design_points[3])
    Ga = ls.shape_plant(Gn, IDENTITY_WEIGHTS)
    for w in np.logspace(-3, 3, 30):
        F, Fn = freq_response(Ga, w), freq_response(Gn, w)
        assert np.linalg.norm(F - Fn) <= 1e-10 * np.linalg.norm(Fn)


@pytest.mark.parametrize("region", [2, 3])
@pytest.mark.parametrize("method", ["staircase", "balanced"])
def test_shaped_plant_matches_weighted_product(params, design_points, region, method):
    w = ls.default_weights(region)
    Gn = linearize_at(params, design_points[region])
    Ga = ls.shape_plant(Gn, w, method=method)
    assert Ga.nstates <= Gn.nstates + w.w_pre.nstates + w.w_post.nstates
    for omega in (0.01, 100.0):
        s = 1j * omega
        expected = (weight_matrix(w.post, w.post_gain, s) @ freq_response(Gn, omega)
                    @ weight_matrix(w.pre, w.pre_gain, s))
        got = freq_response(Ga, omega)
        sv, sv_ref = np.linalg.svd(got, compute_uv=False), np.linalg.svd(expected,
                                                                         compute_uv=False)
        # the weights span twelve decades, so singular values far below the
        # largest one are only resolved to an absolute floor
        assert_allclose(sv, sv_ref, rtol=1e-6, atol=1e-7 * sv_ref[0])
        assert np.linalg.norm(got - expected) <= 1e-6 * np.linalg.norm(expected)


def test_staircase_removes_uncontrollable_and_unobservable_parts(rng):
    G = random_stable(rng, 3, 1, 1)
    # pad with an uncontrollable mode and an unobservable mode
    A = np.block([[G.A, np.zeros((3, 2))], [np.zeros((2, 3)), np.diag([-2.0, -5.0])]])
    B = np.vstack([G.B, [[0.0], [1.0]]])
    C = np.hstack([G.C, [[1.0, 0.0]]])
    padded = StateSpaceModel(A, B, C, G.D)
    reduced = ls.staircase_reduction(padded)
    assert reduced.nstates == 3
    for w in np.logspace(-2, 2, 20):
        assert_allclose(freq_response(reduced, w), freq_response(G, w), rtol=1e-9)


def test_balanced_truncation_of_redundant_copy(rng):
    G = random_stable(rng, 3, 2, 2)
    doubled = StateSpaceModel(np.kron(np.eye(2), G.A), np.vstack([G.B, G.B]),
                              0.5 * np.hstack([G.C, G.C]), G.D)
    reduced = ls.minimal_realization(doubled)
    assert reduced.nstates == 3
    for w in np.logspace(-2, 2, 20):
        assert_allclose(freq_response(reduced, w), freq_response(G, w), rtol=1e-7)


# ---------------------------------------------------------------------------
# coprime factors


def test_first_order_factors_closed_form():
    f = ls.nlcf(FIRST_ORDER)
    r2 = np.sqrt(2.0)
    for w in np.logspace(-2, 2, 50):
        s = 1j * w
        assert freq_response(f.N, w)[0, 0] == pytest.approx(1 / (s + r2), rel=1e-8)
        assert freq_response(f.M, w)[0, 0] == pytest.approx((s + 1) / (s + r2), rel=1e-8)
        total = abs(1 / (s + r2)) ** 2 + abs((s + 1) / (s + r2)) ** 2
        assert total == pytest.approx(1.0, rel=1e-14)
    assert f.M.poles()[0].real == pytest.approx(-r2, rel=1e-10)


def _check_factorization(G, omegas):
    f = ls.nlcf(G)
    assert ls.normalization_error(f, omegas) < 1e-6
    assert mk.is_hurwitz(f.NM.A, tol=0.0)
    for w in omegas[::4]:
        M, N = freq_response(f.M, w), freq_response(f.N, w)
        Gw = freq_response(G, w)
        assert np.linalg.norm(np.linalg.solve(M, N) - Gw) <= 1e-7 * max(np.linalg.norm(Gw),
                                                                          1e-12)
    return f


@pytest.mark.parametrize("seed", range(20))
def test_random_plant_factorization(seed):
    rng = np.random.default_rng(seed)
    n, m, p = rng.integers(1, 6), rng.integers(1, 4), rng.integers(1, 4)
    G = random_stable(rng, n, m, p)
    _check_factorization(G, np.logspace(-3, 3, 200))


@pytest.mark.parametrize("region", [2, 3])
def test_shaped_turbine_factorization(designs, region):
    f = _check_factorization(designs[region].result.G_shaped, np.logspace(-3, 4, 200))
    assert f.N.ninputs == 2 and f.M.ninputs == 4


# ---------------------------------------------------------------------------
# optimal cost


def test_gamma_min_first_order_closed_form():
    f = ls.nlcf(FIRST_ORDER)
    # X = Z = sqrt(2) - 1 for the unit lag
    assert_allclose(f.X, [[np.sqrt(2) - 1]], rtol=1e-12)
    assert_allclose(f.Z, [[np.sqrt(2) - 1]], rtol=1e-12)
    assert ls.gamma_min(f) == pytest.approx(np.sqrt(4 - 2 * np.sqrt(2)), rel=1e-12)


def test_gamma_min_hankel_oracle():
    f = ls.nlcf(FIRST_ORDER)
    h = hankel_norm(f.NM)
    assert ls.gamma_min(f) == pytest.approx(1 / np.sqrt(1 - h * h), rel=1e-9)


def _feasible(factors, gamma):
    try:
        K = ls.central_controller(factors, gamma)
    except SynthesisError:
        return False
    if not mk.is_hurwitz(feedback(factors.G, K).A, tol=0.0):
        return False
    return mk.hinf_norm(ls.cost_system(factors, K)) <= gamma * (1 + 1e-6)


def test_gamma_min_matches_bisection_on_feasibility():
    f = ls.nlcf(FIRST_ORDER)
    lo, hi = 1.0, 2.0
    assert not _feasible(f, lo) and _feasible(f, hi)
    while hi - lo > 1e-5:
        mid = 0.5 * (lo + hi)
        if _feasible(f, mid):
            hi = mid
        else:
            lo = mid
    assert ls.gamma_min(f) == pytest.approx(hi, abs=1e-3)


@pytest.mark.parametrize("seed", range(20))
def test_gamma_min_at_least_one(seed):
    rng = np.random.default_rng(1000 + seed)
    G = random_stable(rng, rng.integers(1, 6), 2, 3)
    f = ls.nlcf(G)
    g = ls.gamma_min(f)
    assert g >= 1.0
    h = hankel_norm(f.NM)
    assert g == pytest.approx(1 / np.sqrt(1 - h * h), rel=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_gamma_min_invariant_under_rotations(seed):
    rng = np.random.default_rng(seed)
    G = random_stable(rng, 4, 3, 3)
    U = ortho_group.rvs(3, random_state=seed)
    V = ortho_group.rvs(3, random_state=seed + 50)
    rotated = StateSpaceModel(G.A, G.B @ V, U @ G.C, U @ G.D @ V)
    g1, g2 = ls.gamma_min(ls.nlcf(G)), ls.gamma_min(ls.nlcf(rotated))
    assert g2 == pytest.approx(g1, rel=1e-8)


@pytest.mark.parametrize("region", [2, 3])
def test_default_margins_in_sanity_band(designs, region):
    assert 0.3 <= designs[region].result.margin <= 0.8


# ---------------------------------------------------------------------------
# synthesis


@pytest.mark.parametrize("region", [2, 3])
def test_synthesis_meets_cost_bound(designs, region):
    res = designs[region].result
    assert res.gamma_sub > res.gamma_min >= 1.0
    assert res.gamma_sub == pytest.approx(1.05 * res.gamma_min, rel=1e-15)
    assert res.achieved_cost <= res.gamma_sub + 1e-4
    oracle = mk.hinf_norm(ls.cost_system(res.factors, res.K_aug), tol=1e-8)
    assert oracle <= res.gamma_sub + 1e-4
    assert mk.spectral_abscissa(feedback(res.G_shaped, res.K_aug).A) < 0


@pytest.mark.parametrize("region", [2, 3])
def test_synthesis_with_relaxed_gamma(designs, region):
    Ga = designs[region].result.G_shaped
    res = ls.synthesize(Ga, gamma_factor=10.0)
    assert res.achieved_cost <= res.gamma_sub + 1e-4
    assert mk.is_hurwitz(feedback(Ga, res.K_aug).A, tol=0.0)


def test_synthesis_rejects_gamma_factor_at_most_one():
    with pytest.raises(SynthesisError) as info:
        ls.synthesize(FIRST_ORDER, gamma_factor=1.0)
    assert info.value.step == "c"


def test_central_controller_refuses_optimal_level():
    f = ls.nlcf(FIRST_ORDER)
    with pytest.raises(SynthesisError) as info:
        ls.central_controller(f, ls.gamma_min(f))
    assert info.value.step == "c"


def test_cost_system_matches_frequency_formula():
    G = random_stable(np.random.default_rng(7), 3, 2, 2)
    res = ls.synthesize(G)
    f, K = res.factors, res.K_aug
    T = ls.cost_system(f, K)
    for w in np.logspace(-2, 2, 20):
        Gw, Kw, Mw = (freq_response(X, w) for X in (G, K, f.M))
        S = np.linalg.inv(np.eye(2) - Gw @ Kw) @ np.linalg.inv(Mw)
        assert_allclose(freq_response(T, w), np.vstack([Kw @ S, S]), rtol=1e-7, atol=1e-10)


# ---------------------------------------------------------------------------
# de-augmentation


def test_deaugment_identity_weights(designs):
    K_aug = designs[3].result.K_aug
    K = ls.deaugment(K_aug, IDENTITY_WEIGHTS)
    for w in np.logspace(-3, 3, 20):
        assert_allclose(freq_response(K, w), freq_response(K_aug, w), rtol=1e-8, atol=1e-12)


@pytest.mark.parametrize("region", [2, 3])
def test_deaugment_folds_weights(designs, region):
    d = designs[region]
    K, K_aug, w = d.result.K, d.result.K_aug, d.weights
    assert (K.ninputs, K.noutputs) == (4, 2)
    full = ls.deaugment(K_aug, w, tol=None)
    assert full.nstates == K_aug.nstates + w.w_pre.nstates + w.w_post.nstates
    for omega in np.logspace(-2, 2, 20):
        s = 1j * omega
        expected = (weight_matrix(w.pre, w.pre_gain, s) @ freq_response(K_aug, omega)
                    @ weight_matrix(w.post, w.post_gain, s))
        scale = np.linalg.norm(expected)
        assert np.linalg.norm(freq_response(full, omega) - expected) <= 1e-8 * scale
        # the reduced controller drops weakly coupled states of the full series form
        assert np.linalg.norm(freq_response(K, omega) - expected) <= 1e-4 * scale


def test_deaugmentation_preserves_verdict(params, designs, rng):
    for op in random_operating_points(params, rng, 12):
        Gn = linearize_at(params, op)
        for d in designs.values():
            Ga = ls.shape_plant(Gn, d.weights)
            assert ls.loop_is_stable(Gn, d.result.K) == ls.loop_is_stable(Ga, d.result.K_aug)


# ---------------------------------------------------------------------------
# robustness


@pytest.mark.parametrize("region", [2, 3])
def test_margin_zero_at_design_point(params, designs, region):
    d = designs[region]
    v = DESIGN_WIND[region]
    p = d.op.y0.p if region == 2 else DESIGN_POWER
    point = ls.evaluate_point(params, list(designs.values()), v, p)
    assert point.feasible
    assert point.margins[region] < 1e-6
    assert point.stable[region] and point.stable_aug[region]
    assert ls.coprime_margin(d.result.factors, d.result.G_shaped) < 1e-9


def test_operating_point_classification(params):
    assert ls.operating_point(params, 6.0, 3.0e6) is None
    top = eq.equilibrium_region2(params, 7.0)
    assert ls.operating_point(params, 7.0, top.y0.p).region == 2
    assert ls.operating_point(params, 12.0, 2.0e6).region == 3


def _flood_fill(mask, start):
    seen = np.zeros_like(mask)
    todo = deque([start])
    seen[start] = True
    while todo:
        i, j = todo.popleft()
        for a, b in ((i + 1, j), (i - 1, j), (i, j + 1), (i, j - 1)):
            if 0 <= a < mask.shape[0] and 0 <= b < mask.shape[1] and mask[a, b] \
                    and not seen[a, b]:
                seen[a, b] = True
                todo.append((a, b))
    return seen


@pytest.fixture(scope="module")
def full_sweep(params, designs):
    v_grid = np.linspace(4.0, 16.0, 20)
    p_grid = np.linspace(0.2e6, 3.4e6, 20)
    pts = ls.robustness_sweep(params, [designs[2], designs[3]], v_grid, p_grid, threads=4)
    return v_grid, p_grid, pts


@pytest.mark.parametrize("region", [2, 3])
def test_stable_region_connected_around_design(designs, full_sweep, region):
    v_grid, p_grid, pts = full_sweep
    mask = np.array([pt.feasible and pt.stable[region] for pt in pts])
    mask = mask.reshape(v_grid.size, p_grid.size)
    op = designs[region].op
    centre = np.array([np.argmin(np.abs(v_grid - op.v0)), np.argmin(np.abs(p_grid - op.y0.p))])
    # nearest stable cell to the design point seeds the fill
    cells = np.argwhere(mask)
    seed = tuple(cells[np.argmin(np.sum((cells - centre) ** 2, axis=1))])
    reached = _flood_fill(mask, seed)
    assert np.array_equal(reached, mask), f"{mask.sum() - reached.sum()} stable cells unreached"


def test_sweep_overlap_and_chain(designs, full_sweep):
    _, _, pts = full_sweep
    g = {r: designs[r].result.gamma_sub for r in (2, 3)}
    both = [pt for pt in pts if pt.certified(2, g[2]) and pt.certified(3, g[3])]
    assert both
    for pt in pts:
        for r in (2, 3):
            if pt.certified(r, g[r]):
                assert pt.stable[r]


def test_sweep_csv_round_trip(tmp_path, full_sweep):
    _, _, pts = full_sweep
    path = tmp_path / "sweep.csv"
    ls.write_sweep_csv(path, pts)
    text = path.read_text()
    assert text.splitlines()[0] == ",".join(ls.SWEEP_HEADER)
    assert "nan" not in text.lower()
    rows = ls.read_sweep_csv(path)
    assert len(rows) == len(pts)
    for row, pt in zip(rows, pts):
        assert (row["V"], row["P"], row["feasible"]) == (pt.v, pt.p, pt.feasible)
        if pt.feasible:
            assert (row["margin_K2"], row["margin_K3"]) == (pt.margins[2], pt.margins[3])
            assert (row["stable_K2"], row["stable_K3"]) == (pt.stable[2], pt.stable[3])
        else:
            assert row["margin_K2"] == row["margin_K3"] == float("inf")


def test_sweep_threads_give_same_result(params, designs, monkeypatch):
    v_grid, p_grid = [6.0, 12.0], [1.0e6, 2.5e6]
    serial = ls.robustness_sweep(params, [designs[3]], v_grid, p_grid, threads=1)
    monkeypatch.setenv("WINDSHAPE_THREADS", "3")
    threaded = ls.robustness_sweep(params, [designs[3]], v_grid, p_grid)
    assert [(p.v, p.p, p.margins, p.stable) for p in serial] == \
        [(p.v, p.p, p.margins, p.stable) for p in threaded]
