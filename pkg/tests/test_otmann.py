import numpy as np
import pytest

from nasbot import archgraph as ag
from nasbot import otmann as ot
from nasbot.pools import initial_pool

import oracles

NUS = ot.DEFAULT_NU_GRID


def random_pair(seed, net_class=None):
    rng = np.random.default_rng(seed)
    net_class = net_class or ["cnn", "mlp"][seed % 2]
    return oracles.random_valid_arch(rng, net_class), oracles.random_valid_arch(rng, net_class)


# ---------------------------------------------------------------------------
# penalties


def test_cnn_penalty_entries():
    p = ot.default_penalty("cnn")
    assert p("conv3", "conv5") == 0.2
    assert p("conv5", "conv7") == 0.2
    assert p("conv3", "conv7") == 0.3
    assert p("res3", "res7") == 0.3
    assert p("res3", "conv5") == pytest.approx(0.28)
    assert p("res5", "conv5") == pytest.approx(0.1)
    assert p("max-pool", "avg-pool") == 0.25
    assert p("conv3", "fc") == 10.0
    assert p("softmax", "op") == 10.0


def test_mlp_penalty_entries():
    p = ot.default_penalty("mlp")
    assert p("relu", "logistic") == 0.25
    assert p("relu", "elu") == 0.1
    assert p("tanh", "logistic") == 0.1
    assert p("linear", "relu") == 10.0


@pytest.mark.parametrize("net_class", ["cnn", "mlp"])
def test_penalty_matches_oracle_table(net_class):
    p = ot.default_penalty(net_class)
    m = p.matrix
    assert np.all(np.diag(m) == 0)
    np.testing.assert_array_equal(m, m.T)
    for i, x in enumerate(p.labels):
        for j, y in enumerate(p.labels):
            assert m[i, j] == pytest.approx(oracles.penalty_oracle(x, y, net_class), abs=1e-15)


@pytest.mark.parametrize("net_class", ["cnn", "mlp"])
@pytest.mark.parametrize("big", [2.5, 10.0, 1000.0])
def test_default_penalties_satisfy_triangle(net_class, big):
    assert ot.check_triangle(ot.default_penalty(net_class, big)) is None


def test_triangle_violation_detected():
    m = np.array([[0, 1, 5], [1, 0, 1], [5, 1, 0]], float)
    assert ot.check_triangle(m) == (0, 1, 2)
    assert ot.check_triangle(np.zeros((4, 4))) is None


def test_bad_penalty_rejected_by_params():
    p = ot.default_penalty("mlp")
    costs = p.matrix.copy()
    i, j = p.index("relu"), p.index("tanh")
    costs[i, j] = costs[j, i] = 5.0
    with pytest.raises(ot.PenaltyError):
        ot.DistanceParams("mlp", penalty=ot.LabelPenalty(p.labels, costs))


def test_nu_grid_must_be_positive():
    with pytest.raises(ValueError):
        ot.DistanceParams("cnn", nu_grid=())
    with pytest.raises(ValueError):
        ot.DistanceParams("cnn", nu_grid=(0.1, -1.0))


# ---------------------------------------------------------------------------
# cost matrices


def test_mismatch_matrix_entries():
    g1 = ag.chain("cnn", [("ip",), ("conv3", 16), ("fc", 16), ("softmax",), ("op",)])
    g2 = ag.chain("cnn", [("ip",), ("conv5", 16), ("conv3", 16), ("softmax",), ("op",)])
    m = ot.mismatch_cost_matrix(g1, g2, ot.default_penalty("cnn"))
    assert m.shape == (5, 5)
    assert m[1, 1] == 0.2 and m[1, 2] == 0.0 and m[2, 2] == 10.0
    assert all(m[i, i] == 0 for i in (0, 3, 4))


def test_mismatch_matrix_class_mismatch():
    a = ag.chain("cnn", [("ip",), ("conv3", 16), ("softmax",), ("op",)])
    b = ag.chain("mlp", [("ip",), ("relu", 16), ("linear",), ("op",)])
    with pytest.raises(ot.ClassMismatchError):
        ot.mismatch_cost_matrix(a, b, ot.default_penalty("cnn"))
    with pytest.raises(ot.ClassMismatchError):
        ot.distance(a, b, 0.1, ot.DistanceParams("cnn"))


def test_structural_matrix_two_chains_by_hand():
    g1 = ag.chain("mlp", [("ip",), ("relu", 16), ("linear",), ("op",)])
    g2 = ag.chain("mlp", [("ip",), ("relu", 16), ("relu", 16), ("relu", 16), ("linear",), ("op",)])
    s = ot.structural_cost_matrix(g1, g2)
    # first processing layer: class all -> (ip) 1 vs 1, (op) 2 vs 4 for sp/lp/rw
    # class rect -> (ip) 0 vs 0, (op) 0 vs 2; class sigm -> zeros
    want = (3 * 2 / 6 + 3 * 2 / 6 + 0) / 3
    assert s[1, 1] == pytest.approx(want, abs=1e-12)
    _, want_full = oracles.cost_matrices_oracle(g1, g2)
    np.testing.assert_allclose(s, want_full, atol=1e-12)
    np.testing.assert_allclose(ot.structural_cost_matrix(g2, g1), s.T, atol=0)


def test_structural_matrix_self_has_zero_diagonal():
    for a in initial_pool("cnn")[:3]:
        assert np.all(np.diag(ot.structural_cost_matrix(a, a)) == 0)


@pytest.mark.parametrize("seed", range(10))
def test_cost_matrices_match_oracle(seed):
    g1, g2 = random_pair(seed)
    lmm, struct = oracles.cost_matrices_oracle(g1, g2)
    np.testing.assert_allclose(ot.mismatch_cost_matrix(g1, g2, ot.default_penalty(g1.net_class)),
                               lmm, atol=1e-15)
    np.testing.assert_allclose(ot.structural_cost_matrix(g1, g2), struct, atol=1e-12)


# ---------------------------------------------------------------------------
# distance


@pytest.mark.parametrize("net_class", ["cnn", "mlp"])
def test_self_distance_zero_on_pool(net_class):
    params = ot.DistanceParams(net_class)
    for a in initial_pool(net_class):
        for nu in NUS:
            d, _ = ot.distance(a, a, nu, params)
            assert abs(d) <= 1e-9


@pytest.mark.parametrize("nu", NUS)
def test_split_invariance(nu):
    g1, g2 = oracles.split_pair()
    assert ag.validate(g1).ok and ag.validate(g2).ok
    params = ot.DistanceParams("cnn")
    d, plan = ot.distance(g1, g2, nu, params)
    assert abs(d) <= 1e-9
    prof = ot.distance_profile(g1, g2, params)
    assert np.all(np.abs(prof.d) <= 1e-9) and np.all(np.abs(prof.d_bar) <= 1e-9)
    assert abs(oracles.primal_distance_oracle(g1, g2, nu)) <= 1e-9


def test_disjoint_labels_with_zero_structural_weight():
    g1 = ag.chain("cnn", [("ip",), ("conv3", 16), ("conv3", 16), ("softmax",), ("op",)])
    g2 = ag.chain("cnn", [("ip",), ("fc", 32), ("fc", 16), ("softmax",), ("op",)], 2)
    params = ot.DistanceParams("cnn")
    d, plan = ot.distance(g1, g2, 0.0, params)
    m1, m2 = oracles.masses_oracle(g1), oracles.masses_oracle(g2)
    matched = sum(min(m1[i], m2[i]) for i in (0, 3, 4))
    assert d == pytest.approx(m1.sum() + m2.sum() - 2 * matched, rel=1e-12)
    assert d == pytest.approx(oracles.primal_distance_oracle(g1, g2, 0.0), rel=1e-9)
    # the conv and fc layers are left entirely unassigned
    assert plan.coupling[1:3, 1:3].sum() == 0


@pytest.mark.parametrize("seed", range(25))
def test_distance_matches_primal_program(seed):
    g1, g2 = random_pair(seed)
    params = ot.DistanceParams(g1.net_class)
    for nu in (0.1, 0.8):
        d, plan = ot.distance(g1, g2, nu, params)
        assert abs(d - oracles.primal_distance_oracle(g1, g2, nu)) <= 1e-7
        m1, m2 = oracles.masses_oracle(g1), oracles.masses_oracle(g2)
        np.testing.assert_allclose(plan.coupling.sum(axis=1), np.append(m1, m2.sum()), atol=1e-8)
        np.testing.assert_allclose(plan.coupling.sum(axis=0), np.append(m2, m1.sum()), atol=1e-8)


@pytest.mark.parametrize("seed", range(15))
def test_profile_consistent_with_single_calls(seed):
    g1, g2 = random_pair(seed + 50)
    params = ot.DistanceParams(g1.net_class)
    prof = ot.distance_profile(g1, g2, params)
    tm = ag.total_mass(g1) + ag.total_mass(g2)
    for i, nu in enumerate(NUS):
        d, _ = ot.distance(g1, g2, nu, params)
        assert prof.d[i] == pytest.approx(d, rel=1e-9, abs=1e-9)
    np.testing.assert_allclose(prof.d_bar, prof.d / tm, rtol=1e-12)
    assert np.all(prof.d_bar <= 1.0) and np.all(prof.d >= 0)
    assert np.all(np.diff(prof.d) >= -1e-9)


def test_single_element_grid():
    g1, g2 = random_pair(3)
    params = ot.DistanceParams(g1.net_class, nu_grid=(0.3,))
    prof = ot.distance_profile(g1, g2, params)
    assert prof.d.shape == (1,)
    assert prof.d[0] == pytest.approx(ot.distance(g1, g2, 0.3, params)[0], rel=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_big_invariance(seed):
    g1, g2 = random_pair(seed + 300)
    base = ot.DistanceParams(g1.net_class)
    huge = ot.DistanceParams(g1.net_class, penalty=ot.default_penalty(g1.net_class, 1000.0))
    np.testing.assert_allclose(ot.distance_profile(g1, g2, base).d,
                               ot.distance_profile(g1, g2, huge).d, atol=1e-7)


@pytest.mark.parametrize("net_class", ["cnn", "mlp"])
def test_pseudometric_on_random_triples(net_class):
    rng = np.random.default_rng(11)
    params = ot.DistanceParams(net_class)
    archs = [oracles.random_valid_arch(rng, net_class) for _ in range(12)]
    d, _ = ot.pairwise_matrix(archs, params)
    for g in range(len(NUS)):
        m = d[g]
        assert np.all(m >= 0)
        for i in range(12):
            for j in range(12):
                for k in range(12):
                    assert m[i, k] <= m[i, j] + m[j, k] + 1e-7


# ---------------------------------------------------------------------------
# pairwise matrices and the store


def test_pairwise_singleton():
    a = initial_pool("cnn")[0]
    d, db = ot.pairwise_matrix([a], ot.DistanceParams("cnn"))
    assert d.shape == (4, 1, 1) and np.all(d == 0) and np.all(db == 0)


@pytest.mark.parametrize("net_class", ["cnn", "mlp"])
def test_pool_pairwise_matrix(net_class):
    pool = initial_pool(net_class)
    params = ot.DistanceParams(net_class)
    d, db = ot.pairwise_matrix(pool, params)
    assert d.shape == (4, 10, 10)
    np.testing.assert_allclose(d, d.transpose(0, 2, 1), atol=1e-9)
    assert np.all(np.diagonal(d, axis1=1, axis2=2) == 0)
    off = ~np.eye(10, dtype=bool)
    assert np.all(np.isfinite(d)) and np.all(d[:, off] > 0)
    rng = np.random.default_rng(0)
    for _ in range(5):
        i, j = rng.choice(10, 2, replace=False)
        k = int(rng.integers(4))
        want, _ = ot.distance(pool[i], pool[j], NUS[k], params)
        assert d[k, i, j] == pytest.approx(want, rel=1e-9)


def test_pairwise_rejects_mixed_classes():
    with pytest.raises(ot.ClassMismatchError):
        ot.pairwise_matrix([initial_pool("cnn")[0], initial_pool("mlp")[0]],
                           ot.DistanceParams("cnn"))


def test_distance_store_matches_pairwise():
    pool = initial_pool("mlp")
    params = ot.DistanceParams("mlp")
    store = ot.DistanceStore(params)
    for a in pool * 2:
        store.add(a)
    assert len(store) == 10
    d, db = store.tensors()
    want_d, want_db = ot.pairwise_matrix(pool, params)
    np.testing.assert_allclose(d, want_d.transpose(1, 2, 0), rtol=1e-12)
    np.testing.assert_allclose(db, want_db.transpose(1, 2, 0), rtol=1e-12)
    sub_d, _ = store.matrices([pool[3], pool[7]])
    np.testing.assert_allclose(sub_d[0, 1], want_d[:, 3, 7], rtol=1e-12)
    to_d, _ = store.to(pool[0], pool[1:3])
    np.testing.assert_allclose(to_d, want_d[:, 0, 1:3].T, rtol=1e-12)


def test_store_grows_past_initial_capacity():
    rng = np.random.default_rng(4)
    params = ot.DistanceParams("mlp")
    archs = []
    while len(archs) < 40:
        a = oracles.random_valid_arch(rng, "mlp")
        if a.structural_hash not in {b.structural_hash for b in archs}:
            archs.append(a)
    store = ot.DistanceStore(params)
    for a in archs:
        store.add(a)
    d, _ = store.tensors()
    assert d.shape == (40, 40, 4)
    want, _ = ot.pairwise_matrix(archs, params)
    np.testing.assert_allclose(d, want.transpose(1, 2, 0), rtol=1e-12)


def test_matrix_csv_round_trip(tmp_path):
    m = np.array([[0.0, 1.5], [1.5, 0.0]])
    ot.write_matrix_csv(tmp_path / "m.csv", ["a.json", "b.json"], m)
    names, back = ot.read_matrix_csv(tmp_path / "m.csv")
    assert names == ["a.json", "b.json"]
    np.testing.assert_array_equal(back, m)
