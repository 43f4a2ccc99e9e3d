import numpy as np
import pytest
from hypothesis import given, strategies as st

from fedssg import nn
from fedssg.allocator import AllocationInput, AllocatorConfig, synthetic_budget
from fedssg.core import ClientDataset, ConfigError, Dataset, ProtocolError, RngStream, checksum
from fedssg.datasynth import BenchmarkSpec, FederatedSplit, generate_benchmark, make_federated_split
from fedssg.fedengine import (ClientUpdate, FederationConfig, ModelConfig, PretrainConfig, aggregate,
                              allocation_for, init_model, local_train, pretrain, run_federation, select_clients)
from fedssg.generator import GeneratorConfig, train_generator
from fedssg.metrics import accuracy, evaluate

from conftest import make_dataset

SPEC = BenchmarkSpec()
TOPO = ModelConfig().topology(SPEC.dim, SPEC.n_classes)


@pytest.fixture(scope="module")
def bench():
    return generate_benchmark(SPEC, RngStream(0))


@pytest.fixture(scope="module")
def split(bench):
    return make_federated_split(bench[0], 20, 0.5, RngStream(0).child("split"))


@pytest.fixture(scope="module")
def theta0():
    return init_model(TOPO, RngStream(0))


@pytest.fixture(scope="module")
def small_generator(bench):
    return train_generator(bench[1], GeneratorConfig(T=16, epochs=3, hidden=(16,)), RngStream(0))


def fed(**kw):
    base = dict(K=20, active_per_round=6, rounds=10, local_epochs=1, local_lr=1e-3, eval_interval=5)
    base.update(kw)
    return FederationConfig(**base)


def hist_distance(h):
    p = np.asarray(h, float) / np.sum(h)
    return np.linalg.norm(p - 1 / len(p))


def test_pretrain_disabled_returns_init(bench):
    res = pretrain(bench[1], TOPO, PretrainConfig(), RngStream(3), enabled=False)
    assert np.array_equal(res.params.values, init_model(TOPO, RngStream(3)).values)


def test_pretrain_separable_data():
    gen = np.random.default_rng(0)
    y = np.repeat([0, 1], 200)
    X = np.where(y[:, None] == 0, 2.0, -2.0) + 0.3 * gen.normal(size=(400, 4))
    data = Dataset(X, y, np.zeros(400, np.int64), 2, 1)
    topo = ModelConfig(trunk_layers=(8,), head_layers=(8,)).topology(4, 2)
    params = pretrain(data, topo, PretrainConfig(epochs=10, trunk_lr=1e-3, head_lr=1e-3), RngStream(0)).params
    assert accuracy(evaluate(params, data)[0]) >= 0.99


def test_pretrain_deterministic(bench):
    cfg = PretrainConfig(epochs=2)
    a = pretrain(bench[1], TOPO, cfg, RngStream(1)).params
    b = pretrain(bench[1], TOPO, cfg, RngStream(1)).params
    assert checksum(a.values) == checksum(b.values)


def test_pretrain_rejects_missing_class():
    data = make_dataset([5, 0, 5])
    with pytest.raises(ConfigError):
        pretrain(data, nn.MlpTopology(3, (4,), (4,), 3), PretrainConfig(), RngStream(0))


def test_select_all_when_active_equals_k():
    assert select_clients(7, 7, 3, RngStream(0)) == list(range(7))


def test_select_deterministic_and_sorted():
    a = select_clients(85, 6, 11, RngStream(4))
    assert a == select_clients(85, 6, 11, RngStream(4))
    assert a == sorted(set(a)) and len(a) == 6


def test_selection_frequencies():
    counts = np.zeros(85)
    for r in range(1000):
        counts[select_clients(85, 6, r, RngStream(9))] += 1
    p = 6 / 85
    sd = np.sqrt(1000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000 * p) < 3 * sd + 1)


def test_aggregate_identical():
    topo = nn.MlpTopology(2, (3,), (), 2, dropout=0.0, head_norm=False)
    p = nn.init_params(topo, np.random.default_rng(0))
    out = aggregate([(p, 1.0), (p, 2.0), (p, 5.0)])
    assert np.allclose(out.values, p.values, rtol=0, atol=1e-15)
    assert np.array_equal(aggregate([(p, 3.0)]).values, p.values)


def _vec(values):
    topo = nn.MlpTopology(1, (), (), 1, dropout=0.0, head_norm=False)
    return nn.ParamVector(np.asarray(values, float), topo)


def test_aggregate_by_hand():
    assert aggregate([(_vec([1, 3]), 1.0), (_vec([5, 7]), 3.0)]).values.tolist() == [4.0, 6.0]


@given(st.integers(0, 1000), st.integers(1, 8), st.floats(0.1, 10))
def test_aggregate_oracle_and_invariances(seed, n, scale):
    gen = np.random.default_rng(seed)
    vals = gen.normal(size=(n, 2))
    w = gen.uniform(0.1, 5, size=n)
    out = aggregate([(_vec(v), wi) for v, wi in zip(vals, w)]).values
    oracle = [sum(w[i] * vals[i][j] for i in range(n)) / sum(w) for j in range(2)]
    assert np.max(np.abs(out - oracle)) <= 1e-12
    same = aggregate([(_vec(v), 1.0) for v in vals]).values
    assert np.max(np.abs(same - vals.mean(0))) <= 1e-12
    scaled_w = aggregate([(_vec(v), scale * wi) for v, wi in zip(vals, w)]).values
    assert np.max(np.abs(scaled_w - out)) <= 1e-12
    scaled_p = aggregate([(_vec(scale * v), wi) for v, wi in zip(vals, w)]).values
    assert np.max(np.abs(scaled_p - scale * out)) <= 1e-12 * max(1.0, scale)


def test_aggregate_orders_by_client_id():
    gen = np.random.default_rng(0)
    ups = [ClientUpdate(k, _vec(gen.normal(size=2)), float(k + 1)) for k in range(5)]
    a = aggregate(ups)
    b = aggregate(ups[::-1])
    assert np.array_equal(a.values, b.values)


def test_aggregate_errors():
    with pytest.raises(ProtocolError):
        aggregate([])
    with pytest.raises(ProtocolError):
        aggregate([(_vec([1, 2]), 0.0)])
    topo2 = nn.MlpTopology(2, (), (), 1, dropout=0.0, head_norm=False)
    with pytest.raises(ProtocolError):
        aggregate([(_vec([1, 2]), 1.0), (nn.ParamVector(np.zeros(3), topo2), 1.0)])


def test_local_train_order_independent(split, theta0):
    cfg = fed()
    chosen = [2, 9, 15]
    fwd = [local_train(split.clients[k], theta0, cfg, RngStream(0).child("local", 0, k)) for k in chosen]
    rev = [local_train(split.clients[k], theta0, cfg, RngStream(0).child("local", 0, k)) for k in chosen[::-1]]
    assert np.array_equal(aggregate(fwd).values, aggregate(rev).values)


def test_noop_federation_returns_theta0(bench, theta0):
    one = make_federated_split(bench[0], 3, 0.5, RngStream(0))
    split1 = FederatedSplit(one.clients[:1], (1,), 0.5, one.test_set, one.val_sets[:1])
    res = run_federation(split1, theta0, fed(K=1, active_per_round=1, rounds=1, local_epochs=0), RngStream(0))
    assert np.array_equal(res.params.values, theta0.values)


def test_strategy_reduction_bit_identical(split, theta0):
    ref = run_federation(split, theta0, fed(strategy="fedavg"), RngStream(2))
    for cfg in (fed(strategy="fedprox", prox_mu=0.0), fed(strategy="moon", moon_mu=0.0)):
        res = run_federation(split, theta0, cfg, RngStream(2))
        assert [r.checksum for r in res.rounds] == [r.checksum for r in ref.rounds]


def test_strategies_differ_when_active(split, theta0):
    ref = run_federation(split, theta0, fed(rounds=2), RngStream(2))
    for cfg in (fed(rounds=2, strategy="fedprox", prox_mu=1.0), fed(rounds=2, strategy="moon")):
        assert run_federation(split, theta0, cfg, RngStream(2)).rounds[-1].checksum != ref.rounds[-1].checksum


def test_parallel_workers_match_serial(split, theta0):
    cfg = fed(rounds=3)
    a = run_federation(split, theta0, cfg, RngStream(5), workers=1)
    b = run_federation(split, theta0, cfg, RngStream(5), workers=2)
    assert [r.checksum for r in a.rounds] == [r.checksum for r in b.rounds]


def test_history_cadence(split, theta0):
    res = run_federation(split, theta0, fed(rounds=7, eval_interval=3), RngStream(0))
    assert [h["round"] for h in res.history] == [3, 6, 7]


def test_iid_two_clients_match_centralized():
    gaps = []
    for seed in range(3):
        gen = np.random.default_rng(seed)
        y = np.repeat(np.arange(3), 200)
        means = gen.normal(size=(3, 4)) * 2
        X = means[y] + gen.normal(size=(600, 4))
        data = Dataset(X, y, np.zeros(600, np.int64), 3, 1)
        perm = gen.permutation(600)
        test, pool = data.subset(perm[:150]), data.subset(perm[150:])
        halves = [pool.subset(np.arange(i, len(pool), 2)) for i in range(2)]
        empty = Dataset.empty(4, 3, 1)
        clients = tuple(ClientDataset(k, 0, h, empty) for k, h in enumerate(halves))
        split2 = FederatedSplit(clients, (2,), 1.0, test, (empty, empty))
        topo = nn.MlpTopology(4, (16,), (8,), 3)
        theta = init_model(topo, RngStream(seed))
        # matched budgets: 2 epochs per round for 20 rounds vs 40 centralized epochs
        cfg = FederationConfig(K=2, active_per_round=2, rounds=20, local_epochs=2, local_lr=3e-3)
        fed_acc = run_federation(split2, theta, cfg, RngStream(seed)).history[-1]["acc_Avg"]
        central = ClientDataset(0, 0, pool, empty)
        cfg_c = FederationConfig(K=1, active_per_round=1, local_epochs=40, local_lr=3e-3)
        params = local_train(central, theta, cfg_c, RngStream(seed).child("central")).params
        gaps.append(abs(fed_acc - accuracy(evaluate(params, test)[0])))
    assert np.mean(gaps) < 0.02


def test_synthetic_needs_generator(split, theta0):
    with pytest.raises(ConfigError):
        run_federation(split, theta0, fed(use_synthetic=True), RngStream(0))


def test_scale_violation_needs_override(split, theta0, small_generator):
    flat = AllocatorConfig(domain_scales=(50, 50, 50))
    with pytest.raises(ConfigError, match="validate_domain_scales"):
        run_federation(split, theta0, fed(use_synthetic=True, rounds=1), RngStream(0), small_generator, flat)
    ok = AllocatorConfig(domain_scales=(50, 50, 50), allow_scale_override=True)
    run_federation(split, theta0, fed(use_synthetic=True, rounds=1), RngStream(0), small_generator, ok)


def test_generator_untouched_and_budgets_applied(split, theta0, small_generator):
    before = small_generator.checksum()
    res = run_federation(split, theta0, fed(use_synthetic=True, rounds=2), RngStream(0), small_generator)
    assert res.generator_checksum == (before, before) and small_generator.checksum() == before
    for cl in res.clients:
        inp, plan = res.plans[cl.client_id]
        assert cl.synthetic.class_counts.tolist() == list(plan.per_class_synthetic)
        assert np.all(cl.synthetic.domains == cl.domain)
        assert plan.total == round(AllocatorConfig().domain_scales[cl.domain])


def test_augmentation_moves_toward_uniform_desk_scale():
    alloc = AllocatorConfig()
    checked = 0
    for seed in range(5):
        priv, _ = generate_benchmark(SPEC, RngStream(seed))
        sp = make_federated_split(priv, 20, 0.5, RngStream(seed).child("split"))
        for cl in sp.clients:
            n = cl.real.class_counts
            if np.all(n == n[0]):
                continue
            _, plan = allocation_for(cl, alloc)
            assert hist_distance(n + np.array(plan.per_class_synthetic)) < hist_distance(n)
            checked += 1
    assert checked >= 90


@given(st.lists(st.integers(0, 50), min_size=2, max_size=6).filter(lambda c: len(set(c)) > 1 and sum(c) > 0),
       st.floats(0.5, 200))
def test_normalized_distance_ratio(counts, S):
    # pre-rounding, the normalized-histogram distance scales by |1 - lam| * N / (N + S)
    plan = synthetic_budget(AllocationInput(tuple(counts), 0, 1.0, S))
    n = np.array(counts, float)
    ratio = hist_distance(n + np.array(plan.real_valued_budget)) / hist_distance(n)
    assert ratio == pytest.approx(abs(1 - plan.lam) * n.sum() / (n.sum() + S), rel=1e-9)


def test_large_lambda_can_overshoot():
    # tiny, nearly balanced client with a large budget: the minority class ends up the majority
    plan = synthetic_budget(AllocationInput((3, 3, 1, 2, 3), 1, 1.0, 50.0))
    n = np.array([3, 3, 1, 2, 3])
    assert plan.lam == 6.25
    assert hist_distance(n + np.array(plan.real_valued_budget)) > hist_distance(n)
