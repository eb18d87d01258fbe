import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fhs.autodiff import SgdConfig, ShapeError
from fhs.datasets import LabeledDataset, make_client, make_toy_concept_shift
from fhs.divergence import soft_risk
from fhs.federation import (Federation, FederationConfig, GeneratorTraining, accuracy, aggregate,
                            ensemble_proba, fedensemble_evaluate, local_train,
                            local_train_with_generator, train_generators_server)
from fhs.models import (ModelParams, generator_loss, init_generator, init_model, predict_proba,
                        sample_generator_batch)

TOY_LAYERS = (2, 64, 32, 2)


def _linear(W, b):
    """Linear model in raw input space (identity representation)."""
    W = np.asarray(W, float)
    return ModelParams.from_arrays({"representation.W0": np.eye(W.shape[0]),
                                    "representation.b0": np.zeros(W.shape[0]),
                                    "predictor.W": W, "predictor.b": np.asarray(b, float)},
                                   (W.shape[0], W.shape[0], W.shape[1]), "none")


def _same(a: ModelParams, b: ModelParams) -> bool:
    na, nb = a.named_arrays(), b.named_arrays()
    return list(na) == list(nb) and all(na[k].tobytes() == nb[k].tobytes() for k in na)


def _toy_fed(method="fedavg", rounds=3, seed=0, **kw):
    clients, test = make_toy_concept_shift(40, seed, n_test_per_class=40)
    cfg = FederationConfig(K=3, rounds=rounds, local_steps=5, method=method, seed=seed,
                           generator_steps=20, **kw)
    return Federation(cfg, clients, test, TOY_LAYERS, SgdConfig(0.01, 32))


def _metric_bytes(history):
    return [(m.round, m.global_accuracy.hex(), m.global_loss.hex(),
             [a.hex() for a in m.per_client_accuracy]) for m in history]


# -- aggregation -------------------------------------------------------------


def test_aggregate_arithmetic_mean():
    a = _linear([[0.0], [0.0]], [0.0])
    b = _linear([[2.0], [4.0]], [6.0])
    avg = aggregate([a, b])
    assert avg.predictor["W"].data.ravel().tolist() == [1.0, 2.0]
    assert avg.predictor["b"].data.tolist() == [3.0]


def test_aggregate_idempotent_on_identical_inputs():
    p = init_model((5, 7, 3), np.random.default_rng(2))
    assert _same(aggregate([p, p.copy(), p.copy()]), p)


@settings(max_examples=20, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_aggregate_permutation_invariant(K, seed):
    rng = np.random.default_rng(seed)
    models = [init_model((3, 4, 2), rng) for _ in range(K)]
    ref = aggregate(models)
    for perm in itertools.islice(itertools.permutations(range(K)), 6):
        assert _same(aggregate([models[i] for i in perm]), ref)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_aggregate_linear(seed):
    # integer-valued tensors over 4 clients keep every sum and halving exact
    rng = np.random.default_rng(seed)

    def model(W, b):
        return _linear(W, b)

    A = [(rng.integers(-50, 50, (2, 3)), rng.integers(-50, 50, 3)) for _ in range(4)]
    B = [(rng.integers(-50, 50, (2, 3)), rng.integers(-50, 50, 3)) for _ in range(4)]
    lhs = aggregate([model(2 * wa + wb, 2 * ba + bb) for (wa, ba), (wb, bb) in zip(A, B)])
    ga, gb = aggregate([model(*x) for x in A]), aggregate([model(*x) for x in B])
    for g in ("W", "b"):
        expected = 2 * ga.predictor[g].data + gb.predictor[g].data
        assert np.array_equal(lhs.predictor[g].data, expected)


def test_aggregate_errors():
    with pytest.raises(ValueError):
        aggregate([])
    with pytest.raises(ShapeError):
        aggregate([init_model((3, 4, 2), zero=True), init_model((3, 5, 2), zero=True)])


def test_weighted_aggregate():
    a, b = _linear([[0.0]], [0.0]), _linear([[4.0]], [8.0])
    assert aggregate([a, b], weights=[3, 1]).predictor["W"].data.tolist() == [[1.0]]


# -- local training ----------------------------------------------------------


def _two_points():
    data = LabeledDataset([[1.0, 0.0], [-1.0, 0.0]], [0, 1], 2)
    return make_client(0, data, {})


def _cross_entropy(params, data):
    p = predict_proba(params, data.features)
    return float(-np.mean(np.log(p[np.arange(data.n), data.labels])))


def test_zero_epochs_return_init():
    init = init_model((2, 4, 2), np.random.default_rng(0))
    assert _same(local_train(_two_points(), init, 0, SgdConfig(), seed=1), init)


def test_separable_points_loss_decreases():
    client = _two_points()
    init = init_model((2, 4, 2), np.random.default_rng(0))
    before = init.copy()
    out = local_train(client, init, 100, SgdConfig(0.05, 2), seed=1)
    assert _cross_entropy(out, client.data) < _cross_entropy(init, client.data)
    assert _same(init, before)  # init left untouched


def test_local_train_deterministic_and_seeded():
    clients, _ = make_toy_concept_shift(30, 0)
    init = init_model(TOY_LAYERS, np.random.default_rng(0))
    a = local_train(clients[0], init, 10, SgdConfig(0.01, 8), seed=3)
    b = local_train(clients[0], init, 10, SgdConfig(0.01, 8), seed=3)
    c = local_train(clients[0], init, 10, SgdConfig(0.01, 8), seed=4)
    assert _same(a, b) and not _same(a, c)


def test_pass_epochs_sweep_the_data():
    clients, _ = make_toy_concept_shift(30, 0)  # 60 rows, batch 8 -> 8 steps per pass
    init = init_model(TOY_LAYERS, np.random.default_rng(0))
    sgd = SgdConfig(0.01, 8)
    assert _same(local_train(clients[0], init, 2, sgd, 3, epoch_unit="pass"),
                 local_train(clients[0], init, 16, sgd, 3))


def test_empty_client_rejected():
    empty = make_client(0, LabeledDataset(np.zeros((0, 2)), [], 2), {})
    with pytest.raises(ValueError):
        local_train(empty, init_model((2, 3, 2), zero=True), 1, SgdConfig(), 0)


@pytest.mark.parametrize("override", [{"m_k": 0}, {"w_gen": 0.0}])
def test_generator_training_degenerates_to_plain(override):
    clients, _ = make_toy_concept_shift(30, 0)
    init = init_model(TOY_LAYERS, np.random.default_rng(0))
    gen = init_generator(32, 2, np.random.default_rng(1))
    cfg = FederationConfig(K=3, local_steps=12, **override)
    sgd = SgdConfig(0.01, 16)
    assert _same(local_train_with_generator(clients[0], init, gen, cfg, sgd, 9),
                 local_train(clients[0], init, 12, sgd, 9))


def test_generator_dim_mismatch():
    clients, _ = make_toy_concept_shift(10, 0)
    init = init_model(TOY_LAYERS, np.random.default_rng(0))
    with pytest.raises(ShapeError):
        local_train_with_generator(clients[0], init, init_generator(8, 2, np.random.default_rng(1)),
                                   FederationConfig(K=3), SgdConfig(), 0)


def test_generated_latents_improve_transfer_to_other_clients():
    # Paired runs from a FedAvg-trained global model: client 0 retrains with and
    # without its conflict generator; compare accuracy on clients 1 and 2.
    # Frozen means over 8 seeds: 0.584063 plain vs 0.590625 with the generator.
    plain, aided = [], []
    for seed in range(8):
        clients, test = make_toy_concept_shift(100, seed)
        sgd = SgdConfig(0.01, 32)
        fed = Federation(FederationConfig(K=3, rounds=40, local_steps=5, method="fedavg", seed=seed),
                         clients, test, TOY_LAYERS, sgd)
        fed.run()
        gens = train_generators_server([p.predictor for p in fed.locals], 32, 2, 200, seed=3)
        cfg = FederationConfig(K=3, local_steps=5, m_k=64, w_gen=5.0)
        others = [test.where_source(k) for k in (1, 2)]

        def transfer(p):
            return np.mean([accuracy(predict_proba(p, o.features), o.labels) for o in others])

        plain.append(transfer(local_train(clients[0], fed.global_params, 5, sgd, 5)))
        aided.append(transfer(local_train_with_generator(clients[0], fed.global_params, gens[0],
                                                         cfg, sgd, 5)))
    assert np.mean(plain) == pytest.approx(0.584063, abs=1e-6)
    assert np.mean(aided) == pytest.approx(0.590625, abs=1e-6)
    assert np.mean(aided) > np.mean(plain)


# -- server-side generators --------------------------------------------------


def test_identical_predictors_cancel():
    p = init_model((2, 4, 3), np.random.default_rng(0)).predictor
    budget = GeneratorTraining(steps=30, hidden=16)
    gens = train_generators_server([p, p], 4, 3, 30, seed=0, budget=budget)
    assert len(gens) == 2
    rng = np.random.default_rng(5)
    for k, g in enumerate(gens):
        for _ in range(5):
            batch = sample_generator_batch(g, 64, rng)
            assert abs(generator_loss(g, [p, p], k, batch, budget.grl, 0.0).value) < 1e-6


def test_server_returns_one_generator_per_client():
    preds = [init_model((2, 4, 3), np.random.default_rng(i)).predictor for i in range(5)]
    gens = train_generators_server(preds, 4, 3, 3, seed=0)
    assert len(gens) == 5 and all(g.latent_dim == 4 for g in gens)
    subset = train_generators_server(preds, 4, 3, 3, seed=0, clients=[1, 3])
    assert [g is None for g in subset] == [True, False, True, False, True]
    # subset training reproduces the full run's generators for the same slots
    a, b = gens[3].named_arrays(), subset[3].named_arrays()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


# -- ensemble ----------------------------------------------------------------


def test_identical_ensemble_equals_single_model():
    clients, test = make_toy_concept_shift(20, 0)
    m = init_model(TOY_LAYERS, np.random.default_rng(3))
    single = accuracy(predict_proba(m, test.features), test.labels)
    assert fedensemble_evaluate([m, m.copy(), m.copy()], test) == single


def test_ensemble_tie_breaks_to_lower_class():
    big = 50.0
    a = _linear([[big, -big]], [0.0, 0.0])   # x=1 -> class 0 with p ~ 1
    b = _linear([[-big, big]], [0.0, 0.0])   # x=1 -> class 1 with p ~ 1
    probs = ensemble_proba([a, b], np.array([[1.0]]))
    assert np.allclose(probs, [[0.5, 0.5]])
    point = LabeledDataset([[1.0]], [0], 2)
    assert fedensemble_evaluate([a, b], point) == 1.0
    assert fedensemble_evaluate([a, b], LabeledDataset([[1.0]], [1], 2)) == 0.0


def test_ensemble_brute_force_on_eight_points():
    models = [_linear([[1.0, -1.0], [0.0, 0.0]], [0.0, 0.0]),
              _linear([[0.0, 0.0], [2.0, -2.0]], [0.0, 0.0]),
              _linear([[-1.0, 1.0], [1.0, -1.0]], [0.3, 0.0])]
    pts = np.array([[x, y] for x in (-1.5, -0.5, 0.5, 1.5) for y in (-1.0, 1.0)])
    labels = np.array([0, 1, 1, 0, 0, 0, 1, 0])
    correct = 0
    for x, y in zip(pts, labels):
        avg = np.zeros(2)
        for m in models:
            logits = x @ m.predictor["W"].data + m.predictor["b"].data
            e = np.exp(logits - logits.max())
            avg += e / e.sum() / 3
        correct += int((1 if avg[1] > avg[0] else 0) == y)
    data = LabeledDataset(pts, labels, 2)
    assert fedensemble_evaluate(models, data) == correct / 8


def test_ensemble_architecture_mismatch():
    with pytest.raises(ShapeError):
        ensemble_proba([init_model((2, 3, 2), zero=True), init_model((2, 4, 2), zero=True)],
                       np.zeros((1, 2)))


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_ensemble_absolute_error_jensen(K, seed):
    rng = np.random.default_rng(seed)
    models = [init_model((3, 5, 4), rng) for _ in range(K)]
    x, y = rng.normal(size=(30, 3)) * 3, rng.integers(0, 4, 30)
    ens = soft_risk(ensemble_proba(models, x), y)
    members = np.mean([soft_risk(predict_proba(m, x), y) for m in models])
    assert ens <= members + 1e-12


# -- engine ------------------------------------------------------------------


def test_rounds_produce_one_row_each():
    fed = _toy_fed(rounds=4)
    hist = fed.run()
    assert [m.round for m in hist] == [1, 2, 3, 4]
    for m in hist:
        assert 0 <= m.global_accuracy <= 1
        assert len(m.per_client_accuracy) == 3 and all(0 <= a <= 1 for a in m.per_client_accuracy)


def test_single_client_fedavg_collapses_to_local_training():
    clients, test = make_toy_concept_shift(20, 0)
    cfg = FederationConfig(K=1, rounds=3, local_steps=4, method="fedavg")
    fed = Federation(cfg, clients[:1], test, TOY_LAYERS, SgdConfig(0.01, 16))
    for _ in range(3):
        prev = fed.global_params
        fed.run_round()
        assert _same(fed.global_params, fed.locals[0])
        if prev is not None:
            assert not _same(fed.global_params, prev)


def test_fedgenp_without_generated_samples_is_fedavg():
    a = _toy_fed("fedgenp", m_k=0).run()
    b = _toy_fed("fedavg").run()
    assert _metric_bytes(a) == _metric_bytes(b)


@pytest.mark.parametrize("method", ["fedavg", "fedensemble", "fedgen", "fedgenp"])
def test_runs_are_bitwise_deterministic(method):
    a, b = _toy_fed(method, rounds=2), _toy_fed(method, rounds=2)
    assert _metric_bytes(a.run()) == _metric_bytes(b.run())
    assert _same(a.global_params, b.global_params)


def test_threads_do_not_change_results(monkeypatch):
    serial = _toy_fed("fedgenp", rounds=2).run()
    threaded = _toy_fed("fedgenp", rounds=2, threads=3).run()
    assert _metric_bytes(serial) == _metric_bytes(threaded)
    monkeypatch.setenv("FHS_THREADS", "1")
    capped = _toy_fed("fedgenp", rounds=2, threads=3).run()
    assert _metric_bytes(capped) == _metric_bytes(serial)


def test_clients_only_read_their_own_data():
    fed = _toy_fed("fedgenp", rounds=2, active_fraction=0.5)
    fed.run()
    for c in fed.clients:
        assert c.access_log and set(c.access_log) == {c.client_id}


def test_partial_participation_keeps_inactive_uploads():
    fed = _toy_fed("fedavg", rounds=1, active_fraction=0.34)
    fed.initialize()
    before = [p.copy() for p in fed.locals]
    active = fed.active_clients(1)
    assert len(active) == 2  # ceil(0.34 * 3)
    fed.run_round()
    for k in range(3):
        assert _same(fed.locals[k], before[k]) == (k not in active)
    assert fed.active_clients(1) == active


def test_config_validation():
    for kw in [{"K": 0}, {"active_fraction": 0}, {"rounds": 0}, {"method": "fedprox"},
               {"m_k": -1}, {"epoch_unit": "step"}]:
        with pytest.raises(ValueError):
            FederationConfig(**kw)
    clients, test = make_toy_concept_shift(5, 0)
    with pytest.raises(ValueError):
        Federation(FederationConfig(K=2), clients, test, TOY_LAYERS)
