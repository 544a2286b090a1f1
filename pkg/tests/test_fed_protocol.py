import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fed_protocol import (
    AggregationError,
    ClientDivergedError,
    LogitsMatrix,
    ProtocolError,
    RoundConfig,
    ServerState,
    aggregate_logits,
    aggregate_shared_params,
    client_consensus_update,
    client_eval_public,
    client_local_train,
    eval_objective,
    local_steps,
    make_client,
    make_clients,
    replace_shared,
    run_fedkd_hybrid,
    run_round,
    sample_clients,
)
from nn_engine import (
    LayerParams,
    OptimizerKind,
    compact_hetero_spec,
    compact_spec,
    copy_params,
    hybrid_loss,
    init_params,
    params_equal,
    predict_logits,
    zeros_like_params,
)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _linear_grads(p, x, y, target=None, lam=0.0):
    """Gradients of CE + lam * MSE for x @ W1 + b1 -> @ W2 + b2, written out by hand"""
    h = x @ p["W1"] + p["b1"]
    f = h @ p["W2"] + p["b2"]
    d = (_softmax(f) - np.eye(2)[y]) / x.shape[0]
    if target is not None and lam:
        d = d + lam * 2.0 * (f - target) / f.size
    dh = d @ p["W2"].T
    return {"W1": x.T @ dh, "b1": dh.sum(axis=0), "W2": h.T @ d, "b2": d.sum(axis=0)}


def _as_dict(params):
    return {"W1": params["FC1"].weights, "b1": params["FC1"].bias,
            "W2": params["FC2"].weights, "b2": params["FC2"].bias}


class TestSampling:
    def test_full_participation(self):
        assert sample_clients(5, 1.0, 0, seed=0) == [0, 1, 2, 3, 4]

    def test_partial_participation(self):
        ids = sample_clients(100, 0.8, 3, seed=9)
        assert len(ids) == 80 and len(set(ids)) == 80
        assert ids == sorted(ids)

    def test_matches_fisher_yates_reference(self):
        rng = np.random.default_rng([7, 2, 4])
        perm = list(range(6))
        for i in range(3):
            j = i + int(rng.integers(6 - i))
            perm[i], perm[j] = perm[j], perm[i]
        assert sample_clients(6, 0.5, 4, seed=7) == sorted(perm[:3])

    def test_every_client_eventually_participates(self):
        seen = set()
        for t in range(50):
            seen.update(sample_clients(100, 0.8, t, seed=0))
        assert seen == set(range(100))

    def test_at_least_one(self):
        assert len(sample_clients(10, 0.01, 0, seed=0)) == 1

    def test_invalid(self):
        with pytest.raises(ProtocolError):
            sample_clients(0, 1.0, 0, 0)
        with pytest.raises(ProtocolError):
            sample_clients(4, 0.0, 0, 0)


class TestLocalTraining:
    def test_zero_steps_is_identity(self, linear_spec, shards_of):
        c = make_client(0, linear_spec(), seed=0)
        assert client_local_train(c, shards_of(2)[0], 0, 0.1, 8) is c

    def test_one_sgd_step_closed_form(self, linear_spec, shards_of):
        shard = shards_of(3)[1]
        c = make_client(1, linear_spec(), seed=0, optimizer=OptimizerKind.SGD, lr=0.1)
        x = shard.images.reshape(len(shard), -1)
        p = _as_dict(c.params)
        g = _linear_grads(p, x, shard.labels)
        out = client_local_train(c, shard, 1, 0.1, batch_size=len(shard))
        assert np.allclose(out.params["FC2"].weights, p["W2"] - 0.1 * g["W2"], rtol=1e-12, atol=1e-14)
        assert np.allclose(out.params["FC1"].weights, p["W1"] - 0.1 * g["W1"], rtol=1e-12, atol=1e-14)

    def test_full_batch_loss_does_not_increase(self, shards_of):
        shard = shards_of(2)[0]
        c = make_client(0, compact_spec(), seed=1, optimizer=OptimizerKind.SGD, lr=1e-3)
        _, losses = local_steps(c, shard, 10, 1e-3, batch_size=len(shard))
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_input_client_untouched(self, shards_of):
        c = make_client(0, compact_spec(), seed=2)
        before = copy_params(c.params)
        state_before = c.rng.bit_generator.state
        client_local_train(c, shards_of(2)[0], 3, 1e-3, 4)
        assert params_equal(c.params, before)
        assert c.rng.bit_generator.state == state_before

    def test_proximal_step_closed_form(self, linear_spec, shards_of):
        shard = shards_of(3)[0]
        c = make_client(0, linear_spec(), seed=0, optimizer=OptimizerKind.SGD, lr=0.1)
        anchor = zeros_like_params(c.params)
        x = shard.images.reshape(len(shard), -1)
        p = _as_dict(c.params)
        g = _linear_grads(p, x, shard.labels)
        out = client_local_train(c, shard, 1, 0.1, len(shard), mu=2.0, anchor=anchor)
        expected = p["W2"] - 0.1 * (g["W2"] + 2.0 * p["W2"])
        assert np.allclose(out.params["FC2"].weights, expected, rtol=1e-12, atol=1e-14)

    def test_divergence_names_client(self, linear_spec, shards_of):
        spec = linear_spec()
        params = init_params(spec, np.random.default_rng(0))
        params["FC2"] = LayerParams(np.full((3, 2), np.inf), params["FC2"].bias)
        c = make_client(4, spec, seed=0, params=params)
        with pytest.raises(ClientDivergedError) as err:
            client_local_train(c, shards_of(2)[0], 2, 1e-3, 8)
        assert (err.value.client_id, err.value.phase, err.value.step) == (4, "local", 0)


class TestPublicEval:
    def test_zero_params_give_zero_logits(self, linear_spec, small_data):
        public = small_data[0]
        spec = linear_spec()
        c = make_client(0, spec, seed=0, params=zeros_like_params(init_params(spec, np.random.default_rng(0))))
        m = client_eval_public(c, public)
        assert m.shape == (len(public), 2)
        assert not m.values.any()
        assert m.source == 0

    def test_identical_params_identical_logits(self, small_data):
        public = small_data[0]
        a, b = make_clients([compact_spec(), compact_spec()], seed=0, common_init=True)
        assert np.array_equal(client_eval_public(a, public).values, client_eval_public(b, public).values)

    def test_linear_logits(self, linear_spec, small_data):
        public = small_data[0]
        c = make_client(0, linear_spec(), seed=3)
        p = _as_dict(c.params)
        x = public.images.reshape(len(public), -1)
        expected = (x @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"]
        assert np.allclose(client_eval_public(c, public).values, expected, rtol=1e-12, atol=1e-14)


class TestAggregation:
    def test_single_matrix(self, rng):
        m = LogitsMatrix(rng.standard_normal((4, 2)), 3)
        assert np.array_equal(aggregate_logits([m]).values, m.values)

    def test_mean(self):
        out = aggregate_logits([LogitsMatrix([[1.0, 3.0]], 0), LogitsMatrix([[3.0, 5.0]], 1)])
        assert np.array_equal(out.values, [[2.0, 4.0]])
        assert out.source == "aggregated"

    @settings(max_examples=30, deadline=None)
    @given(n=st.integers(1, 6), seed=st.integers(0, 1000))
    def test_order_independent(self, n, seed):
        rng = np.random.default_rng(seed)
        ms = [LogitsMatrix(rng.standard_normal((5, 2)), i) for i in range(n)]
        shuffled = [ms[i] for i in rng.permutation(n)]
        assert np.array_equal(aggregate_logits(ms).values, aggregate_logits(shuffled).values)

    def test_shape_mismatch(self):
        with pytest.raises(AggregationError):
            aggregate_logits([LogitsMatrix(np.zeros((3, 2)), 0), LogitsMatrix(np.zeros((4, 2)), 1)])
        with pytest.raises(AggregationError):
            aggregate_logits([])

    def test_shared_param_mean(self):
        a = {"FC3": LayerParams(np.array([[1.0, 3.0]]), np.array([0.0, 2.0]))}
        b = {"FC3": LayerParams(np.array([[3.0, 5.0]]), np.array([2.0, 2.0]))}
        out = aggregate_shared_params([a, b])
        assert np.array_equal(out["FC3"].weights, [[2.0, 4.0]])
        assert np.array_equal(out["FC3"].bias, [1.0, 2.0])
        assert params_equal(aggregate_shared_params([a, a, a]), a)

    def test_shared_shape_mismatch_names_layer(self):
        a = {"FC3": LayerParams(np.zeros((16, 2)), np.zeros(2))}
        b = {"FC3": LayerParams(np.zeros((24, 2)), np.zeros(2))}
        with pytest.raises(AggregationError, match="shared layer FC3 shape mismatch") as err:
            aggregate_shared_params([a, b])
        assert err.value.layer == "FC3"


class TestConsensus:
    def _aggregate(self, clients, public):
        logits = aggregate_logits([client_eval_public(c, public) for c in clients])
        shared = aggregate_shared_params([c.shared_params for c in clients])
        return shared, logits

    def test_zero_steps_only_replaces(self, small_data):
        public = small_data[0]
        clients = make_clients([compact_spec()] * 2, seed=0)
        shared, logits = self._aggregate(clients, public)
        out = client_consensus_update(clients[0], shared, logits, public, 0, 1e-3, 0.5, 16)
        assert params_equal(out.shared_params, shared)
        for name in compact_spec().private_param_layers:
            assert np.array_equal(out.params[name].weights, clients[0].params[name].weights)
        assert not out.optimizer.m["Conv1"].weights.any()

    def test_replacement_resets_only_shared_moments(self, shards_of):
        c = client_local_train(make_client(0, compact_spec(), seed=0), shards_of(2)[0], 2, 1e-3, 8)
        out = replace_shared(c, copy_params(c.shared_params))
        assert not out.optimizer.m["FC3"].weights.any()
        assert np.array_equal(out.optimizer.m["FC1"].weights, c.optimizer.m["FC1"].weights)

    def test_without_distillation_equals_public_fine_tuning(self, small_data):
        public = small_data[0]
        clients = make_clients([compact_spec()] * 2, seed=0, optimizer=OptimizerKind.SGD)
        shared, logits = self._aggregate(clients, public)
        out = client_consensus_update(clients[0], shared, logits, public, 3, 1e-2, 0.0, len(public))
        tuned = client_local_train(replace_shared(clients[0], shared), public, 3, 1e-2, len(public))
        assert params_equal(out.params, tuned.params)

    def test_one_step_closed_form(self, linear_spec, small_data):
        public = small_data[0]
        spec = linear_spec()
        clients = make_clients([spec] * 2, seed=5, optimizer=OptimizerKind.SGD)
        shared, logits = self._aggregate(clients, public)
        p = _as_dict(clients[1].params)
        p["W2"], p["b2"] = shared["FC2"].weights, shared["FC2"].bias
        x = public.images.reshape(len(public), -1)
        g = _linear_grads(p, x, public.labels, logits.values, 0.5)
        out = client_consensus_update(clients[1], shared, logits, public, 1, 0.05, 0.5, len(public))
        assert np.allclose(out.params["FC2"].weights, p["W2"] - 0.05 * g["W2"], rtol=1e-12, atol=1e-14)
        assert np.allclose(out.params["FC1"].bias, p["b1"] - 0.05 * g["b1"], rtol=1e-12, atol=1e-14)

    def test_row_mismatch(self, small_data):
        public = small_data[0]
        c = make_client(0, compact_spec(), seed=0)
        with pytest.raises(ProtocolError):
            client_consensus_update(c, copy_params(c.shared_params), LogitsMatrix(np.zeros((3, 2))), public,
                                    1, 1e-3, 0.5, 8)


def _cfg(**kwargs):
    base = dict(rounds=3, n_clients=3, e1=2, e2=2, lr1=1e-3, lr2=1e-3, batch_size=16, seed=0)
    base.update(kwargs)
    return RoundConfig(**base)


class TestRound:
    def test_single_client(self, small_data, shards_of):
        public = small_data[0]
        cfg = _cfg(n_clients=1)
        clients = make_clients([compact_spec()], seed=0)
        result = run_round(ServerState(), clients, public, shards_of(1), cfg)
        c = result.clients[0]
        assert params_equal(result.state.shared, c.shared_params)
        assert np.array_equal(result.state.logits.values, predict_logits(c.spec, c.params, public.inputs()))
        assert result.state.t == 1

    def test_frozen_training_keeps_state(self, small_data, shards_of):
        public = small_data[0]
        cfg = _cfg(e1=0, e2=0)
        clients = make_clients([compact_spec()] * 3, seed=0, common_init=True)
        first = run_round(ServerState(), clients, public, shards_of(3), cfg)
        second = run_round(first.state, first.clients, public, shards_of(3), cfg)
        assert params_equal(first.state.shared, second.state.shared)
        assert np.array_equal(first.state.logits.values, second.state.logits.values)

    def test_worker_pool_does_not_change_results(self, small_data, shards_of):
        public, _, test = small_data
        clients = make_clients([compact_spec(), compact_hetero_spec(), compact_spec()], seed=1)
        serial = run_fedkd_hybrid(_cfg(rounds=2), clients, public, shards_of(3), test)
        pooled = run_fedkd_hybrid(_cfg(rounds=2, workers=3), clients, public, shards_of(3), test)
        assert params_equal(serial.state.shared, pooled.state.shared)
        assert np.array_equal(serial.state.logits.values, pooled.state.logits.values)
        for a, b in zip(serial.clients, pooled.clients):
            assert params_equal(a.params, b.params)
        assert [r.model_dump(exclude={"wall_time"}) for r in serial.records] == \
               [r.model_dump(exclude={"wall_time"}) for r in pooled.records]

    def test_mismatched_shared_layers(self, small_data, shards_of):
        public = small_data[0]
        specs = [compact_spec(shared=("FC1",)), compact_hetero_spec(shared=("FC1",))]
        clients = make_clients(specs, seed=0)
        with pytest.raises(AggregationError):
            run_round(ServerState(), clients, public, shards_of(2), _cfg(n_clients=2))

    def test_shared_consensus_invariant_holds(self, small_data, shards_of):
        public, _, test = small_data
        cfg = _cfg(rounds=10, n_clients=8, check_invariants=True)
        clients = make_clients([compact_spec()] * 8, seed=0)
        history = run_fedkd_hybrid(cfg, clients, public, shards_of(8, "dirichlet", 0.5), test)
        assert len(history.records) == 10
        for t, reports in enumerate(history.reports[1:]):
            for report in reports.values():
                assert params_equal(report.shared_after_replace, history.global_trace[t])

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_consensus_contracts_disagreement(self, small_data, shards_of, seed):
        public, _, test = small_data
        cfg = _cfg(rounds=4, e1=5, e2=3, lr1=1e-3, lr2=1e-3, seed=seed, optimizer=OptimizerKind.SGD,
                   full_batch_public=True, check_invariants=True)
        clients = make_clients([compact_spec()] * 3, seed=seed, optimizer=OptimizerKind.SGD)
        history = run_fedkd_hybrid(cfg, clients, public, shards_of(3, seed=seed), test)
        pairs = [(r.consensus_losses[k], r.consensus_losses[k + 1])
                 for reports in history.reports for r in reports.values()
                 for k in range(len(r.consensus_losses) - 1)]
        assert pairs
        assert sum(b <= a for a, b in pairs) / len(pairs) >= 0.95

    def test_replay_is_identical(self, small_data, shards_of):
        public, _, test = small_data
        cfg = _cfg(participation=0.67)
        runs = [run_fedkd_hybrid(cfg, make_clients([compact_spec()] * 3, seed=0), public, shards_of(3), test)
                for _ in range(2)]
        assert params_equal(runs[0].state.shared, runs[1].state.shared)
        assert [r.objective for r in runs[0].records] == [r.objective for r in runs[1].records]
        assert [r.participants for r in runs[0].records] == [2, 2, 2]


def test_matches_straight_line_trace(linear_spec, small_data, shards_of):
    """Three clients, two rounds, hand-written SGD against the round engine"""
    public = small_data[0]
    shards = shards_of(3)
    seed, lr1, lr2, lam, e1, e2 = 4, 0.05, 0.05, 0.5, 2, 2
    cfg = RoundConfig(rounds=2, n_clients=3, e1=e1, e2=e2, lr1=lr1, lr2=lr2, lam=lam, batch_size=1000,
                      optimizer=OptimizerKind.SGD, seed=seed)

    x_pub = public.images.reshape(len(public), -1)
    expected = []
    for cid in range(3):
        rng = np.random.default_rng([seed, 1, cid])
        lim1, lim2 = math.sqrt(6 / (144 + 3)), math.sqrt(6 / (3 + 2))
        expected.append({"W1": rng.uniform(-lim1, lim1, size=(144, 3)), "b1": np.zeros(3),
                         "W2": rng.uniform(-lim2, lim2, size=(3, 2)), "b2": np.zeros(2)})
    shared, fbar = None, None
    for _ in range(2):
        all_logits = []
        for cid, p in enumerate(expected):
            if shared is not None:
                p["W2"], p["b2"] = shared[0].copy(), shared[1].copy()
                for _ in range(e1):
                    g = _linear_grads(p, x_pub, public.labels, fbar, lam)
                    for k in p:
                        p[k] = p[k] - lr1 * g[k]
            x = shards[cid].images.reshape(len(shards[cid]), -1)
            for _ in range(e2):
                g = _linear_grads(p, x, shards[cid].labels)
                for k in p:
                    p[k] = p[k] - lr2 * g[k]
            all_logits.append((x_pub @ p["W1"] + p["b1"]) @ p["W2"] + p["b2"])
        fbar = np.mean(all_logits, axis=0)
        shared = (np.mean([p["W2"] for p in expected], axis=0), np.mean([p["b2"] for p in expected], axis=0))

    state, clients = ServerState(), make_clients([linear_spec()] * 3, seed, OptimizerKind.SGD, lr1)
    for _ in range(2):
        result = run_round(state, clients, public, shards, cfg)
        state, clients = result.state, result.clients

    close = dict(rtol=1e-10, atol=1e-12)
    assert np.allclose(state.logits.values, fbar, **close)
    assert np.allclose(state.shared["FC2"].weights, shared[0], **close)
    assert np.allclose(state.shared["FC2"].bias, shared[1], **close)
    for c, p in zip(clients, expected):
        assert np.allclose(c.params["FC1"].weights, p["W1"], **close)
        assert np.allclose(c.params["FC2"].weights, p["W2"], **close)


class TestObjective:
    def test_consensus_point_reduces_to_cross_entropy(self, small_data):
        public = small_data[0]
        clients = make_clients([compact_spec()] * 2, seed=0, common_init=True)
        logits = aggregate_logits([client_eval_public(c, public) for c in clients])
        shared = aggregate_shared_params([c.shared_params for c in clients])
        value = eval_objective(clients, shared, logits, public, 0.5)
        assert value == pytest.approx(hybrid_loss(logits.values, public.labels), rel=1e-12)

    def test_two_linear_clients(self, linear_spec, small_data):
        public = small_data[0]
        clients = make_clients([linear_spec()] * 2, seed=2)
        shared = {"FC2": LayerParams(np.ones((3, 2)), np.array([0.5, -0.5]))}
        target = LogitsMatrix(np.zeros((len(public), 2)))
        x = public.images.reshape(len(public), -1)
        values = []
        for c in clients:
            p = _as_dict(c.params)
            f = (x @ p["W1"] + p["b1"]) @ shared["FC2"].weights + shared["FC2"].bias
            ce = -np.log(_softmax(f)[np.arange(len(public)), public.labels]).mean()
            values.append(ce + 0.25 * np.mean(f ** 2))
        assert eval_objective(clients, shared, target, public, 0.25) == pytest.approx(np.mean(values), rel=1e-10)

    def test_without_aggregate(self, small_data):
        public = small_data[0]
        clients = make_clients([compact_spec()] * 2, seed=0)
        expected = np.mean([hybrid_loss(predict_logits(c.spec, c.params, public.inputs()), public.labels)
                            for c in clients])
        assert eval_objective(clients, None, None, public, 0.5) == pytest.approx(expected, rel=1e-12)
