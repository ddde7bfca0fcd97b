import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from microcause import config as C
from microcause.config import ExperimentConfig
from microcause.dataset import (
    EmptyWindowError,
    FeatureSchema,
    InsufficientBaselineError,
    Normalizer,
    UnknownFeatureError,
    WindowSample,
    aggregate,
    aggregate_from_truth,
    balance,
    compute_normal_values,
    interleave_replay,
    nearest_rank,
)
from microcause.simulator import WindowTrace, make_cluster, step_window
from tests.test_topology import span_pair


def brute_nearest_rank(values, pct):
    """Independent oracle: smallest element with more than pct% at or below."""
    v = sorted(values)
    n = len(v)
    for x in v:
        if sum(1 for y in v if y <= x) > pct / 100.0 * n:
            return x
    return v[-1]


class TestNearestRank:
    def test_one_to_hundred_p99_is_100(self):
        assert nearest_rank(list(range(1, 101)), 99) == 100

    def test_constant_sample(self):
        assert nearest_rank([7, 7, 7], 95) == 7

    def test_median_of_five(self):
        assert nearest_rank([5, 1, 4, 2, 3], 50) == 3

    def test_empty_rejected(self):
        with pytest.raises(EmptyWindowError):
            nearest_rank([], 50)

    @given(st.lists(st.integers(0, 10_000), min_size=1, max_size=60),
           st.sampled_from([1, 25, 50, 75, 90, 95, 99, 100]))
    def test_matches_brute_force(self, values, pct):
        assert nearest_rank(values, pct) == brute_nearest_rank(values, pct)


def one_window(durations, target_us, window_index=0):
    spans = []
    for i, (y_req, y_s, y_resp) in enumerate(durations):
        spans += span_pair(f"t{i}", "r", None, "A", "B", 1000 * i, y_req, y_s, y_resp)
    trace = WindowTrace(window_index=window_index, spans=spans,
                        metrics={"services": {"B": {"cpu_util": 0.2}},
                                 "channels": {"A->B": {"net_util": 0.1}}},
                        offered_load_rps=10.0)
    return aggregate(trace, "B", target_us)


class TestAggregate:
    def test_constant_latency_meets_qos(self):
        sample = one_window([(0, 1000, 0)] * 20, target_us=2000)
        assert sample.e2e_p99_us == 1000
        assert sample.qos_met

    def test_hundred_requests_p99_is_max(self):
        ms = 1000
        sample = one_window([(0, k * ms, 0) for k in range(1, 101)], target_us=50 * ms)
        assert sample.e2e_p99_us == 100 * ms
        assert not sample.qos_met

    def test_matches_brute_force_over_simulator_spans(self):
        cfg = ExperimentConfig(topology=C.chain(3))
        cfg.workload.requests_per_window = 60
        cluster = make_cluster(cfg, seed=2)
        trace = step_window(cluster, 80.0, np.random.default_rng(1))
        sample = aggregate(trace, cluster.graph.root_rpc, 1e9)
        durations = sorted(
            s.duration_us for s in trace.spans
            if s.kind == "client" and s.service == "client"
        )
        assert sample.e2e_p99_us == brute_nearest_rank(durations, 99)
        for rpc, vars_ in sample.y.items():
            y_s = sorted(s.duration_us for s in trace.spans
                         if s.kind == "server" and s.rpc_id.endswith("/" + rpc))
            for p in (50, 95):
                assert vars_["y_s"][p] == brute_nearest_rank(y_s, p)

    def test_truth_fast_path_equals_span_path(self):
        cfg = ExperimentConfig(topology=C.fanout(4))
        cfg.workload.requests_per_window = 40
        cluster = make_cluster(cfg, seed=2)
        trace = step_window(cluster, 80.0, np.random.default_rng(1))
        a = aggregate(trace, cluster.graph.root_rpc, 12345.0)
        b = aggregate_from_truth(trace, cluster.graph.root_rpc, 12345.0)
        assert a.y == b.y
        assert a.e2e_p99_us == b.e2e_p99_us
        assert a.qos_met == b.qos_met

    def test_split_residual_mode(self):
        spans = span_pair("t", "r", None, "A", "B", 0, 30, 100, 10)
        trace = WindowTrace(window_index=0, spans=spans,
                            metrics={"services": {}, "channels": {}},
                            offered_load_rps=1.0)
        ts = aggregate(trace, "B", 1e9, net_delay_mode="timestamps")
        assert ts.y["B"]["y_req"][50] == 30
        assert ts.y["B"]["y_resp"][50] == 10
        sr = aggregate(trace, "B", 1e9, net_delay_mode="split_residual")
        assert sr.y["B"]["y_req"][50] == sr.y["B"]["y_resp"][50] == 20

    def test_permutation_invariant(self):
        durations = [(5, 100 * k, 5) for k in range(1, 11)]
        a = one_window(durations, 1e6)
        b = one_window(list(reversed(durations)), 1e6)
        assert a.y == b.y and a.e2e_p99_us == b.e2e_p99_us

    def test_empty_window_rejected(self):
        trace = WindowTrace(window_index=3, spans=[],
                            metrics={"services": {}, "channels": {}},
                            offered_load_rps=1.0)
        with pytest.raises(EmptyWindowError):
            aggregate(trace, "B", 100.0)


def mk_sample(idx, qos_met, cpu=0.3, load=100.0):
    return WindowSample(
        window_index=idx,
        y={"r": {v: {50: 10.0, 95: 20.0} for v in ("y_c", "y_s", "y_req", "y_resp")}},
        x={"services": {"A": {"cpu_util": cpu}}, "channels": {"c->A": {"net_util": 0.1}}},
        e2e_p99_us=10.0 if qos_met else 100.0,
        qos_met=qos_met,
        offered_load_rps=load,
    )


class TestNormalValues:
    def test_odd_median(self):
        samples = [mk_sample(i, True, cpu) for i, cpu in enumerate([0.2, 0.4, 0.3])]
        assert compute_normal_values(samples).services["A"]["cpu_util"] == pytest.approx(0.3)

    def test_even_median_is_midpoint(self):
        samples = [mk_sample(i, True, cpu) for i, cpu in enumerate([0.2, 0.4])]
        assert compute_normal_values(samples).services["A"]["cpu_util"] == pytest.approx(0.3)

    def test_violating_windows_excluded(self):
        samples = [mk_sample(i, True, cpu) for i, cpu in enumerate([0.2, 0.4, 0.3])]
        samples += [mk_sample(9, False, 0.95), mk_sample(10, False, 0.95)]
        assert compute_normal_values(samples).services["A"]["cpu_util"] == pytest.approx(0.3)

    def test_duplication_invariant(self):
        samples = [mk_sample(i, True, cpu) for i, cpu in enumerate([0.1, 0.5, 0.3, 0.2])]
        once = compute_normal_values(samples)
        twice = compute_normal_values(samples + samples)
        assert once.services == twice.services

    def test_no_baseline_rejected(self):
        with pytest.raises(InsufficientBaselineError):
            compute_normal_values([mk_sample(0, False)])

    def test_missing_metric_lookup(self):
        normals = compute_normal_values([mk_sample(0, True)])
        with pytest.raises(InsufficientBaselineError):
            normals.get("svc", "A", "made_up")


class TestBalance:
    def test_oversamples_minority_to_floor(self, rng):
        samples = [mk_sample(i, True) for i in range(90)]
        samples += [mk_sample(100 + i, False) for i in range(10)]
        out, warn = balance(samples, rng)
        assert not warn
        met = [s for s in out if s.qos_met]
        violated = [s for s in out if not s.qos_met]
        assert len(met) == 90
        assert len(violated) >= 45

    def test_balanced_input_unchanged(self, rng):
        samples = [mk_sample(i, i % 2 == 0) for i in range(40)]
        out, warn = balance(samples, rng)
        assert out == samples and not warn

    def test_single_class_flagged(self, rng):
        samples = [mk_sample(i, True) for i in range(10)]
        out, warn = balance(samples, rng)
        assert out == samples and warn

    @given(st.lists(st.booleans(), min_size=1, max_size=120), st.integers(0, 2**31))
    def test_never_deletes_and_meets_floor(self, flags, seed):
        samples = [mk_sample(i, f) for i, f in enumerate(flags)]
        out, warn = balance(samples, np.random.default_rng(seed))
        assert all(s in out for s in samples)
        met = sum(1 for s in out if s.qos_met)
        violated = len(out) - met
        if not warn:
            assert min(met, violated) >= math.ceil(0.5 * max(met, violated))


class TestInterleaveReplay:
    def test_zero_fraction_only_current(self, rng):
        batches = list(interleave_replay(list(range(10)), list(range(100, 105)),
                                         0.0, 4, rng))
        assert all(all(x < 100 for x in b) for b in batches)
        assert sorted(x for b in batches for x in b) == list(range(10))

    def test_exact_replay_count(self, rng):
        batches = list(interleave_replay(list(range(640)), list(range(1000, 1100)),
                                         0.25, 64, rng))
        for b in batches:
            assert sum(1 for x in b if x >= 1000) == 16

    def test_empty_previous_no_error(self, rng):
        batches = list(interleave_replay(list(range(7)), [], 0.5, 4, rng))
        assert sorted(x for b in batches for x in b) == list(range(7))

    def test_bad_fraction_rejected(self, rng):
        with pytest.raises(ValueError):
            list(interleave_replay([1], [2], 1.0, 4, rng))

    @given(st.floats(0.05, 0.9), st.integers(2, 64))
    def test_declared_count_always_present(self, fraction, batch_size):
        rng = np.random.default_rng(0)
        prev = list(range(500, 520))
        batches = list(interleave_replay(list(range(100)), prev, fraction,
                                         batch_size, rng))
        want = math.ceil(fraction * batch_size)
        assert all(sum(1 for x in b if x >= 500) == want for b in batches)


class TestNormalizer:
    def test_constant_feature_flagged_passthrough(self):
        m = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])
        norm = Normalizer.fit(m, ("a", "b"))
        assert not norm.passthrough[0] and norm.passthrough[1]
        out = norm.apply(m)
        assert np.allclose(out[:, 1], 5.0)

    def test_hand_computed_z_scores(self):
        m = np.array([[1.0], [2.0], [3.0]])
        out = Normalizer.fit(m, ("a",)).apply(m)
        assert np.allclose(out.ravel(), [-1.224745, 0.0, 1.224745], atol=1e-4)

    def test_roundtrip_identity(self):
        rng = np.random.default_rng(3)
        m = rng.normal(5.0, 3.0, size=(50, 4))
        norm = Normalizer.fit(m, tuple("abcd"))
        assert np.allclose(norm.invert(norm.apply(m)), m, atol=1e-9)

    def test_fit_set_standardized(self):
        rng = np.random.default_rng(4)
        m = rng.normal(2.0, 7.0, size=(200, 3))
        out = Normalizer.fit(m, tuple("abc")).apply(m)
        assert np.all(np.abs(out.mean(axis=0)) < 1e-6)
        assert np.all(np.abs(out.std(axis=0) - 1.0) < 1e-6)

    def test_extend_marks_new_features(self):
        norm = Normalizer.fit(np.array([[1.0], [3.0]]), ("a",))
        ext = norm.extend(("a", "b"))
        assert not ext.passthrough[0] and ext.passthrough[1]
        assert ext.mean[0] == norm.mean[0]


class TestFeatureSchema:
    def test_unknown_feature_rejected(self):
        from microcause.topology import build_cbn, graph_from_config, schema_from_config

        g = graph_from_config(C.chain(3))
        cbn = build_cbn(g, schema_from_config(g, ("cpu_util",), ("net_util",)))
        schema = FeatureSchema.from_cbn(cbn, (50, 95))
        with pytest.raises(UnknownFeatureError):
            schema.x_index("x:svc:s1:bogus")
