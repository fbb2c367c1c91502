"""Scenario construction, trace bucketing, metric identities, and the AIMD
baseline rules.  The quantitative scenario gates (utilization, delta_opt_sq
orderings) live in the acceptance suite."""

import numpy as np
import pytest

from ratetree import symtree as st
from ratetree.harness import (
    AimdPolicy,
    FixedRatePolicy,
    IdealPolicy,
    Metrics,
    Scenario,
    TRACE_HEADER,
    aimd_policy,
    compute_metrics,
    load_trace,
    measure_efficiency,
    run_trace,
    save_trace,
    scenario_lossy,
    scenario_oscillating,
    scenario_sweep,
)
from ratetree.netsim import MIN_RATE_PPS, MiStats, NetworkConfig, pps_to_mbps


def const_tree(v=1.0):
    return st.ActionNode(st.Const(v))


class TestScenarios:
    def test_lossy(self):
        sc = scenario_lossy()
        assert sc.duration == 25.0
        assert len(sc.schedule) == 1
        cfg = sc.schedule[0][1]
        assert (cfg.bandwidth, cfg.latency, cfg.queue_size, cfg.loss_rate) \
            == (2500.0, 0.03, 1000.0, 0.02)
        assert pps_to_mbps(cfg.bandwidth) == pytest.approx(30.0)

    def test_oscillating(self):
        sc = scenario_oscillating()
        assert sc.duration == 25.0
        starts = [s for s, _ in sc.schedule]
        assert starts == [0.0, 5.0, 10.0, 15.0, 20.0]
        caps = [pps_to_mbps(c.bandwidth) for _, c in sc.schedule]
        assert caps == pytest.approx([20.0, 40.0, 20.0, 40.0, 20.0])
        assert all(c.loss_rate == 0.0 for _, c in sc.schedule)

    def test_sweep_varies_one_condition(self):
        scs = scenario_sweep("bandwidth")
        assert len(scs) == 10
        for sc, mbps in zip(scs, range(10, 101, 10)):
            cfg = sc.schedule[0][1]
            assert pps_to_mbps(cfg.bandwidth) == pytest.approx(mbps)
            assert (cfg.latency, cfg.queue_size, cfg.loss_rate) \
                == (0.03, 1000.0, 0.0)
            assert sc.name == f"sweep-bandwidth-{mbps}"

    def test_sweep_custom_values(self):
        scs = scenario_sweep("loss", [0.0, 0.04])
        assert [sc.schedule[0][1].loss_rate for sc in scs] == [0.0, 0.04]

    def test_sweep_unknown_condition(self):
        with pytest.raises(ValueError):
            scenario_sweep("mtu")

    def test_schedule_validation(self):
        cfg = NetworkConfig(100.0, 0.05, 10.0, 0.0)
        with pytest.raises(ValueError):
            Scenario("bad", [(1.0, cfg)], duration=5.0)
        with pytest.raises(ValueError):
            Scenario("bad", [(0.0, cfg), (3.0, cfg), (3.0, cfg)], duration=5.0)
        with pytest.raises(ValueError):
            Scenario("bad", [(0.0, cfg), (6.0, cfg)], duration=5.0)
        with pytest.raises(ValueError):
            Scenario("bad", [], duration=5.0)

    def test_capacity_at(self):
        sc = scenario_oscillating()
        assert sc.capacity_at(0.0) == pytest.approx(20e6 / 12000)
        assert sc.capacity_at(5.0) == pytest.approx(40e6 / 12000)
        assert sc.capacity_at(24.9) == pytest.approx(20e6 / 12000)


class TestRunTrace:
    def test_ideal_tracks_capacity(self):
        trace, m = run_trace(scenario_oscillating(seed=1), IdealPolicy())
        assert len(trace) == 25
        assert m.delta_opt_sq == pytest.approx(0.0, abs=1e-9)
        assert m.link_utilization == pytest.approx(1.0, abs=1e-9)

    def test_throughput_never_exceeds_capacity(self):
        for policy in (IdealPolicy(), const_tree(1.0), aimd_policy()):
            trace, _ = run_trace(scenario_lossy(seed=3), policy)
            assert np.all(trace.throughput_mbps
                          <= trace.ideal_capacity_mbps + 1e-6)

    def test_min_rate_matches_analytic_delta(self):
        sc = scenario_sweep("loss", [0.0])[0]
        trace, m = run_trace(sc, FixedRatePolicy(MIN_RATE_PPS))
        cap = trace.ideal_capacity_mbps
        assert m.mean_thpt == pytest.approx(pps_to_mbps(MIN_RATE_PPS))
        assert m.delta_opt_sq == pytest.approx(float((cap ** 2).mean()),
                                               rel=2e-3)

    def test_deterministic_under_seed(self):
        a, _ = run_trace(scenario_lossy(seed=7), const_tree(0.5))
        b, _ = run_trace(scenario_lossy(seed=7), const_tree(0.5))
        c, _ = run_trace(scenario_lossy(seed=8), const_tree(0.5))
        assert np.array_equal(a.throughput_mbps, b.throughput_mbps)
        assert not np.array_equal(a.throughput_mbps, c.throughput_mbps)

    def test_tree_and_callable_adapters_agree(self):
        a, _ = run_trace(scenario_lossy(seed=2), const_tree(1.0))
        b, _ = run_trace(scenario_lossy(seed=2), lambda flat: 1.0)
        assert np.array_equal(a.throughput_mbps, b.throughput_mbps)
        assert np.array_equal(a.send_rate_pps, b.send_rate_pps)

    def test_teacher_adapter(self):
        torch = pytest.importorskip("torch")
        from ratetree.teacher import TeacherPolicy
        torch.manual_seed(0)
        sc = Scenario("short", [(0.0, NetworkConfig(500.0, 0.05, 100.0, 0.0))],
                      duration=3.0, seed=0)
        trace, m = run_trace(sc, TeacherPolicy())
        assert len(trace) == 3
        assert np.isfinite(trace.throughput_mbps).all()
        assert m.flops == 1488

    def test_metrics_pure_function_of_trace(self):
        trace, m = run_trace(scenario_lossy(seed=5), const_tree(0.8))
        again = compute_metrics(trace, flops=m.flops)
        assert again == m

    def test_unsupported_policy_type(self):
        with pytest.raises(TypeError):
            run_trace(scenario_lossy(), object())

    def test_segment_change_keeps_queue_state(self):
        # overdriving a tiny queue in segment 1 must leave a backlog visible
        # as extra latency right after the 5 s boundary
        cfg_a = NetworkConfig(1000.0, 0.05, 500.0, 0.0)
        cfg_b = NetworkConfig(200.0, 0.05, 500.0, 0.0)
        sc = Scenario("drop", [(0.0, cfg_a), (5.0, cfg_b)], duration=10.0,
                      seed=0)
        trace, _ = run_trace(sc, IdealPolicy())
        # ideal pins to the new, lower capacity instantly: queue never forms
        assert trace.mean_latency_s[6] == pytest.approx(0.05, abs=1e-9)
        trace2, _ = run_trace(sc, FixedRatePolicy(900.0))
        # fixed 900 pps against a 200 pps link backs the queue up hard
        assert trace2.mean_latency_s[6] > 0.5


class TestAimd:
    def stats(self, lost):
        return MiStats(sent=100.0, acked=100.0 - lost, lost=lost,
                       lost_congestion=lost, lost_random=0.0,
                       mean_latency=0.05, min_base_latency=0.05,
                       queue_start=0.0, queue_end=0.0, send_rate=500.0,
                       duration=0.1)

    def test_additive_increase(self):
        pol = aimd_policy()
        assert pol.next_rate(500.0, self.stats(0.0)) == 510.0

    def test_halves_on_loss(self):
        pol = aimd_policy()
        assert pol.next_rate(500.0, self.stats(3.0)) == 250.0

    def test_first_mi_keeps_rate(self):
        assert aimd_policy().next_rate(500.0, None) == 500.0

    def test_floor_at_min_rate(self):
        assert aimd_policy().next_rate(1.5, self.stats(1.0)) == MIN_RATE_PPS

    def test_sawtooth_on_loss_free_link(self):
        # big queue, no random loss: rate climbs 10 pps per MI from 30% of
        # capacity, so the last-second mean rate beats the first by ~100x
        sc = Scenario("ramp", [(0.0, NetworkConfig(5000.0, 0.05, 10000.0,
                                                   0.0))],
                      duration=10.0, seed=0)
        trace, _ = run_trace(sc, aimd_policy())
        assert trace.send_rate_pps[9] > trace.send_rate_pps[0] + 800

    def test_lossy_link_suppresses_aimd(self):
        trace_a, m_a = run_trace(scenario_lossy(seed=1), aimd_policy())
        _, m_i = run_trace(scenario_lossy(seed=1), IdealPolicy())
        assert m_a.link_utilization < m_i.link_utilization


class TestTraceIo:
    def test_round_trip(self, tmp_path):
        sc = scenario_lossy(seed=4)
        trace, _ = run_trace(sc, const_tree(0.3))
        path = str(tmp_path / "t.csv")
        save_trace(trace, path)
        again = load_trace(path, scenario=sc)
        assert np.array_equal(again.t_sec, trace.t_sec)
        assert np.array_equal(again.throughput_mbps, trace.throughput_mbps)
        assert np.array_equal(again.send_rate_pps, trace.send_rate_pps)
        assert np.array_equal(again.loss_frac, trace.loss_frac)
        assert np.allclose(again.ideal_capacity_mbps,
                           trace.ideal_capacity_mbps)

    def test_header_enforced(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n")
        with pytest.raises(ValueError):
            load_trace(str(path))

    def test_header_matches_contract(self):
        assert TRACE_HEADER == ("t_sec", "throughput_mbps", "send_rate_pps",
                                "mean_latency_s", "loss_frac")


class TestMeasureEfficiency:
    def test_tree(self):
        tree = st.ConditionNode(
            st.IsLt(st.GetObs(0, 9), st.Const(0.0)),
            st.ActionNode(st.Const(0.3)),
            st.ActionNode(st.Const(-0.3)))
        flops, runtime = measure_efficiency(tree, n_decisions=2000)
        assert flops == st.count_flops(tree, 10)
        assert runtime > 0

    def test_aimd(self):
        flops, runtime = measure_efficiency(aimd_policy(), n_decisions=2000)
        assert flops == 2
        assert runtime >= 0

    def test_teacher(self):
        torch = pytest.importorskip("torch")
        from ratetree.teacher import TeacherPolicy, forward_flops
        torch.manual_seed(0)
        policy = TeacherPolicy()
        flops, runtime = measure_efficiency(policy, n_decisions=500)
        assert flops == forward_flops(policy)
        assert runtime > 0

    def test_unsupported(self):
        with pytest.raises(TypeError):
            measure_efficiency(object(), n_decisions=10)
