"""Link simulator: pinned examples, conservation/capacity properties, and
agreement with the per-packet discrete-event oracle."""

import math

import numpy as np
import pytest

from ratetree.netsim import (
    DEFAULT_REWARD_COEFFS,
    LinkEnv,
    LinkState,
    MiStats,
    NetworkConfig,
    ObsHistory,
    apply_action,
    compute_observation,
    compute_reward,
    load_config,
    run_episodes_batch,
    sample_config,
    save_config,
    step_mi,
)

from oracles import event_sim


def make_stats(**kw):
    base = dict(sent=100.0, acked=100.0, lost=0.0, lost_congestion=0.0,
                lost_random=0.0, mean_latency=0.1, min_base_latency=0.1,
                queue_start=0.0, queue_end=0.0, send_rate=100.0, duration=1.0)
    base.update(kw)
    return MiStats(**base)


class TestStepMi:
    def test_underutilized_link_passes_everything(self):
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=1000, loss_rate=0.0)
        state = LinkState()
        stats = step_mi(cfg, state, send_rate=50, duration=0.5,
                        rng=np.random.default_rng(0))
        assert stats.sent == pytest.approx(25.0, abs=1e-9)
        assert stats.acked == pytest.approx(25.0, abs=1e-9)
        assert stats.lost == 0.0
        assert stats.mean_latency == pytest.approx(0.1, abs=1e-9)
        assert state.queue == 0.0

    def test_overload_fills_queue_then_drops(self):
        # Queue of 10 fills after 0.1 s; the remaining 0.9 s overflows at
        # (200-100) pps.  Window accounting: 100 serviced, 90 dropped, 10 left
        # queued, which the event-level oracle confirms below.
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=10, loss_rate=0.0)
        state = LinkState()
        stats = step_mi(cfg, state, send_rate=200, duration=1.0,
                        rng=np.random.default_rng(0))
        assert stats.sent == pytest.approx(200.0)
        assert stats.acked == pytest.approx(100.0)
        assert stats.lost_congestion == pytest.approx(90.0)
        assert stats.queue_end == pytest.approx(10.0)
        assert stats.sent == pytest.approx(stats.acked + stats.lost
                                           + stats.queue_end - stats.queue_start)

    def test_overload_example_matches_event_oracle(self):
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=10, loss_rate=0.0)
        acked, dropped, queue_end = event_sim(cfg, [200.0], mi_duration=1.0)
        assert abs(acked[0] - 100.0) <= 2
        assert abs(dropped[0] - 90.0) <= 2
        assert queue_end == 10

    def test_queue_delay_matches_analytic_integral(self):
        # rate 200 into a 100 pps link, huge queue: q(t) = 100t over 1 s, so
        # integral(q) = 50 pkt*s over 100 serviced packets = 0.5 s mean wait
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=10_000,
                            loss_rate=0.0)
        state = LinkState()
        stats = step_mi(cfg, state, send_rate=200, duration=1.0,
                        rng=np.random.default_rng(0))
        assert stats.mean_latency == pytest.approx(0.1 + 0.5, abs=1e-9)

    def test_full_queue_delay_is_queue_over_bandwidth(self):
        # held at a full queue of 50, every serviced packet waits q/mu = 0.5 s
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=50,
                            loss_rate=0.0)
        state = LinkState()
        state.queue = 50.0
        stats = step_mi(cfg, state, send_rate=100, duration=2.0,
                        rng=np.random.default_rng(0))
        assert stats.mean_latency == pytest.approx(0.1 + 0.5, abs=1e-9)

    def test_random_loss_within_binomial_bounds(self):
        # 500 serviced packets at p=0.5: 3 sigma ~ 33.5.
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=1000, loss_rate=0.5)
        state = LinkState()
        stats = step_mi(cfg, state, send_rate=50, duration=10.0,
                        rng=np.random.default_rng(7))
        assert stats.sent == pytest.approx(500.0)
        assert 200.0 <= stats.acked <= 300.0
        assert stats.lost_random == pytest.approx(stats.sent - stats.acked)

    def test_conservation_and_capacity_random_configs(self):
        # Acceptance-style sweep at unit-test scale; the acceptance suite
        # repeats this over 1000 configs.
        rng = np.random.default_rng(42)
        for _ in range(200):
            cfg = sample_config(rng)
            state = LinkState()
            state.queue = rng.uniform(0, cfg.queue_size)
            q0 = state.queue
            rate = rng.uniform(0.1, 3.0) * cfg.bandwidth
            dur = cfg.mi_duration()
            stats = step_mi(cfg, state, rate, dur, rng)
            # conservation: sent + queue drain = acked + lost + queue growth
            assert stats.sent + q0 == pytest.approx(
                stats.acked + stats.lost_random + stats.lost_congestion + stats.queue_end,
                abs=1e-6 * max(1.0, stats.sent))
            # capacity: cannot service faster than bandwidth
            assert stats.acked + stats.lost_random <= cfg.bandwidth * dur + 1e-6
            assert 0.0 <= stats.queue_end <= cfg.queue_size + 1e-9
            assert stats.mean_latency >= cfg.latency - 1e-12
            assert stats.min_base_latency <= stats.mean_latency + 1e-12

    def test_zero_loss_uncongested_is_lossless(self):
        rng = np.random.default_rng(3)
        for _ in range(50):
            cfg = NetworkConfig(bandwidth=rng.uniform(100, 500),
                                latency=rng.uniform(0.05, 0.5),
                                queue_size=rng.uniform(10, 2000), loss_rate=0.0)
            state = LinkState()
            stats = step_mi(cfg, state, rate := rng.uniform(1, cfg.bandwidth * 0.95),
                            cfg.mi_duration(), rng)
            assert stats.lost == 0.0
            assert stats.acked == pytest.approx(rate * cfg.mi_duration(), rel=1e-9)

    def test_determinism_same_seed(self):
        cfg = NetworkConfig(bandwidth=300, latency=0.2, queue_size=50, loss_rate=0.02)
        runs = []
        for _ in range(2):
            state = LinkState()
            rng = np.random.default_rng(123)
            runs.append([step_mi(cfg, state, 350, cfg.mi_duration(), rng)
                         for _ in range(20)])
        for a, b in zip(*runs):
            assert a == b

    def test_latency_grows_with_queue(self):
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=1000, loss_rate=0.0)
        state = LinkState()
        rng = np.random.default_rng(0)
        prev_lat = 0.0
        for _ in range(5):
            stats = step_mi(cfg, state, 150, 1.0, rng)
            assert stats.mean_latency > prev_lat
            prev_lat = stats.mean_latency

    def test_invalid_inputs_raise(self):
        cfg = NetworkConfig(bandwidth=100, latency=0.1, queue_size=10, loss_rate=0.0)
        with pytest.raises(ValueError):
            step_mi(cfg, LinkState(), -5.0, 1.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            step_mi(cfg, LinkState(), 5.0, 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            NetworkConfig(bandwidth=0, latency=0.1, queue_size=10, loss_rate=0.0)
        with pytest.raises(ValueError):
            NetworkConfig(bandwidth=10, latency=0.1, queue_size=10, loss_rate=1.0)


class TestFluidVsEventOracle:
    def test_mean_throughput_agrees(self):
        # Drive both models with the same piecewise-constant rate schedule and
        # compare mean throughput.  Acceptance runs 50 configs; 12 here.
        rng = np.random.default_rng(11)
        for trial in range(12):
            cfg = NetworkConfig(
                bandwidth=rng.uniform(100, 500),
                latency=rng.uniform(0.05, 0.4),
                queue_size=float(int(rng.uniform(5, 500))),
                loss_rate=float(rng.choice([0.0, 0.0, 0.02])),
            )
            dur = cfg.mi_duration()
            n_mis = max(10, int(math.ceil(8.0 / dur)))
            rates = rng.uniform(0.3, 1.5, size=n_mis) * cfg.bandwidth
            oracle_acked, _, _ = event_sim(cfg, rates, dur, seed=trial)

            state = LinkState()
            fluid_rng = np.random.default_rng(1000 + trial)
            fluid_acked = sum(step_mi(cfg, state, r, dur, fluid_rng).acked
                              for r in rates)
            total_t = n_mis * dur
            fluid_thpt = fluid_acked / total_t
            event_thpt = oracle_acked.sum() / total_t
            assert fluid_thpt == pytest.approx(event_thpt, rel=0.05), \
                f"config {cfg} fluid {fluid_thpt} vs event {event_thpt}"


class TestObservation:
    def test_neutral_when_stable(self):
        curr = make_stats()
        prev = make_stats()
        obs = compute_observation(curr, prev)
        assert obs == pytest.approx((0.0, 1.0, 1.0))

    def test_first_mi_has_zero_inflation(self):
        obs = compute_observation(make_stats(), None)
        assert obs[0] == 0.0

    def test_inflation_tracks_latency_change(self):
        prev = make_stats(mean_latency=0.1)
        curr = make_stats(mean_latency=0.12, min_base_latency=0.1)
        obs = compute_observation(curr, prev)
        assert obs[0] == pytest.approx(0.2)
        assert obs[1] == pytest.approx(1.2)

    def test_send_ratio_saturates_without_acks(self):
        curr = make_stats(acked=0.0, sent=500.0)
        obs = compute_observation(curr, None)
        assert obs[2] == 100.0

    def test_send_ratio_cap(self):
        curr = make_stats(acked=2.0, sent=5000.0)
        assert compute_observation(curr, None)[2] == 100.0

    def test_latency_ratio_at_least_one(self):
        rng = np.random.default_rng(5)
        cfg = sample_config(rng)
        state = LinkState()
        prev = None
        for _ in range(50):
            stats = step_mi(cfg, state, rng.uniform(1, 2 * cfg.bandwidth),
                            cfg.mi_duration(), rng)
            obs = compute_observation(stats, prev)
            assert obs[1] >= 1.0 - 1e-9
            assert obs[2] >= 0.0
            prev = stats


class TestReward:
    def test_pinned_example(self):
        stats = make_stats(acked=100.0, sent=100.0, duration=1.0, mean_latency=0.1)
        assert compute_reward(stats, (10.0, 1000.0, 2000.0)) == pytest.approx(900.0)

    def test_loss_term(self):
        stats = make_stats(sent=100.0, acked=90.0, lost=10.0, lost_random=10.0,
                           duration=1.0, mean_latency=0.1)
        expected = 10.0 * 90.0 - 1000.0 * 0.1 - 2000.0 * 0.1
        assert compute_reward(stats) == pytest.approx(expected)

    def test_monotonicity(self):
        base = compute_reward(make_stats())
        assert compute_reward(make_stats(acked=150.0)) > base
        assert compute_reward(make_stats(mean_latency=0.3)) < base
        assert compute_reward(make_stats(lost=20.0)) < base


class TestApplyAction:
    def test_increase(self):
        assert apply_action(100.0, 1.0) == pytest.approx(102.5)

    def test_decrease(self):
        assert apply_action(100.0, -1.0) == pytest.approx(100.0 / 1.025)

    def test_zero_is_identity(self):
        assert apply_action(100.0, 0.0) == 100.0

    def test_clamps(self):
        assert apply_action(1.0, -1.0, min_rate=1.0) == 1.0
        assert apply_action(999.0, 1.0, max_rate=1000.0) == 1000.0

    def test_out_of_range_action_clipped(self):
        assert apply_action(100.0, 5.0) == apply_action(100.0, 1.0)

    def test_inverse_pair_roundtrip(self):
        # up then down with the same magnitude returns to the start
        r = apply_action(apply_action(200.0, 0.7), -0.7)
        assert r == pytest.approx(200.0)


class TestObsHistory:
    def test_starts_neutral(self):
        h = ObsHistory(10)
        flat = h.flat()
        assert flat.shape == (30,)
        assert np.allclose(flat.reshape(10, 3), [0.0, 1.0, 1.0])

    def test_push_evicts_oldest(self):
        h = ObsHistory(3)
        for i in range(4):
            h.push((float(i), 1.0, 1.0))
        assert [row[0] for row in h.window] == [1.0, 2.0, 3.0]

    def test_series_extraction(self):
        h = ObsHistory(3)
        h.push((0.5, 2.0, 3.0))
        assert h.series(0)[-1] == 0.5
        assert h.series(1)[-1] == 2.0
        assert h.series(2)[-1] == 3.0


class TestLinkEnv:
    def test_neutral_fixed_point(self):
        # Stable lossless link below capacity: observations settle to
        # (0, 1, 1) within a few MIs.
        cfg = NetworkConfig(bandwidth=200, latency=0.1, queue_size=100, loss_rate=0.0)
        env = LinkEnv(cfg, seed=0, episode_mis=20, init_rate=100.0)
        env.reset()
        obs = None
        for _ in range(5):
            hist, _, _, _ = env.step(0.0)
            obs = hist.window[-1]
        assert obs == pytest.approx([0.0, 1.0, 1.0], abs=1e-6)

    def test_episode_termination(self):
        cfg = NetworkConfig(bandwidth=200, latency=0.1, queue_size=100, loss_rate=0.0)
        env = LinkEnv(cfg, seed=0, episode_mis=7)
        env.reset()
        dones = [env.step(0.0)[2] for _ in range(7)]
        assert dones == [False] * 6 + [True]

    def test_same_seed_same_trajectory(self):
        cfg = NetworkConfig(bandwidth=300, latency=0.15, queue_size=40, loss_rate=0.03)
        actions = np.random.default_rng(9).uniform(-1, 1, 50)
        trajs = []
        for _ in range(2):
            env = LinkEnv(cfg, seed=77, episode_mis=50)
            env.reset()
            traj = []
            for a in actions:
                hist, reward, _, stats = env.step(float(a))
                traj.append((hist.flat().tobytes(), reward, stats.acked))
            trajs.append(traj)
        assert trajs[0] == trajs[1]

    def test_rate_clamp_respected(self):
        cfg = NetworkConfig(bandwidth=100, latency=0.05, queue_size=10, loss_rate=0.0)
        env = LinkEnv(cfg, seed=1, episode_mis=500)
        env.reset()
        for _ in range(500):
            env.step(1.0)
        assert env.rate <= 2.0 * cfg.bandwidth + 1e-9
        env2 = LinkEnv(cfg, seed=1, episode_mis=500)
        env2.reset()
        for _ in range(500):
            env2.step(-1.0)
        assert env2.rate >= 1.0 - 1e-12

    def test_mi_duration_floor(self):
        assert NetworkConfig(1000, 0.001, 10, 0.0).mi_duration() == 0.05
        assert NetworkConfig(1000, 0.2, 10, 0.0).mi_duration() == pytest.approx(0.4)


class TestBatchRunner:
    def test_lockstep_matches_sequential(self):
        cfg = NetworkConfig(bandwidth=250, latency=0.1, queue_size=60, loss_rate=0.0)

        def policy(mat):
            return np.full(mat.shape[0], 0.25)

        batch_envs = [LinkEnv(cfg, seed=s, episode_mis=30) for s in (1, 2, 3)]
        batch_returns = run_episodes_batch(batch_envs, policy)

        for i, s in enumerate((1, 2, 3)):
            env = LinkEnv(cfg, seed=s, episode_mis=30)
            env.reset()
            total = 0.0
            for _ in range(30):
                _, r, _, _ = env.step(0.25)
                total += r
            assert batch_returns[i] == pytest.approx(total / 30)

    def test_collect_callback_sees_every_step(self):
        cfg = NetworkConfig(bandwidth=250, latency=0.1, queue_size=60, loss_rate=0.0)
        rows = []
        envs = [LinkEnv(cfg, seed=s, episode_mis=5) for s in range(4)]
        run_episodes_batch(envs, lambda m: np.zeros(m.shape[0]),
                           collect=lambda i, mi, obs, a, r: rows.append((i, mi)))
        assert len(rows) == 20


class TestConfigIO:
    def test_roundtrip(self, tmp_path):
        cfg = NetworkConfig(bandwidth=2500.0, latency=0.03, queue_size=1000.0,
                            loss_rate=0.02)
        path = tmp_path / "link.json"
        save_config(cfg, str(path), episode_mis=123, seed=9)
        loaded, mis, seed = load_config(str(path))
        assert loaded == cfg
        assert mis == 123
        assert seed == 9
