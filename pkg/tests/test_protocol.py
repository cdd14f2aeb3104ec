"""Core protocol: stamp selection, hand-checked updates, conservation, locality.

The heavyweight cross-check here is `NaiveReference`: an independent
re-implementation of the same update rules in the most literal style
possible (full per-sender histories, no index caching, fresh dict scans
every event).  Running both side by side on the same trace and comparing
every field catches bookkeeping bugs in either.
"""

import copy

import numpy as np
import pytest

from asyncgt.digraph import Digraph, build_mixing, generate_ring_plus_random
from asyncgt.metrics import mass_residual
from asyncgt.oracles import QuadraticOracle, SampleDraw, make_sigmoid_wells
from asyncgt.protocol import (
    MissingPublicationError,
    NetworkStore,
    Publication,
    TrackingProtocol,
)
from asyncgt.scheduler import ActivationPolicy, DelayModel, generate_trace


def single_agent_setup(sigma=0.0):
    g = Digraph(1, [])
    mix = build_mixing(g)
    oracle = QuadraticOracle([np.eye(1)], [np.zeros(1)], sigma=sigma)  # f = x^2/2
    return TrackingProtocol(oracle, g, mix, noise_seed=0, max_delay=0)


def pair_setup(sigma=0.0):
    g = Digraph(2, [(0, 1), (1, 0)])
    mix = build_mixing(g)
    # f_0 = (x-1)^2/2, f_1 = (2x)^2/2
    oracle = QuadraticOracle([[[1.0]], [[2.0]]], [[1.0], [0.0]], sigma=sigma)
    return TrackingProtocol(oracle, g, mix, noise_seed=0, max_delay=5)


def ring_setup(m=4, extra=1, sigma=0.0, seed=3, n=3, noise_seed=0, max_delay=5,
               oracle_seed=17):
    g = generate_ring_plus_random(m, extra, seed=seed)
    mix = build_mixing(g)
    oracle = make_sigmoid_wells(m, n, seed=oracle_seed, sigma=sigma)
    return g, mix, oracle, TrackingProtocol(oracle, g, mix, noise_seed=noise_seed,
                                            max_delay=max_delay)


def drive(proto, graph, events, D=3, gamma=0.3, pseed=0, dseed=0,
          policy="random-with-coverage", T=None):
    pol = ActivationPolicy(graph.m, policy, T=T or max(2 * graph.m, 4), seed=pseed)
    dm = DelayModel(graph, "uniform", D=D, seed=dseed)
    trace = generate_trace(pol, dm, events)
    records = [proto.activate(ev.k, ev.agent, ev.delays, gamma) for ev in trace]
    return trace, records


class TestNetworkStore:
    def test_stamps_must_increase(self):
        store = NetworkStore(1)
        store.append(Publication(0, 0, np.zeros(1), {}, None))
        with pytest.raises(ValueError):
            store.append(Publication(0, 0, np.zeros(1), {}, None))

    def test_exact_missing_stamp(self):
        store = NetworkStore(1)
        store.append(Publication(0, 0, np.zeros(1), {}, None))
        store.append(Publication(0, 3, np.ones(1), {}, None))
        assert store.exact(0, 3).stamp == 3
        with pytest.raises(MissingPublicationError):
            store.exact(0, 2)

    def test_floor_lookup(self):
        store = NetworkStore(1)
        for s in (0, 3, 7):
            store.append(Publication(0, s, np.full(1, float(s)), {}, None))
        assert store.stamp_at(0, store.latest_index_at_or_before(0, 6)) == 3
        assert store.stamp_at(0, store.latest_index_at_or_before(0, 7)) == 7
        assert store.latest_index_at_or_before(0, -1) == -1


class TestStampSelection:
    def _protocol_with_stamps(self, stamps):
        proto = pair_setup()
        for s in stamps:
            proto.store.append(Publication(1, s, np.zeros(1), {0: np.zeros(1)},
                                           {0: np.zeros(1)}))
        return proto

    def test_picks_newest_at_or_before_limit(self):
        proto = self._protocol_with_stamps([3, 5, 7])
        # advance tau to 5 first
        assert proto.select_stamp(0, 1, k=6, d_j=1) == 5
        # now a fresher read may advance to 7
        assert proto.select_stamp(0, 1, k=9, d_j=2) == 7

    def test_stale_candidate_never_regresses(self):
        proto = self._protocol_with_stamps([3, 5, 7])
        assert proto.select_stamp(0, 1, k=6, d_j=1) == 5
        # candidate limit k-d = 3 is older than what was already used
        assert proto.select_stamp(0, 1, k=9, d_j=6) == 5
        assert proto.states[0].tau[1] == 5

    def test_zero_delay_reads_newest(self):
        proto = self._protocol_with_stamps([3, 5, 7])
        assert proto.select_stamp(0, 1, k=9, d_j=0) == 7

    def test_initial_stamp_always_available(self):
        proto = pair_setup()
        assert proto.select_stamp(0, 1, k=0, d_j=0) == 0
        # limit below zero keeps the initial stamp
        assert proto.select_stamp(0, 1, k=0, d_j=5) == 0


class TestHandComputedUpdates:
    def test_single_agent_step(self):
        # f = x^2/2, start from x=2, z=2, step 0.5:
        # payload 1, model 1, tracker 2 + (grad(1) - grad(2)) = 1
        proto = single_agent_setup()
        st = proto.states[0]
        st.x = np.array([2.0])
        st.z = np.array([2.0])
        st.g_last = np.array([2.0])
        proto.activate(0, 0, {}, 0.5)
        assert st.x[0] == pytest.approx(1.0, abs=1e-15)
        assert st.z[0] == pytest.approx(1.0, abs=1e-15)
        pub = proto.store.exact(0, 1)
        assert pub.v[0] == pytest.approx(1.0, abs=1e-15)

    def test_zero_tracker_is_fixed_point(self):
        proto = single_agent_setup()
        st = proto.states[0]
        st.x = np.array([3.0])
        st.z = np.array([0.0])
        st.g_last = np.array([3.0])  # grad(3) = 3
        v = proto.sgd_step(0, 0.7)
        assert v[0] == 3.0

    def test_pair_single_activation_bookkeeping(self):
        # grads: f0' = x-1, f1' = 4x; uniform weights 1/2 everywhere
        proto = pair_setup()
        st0, st1 = proto.states
        assert st0.z[0] == -1.0 and st1.z[0] == 0.0
        proto.activate(0, 0, {1: 0}, 0.5)
        assert st0.x[0] == pytest.approx(0.25, abs=1e-15)   # (0.5 + 0)/2
        assert st0.z[0] == pytest.approx(-0.375, abs=1e-15)  # 0.5 * grad(0.25)
        assert st0.rho_out[1][0] == pytest.approx(-0.375, abs=1e-15)
        assert st0.g_last[0] == pytest.approx(-0.75, abs=1e-15)
        assert mass_residual(proto.states, proto.graph) == 0.0

    def test_consensus_of_constants(self):
        proto = pair_setup()
        c = np.array([2.5])
        fetched = {1: c}
        out = proto.consensus_step(0, c, fetched)
        assert out[0] == pytest.approx(2.5, abs=1e-15)

    def test_consensus_two_agent_average(self):
        proto = pair_setup()
        out = proto.consensus_step(0, np.array([1.0]), {1: np.array([3.0])})
        assert out[0] == pytest.approx(2.0, abs=1e-15)

    def test_no_new_mass_means_pure_gradient_correction(self):
        proto = pair_setup()
        st0 = proto.states[0]
        proto.activate(0, 0, {1: 0}, 0.5)
        z_before = st0.z.copy()
        x_before = st0.x.copy()
        # agent 0 activates again without agent 1 ever publishing: the
        # counter difference term vanishes
        proto.activate(1, 0, {1: 0}, 0.5)
        v = x_before - 0.5 * z_before
        x_new = 0.5 * v + 0.5 * 0.0  # neighbor payload still its stamp-0 zero
        g_new = x_new - 1.0
        expected_half = (z_before - (x_before - 1.0)) + g_new
        assert st0.z[0] == pytest.approx(0.5 * expected_half[0], rel=1e-12)


class TestConservation:
    @pytest.mark.parametrize("sigma", [0.0, 0.2])
    def test_residual_stays_at_float_noise_every_event(self, sigma):
        g, mix, oracle, proto = ring_setup(m=4, sigma=sigma)
        pol = ActivationPolicy(4, "random-with-coverage", T=8, seed=1)
        dm = DelayModel(g, "uniform", D=5, seed=2)
        for ev in generate_trace(pol, dm, 2000):
            proto.activate(ev.k, ev.agent, ev.delays, 0.4)
            scale = 1.0 + float(np.max(np.abs(sum(s.g_last for s in proto.states))))
            assert mass_residual(proto.states, proto.graph) <= 1e-10 * scale
            shadow_scale = 1.0 + float(np.max(np.abs(sum(s.g_last_shadow for s in proto.states))))
            assert mass_residual(proto.states, proto.graph, channel="shadow") \
                <= 1e-10 * shadow_scale

    def test_base_case_at_init(self):
        _, _, _, proto = ring_setup(m=5, sigma=0.1)
        assert mass_residual(proto.states, proto.graph) == 0.0
        assert mass_residual(proto.states, proto.graph, channel="shadow") == 0.0


class TestLocality:
    def test_only_active_agent_changes(self):
        g, mix, oracle, proto = ring_setup(m=5, extra=1, sigma=0.1)
        pol = ActivationPolicy(5, "round-robin")
        dm = DelayModel(g, "uniform", D=4, seed=0)
        for ev in generate_trace(pol, dm, 25):
            before = copy.deepcopy(proto.states)
            proto.activate(ev.k, ev.agent, ev.delays, 0.3)
            for i, (old, new) in enumerate(zip(before, proto.states)):
                if i == ev.agent:
                    continue
                assert np.array_equal(old.x, new.x)
                assert np.array_equal(old.z, new.z)
                assert np.array_equal(old.g_last, new.g_last)
                assert old.tau == new.tau
                assert all(np.array_equal(old.rho_out[j], new.rho_out[j])
                           for j in old.rho_out)
                assert all(np.array_equal(old.rho_buf[j], new.rho_buf[j])
                           for j in old.rho_buf)
                assert np.array_equal(old.z_shadow, new.z_shadow)


class TestDeterminism:
    def test_same_seeds_identical_trajectories(self):
        g, mix, oracle, proto_a = ring_setup(m=4, sigma=0.3, noise_seed=9)
        _, _, _, proto_b = ring_setup(m=4, sigma=0.3, noise_seed=9)
        drive(proto_a, g, 300, pseed=5, dseed=6)
        drive(proto_b, g, 300, pseed=5, dseed=6)
        for sa, sb in zip(proto_a.states, proto_b.states):
            assert np.array_equal(sa.x, sb.x)
            assert np.array_equal(sa.z, sb.z)
            assert np.array_equal(sa.z_shadow, sb.z_shadow)

    def test_init_is_bitwise_reproducible(self):
        _, _, _, a = ring_setup(m=3, sigma=0.5, noise_seed=4)
        _, _, _, b = ring_setup(m=3, sigma=0.5, noise_seed=4)
        for sa, sb in zip(a.states, b.states):
            assert np.array_equal(sa.x, sb.x)
            assert np.array_equal(sa.z, sb.z)
            assert np.array_equal(sa.g_last, sb.g_last)

    def test_zero_sigma_shadow_equals_stochastic(self):
        g, mix, oracle, proto = ring_setup(m=4, sigma=0.0)
        drive(proto, g, 200)
        for st in proto.states:
            assert np.array_equal(st.z, st.z_shadow)
            assert np.array_equal(st.g_last, st.g_last_shadow)


class TestStampMonotonicity:
    def test_taus_never_decrease_and_match_max_rule(self):
        g, mix, oracle, proto = ring_setup(m=5, extra=2, sigma=0.1)
        pol = ActivationPolicy(5, "random-with-coverage", T=10, seed=3)
        dm = DelayModel(g, "uniform", D=6, seed=4)
        last_tau = {}
        stamps = {j: [0] for j in range(5)}
        for ev in generate_trace(pol, dm, 1500):
            rec = proto.activate(ev.k, ev.agent, ev.delays, 0.2)
            for j, tau in rec.taus.items():
                key = (ev.agent, j)
                assert tau >= last_tau.get(key, 0)
                # independent max-rule recomputation from the stamp history
                candidates = [s for s in stamps[j] if s <= ev.k - ev.delays[j]]
                expected = max(last_tau.get(key, 0),
                               max(candidates) if candidates else 0)
                assert tau == expected
                last_tau[key] = tau
            stamps[ev.agent].append(ev.k + 1)


class NaiveReference:
    """Literal re-implementation used as an independent execution oracle."""

    def __init__(self, oracle, graph, W, A, noise_seed):
        self.oracle, self.graph = oracle, graph
        self.W, self.A = W, A
        self.noise_seed = noise_seed
        m, n = graph.m, oracle.n
        self.x = [np.zeros(n) for _ in range(m)]
        self.z = [oracle.stoch_grad(i, np.zeros(n), SampleDraw(noise_seed, i))
                  for i in range(m)]
        self.g = [z.copy() for z in self.z]
        self.tau = {(i, j): 0 for i in range(m) for j in graph.in_neighbors(i)}
        self.rho = {(j, i): np.zeros(n) for i in range(m)
                    for j in graph.out_neighbors(i)}  # (receiver, sender)
        self.buf = {(i, j): np.zeros(n) for i in range(m)
                    for j in graph.in_neighbors(i)}
        # history[sender][stamp] = (v, {receiver: rho})
        self.hist = [{0: (np.zeros(n), {j: np.zeros(n) for j in graph.out_neighbors(i)})}
                     for i in range(m)]

    def step(self, k, i, delays, gamma):
        m = self.graph.m
        for j in self.graph.in_neighbors(i):
            usable = [s for s in self.hist[j] if s <= k - delays[j]]
            self.tau[(i, j)] = max(self.tau[(i, j)], max(usable) if usable else 0)
        v_new = self.x[i] - gamma * self.z[i]
        x_new = self.W[i, i] * v_new
        for j in self.graph.in_neighbors(i):
            x_new = x_new + self.W[i, j] * self.hist[j][self.tau[(i, j)]][0]
        g_new = self.oracle.stoch_grad(i, x_new, SampleDraw(self.noise_seed, m + k))
        z_half = self.z[i] - self.g[i]
        for j in self.graph.in_neighbors(i):
            z_half = z_half + self.hist[j][self.tau[(i, j)]][1][i] - self.buf[(i, j)]
        z_half = z_half + g_new
        self.z[i] = self.A[i, i] * z_half
        for j in self.graph.out_neighbors(i):
            self.rho[(j, i)] = self.rho[(j, i)] + self.A[j, i] * z_half
        for j in self.graph.in_neighbors(i):
            self.buf[(i, j)] = self.hist[j][self.tau[(i, j)]][1][i].copy()
        self.g[i] = g_new
        self.x[i] = x_new
        self.hist[i][k + 1] = (v_new.copy(),
                               {j: self.rho[(j, i)].copy()
                                for j in self.graph.out_neighbors(i)})


class TestAgainstNaiveReference:
    @pytest.mark.parametrize("pseed,dseed,sigma", [(0, 1, 0.0), (2, 3, 0.4)])
    def test_full_state_agreement(self, pseed, dseed, sigma):
        g, mix, oracle, proto = ring_setup(m=5, extra=2, sigma=sigma, noise_seed=7,
                                           max_delay=6)
        naive = NaiveReference(oracle, g, mix.W, mix.A, noise_seed=7)
        pol = ActivationPolicy(5, "random-with-coverage", T=10, seed=pseed)
        dm = DelayModel(g, "uniform", D=6, seed=dseed)
        for ev in generate_trace(pol, dm, 800):
            gamma = 0.5 / (ev.k + 1) ** 0.6
            proto.activate(ev.k, ev.agent, ev.delays, gamma)
            naive.step(ev.k, ev.agent, ev.delays, gamma)
        for i in range(5):
            st = proto.states[i]
            assert np.allclose(st.x, naive.x[i], rtol=0, atol=0), i
            assert np.array_equal(st.x, naive.x[i])
            assert np.array_equal(st.z, naive.z[i])
            assert np.array_equal(st.g_last, naive.g[i])
            for j in g.out_neighbors(i):
                assert np.array_equal(st.rho_out[j], naive.rho[(j, i)])
            for j in g.in_neighbors(i):
                assert np.array_equal(st.rho_buf[j], naive.buf[(i, j)])
                assert st.tau[j] == naive.tau[(i, j)]


class TestShadowCoupling:
    def test_mean_zero_and_bounded_second_moment(self):
        sigma = 0.3
        m = 4
        g = generate_ring_plus_random(m, 1, seed=5)
        mix = build_mixing(g)
        oracle = make_sigmoid_wells(m, 3, seed=6, sigma=sigma)
        pol = ActivationPolicy(m, "random-with-coverage", T=8, seed=11)
        dm = DelayModel(g, "uniform", D=4, seed=12)
        trace = generate_trace(pol, dm, 121)
        reps = 300
        diffs = []
        for rep in range(reps):
            proto = TrackingProtocol(oracle, g, mix, noise_seed=rep, max_delay=4)
            for ev in trace[:-1]:
                proto.activate(ev.k, ev.agent, ev.delays, 0.5 / (ev.k + 1) ** 0.6)
            active = trace[-1].agent
            st = proto.states[active]
            diffs.append(st.z - st.z_shadow)
        diffs = np.array(diffs)
        mean = diffs.mean(axis=0)
        se = diffs.std(axis=0, ddof=1) / np.sqrt(reps)
        assert np.all(np.abs(mean) <= 4 * se + 1e-12)
        second_moment = float(np.mean(np.sum(diffs**2, axis=1)))
        assert second_moment <= 1.1 * m * sigma**2


class TestValidation:
    def test_wrong_delay_keys_rejected(self):
        proto = pair_setup()
        with pytest.raises(ValueError):
            proto.activate(0, 0, {}, 0.5)

    def test_gamma_outside_unit_interval_rejected(self):
        proto = pair_setup()
        with pytest.raises(ValueError):
            proto.activate(0, 0, {1: 0}, 1.5)

    def test_gamma_zero_allowed(self):
        proto = pair_setup()
        proto.activate(0, 0, {1: 0}, 0.0)

    def test_oracle_graph_size_mismatch(self):
        g = Digraph(2, [(0, 1), (1, 0)])
        oracle = QuadraticOracle([np.eye(1)], [np.zeros(1)])
        with pytest.raises(ValueError):
            TrackingProtocol(oracle, g, build_mixing(g))
