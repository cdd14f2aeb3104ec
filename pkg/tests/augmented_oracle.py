"""Explicit small-instance matrix oracles for the linear mixing dynamics.

These materialize, for a fixed round-robin schedule with fixed per-edge
delays, the exact linear map that one event applies to

* the tracking channel: agent trackers plus per-edge "parcel" buckets of
  pushed-but-unconsumed mass, indexed by age in events; and
* the consensus channel: agent models plus each agent's payload values at
  the last D+1 iterations.

They are built directly from the update rules (weights, schedule, delays),
independently of the protocol's counter/stamp machinery, so trajectories
and contraction rates computed from them are a genuine second route.
Scalar state per agent (n = 1).
"""

import numpy as np


class ConstantGradOracle:
    """Test stub whose gradients never change, so gradient corrections vanish
    and the tracking channel evolves by pure linear mixing."""

    kind = "constant"

    def __init__(self, grads):
        self.grads = np.asarray(grads, dtype=float)
        self.m, self.n = self.grads.shape
        self.sigma = 0.0

    def value(self, i, x):
        return float(self.grads[i] @ x)

    def grad(self, i, x):
        return self.grads[i].copy()

    def stoch_grad(self, i, x, draw):
        return self.grads[i].copy()

    def full_grad_sum(self, x):
        return self.grads.sum(axis=0)

    def value_sum(self, x):
        return float(self.grads.sum(axis=0) @ x)

    def minimizer(self):
        return None


class PushChannelOracle:
    """Tracking-channel dynamics as explicit per-phase event matrices.

    State layout: [z_0 .. z_{m-1}] then, per directed edge (sorted), P age
    buckets; bucket (e, a) at time k holds mass pushed on e during event
    k-1-a that no receiver has consumed yet.
    """

    def __init__(self, graph, A, delays, depth_extra=2):
        self.graph = graph
        self.m = graph.m
        self.edges = sorted(graph.edges)
        self.delays = dict(delays)
        D = max(self.delays.values(), default=0)
        self.P = D + self.m + depth_extra
        self.N = self.m + len(self.edges) * self.P
        self._eidx = {e: idx for idx, e in enumerate(self.edges)}
        self.A = A
        self.phase_matrices = [self._event_matrix(i) for i in range(self.m)]

    def zcol(self, i):
        return i

    def bcol(self, e, a):
        return self.m + self._eidx[e] * self.P + a

    def _event_matrix(self, i):
        M = np.zeros((self.N, self.N))
        in_edges = [(j, i) for j in self.graph.in_neighbors(i)]
        out_nbrs = self.graph.out_neighbors(i)
        for j in range(self.m):
            if j != i:
                M[self.zcol(j), self.zcol(j)] = 1.0
        # columns feeding the intermediate mass: own tracker + consumable buckets
        half_cols = [self.zcol(i)]
        for e in in_edges:
            for a in range(self.delays[e], self.P):
                half_cols.append(self.bcol(e, a))
        for c in half_cols:
            M[self.zcol(i), c] += self.A[i, i]
            for j2 in out_nbrs:
                M[self.bcol((i, j2), 0), c] += self.A[j2, i]
        # unconsumed buckets age by one event
        in_set = set(in_edges)
        for e in self.edges:
            cutoff = self.delays[e] if e in in_set else self.P
            for a in range(self.P - 1):
                if a < cutoff:
                    M[self.bcol(e, a + 1), self.bcol(e, a)] = 1.0
        # every column either conserves its mass or is a terminal-age slot
        colsums = M.sum(axis=0)
        for c in range(self.N):
            if not np.isclose(colsums[c], 1.0, atol=1e-12):
                assert np.isclose(colsums[c], 0.0, atol=1e-12)
                assert c >= self.m and (c - self.m) % self.P == self.P - 1
        return M

    def initial_state(self, trackers):
        S = np.zeros(self.N)
        S[: self.m] = trackers
        return S

    def step(self, k, S):
        """Apply event k (round-robin phase k mod m); asserts no mass is about
        to fall off the oldest bucket slot."""
        i = k % self.m
        in_set = {(j, i) for j in self.graph.in_neighbors(i)}
        for e in self.edges:
            if e not in in_set:
                assert abs(S[self.bcol(e, self.P - 1)]) < 1e-12, (
                    "parcel outlived the bucket depth")
        return self.phase_matrices[i] @ S

    def period_map(self):
        Phi = np.eye(self.N)
        for i in range(self.m):
            Phi = self.phase_matrices[i] @ Phi
        return Phi

    def edge_inflight(self, S, e):
        base = self.bcol(e, 0)
        return float(S[base: base + self.P].sum())

    def subdominant_rate(self):
        """Second-largest eigenvalue magnitude of the one-period map: the
        contraction factor per period of everything orthogonal to the
        conserved mass."""
        eig = np.linalg.eigvals(self.period_map())
        mags = np.sort(np.abs(eig))
        assert np.isclose(mags[-1], 1.0, atol=1e-9)
        return float(mags[-2])


class ConsensusChannelOracle:
    """Consensus-channel dynamics (zero step size) as per-phase matrices.

    State layout: [x_0 .. x_{m-1}] then, per agent, payload values at lags
    0..D; entry (j, r) at time k holds agent j's payload at iteration k-r.
    """

    def __init__(self, graph, W, delays, D):
        self.graph = graph
        self.m = graph.m
        self.D = D
        self.delays = dict(delays)
        self.W = W
        self.N = self.m + self.m * (D + 1)
        self.phase_matrices = [self._event_matrix(i) for i in range(self.m)]

    def xcol(self, i):
        return i

    def vcol(self, j, r):
        return self.m + j * (self.D + 1) + r

    def _event_matrix(self, i):
        M = np.zeros((self.N, self.N))
        for j in range(self.m):
            if j != i:
                M[self.xcol(j), self.xcol(j)] = 1.0
        # fresh payload equals the current model when the step size is zero
        M[self.xcol(i), self.xcol(i)] = self.W[i, i]
        for j in self.graph.in_neighbors(i):
            M[self.xcol(i), self.vcol(j, self.delays[(j, i)])] += self.W[i, j]
        for j in range(self.m):
            if j == i:
                M[self.vcol(i, 0), self.xcol(i)] = 1.0
            else:
                M[self.vcol(j, 0), self.vcol(j, 0)] = 1.0
            for r in range(1, self.D + 1):
                M[self.vcol(j, r), self.vcol(j, r - 1)] = 1.0
        assert np.allclose(M.sum(axis=1)[: self.m], 1.0, atol=1e-12)
        return M

    def state_from_protocol(self, states, k):
        """Map the live protocol state at iteration k into the matrix state."""
        S = np.zeros(self.N)
        for j, st in enumerate(states):
            S[self.xcol(j)] = st.x[0]
            for r in range(self.D + 1):
                S[self.vcol(j, r)] = st.v_at(k - r)[0]
        return S

    def step(self, k, S):
        return self.phase_matrices[k % self.m] @ S

    def period_map(self):
        Phi = np.eye(self.N)
        for i in range(self.m):
            Phi = self.phase_matrices[i] @ Phi
        return Phi

    def subdominant_rate(self):
        eig = np.linalg.eigvals(self.period_map())
        mags = np.sort(np.abs(eig))
        assert np.isclose(mags[-1], 1.0, atol=1e-9)
        return float(mags[-2])
