"""Sum-structured smooth objectives with exact and noisy gradient access.

An oracle holds m component functions f_0..f_{m-1} on R^n, one per agent,
and exposes exact per-component gradients, noisy gradients with a known
second moment, the full-sum gradient, and (where it exists in closed form)
the global minimizer.  Three families are provided:

* quadratic       -- f_i(x) = 0.5 * ||A_i x - b_i||^2, convex, closed-form
                     minimizer from the stacked normal equations.
* sigmoid_wells   -- separable smooth nonconvex wells
                     f_i(x) = sum_d c_id * u(x_d - t_id) + 0.5 * mu * ||x||^2
                     with u(s) = s^2 / (1 + s^2).
* logistic        -- per-agent synthetic logistic loss plus the smooth
                     nonconvex regularizer alpha * sum_d x_d^2 / (1 + x_d^2).

Noise is additive isotropic Gaussian by default: total second moment
sigma^2 regardless of dimension.  The logistic family can instead subsample
minibatches, which is unbiased with variance bounded (not equal) by a
data-dependent constant.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np


class SingularSystemError(ValueError):
    """The stacked normal equations are rank-deficient."""


@dataclass(frozen=True)
class SampleDraw:
    """Replayable randomness for one stochastic gradient evaluation.

    The pair (seed, label) fully determines the draw, independent of call
    order, so any trace can be re-executed with identical noise.
    """

    seed: int
    label: int

    def rng(self) -> np.random.Generator:
        if self.seed < 0 or self.label < 0:
            raise ValueError("seed and label must be non-negative")
        return np.random.default_rng((self.seed, self.label))


class ObjectiveOracle:
    """Base class: noise handling and sum-level helpers shared by families."""

    kind = "abstract"

    def __init__(self, m: int, n: int, sigma: float):
        if m < 1 or n < 1:
            raise ValueError("m and n must be positive")
        if sigma < 0:
            raise ValueError("sigma must be non-negative")
        self.m = int(m)
        self.n = int(n)
        self.sigma = float(sigma)

    # subclasses implement the exact component oracle
    def value(self, i: int, x: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, i: int, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def stoch_grad(self, i: int, x: np.ndarray, draw: SampleDraw) -> np.ndarray:
        """Exact gradient plus isotropic Gaussian noise with E||noise||^2 = sigma^2."""
        g = self.grad(i, x)
        if self.sigma == 0.0:
            return g
        noise = draw.rng().standard_normal(self.n) * (self.sigma / np.sqrt(self.n))
        return g + noise

    def full_grad_sum(self, x: np.ndarray) -> np.ndarray:
        total = np.zeros(self.n)
        for i in range(self.m):
            total += self.grad(i, x)
        return total

    def value_sum(self, x: np.ndarray) -> float:
        return float(sum(self.value(i, x) for i in range(self.m)))

    def minimizer(self) -> np.ndarray | None:
        """Closed-form global minimizer, or None when the family has none."""
        return None

    # -- serialization -------------------------------------------------------

    def to_dict(self) -> dict:
        raise NotImplementedError

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @property
    def lipschitz(self) -> np.ndarray:
        """Per-component gradient Lipschitz constants."""
        return self._lipschitz.copy()


class QuadraticOracle(ObjectiveOracle):
    """f_i(x) = 0.5 * ||A_i x - b_i||^2 with closed-form minimizer."""

    kind = "quadratic"

    def __init__(self, mats, rhs, sigma=0.0):
        mats = [np.asarray(a, dtype=float) for a in mats]
        rhs = [np.asarray(b, dtype=float) for b in rhs]
        if len(mats) != len(rhs) or not mats:
            raise ValueError("need matching non-empty A_i and b_i lists")
        n = mats[0].shape[1]
        super().__init__(len(mats), n, sigma)
        for a, b in zip(mats, rhs):
            if a.shape[1] != n or a.shape[0] != b.shape[0]:
                raise ValueError("inconsistent quadratic shapes")
        self.mats = mats
        self.rhs = rhs
        self._gram = [a.T @ a for a in mats]
        self._atb = [a.T @ b for a, b in zip(mats, rhs)]
        self._lipschitz = np.array(
            [float(np.linalg.eigvalsh(g)[-1]) for g in self._gram]
        )

    def value(self, i, x):
        r = self.mats[i] @ x - self.rhs[i]
        return 0.5 * float(r @ r)

    def grad(self, i, x):
        return self._gram[i] @ x - self._atb[i]

    def minimizer(self):
        H = sum(self._gram)
        if np.linalg.matrix_rank(H) < self.n:
            raise SingularSystemError("sum of A_i^T A_i is rank-deficient")
        return np.linalg.solve(H, sum(self._atb))

    def to_dict(self):
        return {
            "family": self.kind,
            "sigma": self.sigma,
            "mats": [a.tolist() for a in self.mats],
            "rhs": [b.tolist() for b in self.rhs],
        }


def _well(s):
    return s * s / (1.0 + s * s)


def _well_deriv(s):
    return 2.0 * s / (1.0 + s * s) ** 2


class SigmoidWellOracle(ObjectiveOracle):
    """Separable smooth nonconvex wells plus an optional quadratic cushion.

    f_i(x) = sum_d c_id * u(x_d - t_id) + 0.5 * mu * ||x||^2 where
    u(s) = s^2/(1+s^2).  |u''| <= 2, so the gradient Lipschitz constant is
    2 * max_d |c_id| + mu, and u in [0, 1) keeps every component bounded
    below.
    """

    kind = "sigmoid_wells"

    def __init__(self, coeffs, shifts, mu=0.1, sigma=0.0):
        coeffs = np.asarray(coeffs, dtype=float)
        shifts = np.asarray(shifts, dtype=float)
        if coeffs.shape != shifts.shape or coeffs.ndim != 2:
            raise ValueError("coeffs and shifts must be equal-shape (m, n) arrays")
        if mu < 0:
            raise ValueError("mu must be non-negative")
        super().__init__(coeffs.shape[0], coeffs.shape[1], sigma)
        self.coeffs = coeffs
        self.shifts = shifts
        self.mu = float(mu)
        self._lipschitz = 2.0 * np.abs(coeffs).max(axis=1) + self.mu

    def value(self, i, x):
        s = x - self.shifts[i]
        return float(self.coeffs[i] @ _well(s) + 0.5 * self.mu * (x @ x))

    def grad(self, i, x):
        s = x - self.shifts[i]
        return self.coeffs[i] * _well_deriv(s) + self.mu * x

    def to_dict(self):
        return {
            "family": self.kind,
            "sigma": self.sigma,
            "coeffs": self.coeffs.tolist(),
            "shifts": self.shifts.tolist(),
            "mu": self.mu,
        }


class LogisticOracle(ObjectiveOracle):
    """Mean logistic loss on a small per-agent dataset, nonconvex-regularized.

    f_i(x) = (1/N_i) * sum_s log(1 + exp(-y_s * a_s.x))
             + alpha * sum_d x_d^2 / (1 + x_d^2)

    noise_mode "gaussian" adds the standard isotropic noise; "minibatch"
    subsamples `batch_size` rows uniformly with replacement, which is
    unbiased with variance bounded by a data-dependent constant rather than
    exactly sigma^2.
    """

    kind = "logistic"

    def __init__(self, features, labels, alpha=0.1, sigma=0.0,
                 noise_mode="gaussian", batch_size=8):
        features = [np.asarray(a, dtype=float) for a in features]
        labels = [np.asarray(y, dtype=float) for y in labels]
        if len(features) != len(labels) or not features:
            raise ValueError("need matching non-empty feature/label lists")
        n = features[0].shape[1]
        super().__init__(len(features), n, sigma)
        for a, y in zip(features, labels):
            if a.shape[1] != n or a.shape[0] != y.shape[0]:
                raise ValueError("inconsistent logistic shapes")
            if not np.all(np.isin(y, (-1.0, 1.0))):
                raise ValueError("labels must be +/-1")
        if noise_mode not in ("gaussian", "minibatch"):
            raise ValueError(f"unknown noise_mode {noise_mode!r}")
        self.features = features
        self.labels = labels
        self.alpha = float(alpha)
        self.noise_mode = noise_mode
        self.batch_size = int(batch_size)
        # mean loss: L = lambda_max(A^T A) / (4 N); regularizer curvature <= 2 alpha
        self._lipschitz = np.array(
            [
                float(np.linalg.eigvalsh(a.T @ a)[-1]) / (4.0 * a.shape[0])
                + 2.0 * self.alpha
                for a in features
            ]
        )

    def value(self, i, x):
        margins = self.labels[i] * (self.features[i] @ x)
        loss = float(np.mean(np.logaddexp(0.0, -margins)))
        return loss + self.alpha * float(np.sum(_well(x)))

    def _loss_grad(self, i, x, rows=None):
        a = self.features[i]
        y = self.labels[i]
        if rows is not None:
            a = a[rows]
            y = y[rows]
        margins = y * (a @ x)
        # d/dm log(1+exp(-m)) = -sigmoid(-m)
        coef = -y / (1.0 + np.exp(margins))
        return (a.T @ coef) / a.shape[0]

    def _reg_grad(self, x):
        return self.alpha * _well_deriv(x)

    def grad(self, i, x):
        return self._loss_grad(i, x) + self._reg_grad(x)

    def stoch_grad(self, i, x, draw):
        if self.noise_mode == "gaussian":
            return super().stoch_grad(i, x, draw)
        rows = draw.rng().integers(0, self.features[i].shape[0], self.batch_size)
        return self._loss_grad(i, x, rows) + self._reg_grad(x)

    def to_dict(self):
        return {
            "family": self.kind,
            "sigma": self.sigma,
            "features": [a.tolist() for a in self.features],
            "labels": [y.tolist() for y in self.labels],
            "alpha": self.alpha,
            "noise_mode": self.noise_mode,
            "batch_size": self.batch_size,
        }


# -- seeded generators --------------------------------------------------------


def make_quadratic(m, n, seed, sigma=0.0, sv_range=(0.5, 1.2)) -> QuadraticOracle:
    """Random well-conditioned quadratic components with controlled spectra."""
    rng = np.random.default_rng(seed)
    mats, rhs = [], []
    for _ in range(m):
        u, _ = np.linalg.qr(rng.standard_normal((n, n)))
        v, _ = np.linalg.qr(rng.standard_normal((n, n)))
        sv = np.linspace(sv_range[0], sv_range[1], n)
        mats.append(u @ np.diag(sv) @ v.T)
        rhs.append(rng.standard_normal(n))
    return QuadraticOracle(mats, rhs, sigma=sigma)


def make_sigmoid_wells(m, n, seed, sigma=0.0, mu=0.1,
                       c_range=(0.5, 1.5), t_range=(-1.0, 1.0)) -> SigmoidWellOracle:
    rng = np.random.default_rng(seed)
    coeffs = rng.uniform(c_range[0], c_range[1], size=(m, n))
    shifts = rng.uniform(t_range[0], t_range[1], size=(m, n))
    return SigmoidWellOracle(coeffs, shifts, mu=mu, sigma=sigma)


def make_logistic(m, n, seed, sigma=0.0, samples_per_agent=32, alpha=0.1,
                  noise_mode="gaussian", batch_size=8) -> LogisticOracle:
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(n)
    features, labels = [], []
    for _ in range(m):
        a = rng.standard_normal((samples_per_agent, n)) / np.sqrt(n)
        prob = 1.0 / (1.0 + np.exp(-(a @ w_true)))
        y = np.where(rng.random(samples_per_agent) < prob, 1.0, -1.0)
        features.append(a)
        labels.append(y)
    return LogisticOracle(features, labels, alpha=alpha, sigma=sigma,
                          noise_mode=noise_mode, batch_size=batch_size)


_FAMILIES = {
    "quadratic": QuadraticOracle,
    "sigmoid_wells": SigmoidWellOracle,
    "logistic": LogisticOracle,
}


def from_dict(payload: dict) -> ObjectiveOracle:
    family = payload.get("family")
    if family == "quadratic":
        return QuadraticOracle(payload["mats"], payload["rhs"], sigma=payload["sigma"])
    if family == "sigmoid_wells":
        return SigmoidWellOracle(
            payload["coeffs"], payload["shifts"],
            mu=payload["mu"], sigma=payload["sigma"],
        )
    if family == "logistic":
        return LogisticOracle(
            payload["features"], payload["labels"], alpha=payload["alpha"],
            sigma=payload["sigma"], noise_mode=payload["noise_mode"],
            batch_size=payload["batch_size"],
        )
    raise ValueError(f"unknown oracle family {family!r}")


def load(path) -> ObjectiveOracle:
    return from_dict(json.loads(Path(path).read_text()))
