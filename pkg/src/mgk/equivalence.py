"""Self-checks relating the attention variants to each other and to direct oracles.

Each check returns a :class:`CheckResult` with the measured maximum
deviation; failures are report entries, never exceptions.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import kernels as K
from .em import GaussianKeyMixture
from .rng import SplitMix64

REDUCTION_TOL = 1e-12
NESTING_TOL = 1e-6
HARD_SOFT_TOL = 1e-6
LINEAR_TOL = 1e-10


@dataclass
class CheckResult:
    name: str
    max_deviation: float
    tolerance: float
    instances: int

    @property
    def passed(self):
        return bool(self.max_deviation <= self.tolerance)

    def to_dict(self):
        out = asdict(self)
        out["max_deviation"] = format(self.max_deviation, ".17g")
        out["tolerance"] = format(self.tolerance, ".17g")
        out["passed"] = self.passed
        return out


def _unit_rows(a):
    return a / np.linalg.norm(a, axis=-1, keepdims=True)


def reduction_identity(rng, instances=20, sigma_scale=1.0):
    """Unit queries and keys, one component, ``sigma2 = sqrt(D)``: MGK scores equal softmax scores."""
    worst = 0.0
    for _ in range(instances):
        n, d = int(rng.integers(1, 33)), int(rng.integers(1, 17))
        q = _unit_rows(rng.standard_normal((n, d)))
        k = _unit_rows(rng.standard_normal((n, d)))
        v = rng.standard_normal((n, d))
        causal = bool(rng.integers(2))
        ref = K.softmax_attention(q, k, v, causal).scores.data
        got = K.mgk_attention(q, [k], v, np.ones(1), (sigma_scale * math.sqrt(d),), causal=causal).scores.data
        worst = max(worst, float(np.max(np.abs(got - ref))))
    return CheckResult("reduction_identity", worst, REDUCTION_TOL, instances)


def nesting(rng, instances=10):
    """A fitted two-component key mixture never explains queries worse than one component."""
    worst = -math.inf
    for _ in range(instances):
        n, d = int(rng.integers(8, 65)), int(rng.integers(1, 9))
        q = rng.standard_normal((n, d)) + rng.integers(0, 2, size=(n, 1)) * 3.0
        seed = int(rng.integers(2**31))
        sigma2 = float(rng.uniform(0.5, 2.0))
        one = GaussianKeyMixture(1, sigma2=[sigma2], random_state=seed).fit(q)
        two = GaussianKeyMixture(2, sigma2=[sigma2, sigma2], random_state=seed).fit(q)
        worst = max(worst, two.nll_ - one.nll_)
    return CheckResult("nesting", max(worst, 0.0), NESTING_TOL, instances)


def _separated_keys(rng, n, d, m):
    base = rng.standard_normal((n, d))
    keys = [base]
    for _ in range(m - 1):
        offset = rng.standard_normal(d)
        offset *= rng.uniform(1.0, 2.0) / np.linalg.norm(offset)
        keys.append(base + offset)
    return keys


def _clear_winner(q, keys, gap):
    sq = np.stack([((q[:, None, :] - k[None, :, :]) ** 2).sum(-1) for k in keys], axis=-1)
    flat = np.sort(sq.reshape(q.shape[0], -1), axis=1)
    return flat.shape[1] < 2 or bool(np.all(flat[:, 1] - flat[:, 0] > gap))


def hard_soft_limit(rng, instances=20, sigma2=1e-6):
    """With tiny variance, soft and hard inference pick the same nearest key."""
    worst = 0.0
    done = 0
    while done < instances:
        n, d, m = int(rng.integers(2, 17)), int(rng.integers(1, 9)), int(rng.integers(2, 4))
        q = rng.standard_normal((n, d))
        keys = _separated_keys(rng, n, d, m)
        if not _clear_winner(q, keys, 1e-3):
            continue
        v = rng.standard_normal((n, d))
        pi = rng.dirichlet(np.ones(m))
        s2 = (sigma2,) * m
        soft = K.mgk_attention(q, keys, v, pi, s2, "soft").scores.data
        hard = K.mgk_attention(q, keys, v, None, s2, "hard").scores.data
        worst = max(worst, float(np.max(np.abs(soft - hard))))
        done += 1
    return CheckResult("hard_soft_limit", worst, HARD_SOFT_TOL, instances)


def quadratic_linear_oracle(q, keys, v, pi, causal):
    """Linear or mixture-linear attention evaluated pair by pair, in O(N^2)."""

    def phi(u):
        return np.where(u >= 0, u + 1.0, np.exp(np.minimum(u, 0.0)))

    fq = phi(q)
    psi = sum(p * phi(k) for p, k in zip(pi, keys))
    out = np.zeros((q.shape[0], v.shape[1]))
    for i in range(q.shape[0]):
        num = np.zeros(v.shape[1])
        den = 0.0
        for j in range(i + 1 if causal else psi.shape[0]):
            w = float(fq[i] @ psi[j])
            num += w * v[j]
            den += w
        out[i] = num / den
    return out


def linear_oracle(rng, instances=16):
    """Linear and mixture-linear attention against the pairwise oracle (relative error)."""
    worst = 0.0
    for t in range(instances):
        n, d = int(rng.integers(1, 65)), int(rng.integers(1, 9))
        m = 1 + t % 2
        causal = bool((t // 2) % 2)
        q = rng.standard_normal((n, d))
        keys = [rng.standard_normal((n, d)) for _ in range(m)]
        v = rng.standard_normal((n, d))
        if m == 1:
            pi = np.ones(1)
            got = K.linear_attention(q, keys[0], v, causal).output.data
        else:
            pi = rng.dirichlet(np.ones(m))
            got = K.mlk_attention(q, keys, v, pi, causal).output.data
        ref = quadratic_linear_oracle(q, keys, v, pi, causal)
        rel = np.max(np.abs(got - ref)) / max(np.max(np.abs(ref)), 1e-300)
        worst = max(worst, float(rel))
    return CheckResult("linear_oracle", worst, LINEAR_TOL, instances)


def equivalence_suite(sigma_scale=1.0, seed=0):
    """Run every equivalence check; ``sigma_scale != 1`` perturbs the reduction identity.

    Returns a list of :class:`CheckResult`.
    """
    rng = SplitMix64(seed).numpy_generator()
    return [
        reduction_identity(rng, sigma_scale=sigma_scale),
        nesting(rng),
        hard_soft_limit(rng),
        linear_oracle(rng),
    ]
