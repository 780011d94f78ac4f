"""Rank, redundancy and export instruments for attention matrices."""

import json
import os
from dataclasses import asdict, dataclass

import numpy as np

from .exceptions import ContractError, DimensionError, EmptyInputError

RANK_THRESHOLD = 1e-6
DEFAULT_SAMPLE_COUNT = 100


def _round_robin(n):
    """Pairings of ``n`` (even) columns into ``n - 1`` rounds of disjoint pairs."""
    players = list(range(n))
    rounds = []
    for _ in range(n - 1):
        half = n // 2
        rounds.append((np.array(players[:half]), np.array(players[half:][::-1])))
        players = [players[0], players[-1]] + players[1:-1]
    return rounds


def singular_values(a, tol=1e-12, max_sweeps=60):
    """Singular values by one-sided (Hestenes) Jacobi, in descending order.

    Columns are orthogonalized in parallel round-robin order: each round
    rotates ``n / 2`` disjoint column pairs at once.  Sweeps stop when every
    pair's normalized inner product ``|a_p . a_q| / (|a_p| |a_q|)`` is below
    ``tol``.
    """
    u = np.array(a, dtype=np.float64)
    if u.ndim != 2:
        raise DimensionError(f"expected a matrix, got shape {u.shape}")
    if u.shape[1] > u.shape[0]:
        u = u.T.copy()
    n = u.shape[1]
    if n == 0:
        return np.zeros(0)
    if n % 2:
        u = np.hstack([u, np.zeros((u.shape[0], 1))])
    scale = np.linalg.norm(u)
    if scale == 0:
        return np.zeros(n)
    tiny = (np.finfo(float).eps * scale) ** 2
    rounds = _round_robin(u.shape[1])
    for _ in range(max_sweeps):
        worst = 0.0
        for p, q in rounds:
            ap, aq = u[:, p], u[:, q]
            alpha = np.einsum("ij,ij->j", ap, ap)
            beta = np.einsum("ij,ij->j", aq, aq)
            gamma = np.einsum("ij,ij->j", ap, aq)
            live = (alpha > tiny) & (beta > tiny)
            ratio = np.zeros_like(gamma)
            ratio[live] = np.abs(gamma[live]) / np.sqrt(alpha[live] * beta[live])
            rotate = ratio > tol
            if not rotate.any():
                continue
            worst = max(worst, ratio.max())
            p, q = p[rotate], q[rotate]
            alpha, beta, gamma = alpha[rotate], beta[rotate], gamma[rotate]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.sqrt(1.0 + zeta * zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            ap, aq = u[:, p], u[:, q]
            u[:, p] = c * ap - s * aq
            u[:, q] = s * ap + c * aq
        if worst <= tol:
            break
    return np.sort(np.linalg.norm(u, axis=0))[::-1][:n]


def matrix_rank(a, threshold=RANK_THRESHOLD):
    """Number of singular values of the square matrix ``a`` above ``threshold``."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise DimensionError(f"matrix_rank expects a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("matrix_rank needs finite entries")
    return int(np.count_nonzero(singular_values(a) > threshold))


@dataclass
class RankHistogram:
    layer: int
    head: int
    ranks: list
    threshold: float
    seed: int

    def to_dict(self):
        return asdict(self)


def rank_distribution(model, tokens, count=DEFAULT_SAMPLE_COUNT, threshold=RANK_THRESHOLD, seed=0):
    """Ranks of ``count`` attention matrices per (layer, head) of ``model``.

    ``count`` sequences are drawn from ``tokens`` (with replacement when
    ``count`` exceeds the sample), passed through ``model`` and every
    head's score matrix is ranked.

    Returns
    -------
    list of RankHistogram
    """
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] == 0:
        raise EmptyInputError("rank_distribution needs a non-empty token sample")
    if count < 1:
        raise ContractError(f"count must be at least 1, got {count}")
    rng = np.random.default_rng(seed)
    idx = rng.choice(tokens.shape[0], size=count, replace=count > tokens.shape[0])
    layers = model.attention_scores(tokens[idx])
    out = []
    for layer, heads in enumerate(layers):
        for head, scores in enumerate(heads):
            ranks = [matrix_rank(m, threshold) for m in scores]
            out.append(RankHistogram(layer, head, ranks, threshold, int(seed)))
    return out


def head_similarity(scores):
    """Pairwise mean absolute difference between per-head score matrices."""
    mats = [np.asarray(getattr(s, "data", s), dtype=np.float64) for s in scores]
    if len(mats) < 2:
        raise ContractError(f"head_similarity needs at least 2 heads, got {len(mats)}")
    shape = mats[0].shape
    if any(m.shape != shape for m in mats):
        raise DimensionError(f"head score shapes differ: {[m.shape for m in mats]}")
    h = len(mats)
    out = np.zeros((h, h))
    for i in range(h):
        for j in range(i + 1, h):
            out[i, j] = out[j, i] = np.mean(np.abs(mats[i] - mats[j]))
    return out


def format_matrix(a):
    """Rows of comma-separated values with 17 significant digits."""
    return "\n".join(",".join(format(float(v), ".17g") for v in row) for row in np.asarray(a))


def dump_attention(outputs, path, prefix="attention", index=0):
    """Write one CSV per head of score matrices into directory ``path``.

    ``outputs`` is an AttentionOutput or a sequence of them (one per head).
    Batched scores contribute their ``index``-th matrix.  Returns the list
    of written file paths.
    """
    if not isinstance(outputs, (list, tuple)):
        outputs = [outputs]
    os.makedirs(path, exist_ok=True)
    written = []
    for head, out in enumerate(outputs):
        if out.scores is None:
            raise ContractError("scores were not materialized for this head")
        a = out.scores.data
        if a.ndim == 3:
            a = a[index]
        file = os.path.join(path, f"{prefix}_head{head}.csv")
        with open(file, "w") as fh:
            fh.write(format_matrix(a))
        written.append(file)
    return written


def load_attention(file):
    with open(file) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh.read().splitlines() if line])


def rank_report_json(histograms):
    return json.dumps([h.to_dict() for h in histograms], indent=2, sort_keys=True)
