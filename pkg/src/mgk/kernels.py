"""Attention variants built from differentiable primitives.

Single-head kernels take ``q`` of shape ``(..., N, D)``, per-component key
sets of shape ``(..., N', D)`` and values ``(..., N', D_v)``; leading axes
are treated as a batch.  :func:`multi_head` assembles per-head projections
and the output projection for a full attention layer.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, DegenerateRowError, DimensionError
from .tensor import Tensor

VARIANTS = ("softmax", "gaussian", "mgk", "linear", "mlk")
KERNELS = ("dot", "gaussian")
ESTEPS = ("soft_learned", "soft_mstep", "hard")
KEY_MODES = ("independent", "shifted")
MIXTURE_VARIANTS = ("mgk", "mlk")


def default_sigma2(head_dim, n_components):
    """Fixed variances ``sqrt(D), 3 sqrt(D), 5 sqrt(D), ...``."""
    root = math.sqrt(head_dim)
    return tuple((2 * r + 1) * root for r in range(n_components))


@dataclass(frozen=True)
class AttentionConfig:
    """Variant selector plus the dimensions of one attention layer.

    ``value_dim`` defaults to ``head_dim``; ``out_dim`` (rows of the output
    projection) defaults to ``n_heads * value_dim``; ``sigma2`` defaults to
    :func:`default_sigma2`.
    """

    variant: str = "softmax"
    n_heads: int = 1
    n_components: int = 1
    head_dim: int = 16
    input_dim: int = 16
    value_dim: int = None
    kernel: str = "gaussian"
    estep: str = "soft_learned"
    key_mode: str = "independent"
    causal: bool = False
    sigma2: tuple = None
    out_dim: int = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.kernel not in KERNELS:
            raise ConfigurationError(f"kernel must be one of {KERNELS}, got {self.kernel!r}")
        if self.estep not in ESTEPS:
            raise ConfigurationError(f"estep must be one of {ESTEPS}, got {self.estep!r}")
        if self.key_mode not in KEY_MODES:
            raise ConfigurationError(f"key_mode must be one of {KEY_MODES}, got {self.key_mode!r}")
        for name in ("n_heads", "n_components", "head_dim", "input_dim"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.variant not in MIXTURE_VARIANTS and self.n_components != 1:
            raise ConfigurationError(f"variant {self.variant!r} requires n_components=1")
        if self.value_dim is None:
            object.__setattr__(self, "value_dim", self.head_dim)
        if self.out_dim is None:
            object.__setattr__(self, "out_dim", self.n_heads * self.value_dim)
        if self.sigma2 is None:
            object.__setattr__(self, "sigma2", default_sigma2(self.head_dim, self.n_components))
        sigma2 = tuple(float(s) for s in self.sigma2)
        if len(sigma2) != self.n_components:
            raise ConfigurationError(f"sigma2 needs {self.n_components} entries, got {len(sigma2)}")
        if not all(s > 0 and math.isfinite(s) for s in sigma2):
            raise ConfigurationError(f"sigma2 entries must be positive and finite, got {sigma2}")
        object.__setattr__(self, "sigma2", sigma2)

    @property
    def learns_pi(self):
        return self.variant in MIXTURE_VARIANTS and self.estep == "soft_learned"


@dataclass
class MixtureKeyParams:
    """Key projections, offsets and mixing weights of one head.

    ``mode='independent'``: ``W_K`` holds M matrices of shape (D, D_x) and
    ``b`` is None.  ``mode='shifted'``: ``W_K`` holds a single matrix and
    ``b`` holds M offset vectors of length D.  ``pi`` stores positive
    unnormalized weights, normalized on use; it is None for variants
    without a mixture.
    """

    mode: str
    W_K: list
    b: list = None
    pi: Tensor = None
    sigma2: tuple = (1.0,)

    @property
    def n_components(self):
        return len(self.sigma2)

    def normalized_pi(self):
        if self.pi is None:
            return Tensor(np.ones(1))
        return T.normalize(self.pi)

    def tensors(self):
        out = list(self.W_K) + list(self.b or [])
        if self.pi is not None:
            out.append(self.pi)
        return out


@dataclass
class ProjectionParams:
    """Query/value projections and key parameters of one head."""

    W_Q: Tensor
    W_V: Tensor
    keys: MixtureKeyParams


@dataclass
class AttentionParams:
    """All heads of a layer plus the output projection ``W_O``."""

    heads: list
    W_O: Tensor

    def tensors(self):
        out = []
        for head in self.heads:
            out += [head.W_Q, head.W_V] + head.keys.tensors()
        out.append(self.W_O)
        return out

    def groups(self):
        """Trainable tensors keyed by parameter group name."""
        groups = {"W_Q": [], "W_K": [], "b": [], "W_V": [], "W_O": [self.W_O], "pi": []}
        for head in self.heads:
            groups["W_Q"].append(head.W_Q)
            groups["W_V"].append(head.W_V)
            groups["W_K"].extend(head.keys.W_K)
            groups["b"].extend(head.keys.b or [])
            if head.keys.pi is not None and head.keys.pi.requires_grad:
                groups["pi"].append(head.keys.pi)
        return {name: ps for name, ps in groups.items() if ps}


@dataclass
class AttentionOutput:
    """Output rows, the row-stochastic score matrix and component posteriors.

    ``responsibilities`` holds, per query, the posterior over mixture
    components marginalized over key positions; only soft mixture variants
    fill it.  Linear variants leave ``scores`` empty unless asked to
    materialize them.
    """

    output: Tensor
    scores: Tensor = None
    responsibilities: Tensor = None
    extras: dict = field(default_factory=dict)


def init_attention_params(config, rng):
    """Random parameters for ``config`` drawn from a numpy Generator."""
    d, dx, dv = config.head_dim, config.input_dim, config.value_dim
    m = config.n_components
    mixture = config.variant in MIXTURE_VARIANTS
    scale = 1.0 / math.sqrt(dx)

    def weight(rows, cols, s):
        return Tensor(rng.normal(0.0, s, size=(rows, cols)), requires_grad=True)

    heads = []
    for _ in range(config.n_heads):
        W_Q = weight(d, dx, scale)
        if config.key_mode == "independent" or not mixture:
            W_K = [weight(d, dx, scale) for _ in range(m)]
            b = None
        else:
            W_K = [weight(d, dx, scale)]
            b = [Tensor(rng.standard_normal(d), requires_grad=True) for _ in range(m)]
        W_V = weight(dv, dx, scale)
        pi = Tensor(np.full(m, 0.5), requires_grad=config.learns_pi) if mixture else None
        keys = MixtureKeyParams(config.key_mode if mixture else "independent", W_K, b, pi, config.sigma2)
        heads.append(ProjectionParams(W_Q, W_V, keys))
    W_O = weight(config.out_dim, config.n_heads * dv, 1.0 / math.sqrt(config.n_heads * dv))
    return AttentionParams(heads, W_O)


def causal_mask(n, n_keys=None):
    """Boolean mask admitting key ``j`` for query ``i`` iff ``j <= i``."""
    return np.tri(n, n if n_keys is None else n_keys, dtype=bool)


def _check_qkv(q, k, v):
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"queries and keys differ in feature size: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"keys and values differ in length: {k.shape} vs {v.shape}")


def _mask_for(q, k, causal):
    return causal_mask(q.shape[-2], k.shape[-2]) if causal else None


def make_keys(x, params):
    """Per-component key sets ``k_r`` of shape ``(..., N, D)``."""
    if params.mode == "independent":
        if params.b is not None or len(params.W_K) != params.n_components:
            raise ConfigurationError(
                f"independent keys need {params.n_components} projections and no offsets, "
                f"got {len(params.W_K)} projections"
            )
        return [x @ W.T for W in params.W_K]
    if params.mode == "shifted":
        if len(params.W_K) != 1 or params.b is None or len(params.b) != params.n_components:
            raise ConfigurationError(
                f"shifted keys need one projection and {params.n_components} offsets, "
                f"got {len(params.W_K)} projections and {0 if params.b is None else len(params.b)} offsets"
            )
        base = x @ params.W_K[0].T
        return [base + b for b in params.b]
    raise ConfigurationError(f"unknown key mode {params.mode!r}")


def softmax_attention(q, k, v, causal=False):
    """Scaled dot-product attention, ``softmax(q k^T / sqrt(D)) v``."""
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    _check_qkv(q, k, v)
    s = (q @ k.T) * (1.0 / math.sqrt(q.shape[-1]))
    a = T.softmax_rows(s, _mask_for(q, k, causal))
    return AttentionOutput(a @ v, a)


def gaussian_attention(q, k, v, sigma2, causal=False):
    """Attention with scores proportional to ``exp(-|q_i - k_j|^2 / 2 sigma2)``."""
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    _check_qkv(q, k, v)
    if not sigma2 > 0:
        raise ConfigurationError(f"sigma2 must be positive, got {sigma2}")
    s = T.pairwise_sqdist(q, k) * (-0.5 / sigma2)
    a = T.softmax_rows(s, _mask_for(q, k, causal))
    return AttentionOutput(a @ v, a)


def _check_mixture(keys, pi, sigma2):
    m = len(keys)
    if m == 0:
        raise ConfigurationError("mixture attention needs at least one key set")
    if len(sigma2) != m:
        raise ConfigurationError(f"sigma2 has {len(sigma2)} entries for {m} key sets")
    if any(not s > 0 for s in sigma2):
        raise ConfigurationError(f"sigma2 entries must be positive, got {tuple(sigma2)}")
    if pi is not None:
        if pi.shape != (m,):
            raise ConfigurationError(f"pi must have shape ({m},), got {pi.shape}")
        if np.any(pi.data < 0):
            raise ConfigurationError(f"mixing weights must be non-negative, got {pi.data}")


def mgk_attention(q, keys, v, pi, sigma2, estep="soft", kernel="gaussian", causal=False):
    """Mixture-of-Gaussian-keys attention.

    Soft inference scores key position ``j`` by ``sum_r pi_r K_r(q_i, k_jr)``
    and normalizes over ``j``; hard inference keeps only the best component
    per position and ignores ``pi``.  ``K_r`` is the Gaussian kernel
    ``exp(-|q - k|^2 / 2 sigma2_r)`` or, for ``kernel='dot'``,
    ``exp(q.k / sigma2_r)``.

    The soft scores are computed as one softmax over all ``(r, j)`` pairs
    followed by a sum over ``r``; the per-``r`` sums of that joint
    posterior give the responsibilities.
    """
    q, v = T._as_tensor(q), T._as_tensor(v)
    keys = [T._as_tensor(k) for k in keys]
    pi = None if pi is None else T._as_tensor(pi)
    _check_mixture(keys, pi if estep != "hard" else None, sigma2)
    if estep != "hard" and pi is None:
        raise ConfigurationError("soft inference needs mixing weights")
    for k in keys:
        _check_qkv(q, k, v)
    if kernel not in KERNELS:
        raise ConfigurationError(f"kernel must be one of {KERNELS}, got {kernel!r}")
    n_keys = keys[0].shape[-2]
    mask = _mask_for(q, keys[0], causal)

    logits = []
    for k, s2 in zip(keys, sigma2):
        if kernel == "gaussian":
            logits.append(T.pairwise_sqdist(q, k) * (-0.5 / s2))
        else:
            logits.append((q @ k.T) * (1.0 / s2))

    if estep == "hard":
        best = logits[0]
        for lg in logits[1:]:
            best = T.maximum(best, lg)
        a = T.softmax_rows(best, mask)
        return AttentionOutput(a @ v, a)

    log_pi = T.log(pi)
    joint = T.concat([lg + T.slice_axis(log_pi, r, r + 1) for r, lg in enumerate(logits)], axis=-1)
    joint_mask = None if mask is None else np.tile(mask, len(keys))
    posterior = T.softmax_rows(joint, joint_mask)
    blocks = [T.slice_axis(posterior, r * n_keys, (r + 1) * n_keys) for r in range(len(keys))]
    a = blocks[0]
    for blk in blocks[1:]:
        a = a + blk
    gamma = np.stack([blk.data.sum(axis=-1) for blk in blocks], axis=-1)
    return AttentionOutput(a @ v, a, Tensor(gamma))


def _linear_core(fq, fk, v, causal):
    if not causal:
        num = fq @ (fk.T @ v)
        den = fq @ T.tsum(fk, axis=-2, keepdims=True).T
    else:
        outer = T.reshape(fk, fk.shape + (1,)) * T.reshape(v, v.shape[:-1] + (1, v.shape[-1]))
        state = T.cumsum(outer, axis=-3)
        num = T.reshape(T.reshape(fq, fq.shape[:-1] + (1, fq.shape[-1])) @ state, fq.shape[:-1] + (v.shape[-1],))
        den = T.tsum(fq * T.cumsum(fk, axis=-2), axis=-1, keepdims=True)
    if np.any(den.data <= 0):
        raise DegenerateRowError("linear attention normalizer is not positive")
    return num / den


def _materialize(fq, fk, causal):
    s = np.matmul(fq.data, np.swapaxes(fk.data, -1, -2))
    if causal:
        s = np.where(causal_mask(s.shape[-2], s.shape[-1]), s, 0.0)
    return Tensor(s / s.sum(axis=-1, keepdims=True))


def linear_attention(q, k, v, causal=False, feature_map=T.feature_map, materialize=False):
    """Kernelized attention ``phi(q_i)^T S / phi(q_i)^T z`` in time linear in N.

    ``S = sum_j phi(k_j) v_j^T`` and ``z = sum_j phi(k_j)``, taken as prefix
    sums over ``j <= i`` when ``causal``.  With ``materialize`` the implied
    score matrix is also returned for diagnostics.
    """
    q, k, v = T._as_tensor(q), T._as_tensor(k), T._as_tensor(v)
    _check_qkv(q, k, v)
    fq, fk = feature_map(q), feature_map(k)
    out = _linear_core(fq, fk, v, causal)
    return AttentionOutput(out, _materialize(fq, fk, causal) if materialize else None)


def mlk_attention(q, keys, v, pi, causal=False, feature_map=T.feature_map, materialize=False):
    """Mixture-of-linear-keys attention.

    Each position's key features are the prior-weighted sum
    ``sum_r pi_r phi(k_jr)``, which then enters the linear attention
    numerator and normalizer.
    """
    q, v = T._as_tensor(q), T._as_tensor(v)
    keys = [T._as_tensor(k) for k in keys]
    pi = T._as_tensor(pi)
    _check_mixture(keys, pi, [1.0] * len(keys))
    for k in keys:
        _check_qkv(q, k, v)
    fq = feature_map(q)
    mixed = None
    for r, k in enumerate(keys):
        term = feature_map(k) * T.slice_axis(pi, r, r + 1)
        mixed = term if mixed is None else mixed + term
    out = _linear_core(fq, mixed, v, causal)
    return AttentionOutput(out, _materialize(fq, mixed, causal) if materialize else None)


def head_attention(x, head, config, materialize=False):
    """Run one head of ``config.variant`` on input ``x`` of shape ``(..., N, D_x)``."""
    q = x @ head.W_Q.T
    v = x @ head.W_V.T
    keys = make_keys(x, head.keys)
    variant, causal = config.variant, config.causal
    if variant == "softmax":
        return softmax_attention(q, keys[0], v, causal)
    if variant == "gaussian":
        return gaussian_attention(q, keys[0], v, config.sigma2[0], causal)
    if variant == "linear":
        return linear_attention(q, keys[0], v, causal, materialize=materialize)
    pi = head.keys.normalized_pi()
    if variant == "mlk":
        return mlk_attention(q, keys, v, pi, causal, materialize=materialize)
    estep = "hard" if config.estep == "hard" else "soft"
    return mgk_attention(q, keys, v, pi, config.sigma2, estep, config.kernel, causal)


def multi_head(x, params, config, return_heads=False, materialize=False):
    """Concatenate per-head outputs along features and apply ``W_O``.

    Returns the layer output of shape ``(..., N, out_dim)`` and, with
    ``return_heads``, the list of per-head :class:`AttentionOutput`.
    """
    x = T._as_tensor(x)
    if len(params.heads) != config.n_heads:
        raise ConfigurationError(f"config expects {config.n_heads} heads, parameters hold {len(params.heads)}")
    if x.shape[-1] != config.input_dim:
        raise DimensionError(f"input feature size {x.shape[-1]} does not match input_dim={config.input_dim}")
    heads = [head_attention(x, head, config, materialize) for head in params.heads]
    merged = heads[0].output if len(heads) == 1 else T.concat([h.output for h in heads], axis=-1)
    out = merged @ params.W_O.T
    return (out, heads) if return_heads else out
