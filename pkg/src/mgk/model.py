"""Small transformer classifier over token sequences.

Each block is attention, residual, layer norm, a ReLU feed-forward pair,
residual, layer norm.  Token and learned positional embeddings feed the
first block; the last block's states are pooled and sent through a
linear classifier.
"""

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError
from .kernels import MIXTURE_VARIANTS, AttentionConfig, init_attention_params, multi_head
from .tensor import Tensor

POOLINGS = ("mean", "query")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of the classifier.

    ``n_components`` defaults to 2 for mixture variants and 1 otherwise.
    Head dimension is ``embed_dim // n_heads``.  ``pooling='query'`` reads
    the state at ``query_position`` instead of averaging all positions.
    """

    variant: str = "softmax"
    n_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    n_heads: int = 1
    n_components: int = None
    kernel: str = "gaussian"
    estep: str = "soft_learned"
    key_mode: str = "independent"
    causal: bool = False
    sigma2: tuple = None
    n_tokens: int = 34
    n_classes: int = 16
    max_len: int = 64
    pooling: str = "mean"
    query_position: int = -1

    def __post_init__(self):
        if self.n_components is None:
            object.__setattr__(self, "n_components", 2 if self.variant in MIXTURE_VARIANTS else 1)
        if self.sigma2 is not None:
            object.__setattr__(self, "sigma2", tuple(float(s) for s in self.sigma2))
        for name in ("n_layers", "embed_dim", "ffn_dim", "n_heads", "n_tokens", "n_classes", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive, got {getattr(self, name)}")
        if self.embed_dim % self.n_heads:
            raise ConfigurationError(
                f"embed_dim={self.embed_dim} must be divisible by n_heads={self.n_heads} (width = heads * head_dim)"
            )
        if self.pooling not in POOLINGS:
            raise ConfigurationError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        self.attention_config()

    @property
    def head_dim(self):
        return self.embed_dim // self.n_heads

    def attention_config(self):
        return AttentionConfig(
            variant=self.variant,
            n_heads=self.n_heads,
            n_components=self.n_components,
            head_dim=self.head_dim,
            input_dim=self.embed_dim,
            kernel=self.kernel,
            estep=self.estep,
            key_mode=self.key_mode,
            causal=self.causal,
            sigma2=self.sigma2,
        )

    def to_dict(self):
        return asdict(self)


@dataclass
class Block:
    attn: object
    ln1_g: Tensor
    ln1_b: Tensor
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    ln2_g: Tensor
    ln2_b: Tensor


def _param(values):
    return Tensor(values, requires_grad=True)


class Network:
    """Parameters and forward pass of a :class:`ModelSpec` model."""

    def __init__(self, spec, rng):
        self.spec = spec
        self.config = spec.attention_config()
        e, f = spec.embed_dim, spec.ffn_dim
        self.tok = _param(rng.normal(0.0, 1.0, (spec.n_tokens, e)))
        self.pos = _param(rng.normal(0.0, 1.0, (spec.max_len, e)))
        self.blocks = []
        for _ in range(spec.n_layers):
            self.blocks.append(
                Block(
                    init_attention_params(self.config, rng),
                    _param(np.ones(e)),
                    _param(np.zeros(e)),
                    _param(rng.normal(0.0, 1.0 / math.sqrt(e), (f, e))),
                    _param(np.zeros(f)),
                    _param(rng.normal(0.0, 1.0 / math.sqrt(f), (e, f))),
                    _param(np.zeros(e)),
                    _param(np.ones(e)),
                    _param(np.zeros(e)),
                )
            )
        self.W_c = _param(rng.normal(0.0, 1.0 / math.sqrt(e), (spec.n_classes, e)))
        self.b_c = _param(np.zeros(spec.n_classes))

    def groups(self):
        """Trainable tensors keyed by group; attention groups span all layers."""
        groups = {"embedding": [self.tok, self.pos]}
        for blk in self.blocks:
            for name, ps in blk.attn.groups().items():
                groups.setdefault(name, []).extend(ps)
            groups.setdefault("ffn", []).extend([blk.W1, blk.b1, blk.W2, blk.b2])
            groups.setdefault("norm", []).extend([blk.ln1_g, blk.ln1_b, blk.ln2_g, blk.ln2_b])
        groups["classifier"] = [self.W_c, self.b_c]
        return groups

    def parameters(self):
        return [p for ps in self.groups().values() for p in ps]

    def mixture_weights(self):
        """The per-head prior tensors of every layer (empty for non-mixture variants)."""
        return [head.keys.pi for blk in self.blocks for head in blk.attn.heads if head.keys.pi is not None]

    def state_dict(self):
        return {f"{i}": p.numpy() for i, p in enumerate(self.all_tensors())}

    def load_state_dict(self, state):
        for i, p in enumerate(self.all_tensors()):
            p._assign(state[f"{i}"])

    def all_tensors(self):
        out = [self.tok, self.pos]
        for blk in self.blocks:
            out += blk.attn.tensors()
            out += [blk.ln1_g, blk.ln1_b, blk.W1, blk.b1, blk.W2, blk.b2, blk.ln2_g, blk.ln2_b]
        return out + [self.W_c, self.b_c]

    def forward(self, tokens, collect=False, materialize=False):
        """Class logits of shape ``(B, n_classes)`` for integer ``tokens`` ``(B, N)``.

        With ``collect``, also returns the per-layer list of per-head
        :class:`AttentionOutput`.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        n = tokens.shape[1]
        if n > self.spec.max_len:
            raise ConfigurationError(f"sequence length {n} exceeds max_len={self.spec.max_len}")
        x = T.embedding(self.tok, tokens) + T.slice_axis(self.pos, 0, n, axis=0)
        layers = []
        for blk in self.blocks:
            a, heads = multi_head(x, blk.attn, self.config, return_heads=True, materialize=materialize)
            layers.append(heads)
            x = T.layer_norm(x + a, blk.ln1_g, blk.ln1_b)
            h = T.relu(x @ blk.W1.T + blk.b1) @ blk.W2.T + blk.b2
            x = T.layer_norm(x + h, blk.ln2_g, blk.ln2_b)
        if self.spec.pooling == "mean":
            pooled = T.mean(x, axis=-2)
        else:
            pos = self.spec.query_position % n
            pooled = T.reshape(T.slice_axis(x, pos, pos + 1, axis=-2), (x.shape[0], x.shape[-1]))
        logits = pooled @ self.W_c.T + self.b_c
        return (logits, layers) if collect else logits

    def attention_scores(self, tokens):
        """Score matrices as ``[layer][head] -> array (B, N, N)``."""
        _, layers = self.forward(tokens, collect=True, materialize=True)
        return [[h.scores.data for h in heads] for heads in layers]
