"""Estimator wrappers so the attention layer and classifier compose with scikit-learn."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from ._validation import check_labels, check_sequences, check_tokens
from .kernels import MIXTURE_VARIANTS, AttentionConfig, init_attention_params, multi_head
from .model import ModelSpec, Network
from .rng import SplitMix64
from .training import OptimizerSpec, evaluate, train_network
from .tasks import Dataset


class MixtureKeyAttention(TransformerMixin, BaseEstimator):
    """One multi-head attention layer of any supported variant.

    ``fit`` only reads the input width and draws parameters from
    ``random_state``; ``transform`` applies the layer to sequences of shape
    ``(N, D_x)`` or ``(B, N, D_x)``.

    Parameters
    ----------
    variant : {'softmax', 'gaussian', 'mgk', 'linear', 'mlk'}, default='mgk'
    n_heads : int, default=1
    n_components : int, optional
        Keys per position; 2 for mixture variants, 1 otherwise.
    head_dim : int, optional
        Defaults to ``D_x // n_heads``.
    kernel, estep, key_mode, causal, sigma2
        See :class:`~mgk.kernels.AttentionConfig`.
    random_state : int, default=0
    """

    def __init__(
        self,
        variant="mgk",
        n_heads=1,
        n_components=None,
        head_dim=None,
        kernel="gaussian",
        estep="soft_learned",
        key_mode="independent",
        causal=False,
        sigma2=None,
        random_state=0,
    ):
        self.variant = variant
        self.n_heads = n_heads
        self.n_components = n_components
        self.head_dim = head_dim
        self.kernel = kernel
        self.estep = estep
        self.key_mode = key_mode
        self.causal = causal
        self.sigma2 = sigma2
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_sequences(X)
        d_x = X.shape[-1]
        m = self.n_components or (2 if self.variant in MIXTURE_VARIANTS else 1)
        self.config_ = AttentionConfig(
            variant=self.variant,
            n_heads=self.n_heads,
            n_components=m,
            head_dim=self.head_dim or max(1, d_x // self.n_heads),
            input_dim=d_x,
            kernel=self.kernel,
            estep=self.estep,
            key_mode=self.key_mode,
            causal=self.causal,
            sigma2=self.sigma2,
        )
        self.params_ = init_attention_params(self.config_, SplitMix64(self.random_state).numpy_generator())
        self.n_features_in_ = d_x
        return self

    def transform(self, X):
        check_is_fitted(self)
        X = check_sequences(X, self.n_features_in_)
        return multi_head(T.Tensor(X), self.params_, self.config_).numpy()

    def attention(self, X):
        """Per-head :class:`~mgk.kernels.AttentionOutput` (scores materialized for linear variants)."""
        check_is_fitted(self)
        X = check_sequences(X, self.n_features_in_)
        _, heads = multi_head(T.Tensor(X), self.params_, self.config_, return_heads=True, materialize=True)
        return heads


class MGKClassifier(ClassifierMixin, BaseEstimator):
    """Transformer sequence classifier with a selectable attention variant.

    ``X`` is an integer token matrix ``(n_samples, N)``.  Training uses Adam
    on mean cross-entropy for a fixed number of epochs and is fully
    determined by ``random_state``.
    """

    def __init__(
        self,
        variant="mgk",
        n_heads=1,
        n_components=None,
        n_layers=2,
        embed_dim=64,
        ffn_dim=128,
        kernel="gaussian",
        estep="soft_learned",
        key_mode="independent",
        causal=False,
        sigma2=None,
        pooling="mean",
        n_tokens=None,
        epochs=10,
        lr=1e-3,
        batch_size=32,
        warmup_steps=0,
        random_state=0,
    ):
        self.variant = variant
        self.n_heads = n_heads
        self.n_components = n_components
        self.n_layers = n_layers
        self.embed_dim = embed_dim
        self.ffn_dim = ffn_dim
        self.kernel = kernel
        self.estep = estep
        self.key_mode = key_mode
        self.causal = causal
        self.sigma2 = sigma2
        self.pooling = pooling
        self.n_tokens = n_tokens
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.random_state = random_state

    def _model_spec(self, n_tokens, n_classes, seq_len):
        return ModelSpec(
            variant=self.variant,
            n_layers=self.n_layers,
            embed_dim=self.embed_dim,
            ffn_dim=self.ffn_dim,
            n_heads=self.n_heads,
            n_components=self.n_components,
            kernel=self.kernel,
            estep=self.estep,
            key_mode=self.key_mode,
            causal=self.causal,
            sigma2=self.sigma2,
            n_tokens=n_tokens,
            n_classes=n_classes,
            max_len=seq_len,
            pooling=self.pooling,
        )

    def fit(self, X, y):
        X = check_tokens(X, self.n_tokens)
        y = check_labels(y, X.shape[0])
        self.classes_, encoded = np.unique(y, return_inverse=True)
        n_tokens = self.n_tokens or int(X.max()) + 1
        spec = self._model_spec(n_tokens, len(self.classes_), X.shape[1])
        seeds = SplitMix64(self.random_state)
        self.network_ = Network(spec, seeds.numpy_generator())
        opt = OptimizerSpec(lr=self.lr, batch_size=self.batch_size, warmup_steps=self.warmup_steps)
        self.loss_curve_, self.accuracy_curve_ = train_network(
            self.network_, Dataset(X, encoded), self.epochs, opt, seeds.next_u64()
        )
        self.n_features_in_ = X.shape[1]
        self.n_tokens_ = n_tokens
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_tokens(X, self.n_tokens_, self.n_features_in_)
        return np.vstack([self.network_.forward(X[i : i + 256]).data for i in range(0, X.shape[0], 256)])

    def predict_proba(self, X):
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def evaluate(self, X, y):
        """``(accuracy, mean cross-entropy)`` on labelled data."""
        check_is_fitted(self)
        X = check_tokens(X, self.n_tokens_, self.n_features_in_)
        y = check_labels(y, X.shape[0])
        index = {c: i for i, c in enumerate(self.classes_)}
        encoded = np.array([index[v] for v in y], dtype=np.int64)
        return evaluate(self.network_, Dataset(X, encoded))
