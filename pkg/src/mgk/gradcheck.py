"""Central finite-difference verification of tape gradients."""

import numpy as np

from .tensor import Tape, backward

EPS = 1e-4
ABS_FLOOR = 1e-6
# probe batches are redrawn until every kink is this many eps away
KINK_MARGIN = 10.0
MAX_REDRAWS = 100


def numerical_gradient(loss_fn, param, eps=EPS):
    """Central differences of ``loss_fn()`` with respect to every entry of ``param``."""
    base = param.numpy()
    grad = np.zeros_like(base)
    flat = base.reshape(-1)
    out = grad.reshape(-1)
    try:
        for idx in range(flat.size):
            orig = flat[idx]
            flat[idx] = orig + eps
            param._assign(base)
            up = loss_fn().item()
            flat[idx] = orig - eps
            param._assign(base)
            down = loss_fn().item()
            flat[idx] = orig
            out[idx] = (up - down) / (2 * eps)
    finally:
        param._assign(base)
    return grad


def relative_error(analytic, numeric, floor=ABS_FLOOR):
    """max |a - n| / max(|n|, floor) over entries."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(np.abs(numeric), floor)))


def check_gradients(loss_fn, groups, eps=EPS):
    """Compare tape gradients with finite differences, per parameter group.

    Parameters
    ----------
    loss_fn : callable
        Zero-argument function returning a scalar Tensor built from the
        parameters in ``groups``.
    groups : dict of str to list of Tensor
        Named parameter groups, e.g. ``{"W_Q": [...], "pi": [...]}``.

    Returns
    -------
    dict of str to float
        Maximum relative error per group.
    """
    params = [p for ps in groups.values() for p in ps]
    with Tape():
        loss = loss_fn()
        grads = backward(loss, wrt=params)
    report = {}
    for name, ps in groups.items():
        errs = [relative_error(grads[p], numerical_gradient(loss_fn, p, eps)) for p in ps]
        report[name] = max(errs) if errs else 0.0
    return report


GRADCHECK_VARIANTS = (
    {"variant": "softmax", "n_heads": 2},
    {"variant": "gaussian", "n_heads": 2},
    {"variant": "mgk"},
    {"variant": "mgk", "kernel": "dot"},
    {"variant": "mgk", "key_mode": "shifted"},
    {"variant": "mgk", "estep": "soft_mstep"},
    {"variant": "mgk", "estep": "hard"},
    {"variant": "mgk", "causal": True, "n_components": 3},
    {"variant": "linear", "n_heads": 2},
    {"variant": "linear", "causal": True},
    {"variant": "mlk"},
    {"variant": "mlk", "key_mode": "shifted", "causal": True},
)


def model_gradient_check(seed=0, width=8, seq_len=5, batch=3, n_tokens=7, n_classes=3, eps=EPS, **model):
    """Finite-difference check of every parameter group of a small classifier.

    ``model`` holds :class:`~mgk.model.ModelSpec` overrides (variant, heads,
    key mode, ...).  Returns the maximum relative error per group.
    """
    from .model import ModelSpec, Network
    from .rng import SplitMix64
    from .tensor import cross_entropy

    fields = {"n_layers": 1, "embed_dim": width, "ffn_dim": width, "max_len": seq_len}
    fields.update(model)
    spec = ModelSpec(n_tokens=n_tokens, n_classes=n_classes, **fields)
    stream = SplitMix64(seed)
    net = Network(spec, stream.numpy_generator())
    data = stream.numpy_generator()
    for pi in net.mixture_weights():
        pi._assign(data.dirichlet(np.ones(pi.size)))
    for _ in range(MAX_REDRAWS):
        tokens = data.integers(0, n_tokens, size=(batch, seq_len))
        labels = data.integers(0, n_classes, size=batch)
        with Tape() as tape:
            cross_entropy(net.forward(tokens), labels)
        if kink_distance(tape) > KINK_MARGIN * eps:
            break

    def loss():
        return cross_entropy(net.forward(tokens), labels)

    return check_gradients(loss, net.groups(), eps)


def kink_distance(tape):
    """Smallest distance of any recorded ReLU input or max pair from its kink.

    Central differences straddling a kink measure a blend of the two
    one-sided slopes, so probes closer than a few ``eps`` are meaningless.
    """
    dist = np.inf
    for node in tape.nodes:
        if node.op == "relu":
            dist = min(dist, float(np.min(np.abs(node.parents[0].data), initial=np.inf)))
        elif node.op == "maximum":
            a, b = node.parents
            dist = min(dist, float(np.min(np.abs(a.data - b.data), initial=np.inf)))
    return dist
