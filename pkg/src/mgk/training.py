"""Deterministic train / evaluate loops for :class:`~mgk.model.Network`."""

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .exceptions import ConfigurationError, EmptyInputError, TrainingFailure
from .model import Network
from .rng import SplitMix64
from .tasks import generate_task

PI_FLOOR = 1e-6


@dataclass(frozen=True)
class OptimizerSpec:
    """Adam settings.  ``warmup_steps`` ramps the rate linearly from zero."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    warmup_steps: int = 0
    batch_size: int = 32

    def __post_init__(self):
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ConfigurationError(f"learning rate must be finite and non-negative, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be positive, got {self.batch_size}")


PRESETS = {
    "desk": OptimizerSpec(),
    "warmup": OptimizerSpec(lr=2.5e-4, warmup_steps=2000),
}


class Adam:
    def __init__(self, params, spec):
        self.params = list(params)
        self.spec = spec
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def rate(self):
        s = self.spec
        if s.warmup_steps:
            return s.lr * min(1.0, self.t / s.warmup_steps)
        return s.lr

    def step(self, grads):
        self.t += 1
        s = self.spec
        lr = self.rate()
        c1 = 1.0 - s.beta1**self.t
        c2 = 1.0 - s.beta2**self.t
        for i, p in enumerate(self.params):
            g = grads[p]
            self.m[i] = s.beta1 * self.m[i] + (1.0 - s.beta1) * g
            self.v[i] = s.beta2 * self.v[i] + (1.0 - s.beta2) * g * g
            if lr:
                p._assign(p.data - lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + s.eps))


@dataclass
class TrainReport:
    epoch_loss: list
    epoch_accuracy: list
    initial_loss: float
    final_train_loss: float
    final_train_accuracy: float
    test_loss: float
    test_accuracy: float
    seed: int
    config: dict
    wall_time: float = field(default=0.0, compare=False)

    def payload(self):
        """Everything except wall-clock timing."""
        out = asdict(self)
        out.pop("wall_time")
        return out

    def to_json(self):
        return json.dumps({"payload": self.payload(), "metadata": {"wall_time_s": self.wall_time}}, indent=2, sort_keys=True)


def _batches(n, size, rng=None):
    order = np.arange(n) if rng is None else rng.permutation(n)
    return [order[i : i + size] for i in range(0, n, size)]


def evaluate(network, dataset, batch_size=256):
    """Top-1 accuracy and mean cross-entropy; no parameter is touched."""
    n = len(dataset)
    if n == 0:
        raise EmptyInputError("cannot evaluate on an empty dataset")
    total_loss = 0.0
    correct = 0
    for idx in _batches(n, batch_size):
        logits = network.forward(dataset.tokens[idx])
        labels = dataset.labels[idx]
        total_loss += T.cross_entropy(logits, labels).item() * idx.size
        correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
    return correct / n, total_loss / n


def _mstep_update(network, layers):
    heads = [h for heads in layers for h in heads]
    for pi, out in zip(network.mixture_weights(), heads):
        gamma = out.responsibilities.data
        new = gamma.reshape(-1, gamma.shape[-1]).mean(axis=0)
        pi._assign(new / new.sum())


def train_network(network, train_set, epochs, optimizer=None, seed=0):
    """Fit ``network`` in place; returns per-epoch (loss, accuracy) lists.

    In ``soft_mstep`` mode the priors are not trained by gradient; after
    every step they are replaced by the mean responsibilities of that
    step's batch.  Learned priors are clipped to stay positive.
    """
    optimizer = optimizer or OptimizerSpec()
    if len(train_set) == 0:
        raise EmptyInputError("cannot train on an empty dataset")
    params = network.parameters()
    adam = Adam(params, optimizer)
    rng = SplitMix64(seed).numpy_generator()
    mstep = network.config.variant in ("mgk", "mlk") and network.config.estep == "soft_mstep"
    learned_pi = [p for p in network.mixture_weights() if p.requires_grad]
    epoch_loss, epoch_acc = [], []
    last_good = network.state_dict()
    for epoch in range(epochs):
        total, correct = 0.0, 0
        for idx in _batches(len(train_set), optimizer.batch_size, rng):
            labels = train_set.labels[idx]
            with T.Tape():
                logits, layers = network.forward(train_set.tokens[idx], collect=True)
                loss = T.cross_entropy(logits, labels)
                grads = T.backward(loss, wrt=params)
            value = loss.item()
            if not math.isfinite(value):
                network.load_state_dict(last_good)
                raise TrainingFailure(f"loss became {value} in epoch {epoch}", state=last_good, epoch=epoch)
            total += value * idx.size
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels))
            adam.step(grads)
            for pi in learned_pi:
                pi._assign(np.maximum(pi.data, PI_FLOOR))
            if mstep:
                _mstep_update(network, layers)
            if not all(np.all(np.isfinite(p.data)) for p in params):
                network.load_state_dict(last_good)
                raise TrainingFailure(f"parameters became non-finite in epoch {epoch}", state=last_good, epoch=epoch)
        last_good = network.state_dict()
        epoch_loss.append(total / len(train_set))
        epoch_acc.append(correct / len(train_set))
    return epoch_loss, epoch_acc


def train(model_spec, task_spec, epochs, optimizer=None, seed=None):
    """Generate the task, build the model, train it and report.

    ``seed`` drives initialization and shuffling; it defaults to the task
    seed.  Returns ``(report, network, (train_set, test_set))``.
    """
    optimizer = optimizer or OptimizerSpec()
    seed = task_spec.seed if seed is None else int(seed)
    if model_spec.n_tokens < task_spec.n_tokens or model_spec.n_classes != task_spec.n_classes:
        raise ConfigurationError(
            f"model expects {model_spec.n_tokens} tokens / {model_spec.n_classes} classes, "
            f"task produces {task_spec.n_tokens} / {task_spec.n_classes}"
        )
    if model_spec.max_len < task_spec.seq_len:
        raise ConfigurationError(f"max_len={model_spec.max_len} is shorter than seq_len={task_spec.seq_len}")
    start = time.perf_counter()
    train_set, test_set = generate_task(task_spec)
    init = SplitMix64(seed)
    network = Network(model_spec, init.numpy_generator())
    _, initial_loss = evaluate(network, train_set)
    epoch_loss, epoch_acc = train_network(network, train_set, epochs, optimizer, init.next_u64())
    train_acc, train_loss = evaluate(network, train_set)
    test_acc, test_loss = evaluate(network, test_set) if len(test_set) else (float("nan"), float("nan"))
    report = TrainReport(
        epoch_loss,
        epoch_acc,
        initial_loss,
        train_loss,
        train_acc,
        test_loss,
        test_acc,
        seed,
        {
            "model": model_spec.to_dict(),
            "task": asdict(task_spec),
            "optimizer": asdict(optimizer),
            "epochs": epochs,
            "prior_update": "per_step" if model_spec.estep == "soft_mstep" else "gradient",
        },
        time.perf_counter() - start,
    )
    return report, network, (train_set, test_set)
