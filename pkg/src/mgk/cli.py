"""Config-driven experiment runner.

Usage::

    mgk run --config experiment.json [--out DIR] [--seed U64]
    mgk run experiment.json

The config is one flat JSON object; see :data:`FIELDS` for every accepted
key.  ``command`` and ``seed`` are required, unknown keys are rejected.
Exit status is 0 on success, 1 for an invalid config and 2 when the
experiment itself fails.  Every JSON report has the shape
``{"payload": ..., "metadata": {...}}``; only ``metadata`` carries timing,
so reruns with the same config and seed give identical payloads.
"""

import argparse
import csv
import io
import json
import os
import re
import sys
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import complexity, diagnostics
from .equivalence import equivalence_suite
from .exceptions import ConfigurationError, DomainError, MGKError
from .gradcheck import GRADCHECK_VARIANTS, model_gradient_check
from .model import ModelSpec, Network
from .rng import SplitMix64
from .tasks import KINDS, TaskSpec, generate_task
from .training import PRESETS, OptimizerSpec, train

COMMANDS = ("train", "sweep-complexity", "diagnose", "gradcheck", "equivalence")
GRADCHECK_TOL = 1e-4
_U64 = (1 << 64) - 1

EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 1, 2


@dataclass
class ExperimentConfig:
    command: str
    seed: int
    out: str = "out"
    # model
    variant: str = "mgk"
    n_layers: int = 2
    embed_dim: int = 64
    ffn_dim: int = 128
    n_heads: int = 1
    n_components: int = None
    kernel: str = "gaussian"
    estep: str = "soft_learned"
    key_mode: str = "independent"
    causal: bool = False
    sigma2: list = None
    pooling: str = "mean"
    # task
    task: str = "associative_recall"
    vocab: int = 16
    seq_len: int = 64
    n_train: int = 2000
    n_test: int = 500
    # optimization
    epochs: int = 30
    preset: str = None
    lr: float = None
    batch_size: int = 32
    warmup_steps: int = None
    # diagnose
    rank_samples: int = diagnostics.DEFAULT_SAMPLE_COUNT
    rank_threshold: float = diagnostics.RANK_THRESHOLD
    # sweep-complexity
    sweep_N: list = (64, 128, 256, 512, 1024, 2048, 4096)
    sweep_D: list = (16, 32, 64, 128)
    sweep_H: int = 8
    sweep_D_x: int = None
    sweep_M: int = 2
    instrument: bool = False
    # gradcheck
    gradcheck_width: int = 8
    # equivalence
    sigma_scale: float = 1.0


# field -> (accepted python types, optional choices)
_INT, _NUM, _BOOL, _STR, _LIST = (int,), (int, float), (bool,), (str,), (list,)
FIELDS = {
    "command": (_STR, COMMANDS),
    "seed": (_INT, None),
    "out": (_STR, None),
    "variant": (_STR, None),
    "n_layers": (_INT, None),
    "embed_dim": (_INT, None),
    "ffn_dim": (_INT, None),
    "n_heads": (_INT, None),
    "n_components": (_INT, None),
    "kernel": (_STR, None),
    "estep": (_STR, None),
    "key_mode": (_STR, None),
    "causal": (_BOOL, None),
    "sigma2": (_LIST, None),
    "pooling": (_STR, None),
    "task": (_STR, KINDS),
    "vocab": (_INT, None),
    "seq_len": (_INT, None),
    "n_train": (_INT, None),
    "n_test": (_INT, None),
    "epochs": (_INT, None),
    "preset": (_STR, tuple(PRESETS)),
    "lr": (_NUM, None),
    "batch_size": (_INT, None),
    "warmup_steps": (_INT, None),
    "rank_samples": (_INT, None),
    "rank_threshold": (_NUM, None),
    "sweep_N": (_LIST, None),
    "sweep_D": (_LIST, None),
    "sweep_H": (_INT, None),
    "sweep_D_x": (_INT, None),
    "sweep_M": (_INT, None),
    "instrument": (_BOOL, None),
    "gradcheck_width": (_INT, None),
    "sigma_scale": (_NUM, None),
}
REQUIRED = ("command", "seed")


class ConfigError(Exception):
    """Invalid config; the message already carries file, line and field."""


def _line_of(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else 1


def _type_ok(value, types):
    if value is None:
        return True
    if isinstance(value, bool) and bool not in types:
        return False
    return isinstance(value, types)


def parse_config(text, source="<config>", seed=None, out=None, base_dir="."):
    """Validate a JSON config and return an :class:`ExperimentConfig`.

    ``seed`` and ``out`` override the file; relative ``out`` paths are
    resolved against ``base_dir``.  Raises :class:`ConfigError`.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: malformed JSON: {exc.msg}") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{source}:1: config must be a JSON object")
    if seed is not None:
        raw["seed"] = seed
    for key, value in raw.items():
        where = f"{source}:{_line_of(text, key)}"
        if key not in FIELDS:
            raise ConfigError(f"{where}: unknown field '{key}'")
        types, choices = FIELDS[key]
        if not _type_ok(value, types):
            raise ConfigError(f"{where}: field '{key}' expects {'/'.join(t.__name__ for t in types)}, got {value!r}")
        if choices and value is not None and value not in choices:
            raise ConfigError(f"{where}: field '{key}' must be one of {list(choices)}, got {value!r}")
    for key in REQUIRED:
        if raw.get(key) is None:
            raise ConfigError(f"{source}: missing required field '{key}'")
    if not 0 <= raw["seed"] <= _U64:
        raise ConfigError(f"{source}:{_line_of(text, 'seed')}: field 'seed' must be an unsigned 64-bit integer")
    if out is not None:
        raw["out"] = out
    raw["out"] = os.path.abspath(os.path.join(base_dir, raw.get("out", ExperimentConfig.out)))
    cfg = ExperimentConfig(**raw)
    try:
        build_specs(cfg)
    except (ConfigurationError, DomainError) as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return cfg


def build_specs(cfg):
    """The (ModelSpec, TaskSpec, OptimizerSpec) a config describes."""
    task = TaskSpec(cfg.task, cfg.vocab, cfg.seq_len, cfg.n_train, cfg.n_test, cfg.seed)
    model = ModelSpec(
        variant=cfg.variant,
        n_layers=cfg.n_layers,
        embed_dim=cfg.embed_dim,
        ffn_dim=cfg.ffn_dim,
        n_heads=cfg.n_heads,
        n_components=cfg.n_components,
        kernel=cfg.kernel,
        estep=cfg.estep,
        key_mode=cfg.key_mode,
        causal=cfg.causal,
        sigma2=cfg.sigma2,
        n_tokens=task.n_tokens,
        n_classes=task.n_classes,
        max_len=task.seq_len,
        pooling=cfg.pooling,
    )
    base = asdict(PRESETS[cfg.preset]) if cfg.preset else asdict(OptimizerSpec())
    base["batch_size"] = cfg.batch_size
    if cfg.lr is not None:
        base["lr"] = cfg.lr
    if cfg.warmup_steps is not None:
        base["warmup_steps"] = cfg.warmup_steps
    if cfg.epochs < 0:
        raise ConfigurationError(f"epochs must be non-negative, got {cfg.epochs}")
    if cfg.command == "sweep-complexity":
        for name in ("sweep_N", "sweep_D"):
            values = getattr(cfg, name)
            if not values or not all(isinstance(v, int) and not isinstance(v, bool) and v > 0 for v in values):
                raise ConfigurationError(f"{name} must be a non-empty list of positive integers")
    return model, task, OptimizerSpec(**base)


def _dumps(obj):
    return json.dumps(obj, indent=2, sort_keys=True)


def write_report(path, payload, **metadata):
    with open(path, "w") as fh:
        fh.write(_dumps({"payload": payload, "metadata": metadata}) + "\n")
    return path


def _fmt(x):
    return format(float(x), ".17g")


def run_train(cfg, out):
    model, task, opt = build_specs(cfg)
    report, _, (train_set, test_set) = train(model, task, cfg.epochs, opt, cfg.seed)
    written = [write_report(os.path.join(out, "train_report.json"), report.payload(), wall_time_s=report.wall_time)]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "loss", "accuracy"])
    for i, (loss, acc) in enumerate(zip(report.epoch_loss, report.epoch_accuracy)):
        writer.writerow([i + 1, _fmt(loss), _fmt(acc)])
    for name, text in (("metrics.csv", buf.getvalue()), ("train_tokens.csv", train_set.to_csv()), ("test_tokens.csv", test_set.to_csv())):
        with open(os.path.join(out, name), "w") as fh:
            fh.write(text)
        written.append(os.path.join(out, name))
    return written


def run_sweep(cfg, out):
    start = time.perf_counter()
    reports = complexity.ratio_sweep(cfg.sweep_N, cfg.sweep_D, cfg.sweep_H, cfg.sweep_D_x, cfg.sweep_M, cfg.instrument)
    csv_path = os.path.join(out, "complexity.csv")
    with open(csv_path, "w") as fh:
        fh.write(complexity.to_csv(reports))
    rows = []
    for r in reports:
        row = r.as_row()
        row["mgk_flops_grouped"] = str(r.mgk_flops_grouped)
        rows.append(row)
    return [csv_path, write_report(os.path.join(out, "complexity.json"), rows, wall_time_s=time.perf_counter() - start)]


def run_diagnose(cfg, out):
    model, task, opt = build_specs(cfg)
    start = time.perf_counter()
    if cfg.epochs:
        report, network, (_, test_set) = train(model, task, cfg.epochs, opt, cfg.seed)
    else:
        stream = SplitMix64(cfg.seed)
        network = Network(model, stream.numpy_generator())
        test_set = generate_task(task)[1]
    if len(test_set) == 0:
        raise ConfigurationError("diagnose needs n_test > 0")
    hists = diagnostics.rank_distribution(network, test_set.tokens, cfg.rank_samples, cfg.rank_threshold, cfg.seed)
    layers = network.attention_scores(test_set.tokens[:1])
    similarity = {}
    for layer, heads in enumerate(layers):
        if len(heads) >= 2:
            sim = diagnostics.head_similarity([h[0] for h in heads])
            similarity[str(layer)] = [[_fmt(v) for v in row] for row in sim]
    _, outputs = network.forward(test_set.tokens[:1], collect=True, materialize=True)
    written = []
    for layer, heads in enumerate(outputs):
        written += diagnostics.dump_attention(heads, os.path.join(out, "attention"), prefix=f"layer{layer}")
    payload = {
        "histograms": [h.to_dict() for h in hists],
        "mean_rank": {f"{h.layer}/{h.head}": _fmt(np.mean(h.ranks)) for h in hists},
        "head_similarity": similarity,
        "model": model.to_dict(),
        "epochs": cfg.epochs,
    }
    written.append(write_report(os.path.join(out, "rank_report.json"), payload, wall_time_s=time.perf_counter() - start))
    return written


def run_gradcheck(cfg, out):
    start = time.perf_counter()
    checks = []
    for i, overrides in enumerate(GRADCHECK_VARIANTS):
        errors = model_gradient_check(seed=(cfg.seed + i) & _U64, width=cfg.gradcheck_width, **overrides)
        checks.append(
            {
                "model": dict(overrides),
                "max_relative_error": {k: _fmt(v) for k, v in errors.items()},
                "passed": all(v < GRADCHECK_TOL for v in errors.values()),
            }
        )
    payload = {"tolerance": _fmt(GRADCHECK_TOL), "checks": checks, "passed": all(c["passed"] for c in checks)}
    return [write_report(os.path.join(out, "gradcheck.json"), payload, wall_time_s=time.perf_counter() - start)]


def run_equivalence(cfg, out):
    start = time.perf_counter()
    results = equivalence_suite(cfg.sigma_scale, cfg.seed)
    payload = {
        "sigma_scale": _fmt(cfg.sigma_scale),
        "checks": [r.to_dict() for r in results],
        "passed": all(r.passed for r in results),
    }
    return [write_report(os.path.join(out, "equivalence.json"), payload, wall_time_s=time.perf_counter() - start)]


RUNNERS = {
    "train": run_train,
    "sweep-complexity": run_sweep,
    "diagnose": run_diagnose,
    "gradcheck": run_gradcheck,
    "equivalence": run_equivalence,
}


def run(config_path, out=None, seed=None, stdout=None, stderr=None):
    """Execute one experiment; returns the exit status."""
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    try:
        with open(config_path) as fh:
            text = fh.read()
    except OSError as exc:
        print(f"error: cannot read config {config_path}: {exc.strerror}", file=stderr)
        return EXIT_INVALID
    try:
        cfg = parse_config(text, config_path, seed, out, os.path.dirname(os.path.abspath(config_path)))
    except ConfigError as exc:
        print(f"error: {exc}", file=stderr)
        return EXIT_INVALID
    try:
        os.makedirs(cfg.out, exist_ok=True)
        written = RUNNERS[cfg.command](cfg, cfg.out)
    except (MGKError, OSError, ArithmeticError) as exc:
        print(f"error: {cfg.command} failed: {exc}", file=stderr)
        return EXIT_FAILED
    for path in written:
        print(path, file=stdout)
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def main(argv=None):
    parser = _Parser(prog="mgk", description="Run attention experiments from a JSON config.")
    sub = parser.add_subparsers(dest="action", required=True, parser_class=_Parser)
    p = sub.add_parser("run", help="run the experiment described by a config file")
    p.add_argument("config_file", nargs="?", help="path to the JSON config")
    p.add_argument("--config", dest="config_flag", help="path to the JSON config")
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--seed", type=int, help="unsigned 64-bit seed (overrides the config)")
    args = parser.parse_args(argv)
    path = args.config_flag or args.config_file
    if path is None:
        parser.print_usage(sys.stderr)
        print("error: a config path is required", file=sys.stderr)
        return EXIT_INVALID
    return run(path, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
