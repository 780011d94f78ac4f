"""Closed-form and instrumented operation counts for softmax vs. mixture-key attention.

Conventions: one multiply-add is a multiplication plus an addition;
exponentials, divisions and the softmax normalization are not counted.
The mixture layer is compared at ``H / M`` heads against ``H`` softmax
heads, both projecting back to width ``H * D`` (option-A keys, ``D_v = D``).

Two forms of the mixture FLOP count exist.  :func:`mgk_flops` evaluates the
per-component expression term by term and is what the instrumented
counter reproduces.  :func:`mgk_flops_grouped` evaluates the grouped closed
form whose linear-in-N coefficient is ``(3M + 2) / M``; expanding the
per-component expression gives ``(2M + 3) / M`` instead, so the two differ
by ``N H D (M - 1) / M``.
"""

import csv
import io
from dataclasses import asdict, dataclass
from fractions import Fraction

import numpy as np

from .exceptions import DomainError
from .kernels import AttentionConfig, init_attention_params, multi_head
from .tensor import Tensor, count_flops

CSV_COLUMNS = (
    "N",
    "H",
    "D",
    "D_x",
    "M",
    "softmax_flops",
    "mgk_flops",
    "mgk_flops_grouped",
    "softmax_params",
    "mgk_params",
    "flops_ratio",
    "params_ratio",
    "instrumented_flops",
)


def _positive(**kwargs):
    for name, value in kwargs.items():
        if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
            raise DomainError(f"{name} must be a positive integer, got {value!r}")


def _divisible(H, M):
    if H % M:
        raise DomainError(f"H={H} must be a multiple of M={M}")


def softmax_flops(N, H, D, D_x):
    _positive(N=N, H=H, D=D, D_x=D_x)
    return N * N * H * (4 * D - 1) + N * H * D * (6 * D_x + 2 * H * D - 5)


def mgk_flops(N, H, D, D_x, M):
    """Per-component count for ``H / M`` mixture heads with ``M`` keys each."""
    _positive(N=N, H=H, D=D, D_x=D_x, M=M)
    _divisible(H, M)
    heads = H // M
    per_head = N * N * ((2 * M + 2) * D - 1) + N * D * ((M + 2) * (2 * D_x - 1) - 1)
    return heads * per_head + N * H * D * (2 * heads * D - 1)


def mgk_flops_grouped(N, H, D, D_x, M=2):
    """Grouped closed form; exact rational, an int whenever it is integral."""
    _positive(N=N, H=H, D=D, D_x=D_x, M=M)
    _divisible(H, M)
    quad = Fraction(2 * (M + 1) * D - 1, M)
    lin = Fraction(2 * (M + 2) * D_x, M) + Fraction(2 * H * D, M) - Fraction(3 * M + 2, M)
    value = N * N * H * quad + N * H * D * lin
    return int(value) if value.denominator == 1 else value


def grouping_discrepancy(N, H, D, D_x, M=2):
    """``mgk_flops - mgk_flops_grouped``; equals ``N H D (M - 1) / M``."""
    value = mgk_flops(N, H, D, D_x, M) - Fraction(mgk_flops_grouped(N, H, D, D_x, M))
    return int(value) if value.denominator == 1 else value


def softmax_params(H, D, D_x):
    _positive(H=H, D=D, D_x=D_x)
    return 3 * H * D * D_x + (H * D) ** 2


def mgk_params(H, D, D_x, M=2):
    """Parameters of ``H / M`` heads with ``M`` key projections and ``M`` priors per head."""
    _positive(H=H, D=D, D_x=D_x, M=M)
    if M == 2 and H % 2:
        raise DomainError(f"H={H} must be even")
    _divisible(H, M)
    heads = H // M
    return 2 * heads * D * D_x + H * D * D_x + heads * D * H * D + H


def mgk_config(H, D, D_x, M=2):
    """Attention layer matching the cost model: ``H / M`` heads projecting to ``H * D``."""
    _divisible(H, M)
    return AttentionConfig(
        variant="mgk", n_heads=H // M, n_components=M, head_dim=D, input_dim=D_x, out_dim=H * D
    )


def softmax_config(H, D, D_x):
    return AttentionConfig(variant="softmax", n_heads=H, head_dim=D, input_dim=D_x)


def instrumented_count(config, N, seed=0):
    """Run one forward pass of ``config`` on ``N`` tokens and count the arithmetic."""
    rng = np.random.default_rng(seed)
    params = init_attention_params(config, rng)
    x = Tensor(rng.standard_normal((N, config.input_dim)))
    with count_flops() as counter:
        multi_head(x, params, config)
    return counter.total


def count_parameters(params):
    """Number of scalars in an attention layer's parameters."""
    return int(sum(t.size for t in params.tensors()))


@dataclass
class ComplexityReport:
    N: int
    H: int
    D: int
    D_x: int
    M: int
    softmax_flops: int
    mgk_flops: int
    mgk_flops_grouped: object
    softmax_params: int
    mgk_params: int
    flops_ratio: float
    params_ratio: float
    instrumented_flops: int = None

    def as_row(self):
        row = asdict(self)
        grouped = row["mgk_flops_grouped"]
        row["mgk_flops_grouped"] = grouped if isinstance(grouped, int) else float(grouped)
        return row


def complexity_report(N, H, D, D_x, M=2, instrument=False):
    sf, mf = softmax_flops(N, H, D, D_x), mgk_flops(N, H, D, D_x, M)
    sp, mp = softmax_params(H, D, D_x), mgk_params(H, D, D_x, M)
    return ComplexityReport(
        N,
        H,
        D,
        D_x,
        M,
        sf,
        mf,
        mgk_flops_grouped(N, H, D, D_x, M),
        sp,
        mp,
        mf / sf,
        mp / sp,
        instrumented_count(mgk_config(H, D, D_x, M), N) if instrument else None,
    )


def ratio_sweep(Ns, Ds, H=8, D_x=None, M=2, instrument=False):
    """Cost ratios of ``H / M``-head mixture attention over ``H``-head softmax on an (N, D) grid.

    ``D_x`` defaults to the model width ``H * D`` of each cell.
    """
    Ns, Ds = list(Ns), list(Ds)
    if not Ns or not Ds:
        raise DomainError("ratio_sweep needs a non-empty grid")
    return [
        complexity_report(N, H, D, H * D if D_x is None else D_x, M, instrument) for N in Ns for D in Ds
    ]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return format(value, ".17g")
    return str(value)


def to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CSV_COLUMNS)
    for report in reports:
        row = report.as_row()
        writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])
    return buf.getvalue()
