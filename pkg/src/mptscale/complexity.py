"""Closed-form MACs/s and parameter counts, and a budget-driven planner.

Counting conventions:

* a linear map ``in -> out`` costs ``in * out`` MACs per application;
  biases, layer norms, activations and residual adds are free;
* GRU step ``3h(i+h)``, LSTM step ``4h(i+h)``; a bidirectional RNN costs
  twice that plus its ``2h -> h`` merge;
* linear attention costs ``2 * E * d_head * heads`` per token on top of the
  four ``E x E`` projections;
* mask application (2 real or 4 complex MACs per bin) and the deep-filter
  FIR (4 MACs per tap per bin) are counted, since they are true products
  on the signal path.

Everything is per STFT frame, multiplied by ``sample_rate / hop`` frames/s.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

from .layers import ConvBlock, Linear, RNNCell, TransformerLayer
from .mptnet import DF_CHANNELS, Compression, ConfigError, Decompression, ModelConfig


@dataclass
class CostReport:
    """Per-submodule MACs/s and parameter counts."""

    entries: dict[str, tuple[float, int]] = field(default_factory=dict)
    frames_per_s: float = 100.0

    @property
    def total_macs_per_s(self) -> float:
        return float(sum(m for m, _ in self.entries.values()))

    @property
    def total_params(self) -> int:
        return int(sum(p for _, p in self.entries.values()))

    @property
    def params(self) -> dict[str, int]:
        return {k: p for k, (_, p) in self.entries.items()}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["component", "macs_per_s", "params"])
        for k, (m, p) in self.entries.items():
            w.writerow([k, f"{m:.0f}", p])
        w.writerow(["total", f"{self.total_macs_per_s:.0f}", self.total_params])
        return buf.getvalue()

    def table(self) -> str:
        rows = [f"{'component':<16}{'MACs/s':>14}{'params':>12}"]
        for k, (m, p) in self.entries.items():
            rows.append(f"{k:<16}{fmt_si(m):>14}{p:>12,}")
        rows.append(f"{'total':<16}{fmt_si(self.total_macs_per_s):>14}{self.total_params:>12,}")
        return "\n".join(rows)


def fmt_si(x: float) -> str:
    for unit, scale in (("G", 1e9), ("M", 1e6), ("K", 1e3)):
        if abs(x) >= scale:
            return f"{x / scale:.2f}{unit}"
    return f"{x:.0f}"


def _df_macs_per_bin(cfg: ModelConfig) -> int:
    g, h, n = cfg.df_groups, cfg.df_hidden, cfg.df_taps
    return g * RNNCell.macs("gru", DF_CHANNELS // g, h) + g * h * 2 * n + 4 * n


def _df_params(cfg: ModelConfig) -> int:
    f, g, h, n = cfg.n_bins, cfg.df_groups, cfg.df_hidden, cfg.df_taps
    return f * g * RNNCell.count("gru", DF_CHANNELS // g, h) + f * (g * h * 2 * n + 2 * n)


def cost_report(cfg: ModelConfig) -> CostReport:
    """Both MACs/s and parameters for every submodule of ``cfg``."""
    cfg.validate()
    f, k, e, c = cfg.n_bins, cfg.K, cfg.E, cfg.C
    fps = cfg.frames_per_s
    time_bi = not cfg.causal
    rep = CostReport(frames_per_s=fps)

    def put(name, macs_per_frame, params):
        rep.entries[name] = (macs_per_frame * fps, int(params))

    put("compression", cfg.in_channels * f * e,
        Compression.count(f, k, cfg.in_channels, e))
    put("conv", ConvBlock.macs_per_frame(e, k), ConvBlock.count(e))
    present = cfg.transformers
    for b in range(cfg.B):
        if "t1" in present:
            put(f"block{b}.t1", k * TransformerLayer.macs_per_token(e, 1, cfg.rnn, True),
                TransformerLayer.count(e, 1, cfg.rnn, True))
        if "t2" in present:
            put(f"block{b}.t2", k * TransformerLayer.macs_per_token(e, c, cfg.rnn, time_bi),
                TransformerLayer.count(e, c, cfg.rnn, time_bi))
        if "t3" in present:
            put(f"block{b}.t3",
                TransformerLayer.macs_per_token(e, c, cfg.rnn, time_bi) + 2 * k * e * e,
                TransformerLayer.count(e, c, cfg.rnn, time_bi)
                + Linear.count(k * e, e) + Linear.count(e, k * e))
    put("decompression", e * cfg.out_channels * f,
        Decompression.count(f, k, e, cfg.out_channels))
    put("mask_head", 2 * cfg.mask_channels * f, 0)
    if cfg.deep_filter:
        put("df_head", f * _df_macs_per_bin(cfg), _df_params(cfg))
    else:
        put("df_head", 0, 0)
    return rep


def count_macs(cfg: ModelConfig) -> CostReport:
    return cost_report(cfg)


def count_params(cfg: ModelConfig) -> CostReport:
    return cost_report(cfg)


def macs_per_s(cfg: ModelConfig) -> float:
    return cost_report(cfg).total_macs_per_s


# -- reference configurations ---------------------------------------------------
# (listed MACs/s, listed params, causal, variant, rnn, K, B, E, C)
REFERENCE_ROWS = [
    (50e6, 287e3, True, "2+3", "gru", 28, 2, 16, 1),
    (102e6, 385e3, True, "2+3", "gru", 30, 2, 28, 1),
    (195e6, 492e3, True, "2+3", "gru", 31, 2, 42, 1),
    (301e6, 447e3, True, "1+2+3", "gru", 31, 2, 24, 2),
    (502e6, 545e3, True, "1+2+3", "gru", 31, 2, 32, 2),
    (1.0e9, 931e3, True, "1+2+3", "gru", 30, 4, 36, 2),
    (4.1e9, 4.4e6, True, "1+2+3", "lstm", 30, 5, 56, 2),
    (14.0e9, 12.0e6, True, "1+2+3", "lstm", 30, 6, 96, 2),
    (23.2e9, 14.2e6, False, "1+2+3", "lstm", 30, 6, 96, 2),
]


def reference_configs() -> list[tuple[float, float, ModelConfig]]:
    """Reference rows as configs; C=1 rows use LPS input and a real mask."""
    out = []
    for macs, params, causal, variant, rnn, k, b, e, c in REFERENCE_ROWS:
        lps = c == 1
        cfg = ModelConfig(K=k, B=b, E=e, C=c, variant=variant, rnn=rnn, causal=causal,
                          input="lps" if lps else "complex", mask="real" if lps else "complex")
        out.append((macs, params, cfg))
    return out


# -- planner ------------------------------------------------------------------------
class InfeasibleBudget(ValueError):
    pass


@dataclass(frozen=True)
class Budget:
    target_macs_per_s: float
    tolerance: float = 0.15

    def __post_init__(self):
        if not self.target_macs_per_s > 0:
            raise ValueError(f"budget must be positive, got {self.target_macs_per_s}")
        if not 0 < self.tolerance < 1:
            raise ValueError(f"tolerance must be in (0, 1), got {self.tolerance}")


LOW_COST_LIMIT = 250e6
LSTM_LIMIT = 1.5e9
DF_SHARE = 1.0 / 3.0
GRID_E = range(8, 129, 4)
GRID_B = range(1, 9)
GRID_K = range(28, 33)


def _df_hidden_for(target: float, template: ModelConfig) -> int | None:
    # largest group-RNN width whose head stays within a third of the budget
    for h in (16, 8, 4, 2):
        cfg = template.with_(df_hidden=h)
        if cfg.n_bins * _df_macs_per_bin(cfg) * cfg.frames_per_s <= DF_SHARE * target:
            return h
    return None


def plan(budget: Budget | float, causal: bool = True) -> ModelConfig:
    """Pick the grid configuration whose MACs/s is closest (in log ratio) to the target.

    Below 250M MACs/s: LPS input, real mask, C=1, transformers 2+3; above:
    complex input and mask, C=2, transformers 1+2+3. GRU below 1.5G, LSTM
    above. The deep-filter group-RNN width shrinks for small budgets so the
    head never takes more than a third of the budget.
    """
    if not isinstance(budget, Budget):
        budget = Budget(float(budget))
    target = budget.target_macs_per_s
    low = target < LOW_COST_LIMIT
    base = dict(C=1 if low else 2, variant="2+3" if low else "1+2+3",
                rnn="gru" if target < LSTM_LIMIT else "lstm", causal=causal,
                input="lps" if low else "complex", mask="real" if low else "complex")
    probe = ModelConfig(K=28, B=1, E=8, **base)
    h = _df_hidden_for(target, probe)
    extra = dict(deep_filter=False) if h is None else dict(df_hidden=h)

    best, best_err = None, math.inf
    for k in GRID_K:
        for b in GRID_B:
            for e in GRID_E:
                cfg = ModelConfig(K=k, B=b, E=e, **base, **extra)
                err = abs(math.log(macs_per_s(cfg) / target))
                if err < best_err - 1e-12:
                    best, best_err = cfg, err
    got = macs_per_s(best)
    if abs(got / target - 1.0) > budget.tolerance:
        raise InfeasibleBudget(
            f"closest configuration costs {fmt_si(got)} MACs/s, outside "
            f"{budget.tolerance:.0%} of the {fmt_si(target)} target")
    return best


__all__ = [
    "Budget", "ConfigError", "CostReport", "InfeasibleBudget", "REFERENCE_ROWS", "count_macs",
    "count_params", "cost_report", "macs_per_s", "plan", "reference_configs",
]
