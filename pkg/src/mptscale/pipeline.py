"""Synthetic data, Adam training, inference and the scaling experiment."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .complexity import Budget, macs_per_s, plan
from .dsp import FFT_SIZE, SAMPLE_RATE
from .evaluation import ScalingFit, fit_scaling, si_snr, si_snr_tensor, write_points_csv
from .mptnet import MPTNet, ModelConfig, build, forward

log = logging.getLogger(__name__)


# -- synthetic data ------------------------------------------------------------------
@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_clips: int = 200
    clip_seconds: float = 2.0
    snr_range: tuple[float, float] = (-5.0, 15.0)
    f0_range: tuple[float, float] = (100.0, 300.0)

    def __post_init__(self):
        lo, hi = self.snr_range
        if not lo <= hi:
            raise ValueError(f"empty SNR range {self.snr_range}")
        if not 0 < self.f0_range[0] <= self.f0_range[1]:
            raise ValueError(f"bad f0 range {self.f0_range}")
        if self.n_clips < 1:
            raise ValueError("n_clips must be positive")
        if self.n_samples < FFT_SIZE:
            raise ValueError(f"clips of {self.n_samples} samples are shorter than one frame")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * SAMPLE_RATE))


def _harmonic(rng: np.random.Generator, n: int, f0_range) -> np.ndarray:
    lo, hi = f0_range
    # random-walk log-f0, reflected into range
    steps = rng.normal(0.0, 0.002, n).cumsum()
    log_f0 = np.log(rng.uniform(lo, hi)) + steps
    log_f0 = np.clip(log_f0, np.log(lo), np.log(hi))
    phase = 2.0 * np.pi * np.cumsum(np.exp(log_f0)) / SAMPLE_RATE
    n_harm = int(rng.integers(8, 13))
    offsets = rng.uniform(0, 2 * np.pi, n_harm)
    x = sum(np.sin(k * phase + offsets[k - 1]) / k for k in range(1, n_harm + 1))
    # slow envelope: a few raised-cosine syllables
    t = np.arange(n) / SAMPLE_RATE
    rate = rng.uniform(1.5, 4.0)
    env = 0.55 + 0.45 * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))
    return x * env


def pink_noise(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(len(spec), dtype=np.float64)
    f[0] = 1.0
    return np.fft.irfft(spec / np.sqrt(f), n=n)


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    gain = np.sqrt((clean @ clean) / (noise @ noise) / 10.0 ** (snr_db / 10.0))
    return clean + gain * noise


def gen_clip(spec: SynthSpec, index: int) -> tuple[np.ndarray, np.ndarray, float]:
    """Deterministic ``(noisy, clean, snr_db)`` for clip ``index``."""
    rng = np.random.default_rng([spec.seed, index])
    n = spec.n_samples
    clean = _harmonic(rng, n, spec.f0_range)
    clean *= 0.1 / np.sqrt(np.mean(clean ** 2))
    snr = float(rng.uniform(*spec.snr_range))
    noisy = mix_at_snr(clean, pink_noise(rng, n), snr)
    return noisy, clean, snr


def gen_dataset(spec: SynthSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    return [gen_clip(spec, i)[:2] for i in range(spec.n_clips)]


def split(data: list) -> tuple[list, list]:
    """Last 10% of clips (at least one) are held out for validation."""
    if len(data) < 2:
        raise ValueError("need at least 2 clips to split off a validation set")
    n_val = max(1, len(data) // 10)
    return data[:-n_val], data[-n_val:]


# -- optimiser -------------------------------------------------------------------------
class Adam:
    def __init__(self, params: list[tc.Tensor], lr: float = 1e-3, betas=(0.9, 0.999),
                 eps: float = 1e-8, clip: float | None = 5.0):
        self.params = params
        self.lr, self.betas, self.eps, self.clip = lr, betas, eps, clip
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self) -> float:
        """Apply one update from the accumulated grads; returns the pre-clip grad norm."""
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
        scale = 1.0
        if self.clip is not None and norm > self.clip:
            scale = self.clip / norm
        self.t += 1
        b1, b2 = self.betas
        c1, c2 = 1 - b1 ** self.t, 1 - b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            g = g * scale
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)
            p.grad = None
        return norm


# -- training ----------------------------------------------------------------------------
@dataclass
class History:
    loss: list[float] = field(default_factory=list)
    val: list[tuple[int, float]] = field(default_factory=list)


@dataclass
class TrainRun:
    config: ModelConfig
    steps: int
    batch_size: int = 4
    lr: float = 1e-3
    clip: float = 5.0
    seed: int = 0
    val_every: int = 100
    crop_seconds: float | None = 1.0
    history: History = field(default_factory=History)

    def __post_init__(self):
        self.config.validate()
        if self.steps < 0 or self.batch_size < 1 or not self.lr > 0:
            raise ValueError("steps >= 0, batch_size >= 1 and lr > 0 required")


@dataclass
class TrainResult:
    model: MPTNet
    final: bytes
    best: bytes
    best_val: float
    history: History


class NonFiniteLoss(ArithmeticError):
    pass


def evaluate(model: MPTNet, data) -> float:
    """Mean SI-SNR of the model's estimates over ``(noisy, clean)`` pairs."""
    was = model.training
    model.eval()
    try:
        return float(np.mean([si_snr(forward(model, noisy)[0], clean) for noisy, clean in data]))
    finally:
        model.train(was)


def baseline(data) -> float:
    return float(np.mean([si_snr(noisy, clean) for noisy, clean in data]))


def train(run: TrainRun, data, out_dir=None) -> TrainResult:
    """Train with loss = -SI-SNR; writes ``final.ckpt`` and ``best.ckpt`` if ``out_dir``."""
    if not data:
        raise ValueError("training data is empty")
    train_set, val_set = split(list(data)) if len(data) >= 2 else (list(data), [])
    model = build(run.config, seed=run.seed, dtype=np.float32)
    if model.df is not None:
        # start from pass-through filtering so early steps only learn the mask
        model.df.set_identity_()
    opt = Adam(model.parameters(), lr=run.lr, clip=run.clip)
    rng = np.random.default_rng([run.seed, 1])
    noisy = np.stack([c[0] for c in train_set])
    clean = np.stack([c[1] for c in train_set])
    best_val, best = -math.inf, model.to_bytes()
    hist = run.history
    crop = noisy.shape[1] if run.crop_seconds is None else max(
        run.config.fft, int(round(run.crop_seconds * run.config.sample_rate)))

    def validate(step):
        nonlocal best_val, best
        if not val_set:
            return
        score = evaluate(model, val_set)
        hist.val.append((step, score))
        if score > best_val:
            best_val, best = score, model.to_bytes()

    for step in range(run.steps):
        idx = rng.choice(len(train_set), size=min(run.batch_size, len(train_set)), replace=False)
        xb, yb = noisy[idx], clean[idx]
        if crop < xb.shape[1]:
            start = int(rng.integers(0, xb.shape[1] - crop + 1))
            xb, yb = xb[:, start: start + crop], yb[:, start: start + crop]
        model.train()
        with tc.Tape() as tape:
            est = model.enhance_batch(xb)
            loss = -tc.mean(si_snr_tensor(est, yb))
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteLoss(f"non-finite loss at step {step}")
        tape.backward(loss)
        opt.step()
        hist.loss.append(value)
        if (step + 1) % run.val_every == 0 or step + 1 == run.steps:
            model.eval()
            validate(step + 1)
            log.info("step %d loss %.3f val %.3f", step + 1, value,
                     hist.val[-1][1] if hist.val else float("nan"))
    model.eval()
    if run.steps == 0:
        validate(0)
    final = model.to_bytes()
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "final.ckpt").write_bytes(final)
        (out / "best.ckpt").write_bytes(best)
    return TrainResult(model, final, best, best_val, hist)


def load_model(config: ModelConfig, blob: bytes) -> MPTNet:
    model = build(config, dtype=np.float32)
    return model.load_bytes(blob).eval()


def denoise(wave, config: ModelConfig, checkpoint: bytes) -> np.ndarray:
    model = load_model(config, checkpoint)
    return forward(model, np.asarray(wave, dtype=np.float64))[0]


# -- scaling experiment ----------------------------------------------------------------
@dataclass
class ScalingResult:
    points: list[tuple[float, float]]
    configs: list[ModelConfig]
    fit: ScalingFit


def run_scaling_experiment(budgets, spec: SynthSpec, steps: int, seed: int = 0,
                           out_dir=None, **train_kw) -> ScalingResult:
    """Plan, train and score one model per MACs/s budget, then fit SI-SNR vs log2 MACs/s."""
    budgets = [float(b) for b in budgets]
    if len(budgets) < 3:
        raise ValueError("scaling experiment needs at least 3 budgets")
    if max(budgets) / min(budgets) < 8.0:
        raise ValueError("budgets must span at least 8x")
    configs = [plan(Budget(b)) for b in budgets]
    data = gen_dataset(spec)
    _, val_set = split(data)
    points = []
    for b, cfg in zip(budgets, configs):
        res = train(TrainRun(cfg, steps, seed=seed, **train_kw), data,
                    None if out_dir is None else Path(out_dir) / f"budget_{b:.3g}")
        model = load_model(cfg, res.best)
        points.append((macs_per_s(cfg), evaluate(model, val_set)))
        log.info("budget %.3g -> %.3g MACs/s, SI-SNR %.2f dB", b, *points[-1])
    fit = fit_scaling(points)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_points_csv(out / "points.csv", points)
        (out / "fit.csv").write_text(fit.to_csv())
        for b, cfg in zip(budgets, configs):
            cfg.save(out / f"budget_{b:.3g}" / "config.txt")
    return ScalingResult(points, configs, fit)
