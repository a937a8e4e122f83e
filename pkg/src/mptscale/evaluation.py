"""SI-SNR, the log-linear scaling fit and the causality probe."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensorcore as tc
from .tensorcore import Tensor

SI_SNR_CLAMP = 100.0
PROBE_TOL = 1e-6


def si_snr(est, ref, zero_mean: bool = True) -> float:
    """Scale-invariant SNR in dB, clamped to [-100, 100].

    With ``zero_mean=False`` the DC removal step is skipped.
    """
    est = np.asarray(est, dtype=np.float64).ravel()
    ref = np.asarray(ref, dtype=np.float64).ravel()
    if est.shape != ref.shape or est.size < 2:
        raise ValueError(f"si_snr needs equal lengths >= 2, got {est.size} and {ref.size}")
    if zero_mean:
        est = est - est.mean()
        ref = ref - ref.mean()
    ref_energy = ref @ ref
    if ref_energy <= 0.0:
        raise ValueError("si_snr reference has zero energy")
    target = (est @ ref) / ref_energy * ref
    noise = est - target
    t_e, n_e = target @ target, noise @ noise
    # tolerate rounding: a residual this small relative to the target is a perfect match
    if n_e <= 1e-30 * max(t_e, 1e-300):
        return SI_SNR_CLAMP
    if t_e <= 0.0:
        return -SI_SNR_CLAMP
    return float(np.clip(10.0 * np.log10(t_e / n_e), -SI_SNR_CLAMP, SI_SNR_CLAMP))


def si_snr_batch(est, ref) -> np.ndarray:
    est, ref = np.atleast_2d(est), np.atleast_2d(ref)
    return np.array([si_snr(e, r) for e, r in zip(est, ref)])


def si_snr_tensor(est: Tensor, ref: np.ndarray, eps: float = 1e-8) -> Tensor:
    """Differentiable per-row SI-SNR of ``(N, L)`` estimates, shape ``(N,)``.

    ``eps`` keeps the log finite; the clamp is left out so gradients never
    vanish at the bounds.
    """
    ref = np.atleast_2d(np.asarray(ref, dtype=est.dtype))
    ref = ref - ref.mean(axis=-1, keepdims=True)
    est = est - tc.mean(est, axis=-1, keepdims=True)
    ref_energy = (ref * ref).sum(axis=-1, keepdims=True) + eps
    alpha = tc.tsum(est * ref, axis=-1, keepdims=True) / ref_energy
    target = alpha * Tensor(ref)
    noise = est - target
    ratio = (tc.tsum(target * target, axis=-1) + eps) / (tc.tsum(noise * noise, axis=-1) + eps)
    return tc.log(ratio) * (10.0 / np.log(10.0))


# -- scaling law -------------------------------------------------------------------
@dataclass
class ScalingFit:
    slope: float
    intercept: float
    residuals: np.ndarray
    r2: float

    def predict(self, macs_per_s) -> np.ndarray:
        return self.slope * np.log2(np.asarray(macs_per_s, dtype=np.float64)) + self.intercept

    def to_csv(self) -> str:
        return f"slope,intercept,r2\n{self.slope!r},{self.intercept!r},{self.r2!r}\n"


def fit_scaling(points) -> ScalingFit:
    """Ordinary least squares of metric against log2(MACs/s)."""
    pts = np.asarray(list(points), dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
        raise ValueError("fit_scaling needs at least 2 (macs_per_s, metric) points")
    macs, y = pts[:, 0], pts[:, 1]
    if np.any(~np.isfinite(pts)):
        raise ValueError("fit_scaling points must be finite")
    if np.any(macs <= 0):
        raise ValueError("MACs/s values must be positive")
    x = np.log2(macs)
    xc = x - x.mean()
    sxx = xc @ xc
    if sxx <= 0.0:
        raise ValueError("degenerate fit: all MACs/s values are equal")
    slope = (xc @ (y - y.mean())) / sxx
    intercept = y.mean() - slope * x.mean()
    resid = y - (slope * x + intercept)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 - float(resid @ resid) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), float(intercept), resid, r2)


def read_points_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or not {"macs_per_s", "metric"} <= set(reader.fieldnames):
            raise ValueError(f"{path}: expected header macs_per_s,metric")
        try:
            return [(float(r["macs_per_s"]), float(r["metric"])) for r in reader]
        except (TypeError, ValueError) as exc:
            raise ValueError(f"{path}: bad row ({exc})") from None


def write_points_csv(path, points) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["macs_per_s", "metric"])
        for m, v in points:
            w.writerow([repr(float(m)), repr(float(v))])


# -- causality ---------------------------------------------------------------------
@dataclass
class ProbeReport:
    max_deviation: float
    per_trial: list[float]
    frames: int
    t0: int
    tol: float = PROBE_TOL

    @property
    def passed(self) -> bool:
        return self.max_deviation < self.tol


def causality_probe(model, frames: int = 64, t0: int = 32, trials: int = 3,
                    seed: int = 0) -> ProbeReport:
    """Perturb spectrogram frames ``>= t0`` and measure the change in outputs ``< t0``."""
    if not 0 < t0 < frames:
        raise ValueError(f"need 0 < t0 < frames, got t0={t0}, frames={frames}")
    if model.training:
        raise RuntimeError("causality probe needs the model in eval mode (frozen batch norm)")
    rng = np.random.default_rng(seed)
    f = model.config.n_bins
    devs = []
    for _ in range(trials):
        a = rng.standard_normal((2, 1, frames, f))
        b = a.copy()
        b[:, :, t0:] = rng.standard_normal((2, 1, frames - t0, f))
        ra, ia = model.spectral(a[0], a[1])
        rb, ib = model.spectral(b[0], b[1])
        d = max(np.abs(ra.data[:, :t0] - rb.data[:, :t0]).max(),
                np.abs(ia.data[:, :t0] - ib.data[:, :t0]).max())
        devs.append(float(d))
    return ProbeReport(max(devs), devs, frames, t0)


def write_fit_csv(path, fit: ScalingFit) -> None:
    Path(path).write_text(fit.to_csv())
