"""Acceptance criteria, one test each, at the stated tolerances.

Each test prints a ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
pytest terminal summary. Criteria 8 and 9 train models and take tens of minutes.
"""

import csv
import time

import numpy as np
import pytest

from acceptance_log import report
from mptscale import dsp, layers as L, pipeline as P, tensorcore as tc
from mptscale.cli import main as cli_main
from mptscale.complexity import count_macs, count_params, plan, reference_configs
from mptscale.evaluation import causality_probe, fit_scaling, si_snr_tensor
from mptscale.mptnet import ModelConfig, build


def test_criterion_1_cost_model_fidelity():
    t = time.perf_counter()
    rows = reference_configs()
    macs = [count_macs(c).total_macs_per_s for _, _, c in rows]
    params = [count_params(c).total_params for _, _, c in rows]
    m_ratio = [m / ref for m, (ref, _, _) in zip(macs, rows)]
    p_ratio = [p / ref for p, (_, ref, _) in zip(params, rows)]
    in_band = all(1 / 1.25 <= r <= 1.25 for r in m_ratio) and \
        all(1 / 1.6 <= r <= 1.6 for r in p_ratio)
    increasing = all(a < b for a, b in zip(macs, macs[1:]))
    twin = macs[8] / macs[7]
    elapsed = time.perf_counter() - t
    ok = in_band and increasing and 1.45 <= twin <= 1.90 and elapsed < 1.0
    report(1, "cost-model fidelity", ok,
           f"MACs ratios {min(m_ratio):.2f}..{max(m_ratio):.2f}, params ratios "
           f"{min(p_ratio):.2f}..{max(p_ratio):.2f}, increasing={increasing}, "
           f"noncausal/causal {twin:.3f}, {elapsed:.3f}s")
    assert ok


def test_criterion_2_scaling_law_fixture():
    grid = [50e6, 102e6, 195e6, 301e6, 502e6, 1.0e9, 14.0e9]
    errs = []
    for slope, intercept in [(0.092, 2.077), (0.36, 13.87)]:
        fit = fit_scaling([(x, slope * np.log2(x) + intercept) for x in grid])
        errs.append(max(abs(fit.slope - slope), abs(fit.intercept - intercept),
                        np.abs(fit.residuals).max()))
    ok = max(errs) < 1e-9
    report(2, "scaling-law fixture", ok, f"max error PESQ {errs[0]:.1e}, SI-SNR {errs[1]:.1e}")
    assert ok


def desk_scaled(cfg: ModelConfig) -> ModelConfig:
    return cfg.with_(B=min(cfg.B, 2), E=min(cfg.E, 32))


def test_criterion_3_causality_suite():
    t = time.perf_counter()
    worst_causal, least_noncausal = 0.0, np.inf
    for _, _, cfg in reference_configs():
        cfg = desk_scaled(cfg)
        for seed in range(10):
            model = build(cfg, seed=seed).eval()
            dev = causality_probe(model, frames=64, t0=32, trials=1, seed=seed).max_deviation
            if cfg.causal:
                worst_causal = max(worst_causal, dev)
            else:
                least_noncausal = min(least_noncausal, dev)
    ok = worst_causal < 1e-6 and least_noncausal >= 1e-6
    report(3, "causality suite", ok,
           f"worst causal deviation {worst_causal:.1e}, smallest noncausal deviation "
           f"{least_noncausal:.1e}, {time.perf_counter() - t:.0f}s")
    assert ok


def test_criterion_4_attention_oracle():
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        for t in range(1, 17):
            for d in range(1, 17):
                q, k, v = (rng.standard_normal((t, d)) for _ in range(3))
                for causal in (True, False):
                    got = L.linear_attention(tc.Tensor(q), tc.Tensor(k), tc.Tensor(v), causal)
                    err = np.abs(got.data - L.attention_oracle(q, k, v, causal)).max()
                    worst = max(worst, err)
    ok = worst < 1e-5
    report(4, "attention oracle", ok, f"max error {worst:.1e} over T,d<=16, 50 seeds")
    assert ok


def layer_cases(rng):
    yield "linear", L.Linear(5, 3, rng), rng.standard_normal((2, 4, 5))
    yield "layernorm", L.LayerNorm(6), rng.standard_normal((3, 6))
    yield "gru", L.RNNCell("gru", 3, 4, rng), rng.standard_normal((2, 5, 3))
    yield "lstm", L.RNNCell("lstm", 3, 4, rng), rng.standard_normal((2, 5, 3))
    yield "grouped_gru", L.RNNCell("gru", 3, 4, rng, groups=2), rng.standard_normal((2, 2, 5, 3))
    yield "bi_gru", L.RNN("gru", 3, 4, True, rng), rng.standard_normal((2, 5, 3))
    yield "bi_lstm", L.RNN("lstm", 3, 4, True, rng), rng.standard_normal((2, 5, 3))
    yield "uni_transformer", L.TransformerLayer(4, 2, "gru", False, rng), \
        rng.standard_normal((2, 5, 4))
    yield "bi_transformer", L.TransformerLayer(4, 1, "lstm", True, rng), \
        rng.standard_normal((2, 5, 4))
    yield "convblock", L.ConvBlock(3, rng).train(), rng.standard_normal((2, 3, 4, 3))


TINY = ModelConfig(K=8, B=1, E=8, C=1, variant="2+3", rnn="gru", causal=True, input="lps",
                   mask="real", df_hidden=2)


def test_criterion_5_gradient_suite():
    t = time.perf_counter()
    worst, failures = 0.0, []
    # 11 hops of samples pad to exactly 12 frames
    n = 11 * TINY.hop
    for seed in range(20):
        rng = np.random.default_rng(seed)
        for name, layer, x in layer_cases(rng):
            xt = tc.Tensor(x, requires_grad=True)
            w = tc.Tensor(rng.standard_normal(layer(xt).shape))
            rep = tc.grad_check(lambda p: (layer(xt) * w).sum(), [xt] + layer.parameters(),
                                tol=1e-3, max_coords=80, seed=seed)
            worst = max(worst, rep.max_rel_err)
            if not rep.passed:
                failures.append((name, seed))
        model = build(TINY, seed=seed).train()
        x, y = rng.standard_normal((2, 1, n))
        assert model.enhance_batch(x).shape == (1, n)
        rep = tc.grad_check(lambda p: tc.mean(si_snr_tensor(model.enhance_batch(x), y)),
                            model.parameters(), tol=1e-3, max_coords=150, seed=seed)
        worst = max(worst, rep.max_rel_err)
        if not rep.passed:
            failures.append(("tiny_model", seed))
    ok = not failures
    report(5, "gradient suite", ok,
           f"max rel error {worst:.1e}, failures {failures or 'none'}, "
           f"{time.perf_counter() - t:.0f}s")
    assert ok


def test_criterion_6_dsp_round_trip(tmp_path):
    worst = np.inf
    for seed in range(50):
        x = np.random.default_rng(seed).standard_normal(16000)
        y = dsp.istft(dsp.stft(x))
        a, b = x[320:len(y) - 320], y[320:-320]
        worst = min(worst, 10 * np.log10((a @ a) / ((a - b) @ (a - b) + 1e-300)))
    rng = np.random.default_rng(0)
    pcm = rng.integers(-32768, 32768, 16000) / 32768.0
    p, q = tmp_path / "a.wav", tmp_path / "b.wav"
    dsp.wav_write(p, pcm)
    back, rate = dsp.wav_read(p)
    dsp.wav_write(q, back, rate)
    exact = p.read_bytes() == q.read_bytes() and np.array_equal(back, pcm)
    ok = worst > 60 and exact
    report(6, "DSP round trip", ok, f"min interior SNR {worst:.1f} dB, WAV byte-exact={exact}")
    assert ok


def test_criterion_7_identity_bypass():
    worst = 0.0
    rng = np.random.default_rng(0)
    complex_ = TINY.with_(C=2, variant="1+2+3", input="complex", mask="complex")
    for cfg in (TINY, complex_):
        model = build(cfg, seed=1)
        model.zero_residual_outputs_()
        re, im = rng.standard_normal((2, 1, 20, cfg.n_bins))
        taps = np.zeros((2, cfg.df_taps, 1, 20, cfg.n_bins))
        taps[0, 0] = 1.0
        ones, zeros = np.ones((1, 20, cfg.n_bins)), np.zeros((1, 20, cfg.n_bins))
        unit = ones if cfg.mask == "real" else (ones, zeros)
        ore, oim = model.spectral(re, im, mask=unit, taps=taps)
        worst = max(worst, np.abs(ore.data - re).max(), np.abs(oim.data - im).max())
    ok = worst < 1e-6
    report(7, "identity bypass", ok, f"max abs error {worst:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_8_desk_scale_learning():
    t = time.perf_counter()
    cfg = plan(5e6)
    data = P.gen_dataset(P.SynthSpec(seed=0, n_clips=200))
    base = P.baseline(P.split(data)[1])
    gains = []
    for seed in range(3):
        res = P.train(P.TrainRun(cfg, 2000, seed=seed, val_every=250), data)
        gains.append(res.best_val - base)
    median = float(np.median(gains))
    ok = median >= 3.0
    report(8, "desk-scale learning", ok,
           f"median gain {median:.2f} dB over noisy {base:.2f} dB "
           f"(seeds {', '.join(f'{g:.2f}' for g in gains)}), {time.perf_counter() - t:.0f}s")
    assert ok


SCALING_STEPS = 1000


@pytest.mark.slow
def test_criterion_9_scaling_trend(tmp_path):
    t = time.perf_counter()
    code = cli_main(["scaling-run", "--budgets", "5e6,2e7,8e7", "--steps", str(SCALING_STEPS),
                     "--out", str(tmp_path)])
    with open(tmp_path / "fit.csv") as f:
        slope = float(next(csv.DictReader(f))["slope"])
    with open(tmp_path / "points.csv") as f:
        points = [(float(r["macs_per_s"]), float(r["metric"])) for r in csv.DictReader(f)]
    ok = code == 0 and slope > 0
    report(9, "desk-scale scaling trend", ok,
           f"slope {slope:.3f} dB/doubling over "
           + ", ".join(f"{m / 1e6:.1f}M:{v:.2f}dB" for m, v in points)
           + f", {time.perf_counter() - t:.0f}s")
    assert ok
