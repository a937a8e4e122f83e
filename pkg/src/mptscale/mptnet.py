"""Model configuration and assembly of the multi-path transformer network.

Data flow (feature layout in brackets)::

    noisy STFT (N, T, F)
      -> LPS or stacked re/im        (N, C_in, T, F)
      -> band-wise compression       (N, T, K, E)
      -> ConvBlock                   (N, E, T, K)
      -> B x MPT block               (N, T, K, E)
      -> band-wise decompression     (N, D, T, F)
      -> mask stream + deep filter   (N, T, F) complex
      -> iSTFT
"""

from __future__ import annotations

from dataclasses import MISSING, dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import dsp
from . import tensorcore as tc
from .dsp import BandPartition, Spectrogram, mel_partition
from .layers import ConvBlock, Linear, Module, RNNCell, TransformerLayer, uniform
from .tensorcore import ShapeError, Tensor

VARIANTS = ("1+2", "2+3", "1+2+3")
LPS_FLOOR = 1e-8
DF_CHANNELS = 2


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    K: int
    B: int
    E: int
    C: int
    variant: str
    rnn: str
    causal: bool
    input: str
    mask: str
    deep_filter: bool = True
    df_taps: int = 5
    df_groups: int = 2
    df_hidden: int = 16
    sample_rate: int = dsp.SAMPLE_RATE
    fft: int = dsp.FFT_SIZE
    hop: int = dsp.HOP

    def __post_init__(self):
        self.validate()

    @property
    def n_bins(self) -> int:
        return self.fft // 2 + 1

    @property
    def in_channels(self) -> int:
        return 1 if self.input == "lps" else 2

    @property
    def mask_channels(self) -> int:
        return 1 if self.mask == "real" else 2

    @property
    def df_channels(self) -> int:
        return DF_CHANNELS if self.deep_filter else 0

    @property
    def out_channels(self) -> int:
        return self.mask_channels + self.df_channels

    @property
    def transformers(self) -> tuple[str, ...]:
        return tuple(f"t{i}" for i in self.variant.split("+"))

    @property
    def frames_per_s(self) -> float:
        return self.sample_rate / self.hop

    def validate(self) -> None:
        def bad(name, msg):
            raise ConfigError(f"{name}: {msg}")

        for name in ("K", "B", "E", "C", "df_taps", "df_groups", "df_hidden",
                     "sample_rate", "fft", "hop"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool) or v < 1:
                bad(name, f"must be a positive integer, got {v!r}")
        if self.variant not in VARIANTS:
            bad("variant", f"must be one of {VARIANTS}, got {self.variant!r}")
        if self.rnn not in ("gru", "lstm"):
            bad("rnn", f"must be gru or lstm, got {self.rnn!r}")
        if self.input not in ("lps", "complex"):
            bad("input", f"must be lps or complex, got {self.input!r}")
        if self.mask not in ("real", "complex"):
            bad("mask", f"must be real or complex, got {self.mask!r}")
        if (self.input == "lps") != (self.mask == "real"):
            bad("mask", f"input={self.input} requires mask={'real' if self.input == 'lps' else 'complex'}")
        if self.variant == "2+3" and self.C != 1:
            bad("variant", f"'2+3' is only used with C=1, got C={self.C}")
        for name in ("causal", "deep_filter"):
            if not isinstance(getattr(self, name), bool):
                bad(name, "must be a boolean")
        if self.fft % 2 or self.fft % self.hop:
            bad("hop", f"fft={self.fft} must be even and divisible by hop={self.hop}")
        if self.K > self.n_bins:
            bad("K", f"{self.K} bands exceed {self.n_bins} bins")
        if DF_CHANNELS % self.df_groups:
            bad("df_groups", f"must divide the {DF_CHANNELS} deep-filter channels")

    # -- text format ---------------------------------------------------
    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            lines.append(f"{f.name} = {str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ConfigError(f"line {lineno}: unknown key {key!r}")
            if key in values:
                raise ConfigError(f"line {lineno}: duplicate key {key!r}")
            kind = types[key]
            if kind in (int, "int"):
                try:
                    values[key] = int(val)
                except ValueError:
                    raise ConfigError(f"{key}: expected integer, got {val!r}") from None
            elif kind in (bool, "bool"):
                if val.lower() not in ("true", "false"):
                    raise ConfigError(f"{key}: expected true/false, got {val!r}")
                values[key] = val.lower() == "true"
            else:
                values[key] = val
        missing = [f.name for f in fields(cls) if f.name not in values and f.default is MISSING]
        if missing:
            raise ConfigError(f"missing keys: {', '.join(missing)}")
        return cls(**values)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "ModelConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))

    def with_(self, **changes) -> "ModelConfig":
        return replace(self, **changes)


# -- submodules -----------------------------------------------------------------
class Compression(Module):
    """Band-specific linear maps from each band's bins to ``E`` features."""

    def __init__(self, partition: BandPartition, in_channels: int, dim: int,
                 rng: np.random.Generator):
        super().__init__()
        self.partition, self.in_channels, self.dim = partition, in_channels, dim
        self.bands = [self.add_child(f"band{k}", Linear(in_channels * w, dim, rng))
                      for k, w in enumerate(partition.widths)]

    def __call__(self, x: Tensor) -> Tensor:
        n, c, t_len, f = x.shape
        if f != self.partition.n_bins or c != self.in_channels:
            raise ShapeError(f"compression expects (N, {self.in_channels}, T, "
                             f"{self.partition.n_bins}), got {x.shape}")
        xt = x.transpose(0, 2, 1, 3)  # N, T, C, F
        outs = []
        for sl, lin in zip(self.partition.slices(), self.bands):
            band = xt[:, :, :, sl].reshape(n, t_len, c * (sl.stop - sl.start))
            outs.append(lin(band))
        return tc.stack(outs, axis=2)  # N, T, K, E

    @staticmethod
    def count(n_bins: int, n_bands: int, in_channels: int, dim: int) -> int:
        return in_channels * n_bins * dim + n_bands * dim


class Decompression(Module):
    """Band-specific linear maps from ``E`` features to ``D`` channels per bin."""

    def __init__(self, partition: BandPartition, dim: int, out_channels: int,
                 rng: np.random.Generator):
        super().__init__()
        self.partition, self.dim, self.out_channels = partition, dim, out_channels
        self.bands = [self.add_child(f"band{k}", Linear(dim, out_channels * w, rng))
                      for k, w in enumerate(partition.widths)]

    def __call__(self, z: Tensor) -> Tensor:
        n, t_len, k, e = z.shape
        if k != self.partition.n_bands or e != self.dim:
            raise ShapeError(f"decompression expects (N, T, {self.partition.n_bands}, "
                             f"{self.dim}), got {z.shape}")
        d = self.out_channels
        outs = [lin(z[:, :, i, :]).reshape(n, t_len, d, w)
                for i, (lin, w) in enumerate(zip(self.bands, self.partition.widths))]
        return tc.concat(outs, axis=-1).transpose(0, 2, 1, 3)  # N, D, T, F

    @staticmethod
    def count(n_bins: int, n_bands: int, dim: int, out_channels: int) -> int:
        return dim * out_channels * n_bins + out_channels * n_bins


class MPTBlock(Module):
    """Band-axis bi transformer, per-band time transformer, full-band time transformer."""

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        e, kind = config.E, config.rnn
        time_bi = not config.causal
        self.t1 = self.t2 = self.t3 = None
        present = config.transformers
        if "t1" in present:
            # band-axis sequences are K long; expansion applies to time-axis layers only
            self.t1 = self.add_child("t1", TransformerLayer(e, 1, kind, True, rng))
        if "t2" in present:
            self.t2 = self.add_child("t2", TransformerLayer(e, config.C, kind, time_bi, rng))
        if "t3" in present:
            self.t3_in = self.add_child("t3_in", Linear(config.K * e, e, rng))
            self.t3 = self.add_child("t3", TransformerLayer(e, config.C, kind, time_bi, rng))
            self.t3_out = self.add_child("t3_out", Linear(e, config.K * e, rng))

    def __call__(self, z: Tensor) -> Tensor:
        n, t_len, k, e = z.shape
        if self.t1 is not None:
            z = self.t1(z.reshape(n * t_len, k, e)).reshape(n, t_len, k, e)
        if self.t2 is not None:
            y = z.transpose(0, 2, 1, 3).reshape(n * k, t_len, e)
            z = self.t2(y).reshape(n, k, t_len, e).transpose(0, 2, 1, 3)
        if self.t3 is not None:
            y = self.t3_out(self.t3(self.t3_in(z.reshape(n, t_len, k * e))))
            z = z + y.reshape(n, t_len, k, e)
        return z

    def n_transformers(self) -> int:
        return sum(t is not None for t in (self.t1, self.t2, self.t3))

    def zero_outputs_(self) -> None:
        for t in (self.t1, self.t2, self.t3):
            if t is not None:
                t.zero_outputs_()
        if self.t3 is not None:
            self.t3_out.zero_()


class DeepFilterHead(Module):
    """Per-bin group GRU plus tap projection producing complex FIR taps.

    Each STFT bin owns its weights: ``df_groups`` GRUs (input
    ``2 / df_groups`` channels, ``df_hidden`` units) and a linear map from the
    concatenated group states to ``2 * df_taps`` values (real parts first).
    """

    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        f, g, h, n = config.n_bins, config.df_groups, config.df_hidden, config.df_taps
        self.n_bins, self.groups, self.hidden, self.taps = f, g, h, n
        self.gru = self.add_child("gru", RNNCell("gru", DF_CHANNELS // g, h, rng, groups=f * g))
        self.tap_w = self.add_param("taps.weight", uniform(rng, (f, g * h, 2 * n), g * h))
        self.tap_b = self.add_param("taps.bias", uniform(rng, (f, 1, 2 * n), g * h))

    def __call__(self, feats: Tensor) -> tuple[Tensor, Tensor]:
        """``(N, 2, T, F)`` -> real/imag taps, each ``(taps, N, T, F)``."""
        n_b, c, t_len, f = feats.shape
        g, h, n = self.groups, self.hidden, self.taps
        x = feats.transpose(3, 1, 0, 2).reshape(f, g, c // g, n_b, t_len)
        x = x.transpose(0, 1, 3, 4, 2).reshape(f * g, n_b, t_len, c // g)
        y = self.gru(x).reshape(f, g, n_b, t_len, h)
        y = y.transpose(0, 2, 3, 1, 4).reshape(f, n_b * t_len, g * h)
        taps = (y @ self.tap_w + self.tap_b).reshape(f, n_b, t_len, 2, n)
        taps = taps.transpose(3, 4, 1, 2, 0)  # 2, taps, N, T, F
        return taps[0], taps[1]

    def set_identity_(self) -> None:
        self.tap_w.data[...] = 0.0
        self.tap_b.data[...] = 0.0
        self.tap_b.data[..., 0] = 1.0

    @staticmethod
    def count(config: ModelConfig) -> int:
        f, g, h, n = config.n_bins, config.df_groups, config.df_hidden, config.df_taps
        gru = RNNCell.count("gru", DF_CHANNELS // g, h)
        return f * g * gru + f * (g * h * 2 * n + 2 * n)


# -- operations ---------------------------------------------------------------------
def input_features(re: np.ndarray, im: np.ndarray, config: ModelConfig) -> np.ndarray:
    """Network input ``(N, C_in, T, F)`` from the noisy spectrum."""
    if config.input == "lps":
        return np.log(re * re + im * im + LPS_FLOOR)[:, None]
    return np.stack([re, im], axis=1)


def freq_compress(model: "MPTNet", re: np.ndarray, im: np.ndarray) -> Tensor:
    x = Tensor(input_features(re, im, model.config).astype(model.dtype))
    return model.compress(x)


def mpt_block(x: Tensor, block: MPTBlock) -> Tensor:
    """Apply one MPT block to ``(N, T, K, E)`` features."""
    return block(x)


def freq_decompress(model: "MPTNet", z: Tensor) -> Tensor:
    return model.decompress(z)


def _shift_time(x: Tensor, lag: int) -> Tensor:
    if lag == 0:
        return x
    n, t_len, f = x.shape
    if lag >= t_len:
        return Tensor(np.zeros(x.shape, dtype=x.dtype))
    pad = Tensor(np.zeros((n, lag, f), dtype=x.dtype))
    return tc.concat([pad, x[:, : t_len - lag, :]], axis=1)


def dual_stream_filter(decomp: Tensor, re: np.ndarray, im: np.ndarray, config: ModelConfig,
                       df_head: DeepFilterHead | None = None, mask=None, taps=None):
    """Mask stream followed by the optional deep-filter stream.

    ``decomp`` is ``(N, D, T, F)``; ``re``/``im`` the noisy spectrum
    ``(N, T, F)``. ``mask`` (real ``(N, T, F)`` or a ``(re, im)`` pair) and
    ``taps`` (pair of ``(taps, N, T, F)`` arrays) override the network's
    predictions, for diagnostics. Returns the estimate as ``(re, im)``.
    """
    if decomp.shape[1] != config.out_channels:
        raise ShapeError(f"expected {config.out_channels} channels, got {decomp.shape[1]}")
    dtype = decomp.dtype
    sre, sim = Tensor(np.asarray(re, dtype=dtype)), Tensor(np.asarray(im, dtype=dtype))
    if config.mask == "real":
        m = tc.sigmoid(decomp[:, 0]) if mask is None else _lift(mask, dtype)
        e1re, e1im = m * sre, m * sim
    else:
        if mask is None:
            mr, mi = decomp[:, 0], decomp[:, 1]
        else:
            mr, mi = _lift(mask[0], dtype), _lift(mask[1], dtype)
        e1re, e1im = mr * sre - mi * sim, mr * sim + mi * sre
    if not config.deep_filter:
        return e1re, e1im
    mc = config.mask_channels
    if taps is None:
        hre, him = df_head(decomp[:, mc: mc + DF_CHANNELS])
    else:
        hre, him = _lift(taps[0], dtype), _lift(taps[1], dtype)
    out_re = out_im = None
    for lag in range(config.df_taps):
        sr, si = _shift_time(e1re, lag), _shift_time(e1im, lag)
        tr_, ti_ = hre[lag], him[lag]
        pr, pi = tr_ * sr - ti_ * si, tr_ * si + ti_ * sr
        out_re = pr if out_re is None else out_re + pr
        out_im = pi if out_im is None else out_im + pi
    return out_re, out_im


def _lift(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


class MPTNet(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        super().__init__()
        self.config = config
        self.partition = mel_partition(config.n_bins, config.K, config.sample_rate)
        self.compress = self.add_child(
            "compress", Compression(self.partition, config.in_channels, config.E, rng))
        self.conv = self.add_child("conv", ConvBlock(config.E, rng))
        self.blocks = [self.add_child(f"block{i}", MPTBlock(config, rng))
                       for i in range(config.B)]
        self.decompress = self.add_child(
            "decompress", Decompression(self.partition, config.E, config.out_channels, rng))
        self.df = (self.add_child("df", DeepFilterHead(config, rng))
                   if config.deep_filter else None)

    @property
    def dtype(self):
        return self.compress.bands[0].weight.dtype

    def spectral(self, re, im, mask=None, taps=None) -> tuple[Tensor, Tensor]:
        """Noisy spectrum ``(N, T, F)`` -> enhanced spectrum (re, im) Tensors."""
        re, im = np.asarray(re), np.asarray(im)
        if re.ndim == 2:
            re, im = re[None], im[None]
        if re.shape[-1] != self.config.n_bins:
            raise ShapeError(f"spectrum has {re.shape[-1]} bins, model expects {self.config.n_bins}")
        z = freq_compress(self, re, im)  # N, T, K, E
        z = self.conv(z.transpose(0, 3, 1, 2)).transpose(0, 2, 3, 1)
        for block in self.blocks:
            z = mpt_block(z, block)
        d = freq_decompress(self, z)
        return dual_stream_filter(d, re, im, self.config, self.df, mask=mask, taps=taps)

    def enhance_batch(self, waves: np.ndarray, scales: np.ndarray | None = None) -> Tensor:
        """Waveforms ``(N, L)`` -> tape-aware estimates ``(N, L)``.

        Each input is divided by its RMS (or the given ``scales``) before the
        STFT and the estimate is multiplied back by the same factor.
        """
        cfg = self.config
        waves = np.atleast_2d(np.asarray(waves, dtype=np.float64))
        n, length = waves.shape
        if length < cfg.fft:
            raise ValueError(f"input of {length} samples is shorter than one frame ({cfg.fft})")
        if scales is None:
            scales = rms_scale(waves)
        scales = np.asarray(scales, dtype=np.float64).reshape(n, 1)
        front, back = edge_padding(length, cfg.fft, cfg.hop)
        padded = np.pad(waves / scales, ((0, 0), (front, back)))
        spec = dsp.stft_batch(padded, cfg.fft, cfg.hop)
        ere, eim = self.spectral(spec.real, spec.imag)
        y = dsp.istft_tensor(ere, eim, cfg.fft, cfg.hop)
        return y[:, front: front + length] * scales.astype(y.dtype)

    def zero_residual_outputs_(self) -> None:
        for block in self.blocks:
            block.zero_outputs_()

    def census(self) -> dict[str, int]:
        """Parameter count per submodule (keys match the cost model)."""
        out: dict[str, int] = {}
        for name, p in self.named_parameters():
            parts = name.split(".")
            if parts[0].startswith("block"):
                sub = "t3" if parts[1].startswith("t3") else parts[1]
                key = f"{parts[0]}.{sub}"
            else:
                key = {"compress": "compression", "conv": "conv",
                       "decompress": "decompression", "df": "df_head"}[parts[0]]
            out[key] = out.get(key, 0) + p.size
        out["mask_head"] = 0
        out.setdefault("df_head", 0)
        return out

    # -- checkpoints ---------------------------------------------------
    def state(self) -> list[tuple[str, np.ndarray]]:
        items = [(n, p.data) for n, p in self.named_parameters()]
        return items + [(n, b) for n, b in self.named_buffers()]

    def to_bytes(self) -> bytes:
        return tc.save_tensors(self.state())

    def load_bytes(self, blob: bytes) -> "MPTNet":
        loaded = tc.load_tensors(blob)
        params = dict(self.named_parameters())
        buffers = dict(self.named_buffers())
        expected = [n for n, _ in self.state()]
        names = [n for n, _ in loaded]
        if names != expected:
            extra = sorted(set(names) - set(expected))
            missing = sorted(set(expected) - set(names))
            raise ConfigError(f"checkpoint does not match config (missing {missing[:3]}, "
                              f"unexpected {extra[:3]})")
        for name, arr in loaded:
            target = params[name].data if name in params else buffers[name]
            if target.shape != arr.shape:
                raise ConfigError(f"checkpoint tensor {name} has shape {arr.shape}, "
                                  f"config needs {target.shape}")
            if name in params:
                params[name].data = arr.astype(params[name].dtype)
            else:
                buffers[name][...] = arr
        return self


def rms_scale(waves: np.ndarray) -> np.ndarray:
    """Per-row RMS, with silent rows mapped to 1."""
    r = np.sqrt(np.mean(np.atleast_2d(waves) ** 2, axis=-1))
    return np.where(r > 1e-8, r, 1.0)


def build(config: ModelConfig, seed: int = 0, dtype=np.float64) -> MPTNet:
    """Deterministically initialise a network for ``config`` (eval mode)."""
    config.validate()
    model = MPTNet(config, np.random.default_rng(seed))
    model.astype(dtype)
    return model.eval()


def edge_padding(length: int, fft: int, hop: int) -> tuple[int, int]:
    """Zeros to add before/after a signal so every sample sits under two windows.

    Without it the first and last ``fft - hop`` samples would be divided by a
    near-zero window sum in the inverse, which amplifies any spectral edit.
    """
    front = fft - hop
    back = fft - hop + (-length) % hop
    return front, back


def forward(model: MPTNet, wave, scale: float | None = None) -> tuple[np.ndarray, Spectrogram]:
    """Denoise one waveform. Returns ``(estimate, enhanced spectrogram)``.

    ``scale`` fixes the normalisation factor; by default the input RMS is
    used, which makes the output depend on the whole utterance. The
    spectrogram is that of the edge-padded signal.
    """
    cfg = model.config
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1 or len(wave) < cfg.fft:
        raise ValueError(f"need a 1-D signal of at least {cfg.fft} samples")
    s = rms_scale(wave[None])[0] if scale is None else float(scale)
    front, back = edge_padding(len(wave), cfg.fft, cfg.hop)
    spec = dsp.stft(np.pad(wave / s, (front, back)), cfg.fft, cfg.hop, cfg.sample_rate)
    ere, eim = model.spectral(spec.values.real, spec.values.imag)
    values = (ere.data[0] + 1j * eim.data[0]) * s
    est = dsp.istft(Spectrogram(values, cfg.sample_rate, cfg.fft, cfg.hop))
    return est[front: front + len(wave)], Spectrogram(values, cfg.sample_rate, cfg.fft, cfg.hop)
