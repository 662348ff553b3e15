"""The separation network: encoder, mask generator, decoder.

The encoder turns a waveform into an (F, M) feature map, either a learned
strided 1-D convolution or a magnitude-STFT baseline. The mask generator
produces one non-negative mask per source (heart, lung) from stacked
pointwise/local convolutions and per-source transformer stacks; masked
features go back through the decoder (transposed convolution, or ISTFT with
the mixture phase for the STFT baseline).

Checkpoints are a little-endian binary container defined at the bottom of
this module: magic "CSEP", version, a key=value config block, named f32
tensors, and a trailing CRC32 over all tensor payloads.
"""

import io
import math
import struct
import zlib
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import dsp
from .errors import (
    CheckpointCorruptError,
    CheckpointFormatError,
    ConfigError,
    ShapeMismatch,
)
from .nn import Tensor, functional as F, no_grad

ENCODER_KINDS = ("learned_conv", "stft_baseline")
HEART, LUNG = 0, 1


@dataclass
class SeparatorConfig:
    encoder_kind: str = "learned_conv"
    kernel_size: int = 512
    stride: int = 0  # 0 means kernel_size // 2
    feature_size: int = 512
    mask_feature_size: int = 256
    conv_kernel: int = 3
    conv_layers: int = 6
    num_heads: int = 4
    transformer_depth: int = 4
    num_sources: int = 2
    use_conv_blocks: bool = True

    def __post_init__(self):
        if self.stride == 0:
            self.stride = self.kernel_size // 2
        self.validate()

    def validate(self):
        if self.encoder_kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.feature_size % 2 or self.mask_feature_size % 2:
            raise ConfigError("feature sizes must be even")
        if self.mask_feature_size % self.num_heads:
            raise ConfigError(
                f"mask_feature_size {self.mask_feature_size} not divisible by "
                f"num_heads {self.num_heads}"
            )
        if self.stride > self.kernel_size:
            raise ConfigError(f"stride {self.stride} exceeds kernel {self.kernel_size}")
        if self.num_sources < 2:
            raise ConfigError("at least two sources required")
        return self

    @property
    def encoder_features(self) -> int:
        """Width of the feature map the mask generator sees."""
        if self.encoder_kind == "stft_baseline":
            return self.kernel_size // 2 + 1
        return self.feature_size

    @property
    def ffn_size(self) -> int:
        return 4 * self.mask_feature_size

    def to_strings(self) -> dict:
        return {k: str(v) for k, v in asdict(self).items()}

    @classmethod
    def from_strings(cls, raw: dict) -> "SeparatorConfig":
        kwargs = {}
        for f_ in fields(cls):
            if f_.name not in raw:
                continue
            text = raw[f_.name]
            if f_.type in (bool, "bool"):
                kwargs[f_.name] = text in ("True", "true", "1")
            elif f_.type in (int, "int"):
                kwargs[f_.name] = int(text)
            else:
                kwargs[f_.name] = text
        return cls(**kwargs)


@dataclass
class EncodedMixture:
    """Encoder output plus everything decode() needs to get back to length T."""

    features: Tensor  # (B, F, M)
    original_length: int
    padded_length: int
    phase: np.ndarray | None = None  # (B, F, M), stft_baseline only


def _uniform_init(rng, shape, fan_in, dtype=np.float32):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class SeparatorModel:
    """Full separation network; owns its named parameter tensors."""

    def __init__(self, config: SeparatorConfig | None = None, seed: int = 0):
        self.config = (config or SeparatorConfig()).validate()
        self.params: dict[str, Tensor] = {}
        self._init_params(np.random.default_rng(seed))

    # -- parameters ---------------------------------------------------------
    def _add(self, name, array):
        t = Tensor(array, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _init_params(self, rng):
        cfg = self.config
        fe = cfg.encoder_features
        d = cfg.mask_feature_size
        if cfg.encoder_kind == "learned_conv":
            self._add("encoder.weight", _uniform_init(rng, (cfg.feature_size, 1, cfg.kernel_size), cfg.kernel_size))
            self._add("encoder.bias", np.zeros(cfg.feature_size, dtype=np.float32))
        self._add("mask.norm_in.gain", np.ones(fe, dtype=np.float32))
        self._add("mask.norm_in.bias", np.zeros(fe, dtype=np.float32))
        self._add("mask.proj_in.weight", _uniform_init(rng, (d, fe, 1), fe))
        self._add("mask.proj_in.bias", np.zeros(d, dtype=np.float32))
        if cfg.use_conv_blocks:
            for i in range(cfg.conv_layers):
                self._add(f"mask.conv{i}.weight", _uniform_init(rng, (d, d, cfg.conv_kernel), d * cfg.conv_kernel))
                self._add(f"mask.conv{i}.bias", np.zeros(d, dtype=np.float32))
                self._add(f"mask.conv{i}.norm.gain", np.ones(d, dtype=np.float32))
                self._add(f"mask.conv{i}.norm.bias", np.zeros(d, dtype=np.float32))
        for s in range(cfg.num_sources):
            for j in range(cfg.transformer_depth):
                base = f"mask.src{s}.layer{j}"
                for proj in ("wq", "wk", "wv", "wo"):
                    self._add(f"{base}.attn.{proj}", _uniform_init(rng, (d, d), d))
                    self._add(f"{base}.attn.{proj}_bias", np.zeros(d, dtype=np.float32))
                for norm in ("norm1", "norm2"):
                    self._add(f"{base}.{norm}.gain", np.ones(d, dtype=np.float32))
                    self._add(f"{base}.{norm}.bias", np.zeros(d, dtype=np.float32))
                self._add(f"{base}.ffn.w1", _uniform_init(rng, (cfg.ffn_size, d), d))
                self._add(f"{base}.ffn.b1", np.zeros(cfg.ffn_size, dtype=np.float32))
                self._add(f"{base}.ffn.w2", _uniform_init(rng, (d, cfg.ffn_size), cfg.ffn_size))
                self._add(f"{base}.ffn.b2", np.zeros(d, dtype=np.float32))
            self._add(f"mask.src{s}.proj_out.weight", _uniform_init(rng, (fe, d, 1), d))
            self._add(f"mask.src{s}.proj_out.bias", np.zeros(fe, dtype=np.float32))
        if cfg.encoder_kind == "learned_conv":
            self._add("decoder.weight", _uniform_init(rng, (cfg.feature_size, 1, cfg.kernel_size), cfg.kernel_size))
            self._add("decoder.bias", np.zeros(1, dtype=np.float32))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward ------------------------------------------------------------
    def _as_batch(self, x) -> tuple[np.ndarray, bool]:
        arr = np.asarray(x, dtype=np.float32)
        if arr.ndim == 1:
            return arr[None, :], False
        if arr.ndim == 2:
            return arr, True
        raise ShapeMismatch(f"expected (T,) or (B, T) waveform input, got shape {arr.shape}")

    def encode(self, x) -> EncodedMixture:
        """Slide the analysis window over the mixture; returns (B, F, M) features."""
        cfg = self.config
        batch, _ = self._as_batch(x)
        t_in = batch.shape[1]
        if t_in < cfg.kernel_size:
            raise ShapeMismatch(f"input length {t_in} shorter than kernel {cfg.kernel_size}")
        t_pad = dsp.padded_length(t_in, cfg.kernel_size, cfg.stride)
        if cfg.encoder_kind == "stft_baseline":
            frames = dsp.frame_signal(batch.astype(np.float64), cfg.kernel_size, cfg.stride)
            spec = np.fft.rfft(frames * dsp.hann_periodic(cfg.kernel_size), axis=-1)
            mag = np.abs(spec).transpose(0, 2, 1).astype(np.float32)
            phase = np.angle(spec).transpose(0, 2, 1)
            return EncodedMixture(Tensor(mag), t_in, t_pad, phase)
        padded = np.zeros((batch.shape[0], 1, t_pad), dtype=np.float32)
        padded[:, 0, :t_in] = batch
        feat = F.conv1d(
            Tensor(padded), self.params["encoder.weight"], self.params["encoder.bias"],
            stride=cfg.stride,
        )
        return EncodedMixture(feat, t_in, t_pad)

    def generate_masks(self, features: Tensor) -> Tensor:
        """Feature map (B, F, M) -> non-negative masks (B, s, F, M)."""
        cfg = self.config
        p = self.params
        y = F.layer_norm(features, p["mask.norm_in.gain"], p["mask.norm_in.bias"], axis=1)
        y = F.conv1d(y, p["mask.proj_in.weight"], p["mask.proj_in.bias"])
        if cfg.use_conv_blocks:
            same = (cfg.conv_kernel - 1) // 2
            for i in range(cfg.conv_layers):
                y = F.conv1d(y, p[f"mask.conv{i}.weight"], p[f"mask.conv{i}.bias"], padding=same)
                y = F.layer_norm(y, p[f"mask.conv{i}.norm.gain"], p[f"mask.conv{i}.norm.bias"], axis=1)
                y = F.gelu(y)
        frames = y.shape[-1]
        seq = F.transpose(y, (0, 2, 1))  # (B, M, D)
        pe = F.sinusoidal_positional_encoding(frames, cfg.mask_feature_size)
        seq = F.add(seq, Tensor(np.broadcast_to(pe, seq.shape).copy()))
        per_source = []
        for s in range(cfg.num_sources):
            t = seq
            for j in range(cfg.transformer_depth):
                base = f"mask.src{s}.layer{j}"
                normed = F.layer_norm(t, p[f"{base}.norm1.gain"], p[f"{base}.norm1.bias"], axis=2)
                attended = F.multihead_self_attention(
                    normed,
                    p[f"{base}.attn.wq"], p[f"{base}.attn.wq_bias"],
                    p[f"{base}.attn.wk"], p[f"{base}.attn.wk_bias"],
                    p[f"{base}.attn.wv"], p[f"{base}.attn.wv_bias"],
                    p[f"{base}.attn.wo"], p[f"{base}.attn.wo_bias"],
                    cfg.num_heads,
                )
                t = F.add(t, attended)
                normed = F.layer_norm(t, p[f"{base}.norm2.gain"], p[f"{base}.norm2.bias"], axis=2)
                hidden = F.gelu(F.linear(normed, p[f"{base}.ffn.w1"], p[f"{base}.ffn.b1"]))
                t = F.add(t, F.linear(hidden, p[f"{base}.ffn.w2"], p[f"{base}.ffn.b2"]))
            t = F.gelu(t)
            back = F.transpose(t, (0, 2, 1))  # (B, D, M)
            mask = F.conv1d(back, p[f"mask.src{s}.proj_out.weight"], p[f"mask.src{s}.proj_out.bias"])
            per_source.append(mask)
        return F.relu(F.stack(per_source, axis=1))

    def decode(self, masked: Tensor, enc: EncodedMixture) -> Tensor:
        """Masked features (B, F, M) -> waveform (B, T)."""
        cfg = self.config
        if cfg.encoder_kind == "stft_baseline":
            return F.masked_phase_istft(
                masked, enc.phase, dsp.hann_periodic(cfg.kernel_size), cfg.stride,
                enc.original_length,
            )
        out = F.conv_transpose1d(
            masked, self.params["decoder.weight"], self.params["decoder.bias"],
            stride=cfg.stride,
        )
        out = F.narrow(out, 2, 0, enc.original_length)
        return F.reshape(out, (out.shape[0], enc.original_length))

    def forward(self, x) -> Tensor:
        """Training-path forward: (B, T) mixtures -> (B, s, T) estimates."""
        enc = self.encode(x)
        masks = self.generate_masks(enc.features)
        outs = []
        for s in range(self.config.num_sources):
            masked = F.mul(F.narrow(masks, 1, s, 1), F.reshape(enc.features, (enc.features.shape[0], 1) + enc.features.shape[1:]))
            masked = F.reshape(masked, enc.features.shape)
            outs.append(self.decode(masked, enc))
        return F.stack(outs, axis=1)

    def separate(self, x) -> np.ndarray:
        """Inference: mixture (T,) or (B, T) -> estimates (2, T) or (B, 2, T)."""
        arr, batched = self._as_batch(x)
        with no_grad():
            est = self.forward(arr).data
        return est if batched else est[0]

    # -- persistence ----------------------------------------------------------
    def save(self, path, extra_config: dict | None = None, extra_tensors: dict | None = None):
        config = self.config.to_strings()
        if extra_config:
            config.update({str(k): str(v) for k, v in extra_config.items()})
        tensors = {name: p.data for name, p in self.params.items()}
        if extra_tensors:
            tensors.update(extra_tensors)
        write_checkpoint(path, config, tensors)

    @classmethod
    def load(cls, path) -> "SeparatorModel":
        config, tensors, _ = read_checkpoint(path)
        model = cls(SeparatorConfig.from_strings(config))
        model.load_tensors(tensors)
        return model

    def load_tensors(self, tensors: dict):
        for name, p in self.params.items():
            if name not in tensors:
                raise CheckpointFormatError(f"checkpoint missing tensor {name!r}")
            arr = tensors[name]
            if tuple(arr.shape) != p.shape:
                raise CheckpointFormatError(
                    f"tensor {name!r} has shape {arr.shape}, expected {p.shape}"
                )
            p.data = arr.astype(np.float32)


# ---------------------------------------------------------------------------
# checkpoint container
# ---------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"CSEP"
CHECKPOINT_VERSION = 1


def write_checkpoint(path, config: dict, tensors: dict):
    """Serialize config strings and named f32 tensors; CRC32 of payloads at EOF."""
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<I", CHECKPOINT_VERSION))
    block = "".join(f"{k}={v}\n" for k, v in config.items()).encode("utf-8")
    buf.write(struct.pack("<I", len(block)))
    buf.write(block)
    buf.write(struct.pack("<I", len(tensors)))
    crc = 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<B", data.ndim))
        buf.write(struct.pack(f"<{data.ndim}I", *data.shape))
        payload = data.tobytes(order="C")
        crc = zlib.crc32(payload, crc)
        buf.write(payload)
    buf.write(struct.pack("<I", crc & 0xFFFFFFFF))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_checkpoint(path):
    """Returns (config dict, tensor dict, crc). Raises on bad magic/version or
    truncated/corrupt payloads; never returns partial state."""
    with open(path, "rb") as fh:
        blob = fh.read()
    view = memoryview(blob)
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointCorruptError(f"checkpoint truncated while reading {what}")
        chunk = view[pos : pos + n]
        pos += n
        return chunk

    magic = bytes(take(4, "magic"))
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    (block_len,) = struct.unpack("<I", take(4, "config length"))
    config = {}
    for line in bytes(take(block_len, "config block")).decode("utf-8").splitlines():
        if not line.strip():
            continue
        key, _, value = line.partition("=")
        config[key] = value
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    crc = 0
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2, "tensor name length"))
        name = bytes(take(name_len, "tensor name")).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "tensor rank"))
        dims = struct.unpack(f"<{rank}I", take(4 * rank, "tensor dims"))
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if rank else 4
        payload = take(n_bytes, f"tensor {name!r} payload")
        crc = zlib.crc32(payload, crc)
        tensors[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    (stored_crc,) = struct.unpack("<I", take(4, "crc"))
    if stored_crc != (crc & 0xFFFFFFFF):
        raise CheckpointCorruptError(
            f"payload CRC mismatch: stored {stored_crc:#010x}, computed {crc & 0xFFFFFFFF:#010x}"
        )
    return config, tensors, stored_crc
