"""SF-UNet assembly: encoder, MPCA/FSA attention chain, decoders, head,
parameter registry ownership, and binary checkpoint serialization.

Checkpoint format (little-endian): magic "SFUN", u32 version (=1), u32
config-blob length + UTF-8 config text, u32 tensor count, then per tensor
u16 name length, UTF-8 name, u8 dtype tag (0=f32, 1=f64), u8 rank,
rank x u32 dims, raw scalar data. An optional second tensor table with the
same layout carries optimizer state.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, fields

import numpy as np

from . import blocks
from .blocks import VGG_STAGE_CHANNELS
from .errors import CheckpointError, ConfigError, ShapeError
from .tensor import ParameterRegistry, RealTensor4

MAGIC = b"SFUN"
VERSION = 1
_DTYPE_TAGS = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_TAG_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


@dataclass
class ModelConfig:
    """Architecture hyperparameters left open by the training recipe."""

    input_channels: int = 3
    n_classes: int = 2
    input_hw: tuple[int, int] = (224, 224)
    mask_rho: float = 0.5
    filter_mode: str = "broadcast"
    precision: str = "double"
    use_mpca: bool = True
    use_fsa: bool = True

    #: encoder stage widths, fixed
    encoder_channels = VGG_STAGE_CHANNELS

    def validate(self) -> None:
        h, w = self.input_hw
        if self.input_channels < 1:
            raise ConfigError(f"input_channels must be >= 1, got {self.input_channels}")
        if self.n_classes < 2:
            raise ConfigError(f"n_classes must be >= 2, got {self.n_classes}")
        if h % 16 or w % 16 or h < 16 or w < 16:
            raise ConfigError(f"input_hw must be positive and divisible by 16, got {h}x{w}")
        if not 0.0 < self.mask_rho <= 1.0:
            raise ConfigError(f"mask_rho must lie in (0, 1], got {self.mask_rho}")
        if self.filter_mode not in ("broadcast", "per-channel"):
            raise ConfigError(f"filter_mode must be 'broadcast' or 'per-channel', got '{self.filter_mode}'")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got '{self.precision}'")

    @property
    def dtype(self):
        return np.float32 if self.precision == "single" else np.float64

    def to_text(self) -> str:
        h, w = self.input_hw
        lines = [
            f"input_channels = {self.input_channels}",
            f"n_classes = {self.n_classes}",
            f"input_hw = {h}x{w}",
            f"mask_rho = {self.mask_rho!r}",
            f"filter_mode = {self.filter_mode}",
            f"precision = {self.precision}",
            f"use_mpca = {str(self.use_mpca).lower()}",
            f"use_fsa = {str(self.use_fsa).lower()}",
        ]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        cfg = cls()
        for raw in text.splitlines():
            line = raw.strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"malformed config line: {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            set_config_field(cfg, key, value)
        cfg.validate()
        return cfg


def _parse_bool(value: str) -> bool:
    v = value.strip().lower()
    if v in ("true", "1", "yes", "on"):
        return True
    if v in ("false", "0", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got '{value}'")


def _parse_hw(value: str) -> tuple[int, int]:
    for sep in ("x", ","):
        if sep in value:
            a, b = value.split(sep, 1)
            return int(a), int(b)
    v = int(value)
    return v, v


_MODEL_FIELD_PARSERS = {
    "input_channels": int,
    "n_classes": int,
    "input_hw": _parse_hw,
    "mask_rho": float,
    "filter_mode": str,
    "precision": str,
    "use_mpca": _parse_bool,
    "use_fsa": _parse_bool,
}


def set_config_field(cfg: ModelConfig, key: str, value: str) -> None:
    parser = _MODEL_FIELD_PARSERS.get(key)
    if parser is None:
        raise ConfigError(f"unknown model config key '{key}'")
    try:
        setattr(cfg, key, parser(value))
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"bad value for '{key}': {value!r} ({exc})") from None


class SFUNet:
    """The full network: encoder, MPCA 1-4, FSA 1-4, decoders 4-1, head.

    FSA masks and filters are bound to the configured input resolution;
    forward rejects other resolutions.
    """

    def __init__(self, config: ModelConfig, seed: int = 0):
        config.validate()
        self.config = config
        self.registry = ParameterRegistry()
        rng = np.random.default_rng(seed)
        dtype = config.dtype
        chans = VGG_STAGE_CHANNELS
        h, w = config.input_hw

        self.encoder = blocks.Encoder(self.registry, config.input_channels, rng, dtype)
        self.mpca = []
        if config.use_mpca:
            self.mpca = [
                blocks.MPCABlock(self.registry, f"mpca{i + 1}", chans[i], chans[i + 1], rng, dtype)
                for i in range(4)
            ]
        self.fsa = []
        if config.use_fsa:
            self.fsa = [
                blocks.FSABlock(
                    self.registry, f"fsa{i + 1}", chans[i], (h >> i, w >> i),
                    config.mask_rho, config.filter_mode, rng, dtype,
                )
                for i in range(4)
            ]
        self.decoders = [
            blocks.DecoderBlock(self.registry, f"dec{i + 1}", chans[i], chans[i + 1], rng, dtype)
            for i in range(4)
        ]
        self.head = blocks.PredictionHead(self.registry, "head", chans[0], config.n_classes, rng, dtype)

    # -- forward ------------------------------------------------------------

    def forward(self, image: RealTensor4) -> RealTensor4:
        n, c, h, w = image.dims
        if (h, w) != tuple(self.config.input_hw):
            raise ShapeError(
                f"model built for {self.config.input_hw[0]}x{self.config.input_hw[1]} "
                f"inputs, got {h}x{w} (FSA filters are resolution-bound)"
            )
        if c != self.config.input_channels:
            raise ShapeError(f"model expects {self.config.input_channels} input channels, got {c}")
        feats = self.encoder(image)
        skips = []
        for i in range(4):
            s = feats[i]
            if self.mpca:
                s = self.mpca[i](feats[i], feats[i + 1])
            if self.fsa:
                s = self.fsa[i](s)
            skips.append(s)
        below = feats[4]
        for i in range(3, -1, -1):
            below = self.decoders[i](skips[i], below)
        return self.head(below)

    def predict_classes(self, image: RealTensor4) -> np.ndarray:
        """Per-pixel argmax class indices, [N,H,W]."""
        return np.argmax(self.forward(image).data, axis=1)

    # -- reporting ----------------------------------------------------------

    def parameter_summary(self) -> dict[str, int]:
        reg = self.registry
        return {
            "total": reg.total_parameters(),
            "encoder": reg.total_parameters("enc"),
            "mpca": reg.total_parameters("mpca"),
            "fsa": reg.total_parameters("fsa"),
            "decoder": reg.total_parameters("dec"),
            "head": reg.total_parameters("head"),
        }


# ---------------------------------------------------------------------------
# checkpoint serialization


def _write_table(buf: io.BytesIO, tensors: dict[str, np.ndarray]) -> None:
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        tag = _DTYPE_TAGS.get(arr.dtype)
        if tag is None:
            raise CheckpointError(f"tensor '{name}' has unsupported dtype {arr.dtype}")
        encoded = name.encode("utf-8")
        buf.write(struct.pack("<H", len(encoded)))
        buf.write(encoded)
        buf.write(struct.pack("<BB", tag, arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr).astype(_TAG_DTYPES[tag], copy=False).tobytes())


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError("truncated checkpoint")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u8(self) -> int:
        return self.take(1)[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def _read_table(r: _Reader) -> dict[str, np.ndarray]:
    count = r.u32()
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name = r.take(r.u16()).decode("utf-8")
        tag = r.u8()
        if tag not in _TAG_DTYPES:
            raise CheckpointError(f"unknown dtype tag {tag} for tensor '{name}'")
        rank = r.u8()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        dtype = _TAG_DTYPES[tag]
        raw = r.take(int(np.prod(dims, dtype=np.int64)) * dtype.itemsize)
        tensors[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).copy()
    return tensors


def save(model: SFUNet, path, extra_tensors: dict[str, np.ndarray] | None = None) -> None:
    """Write the model (and optionally optimizer tensors) to ``path``."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    blob = model.config.to_text().encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    _write_table(buf, {p.name: p.value.data for p in model.registry})
    if extra_tensors is not None:
        _write_table(buf, extra_tensors)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load(path, expect_config: ModelConfig | None = None) -> tuple[SFUNet, dict[str, np.ndarray] | None]:
    """Rebuild a model from a checkpoint; returns (model, optimizer tensors or None).

    With ``expect_config``, every architecture-defining field of the stored
    config must match it.
    """
    try:
        with open(path, "rb") as fh:
            r = _Reader(fh.read())
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint '{path}': {exc}") from None
    if r.take(4) != MAGIC:
        raise CheckpointError(f"'{path}' is not a checkpoint (bad magic)")
    version = r.u32()
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    config = ModelConfig.from_text(r.take(r.u32()).decode("utf-8"))
    if expect_config is not None:
        mismatched = [
            f.name for f in fields(ModelConfig)
            if getattr(config, f.name) != getattr(expect_config, f.name)
        ]
        if mismatched:
            raise ConfigError(f"checkpoint config mismatch on field(s): {', '.join(mismatched)}")
    tensors = _read_table(r)
    model = SFUNet(config, seed=0)
    expected = set(model.registry.names())
    stored = set(tensors)
    if expected != stored:
        missing = sorted(expected - stored)
        surplus = sorted(stored - expected)
        raise CheckpointError(f"checkpoint tensor set mismatch: missing {missing}, surplus {surplus}")
    for param in model.registry:
        arr = tensors[param.name]
        if arr.shape != param.dims:
            raise CheckpointError(
                f"tensor '{param.name}' dim mismatch: checkpoint {arr.shape} vs model {param.dims}"
            )
        if arr.dtype != param.value.dtype:
            raise CheckpointError(
                f"tensor '{param.name}' dtype mismatch: checkpoint {arr.dtype} vs model {param.value.dtype}"
            )
        param.assign(arr)
    extra = None
    if not r.exhausted:
        extra = _read_table(r)
    return model, extra
