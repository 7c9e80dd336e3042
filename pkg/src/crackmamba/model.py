"""CrackMamba-tiny: encoder of SCVSS stages, skip-connected decoder, deep supervision.

Resolution walk for an S x S input::

    image ─┬─ skip stem (3x3/2) ──────────────────────────────── S/2 ──┐
           └─ patch embed (4x4/4) → stage1 S/4 → stage2 S/8 →          │
              stage3 S/16 → stage4 S/32                                │
    dec1 S/16 (skip stage3) → dec2 S/8 (skip stage2) → dec3 S/4        │
    (skip stage1) → dec4 S/2 (skip stem) ←─────────────────────────────┘
    upsample x2, concat image → segmentation head at S

Auxiliary 1x1 heads sit on dec2, dec3 and dec4 (S/8, S/4, S/2).
"""
from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .blocks import SCVSS, AuxHead, DecoderBlock, SegHead
from .errors import InvalidArgument, NumericFault, ParseError
from .nn import functional as F
from .nn.layers import Conv2d, LayerNorm, Module, Parameter
from .nn.tensor import Tensor, default_dtype

PRETRAINED_TAG = "pretrained"


@dataclass
class ModelConfig:
    stage_dims: tuple = (16, 32, 64, 128)
    stage_depths: tuple = (1, 1, 2, 1)
    state_dim: int = 8
    input_size: int = 64
    drop_path_rate: float = 0.1
    class_count: int = 2
    skip_dim: int = 8
    expand: int = 2
    mlp_ratio: int = 4
    sca_ratio: int = 4
    sca_kernel: int = 7
    use_cross_branch: bool = True
    use_snake_branch: bool = True
    use_conv_branch: bool = True
    use_sca: bool = True
    snake_family: str = "snake"   # "random" swaps the snake branch for a seeded random scan
    scan_seed: int = 0
    euler_discretization: bool = False
    upsample: str = "bilinear"
    dtype: str = "float32"

    def validate(self) -> None:
        def bad(name, why):
            raise InvalidArgument(f"invalid model config field {name!r}: {why}")

        if len(self.stage_dims) != 4 or any(int(d) < 1 for d in self.stage_dims):
            bad("stage_dims", "need 4 positive widths")
        if len(self.stage_depths) != 4 or any(int(d) < 1 for d in self.stage_depths):
            bad("stage_depths", "need 4 positive depths")
        if self.input_size < 32 or self.input_size % 32:
            bad("input_size", "must be a positive multiple of 32")
        if self.state_dim < 1:
            bad("state_dim", "must be positive")
        if not 0.0 <= self.drop_path_rate < 1.0:
            bad("drop_path_rate", "must be in [0, 1)")
        if self.class_count != 2:
            bad("class_count", "only binary segmentation is supported")
        if not (self.use_cross_branch or self.use_snake_branch or self.use_conv_branch):
            bad("use_cross_branch", "at least one SCVSS branch must be enabled")
        if self.snake_family not in ("snake", "random"):
            bad("snake_family", "must be 'snake' or 'random'")
        if self.upsample not in ("bilinear", "nearest"):
            bad("upsample", "must be 'bilinear' or 'nearest'")
        if self.dtype not in ("float32", "float64"):
            bad("dtype", "must be float32 or float64")

    def to_lines(self) -> list:
        out = []
        for key, val in asdict(self).items():
            if isinstance(val, (tuple, list)):
                val = ",".join(str(v) for v in val)
            out.append(f"{key}={val}")
        return out

    @classmethod
    def from_mapping(cls, values: dict) -> "ModelConfig":
        kwargs = {}
        known = {f.name: f for f in fields(cls)}
        for key, raw in values.items():
            if key not in known:
                raise InvalidArgument(f"unknown model config key {key!r}")
            kwargs[key] = coerce(known[key].default, raw, key)
        return cls(**kwargs)


def coerce(default, raw, key: str):
    """Parse ``raw`` (usually a string) to the type of ``default``."""
    if not isinstance(raw, str):
        return tuple(raw) if isinstance(default, tuple) else raw
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            kind = type(default[0]) if default else int
            return tuple(kind(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise InvalidArgument(f"cannot parse {raw!r} for config key {key!r}") from None
    return raw.strip()


@dataclass
class ModelOutput:
    logits_full: Tensor
    aux_logits: list = field(default_factory=list)   # coarse -> fine: S/8, S/4, S/2


class CrackMamba(Module):
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        c = config
        d0, d1, d2, d3 = c.stage_dims
        self.config = c
        self.skip_stem = SkipStem(3, c.skip_dim, rng)
        self.patch_embed = Conv2d(3, d0, 4, rng, stride=4)
        self.embed_norm = LayerNorm(d0, axis=1)

        total = sum(c.stage_depths)
        rates = np.linspace(0.0, c.drop_path_rate, total) if total > 1 else [c.drop_path_rate]
        self.stages, self.downsamples = [], []
        i = 0
        for s in range(4):
            blocks = []
            for _ in range(c.stage_depths[s]):
                blocks.append(SCVSS(
                    c.stage_dims[s], c.state_dim, rng,
                    use_cross=c.use_cross_branch, use_snake=c.use_snake_branch,
                    use_conv=c.use_conv_branch, use_sca=c.use_sca, drop_path=float(rates[i]),
                    expand=c.expand, mlp_ratio=c.mlp_ratio, sca_ratio=c.sca_ratio,
                    sca_kernel=c.sca_kernel, snake_family=c.snake_family,
                    scan_seed=c.scan_seed, euler=c.euler_discretization))
                i += 1
            self.stages.append(Stage(blocks))
            if s < 3:
                self.downsamples.append(Downsample(c.stage_dims[s], c.stage_dims[s + 1], rng))

        self.decoders = [
            DecoderBlock(d3, d2, d2, rng, c.upsample),
            DecoderBlock(d2, d1, d1, rng, c.upsample),
            DecoderBlock(d1, d0, d0, rng, c.upsample),
            DecoderBlock(d0, c.skip_dim, d0, rng, c.upsample),
        ]
        self.aux_heads = [AuxHead(d1, rng, c.class_count), AuxHead(d0, rng, c.class_count),
                          AuxHead(d0, rng, c.class_count)]
        self.head = SegHead(d0 + 3, d0, rng, c.class_count)

        for stage in self.stages:
            for blk in stage.blocks:
                if blk.cross_vss is not None:
                    blk.cross_vss.tag(PRETRAINED_TAG)
        self.assign_names()

    def forward(self, images: Tensor, rng: np.random.Generator | None = None) -> ModelOutput:
        size = self.config.input_size
        if images.ndim != 4 or images.shape[1] != 3 or images.shape[2:] != (size, size):
            raise InvalidArgument(f"expected [N,3,{size},{size}] images, got {list(images.shape)}")
        _check_finite(images, "input")
        if self.training and rng is None and self.config.drop_path_rate > 0:
            raise InvalidArgument("training-mode forward needs an rng for drop-path")

        skip0 = _check_finite(self.skip_stem(images), "skip_stem")
        x = _check_finite(self.embed_norm(self.patch_embed(images)), "patch_embed")
        feats = []
        for s, stage in enumerate(self.stages):
            x = _check_finite(stage(x, rng), f"stages.{s}")
            feats.append(x)
            if s < 3:
                x = self.downsamples[s](x)

        skips = [feats[2], feats[1], feats[0], skip0]
        aux = []
        for j, (dec, skip) in enumerate(zip(self.decoders, skips)):
            x = _check_finite(dec(x, skip), f"decoders.{j}")
            if j >= 1:
                aux.append(self.aux_heads[j - 1](x))
        up = F.upsample_bilinear(x, 2) if self.config.upsample == "bilinear" else F.upsample_nearest(x, 2)
        logits = _check_finite(self.head(F.concat([up, images], axis=1)), "head")
        return ModelOutput(logits, aux)


class SkipStem(Module):
    def __init__(self, cin, cout, rng):
        self.conv = Conv2d(cin, cout, 3, rng, stride=2, padding=1)
        self.norm = LayerNorm(cout, axis=1)

    def forward(self, x):
        return F.relu(self.norm(self.conv(x)))


class Stage(Module):
    def __init__(self, blocks):
        self.blocks = list(blocks)

    def forward(self, x, rng=None):
        for blk in self.blocks:
            x = blk(x, rng)
        return x


class Downsample(Module):
    """Channel layer norm, then a strided 2x2 conv."""

    def __init__(self, cin, cout, rng):
        self.norm = LayerNorm(cin, axis=1)
        self.conv = Conv2d(cin, cout, 2, rng, stride=2)

    def forward(self, x):
        return self.conv(self.norm(x))


def _check_finite(t: Tensor, where: str) -> Tensor:
    if not np.all(np.isfinite(t.data)):
        raise NumericFault(f"non-finite activation in {where}", where=where)
    return t


def build(config: ModelConfig, seed: int) -> CrackMamba:
    """Deterministically initialise a model from ``(config, seed)``."""
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    with default_dtype(config.dtype):
        return CrackMamba(config, rng)


def parameter_vector(model: Module) -> np.ndarray:
    return np.concatenate([p.data.ravel() for _, p in sorted(model.named_parameters())])


# ---------------------------------------------------------------- checkpoints
#
# little-endian: b"CMSS", u32 version, u32 config byte length, config text
# (UTF-8 key=value lines), u32 parameter count, then per parameter in sorted
# name order: u32 name length, name, u8 dtype tag, u8 rank, u32 dims[rank],
# raw values.

MAGIC = b"CMSS"
FORMAT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 1, np.dtype("<f8"): 2}
_TAG_DTYPES = {v: k for k, v in _DTYPE_TAGS.items()}


def save_checkpoint(path, model: CrackMamba, extra: dict | None = None) -> None:
    lines = model.config.to_lines() + [f"{k}={v}" for k, v in (extra or {}).items()]
    text = "\n".join(lines).encode("utf-8")
    params = sorted(model.named_parameters())
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(text)), text,
              struct.pack("<I", len(params))]
    for name, p in params:
        raw = name.encode("utf-8")
        arr = p.data.astype(p.data.dtype.newbyteorder("<"), copy=False)
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<BB", _DTYPE_TAGS[arr.dtype], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise ParseError(f"truncated checkpoint while reading {what}", self.pos)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_checkpoint(path) -> tuple:
    """Return ``(config_values, {name: array})`` from a checkpoint file."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4, "magic") != MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    version, text_len = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    text = r.take(text_len, "config block").decode("utf-8")
    config = {}
    for line in filter(None, text.split("\n")):
        key, _, val = line.partition("=")
        config[key] = val
    (count,) = r.unpack("<I", "parameter count")
    arrays = {}
    for _ in range(count):
        (name_len,) = r.unpack("<I", "name length")
        name = r.take(name_len, "name").decode("utf-8")
        start = r.pos
        tag, rank = r.unpack("<BB", "dtype/rank")
        if tag not in _TAG_DTYPES:
            raise ParseError(f"unknown dtype tag {tag}", start)
        dims = r.unpack(f"<{rank}I", "dims")
        dtype = _TAG_DTYPES[tag]
        nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(r.take(nbytes, name), dtype=dtype).reshape(dims).copy()
    return config, arrays


def load_checkpoint(path) -> tuple:
    """Rebuild the model stored at ``path``; returns ``(model, extra_values)``."""
    values, arrays = read_checkpoint(path)
    model_keys = {f.name for f in fields(ModelConfig)}
    config = ModelConfig.from_mapping({k: v for k, v in values.items() if k in model_keys})
    extra = {k: v for k, v in values.items() if k not in model_keys}
    model = build(config, seed=0)
    params = dict(model.named_parameters())
    if set(params) != set(arrays):
        missing = sorted(set(params) ^ set(arrays))[:3]
        raise InvalidArgument(f"checkpoint parameters do not match the config: {missing}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise InvalidArgument(f"shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].astype(p.dtype)
    return model, extra


__all__ = [
    "CrackMamba", "ModelConfig", "ModelOutput", "PRETRAINED_TAG", "build", "load_checkpoint",
    "parameter_vector", "read_checkpoint", "save_checkpoint", "Parameter",
]
