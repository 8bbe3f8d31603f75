"""The two-branch range model: location encoder, per-species token table,
text projection head, occurrence scoring, and checkpoint persistence.

Locations and species meet in a shared 256-d space; the probability that a
species occurs at a location is the sigmoid of the dot product between the
location feature vector and the species vector. Species vectors come either
from a directly optimized token table row (training-set species only) or
from the text head applied to a frozen-LLM text embedding.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numkit as nk
from .errors import ConfigError, DimensionError, FormatError, UnknownSpeciesError
from .numkit import Tensor


@dataclass(frozen=True)
class ModelConfig:
    env_channels: int = 0
    residual_blocks: int = 4
    feature_dim: int = 256
    text_in: int = 4096
    text_hidden: int = 512
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.residual_blocks < 0 or self.feature_dim < 1:
            raise ConfigError("residual_blocks must be >= 0, feature_dim >= 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"unknown precision {self.precision!r}")

    @property
    def input_dim(self) -> int:
        return 4 + self.env_channels

    @property
    def dtype(self):
        return np.float32 if self.precision == "float32" else np.float64


@dataclass
class ModelParams:
    """All trainable tensors plus the species id -> token row mapping."""

    config: ModelConfig
    species_ids: list[int]
    loc_w_in: Tensor
    loc_b_in: Tensor
    blocks: list[tuple[Tensor, Tensor, Tensor, Tensor]]
    tokens: Tensor
    text_w1: Tensor
    text_b1: Tensor
    text_w2: Tensor
    text_b2: Tensor
    text_w3: Tensor
    text_b3: Tensor
    species_index: dict[int, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.species_index:
            self.species_index = {sid: i for i, sid in enumerate(self.species_ids)}

    def parameters(self) -> list[Tensor]:
        out = [self.loc_w_in, self.loc_b_in]
        for w1, b1, w2, b2 in self.blocks:
            out.extend([w1, b1, w2, b2])
        out.append(self.tokens)
        out.extend([self.text_w1, self.text_b1, self.text_w2, self.text_b2,
                    self.text_w3, self.text_b3])
        return out

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.parameters()))


def _kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def init_model(config: ModelConfig, species_ids: list[int]) -> ModelParams:
    """Seed-deterministic initialization: Kaiming-uniform affine weights,
    zero biases, token rows ~ N(0, 0.02^2)."""
    rng = np.random.default_rng(config.seed)
    dt = config.dtype
    d = config.feature_dim

    def affine_pair(fan_in, fan_out, name):
        w = Tensor(_kaiming_uniform(rng, fan_in, fan_out, dt),
                   requires_grad=True, name=f"{name}.w", dtype=dt)
        b = Tensor(np.zeros(fan_out, dtype=dt), requires_grad=True,
                   name=f"{name}.b", dtype=dt)
        return w, b

    loc_w_in, loc_b_in = affine_pair(config.input_dim, d, "loc.in")
    blocks = []
    for i in range(config.residual_blocks):
        w1, b1 = affine_pair(d, d, f"loc.block{i}.a")
        w2, b2 = affine_pair(d, d, f"loc.block{i}.b")
        blocks.append((w1, b1, w2, b2))
    tokens = Tensor(rng.normal(0.0, 0.02, size=(len(species_ids), d)).astype(dt),
                    requires_grad=True, name="tokens", dtype=dt)
    text_w1, text_b1 = affine_pair(config.text_in, config.text_hidden, "text.l1")
    text_w2, text_b2 = affine_pair(config.text_hidden, config.text_hidden, "text.l2")
    text_w3, text_b3 = affine_pair(config.text_hidden, d, "text.l3")
    return ModelParams(config=config, species_ids=list(species_ids),
                       loc_w_in=loc_w_in, loc_b_in=loc_b_in, blocks=blocks,
                       tokens=tokens, text_w1=text_w1, text_b1=text_b1,
                       text_w2=text_w2, text_b2=text_b2,
                       text_w3=text_w3, text_b3=text_b3)


# ---------------------------------------------------------------------------
# Forward passes (record onto the active tape when training)
# ---------------------------------------------------------------------------

def location_features(params: ModelParams, inputs) -> Tensor:
    """Encode position inputs (B, 4+C) or (4+C,) to location features.

    Input affine + relu, then residual blocks x + W2 relu(W1 x), identity
    readout (features stay signed for the dot-product head)."""
    x = inputs if isinstance(inputs, Tensor) else Tensor(
        np.asarray(inputs, dtype=params.config.dtype), dtype=params.config.dtype)
    if x.data.shape[-1] != params.config.input_dim:
        raise DimensionError(
            f"position input width {x.data.shape[-1]} != "
            f"model input width {params.config.input_dim}")
    h = nk.relu(nk.affine(x, params.loc_w_in, params.loc_b_in))
    for w1, b1, w2, b2 in params.blocks:
        inner = nk.affine(nk.relu(nk.affine(h, w1, b1)), w2, b2)
        h = nk.add(h, inner)
    return h


def species_token(params: ModelParams, species_id: int) -> np.ndarray:
    """Token-table row for a training-set species id (copy)."""
    row = params.species_index.get(species_id)
    if row is None:
        raise UnknownSpeciesError(species_id)
    return params.tokens.data[row].copy()


def text_species_embedding(params: ModelParams, embedding) -> Tensor:
    """Project a frozen text embedding (E,) or (B, E) to the species space."""
    e = embedding if isinstance(embedding, Tensor) else Tensor(
        np.asarray(embedding, dtype=params.config.dtype), dtype=params.config.dtype)
    if e.data.shape[-1] != params.config.text_in:
        raise DimensionError(
            f"text embedding width {e.data.shape[-1]} != "
            f"declared width {params.config.text_in}")
    if not np.all(np.isfinite(e.data)):
        raise ValueError("text embedding contains non-finite values")
    h = nk.relu(nk.affine(e, params.text_w1, params.text_b1))
    h = nk.relu(nk.affine(h, params.text_w2, params.text_b2))
    return nk.affine(h, params.text_w3, params.text_b3)


def occurrence_probability(loc_feat: np.ndarray, species_vec: np.ndarray) -> float:
    """sigma(loc_feat . species_vec); symmetric in its arguments."""
    a = np.asarray(loc_feat, dtype=np.float64)
    b = np.asarray(species_vec, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise DimensionError(f"feature shapes {a.shape} vs {b.shape}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("non-finite input to occurrence_probability")
    z = float(a @ b)
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    ez = np.exp(z)
    return float(ez / (1.0 + ez))


def location_features_np(params: ModelParams, inputs: np.ndarray) -> np.ndarray:
    """Inference fast path: same forward math, plain arrays, no recording."""
    return location_features(params, inputs).data


def text_species_vector_np(params: ModelParams, embedding: np.ndarray) -> np.ndarray:
    return text_species_embedding(params, embedding).data


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_CKPT_MAGIC = b"LESM"
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def save_checkpoint(params: ModelParams, path) -> None:
    """Checkpoint: magic 'LESM', version u16, length-prefixed JSON config
    block, tensor table (name, dtype, rank, extents, offset), raw
    little-endian payloads."""
    meta = {
        "config": {
            "env_channels": params.config.env_channels,
            "residual_blocks": params.config.residual_blocks,
            "feature_dim": params.config.feature_dim,
            "text_in": params.config.text_in,
            "text_hidden": params.config.text_hidden,
            "seed": params.config.seed,
            "precision": params.config.precision,
        },
        "species_ids": params.species_ids,
    }
    tensors = [(p.name, p) for p in params.parameters()]
    meta_blob = json.dumps(meta, sort_keys=True).encode("utf-8")

    table = io.BytesIO()
    payload = io.BytesIO()
    table.write(struct.pack("<I", len(tensors)))
    for name, t in tensors:
        nb = name.encode("utf-8")
        arr = t.data
        table.write(struct.pack("<H", len(nb)))
        table.write(nb)
        table.write(struct.pack("<BB", _DTYPE_CODES[arr.dtype], arr.ndim))
        for ext in arr.shape:
            table.write(struct.pack("<I", ext))
        table.write(struct.pack("<Q", payload.tell()))
        payload.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())

    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<H", 1))
        f.write(struct.pack("<I", len(meta_blob)))
        f.write(meta_blob)
        f.write(table.getvalue())
        f.write(payload.getvalue())


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != _CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}", offset=0)
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != 1:
        raise FormatError(f"{path}: unsupported checkpoint version {version}",
                          offset=4)
    (meta_len,) = struct.unpack_from("<I", buf, 6)
    off = 10
    try:
        meta = json.loads(buf[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"{path}: bad config block: {e}", offset=off) from e
    off += meta_len

    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    entries = []
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off:off + name_len].decode("utf-8")
        off += name_len
        code, rank = struct.unpack_from("<BB", buf, off)
        off += 2
        shape = struct.unpack_from(f"<{rank}I", buf, off) if rank else ()
        off += 4 * rank
        (data_off,) = struct.unpack_from("<Q", buf, off)
        off += 8
        entries.append((name, code, shape, data_off))
    payload_base = off

    config = ModelConfig(**meta["config"])
    arrays = {}
    for name, code, shape, data_off in entries:
        dt = _CODE_DTYPES.get(code)
        if dt is None:
            raise FormatError(f"{path}: unknown dtype code {code}",
                              offset=payload_base + data_off)
        n = int(np.prod(shape)) if shape else 1
        start = payload_base + data_off
        end = start + n * dt.itemsize
        if end > len(buf):
            raise FormatError(f"{path}: truncated tensor {name!r}", offset=len(buf))
        arrays[name] = np.frombuffer(buf, dtype=dt, count=n,
                                     offset=start).reshape(shape).copy()

    def take(name):
        try:
            arr = arrays[name]
        except KeyError:
            raise FormatError(f"{path}: missing tensor {name!r}") from None
        return Tensor(arr, requires_grad=True, name=name, dtype=arr.dtype)

    blocks = [(take(f"loc.block{i}.a.w"), take(f"loc.block{i}.a.b"),
               take(f"loc.block{i}.b.w"), take(f"loc.block{i}.b.b"))
              for i in range(config.residual_blocks)]
    return ModelParams(config=config, species_ids=list(meta["species_ids"]),
                       loc_w_in=take("loc.in.w"), loc_b_in=take("loc.in.b"),
                       blocks=blocks, tokens=take("tokens"),
                       text_w1=take("text.l1.w"), text_b1=take("text.l1.b"),
                       text_w2=take("text.l2.w"), text_b2=take("text.l2.b"),
                       text_w3=take("text.l3.w"), text_b3=take("text.l3.b"))
