"""Encoder/projector/classifier parameters, EMA shadow copies, checkpoints.

The encoder is an MLP: every hidden layer is affine -> batch norm -> ReLU,
and the final layer is affine -> maxout over consecutive groups of k units,
so the embedding width is last_width / k.  A linear projector maps the
embedding to the (low-dimensional) space used by the pretext losses; the
classifier head and linear evaluation attach to the encoder output.
"""

from __future__ import annotations

import io
import json
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import (
    ShapeError,
    Tensor,
    batch_norm_eval,
    batch_norm_train,
    maxout_rows,
    relu,
)

CHECKPOINT_MAGIC = b"QMCKPT01"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Invalid model configuration."""


class CheckpointError(IOError):
    """Unreadable, corrupt, or incompatible checkpoint file."""


@dataclass
class EncoderConfig:
    input_dim: int
    layer_widths: tuple = (2048, 2048, 4096, 4096, 8192)
    maxout_k: int = 4
    projector_dim: int = 128
    batchnorm_momentum: float = 0.1
    bn_eps: float = 1e-5
    mlp_projector: bool = False  # optional 512-128 two-layer head, off by default
    num_classes: int | None = None

    def __post_init__(self):
        self.layer_widths = tuple(int(w) for w in self.layer_widths)
        if self.input_dim < 1:
            raise ConfigError(f"input_dim must be positive, got {self.input_dim}")
        if any(w < 1 for w in self.layer_widths):
            raise ConfigError(f"layer widths must be positive, got {self.layer_widths}")
        if self.layer_widths[-1] % self.maxout_k != 0:
            raise ConfigError(
                f"maxout_k={self.maxout_k} does not divide last width {self.layer_widths[-1]}")
        if not 0.0 < self.batchnorm_momentum < 1.0:
            raise ConfigError("batchnorm_momentum must be in (0, 1)")

    @property
    def embed_dim(self) -> int:
        return self.layer_widths[-1] // self.maxout_k

    def to_dict(self) -> dict:
        d = asdict(self)
        d["layer_widths"] = list(self.layer_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["layer_widths"] = tuple(d["layer_widths"])
        return cls(**d)


class ModelParams:
    """Named parameter tensors plus batch-norm running-stat buffers."""

    def __init__(self, config: EncoderConfig,
                 tensors: dict[str, Tensor],
                 buffers: dict[str, np.ndarray]):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self.tensors.items() if t.requires_grad}

    def zero_grad(self):
        for t in self.tensors.values():
            t.zero_grad()

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        tensors = {k: Tensor(t.data.copy(),
                             requires_grad=t.requires_grad if requires_grad is None
                             else requires_grad)
                   for k, t in self.tensors.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return ModelParams(self.config, tensors, buffers)

    def load_values(self, other: "ModelParams"):
        for k, t in self.tensors.items():
            t.data[...] = other.tensors[k].data
        for k, v in self.buffers.items():
            v[...] = other.buffers[k]

    def all_finite(self) -> bool:
        return (all(np.all(np.isfinite(t.data)) for t in self.tensors.values())
                and all(np.all(np.isfinite(v)) for v in self.buffers.values()))


@dataclass
class EmaParams:
    params: ModelParams
    decay: float = 0.9


def init_params(config: EncoderConfig, seed: int) -> ModelParams:
    """He-initialized weights, zero biases, unit batch-norm scale, (0, 1) stats."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    buffers: dict[str, np.ndarray] = {}

    fan_in = config.input_dim
    n = len(config.layer_widths)
    for i, width in enumerate(config.layer_widths):
        scale = np.sqrt(2.0 / fan_in)
        tensors[f"layer{i}.weight"] = Tensor(
            rng.normal(0.0, scale, size=(fan_in, width)), requires_grad=True)
        tensors[f"layer{i}.bias"] = Tensor(np.zeros(width), requires_grad=True)
        if i < n - 1:  # hidden layers carry batch norm
            tensors[f"layer{i}.bn_scale"] = Tensor(np.ones(width), requires_grad=True)
            tensors[f"layer{i}.bn_bias"] = Tensor(np.zeros(width), requires_grad=True)
            buffers[f"layer{i}.running_mean"] = np.zeros(width)
            buffers[f"layer{i}.running_var"] = np.ones(width)
        fan_in = width

    embed = config.embed_dim
    if config.mlp_projector:
        tensors["projector.hidden_weight"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / embed), size=(embed, 512)), requires_grad=True)
        tensors["projector.hidden_bias"] = Tensor(np.zeros(512), requires_grad=True)
        proj_in = 512
    else:
        proj_in = embed
    tensors["projector.weight"] = Tensor(
        rng.normal(0.0, np.sqrt(2.0 / proj_in), size=(proj_in, config.projector_dim)),
        requires_grad=True)
    tensors["projector.bias"] = Tensor(np.zeros(config.projector_dim), requires_grad=True)

    if config.num_classes:
        tensors["classifier.weight"] = Tensor(
            rng.normal(0.0, np.sqrt(2.0 / embed), size=(embed, config.num_classes)),
            requires_grad=True)
        tensors["classifier.bias"] = Tensor(np.zeros(config.num_classes), requires_grad=True)

    return ModelParams(config, tensors, buffers)


def encoder_forward(params: ModelParams, x: Tensor, mode: str = "train") -> Tensor:
    """Map a B x input_dim batch to B x embed_dim embeddings.

    Train mode normalizes with batch statistics and updates the running
    buffers; eval mode uses the stored running statistics and mutates nothing.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = params.config
    if x.shape[1] != cfg.input_dim:
        raise ShapeError(f"expected input width {cfg.input_dim}, got shape {x.shape}")
    h = x
    n = len(cfg.layer_widths)
    for i in range(n):
        h = h @ params.tensors[f"layer{i}.weight"] + params.tensors[f"layer{i}.bias"]
        if i < n - 1:
            gamma = params.tensors[f"layer{i}.bn_scale"]
            beta = params.tensors[f"layer{i}.bn_bias"]
            if mode == "train":
                h, mu, var = batch_norm_train(h, gamma, beta, eps=cfg.bn_eps)
                m = cfg.batchnorm_momentum
                params.buffers[f"layer{i}.running_mean"][...] = (
                    (1 - m) * params.buffers[f"layer{i}.running_mean"] + m * mu)
                params.buffers[f"layer{i}.running_var"][...] = (
                    (1 - m) * params.buffers[f"layer{i}.running_var"] + m * var)
            else:
                h = batch_norm_eval(h, gamma, beta,
                                    params.buffers[f"layer{i}.running_mean"],
                                    params.buffers[f"layer{i}.running_var"],
                                    eps=cfg.bn_eps)
            h = relu(h)
    return maxout_rows(h, cfg.maxout_k)


def projector_forward(params: ModelParams, h: Tensor) -> Tensor:
    if params.config.mlp_projector:
        h = relu(h @ params.tensors["projector.hidden_weight"]
                 + params.tensors["projector.hidden_bias"])
    return h @ params.tensors["projector.weight"] + params.tensors["projector.bias"]


def classifier_forward(params: ModelParams, h: Tensor) -> Tensor:
    return h @ params.tensors["classifier.weight"] + params.tensors["classifier.bias"]


def ema_update(ema: EmaParams, student: ModelParams):
    """e <- decay * e + (1 - decay) * s; running statistics are copied."""
    tau = ema.decay
    for k, t in ema.params.tensors.items():
        s = student.tensors[k]
        if t.data.shape != s.data.shape:
            raise ConfigError(f"EMA shape mismatch for {k}: {t.data.shape} vs {s.data.shape}")
        t.data[...] = tau * t.data + (1.0 - tau) * s.data
    for k, v in ema.params.buffers.items():
        v[...] = student.buffers[k]


# -- checkpoint container ------------------------------------------------------
#
# Layout: 8-byte magic, 8-byte little-endian header length, UTF-8 JSON header,
# then the named arrays as raw little-endian floats in header order.

def _array_entries(arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    for name in arrays:
        arr = arrays[name]
        entries.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": str(arr.dtype),
            "offset": offset,
            "nbytes": arr.nbytes,
        })
        offset += arr.nbytes
    return entries


def save_checkpoint(path, params: ModelParams, ema: EmaParams | None = None,
                    optimizer_state: dict[str, np.ndarray] | None = None,
                    metadata: dict | None = None,
                    queue_storage: np.ndarray | None = None):
    arrays: dict[str, np.ndarray] = {}
    for k, t in params.tensors.items():
        arrays[f"params/{k}"] = np.ascontiguousarray(t.data)
    for k, v in params.buffers.items():
        arrays[f"buffers/{k}"] = np.ascontiguousarray(v)
    header: dict = {
        "format_version": CHECKPOINT_VERSION,
        "config": params.config.to_dict(),
        "metadata": metadata or {},
    }
    if ema is not None:
        header["ema_decay"] = ema.decay
        for k, t in ema.params.tensors.items():
            arrays[f"ema/{k}"] = np.ascontiguousarray(t.data)
        for k, v in ema.params.buffers.items():
            arrays[f"ema_buffers/{k}"] = np.ascontiguousarray(v)
    if optimizer_state:
        for k, v in optimizer_state.items():
            arrays[f"optimizer/{k}"] = np.ascontiguousarray(v)
    if queue_storage is not None:
        arrays["queue/storage"] = np.ascontiguousarray(queue_storage)

    header["arrays"] = _array_entries(arrays)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for name in arrays:
            data = arrays[name]
            if data.dtype.byteorder == ">":
                data = data.astype(data.dtype.newbyteorder("<"))
            fh.write(data.tobytes())


def load_checkpoint(path, expected_config: EncoderConfig | None = None):
    """Returns a dict with params, ema (or None), optimizer_state, metadata,
    and queue_storage (or None)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    buf = io.BytesIO(raw)
    if buf.read(8) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic)")
    hlen = int.from_bytes(buf.read(8), "little")
    try:
        header = json.loads(buf.read(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from None
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {header.get('format_version')} != {CHECKPOINT_VERSION}")
    config = EncoderConfig.from_dict(header["config"])
    if expected_config is not None and config.to_dict() != expected_config.to_dict():
        raise CheckpointError(f"{path}: checkpoint config does not match expected config")

    base = buf.tell()
    arrays: dict[str, np.ndarray] = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        end = start + entry["nbytes"]
        if end > len(raw):
            raise CheckpointError(f"{path}: truncated array {entry['name']}")
        arr = np.frombuffer(raw[start:end], dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()

    def build(prefix_t, prefix_b):
        tensors = {k[len(prefix_t):]: Tensor(v, requires_grad=True)
                   for k, v in arrays.items() if k.startswith(prefix_t)}
        buffers = {k[len(prefix_b):]: v
                   for k, v in arrays.items() if k.startswith(prefix_b)}
        return ModelParams(config, tensors, buffers)

    params = build("params/", "buffers/")
    ema = None
    if any(k.startswith("ema/") for k in arrays):
        ema = EmaParams(build("ema/", "ema_buffers/"), decay=header.get("ema_decay", 0.9))
    optimizer_state = {k[len("optimizer/"):]: v
                       for k, v in arrays.items() if k.startswith("optimizer/")}
    return {
        "params": params,
        "ema": ema,
        "optimizer_state": optimizer_state,
        "metadata": header.get("metadata", {}),
        "queue_storage": arrays.get("queue/storage"),
        "config": config,
    }
