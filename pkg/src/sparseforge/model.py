"""Transformer-encoder classifier with per-parameter component tags.

The model is a plain parameter dictionary plus a functional forward pass.
Every tensor carries exactly one ComponentTag so pruning scopes and the
accounting reports can address components without knowing layer layout.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor


class ComponentTag(enum.Enum):
    TOKEN_EMBEDDING = "token_embedding"
    POSITION_EMBEDDING = "position_embedding"
    SEGMENT_EMBEDDING = "segment_embedding"
    ENCODER_LINEAR = "encoder_linear"
    LAYER_NORM_PARAM = "layer_norm_param"
    CLASSIFICATION_HEAD = "classification_head"
    BIAS = "bias"


EMBEDDING_TAGS = frozenset(
    {ComponentTag.TOKEN_EMBEDDING, ComponentTag.POSITION_EMBEDDING, ComponentTag.SEGMENT_EMBEDDING}
)


@dataclass(frozen=True)
class ArchitectureSpec:
    vocab_size: int
    hidden_dim: int
    num_layers: int
    num_heads: int
    ffn_dim: int
    max_positions: int
    num_segments: int
    num_labels: int

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if value < 1:
                raise ConfigError(f"{name} must be >= 1, got {value}")
        if self.hidden_dim % self.num_heads != 0:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}"
            )


# desk-scale default plus the two accounting-only presets
TINY = ArchitectureSpec(
    vocab_size=64, hidden_dim=32, num_layers=2, num_heads=2,
    ffn_dim=64, max_positions=16, num_segments=2, num_labels=4,
)
BERT_BASE = ArchitectureSpec(
    vocab_size=30522, hidden_dim=768, num_layers=12, num_heads=12,
    ffn_dim=3072, max_positions=512, num_segments=2, num_labels=2,
)
ROBERTA_LARGE = ArchitectureSpec(
    vocab_size=50265, hidden_dim=1024, num_layers=24, num_heads=16,
    ffn_dim=4096, max_positions=514, num_segments=1, num_labels=1,
)
ARCH_PRESETS = {"tiny": TINY, "bert-base": BERT_BASE, "roberta-large": ROBERTA_LARGE}


class Model:
    """Parameter store + tags + forward configuration."""

    def __init__(
        self,
        spec: ArchitectureSpec,
        params: dict[str, Tensor],
        tags: dict[str, ComponentTag],
        seed: int,
        dropout_rate: float = 0.1,
        activation: str = "gelu",
    ) -> None:
        if set(params) != set(tags):
            raise ConfigError("params and tags must cover the same names")
        if activation not in ("gelu", "relu"):
            raise ConfigError(f"unknown activation {activation!r}")
        self.spec = spec
        self.params = params
        self.tags = tags
        self.seed = seed
        self.dropout_rate = dropout_rate
        self.activation = activation

    def named_parameters(self) -> dict[str, Tensor]:
        return dict(self.params)

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype


def _truncated_normal(rng: np.random.Generator, shape: tuple[int, ...], std: float, dtype) -> np.ndarray:
    # resample anything beyond 2 sigma so no initial weight is an outlier
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out.astype(dtype)


def build_model(
    spec: ArchitectureSpec,
    seed: int,
    dropout_rate: float = 0.1,
    activation: str = "gelu",
    dtype=np.float64,
) -> Model:
    """Deterministically initialize all parameters for the given seed."""
    rng = np.random.default_rng(seed)
    H, F = spec.hidden_dim, spec.ffn_dim
    params: dict[str, Tensor] = {}
    tags: dict[str, ComponentTag] = {}

    def weight(name: str, shape: tuple[int, ...], tag: ComponentTag) -> None:
        params[name] = Tensor(_truncated_normal(rng, shape, 0.02, dtype), requires_grad=True)
        tags[name] = tag

    def bias(name: str, size: int) -> None:
        params[name] = Tensor(np.zeros(size, dtype=dtype), requires_grad=True)
        tags[name] = ComponentTag.BIAS

    def layer_norm_pair(prefix: str, size: int) -> None:
        params[f"{prefix}.g"] = Tensor(np.ones(size, dtype=dtype), requires_grad=True)
        params[f"{prefix}.b"] = Tensor(np.zeros(size, dtype=dtype), requires_grad=True)
        tags[f"{prefix}.g"] = ComponentTag.LAYER_NORM_PARAM
        tags[f"{prefix}.b"] = ComponentTag.LAYER_NORM_PARAM

    weight("embed.token", (spec.vocab_size, H), ComponentTag.TOKEN_EMBEDDING)
    weight("embed.position", (spec.max_positions, H), ComponentTag.POSITION_EMBEDDING)
    weight("embed.segment", (spec.num_segments, H), ComponentTag.SEGMENT_EMBEDDING)
    layer_norm_pair("embed.ln", H)

    for i in range(spec.num_layers):
        for role in ("q", "k", "v", "out"):
            weight(f"layer{i}.attn.{role}.w", (H, H), ComponentTag.ENCODER_LINEAR)
            bias(f"layer{i}.attn.{role}.b", H)
        layer_norm_pair(f"layer{i}.ln1", H)
        weight(f"layer{i}.ffn.up.w", (H, F), ComponentTag.ENCODER_LINEAR)
        bias(f"layer{i}.ffn.up.b", F)
        weight(f"layer{i}.ffn.down.w", (F, H), ComponentTag.ENCODER_LINEAR)
        bias(f"layer{i}.ffn.down.b", H)
        layer_norm_pair(f"layer{i}.ln2", H)

    weight("head.w", (H, spec.num_labels), ComponentTag.CLASSIFICATION_HEAD)
    bias("head.b", spec.num_labels)

    return Model(spec, params, tags, seed, dropout_rate=dropout_rate, activation=activation)


def _attention(model: Model, i: int, x: Tensor) -> Tensor:
    spec = model.spec
    p = model.params
    B, S, H = x.data.shape
    nh = spec.num_heads
    dh = H // nh

    def heads(t: Tensor) -> Tensor:
        return T.transpose(t.reshape(B, S, nh, dh), (0, 2, 1, 3))

    q = heads(T.matmul(x, p[f"layer{i}.attn.q.w"]) + p[f"layer{i}.attn.q.b"])
    k = heads(T.matmul(x, p[f"layer{i}.attn.k.w"]) + p[f"layer{i}.attn.k.b"])
    v = heads(T.matmul(x, p[f"layer{i}.attn.v.w"]) + p[f"layer{i}.attn.v.b"])
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    ctx = T.matmul(T.softmax(scores, axis=-1), v)
    ctx = T.transpose(ctx, (0, 2, 1, 3)).reshape(B, S, H)
    return T.matmul(ctx, p[f"layer{i}.attn.out.w"]) + p[f"layer{i}.attn.out.b"]


def forward(
    model: Model,
    token_ids: np.ndarray,
    segment_ids: np.ndarray | None = None,
    dropout_rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits of shape (batch, num_labels) from the first-token representation.

    Dropout fires only when dropout_rng is given (training mode); passing the
    same generator state replays the identical mask pattern.
    """
    spec = model.spec
    p = model.params
    token_ids = np.asarray(token_ids)
    B, S = token_ids.shape
    if S > spec.max_positions:
        raise ShapeError(f"sequence length {S} exceeds max_positions {spec.max_positions}")
    if segment_ids is None:
        segment_ids = np.zeros((B, S), dtype=np.int64)

    def drop(t: Tensor) -> Tensor:
        if dropout_rng is None or model.dropout_rate == 0.0:
            return t
        return T.dropout(t, model.dropout_rate, dropout_rng)

    positions = np.broadcast_to(np.arange(S), (B, S))
    x = (
        T.embedding(p["embed.token"], token_ids)
        + T.embedding(p["embed.position"], positions)
        + T.embedding(p["embed.segment"], segment_ids)
    )
    x = drop(T.layer_norm(x, p["embed.ln.g"], p["embed.ln.b"]))

    act = T.gelu if model.activation == "gelu" else T.relu
    for i in range(spec.num_layers):
        # post-norm: residual add first, then normalize
        x = T.layer_norm(x + drop(_attention(model, i, x)), p[f"layer{i}.ln1.g"], p[f"layer{i}.ln1.b"])
        h = T.matmul(act(T.matmul(x, p[f"layer{i}.ffn.up.w"]) + p[f"layer{i}.ffn.up.b"]), p[f"layer{i}.ffn.down.w"])
        h = h + p[f"layer{i}.ffn.down.b"]
        x = T.layer_norm(x + drop(h), p[f"layer{i}.ln2.g"], p[f"layer{i}.ln2.b"])

    first = x[:, 0, :]
    return T.matmul(first, p["head.w"]) + p["head.b"]


def parameters_by_component(model: Model, tags) -> dict[str, Tensor]:
    """All parameters whose tag is in `tags` (a ComponentTag or iterable of them)."""
    if isinstance(tags, ComponentTag):
        tags = {tags}
    else:
        tags = set(tags)
    return {name: t for name, t in model.params.items() if model.tags[name] in tags}


# ---------------------------------------------------------------------------
# checkpointing: manifest.json + one raw little-endian binary per tensor

_DTYPE_CODES = {np.dtype(np.float64): "<f8", np.dtype(np.float32): "<f4"}


def save_checkpoint(model: Model, path: str | Path, step: int = 0) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    for name, t in model.params.items():
        code = _DTYPE_CODES[np.dtype(t.dtype)]
        fname = name.replace(".", "_") + ".bin"
        (out / fname).write_bytes(np.ascontiguousarray(t.data).astype(code).tobytes())
        entries[name] = {"file": fname, "shape": list(t.data.shape), "dtype": code}
    manifest = {
        "format": 1,
        "spec": asdict(model.spec),
        "seed": model.seed,
        "step": step,
        "dropout_rate": model.dropout_rate,
        "activation": model.activation,
        "params": entries,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_checkpoint(path: str | Path) -> tuple[Model, int]:
    src = Path(path)
    manifest = json.loads((src / "manifest.json").read_text())
    spec = ArchitectureSpec(**manifest["spec"])
    template = build_model(
        spec,
        seed=manifest["seed"],
        dropout_rate=manifest["dropout_rate"],
        activation=manifest["activation"],
    )
    params: dict[str, Tensor] = {}
    for name, entry in manifest["params"].items():
        raw = np.frombuffer((src / entry["file"]).read_bytes(), dtype=entry["dtype"])
        params[name] = Tensor(raw.reshape(entry["shape"]).copy(), requires_grad=True)
    if set(params) != set(template.tags):
        raise ConfigError("checkpoint parameter names do not match the architecture")
    model = Model(
        spec, params, template.tags, manifest["seed"],
        dropout_rate=manifest["dropout_rate"], activation=manifest["activation"],
    )
    return model, manifest["step"]
