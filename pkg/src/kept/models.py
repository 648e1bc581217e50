"""Decoder-only transformer families used as source and target.

Both families share one pre-norm layout::

    x -> x + Attn(Norm(x)) -> x + SwiGLU(Norm(x))      (per block)
    logits = Norm(x) @ lm_head

and differ only in the normalizer: ``layer_norm`` (gamma, beta) for the
source family and ``rms_norm`` (theta) for the target family. Projections
carry no bias in either family.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from typing import Iterator

import numpy as np

from . import tensor as T
from .rng import stream, truncated_normal
from .tensor import Tensor

NORM_KINDS = ("layer_norm", "rms_norm")
PROJECTIONS = ("attn.q_proj", "attn.k_proj", "attn.v_proj", "attn.o_proj", "mlp.gate_proj", "mlp.up_proj", "mlp.down_proj")
BLOCK_NORMS = ("input_norm", "post_attn_norm")
INIT_STD = 0.02


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 256
    hidden_dim: int = 64
    mlp_dim: int = 192
    n_heads: int = 4
    head_dim: int = 16
    n_layers: int = 4
    rope_base: float = 1e6
    norm_kind: str = "rms_norm"
    max_seq_len: int = 512

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "hidden_dim", "mlp_dim", "n_heads", "head_dim", "n_layers", "max_seq_len"):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(f"{name} must be a positive integer")
        if self.n_heads * self.head_dim != self.hidden_dim:
            raise ConfigError("n_heads * head_dim must equal hidden_dim")
        if self.mlp_dim != 3 * self.hidden_dim:
            raise ConfigError("mlp_dim must equal 3 * hidden_dim")
        if self.head_dim % 2:
            raise ConfigError("head_dim must be even for rotary embeddings")
        if not self.rope_base > 1:
            raise ConfigError("rope_base must exceed 1")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"norm_kind must be one of {NORM_KINDS}")

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# 14B-class dimensions, kept for reference and config validation only.
FULL_SCALE = ModelConfig(
    vocab_size=84_608,
    hidden_dim=5_120,
    mlp_dim=15_360,
    n_heads=40,
    head_dim=128,
    n_layers=40,
    rope_base=5e7,
    norm_kind="rms_norm",
    max_seq_len=200_000,
)

TOY = ModelConfig()

PRESETS = {"toy": TOY, "full": FULL_SCALE}


def norm_param_names(norm_kind: str) -> tuple[str, ...]:
    return ("gamma", "beta") if norm_kind == "layer_norm" else ("theta",)


def norm_sites(config: ModelConfig) -> list[str]:
    """Norm-site prefixes in forward order (2 per block plus the final norm)."""
    sites = [f"layers.{i}.{n}" for i in range(config.n_layers) for n in BLOCK_NORMS]
    return sites + ["final_norm"]


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, m, V = config.hidden_dim, config.mlp_dim, config.vocab_size
    proj = {
        "attn.q_proj": (d, d),
        "attn.k_proj": (d, d),
        "attn.v_proj": (d, d),
        "attn.o_proj": (d, d),
        "mlp.gate_proj": (d, m),
        "mlp.up_proj": (d, m),
        "mlp.down_proj": (m, d),
    }
    norm = norm_param_names(config.norm_kind)
    shapes: dict[str, tuple[int, ...]] = {"embed.tokens": (V, d)}
    for i in range(config.n_layers):
        for site in BLOCK_NORMS:
            for p in norm:
                shapes[f"layers.{i}.{site}.{p}"] = (d,)
        for name in PROJECTIONS:
            shapes[f"layers.{i}.{name}"] = proj[name]
    for p in norm:
        shapes[f"final_norm.{p}"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


def is_norm_path(path: str) -> bool:
    return path.rsplit(".", 1)[-1] in ("gamma", "beta", "theta")


class ParameterStore(dict):
    """Ordered ``path -> Tensor`` map; the unit of checkpointing and mapping."""

    def clone(self, dtype=None) -> "ParameterStore":
        return ParameterStore(
            (k, Tensor(v.data.astype(dtype or v.dtype, copy=True), requires_grad=v.requires_grad))
            for k, v in self.items()
        )

    def astype(self, dtype) -> "ParameterStore":
        return self.clone(dtype)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.items()}

    @classmethod
    def from_arrays(cls, arrays, requires_grad: bool = True) -> "ParameterStore":
        return cls((k, Tensor(np.asarray(v), requires_grad=requires_grad)) for k, v in arrays.items())

    def digest(self) -> str:
        h = hashlib.sha256()
        for k, v in self.items():
            h.update(k.encode())
            h.update(str(v.dtype).encode())
            h.update(repr(v.shape).encode())
            h.update(np.ascontiguousarray(v.data).tobytes())
        return h.hexdigest()

    def n_elements(self) -> int:
        return sum(v.size for v in self.values())


def check_store(params: ParameterStore, config: ModelConfig) -> None:
    """Raise unless ``params`` has exactly the paths and shapes ``config`` implies."""
    expected = param_shapes(config)
    missing = [p for p in expected if p not in params]
    extra = [p for p in params if p not in expected]
    if missing or extra:
        raise ConfigError(f"parameter paths do not match config: missing={missing[:5]} extra={extra[:5]}")
    for path, shape in expected.items():
        if params[path].shape != shape:
            raise ConfigError(f"{path}: shape {params[path].shape} != expected {shape}")


def build_model(config: ModelConfig, seed: int, dtype=np.float32) -> ParameterStore:
    config.validate()
    rng = stream(seed, "init")
    store = ParameterStore()
    for path, shape in param_shapes(config).items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf in ("gamma", "theta"):
            arr = np.ones(shape, dtype=dtype)
        elif leaf == "beta":
            arr = np.zeros(shape, dtype=dtype)
        else:
            arr = truncated_normal(rng, shape, INIT_STD, dtype=dtype)
        store[path] = Tensor(arr, requires_grad=True)
    return store


@dataclass
class DistillOutputs:
    """Residual-stream slots (embedding output + one per block) and logits."""

    hiddens: list[Tensor] = field(default_factory=list)
    logits: Tensor | None = None
    # pre-norm activations per norm site, only when requested
    prenorm: dict[str, np.ndarray] = field(default_factory=dict)


def _norm(params: ParameterStore, config: ModelConfig, site: str, x: Tensor) -> Tensor:
    if config.norm_kind == "layer_norm":
        return T.layer_norm(x, params[f"{site}.gamma"], params[f"{site}.beta"])
    return T.rms_norm(x, params[f"{site}.theta"])


def _attention(params: ParameterStore, config: ModelConfig, prefix: str, x: Tensor) -> Tensor:
    B, L, d = x.shape
    H, hd = config.n_heads, config.head_dim

    def heads(name):
        y = T.reshape(x @ params[f"{prefix}.attn.{name}"], (B, L, H, hd))
        return T.transpose(y, (0, 2, 1, 3))

    # 1/sqrt(hd) applied to q: same scores, fewer elements than scaling [L x L]
    q = T.scale(T.rope_apply(heads("q_proj"), config.rope_base), 1.0 / np.sqrt(hd))
    k = T.rope_apply(heads("k_proj"), config.rope_base)
    v = heads("v_proj")
    scores = T.matmul(q, T.transpose(k, (0, 1, 3, 2)))
    ctx = T.matmul(T.row_softmax(scores, causal=True), v)
    ctx = T.reshape(T.transpose(ctx, (0, 2, 1, 3)), (B, L, d))
    return ctx @ params[f"{prefix}.attn.o_proj"]


def _mlp(params: ParameterStore, prefix: str, x: Tensor) -> Tensor:
    gate = T.silu(x @ params[f"{prefix}.mlp.gate_proj"])
    up = x @ params[f"{prefix}.mlp.up_proj"]
    return (gate * up) @ params[f"{prefix}.mlp.down_proj"]


def forward(
    params: ParameterStore,
    config: ModelConfig,
    tokens,
    want_hiddens: bool = False,
    want_prenorm: bool = False,
) -> DistillOutputs:
    """Run the model on ``[L]`` or ``[B, L]`` byte tokens.

    Output tensors keep the batch axis only if the input had one.
    """
    ids = np.asarray(tokens)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None, :]
    if ids.ndim != 2 or ids.shape[1] == 0:
        raise T.TensorError("tokens must be a non-empty [L] or [B, L] integer array")
    if ids.dtype.kind not in "iu":
        raise T.TensorError("tokens must be integers")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise T.TensorError(f"token id outside vocabulary [0, {config.vocab_size})")
    if ids.shape[1] > config.max_seq_len:
        raise T.TensorError(f"sequence length {ids.shape[1]} exceeds max_seq_len {config.max_seq_len}")

    out = DistillOutputs()
    x = T.embedding_gather(params["embed.tokens"], ids)
    if want_hiddens:
        out.hiddens.append(x)
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        if want_prenorm:
            out.prenorm[f"{prefix}.input_norm"] = x.data
        x = x + _attention(params, config, prefix, _norm(params, config, f"{prefix}.input_norm", x))
        if want_prenorm:
            out.prenorm[f"{prefix}.post_attn_norm"] = x.data
        x = x + _mlp(params, prefix, _norm(params, config, f"{prefix}.post_attn_norm", x))
        if want_hiddens:
            out.hiddens.append(x)
    if want_prenorm:
        out.prenorm["final_norm"] = x.data
    logits = _norm(params, config, "final_norm", x) @ params["lm_head"]
    if squeeze:
        out.hiddens = [T.reshape(h, h.shape[1:]) for h in out.hiddens]
        logits = T.reshape(logits, logits.shape[1:])
        out.prenorm = {k: v[0] for k, v in out.prenorm.items()}
    out.logits = logits
    return out


def lm_loss(outputs: DistillOutputs, targets) -> Tensor:
    """Mean next-token cross-entropy of ``outputs.logits`` against ``targets``."""
    targets = np.asarray(targets)
    if targets.shape != outputs.logits.shape[:-1]:
        raise T.TensorError(f"targets shape {targets.shape} does not match logits rows {outputs.logits.shape[:-1]}")
    return T.cross_entropy_mean(outputs.logits, targets)


def iter_norm_params(params: ParameterStore, config: ModelConfig) -> Iterator[tuple[str, dict[str, Tensor]]]:
    for site in norm_sites(config):
        yield site, {p: params[f"{site}.{p}"] for p in norm_param_names(config.norm_kind)}
