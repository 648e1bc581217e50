"""Frozen-teacher distillation (XKD), uptraining and pretraining loops.

All three loops share the optimizer (AdamW), the warmup + cosine schedule
and the metrics stream; they differ only in the loss:

* ``xkd_hidden``  squared L2 between residual-stream slots, per position and slot
* ``xkd_logits``  squared L2 between LM-head outputs, per position
* ``uptrain`` / ``pretrain``  next-token cross-entropy on the data
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Iterator

import numpy as np

from . import tensor as T
from .models import DistillOutputs, ModelConfig, ParameterStore, forward, lm_loss
from .tensor import NonFiniteError, Tensor, no_grad

OBJECTIVES = ("xkd_hidden", "xkd_logits", "uptrain", "pretrain")


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"non-finite loss at step {step}" + (f": {detail}" if detail else ""))
        self.step = step


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "xkd_logits"
    lr: float = 3e-4
    warmup_steps: int = 50
    total_steps: int = 3000
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    seq_len: int = 128
    batch_sequences: int = 8
    seed: int = 0
    eval_every: int = 100

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(self.betas))
        if self.objective not in OBJECTIVES:
            raise ValueError(f"objective must be one of {OBJECTIVES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.total_steps < 0:
            raise ValueError("total_steps must be nonnegative")
        if not 0 <= self.warmup_steps <= max(self.total_steps, 0):
            raise ValueError("warmup_steps must lie in [0, total_steps]")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be nonnegative")
        if not all(0 < b < 1 for b in self.betas) or len(self.betas) != 2:
            raise ValueError("betas must be a pair in (0, 1)")
        if self.seq_len < 1 or self.batch_sequences < 1 or self.eval_every < 1:
            raise ValueError("seq_len, batch_sequences and eval_every must be positive")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# full-scale distillation settings; TOY_TRAIN is sized for a desk CPU
FULL_TRAIN = TrainConfig(lr=1e-5, warmup_steps=100, total_steps=30_000, seq_len=4096, batch_sequences=1)
TOY_TRAIN = TrainConfig()


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def init(cls, params: ParameterStore, names: Iterable[str] | None = None) -> "OptimizerState":
        names = list(params) if names is None else list(names)
        return cls(
            m={n: np.zeros_like(params[n].data) for n in names},
            v={n: np.zeros_like(params[n].data) for n in names},
        )


# ---------------------------------------------------------------------------
# losses


def loss_hidden(teacher_out: DistillOutputs, student_out: DistillOutputs) -> Tensor:
    """``1/(L(N+1)) * sum_j sum_i ||h_ij - h^_ij||^2``; the teacher side is detached."""
    th, sh = teacher_out.hiddens, student_out.hiddens
    if not th or len(th) != len(sh):
        raise T.TensorError(f"slot count mismatch: teacher {len(th)}, student {len(sh)}")
    total = None
    for t, s in zip(th, sh):
        if t.shape != s.shape:
            raise T.TensorError(f"hidden shape mismatch {t.shape} vs {s.shape}")
        term = T.l2_mean(s, Tensor(t.data))
        total = term if total is None else total + term
    return T.scale(total, 1.0 / len(sh))


def loss_logits(teacher_out: DistillOutputs, student_out: DistillOutputs) -> Tensor:
    """``1/L * sum_j ||z_j - z^_j||^2``; the teacher side is detached."""
    z, zs = teacher_out.logits, student_out.logits
    if z.shape != zs.shape:
        raise T.TensorError(f"logit shape mismatch {z.shape} vs {zs.shape}")
    return T.l2_mean(zs, Tensor(z.data))


# ---------------------------------------------------------------------------
# optimizer and schedule


def cosine_lr(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0, then cosine decay to 0 at ``total_steps``."""
    w, n = config.warmup_steps, config.total_steps
    if not 0 <= step <= n:
        raise ValueError(f"step {step} outside [0, {n}]")
    if step < w:
        return config.lr * step / w
    if n == w:
        return config.lr
    return max(0.0, config.lr * 0.5 * (1.0 + math.cos(math.pi * (step - w) / (n - w))))


def adamw_step(
    params: ParameterStore,
    grads: dict[str, np.ndarray],
    state: OptimizerState,
    lr_t: float,
    config: TrainConfig,
) -> tuple[ParameterStore, OptimizerState]:
    """One in-place AdamW update with decoupled weight decay over ``state``'s parameter set."""
    if set(grads) != set(state.m):
        raise ValueError("gradients must cover exactly the trainable parameters")
    b1, b2 = config.betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        p = params[name].data
        if g.shape != p.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        update = (m / c1) / (np.sqrt(v / c2) + config.eps)
        if config.weight_decay:
            update = update + config.weight_decay * p
        p -= (lr_t * update).astype(p.dtype, copy=False)
    return params, state


# ---------------------------------------------------------------------------
# loops


@dataclass
class TrainResult:
    params: ParameterStore
    metrics: list[dict] = field(default_factory=list)
    state: OptimizerState | None = None


Evaluator = Callable[[ParameterStore], dict]


def train_loop(
    student: ParameterStore,
    student_config: ModelConfig,
    data: Iterator[tuple[np.ndarray, np.ndarray]],
    config: TrainConfig,
    teacher: ParameterStore | None = None,
    teacher_config: ModelConfig | None = None,
    trainable: Iterable[str] | None = None,
    evaluator: Evaluator | None = None,
    sink=None,
    record_wall_time: bool = False,
) -> TrainResult:
    """Shared loop; ``config.objective`` selects the loss.

    ``student`` is updated in place. Rows are appended to the returned
    metrics list and, when given, written to ``sink``.
    """
    distilling = config.objective.startswith("xkd")
    if distilling and teacher is None:
        raise ValueError(f"objective {config.objective} needs a teacher")
    names = list(student) if trainable is None else list(trainable)
    train_set = set(names)
    for name, p in student.items():
        p.requires_grad = name in train_set
    wrt = {n: student[n] for n in names}
    state = OptimizerState.init(student, names)
    teacher_digest = teacher.digest() if teacher is not None else None
    result = TrainResult(params=student, state=state)
    want_hiddens = config.objective == "xkd_hidden"
    tokens_seen = 0
    for step in range(1, config.total_steps + 1):
        t0 = time.perf_counter()
        inputs, targets = next(data)
        try:
            if distilling:
                with no_grad():
                    t_out = forward(teacher, teacher_config, inputs, want_hiddens=want_hiddens)
                s_out = forward(student, student_config, inputs, want_hiddens=want_hiddens)
                loss = loss_hidden(t_out, s_out) if want_hiddens else loss_logits(t_out, s_out)
            else:
                loss = lm_loss(forward(student, student_config, inputs), targets)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(step)
            grads = T.backward(loss, wrt)
        except NonFiniteError as exc:
            raise TrainingDiverged(step, str(exc)) from exc
        lr_t = cosine_lr(step, config)
        adamw_step(student, grads, state, lr_t, config)
        tokens_seen += int(np.asarray(inputs).size)
        row = {"step": step, "tokens_seen": tokens_seen, "loss": value, "lr": lr_t}
        if evaluator is not None and step % config.eval_every == 0:
            row.update(evaluator(student))
        if record_wall_time:
            row["wall_ms"] = (time.perf_counter() - t0) * 1e3
        result.metrics.append(row)
        if sink is not None:
            sink.write_row(row)
    for p in student.values():
        p.requires_grad = True
    if teacher is not None and teacher.digest() != teacher_digest:
        raise RuntimeError("teacher parameters changed during training")
    return result


def xkd_loop(teacher, teacher_config, student, student_config, data, config: TrainConfig, **kw) -> TrainResult:
    if config.objective not in ("xkd_hidden", "xkd_logits"):
        raise ValueError("xkd_loop needs objective xkd_hidden or xkd_logits")
    return train_loop(student, student_config, data, config, teacher=teacher, teacher_config=teacher_config, **kw)


def ut_loop(student, student_config, data, config: TrainConfig, **kw) -> TrainResult:
    if config.objective != "uptrain":
        raise ValueError("ut_loop needs objective uptrain")
    return train_loop(student, student_config, data, config, **kw)


def pretrain_loop(params, config_model, data, config: TrainConfig, **kw) -> TrainResult:
    if config.objective != "pretrain":
        raise ValueError("pretrain_loop needs objective pretrain")
    return train_loop(params, config_model, data, config, **kw)
