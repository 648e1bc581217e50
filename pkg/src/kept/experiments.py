"""Toy-scale versions of the conversion experiments.

One LayerNorm teacher family is pretrained on text + arithmetic; students are
converted from it and then distilled (logits or hiddens) or uptrained on text
only, at a shorter sequence length than the teacher saw. Every stage is
seeded from :attr:`ToySetup.seed`.

Set ``KEPT_CACHE_DIR`` to reuse finished stages across processes; cache keys
cover the setup, the stage arguments and the package source.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path

import numpy as np

from .data import PackedDataset, batch_iter, make_probe_corpora, pack_documents, split_documents
from .distill import TrainConfig, TrainResult, pretrain_loop, ut_loop, xkd_loop
from .evaluation import Evaluator, agreement, eval_loss
from .mapping import MappingReport, convert
from .models import TOY, ModelConfig, ParameterStore, build_model, norm_sites
from .rng import stream
from .tensor import Tensor


@dataclass(frozen=True)
class ToySetup:
    seed: int = 0
    model: ModelConfig = TOY.replace(norm_kind="layer_norm", rope_base=1e6)
    pretrain: TrainConfig = TrainConfig(
        objective="pretrain",
        lr=1e-3,
        warmup_steps=100,
        total_steps=5000,
        weight_decay=0.1,
        seq_len=128,
        batch_sequences=4,
        eval_every=500,
    )
    distill: TrainConfig = TrainConfig(
        objective="xkd_logits",
        lr=3e-4,
        warmup_steps=50,
        total_steps=3000,
        weight_decay=0.0,
        seq_len=64,
        batch_sequences=32,
        eval_every=100,
    )
    pilot: TrainConfig = TrainConfig(
        objective="xkd_logits",
        lr=1e-2,
        warmup_steps=50,
        total_steps=2000,
        weight_decay=0.0,
        seq_len=64,
        batch_sequences=8,
        eval_every=250,
    )
    heldout_text_docs: int = 2
    heldout_arith_docs: int = 6

    def key(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "pretrain": self.pretrain.to_dict(),
            "distill": self.distill.to_dict(),
            "pilot": self.pilot.to_dict(),
            "heldout": [self.heldout_text_docs, self.heldout_arith_docs],
        }


@dataclass
class Corpora:
    text_train: list[bytes]
    text_heldout: list[bytes]
    arith_train: list[bytes]
    arith_heldout: list[bytes]

    @property
    def mixed_train(self) -> list[bytes]:
        return self.text_train + self.arith_train

    @property
    def long_document(self) -> np.ndarray:
        doc = max(self.text_heldout, key=len)
        return np.frombuffer(doc, dtype=np.uint8).astype(np.int64)


def make_corpora(setup: ToySetup) -> Corpora:
    probe = make_probe_corpora(setup.seed)
    text_train, text_heldout = split_documents(probe.text_corpus, setup.heldout_text_docs)
    arith_train, arith_heldout = split_documents(probe.arithmetic_corpus, setup.heldout_arith_docs)
    return Corpora(text_train, text_heldout, arith_train, arith_heldout)


# ---------------------------------------------------------------------------
# caching


def _source_digest() -> str:
    h = hashlib.sha256()
    root = resources.files("kept")
    for name in sorted(p.name for p in root.iterdir() if p.name.endswith(".py")):
        h.update((root / name).read_bytes())
    return h.hexdigest()[:16]


def _cache_path(stage: str, key: dict) -> Path | None:
    root = os.environ.get("KEPT_CACHE_DIR")
    if not root:
        return None
    blob = json.dumps({"stage": stage, "key": key, "src": _source_digest()}, sort_keys=True, default=str)
    return Path(root) / f"{stage}-{hashlib.sha256(blob.encode()).hexdigest()[:20]}"


def _cached(stage: str, key: dict, run):
    from .persistence import load_checkpoint, save_checkpoint

    path = _cache_path(stage, key)
    if path is not None and (path / "params.kept").exists():
        params, _ = load_checkpoint(path / "params.kept")
        extra = json.loads((path / "extra.json").read_text())
        return params, extra
    params, extra = run()
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(params, {"stage": stage}, path / "params.kept")
        (path / "extra.json").write_text(json.dumps(extra))
    return params, extra


# ---------------------------------------------------------------------------
# stages


def packed(docs: list[bytes], seq_len: int, name: str) -> PackedDataset:
    # +1: each window yields seq_len inputs and seq_len next-token targets
    return pack_documents(docs, seq_len + 1, provenance=name)


class ToyExperiment:
    """Lazily runs and memoizes each stage for one :class:`ToySetup`."""

    def __init__(self, setup: ToySetup | None = None):
        self.setup = setup or ToySetup()
        self.corpora = make_corpora(self.setup)
        self._teachers: dict[float, tuple[ParameterStore, dict]] = {}
        self._students: dict[str, tuple[ParameterStore, dict]] = {}

    @property
    def teacher_config(self) -> ModelConfig:
        return self.setup.model

    @property
    def student_config(self) -> ModelConfig:
        return self.setup.model.replace(norm_kind="rms_norm")

    @cached_property
    def text_eval(self) -> PackedDataset:
        return packed(self.corpora.text_heldout, self.setup.distill.seq_len, "text-heldout")

    @cached_property
    def arith_eval(self) -> PackedDataset:
        return packed(self.corpora.arith_heldout, self.setup.distill.seq_len, "arith-heldout")

    def teacher(self, weight_decay: float = 0.1) -> tuple[ParameterStore, dict]:
        if weight_decay not in self._teachers:
            cfg = self.setup.pretrain.replace(weight_decay=weight_decay, seed=self.setup.seed)

            def run():
                params = build_model(self.teacher_config, self.setup.seed)
                data = batch_iter(packed(self.corpora.mixed_train, cfg.seq_len, "mixed"), cfg.batch_sequences, cfg.seed)
                ev = Evaluator(packed(self.corpora.text_heldout, cfg.seq_len, "text-heldout"), self.teacher_config)
                res = pretrain_loop(params, self.teacher_config, data, cfg, evaluator=ev)
                return params, {"metrics": res.metrics}

            self._teachers[weight_decay] = _cached("teacher", {**self.setup.key(), "wd": weight_decay}, run)
        return self._teachers[weight_decay]

    def mapped_student(self, weight_decay: float = 0.1) -> tuple[ParameterStore, MappingReport]:
        teacher, _ = self.teacher(weight_decay)
        return convert(teacher, self.teacher_config, self.student_config)

    def student(self, objective: str = "xkd_logits", weight_decay: float = 0.1) -> tuple[ParameterStore, dict]:
        """Mapped student after the matched-budget training run for ``objective``."""
        name = f"{objective}-wd{weight_decay}"
        if name not in self._students:
            cfg = self.setup.distill.replace(objective=objective, seed=self.setup.seed)

            def run():
                teacher, _ = self.teacher(weight_decay)
                student, _ = self.mapped_student(weight_decay)
                data = batch_iter(packed(self.corpora.text_train, cfg.seq_len, "text"), cfg.batch_sequences, cfg.seed)
                ev = Evaluator(self.text_eval, self.student_config, teacher, self.teacher_config)
                if objective == "uptrain":
                    res = ut_loop(student, self.student_config, data, cfg, evaluator=ev)
                else:
                    res = xkd_loop(teacher, self.teacher_config, student, self.student_config, data, cfg, evaluator=ev)
                return student, {"metrics": res.metrics}

            self._students[name] = _cached("student", {**self.setup.key(), "objective": objective, "wd": weight_decay}, run)
        return self._students[name]

    def opm_pilot(self, weight_decay: float = 0.1, steps: int | None = None) -> dict:
        teacher, _ = self.teacher(weight_decay)
        student, _ = self.mapped_student(weight_decay)
        cfg = self.setup.pilot.replace(seed=self.setup.seed)
        if steps is not None:
            cfg = cfg.replace(total_steps=steps, warmup_steps=min(cfg.warmup_steps, steps))
        data = batch_iter(packed(self.corpora.text_train, cfg.seq_len, "text"), cfg.batch_sequences, cfg.seed)
        return run_opm_pilot(teacher, self.teacher_config, student, self.student_config, data, cfg)


def run_opm_pilot(
    teacher: ParameterStore,
    teacher_config: ModelConfig,
    student: ParameterStore,
    student_config: ModelConfig,
    data,
    config: TrainConfig,
    checkpoint_every: int | None = None,
) -> dict:
    """Train only the student's RMSNorm weights (re-drawn from Normal(1, 0.5^2)) against the frozen teacher.

    Returns a trace of per-site cosine similarity and L2 distance between each
    theta and its source gamma, recorded at step 0 and every
    ``checkpoint_every`` steps (default ``config.eval_every``).
    """
    student = student.clone()
    rng = stream(config.seed, "pilot-reinit")
    sites = norm_sites(student_config)
    theta_paths = [f"{s}.theta" for s in sites]
    for p in theta_paths:
        shape = student[p].shape
        student[p] = Tensor((1.0 + 0.5 * rng.standard_normal(shape)).astype(student[p].dtype), requires_grad=True)
    gammas = {s: teacher[f"{s}.gamma"].data.astype(np.float64) for s in sites}
    every = checkpoint_every or config.eval_every

    def snapshot(step: int) -> dict:
        row = {"step": step, "cosine": {}, "l2": {}}
        for s in sites:
            th = student[f"{s}.theta"].data.astype(np.float64)
            g = gammas[s]
            row["cosine"][s] = float(th @ g / (np.linalg.norm(th) * np.linalg.norm(g)))
            row["l2"][s] = float(np.linalg.norm(th - g))
        row["median_cosine"] = float(np.median(list(row["cosine"].values())))
        return row

    trace = [snapshot(0)]
    if config.total_steps > 0:

        class _Tracer:
            def __init__(self):
                self.step = 0

            def write_row(self, row):
                if row["step"] % every == 0 or row["step"] == config.total_steps:
                    trace.append(snapshot(row["step"]))

        xkd_loop(teacher, teacher_config, student, student_config, data, config, trainable=theta_paths, sink=_Tracer())
    return {"trace": trace, "final": trace[-1], "theta": {p: student[p].data.tolist() for p in theta_paths}}


def summarize_student(exp: ToyExperiment, objective: str, weight_decay: float = 0.1) -> dict:
    teacher, _ = exp.teacher(weight_decay)
    student, extra = exp.student(objective, weight_decay)
    rep = agreement(teacher, exp.teacher_config, student, exp.student_config, exp.text_eval)
    return {
        "objective": objective,
        **rep.to_dict(),
        "eval_loss": eval_loss(student, exp.student_config, exp.text_eval),
        "teacher_eval_loss": eval_loss(teacher, exp.teacher_config, exp.text_eval),
    }
