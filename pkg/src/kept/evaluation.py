"""Read-only probes over trained models."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PackedDataset
from .models import ModelConfig, ParameterStore, forward, norm_sites
from .tensor import no_grad

AGREEMENT_THRESHOLDS = (0.90, 0.95, 0.99)


class EvaluationError(ValueError):
    pass


@dataclass(frozen=True)
class AgreementReport:
    top1_match_rate: float
    mean_kl: float
    mean_logit_l2: float
    n_positions: int

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LengthCurve:
    lengths: list[int]
    ppl_teacher: list[float]
    ppl_student: list[float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.lengths, self.lengths[1:])):
            raise EvaluationError("lengths must be strictly increasing")
        if not (len(self.lengths) == len(self.ppl_teacher) == len(self.ppl_student)):
            raise EvaluationError("one perplexity per length is required")

    def max_relative_gap(self) -> float:
        return max(abs(s - t) / t for t, s in zip(self.ppl_teacher, self.ppl_student))

    def to_dict(self) -> dict:
        return asdict(self)


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z.astype(np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def agreement_from_logits(teacher_logits: np.ndarray, student_logits: np.ndarray) -> AgreementReport:
    """Top-1 match, KL(teacher || student) and squared logit L2, averaged over positions."""
    zt = np.asarray(teacher_logits)
    zs = np.asarray(student_logits)
    if zt.shape != zs.shape:
        raise EvaluationError(f"logit shape mismatch {zt.shape} vs {zs.shape}")
    V = zt.shape[-1]
    zt = zt.reshape(-1, V)
    zs = zs.reshape(-1, V)
    lpt, lps = _log_softmax(zt), _log_softmax(zs)
    kl = (np.exp(lpt) * (lpt - lps)).sum(axis=1)
    diff = zt.astype(np.float64) - zs
    return AgreementReport(
        top1_match_rate=float((zt.argmax(axis=1) == zs.argmax(axis=1)).mean()),
        mean_kl=float(max(kl.mean(), 0.0)),
        mean_logit_l2=float((diff * diff).sum(axis=1).mean()),
        n_positions=int(zt.shape[0]),
    )


def _inputs(dataset) -> np.ndarray:
    seqs = dataset.sequences() if isinstance(dataset, PackedDataset) else np.asarray(dataset)
    return seqs


def model_logits(params: ParameterStore, config: ModelConfig, inputs: np.ndarray, batch: int = 16) -> np.ndarray:
    inputs = np.asarray(inputs)
    outs = []
    with no_grad():
        for i in range(0, len(inputs), batch):
            outs.append(forward(params, config, inputs[i : i + batch]).logits.data)
    return np.concatenate(outs, axis=0)


def agreement(teacher, teacher_config, student, student_config, eval_dataset) -> AgreementReport:
    """Teacher-student agreement on the input side (all but the last token) of each sequence."""
    inputs = _inputs(eval_dataset)[:, :-1]
    return agreement_from_logits(
        model_logits(teacher, teacher_config, inputs), model_logits(student, student_config, inputs)
    )


def cross_entropy_from_logits(logits: np.ndarray, targets: np.ndarray) -> float:
    lp = _log_softmax(np.asarray(logits))
    t = np.asarray(targets).reshape(-1)
    lp = lp.reshape(-1, lp.shape[-1])
    return float(-lp[np.arange(t.size), t].mean())


def eval_loss(params: ParameterStore, config: ModelConfig, eval_dataset) -> float:
    """Mean next-token cross-entropy (nats per byte) over a packed dataset."""
    seqs = _inputs(eval_dataset)
    return cross_entropy_from_logits(model_logits(params, config, seqs[:, :-1]), seqs[:, 1:])


class Evaluator:
    """Callable for training loops; teacher logits on the eval set are computed once."""

    def __init__(self, eval_dataset, student_config: ModelConfig, teacher=None, teacher_config=None):
        self.seqs = _inputs(eval_dataset)
        self.config = student_config
        self.teacher_logits = None
        if teacher is not None:
            self.teacher_logits = model_logits(teacher, teacher_config, self.seqs[:, :-1])

    def __call__(self, params: ParameterStore) -> dict:
        logits = model_logits(params, self.config, self.seqs[:, :-1])
        row = {"eval_loss": cross_entropy_from_logits(logits, self.seqs[:, 1:])}
        if self.teacher_logits is not None:
            rep = agreement_from_logits(self.teacher_logits, logits)
            row["top1_agreement"] = rep.top1_match_rate
            row["mean_kl"] = rep.mean_kl
        return row


def ppl_vs_length(params: ParameterStore, config: ModelConfig, long_document, lengths: Sequence[int]) -> list[float]:
    """Perplexity of one prefix window of each length (``length - 1`` predictions)."""
    doc = np.asarray(long_document)
    if doc.ndim != 1:
        raise EvaluationError("long_document must be a flat token sequence")
    if not lengths or doc.size < max(lengths):
        raise EvaluationError(f"document of {doc.size} tokens is shorter than the longest probe length")
    out = []
    for n in lengths:
        if n < 2:
            raise EvaluationError("probe lengths must be at least 2")
        window = doc[:n]
        logits = model_logits(params, config, window[None, :-1])
        out.append(math.exp(cross_entropy_from_logits(logits, window[None, 1:])))
    return out


def length_curve(teacher, teacher_config, student, student_config, long_document, lengths) -> LengthCurve:
    return LengthCurve(
        lengths=list(lengths),
        ppl_teacher=ppl_vs_length(teacher, teacher_config, long_document, lengths),
        ppl_student=ppl_vs_length(student, student_config, long_document, lengths),
    )


def mean_rms_ratio(x: np.ndarray) -> np.ndarray:
    """``|mean(x)| / RMS(x)`` along the last axis (0 for an all-zero vector)."""
    x = np.asarray(x, dtype=np.float64)
    rms = np.sqrt((x * x).mean(axis=-1))
    mu = np.abs(x.mean(axis=-1))
    return np.divide(mu, rms, out=np.zeros_like(rms), where=rms > 0)


def zero_mean_probe(params: ParameterStore, config: ModelConfig, probe_dataset) -> dict[str, dict[str, float]]:
    """Per norm site: median and 95th percentile of ``|mu|/RMS`` over all positions of the pre-norm input."""
    seqs = _inputs(probe_dataset)
    ratios: dict[str, list[np.ndarray]] = {s: [] for s in norm_sites(config)}
    with no_grad():
        for i in range(0, len(seqs), 16):
            out = forward(params, config, seqs[i : i + 16], want_prenorm=True)
            for site, act in out.prenorm.items():
                ratios[site].append(mean_rms_ratio(act).reshape(-1))
    summary = {}
    for site, parts in ratios.items():
        r = np.concatenate(parts)
        summary[site] = {"median": float(np.median(r)), "p95": float(np.percentile(r, 95))}
    return summary


def median_ratio(probe: dict[str, dict[str, float]]) -> float:
    """Median across sites of the per-site median ratio."""
    return float(np.median([v["median"] for v in probe.values()]))


def _read_rows(metrics_csv) -> list[dict]:
    if isinstance(metrics_csv, (list, tuple)):
        return list(metrics_csv)
    text = Path(metrics_csv).read_text() if not isinstance(metrics_csv, io.StringIO) else metrics_csv.getvalue()
    if not text.strip():
        raise EvaluationError("empty metrics CSV")
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None or "step" not in reader.fieldnames:
        raise EvaluationError("metrics CSV lacks a step column")
    rows = []
    for line in reader:
        if None in line or any(v is None for v in line.values()):
            raise EvaluationError(f"malformed metrics row: {line}")
        try:
            rows.append({k: (float(v) if v != "" else None) for k, v in line.items()})
        except ValueError as exc:
            raise EvaluationError(f"malformed metrics row: {line}") from exc
    return rows


def recovery_curve(metrics_csv, max_points: int = 50) -> dict:
    """Eval rows downsampled to ``max_points`` plus the first step crossing each agreement threshold."""
    rows = _read_rows(metrics_csv)
    if not rows:
        raise EvaluationError("metrics CSV has no rows")
    evals = [r for r in rows if r.get("top1_agreement") is not None or r.get("eval_loss") is not None]
    stride = max(1, math.ceil(len(evals) / max_points))
    points = [
        {"step": int(r["step"]), "top1_agreement": r.get("top1_agreement"), "eval_loss": r.get("eval_loss")}
        for r in evals[::stride]
    ]
    if evals and points[-1]["step"] != int(evals[-1]["step"]):
        r = evals[-1]
        points.append({"step": int(r["step"]), "top1_agreement": r.get("top1_agreement"), "eval_loss": r.get("eval_loss")})
    first = {}
    for thr in AGREEMENT_THRESHOLDS:
        hit = next((int(r["step"]) for r in evals if (r.get("top1_agreement") or 0.0) > thr), None)
        first[f"{thr:.2f}"] = hit
    return {"points": points, "first_step_above": first, "total_steps": int(rows[-1]["step"])}
