"""Command-line entry point: ``kept <subcommand> ...``.

Exit status is 0 on success, 1 for usage errors and 2 when a stage fails.
BLAS runs single-threaded unless ``--threads`` says otherwise, so seeded runs
are byte-for-byte repeatable.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .data import DataError, batch_iter, load_and_pack, make_probe_corpora, pack_documents, split_documents
from .distill import TrainConfig, TrainingDiverged, train_loop
from .evaluation import (
    EvaluationError,
    Evaluator,
    agreement,
    eval_loss,
    length_curve,
    median_ratio,
    recovery_curve,
    zero_mean_probe,
)
from .experiments import run_opm_pilot
from .mapping import MappingError, convert
from .models import ConfigError, ModelConfig, ParameterStore, build_model, check_store
from .persistence import (
    CheckpointError,
    MetricsWriter,
    RunConfig,
    RunConfigError,
    checkpoint_config,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import TensorError

SUBCOMMANDS = (
    "pretrain",
    "convert",
    "distill",
    "uptrain",
    "eval",
    "probe-opm-pilot",
    "probe-zero-mean",
    "probe-longctx",
    "probe-transfer",
    "report",
)


class UsageError(Exception):
    pass


class StageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# ---------------------------------------------------------------------------
# helpers


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_model(path) -> tuple[ParameterStore, ModelConfig, dict]:
    store, meta = load_checkpoint(path)
    config = checkpoint_config(meta)
    check_store(store, config)
    return store, config, meta


def _save_model(store: ParameterStore, config: ModelConfig, path, provenance: str, seed: int | None, **extra) -> None:
    meta = {"config": config.to_dict(), "norm_kind": config.norm_kind, "provenance": provenance, "seed": seed, **extra}
    save_checkpoint(store, meta, path)


def _load_run(path) -> RunConfig:
    run = RunConfig.load(path)
    Path(run.output_dir).mkdir(parents=True, exist_ok=True)
    return run


def _train_config(run: RunConfig, allowed: tuple[str, ...]) -> TrainConfig:
    if run.train.objective not in allowed:
        raise StageError(f"train.objective must be one of {allowed}, got {run.train.objective!r}")
    return run.train.replace(seed=run.seed)


def _student_init(run: RunConfig, teacher, teacher_config) -> tuple[ParameterStore, ModelConfig]:
    """Student from ``run.student``/``run.init`` if given, else the converted teacher."""
    path = run.student or run.init
    if path:
        student, config, _ = _load_model(path)
    elif teacher is not None:
        student, _ = convert(teacher, teacher_config)
        config = teacher_config.replace(norm_kind="rms_norm")
    else:
        raise StageError("need a student/init checkpoint or a teacher to convert")
    if config != run.model:
        raise StageError(f"student config {config.to_dict()} does not match run model {run.model.to_dict()}")
    return student, config


def _run_training(run: RunConfig, student, student_config, cfg: TrainConfig, teacher=None, teacher_config=None, stage=""):
    data = batch_iter(load_and_pack(run.corpus_paths, cfg.seq_len + 1), cfg.batch_sequences, cfg.seed)
    evaluator = None
    if run.eval_paths:
        evaluator = Evaluator(load_and_pack(run.eval_paths, cfg.seq_len + 1), student_config, teacher, teacher_config)
    out = Path(run.output_dir)
    with MetricsWriter(out / "metrics.csv") as sink:
        train_loop(
            student,
            student_config,
            data,
            cfg,
            teacher=teacher,
            teacher_config=teacher_config,
            evaluator=evaluator,
            sink=sink,
            record_wall_time=run.record_wall_time,
        )
    _save_model(student, student_config, out / "model.kept", stage, run.seed, train=cfg.to_dict())
    return {"checkpoint": str(out / "model.kept"), "metrics": str(out / "metrics.csv"), "steps": cfg.total_steps}


# ---------------------------------------------------------------------------
# subcommands


def cmd_pretrain(args) -> dict:
    run = _load_run(args.config)
    cfg = _train_config(run, ("pretrain",))
    params = build_model(run.model, run.seed)
    return _run_training(run, params, run.model, cfg, stage="pretrain")


def cmd_convert(args) -> dict:
    source, config, meta = _load_model(args.source)
    target, report = convert(source, config)
    out = Path(args.out)
    target_config = config.replace(norm_kind="rms_norm")
    _save_model(target, target_config, out, "convert", meta.get("seed"), source=str(args.source))
    report_path = Path(args.report) if args.report else out.with_suffix(".mapping.json")
    report_path.write_text(report.to_json() + "\n")
    return {"checkpoint": str(out), "report": str(report_path), **json.loads(report.to_json())}


def cmd_distill(args) -> dict:
    run = _load_run(args.config)
    cfg = _train_config(run, ("xkd_hidden", "xkd_logits"))
    if not run.teacher:
        raise StageError("distill needs a teacher checkpoint")
    teacher, teacher_config, _ = _load_model(run.teacher)
    student, student_config = _student_init(run, teacher, teacher_config)
    return _run_training(run, student, student_config, cfg, teacher, teacher_config, stage=cfg.objective)


def cmd_uptrain(args) -> dict:
    run = _load_run(args.config)
    cfg = _train_config(run, ("uptrain",))
    teacher = teacher_config = None
    if run.teacher:
        teacher, teacher_config, _ = _load_model(run.teacher)
    student, student_config = _student_init(run, teacher, teacher_config)
    return _run_training(run, student, student_config, cfg, teacher, teacher_config, stage="uptrain")


def cmd_eval(args) -> dict:
    student, s_cfg, _ = _load_model(args.student)
    data = load_and_pack(args.data, args.seq_len + 1)
    result = {"student_eval_loss": eval_loss(student, s_cfg, data), "n_sequences": data.n_sequences}
    if args.teacher:
        teacher, t_cfg, _ = _load_model(args.teacher)
        result["teacher_eval_loss"] = eval_loss(teacher, t_cfg, data)
        result.update(agreement(teacher, t_cfg, student, s_cfg, data).to_dict())
    return result


def cmd_probe_opm_pilot(args) -> dict:
    run = _load_run(args.config)
    cfg = _train_config(run, ("xkd_logits", "xkd_hidden"))
    if not run.teacher:
        raise StageError("probe-opm-pilot needs a teacher checkpoint")
    teacher, teacher_config, _ = _load_model(run.teacher)
    student, student_config = _student_init(run, teacher, teacher_config)
    data = batch_iter(load_and_pack(run.corpus_paths, cfg.seq_len + 1), cfg.batch_sequences, cfg.seed)
    result = run_opm_pilot(teacher, teacher_config, student, student_config, data, cfg)
    out = Path(run.output_dir) / "opm_pilot.json"
    out.write_text(json.dumps(result["trace"], indent=2) + "\n")
    return {"trace": str(out), "final_median_cosine": result["final"]["median_cosine"], "final": result["final"]}


def cmd_probe_zero_mean(args) -> dict:
    model, config, _ = _load_model(args.model)
    probe = zero_mean_probe(model, config, load_and_pack(args.data, args.seq_len))
    return {"sites": probe, "median_ratio": median_ratio(probe)}


def cmd_probe_longctx(args) -> dict:
    teacher, t_cfg, _ = _load_model(args.teacher)
    student, s_cfg, _ = _load_model(args.student)
    try:
        lengths = [int(v) for v in args.lengths.split(",")]
    except ValueError as exc:
        raise UsageError(f"--lengths must be comma-separated integers: {exc}") from exc
    doc = np.frombuffer(Path(args.document).read_bytes(), dtype=np.uint8).astype(np.int64)
    curve = length_curve(teacher, t_cfg, student, s_cfg, doc, lengths)
    return {**curve.to_dict(), "max_relative_gap": curve.max_relative_gap()}


def cmd_probe_transfer(args) -> dict:
    teacher, t_cfg, _ = _load_model(args.teacher)
    student, s_cfg, _ = _load_model(args.student)
    if args.data:
        data = load_and_pack(args.data, args.seq_len + 1)
    else:
        docs = make_probe_corpora(args.seed).arithmetic_corpus
        _, held = split_documents(docs, args.heldout_docs)
        data = pack_documents(held, args.seq_len + 1, provenance="arithmetic-heldout")
    ce_t = eval_loss(teacher, t_cfg, data)
    ce_s = eval_loss(student, s_cfg, data)
    return {"teacher_ce": ce_t, "student_ce": ce_s, "relative_gap": abs(ce_s - ce_t) / ce_t}


def cmd_report(args) -> dict:
    return recovery_curve(args.metrics, max_points=args.max_points)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kept", description="LayerNorm-to-RMSNorm conversion and distillation toolkit.")
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    sub = parser.add_subparsers(dest="command", metavar="{" + ",".join(SUBCOMMANDS) + "}", parser_class=_Parser)
    sub.required = True

    def config_cmd(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", required=True, help="run config JSON")
        p.set_defaults(fn=fn)

    config_cmd("pretrain", cmd_pretrain, "train a model from scratch on next-token loss")
    p = sub.add_parser("convert", help="map a checkpoint onto the RMSNorm family")
    p.add_argument("--source", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", help="mapping report path (default: <out>.mapping.json)")
    p.set_defaults(fn=cmd_convert)
    config_cmd("distill", cmd_distill, "frozen-teacher distillation (xkd_hidden or xkd_logits)")
    config_cmd("uptrain", cmd_uptrain, "continue training the student on next-token loss")

    p = sub.add_parser("eval", help="eval loss and teacher agreement")
    p.add_argument("--student", required=True)
    p.add_argument("--teacher")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.set_defaults(fn=cmd_eval)

    config_cmd("probe-opm-pilot", cmd_probe_opm_pilot, "train only re-drawn RMSNorm weights and trace them against gamma")

    p = sub.add_parser("probe-zero-mean", help="|mean|/RMS of pre-norm activations per site")
    p.add_argument("--model", required=True)
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--seq-len", type=int, default=128)
    p.set_defaults(fn=cmd_probe_zero_mean)

    p = sub.add_parser("probe-longctx", help="perplexity versus context length")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--document", required=True)
    p.add_argument("--lengths", default="128,256,512")
    p.set_defaults(fn=cmd_probe_longctx)

    p = sub.add_parser("probe-transfer", help="cross-entropy of both models on a held-out domain")
    p.add_argument("--teacher", required=True)
    p.add_argument("--student", required=True)
    p.add_argument("--data", nargs="*", help="corpus files (default: generated held-out arithmetic)")
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--heldout-docs", type=int, default=6)
    p.set_defaults(fn=cmd_probe_transfer)

    p = sub.add_parser("report", help="recovery curve from a metrics CSV")
    p.add_argument("--metrics", required=True)
    p.add_argument("--max-points", type=int, default=50)
    p.set_defaults(fn=cmd_report)
    return parser


RUNTIME_ERRORS = (
    StageError,
    CheckpointError,
    RunConfigError,
    ConfigError,
    MappingError,
    DataError,
    EvaluationError,
    TensorError,
    TrainingDiverged,
    OSError,
)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        with threadpool_limits(limits=args.threads):
            result = args.fn(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except RUNTIME_ERRORS as exc:
        print(f"kept {getattr(args, 'command', '')}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
