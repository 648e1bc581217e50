import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from kept.data import pack_documents
from kept.evaluation import (
    EvaluationError,
    Evaluator,
    LengthCurve,
    agreement,
    agreement_from_logits,
    eval_loss,
    length_curve,
    mean_rms_ratio,
    median_ratio,
    model_logits,
    ppl_vs_length,
    recovery_curve,
    zero_mean_probe,
)
from kept.models import ModelConfig, build_model, norm_sites
from kept.persistence import MetricsWriter

SMALL = ModelConfig(hidden_dim=16, mlp_dim=48, n_heads=2, head_dim=8, n_layers=2, max_seq_len=64)


@pytest.fixture(scope="module")
def small_model():
    return build_model(SMALL, seed=3)


@pytest.fixture(scope="module")
def small_data():
    docs = [b"the quick brown fox jumps over the lazy dog. " * 8, b"pack my box with five dozen jugs. " * 8]
    return pack_documents(docs, 33)


# -- agreement ---------------------------------------------------------------


def test_self_agreement_is_exact(small_model, small_data):
    rep = agreement(small_model, SMALL, small_model, SMALL, small_data)
    assert rep.top1_match_rate == 1.0
    assert rep.mean_kl == 0.0
    assert rep.mean_logit_l2 == 0.0
    assert rep.n_positions == len(small_data.sequences()) * 32


def test_row_shift_keeps_top1_and_kl_but_not_l2():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(5, 7, 256))
    shifted = z + rng.normal(size=(5, 7, 1)) * 3.0
    rep = agreement_from_logits(z, shifted)
    assert rep.top1_match_rate == 1.0
    assert rep.mean_kl == pytest.approx(0.0, abs=1e-12)
    assert rep.mean_logit_l2 > 1.0


def test_independent_logits_match_at_chance():
    rng = np.random.default_rng(1)
    n = 40_000
    rep = agreement_from_logits(rng.normal(size=(n, 256)), rng.normal(size=(n, 256)))
    p = 1 / 256
    sigma = math.sqrt(p * (1 - p) / n)
    assert abs(rep.top1_match_rate - p) <= 3 * sigma


def test_agreement_hand_example():
    zt = np.array([[0.0, 0.0]])
    zs = np.array([[math.log(3.0), 0.0]])
    rep = agreement_from_logits(zt, zs)
    # KL([.5, .5] || [.75, .25]) = .5 ln(.5/.75) + .5 ln(.5/.25)
    assert rep.mean_kl == pytest.approx(0.5 * math.log(2 / 3) + 0.5 * math.log(2), abs=1e-12)
    assert rep.mean_logit_l2 == pytest.approx(math.log(3.0) ** 2)
    assert rep.top1_match_rate == 1.0  # ties resolve to index 0 on both sides


def test_agreement_shape_mismatch():
    with pytest.raises(EvaluationError):
        agreement_from_logits(np.zeros((2, 256)), np.zeros((3, 256)))


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.float64, (4, 16), elements=st.floats(-8, 8)),
    arrays(np.float64, (4, 16), elements=st.floats(-8, 8)),
    arrays(np.float64, (4, 1), elements=st.floats(-50, 50)),
)
def test_kl_invariant_to_shared_row_shift(zt, zs, c):
    a = agreement_from_logits(zt, zs)
    b = agreement_from_logits(zt + c, zs + c)
    assert a.mean_kl >= 0.0
    assert b.mean_kl == pytest.approx(a.mean_kl, abs=1e-9)


def test_evaluator_matches_standalone_probes(small_model, small_data):
    other = build_model(SMALL, seed=4)
    ev = Evaluator(small_data, SMALL, teacher=small_model, teacher_config=SMALL)
    row = ev(other)
    rep = agreement(small_model, SMALL, other, SMALL, small_data)
    assert row["top1_agreement"] == rep.top1_match_rate
    assert row["mean_kl"] == pytest.approx(rep.mean_kl, rel=1e-12)
    assert row["eval_loss"] == pytest.approx(eval_loss(other, SMALL, small_data), rel=1e-12)
    assert set(Evaluator(small_data, SMALL)(other)) == {"eval_loss"}


# -- perplexity vs length ------------------------------------------------------


def test_uniform_model_has_ppl_256():
    params = build_model(SMALL, seed=0)
    params["lm_head"].data[...] = 0.0
    doc = np.arange(64) % 256
    ppl = ppl_vs_length(params, SMALL, doc, [8, 32, 64])
    assert ppl == pytest.approx([256.0] * 3, rel=1e-5)


def test_ppl_document_too_short(small_model):
    with pytest.raises(EvaluationError):
        ppl_vs_length(small_model, SMALL, np.zeros(16, dtype=np.int64), [8, 32])
    with pytest.raises(EvaluationError):
        ppl_vs_length(small_model, SMALL, np.zeros((2, 16), dtype=np.int64), [8])


def test_model_logits_batch_invariant(small_model, small_data):
    seqs = small_data.sequences()
    a = model_logits(small_model, SMALL, seqs, batch=1)
    b = model_logits(small_model, SMALL, seqs, batch=64)
    np.testing.assert_allclose(a, b, rtol=1e-5, atol=1e-6)


def test_length_curve(small_model):
    other = build_model(SMALL, seed=9)
    doc = np.frombuffer(b"a long enough document to probe a few prefixes. " * 2, dtype=np.uint8).astype(np.int64)
    curve = length_curve(small_model, SMALL, other, SMALL, doc, [16, 32, 64])
    assert all(p > 0 for p in curve.ppl_teacher + curve.ppl_student)
    gap = curve.max_relative_gap()
    assert gap == max(abs(s - t) / t for t, s in zip(curve.ppl_teacher, curve.ppl_student))
    self_curve = length_curve(small_model, SMALL, small_model, SMALL, doc, [16, 32])
    assert self_curve.max_relative_gap() == 0.0
    with pytest.raises(EvaluationError):
        LengthCurve([32, 16], [1.0, 1.0], [1.0, 1.0])
    with pytest.raises(EvaluationError):
        LengthCurve([16, 32], [1.0], [1.0, 1.0])


# -- zero-mean probe ---------------------------------------------------------------


def test_ratio_antisymmetric_is_zero():
    x = np.array([1.0, -1.0, 2.5, -2.5, 0.3, -0.3])
    assert mean_rms_ratio(x) == 0.0


def test_ratio_constant_is_one():
    assert mean_rms_ratio(np.full(8, -3.0)) == pytest.approx(1.0)
    assert mean_rms_ratio(np.zeros(4)) == 0.0


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, 12, elements=st.floats(-10, 10)).filter(lambda v: np.abs(v).max() > 1e-3),
    st.floats(1e-3, 1e3) | st.floats(-1e3, -1e-3),
)
def test_ratio_scale_invariant(x, c):
    assert mean_rms_ratio(c * x) == pytest.approx(mean_rms_ratio(x), rel=1e-9, abs=1e-12)
    assert 0.0 <= mean_rms_ratio(x) <= 1.0 + 1e-12


def test_zero_mean_probe_covers_every_site(small_model, small_data):
    probe = zero_mean_probe(small_model, SMALL, small_data)
    assert list(probe) == norm_sites(SMALL)
    for v in probe.values():
        assert 0.0 <= v["median"] <= v["p95"] <= 1.0
    assert median_ratio(probe) == float(np.median([v["median"] for v in probe.values()]))


# -- recovery curve ----------------------------------------------------------------


def _csv(rows):
    buf = io.StringIO()
    w = MetricsWriter(buf)
    for r in rows:
        w.write_row(r)
    return buf


def test_recovery_constant_agreement():
    rows = []
    for step in range(1, 301):
        r = {"step": step, "tokens_seen": step * 64, "loss": 0.1, "lr": 1e-3}
        if step % 10 == 0:
            r.update(eval_loss=1.0, top1_agreement=0.93, mean_kl=0.01)
        rows.append(r)
    out = recovery_curve(_csv(rows), max_points=50)
    assert out["first_step_above"] == {"0.90": 10, "0.95": None, "0.99": None}
    assert out["total_steps"] == 300
    assert len(out["points"]) <= 51
    assert out["points"][-1]["step"] == 300


def test_recovery_rising_agreement(tmp_path):
    rows = [
        {"step": s, "eval_loss": 2.0 - s / 100, "top1_agreement": a}
        for s, a in [(10, 0.5), (20, 0.91), (30, 0.96), (40, 0.991), (50, 0.999)]
    ]
    path = tmp_path / "m.csv"
    with MetricsWriter(path) as w:
        for r in rows:
            w.write_row(r)
    out = recovery_curve(path)
    assert out["first_step_above"] == {"0.90": 20, "0.95": 30, "0.99": 40}
    assert [p["step"] for p in out["points"]] == [10, 20, 30, 40, 50]


def test_recovery_rejects_bad_csv(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(EvaluationError):
        recovery_curve(empty)
    header_only = tmp_path / "h.csv"
    header_only.write_text("step,loss\n")
    with pytest.raises(EvaluationError):
        recovery_curve(header_only)
    no_step = tmp_path / "n.csv"
    no_step.write_text("loss\n1.0\n")
    with pytest.raises(EvaluationError):
        recovery_curve(no_step)
    garbage = tmp_path / "g.csv"
    garbage.write_text("step,loss\n1,abc\n")
    with pytest.raises(EvaluationError):
        recovery_curve(garbage)
