import numpy as np
import pytest

from kept import tensor as T
from kept.distill import loss_hidden, loss_logits
from kept.mapping import convert
from kept.models import (
    FULL_SCALE,
    PRESETS,
    TOY,
    ConfigError,
    ModelConfig,
    ParameterStore,
    build_model,
    check_store,
    forward,
    lm_loss,
    norm_sites,
    param_shapes,
)
from kept.tensor import Tensor

SMALL = ModelConfig(hidden_dim=16, mlp_dim=48, n_heads=2, head_dim=8, n_layers=2, max_seq_len=64)


def test_toy_path_count():
    # embed + lm_head + 4 * (7 projections + 2 norms) + final norm
    assert len(param_shapes(TOY)) == 2 + 4 * (7 + 2) + 1 == 39
    ln = TOY.replace(norm_kind="layer_norm")
    assert len(param_shapes(ln)) == 2 + 4 * (7 + 4) + 2 == 48


def test_presets():
    assert PRESETS["toy"] is TOY
    p = FULL_SCALE
    assert (p.vocab_size, p.hidden_dim, p.mlp_dim, p.n_heads, p.head_dim, p.n_layers) == (
        84_608,
        5120,
        15_360,
        40,
        128,
        40,
    )
    assert p.rope_base == 5e7


@pytest.mark.parametrize(
    "changes",
    [
        {"n_heads": 3},
        {"mlp_dim": 100},
        {"head_dim": 15, "n_heads": 4, "hidden_dim": 60, "mlp_dim": 180},
        {"rope_base": 1.0},
        {"norm_kind": "batch_norm"},
        {"n_layers": 0},
    ],
)
def test_invalid_configs(changes):
    with pytest.raises(ConfigError):
        TOY.replace(**changes)


def test_config_round_trip_rejects_unknown():
    assert ModelConfig.from_dict(TOY.to_dict()) == TOY
    with pytest.raises(ConfigError):
        ModelConfig.from_dict({**TOY.to_dict(), "dropout": 0.1})


def test_build_model_shapes_and_init():
    store = build_model(TOY, seed=0)
    check_store(store, TOY)
    for site in norm_sites(TOY):
        assert np.all(store[f"{site}.theta"].data == 1)
    w = store["layers.0.attn.q_proj"].data
    assert w.shape == (64, 64) and w.dtype == np.float32
    assert np.abs(w).max() <= 0.04 + 1e-7
    assert 0.012 < w.std() < 0.02


def test_build_model_deterministic_per_seed():
    assert build_model(TOY, 3).digest() == build_model(TOY, 3).digest()
    assert build_model(TOY, 3).digest() != build_model(TOY, 4).digest()


def test_check_store_rejects_bad_shape():
    store = build_model(SMALL, 0)
    store["lm_head"] = Tensor(np.zeros((16, 10), np.float32))
    with pytest.raises(ConfigError):
        check_store(store, SMALL)
    del store["lm_head"]
    with pytest.raises(ConfigError):
        check_store(store, SMALL)


def test_forward_shapes_and_slots():
    store = build_model(SMALL, 0)
    ids = np.arange(10)
    out = forward(store, SMALL, ids, want_hiddens=True)
    assert out.logits.shape == (10, 256)
    assert len(out.hiddens) == SMALL.n_layers + 1
    assert all(h.shape == (10, 16) for h in out.hiddens)
    batched = forward(store, SMALL, np.stack([ids, ids[::-1]]))
    assert batched.logits.shape == (2, 10, 256)
    np.testing.assert_allclose(batched.logits.data[0], out.logits.data, atol=1e-6)


def test_forward_input_validation():
    store = build_model(SMALL, 0)
    with pytest.raises(T.TensorError):
        forward(store, SMALL, np.array([1, 256]))
    with pytest.raises(T.TensorError):
        forward(store, SMALL, np.array([-1, 2]))
    with pytest.raises(T.TensorError):
        forward(store, SMALL, np.zeros(65, dtype=np.int64))
    with pytest.raises(T.TensorError):
        forward(store, SMALL, np.array([], dtype=np.int64))


def test_forward_deterministic():
    store = build_model(SMALL, 1)
    ids = np.random.default_rng(0).integers(0, 256, 20)
    a = forward(store, SMALL, ids).logits.data
    b = forward(store, SMALL, ids).logits.data
    assert np.array_equal(a, b)


def test_want_hiddens_does_not_change_logits():
    store = build_model(SMALL, 2)
    ids = np.random.default_rng(1).integers(0, 256, 12)
    a = forward(store, SMALL, ids).logits.data
    b = forward(store, SMALL, ids, want_hiddens=True, want_prenorm=True).logits.data
    assert np.array_equal(a, b)


def test_causality():
    store = build_model(SMALL, 3)
    rng = np.random.default_rng(2)
    ids = rng.integers(0, 256, 16)
    other = ids.copy()
    other[9:] = rng.integers(0, 256, 7)
    a = forward(store, SMALL, ids).logits.data
    b = forward(store, SMALL, other).logits.data
    np.testing.assert_array_equal(a[:9], b[:9])
    assert not np.allclose(a[9:], b[9:])


def test_single_position_ignores_rope_base():
    store = build_model(SMALL, 4)
    ids = np.array([42])
    a = forward(store, SMALL, ids).logits.data
    b = forward(store, SMALL.replace(rope_base=10.0), ids).logits.data
    np.testing.assert_array_equal(a, b)


def test_rope_base_matters_beyond_first_position():
    store = build_model(SMALL, 4)
    ids = np.arange(8)
    a = forward(store, SMALL, ids).logits.data
    b = forward(store, SMALL.replace(rope_base=10.0), ids).logits.data
    assert not np.allclose(a[1:], b[1:])


def _zero_mean_teacher(config: ModelConfig, seed: int) -> ParameterStore:
    """LayerNorm model whose residual stream is exactly zero-mean at every norm site."""
    store = build_model(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed)
    for path, t in store.items():
        leaf = path.rsplit(".", 1)[-1]
        if path == "embed.tokens" or leaf in ("o_proj", "down_proj"):
            # rows (written into the residual stream) sum to zero
            t.data -= t.data.mean(axis=-1, keepdims=True)
        elif leaf == "gamma":
            t.data[:] = rng.uniform(0.5, 1.5, t.shape)
    return store


def test_zero_mean_stream_maps_exactly():
    cfg = TOY.replace(norm_kind="layer_norm")
    teacher = _zero_mean_teacher(cfg, 5)
    student, report = convert(teacher, cfg, cfg.replace(norm_kind="rms_norm"))
    assert report.n_opm_sites == 9
    ids = np.random.default_rng(3).integers(0, 256, (2, 32))
    out = forward(teacher, cfg, ids, want_prenorm=True)
    for act in out.prenorm.values():
        assert np.abs(act.mean(axis=-1)).max() < 1e-12
    zt = out.logits.data
    zs = forward(student, cfg.replace(norm_kind="rms_norm"), ids).logits.data
    assert np.abs(zt - zs).max() <= 1e-4


def test_lm_loss_target_shape_checked():
    store = build_model(SMALL, 0)
    out = forward(store, SMALL, np.arange(5))
    with pytest.raises(T.TensorError):
        lm_loss(out, np.arange(4))


def test_untrained_loss_near_uniform():
    store = build_model(TOY, 0)
    ids = np.random.default_rng(0).integers(0, 256, (2, 33))
    loss = lm_loss(forward(store, TOY, ids[:, :-1]), ids[:, 1:]).item()
    assert abs(loss - np.log(256)) < 0.05


# ---------------------------------------------------------------------------
# gradient spot checks through a 2-layer model (double precision)

THROUGH_MODEL_TOL = 1e-4


def _spot_check(loss_fn, store, n_coords=6, seed=0, h=1e-5):
    """Central differences on random coordinates of random parameters."""
    rng = np.random.default_rng(seed)
    grads = T.backward(loss_fn(), dict(store))
    paths = list(store)
    worst = 0.0
    checked = 0
    while checked < n_coords:
        path = paths[rng.integers(len(paths))]
        arr = store[path].data
        idx = tuple(int(rng.integers(s)) for s in arr.shape)
        analytic = grads[path][idx]
        if abs(analytic) < 1e-7:
            continue  # unused embedding rows and the like
        orig = arr[idx]
        with T.no_grad():
            arr[idx] = orig + h
            fp = loss_fn().item()
            arr[idx] = orig - h
            fm = loss_fn().item()
        arr[idx] = orig
        numeric = (fp - fm) / (2 * h)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric)))
        checked += 1
    return worst


def _perturbed(config, seed):
    store = build_model(config, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    for path, t in store.items():
        leaf = path.rsplit(".", 1)[-1]
        if leaf in ("gamma", "theta"):
            t.data[:] = rng.uniform(0.5, 1.5, t.shape)
        elif leaf == "beta":
            t.data[:] = rng.normal(0, 0.1, t.shape)
        else:
            t.data *= 10  # away from the near-linear init regime
    return store


@pytest.mark.parametrize("norm_kind", ["rms_norm", "layer_norm"])
def test_lm_loss_gradient_through_model(norm_kind):
    cfg = SMALL.replace(norm_kind=norm_kind)
    store = _perturbed(cfg, 7)
    ids = np.random.default_rng(8).integers(0, 256, (2, 9))
    fn = lambda: lm_loss(forward(store, cfg, ids[:, :-1]), ids[:, 1:])  # noqa: E731
    assert _spot_check(fn, store, seed=1) <= THROUGH_MODEL_TOL


@pytest.mark.parametrize("objective", ["hidden", "logits"])
def test_distillation_loss_gradient_through_model(objective):
    tcfg = SMALL.replace(norm_kind="layer_norm")
    teacher = _perturbed(tcfg, 9)
    student = _perturbed(SMALL, 10)
    ids = np.random.default_rng(11).integers(0, 256, (2, 8))
    want = objective == "hidden"
    with T.no_grad():
        t_out = forward(teacher, tcfg, ids, want_hiddens=want)
    loss = loss_hidden if want else loss_logits
    fn = lambda: loss(t_out, forward(student, SMALL, ids, want_hiddens=want))  # noqa: E731
    assert _spot_check(fn, student, seed=2) <= THROUGH_MODEL_TOL
