import dataclasses
import warnings

import numpy as np
import pytest

from adl.autodiff import Tensor, sequential
from adl.checkpoint import CheckpointError, load_network, read_checkpoint, save_network
from adl.noise import NoiseSpec
from adl.train import (
    AdamState,
    Engine,
    NonFiniteLossError,
    TrainConfig,
    TrainState,
    adam_step,
    config_from_strings,
    config_to_strings,
    reduce_lr_on_plateau,
)

SMALL = dict(denoiser_filters=(4, 6, 8, 8), discriminator_filters=(4, 4, 4, 4), batch_size=2, patch_size=16)


def _patches(n, size=16, seed=0):
    rng = np.random.default_rng(seed)
    base = rng.uniform(0.2, 0.8, size=(n, 1, 1, 1))
    ramp = np.linspace(0, 0.2, size)[None, None, :, None]
    return (base + ramp + rng.normal(0, 0.02, size=(n, 1, size, size))).astype(np.float32)


def _params_equal(a, b):
    return all(np.array_equal(a[k].data, b[k].data) for k in a)


# ------------------------------------------------------------------ Adam


def test_adam_first_step_by_hand():
    p = {"w": Tensor(np.array([1.0]))}
    adam_step(p, {"w": np.array([1.0])}, AdamState(), lr=1e-4)
    # m_hat = v_hat = 1: step = lr / (1 + eps)
    assert 1.0 - p["w"].data[0] == pytest.approx(1e-4 / (1 + 1e-8), rel=1e-12)


def test_adam_zero_grad_and_shape_errors():
    p = {"w": Tensor(np.array([0.5, -0.5]))}
    adam_step(p, {"w": np.zeros(2)}, AdamState(), lr=1e-3)
    np.testing.assert_array_equal(p["w"].data, [0.5, -0.5])
    with pytest.raises(ValueError):
        adam_step(p, {"w": np.zeros(3)}, AdamState(), lr=1e-3)


def test_adam_matches_torch():
    torch = pytest.importorskip("torch")
    rng = np.random.default_rng(0)
    w0 = rng.normal(size=(3, 4))
    grads = [rng.normal(size=(3, 4)) for _ in range(6)]
    ours = {"w": Tensor(w0.copy())}
    state = AdamState()
    tw = torch.tensor(w0.copy(), requires_grad=True)
    opt = torch.optim.Adam([tw], lr=1e-2, betas=(0.9, 0.999), eps=1e-8)
    for g in grads:
        adam_step(ours, {"w": g}, state, 1e-2)
        tw.grad = torch.tensor(g)
        opt.step()
    np.testing.assert_allclose(ours["w"].data, tw.detach().numpy(), rtol=1e-10, atol=1e-12)


# ------------------------------------------------------------- plateau


def test_plateau_improving_stream_keeps_lr():
    st = TrainState(lr=1e-3)
    for v in range(20):
        reduce_lr_on_plateau(st, 20.0 + v * 0.01)
    assert st.lr == 1e-3 and st.reductions == 0


def test_plateau_five_misses_halves_once():
    st = TrainState(lr=1e-3)
    reduce_lr_on_plateau(st, 30.0)
    for _ in range(5):
        reduce_lr_on_plateau(st, 30.0)
    assert st.lr == 5e-4 and st.reductions == 1


def test_plateau_flat_stream_of_twelve_reduces_twice():
    st = TrainState(lr=1e-4)
    lrs = []
    for _ in range(12):
        reduce_lr_on_plateau(st, 30.0)
        lrs.append(st.lr)
    assert st.reductions == 2
    assert st.lr == 2.5e-5
    assert all(a >= b for a, b in zip(lrs, lrs[1:]))


def test_plateau_min_delta_and_floor():
    st = TrainState(lr=1e-4)
    reduce_lr_on_plateau(st, 30.0, min_delta=1e-3)
    reduce_lr_on_plateau(st, 30.0005, min_delta=1e-3)
    assert st.plateau_count == 1
    for _ in range(50):
        reduce_lr_on_plateau(st, 30.0, patience=1, min_lr=1e-6)
    assert st.lr == 1e-6


# -------------------------------------------------------------- config


def test_config_strings_roundtrip():
    cfg = TrainConfig(lr=3e-4, augment=False, denoiser_filters=(8, 8, 8, 8), noise_mode="3d")
    assert config_from_strings(config_to_strings(cfg)) == cfg
    with pytest.raises(ValueError):
        config_from_strings({"learning_rate": "1"})
    with pytest.raises(ValueError):
        config_from_strings({"augment": "maybe"})


@pytest.mark.parametrize(
    "bad", [dict(lr=0.0), dict(patch_size=30), dict(lr_factor=1.0), dict(lr_patience=0), dict(n_scales=2), dict(adv_form="ls")]
)
def test_config_invariants(bad):
    with pytest.raises(ValueError):
        TrainConfig(**bad)


# ---------------------------------------------------------------- steps


def test_step_is_finite_and_updates_both_networks():
    eng = Engine(TrainConfig(**SMALL))
    g0 = {k: p.data.copy() for k, p in eng.denoiser.parameters().items()}
    d0 = {k: p.data.copy() for k, p in eng.discriminator.parameters().items()}
    d_rep, g_rep = eng.train_step(_patches(2))
    assert np.isfinite(d_rep.total) and np.isfinite(g_rep.total)
    assert g_rep.terms["adv"] != 0.0
    assert any(not np.array_equal(g0[k], p.data) for k, p in eng.denoiser.parameters().items())
    assert any(not np.array_equal(d0[k], p.data) for k, p in eng.discriminator.parameters().items())
    assert eng.state.step == 1


def test_log_form_generator_step():
    eng = Engine(TrainConfig(**SMALL, adv_form="log"))
    _, g_rep = eng.train_step(_patches(2))
    # sigmoid maps in (0, 1) make -log D positive
    assert np.isfinite(g_rep.total) and g_rep.terms["adv"] > 0


def test_parameter_sets_are_disjoint_and_updates_isolated():
    eng = Engine(TrainConfig(**SMALL, d_lr_scale=0.0))
    g_ids = {id(p) for p in eng.denoiser.parameters().values()}
    d_ids = {id(p) for p in eng.discriminator.parameters().values()}
    assert not g_ids & d_ids
    d0 = {k: p.data.copy() for k, p in eng.discriminator.parameters().items()}
    eng.train_step(_patches(2))
    # the denoiser step leaves the discriminator untouched
    assert _params_equal(eng.discriminator.parameters(), {k: Tensor(v) for k, v in d0.items()})
    # with no adversarial term the discriminator cannot influence the denoiser
    x = _patches(2, seed=1)
    a = Engine(TrainConfig(**SMALL, lambda_adv=0.0))
    b = Engine(TrainConfig(**SMALL, lambda_adv=0.0, d_lr_scale=5.0))
    with sequential():
        for _ in range(3):
            a.train_step(x)
            b.train_step(x)
    assert _params_equal(a.denoiser.parameters(), b.denoiser.parameters())
    assert not _params_equal(a.discriminator.parameters(), b.discriminator.parameters())


def test_supervised_overfit_strictly_decreases():
    cfg = TrainConfig(**{**SMALL, "batch_size": 1, "patch_size": 32}, lambda_adv=0.0, d_lr_scale=0.0, lr=1e-4)
    eng = Engine(cfg)
    x = _patches(1, 32)
    y = NoiseSpec("gaussian", 25 / 255).apply(x, seed=0).astype(np.float32)
    losses = [eng.train_step(x, y)[1].total for _ in range(50)]
    assert all(b < a for a, b in zip(losses, losses[1:]))


def test_non_finite_input_aborts():
    eng = Engine(TrainConfig(**SMALL))
    x = _patches(2)
    x[0, 0, 0, 0] = np.nan
    with pytest.raises(NonFiniteLossError):
        eng.train_step(x)


def test_validation_is_frozen():
    eng = Engine(TrainConfig(**SMALL))
    val = _patches(3, seed=4)
    noisy = eng.make_validation_set(val)
    np.testing.assert_array_equal(noisy, eng.make_validation_set(val))
    r1 = eng.validate(val, noisy)
    r2 = eng.validate(val, noisy)
    assert r1 == r2 and np.isfinite(r1.psnr)
    assert r1.psnr_noisy == pytest.approx(20 * np.log10(255 / 25), abs=0.5)
    with pytest.raises(ValueError):
        eng.validate(val[:0], noisy[:0])


def test_twin_engines_are_bit_identical():
    cfg = TrainConfig(**SMALL, epochs=1)
    data = _patches(6, seed=2)
    with sequential():
        a, b = Engine(cfg), Engine(cfg)
        a.run(data)
        b.run(data)
    assert a.state.step == 3
    assert _params_equal(a.denoiser.parameters(), b.denoiser.parameters())
    assert _params_equal(a.discriminator.parameters(), b.discriminator.parameters())


def test_log_hook_records():
    eng = Engine(TrainConfig(**SMALL, epochs=1))
    records = []
    eng.log_hook = records.append
    val = _patches(2, seed=9)
    eng.run(_patches(4), val, eng.make_validation_set(val))
    assert [r["kind"] for r in records] == ["step", "step", "val"]


# ----------------------------------------------------------- persistence


def test_checkpoint_roundtrip_and_resume(tmp_path):
    cfg = TrainConfig(**SMALL, epochs=2)
    data = _patches(8, seed=3)
    val = _patches(2, seed=5)
    with sequential():
        ref = Engine(cfg)
        ref.run(data, val, ref.make_validation_set(val))
        part = Engine(cfg)
        part.run(data, val, part.make_validation_set(val), max_steps=3)  # stops mid-epoch 0
        part.save(tmp_path / "ck")
        resumed = Engine.load(tmp_path / "ck")
        for f in ("step", "epoch", "epoch_step", "lr", "best_psnr", "plateau_count", "reductions"):
            assert getattr(resumed.state, f) == getattr(part.state, f)
        for tag in ("adam_g", "adam_d"):
            a, b = getattr(resumed.state, tag), getattr(part.state, tag)
            assert a.t == b.t and all(np.array_equal(a.m[k], b.m[k]) and np.array_equal(a.v[k], b.v[k]) for k in b.m)
        assert _params_equal(resumed.denoiser.parameters(), part.denoiser.parameters())
        resumed.run(data, val, resumed.make_validation_set(val))
    assert resumed.state.step == ref.state.step == 8
    assert _params_equal(resumed.denoiser.parameters(), ref.denoiser.parameters())
    assert _params_equal(resumed.discriminator.parameters(), ref.discriminator.parameters())
    assert resumed.state.lr == ref.state.lr and resumed.state.best_psnr == ref.state.best_psnr


def test_checkpoint_rejects_corruption(tmp_path):
    eng = Engine(TrainConfig(**SMALL))
    eng.save(tmp_path / "ck")
    blob = tmp_path / "ck" / "tensors.bin"
    raw = bytearray(blob.read_bytes())
    raw[10] ^= 0xFF
    blob.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="checksum"):
        read_checkpoint(tmp_path / "ck")


def test_checkpoint_rejects_other_versions(tmp_path):
    eng = Engine(TrainConfig(**SMALL))
    eng.save(tmp_path / "ck")
    man = tmp_path / "ck" / "manifest.txt"
    man.write_text(man.read_text().replace("version=1", "version=99"))
    with pytest.raises(CheckpointError, match="version"):
        Engine.load(tmp_path / "ck")
    with pytest.raises(CheckpointError):
        read_checkpoint(tmp_path / "missing")


def test_network_checkpoint(tmp_path):
    eng = Engine(TrainConfig(**SMALL))
    save_network(tmp_path / "g", eng.denoiser)
    net = load_network(tmp_path / "g", "denoiser")
    assert net.config == eng.denoiser.config
    assert _params_equal(net.parameters(), eng.denoiser.parameters())
    with pytest.raises(CheckpointError):
        load_network(tmp_path / "g", "discriminator")


# ------------------------------------------------------------ diagnostic


def test_diagnostic_range_determinism_and_warning():
    eng = Engine(TrainConfig(**SMALL))
    img = _patches(1, 32)[0]
    with pytest.warns(RuntimeWarning):
        rows = eng.content_enhancer_diagnostic(img, sigmas=(0, 25, 50))
    eng.state.step = 1
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        again = eng.content_enhancer_diagnostic(img, sigmas=(0, 25, 50))
    assert [dataclasses.asdict(r) for r in rows] == [dataclasses.asdict(r) for r in again]
    for r in rows:
        assert len(r.correlations) == min(4, eng.denoiser.config.ce_width)
        assert all(-1.0 <= c <= 1.0 for c in r.correlations)


def test_diagnostic_on_identity_trained_net():
    cfg = TrainConfig(**{**SMALL, "patch_size": 32, "batch_size": 4}, train_sigma=0.0, lambda_adv=0.0, lr=3e-3, epochs=8)
    eng = Engine(cfg)
    with sequential():
        eng.run(_patches(16, 32, seed=6))
    rows = eng.content_enhancer_diagnostic(_patches(1, 32, seed=7)[0], sigmas=(0, 15, 35, 50))
    means = [r.mean_correlation for r in rows]
    assert means[0] >= max(means) - 0.05
