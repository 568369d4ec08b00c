import struct
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from osrk.errors import ArgumentError, ChecksumError, ConfigError, NumericalError, ParseError, ShapeError, TruncationError, VersionError
from osrk.network import LayerSpec, NetworkConfig, build_network
from osrk.training import (
    CKPT_MAGIC,
    Checkpoint,
    TrainConfig,
    TrainState,
    checkpoint_bytes,
    checkpoint_from_bytes,
    fit,
    load_checkpoint,
    make_head,
    save_checkpoint,
    sgd_step,
)


def tiny_config(dim=3):
    layers = (
        LayerSpec("conv", 3, 4, 1, 1),
        LayerSpec("pool", 2, 0, 2),
        LayerSpec("dense", count=8),
        LayerSpec("dense", count=dim),
    )
    return NetworkConfig(9, layers, dim)


def toy_data(n_per_class=4, seed=0):
    """Two classes: bright left columns versus bright right columns."""
    rng = np.random.default_rng(seed)
    x = rng.random((2 * n_per_class, 1, 9, 9)) * 0.2
    x[:n_per_class, :, :, :4] += 1.0
    x[n_per_class:, :, :, 5:] += 1.0
    y = np.repeat([0, 1], n_per_class)
    return x, y


def run(cfg, seed=0, x=None, y=None, dim=3):
    if x is None:
        x, y = toy_data()
    net = build_network(tiny_config(dim), seed=seed)
    head = make_head(2, dim, cfg)
    return fit(net, head, x, y, cfg)


# ---------------------------------------------------------------------------
# optimizer


def test_sgd_single_step():
    p, v = np.array([0.0]), np.array([0.0])
    sgd_step([p], [np.array([1.0])], [v], lr=0.1, momentum=0.9)
    assert p[0] == pytest.approx(-0.1, abs=1e-15) and v[0] == 1.0


def test_sgd_zero_gradient_leaves_params():
    p = np.array([1.5, -2.0])
    sgd_step([p], [np.zeros(2)], [np.zeros(2)], lr=0.1, momentum=0.9)
    assert p.tolist() == [1.5, -2.0]


def test_sgd_momentum_accumulates():
    p, v = np.array([0.0]), np.array([0.0])
    for _ in range(2):
        sgd_step([p], [np.array([1.0])], [v], lr=1.0, momentum=0.9)
    # v1 = 1, v2 = 1.9 => p = -2.9
    assert p[0] == pytest.approx(-2.9, abs=1e-12)


def test_sgd_shape_mismatch():
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(2)], [np.zeros(3)], [np.zeros(2)], 0.1, 0.9)
    with pytest.raises(ShapeError):
        sgd_step([np.zeros(2)], [], [np.zeros(2)], 0.1, 0.9)


@settings(max_examples=50, deadline=None)
@given(
    g=st.lists(st.floats(-10, 10), min_size=1, max_size=6),
    lr=st.floats(1e-4, 1.0),
)
def test_sgd_zero_momentum_is_plain_descent(g, lr):
    g = np.array(g)
    p = np.ones_like(g)
    sgd_step([p], [g], [np.zeros_like(g)], lr, 0.0)
    assert np.allclose(p, 1.0 - lr * g, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# configuration


def test_train_config_defaults():
    cfg = TrainConfig()
    assert (cfg.epochs, cfg.learning_rate, cfg.batch_size) == (50, 0.001, 64)
    assert (cfg.lam, cfg.gamma, cfg.momentum) == (0.1, 1.0, 0.9)


def test_train_config_lists_every_problem():
    with pytest.raises(ConfigError) as err:
        TrainConfig(epochs=0, learning_rate=0.0, batch_size=0, lam=-1.0, gamma=0.0, momentum=1.0)
    msg = str(err.value)
    for name in ("epochs", "learning_rate", "batch_size", "lambda", "gamma", "momentum"):
        assert name in msg


def test_train_config_from_mapping():
    cfg = TrainConfig.from_mapping({"lambda": "0.5", "epochs": "3", "clip_norm": "none"}, seed=4)
    assert cfg.lam == 0.5 and cfg.epochs == 3 and cfg.clip_norm is None and cfg.seed == 4
    with pytest.raises(ConfigError):
        TrainConfig.from_mapping({"epochs": "three"})


# ---------------------------------------------------------------------------
# training loop


def test_closed_set_toy_drops_below_log2():
    cfg = TrainConfig(epochs=50, learning_rate=0.05, batch_size=8, lam=0.0)
    net = build_network(tiny_config(), seed=0)
    head = make_head(2, 3, cfg)
    r0 = head.radius.copy()
    x, y = toy_data()
    res = fit(net, head, x, y, cfg)
    assert len(res.step_losses) == 50
    assert min(res.step_losses) < np.log(2)
    # with lambda = 0 the radius gets no gradient at all
    assert res.head.radius.tobytes() == r0.tobytes()


def test_overfit_small_batch():
    x, y = toy_data(4)
    cfg = TrainConfig(epochs=500, learning_rate=0.05, batch_size=8, lam=0.1)
    res = run(cfg, x=x, y=y)
    assert res.step_losses[-1] < 0.1


def test_training_bit_identical():
    cfg = TrainConfig(epochs=5, learning_rate=0.05, batch_size=3, lam=0.1)
    a, b = run(cfg), run(cfg)
    assert a.step_losses == b.step_losses
    sa, sb = a.net.state_dict(), b.net.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert a.head.points.tobytes() == b.head.points.tobytes()


def test_radius_never_negative():
    seen = []
    x, y = toy_data()
    cfg = TrainConfig(epochs=20, learning_rate=0.5, batch_size=2, lam=1.0)
    net = build_network(tiny_config(), seed=0)
    head = make_head(2, 3, cfg)
    head.radius[...] = -1.0  # a corrupted start is clamped after the first update
    fit(net, head, x, y, cfg, on_epoch_end=lambda e, s: seen.append(float(head.radius)))
    assert min(seen) >= 0.0


def test_per_class_radius_shape():
    cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=4, per_class_radius=True)
    res = run(cfg)
    assert res.head.radius.shape == (2,)
    assert np.all(res.head.radius >= 0)


def test_epoch_log_fields():
    cfg = TrainConfig(epochs=3, learning_rate=0.05, batch_size=3)
    res = run(cfg)
    assert [e.epoch for e in res.epochs] == [1, 2, 3]
    for e in res.epochs:
        assert e.total == pytest.approx(e.classification + cfg.lam * e.boundary, rel=1e-12)


def test_fit_argument_errors():
    x, y = toy_data()
    cfg = TrainConfig(epochs=1)
    with pytest.raises(ArgumentError, match="labels"):
        run(cfg, x=x, y=y + 1)
    with pytest.raises(ShapeError):
        run(cfg, x=x[:3], y=y)
    with pytest.raises(ArgumentError, match="empty"):
        run(cfg, x=x[:0], y=y[:0])


def test_non_finite_reports_coordinates():
    x, y = toy_data()
    x[:] = np.nan
    with pytest.raises(NumericalError, match=r"epoch 0, batch 0"):
        run(TrainConfig(epochs=1, batch_size=4), x=x, y=y)


def test_clip_norm_bounds_update():
    cfg = TrainConfig(epochs=1, learning_rate=1.0, batch_size=8, momentum=0.0, clip_norm=1e-3)
    x, y = toy_data()
    net = build_network(tiny_config(), seed=0)
    before = np.concatenate([p.data.ravel() for p in net.params()])
    fit(net, make_head(2, 3, cfg), x, y, cfg)
    after = np.concatenate([p.data.ravel() for p in net.params()])
    assert np.linalg.norm(after - before) <= 1e-3 + 1e-12


# ---------------------------------------------------------------------------
# checkpoints


def trained_checkpoint(epochs=2):
    cfg = TrainConfig(epochs=epochs, learning_rate=0.05, batch_size=3)
    res = run(cfg)
    return Checkpoint.capture(res.net, res.head, res.state, cfg), cfg


def test_checkpoint_layout():
    data = checkpoint_bytes(trained_checkpoint()[0])
    assert data[:4] == CKPT_MAGIC
    assert struct.unpack("<I", data[4:8])[0] == 1
    assert struct.unpack("<I", data[-4:])[0] == zlib.crc32(data[:-4])


def test_checkpoint_round_trip_byte_identical(tmp_path):
    ckpt, _ = trained_checkpoint()
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, ckpt)
    save_checkpoint(p2, load_checkpoint(p1))
    assert p1.read_bytes() == p2.read_bytes()
    loaded = load_checkpoint(p1)
    assert loaded.epoch == 2 and loaded.step == ckpt.step
    assert loaded.train_config["lam"] == 0.1


def test_checkpoint_restore_predicts_identically():
    ckpt, _ = trained_checkpoint()
    net_a, head_a, _ = ckpt.restore()
    net_b, head_b, _ = checkpoint_from_bytes(checkpoint_bytes(ckpt)).restore()
    x, _ = toy_data()
    assert net_a.forward(x).tobytes() == net_b.forward(x).tobytes()
    assert head_a.points.tobytes() == head_b.points.tobytes()


@pytest.mark.parametrize("cut", [0, 3, 10, 100, -5])
def test_checkpoint_truncated(cut):
    data = checkpoint_bytes(trained_checkpoint(1)[0])
    with pytest.raises(TruncationError):
        checkpoint_from_bytes(data[:cut])


def test_checkpoint_bit_flip_fails_checksum():
    data = bytearray(checkpoint_bytes(trained_checkpoint(1)[0]))
    data[len(data) // 2] ^= 0x01
    with pytest.raises((ChecksumError, ParseError)):
        checkpoint_from_bytes(bytes(data))
    data = bytearray(checkpoint_bytes(trained_checkpoint(1)[0]))
    data[-1] ^= 0xFF
    with pytest.raises(ChecksumError):
        checkpoint_from_bytes(bytes(data))


def test_checkpoint_version_and_magic():
    data = bytearray(checkpoint_bytes(trained_checkpoint(1)[0]))
    bumped = bytes(data[:4]) + struct.pack("<I", 2) + bytes(data[8:])
    with pytest.raises(VersionError, match="2"):
        checkpoint_from_bytes(bumped)
    with pytest.raises(ParseError, match="magic"):
        checkpoint_from_bytes(b"NOPE" + bytes(data[4:]))
    with pytest.raises(ParseError, match="trailing"):
        checkpoint_from_bytes(bytes(data) + b"\0")


def test_resume_matches_uninterrupted(tmp_path):
    x, y = toy_data()
    full_cfg = TrainConfig(epochs=4, learning_rate=0.05, batch_size=3)
    full = run(full_cfg, x=x, y=y)

    half_cfg = TrainConfig(epochs=2, learning_rate=0.05, batch_size=3)
    half = run(half_cfg, x=x, y=y)
    path = tmp_path / "mid.ckpt"
    save_checkpoint(path, Checkpoint.capture(half.net, half.head, half.state, half_cfg))
    net, head, state = load_checkpoint(path).restore()
    rest = fit(net, head, x, y, full_cfg, state=state)

    assert half.step_losses + rest.step_losses == full.step_losses
    sa, sb = full.net.state_dict(), rest.net.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert full.head.radius.tobytes() == rest.head.radius.tobytes()
    assert rest.state.epoch == 4 and rest.state.step == full.state.step


def test_fresh_state_has_velocity_per_param():
    net = build_network(tiny_config(), seed=0)
    head = make_head(2, 3, TrainConfig())
    st_ = TrainState.fresh(net, head, 0)
    names = {n for n, _ in net.named_params()} | {"head.points", "head.radius"}
    assert set(st_.velocities) == names
