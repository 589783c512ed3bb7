"""Model assembly, training loop, and checkpoint container."""

import numpy as np
import pytest

import gzoom as gz
from gzoom import layers
from gzoom.checkpoint import MAGIC
from gzoom.errors import (BadMagicError, ConfigError, TruncatedError,
                          UsageError, VersionError)
from gzoom.network import Model, ModelSpec, topk


def small_spec(num_classes=3, grounding_block=3):
    return ModelSpec(input_size=16, channels=(2, 3, 4, 4),
                     num_classes=num_classes, grounding_block=grounding_block)


def test_spec_validation():
    with pytest.raises(ConfigError):
        ModelSpec(input_size=8, channels=(2, 2, 2, 2), num_classes=3,
                  grounding_block=3)  # too small for 4 pools
    with pytest.raises(ConfigError):
        ModelSpec(input_size=16, channels=(2, 2, 2, 2), num_classes=1,
                  grounding_block=3)
    with pytest.raises(ConfigError):
        ModelSpec(input_size=16, channels=(2, 2, 2, 2), num_classes=3,
                  grounding_block=9)


def test_descriptor_roundtrip():
    spec = gz.conventional_spec(10)
    assert ModelSpec.from_descriptor(spec.descriptor()) == spec
    spec2 = small_spec(7)
    assert ModelSpec.from_descriptor(spec2.descriptor()) == spec2


def test_factory_specs():
    conv = gz.conventional_spec(10)
    ev = gz.evidence_spec(10)
    assert conv.input_size == 64 and ev.input_size == 32
    assert conv.channels == (16, 32, 64, 64) == ev.channels
    assert conv.grounding_block == 3


def test_init_deterministic_and_bounded():
    spec = small_spec()
    a = Model.init(spec, seed=5)
    b = Model.init(spec, seed=5)
    c = Model.init(spec, seed=6)
    for (_, ta), (_, tb) in zip(a.named_tensors(), b.named_tensors()):
        assert np.array_equal(ta, tb)
    assert any(not np.array_equal(ta, tc) for (_, ta), (_, tc) in
               zip(a.named_tensors(), c.named_tensors()))
    for p in a.params():
        fan_in = np.prod(p.w.shape[1:])
        fan_out = p.w.shape[0] * (np.prod(p.w.shape[2:]) if p.w.ndim == 4 else 1)
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        assert np.abs(p.w).max() <= bound
        assert np.all(p.b == 0)


def test_forward_shapes_and_trace():
    spec = small_spec(num_classes=5)
    m = Model.init(spec, seed=0)
    x = np.random.default_rng(0).random((3, 3, 16, 16)).astype(np.float32)
    logits = m.forward(x)
    assert logits.shape == (3, 5)
    tr = m.forward_trace(x)
    assert np.array_equal(tr.logits, logits)
    assert tr.pool_out[spec.grounding_block - 1].shape[2] == 2  # 16 -> 8 -> 4 -> 2
    assert len(tr.a) == 4


def test_forward_from_block_matches_trace():
    spec = small_spec()
    m = Model.init(spec, seed=1)
    x = np.random.default_rng(1).random((2, 3, 16, 16)).astype(np.float32)
    tr = m.forward_trace(x)
    for block in range(4):
        acts = tr.pool_out[block]
        again = m.forward_from_block(block, acts)
        assert np.allclose(again, tr.logits, atol=1e-6)


def test_zero_head_uniform_probs():
    m = Model.init(small_spec(4), seed=2)
    m.fc.w[:] = 0
    m.fc.b[:] = 0
    x = np.random.default_rng(2).random((2, 3, 16, 16)).astype(np.float32)
    probs = layers.softmax(m.forward(x))
    assert np.allclose(probs, 0.25)


def test_backward_requires_forward_trace():
    m = Model.init(small_spec(), seed=3)
    with pytest.raises(UsageError):
        m.backward(None, np.zeros((1, 3)))


def test_receptive_field_is_local():
    # a far-away pixel cannot influence an early block's opposite corner
    spec = ModelSpec(input_size=64, channels=(4, 4, 4, 4), num_classes=3,
                     grounding_block=3)
    m = Model.init(spec, seed=4)
    r = np.random.default_rng(4)
    x = r.random((1, 3, 64, 64)).astype(np.float32)
    x2 = x.copy()
    x2[0, :, 0, 0] += 1.0
    a1 = m.forward_trace(x).pool_out[0]  # block 1 output, 32x32
    a2 = m.forward_trace(x2).pool_out[0]
    # block1 cell (31,31) sees input rows/cols >= 58: untouched by (0,0)
    assert np.array_equal(a1[0, :, 16:, 16:], a2[0, :, 16:, 16:])
    assert not np.array_equal(a1[0, :, :2, :2], a2[0, :, :2, :2])


def test_model_dtype_propagates():
    m64 = Model.init(small_spec(), seed=5, dtype=np.float64)
    assert m64.dtype == np.float64
    x = np.random.default_rng(5).random((1, 3, 16, 16))
    assert m64.forward(x).dtype == np.float64


# ---------------------------------------------------------------------------
# topk


def test_topk_order_and_ties():
    probs = np.array([0.2, 0.5, 0.2, 0.1])
    assert list(topk(probs, 3)) == [1, 0, 2]  # tie -> lower class id first
    assert list(topk(probs, 4)) == [1, 0, 2, 3]
    with pytest.raises(ValueError):
        topk(probs, 0)
    with pytest.raises(ValueError):
        topk(probs, 5)


def test_topk_rescale_invariance():
    r = np.random.default_rng(6)
    probs = r.random(8)
    assert np.array_equal(topk(probs, 4), topk(probs * 3.7, 4))


# ---------------------------------------------------------------------------
# training


def brightness_task(n_per_class=40, size=16, seed=0):
    """Trivially separable two-class task: dark vs bright images."""
    r = np.random.default_rng(seed)
    darks = (r.random((n_per_class, 3, size, size)) * 0.3).astype(np.float32)
    brights = (0.7 + r.random((n_per_class, 3, size, size)) * 0.3).astype(np.float32)
    images = np.concatenate([darks, brights])
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    return images, labels


def test_training_learns_separable_task():
    images, labels = brightness_task()
    cfg = gz.TrainConfig(iterations=150, batch_size=16, lr=0.05,
                         decay_interval=10000, seed=1)
    model, trace = gz.train((images, labels), small_spec(2), cfg)
    assert trace["loss"][-1] < trace["loss"][0]
    assert gz.accuracy(model, images, labels) >= 0.95


def test_zero_iterations_returns_init():
    images, labels = brightness_task(4)
    cfg = gz.TrainConfig(iterations=0, seed=9)
    model, trace = gz.train((images, labels), small_spec(2), cfg)
    fresh = Model.init(small_spec(2), seed=gz.derive_seed(9, "init"))
    for (_, a), (_, b) in zip(model.named_tensors(), fresh.named_tensors()):
        assert np.array_equal(a, b)
    assert trace["loss"] == []


def test_training_deterministic():
    images, labels = brightness_task(8)
    cfg = gz.TrainConfig(iterations=30, batch_size=8, seed=3)
    m1, t1 = gz.train((images, labels), small_spec(2), cfg)
    m2, t2 = gz.train((images, labels), small_spec(2), cfg)
    assert t1["loss"] == t2["loss"]
    for (_, a), (_, b) in zip(m1.named_tensors(), m2.named_tensors()):
        assert np.array_equal(a, b)


def test_training_lr_schedule_in_trace():
    images, labels = brightness_task(8)
    cfg = gz.TrainConfig(iterations=9, batch_size=8, lr=0.4, decay_factor=0.5,
                         decay_interval=4, seed=3)
    _, trace = gz.train((images, labels), small_spec(2), cfg)
    assert trace["lr"][:4] == [0.4] * 4
    assert trace["lr"][4:8] == [0.2] * 4
    assert trace["lr"][8] == 0.1


def test_training_config_validation():
    with pytest.raises(ConfigError):
        gz.TrainConfig(lr=0.0)
    with pytest.raises(ConfigError):
        gz.TrainConfig(batch_size=0)
    with pytest.raises(ConfigError):
        gz.TrainConfig(momentum=1.0)
    with pytest.raises(ConfigError):
        gz.TrainConfig(decay_factor=0.0)


def test_training_rejects_bad_labels():
    images, labels = brightness_task(4)
    with pytest.raises(ConfigError):
        gz.train((images, labels + 5), small_spec(2),
                 gz.TrainConfig(iterations=1))


def test_eval_view_shape_and_center():
    images = np.random.default_rng(7).random((2, 3, 64, 64)).astype(np.float32)
    view = gz.eval_view(images, 64)
    assert view.shape == (2, 3, 64, 64)
    single = gz.eval_view(images[0], 64)
    assert single.shape == (3, 64, 64)
    assert np.array_equal(single, view[0])
    # identity-size canvas: a 35px source at input 32 is a pure center crop
    src = np.random.default_rng(8).random((1, 3, 35, 35)).astype(np.float32)
    v = gz.eval_view(src, 32)
    assert np.array_equal(v[0], src[0, :, 1:33, 1:33])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical(tmp_path):
    m = Model.init(small_spec(5), seed=11)
    path = tmp_path / "m.gzck"
    gz.save_checkpoint(m, path)
    loaded = gz.load_checkpoint(path)
    assert loaded.spec == m.spec
    for (_, a), (_, b) in zip(m.named_tensors(), loaded.named_tensors()):
        assert np.array_equal(a.astype(np.float32), b)
    x = np.random.default_rng(11).random((2, 3, 16, 16)).astype(np.float32)
    assert np.array_equal(m.forward(x), loaded.forward(x))


def test_checkpoint_save_deterministic(tmp_path):
    m = Model.init(small_spec(), seed=12)
    p1, p2 = tmp_path / "a.gzck", tmp_path / "b.gzck"
    gz.save_checkpoint(m, p1)
    gz.save_checkpoint(m, p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert gz.checkpoint_hash(p1) == gz.checkpoint_hash(p2)


def test_checkpoint_error_trio(tmp_path):
    m = Model.init(small_spec(), seed=13)
    path = tmp_path / "m.gzck"
    gz.save_checkpoint(m, path)
    data = path.read_bytes()

    bad_magic = tmp_path / "bad_magic.gzck"
    bad_magic.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(BadMagicError):
        gz.load_checkpoint(bad_magic)

    bad_version = tmp_path / "bad_version.gzck"
    bad_version.write_bytes(MAGIC + b"\x63\x00\x00\x00" + data[8:])
    with pytest.raises(VersionError):
        gz.load_checkpoint(bad_version)

    truncated = tmp_path / "trunc.gzck"
    truncated.write_bytes(data[:len(data) // 2])
    with pytest.raises(TruncatedError):
        gz.load_checkpoint(truncated)


def test_clone_is_independent_copy():
    m = Model.init(small_spec(), seed=14)
    c = m.clone()
    for (_, a), (_, b) in zip(m.named_tensors(), c.named_tensors()):
        assert np.array_equal(a, b) and a is not b
    c.fc.w += 1.0
    assert not np.array_equal(m.fc.w, c.fc.w)


def test_warm_start_continues_from_model():
    images, labels = brightness_task(8)
    spec = small_spec(2)
    base, _ = gz.train((images, labels), spec, gz.TrainConfig(iterations=20, batch_size=8, seed=3))
    # zero extra iterations: an exact copy, not an alias
    same, trace = gz.train((images, labels), spec, gz.TrainConfig(iterations=0, seed=4), start=base)
    assert trace["loss"] == []
    for (_, a), (_, b) in zip(base.named_tensors(), same.named_tensors()):
        assert np.array_equal(a, b) and a is not b
    # more iterations actually move the weights, deterministically
    cont1, _ = gz.train((images, labels), spec, gz.TrainConfig(iterations=10, batch_size=8, seed=5), start=base)
    cont2, _ = gz.train((images, labels), spec, gz.TrainConfig(iterations=10, batch_size=8, seed=5), start=base)
    assert not np.array_equal(base.fc.w, cont1.fc.w)
    for (_, a), (_, b) in zip(cont1.named_tensors(), cont2.named_tensors()):
        assert np.array_equal(a, b)


def test_warm_start_spec_mismatch_rejected():
    images, labels = brightness_task(4)
    base, _ = gz.train((images, labels), small_spec(2), gz.TrainConfig(iterations=0, seed=1))
    with pytest.raises(ConfigError):
        gz.train((images, labels), small_spec(3), gz.TrainConfig(iterations=0, seed=1), start=base)
