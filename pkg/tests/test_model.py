import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sfsseg.container import ContainerError, read_header
from sfsseg.model import (ModelConfig, SegmentationModel, ShapeError, classify, embed,
                          load_checkpoint, save_checkpoint)
from sfsseg.numerics import ContractViolation, gradient_check


def small(**kw):
    base = dict(width=16, height=16, embed_dim=4, encoder_channels=[4, 6], num_classes=3)
    base.update(kw)
    return ModelConfig(**base)


def test_config_invariants():
    with pytest.raises(ContractViolation):
        ModelConfig(num_classes=1)
    with pytest.raises(ContractViolation):
        ModelConfig(embed_dim=1)
    with pytest.raises(ContractViolation):
        ModelConfig(width=30)
    with pytest.raises(ContractViolation):
        ModelConfig(downsample_factor=8)


@pytest.mark.parametrize("skip", [False, True])
def test_output_shapes_and_simplex(skip):
    m = SegmentationModel(small(skip_connections=skip), seed=1)
    x = np.random.default_rng(0).normal(size=(2, 16, 16, 3))
    z = m.embed(x)
    assert z.shape == (2, 16, 16, 4)
    probs = m(x).data
    assert probs.shape == (2, 16, 16, 3)
    np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-6)


def test_wrong_image_shape_rejected():
    m = SegmentationModel(small())
    with pytest.raises(ShapeError):
        m.embed(np.zeros((1, 8, 16, 3)))
    with pytest.raises(ShapeError):
        m.classify(np.zeros((1, 16, 16, 5)))


def test_zero_image_gives_zero_embedding():
    m = SegmentationModel(small())
    assert np.all(m.embed(np.zeros((1, 16, 16, 3))).data == 0.0)


def test_embed_is_deterministic():
    x = np.random.default_rng(2).normal(size=(1, 16, 16, 3))
    a = SegmentationModel(small(), seed=5).embed(x).data
    b = SegmentationModel(small(), seed=5).embed(x).data
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(embed(SegmentationModel(small(), seed=5), x).data, a)


def test_zero_classifier_is_uniform():
    m = SegmentationModel(small())
    m.params["cls.w"].data[:] = 0.0
    m.params["cls.b"].data[:] = 0.0
    z = np.random.default_rng(3).normal(size=(1, 4, 4, 4))
    np.testing.assert_allclose(classify(m, z).data, 1.0 / 3.0)


def test_argmax_invariant_to_logit_shift():
    m = SegmentationModel(small(), seed=2)
    z = np.random.default_rng(4).normal(size=(1, 5, 5, 4))
    before = m.classify(z).data.argmax(-1)
    m.params["cls.b"].data += 7.5
    np.testing.assert_array_equal(m.classify(z).data.argmax(-1), before)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_classifier_commutes_with_pixel_permutation(seed):
    rng = np.random.default_rng(seed)
    m = SegmentationModel(small(), seed=3)
    z = rng.normal(size=(1, 4, 4, 4))
    perm = rng.permutation(16)
    flat = z.reshape(16, 4)
    out = m.classify(flat.reshape(1, 4, 4, 4)).data.reshape(16, 3)
    out_perm = m.classify(flat[perm].reshape(1, 4, 4, 4)).data.reshape(16, 3)
    np.testing.assert_array_equal(out_perm, out[perm])


# -- receptive field ---------------------------------------------------------------

def _dependency_oracle(cfg, row, col):
    """Input pixels that can reach embedding pixel (row, col), by tracing layer index maps.

    Works on boolean masks only, so it shares no code with the forward pass.
    """
    H, W = cfg.height, cfg.width
    n = len(cfg.encoder_channels)
    sizes = [(H >> i, W >> i) for i in range(n + 1)]

    def conv_back(mask, in_size, stride):
        # conv 3x3 pad 1: out (i, j) reads in (stride*i + a - 1, stride*j + b - 1)
        out = np.zeros(in_size, bool)
        for i, j in zip(*np.nonzero(mask)):
            for a in range(3):
                for b in range(3):
                    r, c = stride * i + a - 1, stride * j + b - 1
                    if 0 <= r < in_size[0] and 0 <= c < in_size[1]:
                        out[r, c] = True
        return out

    def up_back(mask, in_size):
        out = np.zeros(in_size, bool)
        for i, j in zip(*np.nonzero(mask)):
            out[i // 2, j // 2] = True
        return out

    # masks per resolution level: what must be known at that level
    need = {lvl: np.zeros(sizes[lvl], bool) for lvl in range(n + 1)}
    top = np.zeros(sizes[0], bool)
    top[row, col] = True
    # walk the decoder backwards: level 0 <- level 1 <- ... <- level n
    cur = top
    for i in reversed(range(n)):
        lvl_out = n - 1 - i  # decoder stage i writes level n-1-i
        pre = conv_back(cur, sizes[lvl_out], 1)
        if cfg.skip_connections:
            need[lvl_out] |= pre
        cur = up_back(pre, sizes[lvl_out + 1])
    need[n] |= cur
    # walk the encoder backwards from the deepest level
    for lvl in reversed(range(1, n + 1)):
        need[lvl - 1] |= conv_back(need[lvl], sizes[lvl - 1], 2)
    return need[0]


@pytest.mark.parametrize("skip", [False, True])
def test_perturbation_stays_inside_receptive_field(skip):
    cfg = small(skip_connections=skip)
    m = SegmentationModel(cfg, seed=6)
    rng = np.random.default_rng(7)
    x = rng.normal(size=(1, 16, 16, 3))
    base = m.embed(x).data[0]
    for r, c in [(0, 0), (7, 9), (15, 15), (4, 12)]:
        x2 = x.copy()
        x2[0, r, c, :] += 1.0
        changed = np.any(m.embed(x2).data[0] != base, axis=-1)
        # pixel (i, j) may change only if (r, c) is in its dependency set
        reach = np.array([[_dependency_oracle(cfg, i, j)[r, c] for j in range(16)] for i in range(16)])
        assert not np.any(changed & ~reach)
        assert changed.any()


def test_end_to_end_gradient_on_8x8():
    cfg = ModelConfig(width=8, height=8, embed_dim=3, encoder_channels=[3, 4], num_classes=3)
    m = SegmentationModel(cfg, seed=8)
    rng = np.random.default_rng(9)
    x = rng.normal(size=(1, 8, 8, 3))
    labels = rng.integers(0, 3, size=(1, 8, 8))
    from sfsseg.losses import cross_entropy_logits

    def loss_for(name):
        def fn(t):
            saved = m.params[name]
            m.params[name] = t
            try:
                return cross_entropy_logits(m.logits(m.embed(x)), labels)
            finally:
                m.params[name] = saved
        return fn

    for name in ("enc0.w", "dec1.w", "cls.w"):
        assert gradient_check(loss_for(name), m.params[name].data.copy(), eps=1e-6) < 1e-3
    assert gradient_check(lambda t: cross_entropy_logits(m.logits(m.embed(t)), labels), x, eps=1e-6) < 1e-3


# -- checkpoints --------------------------------------------------------------------

def test_checkpoint_round_trip_bit_identical(tmp_path):
    m = SegmentationModel(small(skip_connections=True), seed=11)
    path = tmp_path / "m.sfsmodel"
    save_checkpoint(m, path)
    m2 = load_checkpoint(path)
    x = np.random.default_rng(12).normal(size=(2, 16, 16, 3))
    np.testing.assert_array_equal(m.embed(x).data, m2.embed(x).data)
    np.testing.assert_array_equal(m(x).data, m2(x).data)


def test_checkpoint_wrong_k_rejected(tmp_path):
    path = tmp_path / "m.sfsmodel"
    save_checkpoint(SegmentationModel(small()), path)
    with pytest.raises(ShapeError):
        load_checkpoint(path, config=small(num_classes=4))


def test_checkpoint_corruption_detected(tmp_path):
    path = tmp_path / "m.sfsmodel"
    save_checkpoint(SegmentationModel(small()), path)
    raw = path.read_bytes()
    (tmp_path / "trunc.sfsmodel").write_bytes(raw[:-9])
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "trunc.sfsmodel")
    (tmp_path / "magic.sfsmodel").write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(ContainerError):
        load_checkpoint(tmp_path / "magic.sfsmodel")
    bad_version = raw[:4] + (99).to_bytes(4, "little") + raw[8:]
    (tmp_path / "ver.sfsmodel").write_bytes(bad_version)
    with pytest.raises(ContainerError, match="version"):
        load_checkpoint(tmp_path / "ver.sfsmodel")


def test_checkpoint_without_gmm_section(tmp_path):
    path = tmp_path / "m.sfsmodel"
    save_checkpoint(SegmentationModel(small()), path)
    with pytest.raises(ContainerError, match="GMM"):
        load_checkpoint(path, with_gmm=True)


def test_checkpoint_schema_holds_parameters_only(tmp_path):
    m = SegmentationModel(small())
    path = tmp_path / "m.sfsmodel"
    save_checkpoint(m, path)
    header, _ = read_header(path)
    names = {a["name"] for a in header["arrays"]}
    assert names == {f"model/{n}" for n in m.param_names()}
    # no array is image-shaped, and the payload size is exactly the parameter count
    assert all(len(a["shape"]) <= 4 and tuple(a["shape"][:2]) != (16, 16) for a in header["arrays"])
    assert sum(int(np.prod(a["shape"])) for a in header["arrays"]) == sum(p.data.size for p in m.parameters())
    json.dumps(header)
