import json

import numpy as np
import pytest

from randsketch.linalg import ShapeError
from randsketch.nn import (
    DenseConv2d,
    DenseLinear,
    ExactMha,
    Kernel,
    Model,
    ModelFormatError,
    RandMha,
    ReLU,
    SkConv2d,
    SkLinear,
    SkTerm,
    col2im,
    dense_linear_forward,
    exact_mha_forward,
    feature_map,
    im2col,
    memory_estimate,
    model_load,
    model_save,
    param_count,
    rand_mha_forward,
    sk_conv2d_forward,
    sk_linear_backward,
    sk_linear_forward,
    sk_linear_from_dense,
    skip_rule_exceeds,
)
from randsketch.nn.gradcheck import check_layer_gradients
from randsketch.sketch import SketchOp, make_sketch


def rng(seed=0):
    return np.random.default_rng(seed)


# dense and sketched linear -------------------------------------------------

def test_dense_linear_examples():
    x = rng().standard_normal((3, 4))
    assert np.array_equal(dense_linear_forward(np.eye(3), np.zeros(3), x), x)
    out = dense_linear_forward(np.array([[1.0, 1.0]]), np.array([1.0]), np.array([[2.0], [3.0]]))
    assert out.tolist() == [[6.0]]
    w, b = rng(1).standard_normal((2, 3)), rng(2).standard_normal(2)
    batch = dense_linear_forward(w, b, x[:, :2])
    for j in range(2):
        np.testing.assert_allclose(batch[:, j : j + 1], dense_linear_forward(w, b, x[:, j : j + 1]))
    with pytest.raises(ShapeError):
        dense_linear_forward(w, b, np.ones((4, 1)))


def identity_sk_linear(d, u1, u2, b):
    eye = SketchOp.explicit(np.eye(d))
    return SkLinear(d, d, 1, d, [SkTerm(eye, u1, eye, u2)], b)


def test_sk_linear_identity_sketches_collapse():
    g = rng(3)
    d = 4
    u1, u2, b = g.standard_normal((d, d)), g.standard_normal((d, d)), g.standard_normal(d)
    layer = identity_sk_linear(d, u1, u2, b)
    x = g.standard_normal((d, 5))
    np.testing.assert_allclose(sk_linear_forward(layer, x), (u1 + u2) / 2 @ x + b[:, None], atol=1e-14)


def test_sk_linear_zero_input_gives_bias():
    layer = SkLinear.init(6, 4, 2, 3, seed=1)
    layer.bias[:] = [1, 2, 3, 4]
    out = layer.forward(np.zeros((6, 3)))
    assert np.array_equal(out, np.tile([[1.0], [2.0], [3.0], [4.0]], 3))


def test_sk_linear_from_zero_weight():
    layer = sk_linear_from_dense(np.zeros((4, 5)), np.arange(4.0), 2, 3, seed=0)
    assert all(np.all(p == 0) for n, p in layer.params().items() if n != "bias")
    np.testing.assert_array_equal(layer.forward(rng().standard_normal((5, 2))), np.tile(np.arange(4.0)[:, None], 2))


def test_sk_linear_backward_zero_and_batch_additivity():
    g = rng(4)
    layer = SkLinear.init(6, 8, 2, 3, seed=2)
    x = g.standard_normal((6, 2))
    zero = sk_linear_backward(layer, x, np.zeros((8, 2)))
    assert np.all(zero["grad_x"] == 0) and np.all(zero["grad_b"] == 0)
    assert all(np.all(a == 0) for a in zero["grad_u1"] + zero["grad_u2"])
    go = g.standard_normal((8, 2))
    both = sk_linear_backward(layer, x, go)
    cols = [sk_linear_backward(layer, x[:, j : j + 1], go[:, j : j + 1]) for j in range(2)]
    for key in ("grad_u1", "grad_u2"):
        for i in range(2):
            np.testing.assert_allclose(both[key][i], cols[0][key][i] + cols[1][key][i], atol=1e-12)
    np.testing.assert_allclose(both["grad_b"], cols[0]["grad_b"] + cols[1]["grad_b"], atol=1e-12)


def test_sk_linear_seed_average_is_unbiased_small():
    g = rng(5)
    w, b = g.standard_normal((4, 5)), g.standard_normal(4)
    x = g.standard_normal((5, 1))
    outs = np.array([sk_linear_from_dense(w, b, 1, 2, seed=s).forward(x)[:, 0] for s in range(2000)])
    se = outs.std(axis=0, ddof=1) / np.sqrt(len(outs))
    assert np.all(np.abs(outs.mean(axis=0) - (w @ x + b[:, None])[:, 0]) <= 3.5 * se)


def test_sk_linear_shape_errors():
    with pytest.raises(ShapeError):
        SkLinear.init(6, 4, 1, 2).forward(np.ones((5, 1)))
    with pytest.raises(ValueError):
        SkLinear.init(6, 4, 0, 2)


@pytest.mark.parametrize(
    "d_in,d_out,l,k,expected",
    [(8192, 8192, 1, 16, 524_288), (256, 256, 2, 64, 131_072), (20736, 2048, 1, 8, 364_544)],
)
def test_skip_rule_arithmetic(d_in, d_out, l, k, expected):
    layer = SkLinear.init(d_in, d_out, l, k, seed=0) if d_in * d_out < 5e6 else None
    if layer is not None:
        pc = param_count(layer)
        assert pc.total_stored - d_out == expected
        assert pc.learnable == l * k * (d_in + d_out) + d_out
    assert 2 * l * k * (d_in + d_out) == expected
    assert skip_rule_exceeds(d_in, d_out, l, k) == (expected > d_in * d_out)


def test_skip_rule_boundary_admits_equality():
    assert not skip_rule_exceeds(256, 256, 1, 64)
    assert skip_rule_exceeds(256, 256, 2, 64)


# convolution ---------------------------------------------------------------

def direct_conv(x, w, b, stride, padding):
    c_out, c_in, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (padding, padding), (padding, padding)))
    oh = (xp.shape[1] - kh) // stride + 1
    ow = (xp.shape[2] - kw) // stride + 1
    out = np.zeros((c_out, oh, ow))
    for o in range(c_out):
        for i in range(oh):
            for j in range(ow):
                acc = b[o]
                for c in range(c_in):
                    for p in range(kh):
                        for q in range(kw):
                            acc += w[o, c, p, q] * xp[c, i * stride + p, j * stride + q]
                out[o, i, j] = acc
    return out


def test_im2col_examples():
    x = rng().standard_normal((3, 4, 5))
    np.testing.assert_array_equal(im2col(x, 1, 1), x.reshape(3, 20))
    img = np.arange(1.0, 10.0).reshape(1, 3, 3)
    cols = im2col(img, 2, 2)
    assert cols.shape == (4, 4)
    assert cols[:, 0].tolist() == [1, 2, 4, 5]
    assert np.all(im2col(np.zeros((2, 5, 5)), 3, 3) == 0)
    with pytest.raises(ShapeError):
        im2col(np.zeros((1, 2, 2)), 3, 3)


@pytest.mark.parametrize("stride,padding", [(1, 0), (2, 1), (1, 2), (3, 0)])
def test_col2im_is_adjoint_of_im2col(stride, padding):
    g = rng(7)
    shape = (2, 3, 7, 6)
    x = g.standard_normal(shape)
    cols = im2col(x, 3, 2, stride, padding)
    y = g.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * col2im(y, shape, 3, 2, stride, padding))
    assert lhs == pytest.approx(rhs, rel=1e-12)


@pytest.mark.parametrize("kernel,stride,padding", [(3, 1, 0), (3, 2, 1), (1, 1, 0), (5, 1, 2)])
def test_dense_conv_matches_nested_loops(kernel, stride, padding):
    conv = DenseConv2d.init(2, 3, kernel, stride, padding, seed=kernel)
    conv.bias[:] = rng(1).standard_normal(3)
    x = rng(2).standard_normal((2, 8, 8))
    ref = direct_conv(x, conv.weight, conv.bias, stride, padding)
    np.testing.assert_allclose(conv.forward(x), ref, atol=1e-12)


def test_conv_batch_matches_single_images():
    conv = DenseConv2d.init(2, 3, 3, padding=1, seed=4)
    x = rng(3).standard_normal((3, 2, 5, 5))
    batch = conv.forward(x)
    for i in range(3):
        np.testing.assert_allclose(batch[i], conv.forward(x[i]), atol=1e-13)


def test_sk_conv_zero_input_gives_bias_maps():
    layer = SkConv2d.init(2, 3, 3, 1, 4, seed=1)
    layer.inner.bias[:] = [1.0, -2.0, 0.5]
    out = sk_conv2d_forward(layer, np.zeros((2, 6, 6)))
    assert out.shape == (3, 4, 4)
    for c, v in enumerate([1.0, -2.0, 0.5]):
        assert np.all(out[c] == v)


def test_sk_conv_equals_sk_linear_on_patches():
    dense = DenseConv2d.init(2, 4, 3, seed=0)
    sk = SkConv2d.from_dense(dense, 2, 3, seed=5)
    x = rng(1).standard_normal((2, 6, 6))
    via_cols = sk.inner.forward(im2col(x, 3, 3)).reshape(4, 4, 4)
    np.testing.assert_allclose(sk.forward(x), via_cols, atol=1e-13)


def test_sk_conv_seed_average_matches_dense():
    dense = DenseConv2d.init(1, 2, 3, seed=3)
    x = rng(6).standard_normal((1, 5, 5))
    ref = dense.forward(x)
    outs = np.array([SkConv2d.from_dense(dense, 1, 2, seed=s).forward(x) for s in range(3000)])
    se = outs.std(axis=0, ddof=1) / np.sqrt(len(outs))
    frac = np.mean(np.abs(outs.mean(axis=0) - ref) <= 3 * se)
    assert frac >= 0.95


# gradients -----------------------------------------------------------------

GRAD_CASES = {
    "DenseLinear": lambda: (DenseLinear.init(6, 8, seed=1), rng(1).standard_normal((6, 3))),
    "SkLinear": lambda: (SkLinear.init(6, 8, 2, 3, seed=2), rng(2).standard_normal((6, 3))),
    "DenseConv2d": lambda: (DenseConv2d.init(2, 3, 3, stride=2, padding=1, seed=3), rng(3).standard_normal((2, 2, 5, 5))),
    "SkConv2d": lambda: (SkConv2d.init(2, 3, 3, 2, 2, stride=1, padding=1, seed=4), rng(4).standard_normal((2, 4, 4))),
    "ExactMha": lambda: (ExactMha.init(8, 2, seed=5), rng(5).standard_normal((5, 8))),
    "RandMha-softmax": lambda: (RandMha.init(8, 2, 16, "softmax", seed=6), rng(6).standard_normal((5, 8))),
    "RandMha-relu": lambda: (RandMha.init(8, 2, 16, "relu", seed=7), rng(7).standard_normal((5, 8))),
    "ReLU": lambda: (ReLU(), rng(8).standard_normal((4, 3))),
}


@pytest.mark.parametrize("name", sorted(GRAD_CASES))
def test_gradients_match_finite_differences(name):
    layer, x = GRAD_CASES[name]()
    errors = check_layer_gradients(layer, x, h=1e-5)
    assert max(errors.values()) <= 1e-4, errors


# attention -----------------------------------------------------------------

def test_feature_map_examples():
    rf = rng().standard_normal((5, 3))
    np.testing.assert_allclose(feature_map(np.zeros((2, 3)), rf), np.full((2, 5), 1 / np.sqrt(5)))
    x = np.array([[1.0, 0.0, 0.0]])
    neg = -np.abs(rf)
    neg[:, 0] = -1.0
    assert np.all(feature_map(x, neg, "relu") == 0)


def test_feature_map_stabilization_preserves_ratios():
    g = rng(2)
    x, rf = g.standard_normal((4, 3)), g.standard_normal((6, 3))
    plain = feature_map(x, rf)
    for mode in ("row", "global"):
        st = feature_map(x, rf, stabilize=mode)
        ratio = plain / st
        if mode == "row":
            assert np.allclose(ratio, ratio[:, :1])
        else:
            assert np.allclose(ratio, ratio.flat[0])
        assert st.max() <= 1 / np.sqrt(6) + 1e-15


def test_softmax_features_estimate_exp_kernel():
    g = rng(9)
    q, k = 0.5 * g.standard_normal(4), 0.5 * g.standard_normal(4)
    est = [
        (feature_map(q[None], rf, "softmax") @ feature_map(k[None], rf, "softmax").T).item()
        for rf in (make_sketch("gaussian", 4096, 4, seed=s).matrix * 64.0 for s in range(200))
    ]
    assert abs(np.mean(est) / np.exp(q @ k) - 1) <= 0.05


@pytest.mark.parametrize("kernel", ["softmax", "relu"])
def test_single_token_attention_is_value_projection(kernel):
    ex = ExactMha.init(8, 2, seed=1)
    x = rng(1).standard_normal((1, 8))
    expected = (x @ ex.w_v) @ ex.w_o
    np.testing.assert_allclose(exact_mha_forward(ex, x), expected, atol=1e-12)
    exact_ratio = RandMha.from_exact(ex, 32, kernel, seed=2, eps=0.0)
    np.testing.assert_allclose(rand_mha_forward(exact_ratio, x), expected, atol=1e-12)
    # the default eps shrinks the output by den / (den + eps)
    out = rand_mha_forward(RandMha.from_exact(ex, 32, kernel, seed=2), x)
    assert np.linalg.norm(out - expected) <= 1e-4 * np.linalg.norm(expected)


def test_exact_attention_uniform_when_queries_vanish():
    ex = ExactMha.init(4, 1, seed=0)
    ex.w_q[:] = 0.0
    x = rng(3).standard_normal((6, 4))
    np.testing.assert_allclose(ex.forward(x), np.tile((x @ ex.w_v).mean(axis=0), (6, 1)) @ ex.w_o, atol=1e-12)


def test_exact_attention_two_token_scalar_case():
    eye = np.eye(1)
    ex = ExactMha(1, 1, eye, eye, eye, eye)
    x = np.array([[1.0], [2.0]])
    s = x @ x.T
    p = np.exp(s) / np.exp(s).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(ex.forward(x), p @ x, atol=1e-14)
    assert ex.forward(x)[0, 0] == pytest.approx((np.exp(1) + 2 * np.exp(2)) / (np.exp(1) + np.exp(2)))


@pytest.mark.parametrize("kernel", ["softmax", "relu"])
def test_rand_attention_permutation_equivariant(kernel):
    layer = RandMha.init(8, 2, 64, kernel, seed=3)
    x = rng(4).standard_normal((7, 8))
    perm = rng(5).permutation(7)
    np.testing.assert_allclose(layer.forward(x[perm]), layer.forward(x)[perm], atol=1e-12)


def test_relu_zero_normalizer_falls_back_to_mean_value():
    d = 2
    eye = np.eye(d)
    rf = SketchOp.explicit(np.array([[1.0, 0.0]]))
    layer = RandMha(d, 1, 1, "relu", eye, eye, eye, eye, [rf])
    x = np.array([[-1.0, 0.5], [2.0, 1.0], [3.0, -1.0]])
    out = layer.forward(x)
    np.testing.assert_allclose(out[0], x.mean(axis=0))


def test_rand_attention_converges_to_exact():
    ex = ExactMha.init(16, 2, seed=3)
    x = 0.5 * rng(0).standard_normal((32, 16))
    ref = ex.forward(x)
    err = [np.linalg.norm(RandMha.from_exact(ex, m, seed=1).forward(x) - ref) / np.linalg.norm(ref) for m in (64, 4096)]
    assert err[1] < err[0] and err[1] <= 0.1


# memory model --------------------------------------------------------------

def test_memory_ratios():
    ex = ExactMha.init(64, 8)
    rm = RandMha.from_exact(ex, 64)
    big = 1 << 15
    assert memory_estimate(ex, (2 * big, 64)) / memory_estimate(ex, (big, 64)) == pytest.approx(4, rel=0.02)
    assert memory_estimate(rm, (2 * big, 64)) / memory_estimate(rm, (big, 64)) == pytest.approx(2, rel=0.02)


def test_memory_fig3_regime():
    ex = ExactMha.init(512, 8)
    rm = RandMha.from_exact(ex, 256)
    n = 8192
    assert memory_estimate(ex, (n, 512)) >= 8 * n * n * 8
    assert 8 * n * n * 8 == 4 * 2**30
    assert memory_estimate(rm, (n, 512)) < 2**30


# model container and file format ---------------------------------------------

def small_model():
    return Model(
        [
            ("fc1", SkLinear.init(6, 8, 2, 3, seed=1)),
            ("act", ReLU()),
            ("fc2", DenseLinear.init(8, 4, seed=2)),
        ]
    )


def test_model_rejects_duplicate_names():
    with pytest.raises(ValueError):
        Model([("a", ReLU()), ("a", ReLU())])


def test_model_replace_shares_other_layers():
    m = small_model()
    new = m.replace("fc2", DenseLinear.init(8, 4, seed=9))
    assert new["fc1"] is m["fc1"] and new["fc2"] is not m["fc2"]


def test_model_backward_matches_finite_differences():
    m = small_model()
    x = rng(1).standard_normal((6, 2))
    y, inputs = m.forward_trace(x)
    _, grads = m.backward(inputs, y)
    p = m["fc2"].weight
    h = 1e-6
    i, j = 1, 3
    old = p[i, j]
    p[i, j] = old + h
    fp = 0.5 * np.sum(m.forward(x) ** 2)
    p[i, j] = old - h
    fm = 0.5 * np.sum(m.forward(x) ** 2)
    p[i, j] = old
    assert grads["fc2"]["weight"][i, j] == pytest.approx((fp - fm) / (2 * h), rel=1e-6)


def test_empty_model_round_trip(tmp_path):
    path = tmp_path / "empty.json"
    model_save(Model(), path)
    back = model_load(path)
    assert len(back) == 0 and back.equals(Model())


def every_kind_model():
    dense_conv = DenseConv2d.init(2, 3, 3, seed=1)
    ex = ExactMha.init(8, 2, seed=2)
    return Model(
        [
            ("lin", DenseLinear.init(5, 4, seed=3)),
            ("sk", SkLinear.init(5, 4, 2, 2, seed=4, dist="rademacher")),
            ("conv", dense_conv),
            ("skconv", SkConv2d.from_dense(dense_conv, 1, 2, seed=5)),
            ("mha", ex),
            ("rmha", RandMha.from_exact(ex, 16, "relu", seed=6)),
            ("act", ReLU()),
        ]
    )


def test_round_trip_every_kind_bit_exact(tmp_path):
    m = every_kind_model()
    path = tmp_path / "m.json"
    model_save(m, path)
    back = model_load(path)
    assert back.equals(m)
    x = rng(0).standard_normal((5, 3))
    assert back["sk"].forward(x).tobytes() == m["sk"].forward(x).tobytes()
    img = rng(1).standard_normal((2, 5, 5))
    assert back["skconv"].forward(img).tobytes() == m["skconv"].forward(img).tobytes()
    seq = rng(2).standard_normal((4, 8))
    assert back["rmha"].forward(seq).tobytes() == m["rmha"].forward(seq).tobytes()


def test_sketches_stored_as_descriptors(tmp_path):
    m = Model([("sk", SkLinear.init(50, 40, 1, 8, seed=1))])
    path = tmp_path / "m.json"
    model_save(m, path)
    manifest = json.loads(path.read_text())
    assert manifest["format_version"] == 1 and manifest["dtype"] == "f64"
    sk = manifest["layers"][0]["sketches"]["s1.0"]
    assert set(sk) == {"dist", "rows", "cols", "seed"}
    blob = (tmp_path / "m.json.bin").read_bytes()
    assert blob[:5] == b"PNTR\x01"
    assert len(blob) == 5 + 8 * (8 * 50 + 40 * 8 + 40)


def test_explicit_sketch_round_trip(tmp_path):
    eye = np.eye(3)
    m = Model([("sk", identity_sk_linear(3, eye, 2 * eye, np.ones(3)))])
    model_save(m, tmp_path / "e.json")
    assert model_load(tmp_path / "e.json").equals(m)


def test_f32_storage(tmp_path):
    m = Model([("lin", DenseLinear.init(4, 3, seed=1))])
    model_save(m, tmp_path / "f.json", dtype="f32")
    back = model_load(tmp_path / "f.json")
    np.testing.assert_array_equal(back["lin"].weight, m["lin"].weight.astype(np.float32).astype(np.float64))


@pytest.mark.parametrize("damage", ["truncate", "extend", "magic", "version"])
def test_tampered_blob_is_rejected(tmp_path, damage):
    path = tmp_path / "m.json"
    model_save(small_model(), path)
    blob_path = tmp_path / "m.json.bin"
    blob = bytearray(blob_path.read_bytes())
    if damage == "truncate":
        blob = blob[:-8]
    elif damage == "extend":
        blob += b"\0" * 8
    elif damage == "magic":
        blob[:4] = b"XXXX"
    else:
        blob[4] = 9
    blob_path.write_bytes(bytes(blob))
    with pytest.raises(ModelFormatError):
        model_load(path)


@pytest.mark.parametrize(
    "edit",
    [
        lambda m: m.update(format_version=2),
        lambda m: m.update(rng_algorithm="mt19937"),
        lambda m: m.update(dtype="f16"),
        lambda m: m.pop("layers"),
        lambda m: m["layers"][0].update(kind="Mystery"),
    ],
)
def test_bad_manifest_is_rejected(tmp_path, edit):
    path = tmp_path / "m.json"
    model_save(small_model(), path)
    manifest = json.loads(path.read_text())
    edit(manifest)
    path.write_text(json.dumps(manifest))
    with pytest.raises(ModelFormatError):
        model_load(path)


def test_non_json_manifest(tmp_path):
    path = tmp_path / "m.json"
    path.write_text("not json")
    with pytest.raises(ModelFormatError):
        model_load(path)
