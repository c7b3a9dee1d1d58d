import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fewcount import heads
from fewcount.nn import Tensor, grad_check
from fewcount.nn import functional as F
from fewcount.nn.functional import ShapeError


def random_params(shapes, seed=0, scale=None, bias=0.05):
    g = np.random.default_rng(seed)
    out = {}
    for name, shape in shapes.items():
        if name.endswith(".bias"):
            value = g.normal(bias, 0.02, shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = g.normal(0, scale or 1.0 / np.sqrt(fan_in), shape)
        out[name] = Tensor(value)
    return out


def zero_params(shapes):
    return {n: Tensor(np.zeros(s)) for n, s in shapes.items()}


def as_tensors(names, arrays):
    return dict(zip(names, arrays))


# --------------------------------------------------------------------------- config


def test_head_config_validation():
    assert heads.HeadConfig("pro", k_embed=1024).k_embed == 1024
    with pytest.raises(ValueError):
        heads.HeadConfig("pro", k_embed=6)
    with pytest.raises(ValueError):
        heads.HeadConfig("famnet")


def test_acfamnet_layer_widths():
    shapes = heads.acfamnet_head_shapes(1)
    assert [shapes[f"head.conv{i}.weight"] for i in range(1, 6)] == [
        (196, 1, 7, 7),
        (128, 196, 5, 5),
        (64, 128, 3, 3),
        (32, 64, 1, 1),
        (1, 32, 1, 1),
    ]
    assert heads.acfamnet_head_shapes(3)["head.conv1.weight"] == (196, 3, 7, 7)


def test_pro_shapes_drop_similarity_residual():
    on = heads.pro_head_shapes(8, heads.HeadConfig("pro", 16))
    off = heads.pro_head_shapes(8, heads.HeadConfig("pro", 16, residual_similarity=False))
    assert on["head.conv1.weight"] == (16, 8, 7, 7)
    assert on["head.conv2.weight"] == (8, 16, 5, 5)
    assert "head.res_sim.weight" in on and "head.res_sim.weight" not in off


# --------------------------------------------------------------------------- acfamnet head


def test_acfamnet_output_size():
    params = random_params(heads.acfamnet_head_shapes(1))
    out = heads.acfamnet_head(Tensor(np.random.default_rng(1).normal(size=(3, 1, 6, 5))), params)
    assert out.shape == (12, 10)
    assert (out.data >= 0).all()


def test_acfamnet_zero_weights_zero_map():
    out = heads.acfamnet_head(Tensor(np.ones((2, 1, 4, 4))), zero_params(heads.acfamnet_head_shapes(1)))
    assert out.shape == (8, 8) and not out.data.any()


def test_acfamnet_exemplar_permutation_invariant():
    params = random_params(heads.acfamnet_head_shapes(2), seed=2)
    sim = np.random.default_rng(3).normal(size=(4, 2, 5, 5))
    a = heads.acfamnet_head(Tensor(sim), params).data
    b = heads.acfamnet_head(Tensor(sim[[2, 0, 3, 1]]), params).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_acfamnet_errors():
    params = random_params(heads.acfamnet_head_shapes(1))
    with pytest.raises(FloatingPointError):
        heads.acfamnet_head(Tensor(np.full((1, 1, 3, 3), np.inf)), params)
    with pytest.raises(ShapeError):
        heads.acfamnet_head(Tensor(np.zeros((1, 3, 3))), params)


def test_acfamnet_gradients():
    shapes = heads.acfamnet_head_shapes(1)
    names = list(shapes)
    base = random_params(shapes, seed=4)
    g = np.random.default_rng(5)
    sim = g.normal(size=(2, 1, 3, 3))
    proj = g.normal(size=(6, 6))
    arrays = [sim] + [base[n].data for n in names]

    def fn(s, *ps):
        return F.sum(F.mul(heads.acfamnet_head(s, as_tensors(names, ps)), proj))

    assert grad_check(fn, arrays, eps=1e-6, probes=12) < 1e-3


# --------------------------------------------------------------------------- pro head


def pro_setup(cfg, seed=6, C=8, H=3, W=4, K=3):
    params = random_params(heads.pro_head_shapes(C, cfg), seed=seed)
    g = np.random.default_rng(seed + 1)
    return params, g.normal(size=(C, H, W)), g.uniform(0.05, 1.0, (K, 1, H, W))


def test_pro_output_size_and_nonnegative():
    cfg = heads.HeadConfig("pro", 16)
    params, f_q, r = pro_setup(cfg)
    out = heads.pro_head(Tensor(f_q), Tensor(r), params, cfg)
    assert out.shape == (6, 8)
    assert (out.data >= 0).all()


def test_pro_zero_weights_zero_map():
    cfg = heads.HeadConfig("pro", 16)
    _, f_q, r = pro_setup(cfg)
    out = heads.pro_head(Tensor(f_q), Tensor(r), zero_params(heads.pro_head_shapes(8, cfg)), cfg)
    assert not out.data.any()


def test_pro_similarity_residual_toggle():
    on = heads.HeadConfig("pro", 16)
    off = heads.HeadConfig("pro", 16, residual_similarity=False)
    params, f_q, r = pro_setup(on)
    a = heads.pro_head(Tensor(f_q), Tensor(r), params, off).data
    b = heads.pro_head(Tensor(f_q), Tensor(r * 3.0), params, off).data
    np.testing.assert_array_equal(a, b)
    c = heads.pro_head(Tensor(f_q), Tensor(r * 3.0), params, on).data
    assert not np.allclose(a, c)


def test_pro_errors():
    cfg = heads.HeadConfig("pro", 16)
    params, f_q, r = pro_setup(cfg)
    with pytest.raises(ShapeError):
        heads.pro_head(Tensor(f_q), Tensor(r[:, :, :2]), params, cfg)
    r[0, 0, 0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        heads.pro_head(Tensor(f_q), Tensor(r), params, cfg)


def test_pro_gradients_every_group():
    cfg = heads.HeadConfig("pro", 16)
    shapes = heads.pro_head_shapes(8, cfg)
    names = list(shapes)
    params, f_q, r = pro_setup(cfg, seed=8)
    proj = np.random.default_rng(9).normal(size=(6, 8))

    def fn(fq, rr, *ps):
        return F.sum(F.mul(heads.pro_head(fq, rr, as_tensors(names, ps), cfg), proj))

    arrays = [f_q, r] + [params[n].data for n in names]
    assert grad_check(fn, arrays, eps=1e-6, probes=10) < 1e-3


@settings(max_examples=15, deadline=None)
@given(hnp.arrays(np.float64, (2, 4, 3), elements=st.floats(-50, 50, width=64)), st.integers(0, 1000))
def test_pro_nonnegative_property(f_q, seed):
    cfg = heads.HeadConfig("pro", 8)
    params = random_params(heads.pro_head_shapes(2, cfg), seed=seed, bias=0.0)
    r = np.full((1, 1, 4, 3), 0.5)
    assert (heads.pro_head(Tensor(f_q), Tensor(r), params, cfg).data >= 0).all()
