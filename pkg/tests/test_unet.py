import numpy as np
import pytest

from floeberg import autodiff as ad
from floeberg import regionloss as rl
from floeberg import unet
from oracles import param_fd_errors

# Layer-by-layer count for the default config, done by hand:
#   enc1  7->16: 1024 + 2320         enc2 16->32: 4640 + 9248
#   enc3 32->64: 18496 + 36928       enc4 64->64: 36928 + 36928
#   dec3 up 64->64 (2x2): 16448, convs 128->64, 64->64: 73792 + 36928
#   dec2 up 64->32: 8224, convs 64->32, 32->32: 18464 + 9248
#   dec1 up 32->16: 2064, convs 32->16, 16->16: 4624 + 2320
#   head 1x1 16->4: 68
DEFAULT_PARAM_COUNT = 318692


def zero_params(cfg):
    p = unet.init_params(cfg)
    for t in p:
        t.data[...] = 0
    return p


def test_param_count_fixture():
    assert unet.param_count(unet.UNetConfig()) == DEFAULT_PARAM_COUNT
    p = unet.init_params(unet.UNetConfig())
    assert sum(t.data.size for t in p) == DEFAULT_PARAM_COUNT


def test_param_count_single_conv():
    # a lone 1x1 conv 1 -> 1 holds one weight and one bias
    shapes = [s for n, s in unet.layer_shapes(unet.UNetConfig(num_classes=1, encoder_filters=(1, 1, 1, 1))) if n.startswith("head")]
    assert sum(int(np.prod(s)) for s in shapes) == 2


def test_doubling_filters_quadruples_interior_weights():
    small = dict(unet.layer_shapes(unet.UNetConfig()))
    big = dict(unet.layer_shapes(unet.UNetConfig(encoder_filters=(32, 64, 128, 128))))
    for name, shape in small.items():
        if name.endswith(".w") and name not in ("enc1.conv1.w", "head.w"):
            assert np.prod(big[name]) == 4 * np.prod(shape), name


def test_output_shape_and_simplex():
    cfg = unet.UNetConfig()
    p = unet.init_params(cfg, dtype=np.float32)
    x = np.random.default_rng(0).standard_normal((2, 7, 64, 64)).astype(np.float32)
    y = unet.forward(p, ad.Tensor(x), cfg).data
    assert y.shape == (2, 4, 64, 64)
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=1), 1, atol=1e-6)


def test_simplex_float64():
    cfg = unet.UNetConfig()
    y = unet.forward(unet.init_params(cfg), ad.Tensor(np.random.default_rng(1).standard_normal((1, 7, 32, 48))), cfg).data
    assert y.shape == (1, 4, 32, 48)
    np.testing.assert_allclose(y.sum(axis=1), 1, atol=1e-12)


@pytest.mark.parametrize("hw", [(50, 50), (64, 40), (8, 8)])
def test_indivisible_dims_rejected(hw):
    cfg = unet.UNetConfig()
    with pytest.raises(ValueError, match="divisible by 16"):
        unet.forward(unet.init_params(cfg), ad.Tensor(np.zeros((1, 7) + hw)), cfg)


def test_zero_params_give_uniform():
    cfg = unet.UNetConfig()
    y = unet.forward(zero_params(cfg), ad.Tensor(np.random.default_rng(2).standard_normal((1, 7, 16, 16))), cfg).data
    np.testing.assert_array_equal(y, 0.25)


def test_init_seeded():
    a = unet.init_params(unet.UNetConfig(seed=3))
    b = unet.init_params(unet.UNetConfig(seed=3))
    c = unet.init_params(unet.UNetConfig(seed=4))
    assert all(np.array_equal(x.data, y.data) for x, y in zip(a, b))
    assert not np.array_equal(a["enc2.conv1.w"].data, c["enc2.conv1.w"].data)


def test_init_std_matches_fan_in():
    p = unet.init_params(unet.UNetConfig(seed=5))
    w = p["enc1.conv2.w"].data  # 3x3 over 16 input channels
    assert abs(w.std() / np.sqrt(2 / (9 * 16)) - 1) < 0.1
    assert not p["enc1.conv2.b"].data.any()


def test_forward_deterministic():
    cfg = unet.UNetConfig()
    p = unet.init_params(cfg, dtype=np.float32)
    x = ad.Tensor(np.random.default_rng(6).standard_normal((2, 7, 32, 32)).astype(np.float32))
    assert unet.forward(p, x, cfg).data.tobytes() == unet.forward(p, x, cfg).data.tobytes()


def test_batch_permutation_equivariant():
    cfg = unet.UNetConfig()
    p = unet.init_params(cfg)
    x = np.random.default_rng(7).standard_normal((3, 7, 16, 16))
    perm = [2, 0, 1]
    y = unet.forward(p, ad.Tensor(x), cfg).data
    yp = unet.forward(p, ad.Tensor(x[perm]), cfg).data
    np.testing.assert_allclose(yp, y[perm], atol=1e-14)


def test_end_to_end_gradient_16x16():
    cfg = unet.UNetConfig(seed=8)
    p = unet.init_params(cfg)
    rng = np.random.default_rng(8)
    x = ad.Tensor(rng.standard_normal((1, 7, 16, 16)))
    pm = np.repeat(np.arange(4), 64).reshape(1, 16, 16)
    land = np.zeros((1, 16, 16), dtype=np.uint8)
    land[0, :2, :3] = 1
    chart = {i: rng.dirichlet(np.ones(4)) for i in range(4)}

    def loss():
        return rl.batch_region_loss(unet.forward(p, x, cfg), pm, land, [chart])

    coords = []
    for _ in range(20):
        pi = int(rng.integers(len(p)))
        coords.append((pi, int(rng.integers(p.tensors[pi].data.size))))
    errs = param_fd_errors(loss, p, coords)
    assert max(errs) < 1e-3, errs
