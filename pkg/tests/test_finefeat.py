import numpy as np
import pytest

from fithand.errors import ConfigError, ShapeError
from fithand.finefeat import (
    FUSIONS,
    SCALES,
    FineFeatSpec,
    finefeat_forward,
    finefeat_param_count,
    finefeat_responses,
    init_finefeat,
)
from fithand.tensor import Tensor


def centre_kernel_params(spec):
    """Identity-like kernels: one-hot at the centre of each scale."""
    params = {}
    for k in SCALES:
        w = np.zeros((spec.depth, spec.in_channels, k, k))
        for c in range(spec.depth):
            w[c, c, k // 2, k // 2] = 1.0
        params[f"k{k}.w"] = Tensor(w)
        params[f"k{k}.b"] = Tensor(np.zeros(spec.depth))
    return params


def shared_kernel_params(spec, rng, proj=True):
    """Same 3x3 kernel embedded (zero-padded) in all three scales."""
    base = rng.normal(size=(spec.depth, spec.in_channels, 3, 3))
    bias = rng.normal(size=spec.depth)
    params = {}
    for k in SCALES:
        w = np.zeros((spec.depth, spec.in_channels, k, k))
        o = (k - 3) // 2
        w[:, :, o : o + 3, o : o + 3] = base
        params[f"k{k}.w"] = Tensor(w)
        params[f"k{k}.b"] = Tensor(bias.copy())
    if spec.has_projection and proj:
        params["proj.w"] = Tensor(rng.normal(size=(spec.depth, 3 * spec.depth, 1, 1)))
        params["proj.b"] = Tensor(np.zeros(spec.depth))
    return params


def test_centre_kernels_reproduce_input(rng):
    spec = FineFeatSpec(3, 3, "attention")
    x = rng.normal(size=(2, 3, 6, 6))
    out = finefeat_forward(Tensor(x), spec, centre_kernel_params(spec))
    np.testing.assert_array_equal(out.data, x)


@pytest.mark.parametrize("fusion", FUSIONS)
def test_same_padding_keeps_spatial_size(rng, fusion):
    spec = FineFeatSpec(2, 5, fusion)
    out = finefeat_forward(Tensor(rng.normal(size=(1, 2, 9, 7))), spec, init_finefeat(spec, rng))
    assert out.dims == (1, 5, 9, 7)


@pytest.mark.parametrize("fusion", ["attention", "average", "median"])
def test_identical_kernels_give_common_response(rng, fusion):
    spec = FineFeatSpec(2, 3, fusion)
    params = shared_kernel_params(spec, rng)
    x = Tensor(rng.normal(size=(1, 2, 8, 8)))
    r3, r5, r7 = (t.data for t in finefeat_responses(x, spec, params))
    np.testing.assert_allclose(r5, r3, atol=1e-12)
    np.testing.assert_allclose(r7, r3, atol=1e-12)
    np.testing.assert_allclose(finefeat_forward(x, spec, params).data, r3, atol=1e-12)


def _fixed_responses(values):
    """1x1 'convolutions' on a one-pixel, one-channel input of value 1."""
    spec = FineFeatSpec(1, 1, "attention")
    params = {}
    for k, v in zip(SCALES, values):
        w = np.zeros((1, 1, k, k))
        w[0, 0, k // 2, k // 2] = v
        params[f"k{k}.w"] = Tensor(w)
        params[f"k{k}.b"] = Tensor(np.zeros(1))
    return params


@pytest.mark.parametrize(
    "fusion,values,expected",
    [("average", (1, 2, 3), 2.0), ("median", (1, 1, 4), 1.0), ("attention", (1, 1, 4), 4.0)],
)
def test_fusion_modes_at_a_point(fusion, values, expected):
    spec = FineFeatSpec(1, 1, fusion)
    out = finefeat_forward(Tensor(np.ones((1, 1, 1, 1))), spec, _fixed_responses(values))
    assert out.item() == pytest.approx(expected)


@pytest.mark.parametrize("fusion", ["concat", "concat_sigmoid"])
def test_concat_projects_back_to_depth(rng, fusion):
    spec = FineFeatSpec(2, 4, fusion)
    params = init_finefeat(spec, rng)
    assert params["proj.w"].dims == (4, 12, 1, 1)
    assert finefeat_forward(Tensor(rng.normal(size=(1, 2, 5, 5))), spec, params).dims == (1, 4, 5, 5)


def test_concat_sigmoid_differs_from_concat(rng):
    x = Tensor(rng.normal(size=(1, 2, 5, 5)))
    a = FineFeatSpec(2, 3, "concat")
    b = FineFeatSpec(2, 3, "concat_sigmoid")
    params = init_finefeat(a, np.random.default_rng(0))
    assert not np.allclose(finefeat_forward(x, a, params).data, finefeat_forward(x, b, params).data)


@pytest.mark.parametrize(
    "in_ch,depth,expected",
    [(32, 32, 9 * 32 * 32 + 32 + 25 * 32 * 32 + 32 + 49 * 32 * 32 + 32), (64, 96, 510_240)],
)
def test_param_count_examples(in_ch, depth, expected):
    assert finefeat_param_count(FineFeatSpec(in_ch, depth)) == expected
    if in_ch == 32:
        assert expected == 85_088


@pytest.mark.parametrize("fusion", FUSIONS)
@pytest.mark.parametrize("in_ch,depth", [(1, 1), (3, 8), (16, 12)])
def test_param_count_matches_enumeration(rng, fusion, in_ch, depth):
    spec = FineFeatSpec(in_ch, depth, fusion)
    params = init_finefeat(spec, rng)
    assert finefeat_param_count(spec) == sum(p.data.size for p in params.values())


def test_zero_depth_rejected():
    with pytest.raises(ConfigError):
        FineFeatSpec(3, 0)


def test_unknown_fusion_rejected():
    with pytest.raises(ConfigError):
        FineFeatSpec(3, 4, "max")


def test_channel_mismatch(rng):
    spec = FineFeatSpec(3, 2)
    with pytest.raises(ShapeError):
        finefeat_forward(Tensor(rng.normal(size=(1, 2, 4, 4))), spec, init_finefeat(spec, rng))
