from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from scalable_vit import counters, oracles
from scalable_vit.attention import (IwsaConfig, SsaConfig, TokenMap, capture_attention, identity_dw_kernel,
                                    identity_ssa_weights, init_iwsa_weights, init_ssa_weights, interact,
                                    iwsa_forward, lem, lim, multihead_attention, ssa_forward, ssa_transforms, vanilla_attention,
                                    window_attention, window_merge, window_partition, wsa_forward)
from scalable_vit.errors import ConfigError, ShapeError
from scalable_vit.gradcheck import check_grads
from scalable_vit.rng import Rng
from scalable_vit.tensor import Tensor, mul, sum_


def rand_map(rng, h, w, c):
    return TokenMap(h, w, c, Tensor(rng.normal((h * w, c))))


def perturbed(weights, rng, std=0.3):
    return {k: Tensor(rng.normal(v.shape, std)) for k, v in weights.items()}


def np_weights(w):
    return {k: v.data for k, v in w.items()}


# -- vanilla ------------------------------------------------------------------

def test_vanilla_single_token_returns_value():
    rng = Rng(0)
    v = rng.normal((1, 3))
    out = vanilla_attention(Tensor(rng.normal((1, 4))), Tensor(rng.normal((1, 4))), Tensor(v)).data
    np.testing.assert_array_equal(out, v)


def test_vanilla_identical_keys_average_values():
    rng = Rng(1)
    k = np.tile(rng.normal((1, 4)), (5, 1))
    v = rng.normal((5, 3))
    out = vanilla_attention(Tensor(rng.normal((5, 4))), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, np.tile(v.mean(0), (5, 1)), atol=1e-12)


def test_vanilla_matches_row_oracle():
    rng = Rng(2)
    q, k, v = rng.normal((6, 4)), rng.normal((6, 4)), rng.normal((6, 4))
    out = vanilla_attention(Tensor(q), Tensor(k), Tensor(v)).data
    np.testing.assert_allclose(out, oracles.attention_rows(q, k, v), atol=1e-12)


def test_vanilla_shape_errors():
    with pytest.raises(ShapeError):
        vanilla_attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 5))), Tensor(np.zeros((3, 2))))
    with pytest.raises(ShapeError):
        vanilla_attention(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 2))))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 10), st.integers(1, 6), st.integers(0, 2**31))
def test_vanilla_permutation_equivariance(n, d, seed):
    rng = Rng(seed)
    x = rng.normal((n, d))
    perm = rng.permutation(n)
    out = vanilla_attention(Tensor(x), Tensor(x), Tensor(x)).data
    out_p = vanilla_attention(Tensor(x[perm]), Tensor(x[perm]), Tensor(x[perm])).data
    assert np.abs(out_p - out[perm]).max() < 1e-12


# -- SSA ----------------------------------------------------------------------

def test_ssa_identity_transforms_are_passthrough():
    x = rand_map(Rng(3), 3, 4, 5)
    q, k, v = ssa_transforms(x, SsaConfig(5, 1), identity_ssa_weights(5))
    for t in (q, k, v):
        np.testing.assert_array_equal(t.data, x.data.data)


def test_ssa_reduced_rows_for_quarter_ratio():
    rng = Rng(4)
    cfg = SsaConfig(8, 2, Fraction(1, 4), 1)
    q, k, v = ssa_transforms(rand_map(rng, 8, 8, 8), cfg, init_ssa_weights(cfg, rng))
    assert cfg.s == 2 and q.shape == (64, 8) and k.shape == (16, 8) and v.shape == (16, 8)


def test_ssa_channel_scaling():
    rng = Rng(5)
    cfg = SsaConfig(64, 2, Fraction(1, 4), Fraction(5, 4))
    q, k, v = ssa_transforms(rand_map(rng, 4, 4, 64), cfg, init_ssa_weights(cfg, rng))
    assert cfg.c_scaled == 80 and q.shape[1] == 80 and k.shape[1] == 80 and v.shape[1] == 64


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_ssa_reduces_to_vanilla(h, w, c, seed):
    x = rand_map(Rng(seed), h, w, c)
    out = ssa_forward(x, SsaConfig(c, 1), identity_ssa_weights(c)).data.data
    ref = vanilla_attention(x.data, x.data, x.data).data
    assert np.abs(out - ref).max() <= 1e-10


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.sampled_from(["1", "1/4", "1/9", "1/16"]),
       st.sampled_from(["1/2", "1", "5/4"]), st.integers(0, 2**31))
def test_ssa_preserves_shape(h, w, r_n, r_c, seed):
    rng = Rng(seed)
    cfg = SsaConfig(8, 2, r_n, r_c)
    x = rand_map(rng, h, w, 8)
    out = ssa_forward(x, cfg, init_ssa_weights(cfg, rng))
    assert (out.h, out.w, out.c) == (h, w, 8)


def test_ssa_config_validation():
    with pytest.raises(ConfigError, match="perfect square"):
        SsaConfig(8, 2, Fraction(1, 2))
    with pytest.raises(ConfigError, match="divisible"):
        SsaConfig(64, 3, 1, Fraction(5, 4))


def test_ssa_attention_rows_are_convex():
    rng = Rng(6)
    cfg = SsaConfig(8, 2, Fraction(1, 4), Fraction(5, 4))
    with capture_attention() as mats:
        ssa_forward(rand_map(rng, 5, 6, 8), cfg, perturbed(init_ssa_weights(cfg, rng), rng))
    (a,) = mats
    assert a.shape == (2, 30, 9)
    assert np.all(a >= 0)
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)


def test_ssa_instrumented_macs_match_closed_form():
    rng = Rng(7)
    cfg = SsaConfig(64, 2, Fraction(1, 4), Fraction(5, 4))
    x = rand_map(rng, 14, 14, 64)
    with counters.counting() as ctr:
        ssa_forward(x, cfg, init_ssa_weights(cfg, rng))
    n, nr, c, cr = 196, 49, 64, 80
    assert ctr.by_tag("attn") == n * nr * cr + n * nr * c
    transforms = n * c * cr + nr * 4 * c * cr + nr * 4 * c * c + n * c * c
    assert ctr.total == ctr.by_tag("attn") + transforms


# -- windows ------------------------------------------------------------------

@pytest.mark.parametrize("h,w,m,count,pads", [(4, 4, 2, 4, (0, 0)), (5, 5, 2, 9, (1, 1)), (7, 7, 7, 1, (0, 0))])
def test_window_partition_examples(h, w, m, count, pads):
    x = rand_map(Rng(8), h, w, 3)
    ws = window_partition(x, m)
    assert len(ws) == count and (ws.pad_h, ws.pad_w) == pads
    assert ws.windows.shape == (count, m * m, 3)
    np.testing.assert_array_equal(window_merge(ws).data.data, x.data.data)
    if count == 1:
        np.testing.assert_array_equal(ws[0].data, x.data.data)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 17), st.integers(1, 17), st.integers(1, 8), st.integers(1, 4))
def test_window_bijection(h, w, m, c):
    x = rand_map(Rng(h * 1000 + w * 10 + m), h, w, c)
    ws = window_partition(x, m)
    assert len(ws) == -(-h // m) * -(-w // m)
    back = window_merge(ws)
    assert (back.h, back.w) == (h, w)
    np.testing.assert_array_equal(back.data.data, x.data.data)


def test_window_merge_rejects_inconsistent_metadata():
    ws = window_partition(rand_map(Rng(9), 4, 4, 2), 2)
    ws.grid_h = 3
    with pytest.raises(ShapeError):
        window_merge(ws)


# -- WSA ----------------------------------------------------------------------

def _wsa_setup(rng, c=8, heads=2, m=2, variant="none"):
    cfg = IwsaConfig(c, heads, m, 3, variant)
    return cfg, perturbed(init_iwsa_weights(cfg, rng), rng)


def test_wsa_single_window_is_global_attention():
    rng = Rng(10)
    cfg, w = _wsa_setup(rng, m=6)
    x = rand_map(rng, 6, 6, 8)
    out = wsa_forward(x, cfg, w).data.data
    ref = multihead_attention(x, 2, w).data.data
    assert np.abs(out - ref).max() <= 1e-10


@pytest.mark.parametrize("h,w,m", [(4, 4, 2), (5, 7, 2), (8, 3, 4), (6, 6, 1)])
def test_wsa_equals_masked_global(h, w, m):
    rng = Rng(11)
    cfg, wts = _wsa_setup(rng, m=m)
    x = rand_map(rng, h, w, 8)
    p = np_weights(wts)
    ref = oracles.masked_global_attention(x.data.data, h, w, m, 2, p["q.weight"], p["q.bias"], p["k.weight"],
                                          p["k.bias"], p["v.weight"], p["v.bias"], p["proj.weight"],
                                          p["proj.bias"])
    assert np.abs(wsa_forward(x, cfg, wts).data.data - ref).max() <= 1e-10


def test_wsa_permutation_within_window():
    rng = Rng(12)
    cfg, wts = _wsa_setup(rng, m=2)
    grid = rng.normal((4, 4, 8))
    out = wsa_forward(TokenMap.from_grid(grid), cfg, wts).numpy()
    swapped = grid.copy()
    swapped[[0, 1], [0, 1]] = grid[[1, 0], [1, 0]]  # swap two tokens of the top-left window
    out2 = wsa_forward(TokenMap.from_grid(swapped), cfg, wts).numpy()
    expected = out.copy()
    expected[[0, 1], [0, 1]] = out[[1, 0], [1, 0]]
    assert np.abs(out2 - expected).max() < 1e-12
    np.testing.assert_array_equal(out2[2:], out[2:])
    np.testing.assert_array_equal(out2[:, 2:], out[:, 2:])


def test_wsa_attention_rows_are_convex_and_ignore_padding():
    rng = Rng(13)
    cfg, wts = _wsa_setup(rng, m=2)
    with capture_attention() as mats:
        wsa_forward(rand_map(rng, 3, 3, 8), cfg, wts)
    (a,) = mats
    np.testing.assert_allclose(a.sum(-1), 1.0, atol=1e-9)
    assert a[1, :, :, 1].max() == 0.0  # top-right window: its right column is padding


# -- LIM / LEM / IWSA ---------------------------------------------------------

def test_lim_zero_and_identity_kernels():
    x = rand_map(Rng(14), 5, 4, 3)
    np.testing.assert_array_equal(lim(x, Tensor(np.zeros((3, 3, 3)))).data.data, 0.0)
    np.testing.assert_array_equal(lim(x, Tensor(identity_dw_kernel(3, 3))).data.data, x.data.data)


def test_lim_rejects_even_kernel():
    with pytest.raises(ConfigError):
        lim(rand_map(Rng(15), 4, 4, 2), Tensor(np.zeros((2, 2, 2))))


def test_lim_shift_equivariance_away_from_border():
    rng = Rng(16)
    grid = rng.normal((10, 10, 2))
    kern = Tensor(rng.normal((3, 3, 2)))
    y = lim(TokenMap.from_grid(grid), kern).numpy()
    shifted = np.roll(grid, (2, 1), axis=(0, 1))
    y2 = lim(TokenMap.from_grid(shifted), kern).numpy()
    np.testing.assert_allclose(y2[3:9, 2:9], y[1:7, 1:8], atol=1e-12)


def test_lem_equals_lim_for_single_window():
    rng = Rng(17)
    x = rand_map(rng, 4, 4, 3)
    kern = Tensor(rng.normal((3, 3, 3)))
    via_lem = window_merge(lem(window_partition(x, 4), kern)).data.data
    np.testing.assert_array_equal(via_lem, lim(x, kern).data.data)


def test_lem_differs_from_lim_only_at_window_borders():
    rng = Rng(18)
    x = rand_map(rng, 4, 4, 2)
    kern = np.zeros((3, 3, 2))
    kern[1, 2] = 1.0  # read the right-hand neighbour
    a = lim(x, Tensor(kern)).numpy()
    b = window_merge(lem(window_partition(x, 2), Tensor(kern))).numpy()
    diff = np.abs(a - b).max(axis=-1) > 0
    # column 1 reads across the window boundary into column 2 under LIM only
    assert diff[:, 1].all() and not diff[:, [0, 2, 3]].any()


def test_lem_zero_kernel():
    ws = lem(window_partition(rand_map(Rng(19), 4, 4, 2), 2), Tensor(np.zeros((3, 3, 2))))
    np.testing.assert_array_equal(ws.windows.data, 0.0)


@pytest.mark.parametrize("variant", ["none", "LIM"])
def test_iwsa_reduces_to_wsa(variant):
    rng = Rng(20)
    cfg, wts = _wsa_setup(rng, variant=variant)
    if variant == "LIM":
        wts["lim.weight"] = Tensor(np.zeros((3, 3, 8)))
        wts["lim.bias"] = Tensor(np.zeros(8))
    x = rand_map(rng, 5, 5, 8)
    np.testing.assert_array_equal(iwsa_forward(x, cfg, wts).data.data, wsa_forward(x, cfg, wts).data.data)


def test_iwsa_minus_wsa_is_lim_of_values():
    rng = Rng(21)
    cfg, wts = _wsa_setup(rng, m=2, variant="LIM")
    x = rand_map(rng, 5, 6, 8)
    z, v = window_attention(x, cfg, wts)
    np.testing.assert_array_equal(v.data.data, x.data.data @ wts["v.weight"].data + wts["v.bias"].data)
    y = lim(v, wts["lim.weight"], wts["lim.bias"]).data.data
    z_prime = interact(z, v, cfg, wts).data.data
    np.testing.assert_array_equal(z_prime, z.data.data + y)
    out = iwsa_forward(x, cfg, wts).data.data
    np.testing.assert_array_equal(out, z_prime @ wts["proj.weight"].data + wts["proj.bias"].data)


def test_iwsa_shape_14x14x32():
    rng = Rng(22)
    cfg = IwsaConfig(32, 4, 7)
    out = iwsa_forward(rand_map(rng, 14, 14, 32), cfg, init_iwsa_weights(cfg, rng))
    assert (out.h, out.w, out.c) == (14, 14, 32)


@pytest.mark.parametrize("variant", ["none", "LIM", "LEM"])
def test_iwsa_gradient_wrt_input(variant):
    rng = Rng(23)
    cfg, wts = _wsa_setup(rng, m=2, variant=variant)
    x = rand_map(rng, 5, 4, 8)
    r = Tensor(rng.normal((20, 8)))
    res = check_grads(lambda: sum_(mul(iwsa_forward(x, cfg, wts).data, r)), {"x": x.data, **wts})
    assert all(g.passed for g in res), [(g.name, g.max_rel) for g in res]


def test_ssa_gradient():
    rng = Rng(24)
    cfg = SsaConfig(8, 2, Fraction(1, 4), Fraction(1, 2))
    wts = perturbed(init_ssa_weights(cfg, rng), rng)
    x = rand_map(rng, 5, 5, 8)
    r = Tensor(rng.normal((25, 8)))
    res = check_grads(lambda: sum_(mul(ssa_forward(x, cfg, wts).data, r)), {"x": x.data, **wts})
    assert all(g.passed for g in res), [(g.name, g.max_rel) for g in res]


def test_iwsa_config_validation():
    with pytest.raises(ConfigError):
        IwsaConfig(8, 3)
    with pytest.raises(ConfigError):
        IwsaConfig(8, 2, k=4)
    with pytest.raises(ConfigError):
        IwsaConfig(8, 2, variant="other")
