import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sdah.attention import (
    SdmsaParams,
    WindowLayout,
    compute_offsets,
    effective_window,
    interpolated_bias,
    reference_points,
    sdmsa,
    window_merge,
    window_origins,
    window_partition,
)
from sdah.gradcheck import grad_check
from sdah.rng import Stream
from sdah.tensor import Tensor, default_dtype, matmul, reshape, transpose, tsum


def _params(c, nh, ws, seed=0, deform=True, **kw):
    p = SdmsaParams.init(c, nh, ws, Stream(seed), deform=deform, **kw)
    # random bias so the equivalence checks exercise interpolation
    p.bias_table.data[...] = Stream(seed + 1).normal(p.bias_table.shape)
    return p


def _x(b, c, h, w, seed=0):
    return Tensor(Stream(seed).normal((b, c, h, w)))


# -- layout --------------------------------------------------------------------

def test_layout_validation():
    with pytest.raises(ValueError):
        WindowLayout(8, 8, 3)          # 3 does not divide 8
    with pytest.raises(ValueError):
        WindowLayout(8, 8, 0)
    with pytest.raises(ValueError):
        WindowLayout(8, 8, 4, shift=1)  # only 0 or ws//2


def test_window_count_at_paper_scale():
    assert WindowLayout(224, 224, 7).n_windows == 1024


@given(st.integers(1, 8), st.integers(1, 6), st.integers(1, 6))
def test_window_count_formula(ws, ny, nx):
    lay = WindowLayout(ny * ws, nx * ws, ws)
    assert lay.n_windows == (ny * ws) * (nx * ws) // ws**2
    assert lay.patches == ws * ws


def test_effective_window_caps_at_resolution():
    assert effective_window(7, 56, 56) == 7
    assert effective_window(7, 4, 8) == 4
    assert effective_window(2, 1, 1) == 1


@pytest.mark.parametrize("shift", [0, 2])
@pytest.mark.parametrize("batched", [False, True])
def test_partition_merge_round_trip_exact(shift, batched):
    x = _x(2 if batched else 1, 3, 8, 12, seed=shift)
    if not batched:
        x = reshape(x, (3, 8, 12))
    lay = WindowLayout(8, 12, 4, shift)
    back = window_merge(window_partition(x, lay), lay)
    np.testing.assert_array_equal(back.data, x.data)


def test_partition_layout_mismatch_raises():
    with pytest.raises(ValueError):
        window_partition(_x(1, 2, 8, 8), WindowLayout(4, 4, 2))
    with pytest.raises(ValueError):
        window_merge(Tensor(np.zeros((1, 3, 4, 2))), WindowLayout(4, 4, 2))


def test_partition_window_contents_row_major():
    # 4x4 map, ws 2: window 1 must hold columns 2..3 of rows 0..1
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    wins = window_partition(x, WindowLayout(4, 4, 2))
    np.testing.assert_array_equal(wins.data[0, 1, :, 0], [2.0, 3.0, 6.0, 7.0])


def test_shifted_partition_rolls_before_split():
    x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
    wins = window_partition(x, WindowLayout(4, 4, 2, shift=1))
    # after roll(-1, -1) the top-left window starts at original (1, 1)
    np.testing.assert_array_equal(wins.data[0, 0, :, 0], [5.0, 6.0, 9.0, 10.0])


def test_origins_and_reference_points():
    lay = WindowLayout(4, 6, 2)
    org = window_origins(lay)
    np.testing.assert_array_equal(
        org, [[0, 0], [0, 2], [0, 4], [2, 0], [2, 2], [2, 4]]
    )
    ref = reference_points(lay)
    assert ref.shape == (6, 4, 2)
    np.testing.assert_array_equal(ref[4], [[2, 2], [2, 3], [3, 2], [3, 3]])


# -- parameters ----------------------------------------------------------------

def test_param_shapes_and_registry():
    p = _params(8, 2, 4)
    assert p.wq.shape == (2, 4, 4) and p.wo.shape == (8, 8)
    assert p.bias_table.shape == (2, 7, 7)
    assert p.off_dw_w.shape == (8, 1, 5, 5) and p.off_pw_w.shape == (4, 4, 1, 1)
    assert set(p.named_tensors()) == {
        "wq", "wk", "wv", "wo", "bias_table",
        "off_dw_w", "off_dw_b", "off_pw_w", "off_pw_b",
    }


def test_non_deform_params_have_no_offset_net():
    p = _params(8, 2, 4, deform=False)
    assert not p.deformable
    assert set(p.named_tensors()) == {"wq", "wk", "wv", "wo", "bias_table"}
    with pytest.raises(ValueError):
        compute_offsets(np.zeros((16, 4)), p, head=0)


def test_head_count_must_divide_channels():
    with pytest.raises(ValueError):
        SdmsaParams.init(6, 4, 2, Stream(0))


# -- bias interpolation ---------------------------------------------------------

def test_integer_displacements_hit_table_nodes():
    ws = 3
    table = Stream(2).normal((2 * ws - 1, 2 * ws - 1))
    grid = np.stack(np.meshgrid(np.arange(ws), np.arange(ws), indexing="ij"),
                    axis=-1).reshape(-1, 2).astype(np.float64)
    with default_dtype(np.float64):
        bias = interpolated_bias(grid, grid, table).data
    for i in range(ws * ws):
        for j in range(ws * ws):
            dy, dx = (grid[j] - grid[i] + ws - 1).astype(int)
            assert bias[i, j] == table[dy, dx]  # exact, not approximate


def test_fractional_displacement_interpolates():
    table = np.zeros((3, 3))
    table[1, 2] = 4.0  # displacement (0, +1)
    pq = np.array([[0.0, 0.0]])
    pk = np.array([[0.0, 0.5]])
    with default_dtype(np.float64):
        bias = interpolated_bias(pq, pk, table).data
    np.testing.assert_allclose(bias, [[2.0]])  # halfway toward the node


# -- attention forward ----------------------------------------------------------

def test_output_shape_matches_input():
    p = _params(8, 2, 4)
    lay = WindowLayout(8, 8, 4, shift=2)
    out, trace = sdmsa(_x(2, 8, 8, 8), p, lay)
    assert out.shape == (2, 8, 8, 8)
    assert trace.attention.shape == (2, 4, 2, 16, 16)
    out3, _ = sdmsa(reshape(_x(1, 8, 8, 8, seed=3), (8, 8, 8)), p, lay)
    assert out3.shape == (8, 8, 8)


def test_attention_rows_sum_to_one():
    p = _params(8, 2, 4, seed=5)
    for shift in (0, 2):
        _, trace = sdmsa(_x(1, 8, 8, 8, seed=6), p, WindowLayout(8, 8, 4, shift))
        np.testing.assert_allclose(
            trace.attention.sum(axis=-1), 1.0, atol=1e-6
        )


def test_offsets_respect_bound():
    gamma = 0.7
    p = _params(8, 2, 4, seed=7, gamma_off=gamma)
    # inflate the offset net so tanh saturates and the bound binds
    p.off_pw_w.data[...] *= 50.0
    _, trace = sdmsa(_x(1, 8, 8, 8, seed=8), p, WindowLayout(8, 8, 4))
    bound = gamma * 4 / 2.0
    assert np.abs(trace.offsets).max() <= bound  # tanh saturates to 1.0 in f32
    assert np.abs(trace.offsets).max() > 0.5 * bound  # actually saturating


def test_deformed_points_stay_in_map():
    p = _params(8, 2, 4, seed=9, gamma_off=3.0)
    p.off_pw_w.data[...] *= 100.0
    _, trace = sdmsa(_x(1, 8, 8, 8, seed=10), p, WindowLayout(8, 8, 4))
    assert trace.deformed[..., 0].min() >= 0.0
    assert trace.deformed[..., 0].max() <= 7.0
    assert trace.deformed[..., 1].min() >= 0.0
    assert trace.deformed[..., 1].max() <= 7.0


def test_clamp_to_window_confines_samples():
    p = _params(8, 2, 4, seed=11, gamma_off=3.0, clamp_to_window=True)
    p.off_pw_w.data[...] *= 100.0
    lay = WindowLayout(8, 8, 4)
    _, trace = sdmsa(_x(1, 8, 8, 8, seed=12), p, lay)
    org = window_origins(lay)  # (n_w, 2)
    for wi in range(lay.n_windows):
        pts = trace.deformed[0, wi]  # (n_h, P, 2)
        assert pts[..., 0].min() >= org[wi, 0]
        assert pts[..., 0].max() <= org[wi, 0] + 3
        assert pts[..., 1].min() >= org[wi, 1]
        assert pts[..., 1].max() <= org[wi, 1] + 3


def test_zero_offsets_reduce_to_plain_window_attention():
    """With a silent offset net the deformable path IS the plain path."""
    for seed in range(5):
        p = _params(8, 2, 4, seed=seed)
        for t in (p.off_dw_w, p.off_dw_b, p.off_pw_w, p.off_pw_b):
            t.data[...] = 0.0
        x = _x(2, 8, 8, 8, seed=seed + 100)
        for shift in (0, 2):
            lay = WindowLayout(8, 8, 4, shift)
            a, _ = sdmsa(x, p, lay, deform=True)
            b, _ = sdmsa(x, p, lay, deform=False)
            np.testing.assert_array_equal(a.data, b.data)  # bit exact


def test_uniform_attention_averages_values():
    # zero q/k and bias -> softmax uniform -> output = per-window mean
    c, nh, ws = 4, 2, 2
    p = SdmsaParams.init(c, nh, ws, Stream(13), deform=False)
    p.wq.data[...] = 0.0
    p.wk.data[...] = 0.0
    d = c // nh
    p.wv.data[...] = np.broadcast_to(np.eye(d), (nh, d, d))
    p.wo.data[...] = np.eye(c)
    x = _x(1, c, 4, 4, seed=14)
    out, _ = sdmsa(x, p, WindowLayout(4, 4, ws), deform=False)
    want = x.data.reshape(1, c, 2, 2, 2, 2).mean(axis=(3, 5), keepdims=True)
    want = np.broadcast_to(want, (1, c, 2, 2, 2, 2)).reshape(1, c, 4, 4)
    np.testing.assert_allclose(out.data, want, atol=1e-6)


def test_smaller_runtime_window_reads_table_center():
    # params built at ws 4 (7x7 table) but run on a ws 2 layout
    p = _params(4, 2, 4, seed=15, deform=False)
    x = _x(1, 4, 2, 2, seed=16)
    out, trace = sdmsa(x, p, WindowLayout(2, 2, 2), deform=False)
    assert out.shape == (1, 4, 2, 2)
    np.testing.assert_allclose(trace.attention.sum(axis=-1), 1.0, atol=1e-6)


def test_forward_is_deterministic():
    p = _params(8, 4, 2, seed=17)
    x = _x(1, 8, 4, 4, seed=18)
    a, _ = sdmsa(x, p, WindowLayout(4, 4, 2, 1))
    b, _ = sdmsa(x, p, WindowLayout(4, 4, 2, 1))
    np.testing.assert_array_equal(a.data, b.data)


def test_error_paths():
    p = _params(8, 2, 4, deform=False)
    with pytest.raises(ValueError):
        sdmsa(_x(1, 8, 8, 8), p, WindowLayout(8, 8, 4), deform=True)
    pd = _params(8, 2, 4)
    with pytest.raises(ValueError):
        sdmsa(_x(1, 6, 8, 8), pd, WindowLayout(8, 8, 4))
    with pytest.raises(ValueError):
        sdmsa(_x(1, 8, 4, 4), pd, WindowLayout(8, 8, 4))


def test_trace_for_plain_path_reports_reference_points():
    p = _params(8, 2, 4, deform=False)
    lay = WindowLayout(8, 8, 4)
    _, trace = sdmsa(_x(1, 8, 8, 8, seed=19), p, lay, deform=False)
    assert np.all(trace.offsets == 0.0)
    want = np.broadcast_to(
        reference_points(lay).reshape(1, 4, 1, 16, 2), trace.deformed.shape
    )
    np.testing.assert_array_equal(trace.deformed, want)


def test_per_head_offsets_match_batched_offset_net():
    """compute_offsets (narrow slices) agrees with the grouped-conv path."""
    c, nh, ws = 8, 2, 4
    p = _params(c, nh, ws, seed=20)
    lay = WindowLayout(8, 8, ws)
    x = _x(1, c, 8, 8, seed=21)
    _, trace = sdmsa(x, p, lay, deform=True)
    # rebuild head queries exactly as the forward does
    with default_dtype(x.dtype.type):
        wins = window_partition(x, lay)  # (n_w, P, C)
        d = c // nh
        xh = transpose(
            reshape(wins, (lay.n_windows, lay.patches, nh, d)), (0, 2, 1, 3)
        )
        q = matmul(xh, Tensor(p.wq.data))
        for wi in (0, 3):
            for hi in range(nh):
                got = compute_offsets(Tensor(q.data[wi, hi]), p, head=hi)
                np.testing.assert_allclose(
                    got.data, trace.offsets[0, wi, hi], atol=1e-6
                )


# -- gradients ------------------------------------------------------------------

@pytest.mark.parametrize("deform", [True, False])
def test_grad_check_through_attention(deform):
    c, nh, ws = 4, 2, 2
    p = _params(c, nh, ws, seed=22, deform=deform)
    lay = WindowLayout(4, 4, ws, shift=1)

    def run(x, wq, wv, bias):
        pp = SdmsaParams(
            n_heads=nh, ws=ws, gamma_off=p.gamma_off,
            wq=wq, wk=Tensor(p.wk.data), wv=wv, wo=Tensor(p.wo.data),
            bias_table=bias,
            off_dw_w=None if not deform else Tensor(p.off_dw_w.data),
            off_dw_b=None if not deform else Tensor(p.off_dw_b.data),
            off_pw_w=None if not deform else Tensor(p.off_pw_w.data),
            off_pw_b=None if not deform else Tensor(p.off_pw_b.data),
        )
        out, _ = sdmsa(x, pp, lay, deform=deform)
        return out

    x = Stream(23).normal((1, c, 4, 4)) * 0.5
    grad_check(run, [x, p.wq.data, p.wv.data, p.bias_table.data], tol=1e-5)


def test_grad_check_offset_net_parameters():
    c, nh, ws = 4, 2, 2
    p = _params(c, nh, ws, seed=24)
    lay = WindowLayout(4, 4, ws)

    def run(dw_w, pw_w):
        pp = SdmsaParams(
            n_heads=nh, ws=ws, gamma_off=p.gamma_off,
            wq=Tensor(p.wq.data), wk=Tensor(p.wk.data),
            wv=Tensor(p.wv.data), wo=Tensor(p.wo.data),
            bias_table=Tensor(p.bias_table.data),
            off_dw_w=dw_w, off_dw_b=Tensor(p.off_dw_b.data),
            off_pw_w=pw_w, off_pw_b=Tensor(p.off_pw_b.data),
        )
        out, _ = sdmsa(Tensor(Stream(25).normal((1, c, 4, 4))), pp, lay)
        return out

    grad_check(run, [p.off_dw_w.data, p.off_pw_w.data], tol=1e-4)
