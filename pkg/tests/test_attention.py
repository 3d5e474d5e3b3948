import math

import numpy as np
import pytest

from mbtnet import tensor as T
from mbtnet.attention import (AxialHead, ConvResidualBlock, MultiHeadAxialAttention,
                              ResidualTransformerBlock, axial_self_attention, window_layout)
from mbtnet.tensor import ShapeError, Tensor


def dense_oracle(x, head, axis):
    """Axial attention materialized with explicit loops and relative lookups."""
    x = np.asarray(x, dtype=np.float64)
    if axis == "width":
        return dense_oracle(x.transpose(0, 1, 3, 2), head, "height").transpose(0, 1, 3, 2)
    B, C, L, W = x.shape
    wq = head.w_q.data[:, :, 0, 0].astype(np.float64)
    wk = head.w_k.data[:, :, 0, 0].astype(np.float64)
    wv = head.w_v.data[:, :, 0, 0].astype(np.float64)
    rq, rk, rv = (t.data.astype(np.float64) for t in (head.r_q, head.r_k, head.r_v))
    m = min(head.span, L)
    y = np.zeros((B, wv.shape[0], L, W))
    for b in range(B):
        for col in range(W):
            feats = x[b, :, :, col]
            q, k, v = wq @ feats, wk @ feats, wv @ feats
            for o in range(L):
                start = min(max(o - m // 2, 0), L - m)
                window = range(start, start + m)
                logits = []
                for p in window:
                    r = p - o + head.span - 1
                    logits.append(q[:, o] @ k[:, p] + q[:, o] @ rq[r] + k[:, p] @ rk[r])
                top = max(logits)
                weights = [math.exp(z - top) for z in logits]
                total = sum(weights)
                for wgt, p in zip(weights, window):
                    y[b, :, o, col] += wgt / total * (v[:, p] + rv[p - o + head.span - 1])
    return y


def random_head(rng, channels, dqk, dv, span):
    head = AxialHead(channels, dqk, dv, span, rng)
    for p in head.parameters():
        p.data[...] = rng.normal(0, 0.5, size=p.shape)
    return head


def test_dense_oracle_fifty_configs():
    rng = np.random.default_rng(2024)
    for trial in range(50):
        C = int(rng.integers(1, 5))
        H, W = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        span = int(rng.integers(1, 10))
        axis = ("height", "width")[trial % 2]
        head = random_head(rng, C, int(rng.integers(1, 4)), int(rng.integers(1, 4)), span)
        x = rng.normal(size=(int(rng.integers(1, 3)), C, H, W)).astype(np.float32)
        out = axial_self_attention(Tensor(x), head, axis).data
        np.testing.assert_allclose(out, dense_oracle(x, head, axis), atol=1e-5,
                                   err_msg=f"trial {trial}: C={C} H={H} W={W} m={span} {axis}")


def test_six_wide_global_window():
    rng = np.random.default_rng(5)
    head = random_head(rng, 4, 2, 3, 6)
    x = rng.normal(size=(1, 4, 1, 6)).astype(np.float32)
    np.testing.assert_allclose(axial_self_attention(Tensor(x), head, "width").data,
                               dense_oracle(x, head, "width"), atol=1e-5)


def window_mean(x, span, axis):
    L = x.shape[2] if axis == "height" else x.shape[3]
    m = min(span, L)
    out = np.zeros_like(x, dtype=np.float64)
    for o in range(L):
        start = min(max(o - m // 2, 0), L - m)
        if axis == "height":
            out[:, :, o] = x[:, :, start:start + m].mean(axis=2)
        else:
            out[:, :, :, o] = x[:, :, :, start:start + m].mean(axis=3)
    return out


def make_mean_head(head, channels):
    for p in head.parameters():
        p.data[...] = 0
    head.w_v.data[:, :, 0, 0] = np.eye(channels)


@pytest.mark.parametrize("axis", ["height", "width"])
@pytest.mark.parametrize("span", [1, 3, 4, 48])
def test_zero_logits_give_window_mean(axis, span):
    rng = np.random.default_rng(0)
    head = AxialHead(3, 2, 3, span, rng)
    make_mean_head(head, 3)
    x = rng.normal(size=(2, 3, 7, 5))
    np.testing.assert_allclose(axial_self_attention(Tensor(x), head, axis).data,
                               window_mean(x, span, axis), atol=1e-6)


def test_single_position_axis():
    rng = np.random.default_rng(1)
    head = random_head(rng, 3, 2, 2, 5)
    x = rng.normal(size=(1, 3, 1, 4))
    v = np.einsum("dc,bchw->bdhw", head.w_v.data[:, :, 0, 0], x)
    expected = v + head.r_v.data[4][None, :, None, None]
    np.testing.assert_allclose(axial_self_attention(Tensor(x), head, "height").data,
                               expected, atol=1e-6)


def test_window_layout_clamps_not_wraps():
    mask, rows = window_layout(6, 3)
    assert mask.sum(axis=1).tolist() == [3] * 6
    assert mask[0].tolist() == [True, True, True, False, False, False]
    assert mask[5].tolist() == [False, False, False, True, True, True]
    assert rows[2, 2] == 2  # offset 0 sits in row m - 1
    full, _ = window_layout(4, 48)
    assert full.all()


def test_relative_tables_have_2m_minus_1_rows():
    head = AxialHead(4, 2, 2, 7, np.random.default_rng(0))
    assert head.r_q.shape == (13, 2) and head.r_k.shape == (13, 2) and head.r_v.shape == (13, 2)


def test_bad_axis_rejected():
    head = AxialHead(2, 2, 2, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="axis"):
        axial_self_attention(Tensor(np.zeros((1, 2, 3, 3))), head, "depth")
    with pytest.raises(ValueError, match="axis"):
        MultiHeadAxialAttention(4, 2, 3, "diagonal", np.random.default_rng(0))


class TestMultiHead:
    def test_one_head_is_single_head(self):
        rng = np.random.default_rng(3)
        mha = MultiHeadAxialAttention(4, 1, 3, "width", rng)
        x = Tensor(rng.normal(size=(1, 4, 3, 5)))
        np.testing.assert_array_equal(mha(x).data,
                                      axial_self_attention(x, mha.heads[0], "width").data)

    def test_two_mean_heads_replicate(self):
        rng = np.random.default_rng(4)
        mha = MultiHeadAxialAttention(4, 2, 3, "height", rng)
        for head in mha.heads:
            for p in head.parameters():
                p.data[...] = 0
            head.w_v.data[:, :2, 0, 0] = np.eye(2)
        x = rng.normal(size=(1, 4, 6, 2))
        out = mha(Tensor(x)).data
        expected = window_mean(x[:, :2], 3, "height")
        np.testing.assert_allclose(out[:, :2], expected, atol=1e-6)
        np.testing.assert_allclose(out[:, 2:], expected, atol=1e-6)

    def test_four_heads_concatenate_oracles(self):
        rng = np.random.default_rng(6)
        mha = MultiHeadAxialAttention(8, 4, 3, "width", rng)
        for head in mha.heads:
            for p in head.parameters():
                p.data[...] = rng.normal(0, 0.5, size=p.shape)
        x = rng.normal(size=(1, 8, 3, 7)).astype(np.float32)
        expected = np.concatenate([dense_oracle(x, h, "width") for h in mha.heads], axis=1)
        np.testing.assert_allclose(mha(Tensor(x)).data, expected, atol=1e-5)

    def test_indivisible_width(self):
        with pytest.raises(ValueError, match="divisible"):
            MultiHeadAxialAttention(6, 4, 3, "height", np.random.default_rng(0))


class TestTransformerBlock:
    def test_fresh_block_is_identity_bitwise(self):
        rng = np.random.default_rng(7)
        block = ResidualTransformerBlock(8, 2, 4, rng)
        for _ in range(20):
            x = rng.normal(size=(1, 8, 5, 6)).astype(np.float32)
            assert block(Tensor(x)).data.tobytes() == x.tobytes()

    def test_shape_preserved(self):
        rng = np.random.default_rng(8)
        block = ResidualTransformerBlock(8, 2, 4, rng)
        block.exit.weight.data[...] = rng.normal(size=block.exit.weight.shape)
        assert block(Tensor(rng.normal(size=(2, 8, 4, 5)))).shape == (2, 8, 4, 5)

    def test_width_mismatch(self):
        block = ResidualTransformerBlock(8, 2, 4, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 4, 4, 4))))

    def test_stacked_residuals_accumulate(self):
        # linear sub-blocks f_i(a) = A_i a: a2 = a0 + f1(a0) + f2(a0 + f1(a0))
        rng = np.random.default_rng(9)
        blocks = [ResidualTransformerBlock(4, 1, 3, rng) for _ in range(2)]
        mats = [rng.normal(0, 0.3, size=(4, 4)) for _ in blocks]
        for block, mat in zip(blocks, mats):
            block.residual = (lambda m: lambda a: Tensor(
                np.einsum("oc,bchw->bohw", m, a.data)))(mat)
        a0 = rng.normal(size=(1, 4, 3, 3))
        out = blocks[1](blocks[0](Tensor(a0))).data
        f1 = np.einsum("oc,bchw->bohw", mats[0], a0)
        f2 = np.einsum("oc,bchw->bohw", mats[1], a0 + f1)
        np.testing.assert_allclose(out, a0 + f1 + f2, atol=1e-6)

    def test_row_permutation_equivariance(self):
        rng = np.random.default_rng(10)
        mha = MultiHeadAxialAttention(4, 2, 3, "width", rng)
        for head in mha.heads:
            for p in head.parameters():
                p.data[...] = rng.normal(0, 0.5, size=p.shape)
        x = rng.normal(size=(1, 4, 6, 5))
        perm = rng.permutation(6)
        np.testing.assert_allclose(mha(Tensor(x[:, :, perm])).data, mha(Tensor(x)).data[:, :, perm],
                                   atol=1e-12)


class TestConvBlock:
    def test_zero_weights_identity_skip_is_relu(self):
        rng = np.random.default_rng(11)
        block = ConvResidualBlock(3, 3, rng)
        for p in block.parameters():
            p.data[...] = 0
        x = rng.normal(size=(1, 3, 5, 5))
        np.testing.assert_array_equal(block(Tensor(x)).data, np.maximum(x, 0))

    def test_stride_two_halves(self):
        block = ConvResidualBlock(3, 6, np.random.default_rng(0), stride=2)
        assert block(Tensor(np.zeros((1, 3, 8, 6)))).shape == (1, 6, 4, 3)

    def test_width_mismatch(self):
        block = ConvResidualBlock(3, 3, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            block(Tensor(np.zeros((1, 2, 4, 4))))
