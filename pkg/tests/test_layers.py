import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from octselfnet import tensor as T
from octselfnet.errors import ConfigError, ShapeError
from octselfnet.layers import (
    MASK_NEG, AttentionConfig, Bottleneck, ContinuousPosBias, Linear, PatchExpand, PatchMerge,
    RelPosBias, SwinBlock, log_spaced_coords, merge_2x2, multi_head_attention, patch_embed,
    relative_position_index, scaled_cosine_attention, shift_region_labels, shifted_window_mask,
    window_partition, window_reverse,
)
from octselfnet.optim import grad_check


def attention_oracle(x, wqkv, bqkv, wp, bp, heads, bias=None, cosine_scale=None):
    """Token-by-token loop over heads and pairs."""
    n, d = x.shape
    hd = d // heads
    qkv = x @ wqkv.T + bqkv
    q, k, v = qkv[:, :d], qkv[:, d:2 * d], qkv[:, 2 * d:]
    out = np.zeros((n, d))
    for h in range(heads):
        sl = slice(h * hd, (h + 1) * hd)
        for i in range(n):
            logits = []
            for j in range(n):
                if cosine_scale is None:
                    val = sum(q[i, sl] * k[j, sl]) / math.sqrt(hd)
                else:
                    qn, kn = np.linalg.norm(q[i, sl]), np.linalg.norm(k[j, sl])
                    val = sum(q[i, sl] * k[j, sl]) / (qn * kn) * cosine_scale[h]
                if bias is not None:
                    val += bias[h, i, j]
                logits.append(val)
            e = np.exp(np.array(logits) - max(logits))
            w = e / e.sum()
            out[i, sl] = sum(w[j] * v[j, sl] for j in range(n))
    return out @ wp.T + bp


def attn_weights(rng, d):
    return rng.normal(size=(3 * d, d)), rng.normal(size=3 * d), rng.normal(size=(d, d)), rng.normal(size=d)


class TestLinear:
    def test_identity(self, rng):
        lin = Linear(3, 3, rng)
        lin.weight.data[...] = np.eye(3)
        x = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(lin(T.Tensor(x)).data, x)

    def test_hand(self, rng):
        lin = Linear(2, 2, rng)
        lin.weight.data[...] = [[2, 0], [0, 3]]
        lin.bias.data[...] = [1, 1]
        assert lin(T.Tensor([1.0, 1.0])).data.tolist() == [3.0, 4.0]

    def test_compose_oracle(self, rng):
        w, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=(5, 3))
        out = T.linear(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data
        ref = T.add(T.matmul(T.Tensor(x), T.Tensor(w.T)), T.Tensor(b)).data
        assert np.abs(out - ref).max() < 1e-14

    def test_grad_check(self, rng):
        assert grad_check(Linear(4, 3, rng, std=0.5), T.Tensor(rng.normal(size=(2, 4))), eps=1e-5) < 1e-5


class TestAttention:
    def test_single_token_is_value_projection(self, rng):
        d = 4
        wq, bq, wp, bp = attn_weights(rng, d)
        x = rng.normal(size=(1, 1, d))
        out = multi_head_attention(T.Tensor(x), T.Tensor(wq), T.Tensor(bq), T.Tensor(wp), T.Tensor(bp), 2).data
        v = x[0] @ wq[2 * d:].T + bq[2 * d:]
        np.testing.assert_allclose(out[0], v @ wp.T + bp, atol=1e-12)

    def test_identical_tokens_split_evenly(self, rng):
        d = 4
        wq, bq, wp, bp = attn_weights(rng, d)
        x = np.repeat(rng.normal(size=(1, 1, d)), 2, axis=1)
        _, w = multi_head_attention(T.Tensor(x), *map(T.Tensor, (wq, bq, wp, bp)), 2, return_weights=True)
        assert np.all(w.data == 0.5)

    def test_loop_oracle(self, rng):
        d = 6
        wq, bq, wp, bp = attn_weights(rng, d)
        x = rng.normal(size=(5, d))
        bias = rng.normal(size=(2, 5, 5))
        out = multi_head_attention(T.Tensor(x[None]), *map(T.Tensor, (wq, bq, wp, bp)), 2, bias=T.Tensor(bias)).data[0]
        assert np.abs(out - attention_oracle(x, wq, bq, wp, bp, 2, bias)).max() < 1e-10

    def test_cosine_loop_oracle(self, rng):
        d = 4
        wq, bq, wp, bp = attn_weights(rng, d)
        x = rng.normal(size=(4, d))
        ls = np.log(np.array([10.0, 3.0]))
        out = scaled_cosine_attention(T.Tensor(x[None]), *map(T.Tensor, (wq, bq, wp, bp)), 2, T.Tensor(ls)).data[0]
        assert np.abs(out - attention_oracle(x, wq, bq, wp, bp, 2, cosine_scale=np.exp(ls))).max() < 1e-10

    def test_cosine_equal_unit_vectors_uniform(self):
        d = 2
        wq = np.zeros((3 * d, d))
        bq = np.tile([1.0, 0.0], 3)
        x = np.zeros((1, 5, d))
        _, w = scaled_cosine_attention(T.Tensor(x), T.Tensor(wq), T.Tensor(bq), T.Tensor(np.eye(d)),
                                       T.Tensor(np.zeros(d)), 1, T.Tensor([2.0]), return_weights=True)
        np.testing.assert_allclose(w.data, 0.2, atol=1e-15)

    def test_cosine_logit_scale_clamped(self, rng):
        d = 4
        wq, bq, wp, bp = attn_weights(rng, d)
        x = T.Tensor(rng.normal(size=(1, 3, d)))
        a = scaled_cosine_attention(x, *map(T.Tensor, (wq, bq, wp, bp)), 1, T.Tensor([math.log(100.0)])).data
        b = scaled_cosine_attention(x, *map(T.Tensor, (wq, bq, wp, bp)), 1, T.Tensor([50.0])).data
        np.testing.assert_array_equal(a, b)

    def test_cosine_scale_invariance(self, rng):
        # rescaling q and k per token leaves cosine logits untouched
        d = 4
        wq, bq, wp, bp = attn_weights(rng, d)
        bq[:2 * d] = 0
        x = rng.normal(size=(1, 4, d))
        s = rng.uniform(0.1, 10, size=(1, 4, 1))
        args = [T.Tensor(a) for a in (wq, bq, wp, bp)]
        w1 = scaled_cosine_attention(T.Tensor(x), *args, 2, T.Tensor([1.0, 2.0]), return_weights=True)[1].data
        wq2 = wq.copy()
        ref = scaled_cosine_attention(T.Tensor(x * s), T.Tensor(wq2), *args[1:], 2, T.Tensor([1.0, 2.0]),
                                      return_weights=True)[1].data
        assert np.abs(w1 - ref).max() < 1e-9

    def test_window_equals_standard_on_single_window(self, rng):
        blk = SwinBlock(8, 2, (4, 4), 4, 0, rng)
        blk.attn.rel_bias.table.data[...] = 0
        x = rng.normal(size=(2, 16, 8))
        win = blk._attend(T.Tensor(x)).data
        a = blk.attn
        ref = multi_head_attention(T.Tensor(x), a.qkv.weight, a.qkv.bias, a.proj.weight, a.proj.bias, 2).data
        assert np.abs(win - ref).max() < 1e-10

    def test_config_errors(self):
        with pytest.raises(ConfigError):
            AttentionConfig(6, 4)
        with pytest.raises(ConfigError):
            AttentionConfig(8, 2, "window_shifted", window=4, shift=4)
        with pytest.raises(ConfigError):
            AttentionConfig(8, 2, "nope")
        assert AttentionConfig(8, 2, "window_shifted", 4, 2).head_dim == 4


class TestWindows:
    def test_four_windows_row_major(self):
        x = np.arange(16.0).reshape(1, 4, 4, 1)
        w = window_partition(x, 2)[..., 0]
        assert w.tolist() == [[0, 1, 4, 5], [2, 3, 6, 7], [8, 9, 12, 13], [10, 11, 14, 15]]

    def test_single_window(self, rng):
        x = rng.normal(size=(1, 3, 3, 2))
        np.testing.assert_array_equal(window_partition(x, 3)[0], x.reshape(9, 2))

    def test_index_census(self):
        idx = np.arange(64).reshape(1, 8, 8, 1)
        w = window_partition(idx, 4)[..., 0]
        assert sorted(w.ravel().tolist()) == list(range(64))
        assert np.bincount(w.ravel()).max() == 1

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 3), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3))
    def test_round_trip(self, b, m, nh, nw, c):
        x = np.random.default_rng(b * m).normal(size=(b, nh * m, nw * m, c))
        np.testing.assert_array_equal(window_reverse(window_partition(x, m), m, nh * m, nw * m), x)

    def test_indivisible(self):
        with pytest.raises(ShapeError):
            window_partition(np.zeros((1, 5, 4, 1)), 2)

    def test_zero_shift_mask_free(self):
        assert np.all(shift_region_labels(8, 8, 4, 0) == 0)

    def test_shift_regions_brute_force(self):
        labels = shift_region_labels(4, 4, 4, 2)
        assert len(np.unique(labels)) == 4
        mask = shifted_window_mask(4, 4, 4, 2)[0]
        flat = labels.ravel()
        brute = sum(flat[i] != flat[j] for i in range(16) for j in range(16))
        assert int((mask == MASK_NEG).sum()) == brute
        np.testing.assert_array_equal(mask, mask.T)

    def test_mask_rows_keep_self(self):
        m = shifted_window_mask(8, 8, 4, 2)
        assert np.all(np.diagonal(m, axis1=1, axis2=2) == 0)

    def test_bad_shift(self):
        with pytest.raises(ConfigError):
            shifted_window_mask(8, 8, 4, 4)

    def test_shifted_rows_sum_to_one(self, rng):
        blk = SwinBlock(8, 2, (8, 8), 4, 2, rng)
        x = T.Tensor(rng.normal(size=(1, 8, 8, 8)))
        w = window_partition(T.roll(x, (-2, -2), (1, 2)), 4)
        _, attn = multi_head_attention(w, blk.attn.qkv.weight, blk.attn.qkv.bias, blk.attn.proj.weight,
                                       blk.attn.proj.bias, 2, blk.attn.rel_bias(), blk._mask, return_weights=True)
        assert np.abs(attn.data.sum(-1) - 1).max() < 1e-9

    def test_padding_for_indivisible_grid(self, rng):
        blk = SwinBlock(4, 1, (5, 5), 2, 1, rng)
        out = blk(T.Tensor(rng.normal(size=(2, 25, 4))))
        assert out.shape == (2, 25, 4)


class TestRelativePosition:
    def test_table_len(self, rng):
        assert RelPosBias(2, 1, rng).table.shape == (9, 1)

    def test_horizontal_neighbours_share_index(self):
        idx = relative_position_index(3)
        pairs = {idx[r * 3 + c, r * 3 + c + 1] for r in range(3) for c in range(2)}
        assert len(pairs) == 1

    def test_surjection_m3(self):
        assert sorted(set(relative_position_index(3).ravel().tolist())) == list(range(25))

    def test_translation_invariant_bias(self, rng):
        m = 3
        bias = RelPosBias(m, 2, rng)().data
        coords = [(i, j) for i in range(m) for j in range(m)]
        seen = {}
        for a, pa in enumerate(coords):
            for b, pb in enumerate(coords):
                key = (pa[0] - pb[0], pa[1] - pb[1])
                if key in seen:
                    np.testing.assert_array_equal(bias[:, a, b], seen[key])
                seen[key] = bias[:, a, b]

    def test_log_coords(self):
        c = log_spaced_coords(8)
        r = np.arange(-7, 8)
        origin = np.where((c[:, 0] == 0) & (c[:, 1] == 0))[0]
        assert len(origin) == 1
        row = (7 + 7) * len(r) + 7  # displacement (7, 0)
        assert abs(c[row, 0] - 1.0) < 1e-15 and c[row, 1] == 0

    def test_cpb_finite_and_bounded(self, rng):
        cpb = ContinuousPosBias(4, 2, rng, hidden=16)
        for p in cpb.parameters():
            p.data[...] = rng.uniform(-1, 1, p.shape)
        b = cpb().data
        assert b.shape == (2, 16, 16) and np.all(np.isfinite(b)) and np.all((b > 0) & (b < 16))


class TestPatchOps:
    def test_token_counts(self, rng):
        w = rng.normal(size=(8, 3, 16, 16))
        assert patch_embed(T.Tensor(np.zeros((1, 3, 224, 224))), T.Tensor(w), None, 16).shape == (1, 196, 8)
        w = rng.normal(size=(8, 3, 4, 4))
        assert patch_embed(T.Tensor(np.zeros((1, 3, 32, 32))), T.Tensor(w), None, 4).shape == (1, 64, 8)

    def test_dual_path(self, rng):
        img, w, b = rng.normal(size=(2, 3, 16, 16)), rng.normal(size=(5, 3, 4, 4)), rng.normal(size=5)
        conv = patch_embed(T.Tensor(img), T.Tensor(w), T.Tensor(b), 4, "conv").data
        lin = patch_embed(T.Tensor(img), T.Tensor(w), T.Tensor(b), 4, "linear").data
        np.testing.assert_array_equal(conv, lin)

    def test_indivisible(self, rng):
        with pytest.raises(ShapeError):
            patch_embed(T.Tensor(np.zeros((1, 1, 10, 10))), T.Tensor(np.zeros((2, 1, 4, 4))), None, 4)

    def test_merge_shapes(self, rng):
        assert PatchMerge(3, rng)(T.Tensor(rng.normal(size=(1, 2, 2, 3)))).shape == (1, 1, 1, 6)
        assert PatchMerge(96, rng, version=2)(T.Tensor(rng.normal(size=(1, 8, 8, 96)))).shape == (1, 4, 4, 192)

    def test_merge_slot_order(self):
        x = np.zeros((1, 2, 2, 1))
        x[0, 0, 0], x[0, 1, 0], x[0, 0, 1], x[0, 1, 1] = 1, 2, 3, 4  # TL, BL, TR, BR
        assert merge_2x2(T.Tensor(x)).data.ravel().tolist() == [1, 2, 3, 4]

    def test_merge_permutation_probe(self, rng):
        x = rng.normal(size=(1, 2, 2, 2))
        base = merge_2x2(T.Tensor(x)).data.reshape(4, 2)
        swapped = x[:, :, ::-1].copy()  # swap left and right columns
        got = merge_2x2(T.Tensor(swapped)).data.reshape(4, 2)
        np.testing.assert_array_equal(got, base[[2, 3, 0, 1]])

    def test_expand(self, rng):
        assert PatchExpand(4, rng)(T.Tensor(rng.normal(size=(1, 1, 1, 4)))).shape == (1, 2, 2, 2)
        x = T.Tensor(rng.normal(size=(1, 7, 7, 64)))
        for _ in range(3):
            h = x.shape[1]
            x = PatchExpand(x.shape[-1], rng)(x)
            assert x.shape[1] == 2 * h
        assert x.shape[1:3] == (56, 56)

    def test_expand_odd(self, rng):
        with pytest.raises(ShapeError):
            PatchExpand(3, rng)


class TestBottleneck:
    def test_zero_weights_pass_skip(self, rng):
        blk = Bottleneck(16, 4, rng)
        for conv in (blk.conv1, blk.conv2, blk.conv3):
            conv.weight.data[...] = 0
        x = rng.normal(size=(2, 16, 4, 4))
        np.testing.assert_array_equal(blk(T.Tensor(x)).data, np.maximum(x, 0))

    def test_stride_halves(self, rng):
        assert Bottleneck(8, 4, rng, stride=2)(T.Tensor(rng.normal(size=(2, 8, 8, 8)))).shape == (2, 16, 4, 4)

    def test_composition_oracle(self, rng):
        blk = Bottleneck(8, 4, rng, stride=2).eval()
        x = rng.normal(size=(1, 8, 6, 6))

        def conv_bn(inp, conv, bn):
            y = T.conv2d(T.Tensor(inp), conv.weight, None, conv.stride, conv.padding).data
            return (y - bn.running_mean[None, :, None, None]) / np.sqrt(bn.running_var[None, :, None, None] + bn.eps)

        y = np.maximum(conv_bn(x, blk.conv1, blk.bn1), 0)
        y = np.maximum(conv_bn(y, blk.conv2, blk.bn2), 0)
        y = conv_bn(y, blk.conv3, blk.bn3) + conv_bn(x, blk.down_conv, blk.down_bn)
        assert np.abs(blk(T.Tensor(x)).data - np.maximum(y, 0)).max() < 1e-9

    def test_grad_check(self, rng):
        blk = Bottleneck(4, 2, rng, stride=2)
        assert grad_check(blk, T.Tensor(rng.uniform(-1, 1, (4, 4, 4, 4))), eps=1e-5) < 1e-4
