import numpy as np
import pytest

from flatlat.errors import ConfigError, DimensionError
from flatlat.nd.gradcheck import grad_check_tensors
from flatlat.nd.rng import RngStream
from flatlat.nd.tensor import Tensor
from flatlat.transformer import (
    AdaLNBlock,
    Attention,
    Block,
    FinalLayer,
    LabelEmbedder,
    Linear,
    RegisterBank,
    SwiGLU,
    TimestepEmbedder,
    concat_registers,
    extract_registers,
    swiglu_hidden,
    timestep_features,
)

pytestmark = pytest.mark.unit


def make_x(shape, seed=0):
    return Tensor(RngStream(seed).normal(shape))


def naive_attention(attn, x):
    """Per-sample, per-head, per-query softmax loop over the same weights."""
    b, s, d = x.shape
    h = attn.heads
    dh = d // h
    qkv = x @ attn.qkv.weight.data + attn.qkv.bias.data
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    mixed = np.zeros((b, s, d))
    for n in range(b):
        for head in range(h):
            cols = slice(head * dh, (head + 1) * dh)
            for i in range(s):
                scores = np.array([q[n, i, cols] @ k[n, j, cols] for j in range(s)]) / np.sqrt(dh)
                weights = np.exp(scores - scores.max())
                weights /= weights.sum()
                mixed[n, i, cols] = sum(weights[j] * v[n, j, cols] for j in range(s))
    return mixed @ attn.proj.weight.data + attn.proj.bias.data


def naive_swiglu(ffn, x):
    wg, wv, wd = ffn.w_gate.weight.data, ffn.w_value.weight.data, ffn.w_down.weight.data
    out = np.zeros_like(x)
    for idx in np.ndindex(*x.shape[:-1]):
        row = x[idx]
        hidden = np.zeros(wg.shape[1])
        for j in range(wg.shape[1]):
            g = sum(row[i] * wg[i, j] for i in range(len(row)))
            u = sum(row[i] * wv[i, j] for i in range(len(row)))
            hidden[j] = g / (1.0 + np.exp(-g)) * u
        out[idx] = [sum(hidden[j] * wd[j, c] for j in range(len(hidden))) for c in range(wd.shape[1])]
    return out


class TestLayers:
    def test_swiglu_hidden_is_parameter_matched(self):
        assert swiglu_hidden(768) == 2048
        assert swiglu_hidden(1152) == 3072
        ffn = SwiGLU(12, RngStream(0))
        assert ffn.num_parameters() == 3 * 12 * swiglu_hidden(12)

    def test_attention_matches_per_head_loop(self):
        attn = Attention(8, 2, RngStream(4))
        attn.qkv.bias.data[...] = RngStream(5).normal(attn.qkv.bias.shape)
        x = make_x((2, 5, 8), seed=6)
        np.testing.assert_allclose(attn(x).data, naive_attention(attn, x.data), atol=1e-12)

    def test_swiglu_matches_scalar_loop(self):
        ffn = SwiGLU(6, RngStream(7))
        assert ffn.w_gate.weight.shape == (6, swiglu_hidden(6)) == (6, 16)
        x = make_x((2, 3, 6), seed=8)
        np.testing.assert_allclose(ffn(x).data, naive_swiglu(ffn, x.data), atol=1e-12)

    def test_heads_must_divide_dim(self):
        with pytest.raises(ConfigError):
            Attention(10, 3, RngStream(0))

    def test_attention_accepts_unbatched_input(self):
        attn = Attention(8, 2, RngStream(1))
        x = make_x((5, 8))
        single = attn(x).data
        batched = attn(Tensor(x.data[None])).data[0]
        np.testing.assert_allclose(single, batched, atol=1e-12)

    def test_block_is_permutation_equivariant(self):
        block = Block(8, 2, RngStream(2))
        x = make_x((2, 6, 8))
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = block(x).data
        out_perm = block(Tensor(x.data[:, perm])).data
        np.testing.assert_allclose(out[:, perm], out_perm, atol=1e-12)

    def test_positional_embeddings_break_equivariance(self):
        block = Block(8, 2, RngStream(2))
        x = make_x((2, 6, 8))
        pos = make_x((6, 8), seed=9)
        perm = np.array([3, 0, 5, 1, 4, 2])
        out = block(x + pos).data
        out_perm = block(Tensor(x.data[:, perm]) + pos).data
        assert not np.allclose(out[:, perm], out_perm, atol=1e-6)

    def test_linear_shapes(self):
        lin = Linear(4, 3, RngStream(0), bias=False)
        assert lin.bias is None
        assert lin(make_x((2, 5, 4))).shape == (2, 5, 3)


class TestAdaLN:
    def test_fresh_block_is_identity(self):
        block = AdaLNBlock(8, 2, RngStream(3))
        x = make_x((2, 4, 8))
        cond = make_x((2, 8), seed=1)
        np.testing.assert_array_equal(block(x, cond).data, x.data)

    def test_fresh_final_layer_outputs_zero(self):
        final = FinalLayer(8, 3, RngStream(3))
        out = final(make_x((2, 4, 8)), make_x((2, 8), seed=1)).data
        assert out.shape == (2, 4, 3)
        assert not out.any()

    def test_modulation_shapes(self):
        block = AdaLNBlock(8, 2, RngStream(3))
        mods = block.modulation(make_x((3, 8)))
        assert len(mods) == 6
        assert all(m.shape == (3, 1, 8) for m in mods)

    def test_conditioning_dim_mismatch(self):
        block = AdaLNBlock(8, 2, RngStream(3))
        with pytest.raises(DimensionError):
            block(make_x((1, 4, 8)), make_x((1, 6)))

    def test_conditioning_reaches_output_after_update(self):
        block = AdaLNBlock(8, 2, RngStream(3))
        block.ada.weight.data[:] = RngStream(4).normal(block.ada.weight.shape) * 0.1
        x = make_x((2, 4, 8))
        a = block(x, make_x((2, 8), seed=1)).data
        b = block(x, make_x((2, 8), seed=2)).data
        assert not np.allclose(a, b)


class TestRegisters:
    def test_zero_registers_pass_through(self):
        x = make_x((2, 5, 4))
        assert concat_registers(x, RegisterBank(0, 4, RngStream(0))) is x

    def test_registers_prepend_and_extract(self):
        bank = RegisterBank(3, 4, RngStream(0))
        x = make_x((2, 5, 4))
        h = concat_registers(x, bank)
        assert h.shape == (2, 8, 4)
        regs = extract_registers(h, 3).data
        np.testing.assert_array_equal(regs[0], bank.embeddings.data)
        np.testing.assert_array_equal(regs[1], bank.embeddings.data)

    def test_register_dim_mismatch(self):
        with pytest.raises(DimensionError):
            concat_registers(make_x((2, 5, 4)), RegisterBank(2, 6, RngStream(0)))


class TestEmbedders:
    def test_timestep_features_at_zero(self):
        f = timestep_features(np.zeros(2), frequencies=8).data
        assert f.shape == (2, 16)
        np.testing.assert_array_equal(f[:, :8], 1.0)
        np.testing.assert_array_equal(f[:, 8:], 0.0)

    def test_timestep_embedder_distinguishes_times(self):
        emb = TimestepEmbedder(8, RngStream(0), frequencies=4)
        out = emb(np.array([0.1, 0.9])).data
        assert out.shape == (2, 8)
        assert not np.allclose(out[0], out[1])

    def test_label_table_has_null_row(self):
        emb = LabelEmbedder(4, 8, RngStream(0))
        assert emb.null_label == 4
        assert emb.table.shape == (5, 8)
        np.testing.assert_array_equal(emb(np.array([4])).data[0], emb.table.data[4])


class TestModule:
    def test_state_dict_round_trip(self):
        a = Block(8, 2, RngStream(1))
        b = Block(8, 2, RngStream(2))
        b.load_state_dict(a.state_dict())
        x = make_x((1, 3, 8))
        np.testing.assert_array_equal(a(x).data, b(x).data)

    def test_load_rejects_missing_keys(self):
        block = Block(8, 2, RngStream(1))
        state = block.state_dict()
        state.pop("norm1.gain")
        with pytest.raises(DimensionError):
            block.load_state_dict(state)

    def test_load_rejects_wrong_shapes(self):
        block = Block(8, 2, RngStream(1))
        state = {k: np.zeros((1,) + v.shape) for k, v in block.state_dict().items()}
        with pytest.raises(DimensionError):
            block.load_state_dict(state)

    def test_block_gradients(self):
        block = Block(4, 2, RngStream(5))
        x = make_x((2, 3, 4))
        tensors = [x, block.attn.qkv.weight, block.ffn.w_gate.weight, block.norm1.gain]
        assert grad_check_tensors(lambda: (block(x) ** 2).mean(), tensors, max_coords=12) < 1e-4

    def test_adaln_block_gradients(self):
        block = AdaLNBlock(4, 2, RngStream(5))
        block.ada.weight.data[:] = RngStream(6).normal(block.ada.weight.shape) * 0.3
        x = make_x((2, 3, 4))
        cond = make_x((2, 4), seed=1)
        tensors = [x, cond, block.ada.weight, block.attn.proj.weight]
        assert grad_check_tensors(lambda: (block(x, cond) ** 2).mean(), tensors, max_coords=12) < 1e-4
