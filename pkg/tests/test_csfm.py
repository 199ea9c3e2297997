import numpy as np
import pytest
import torch

from damc.csfm import (
    MODES,
    CrossSyncFusion,
    cdca,
    fsr,
    fuse,
    fuse_variant,
    load_fusion,
    project,
    save_fusion,
)
from damc.errors import ConfigurationError
from damc.features import FeatureSeq


def seq(values, kind="content", rate=25.0):
    return FeatureSeq(np.asarray(values, dtype=np.float32), rate, kind)


def rand_seq(w, d, seed, kind="content"):
    rng = np.random.default_rng(seed)
    return seq(rng.standard_normal((w, d)).astype(np.float32), kind)


def small_fusion(content_dim=6, dynamic_dim=10, dim=8, out_dim=4, seed=0, **kw):
    return CrossSyncFusion(
        content_dim=content_dim, dynamic_dim=dynamic_dim, dim=dim,
        out_dim=out_dim, seed=seed, **kw,
    )


def naive_attention(q, k, v):
    """Brute-force O(W^2 d) softmax attention with explicit loops."""
    w_len, d = q.shape
    out = np.zeros_like(v)
    attn = np.zeros((w_len, w_len))
    for i in range(w_len):
        logits = np.array([q[i] @ k[j] / np.sqrt(d) for j in range(w_len)])
        e = np.exp(logits - logits.max())
        a = e / e.sum()
        attn[i] = a
        for j in range(w_len):
            out[i] += a[j] * v[j]
    return out, attn


class TestProject:
    def test_identity_initialized_square(self):
        m = small_fusion(content_dim=8, dim=8)
        with torch.no_grad():
            m.proj_content.weight.copy_(torch.eye(8))
            m.proj_content.bias.zero_()
        f = rand_seq(5, 8, 0)
        out = project(f, "content", m)
        assert np.allclose(out.values, f.values, atol=1e-6)

    def test_zero_input_gives_bias(self):
        m = small_fusion()
        out = project(seq(np.zeros((4, 6))), "content", m)
        bias = m.proj_content.bias.detach().numpy()
        assert np.allclose(out.values, np.tile(bias, (4, 1)), atol=1e-7)

    def test_matches_matmul_oracle(self):
        m = small_fusion()
        f = rand_seq(7, 10, 1, kind="dynamic")
        out = project(f, "dynamic", m)
        w = m.proj_dynamic.weight.detach().numpy()
        b = m.proj_dynamic.bias.detach().numpy()
        expected = np.zeros((7, 8))
        for t in range(7):
            for o in range(8):
                expected[t, o] = b[o] + sum(
                    w[o, i] * f.values[t, i] for i in range(10)
                )
        assert np.allclose(out.values, expected, atol=1e-6)

    def test_dim_mismatch(self):
        m = small_fusion()
        with pytest.raises(ConfigurationError):
            project(rand_seq(3, 5, 2), "content", m)


class TestCdca:
    def test_single_step_window(self):
        m = small_fusion()
        qk = rand_seq(1, 8, 3)
        v = rand_seq(1, 8, 4)
        out, attn = cdca(qk, v, m, "content")
        assert attn.shape == (1, 1) and attn[0, 0] == pytest.approx(1.0)
        wv = v.values @ m.cdca_content.w_v.weight.detach().numpy().T
        assert np.allclose(out.values, wv, atol=1e-6)

    def test_identical_qk_rows_uniform_attention(self):
        m = small_fusion()
        qk = seq(np.tile(np.arange(8, dtype=np.float32), (5, 1)))
        v = rand_seq(5, 8, 5)
        out, attn = cdca(qk, v, m, "content")
        assert np.allclose(attn, 1.0 / 5, atol=1e-6)
        wv = v.values @ m.cdca_content.w_v.weight.detach().numpy().T
        assert np.allclose(out.values, np.tile(wv.mean(axis=0), (5, 1)), atol=1e-6)

    def test_matches_brute_force_oracle(self):
        m = small_fusion()
        qk = rand_seq(7, 8, 6)
        v = rand_seq(7, 8, 7)
        out, attn = cdca(qk, v, m, "content")
        wq = m.cdca_content.w_q.weight.detach().numpy().T
        wk = m.cdca_content.w_k.weight.detach().numpy().T
        wv = m.cdca_content.w_v.weight.detach().numpy().T
        ref_out, ref_attn = naive_attention(qk.values @ wq, qk.values @ wk, v.values @ wv)
        assert np.allclose(out.values, ref_out, atol=1e-6)
        assert np.allclose(attn, ref_attn, atol=1e-6)

    def test_rows_stochastic_arbitrary_input(self):
        m = small_fusion()
        for s in range(5):
            _, attn = cdca(rand_seq(6, 8, 10 + s), rand_seq(6, 8, 20 + s), m, "dynamic")
            assert (attn >= 0).all()
            assert np.allclose(attn.sum(axis=1), 1.0, atol=1e-5)

    def test_value_permutation_invariance_under_uniform_attention(self):
        m = small_fusion()
        qk = seq(np.ones((6, 8), dtype=np.float32))
        v = rand_seq(6, 8, 8)
        out1, _ = cdca(qk, v, m, "content")
        perm = np.random.default_rng(0).permutation(6)
        out2, _ = cdca(qk, seq(v.values[perm]), m, "content")
        assert np.allclose(out1.values, out2.values, atol=1e-6)

    def test_row_logit_shift_invariance(self):
        # a per-row constant added to the attention logits (the q-side shift)
        # leaves A unchanged; the same shift per column (k-side) does not
        rng = np.random.default_rng(9)
        logits = rng.standard_normal((6, 6))

        def rowsoftmax(l):
            e = np.exp(l - l.max(axis=1, keepdims=True))
            return e / e.sum(axis=1, keepdims=True)

        a_ref = rowsoftmax(logits)
        a_row = rowsoftmax(logits + 3.7)
        assert np.allclose(a_ref, a_row, atol=1e-6)
        col_shift = rng.standard_normal(6)
        a_col = rowsoftmax(logits + col_shift[None, :])
        assert not np.allclose(a_ref, a_col, atol=1e-3)

    def test_length_mismatch(self):
        m = small_fusion()
        with pytest.raises(ValueError):
            cdca(rand_seq(4, 8, 1), rand_seq(5, 8, 2), m, "content")


class TestFsr:
    def test_zero_branches_identity(self):
        m = small_fusion()
        with torch.no_grad():
            for blk in (m.fsr_content, m.fsr_dynamic):
                blk.w_out.weight.zero_()
                blk.w_out.bias.zero_()
                blk.ff2.weight.zero_()
                blk.ff2.bias.zero_()
        f = rand_seq(6, 8, 11)
        out = fsr(f, m, "content")
        assert np.array_equal(out.values, f.values)

    def test_shape_preserved(self):
        m = small_fusion()
        out = fsr(rand_seq(9, 8, 12), m, "dynamic")
        assert out.values.shape == (9, 8)

    def test_matches_straight_line_oracle(self):
        m = small_fusion()
        f = rand_seq(5, 8, 13)
        out = fsr(f, m, "content")

        blk = m.fsr_content
        x = f.values.astype(np.float64)

        def layernorm(z, gamma, beta, eps=1e-5):
            mu = z.mean(axis=1, keepdims=True)
            var = z.var(axis=1, keepdims=True)
            return (z - mu) / np.sqrt(var + eps) * gamma + beta

        g1 = blk.norm1.weight.detach().numpy()
        b1 = blk.norm1.bias.detach().numpy()
        h = layernorm(x, g1, b1)
        q = h @ blk.w_q.weight.detach().numpy().T
        k = h @ blk.w_k.weight.detach().numpy().T
        v = h @ blk.w_v.weight.detach().numpy().T
        attn_out, _ = naive_attention(q, k, v)
        x = x + attn_out @ blk.w_out.weight.detach().numpy().T + blk.w_out.bias.detach().numpy()
        g2 = blk.norm2.weight.detach().numpy()
        b2 = blk.norm2.bias.detach().numpy()
        h2 = layernorm(x, g2, b2)
        ff = np.maximum(h2 @ blk.ff1.weight.detach().numpy().T + blk.ff1.bias.detach().numpy(), 0)
        x = x + ff @ blk.ff2.weight.detach().numpy().T + blk.ff2.bias.detach().numpy()
        assert np.max(np.abs(out.values - x)) < 1e-5


class TestFuse:
    def test_default_output_dim_64(self):
        m = CrossSyncFusion()
        f_c = rand_seq(16, 44, 14)
        f_d = rand_seq(16, 512, 15, kind="dynamic")
        trace = fuse(f_c, f_d, m)
        assert trace.f_a.shape == (64,)

    def test_attention_rows_sum_to_one(self):
        m = small_fusion()
        trace = fuse(rand_seq(6, 6, 16), rand_seq(6, 10, 17, kind="dynamic"), m)
        for attn in (trace.attn_content, trace.attn_dynamic):
            a = attn.numpy()
            assert (a >= 0).all()
            assert np.allclose(a.sum(axis=1), 1.0, atol=1e-5)

    def test_composition_identity(self):
        m = small_fusion()
        f_c = rand_seq(6, 6, 18)
        f_d = rand_seq(6, 10, 19, kind="dynamic")
        trace = fuse(f_c, f_d, m)

        f_c1 = project(f_c, "content", m)
        f_d1 = project(f_d, "dynamic", m)
        f_c2, _ = cdca(f_c1, f_d1, m, "content")
        f_d2, _ = cdca(f_d1, f_c1, m, "dynamic")
        f_c3 = fsr(seq(f_c1.values + f_c2.values, "projected"), m, "content")
        f_d3 = fsr(seq(f_d1.values + f_d2.values, "projected"), m, "dynamic")
        with torch.no_grad():
            f_a = m.merge(
                torch.cat([
                    torch.as_tensor(f_c3.values[3]),
                    torch.as_tensor(f_d3.values[3]),
                ])
            )
        assert np.array_equal(trace.f_c3.numpy(), f_c3.values)
        assert np.array_equal(trace.f_a.numpy(), f_a.numpy())

    def test_deterministic(self):
        m = small_fusion()
        f_c, f_d = rand_seq(6, 6, 20), rand_seq(6, 10, 21, kind="dynamic")
        t1, t2 = fuse(f_c, f_d, m), fuse(f_c, f_d, m)
        assert np.array_equal(t1.f_a.numpy(), t2.f_a.numpy())

    def test_length_mismatch(self):
        m = small_fusion()
        with pytest.raises(ValueError):
            fuse(rand_seq(4, 6, 1), rand_seq(5, 10, 2, kind="dynamic"), m)


class TestFuseVariant:
    def setup_method(self):
        self.m = small_fusion()
        self.f_c = rand_seq(6, 6, 22)
        self.f_d = rand_seq(6, 10, 23, kind="dynamic")

    def test_full_aliases_fuse(self):
        t = fuse(self.f_c, self.f_d, self.m)
        v = fuse_variant(self.f_c, self.f_d, self.m, "full")
        assert np.array_equal(v, t.f_a.numpy())

    def test_all_modes_shapes(self):
        for mode in MODES:
            v = fuse_variant(self.f_c, self.f_d, self.m, mode)
            assert v.shape == (4,)

    def test_concat_ignores_cdca_fsr_weights(self):
        before = fuse_variant(self.f_c, self.f_d, self.m, "concat")
        with torch.no_grad():
            self.m.cdca_content.w_q.weight.add_(1.0)
            self.m.fsr_dynamic.ff1.weight.add_(1.0)
        after = fuse_variant(self.f_c, self.f_d, self.m, "concat")
        assert np.array_equal(before, after)

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            fuse_variant(self.f_c, self.f_d, self.m, "bogus")


class TestGradients:
    def test_all_parameter_gradients_match_fd(self):
        m = small_fusion().double()
        n_params = sum(p.numel() for p in m.parameters())
        assert n_params <= 2000
        torch.manual_seed(0)
        f_c = torch.randn(6, 6, dtype=torch.float64)
        f_d = torch.randn(6, 10, dtype=torch.float64)

        def loss():
            return m.fuse_tensors(f_c, f_d).f_a.sum()

        val = loss()
        m.zero_grad()
        val.backward()
        h = 1e-5
        rng = np.random.default_rng(3)
        for name, p in m.named_parameters():
            flat = p.data.reshape(-1)
            gflat = p.grad.reshape(-1)
            idx = rng.choice(len(flat), size=min(4, len(flat)), replace=False)
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + h
                up = loss().item()
                flat[i] = orig - h
                dn = loss().item()
                flat[i] = orig
                fd = (up - dn) / (2 * h)
                denom = max(abs(fd), abs(gflat[i].item()), 1e-6)
                assert abs(fd - gflat[i].item()) / denom < 1e-3, name


class TestSerialization:
    def test_round_trip(self, tmp_path):
        m = small_fusion(seed=7)
        p = tmp_path / "csfm.dfb1"
        save_fusion(p, m)
        m2 = load_fusion(p)
        f_c, f_d = rand_seq(6, 6, 24), rand_seq(6, 10, 25, kind="dynamic")
        assert np.array_equal(
            fuse(f_c, f_d, m).f_a.numpy(), fuse(f_c, f_d, m2).f_a.numpy()
        )
