"""Cross-synchronized fusion of content and dynamic audio features.

Both streams are projected to a shared width, exchanged through two
cross-attention blocks (query and key from one stream, value from the other),
refined per-stream by residual self-attention blocks, and merged into a single
conditioning vector for the renderer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from . import dfb
from .errors import ConfigurationError
from .features import FeatureSeq


@dataclass
class FusionTrace:
    """All intermediates of one fusion pass (tensors, [W, d] each)."""

    f_c1: torch.Tensor
    f_d1: torch.Tensor
    f_c2: torch.Tensor
    f_d2: torch.Tensor
    f_c3: torch.Tensor
    f_d3: torch.Tensor
    f_a: torch.Tensor          # [d_a]
    attn_content: torch.Tensor  # [W, W]
    attn_dynamic: torch.Tensor  # [W, W]


def _attention(q, k, v, n_heads=1):
    """Row-softmax scaled dot-product attention; returns (out, attn)."""
    w, d = q.shape
    dh = d // n_heads
    qh = q.reshape(w, n_heads, dh).transpose(0, 1)
    kh = k.reshape(w, n_heads, dh).transpose(0, 1)
    vh = v.reshape(w, n_heads, dh).transpose(0, 1)
    attn = torch.softmax(qh @ kh.transpose(1, 2) / np.sqrt(dh), dim=2)
    out = (attn @ vh).transpose(0, 1).reshape(w, d)
    return out, attn.mean(dim=0)


class CdcaBlock(nn.Module):
    """Cross attention where one stream supplies query and key, the other the value."""

    def __init__(self, dim: int, n_heads: int = 1, qk_split: bool = False):
        super().__init__()
        self.n_heads = n_heads
        self.qk_split = qk_split
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)

    def forward(self, qk_seq, v_seq):
        q = self.w_q(qk_seq)
        k = self.w_k(v_seq if self.qk_split else qk_seq)
        v = self.w_v(v_seq)
        return _attention(q, k, v, self.n_heads)


class FsrBlock(nn.Module):
    """Pre-norm residual self-attention sublayer plus a feedforward sublayer."""

    def __init__(self, dim: int, n_heads: int = 1, ff_mult: int = 2, eps: float = 1e-5):
        super().__init__()
        self.n_heads = n_heads
        self.norm1 = nn.LayerNorm(dim, eps=eps)
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_out = nn.Linear(dim, dim)
        self.norm2 = nn.LayerNorm(dim, eps=eps)
        self.ff1 = nn.Linear(dim, ff_mult * dim)
        self.ff2 = nn.Linear(ff_mult * dim, dim)

    def forward(self, x):
        h = self.norm1(x)
        attn_out, _ = _attention(self.w_q(h), self.w_k(h), self.w_v(h), self.n_heads)
        x = x + self.w_out(attn_out)
        x = x + self.ff2(torch.relu(self.ff1(self.norm2(x))))
        return x


MODES = ("content_only", "dynamic_only", "concat", "cross_attention", "full")


class CrossSyncFusion(nn.Module):
    """Full fusion pipeline producing the audio condition for one video frame.

    The conditioning vector is read at the center row of the temporal window,
    so a window of W frames conditions exactly its central frame.
    """

    def __init__(
        self,
        content_dim: int = 44,
        dynamic_dim: int = 512,
        dim: int = 64,
        out_dim: int = 64,
        n_heads: int = 1,
        qk_split: bool = False,
        seed: int = 0,
    ):
        super().__init__()
        if dim % n_heads != 0:
            raise ConfigurationError("dim must be divisible by n_heads")
        torch.manual_seed(seed)
        self.content_dim = content_dim
        self.dynamic_dim = dynamic_dim
        self.dim = dim
        self.out_dim = out_dim
        self.proj_content = nn.Linear(content_dim, dim)
        self.proj_dynamic = nn.Linear(dynamic_dim, dim)
        self.cdca_content = CdcaBlock(dim, n_heads, qk_split)
        self.cdca_dynamic = CdcaBlock(dim, n_heads, qk_split)
        self.fsr_content = FsrBlock(dim, n_heads)
        self.fsr_dynamic = FsrBlock(dim, n_heads)
        self.merge = nn.Linear(2 * dim, out_dim)

    def project_tensor(self, f: torch.Tensor, which: str) -> torch.Tensor:
        proj = {"content": self.proj_content, "dynamic": self.proj_dynamic}.get(which)
        if proj is None:
            raise ValueError(f"unknown stream {which!r}")
        if f.shape[1] != proj.in_features:
            raise ConfigurationError(
                f"{which} dim {f.shape[1]} != projection input {proj.in_features}"
            )
        return proj(f)

    def fuse_tensors(self, f_c: torch.Tensor, f_d: torch.Tensor) -> FusionTrace:
        if f_c.shape[0] != f_d.shape[0]:
            raise ValueError("content/dynamic windows must have equal length")
        f_c1 = self.project_tensor(f_c, "content")
        f_d1 = self.project_tensor(f_d, "dynamic")
        f_c2, a_c = self.cdca_content(f_c1, f_d1)
        f_d2, a_d = self.cdca_dynamic(f_d1, f_c1)
        f_c3 = self.fsr_content(f_c1 + f_c2)
        f_d3 = self.fsr_dynamic(f_d1 + f_d2)
        center = f_c.shape[0] // 2
        f_a = self.merge(torch.cat([f_c3[center], f_d3[center]]))
        return FusionTrace(f_c1, f_d1, f_c2, f_d2, f_c3, f_d3, f_a, a_c, a_d)

    def fuse_variant_tensors(self, f_c, f_d, mode: str) -> torch.Tensor:
        if mode not in MODES:
            raise ValueError(f"unknown fusion mode {mode!r}")
        if mode == "full":
            return self.fuse_tensors(f_c, f_d).f_a
        center = f_c.shape[0] // 2
        zero = torch.zeros(self.dim, dtype=f_c.dtype)
        if mode == "content_only":
            c = self.project_tensor(f_c, "content")[center]
            return self.merge(torch.cat([c, zero]))
        if mode == "dynamic_only":
            d = self.project_tensor(f_d, "dynamic")[center]
            return self.merge(torch.cat([zero, d]))
        f_c1 = self.project_tensor(f_c, "content")
        f_d1 = self.project_tensor(f_d, "dynamic")
        if mode == "concat":
            return self.merge(torch.cat([f_c1[center], f_d1[center]]))
        f_c2, _ = self.cdca_content(f_c1, f_d1)
        f_d2, _ = self.cdca_dynamic(f_d1, f_c1)
        return self.merge(torch.cat([f_c2[center], f_d2[center]]))


def _to_tensor(f: FeatureSeq, dtype=torch.float32) -> torch.Tensor:
    return torch.as_tensor(f.values, dtype=dtype)


def project(f: FeatureSeq, which: str, w: CrossSyncFusion) -> FeatureSeq:
    """Affine per-step projection of a stream into the shared width."""
    with torch.no_grad():
        out = w.project_tensor(_to_tensor(f), which)
    return FeatureSeq(out.numpy(), f.frame_rate, "projected")


def cdca(qk_seq: FeatureSeq, v_seq: FeatureSeq, w: CrossSyncFusion, side: str):
    """One cross-attention block; returns (output FeatureSeq, attention [W, W])."""
    if len(qk_seq) != len(v_seq):
        raise ValueError("sequence lengths differ")
    block = {"content": w.cdca_content, "dynamic": w.cdca_dynamic}[side]
    with torch.no_grad():
        out, attn = block(_to_tensor(qk_seq), _to_tensor(v_seq))
    return FeatureSeq(out.numpy(), qk_seq.frame_rate, "projected"), attn.numpy()


def fsr(seq: FeatureSeq, w: CrossSyncFusion, side: str) -> FeatureSeq:
    """Per-stream residual refinement."""
    block = {"content": w.fsr_content, "dynamic": w.fsr_dynamic}[side]
    with torch.no_grad():
        out = block(_to_tensor(seq))
    return FeatureSeq(out.numpy(), seq.frame_rate, "refined")


def fuse(f_c: FeatureSeq, f_d: FeatureSeq, w: CrossSyncFusion) -> FusionTrace:
    """Run the whole pipeline on one temporal window."""
    if len(f_c) != len(f_d):
        raise ValueError("window lengths differ")
    with torch.no_grad():
        return w.fuse_tensors(_to_tensor(f_c), _to_tensor(f_d))


def fuse_variant(f_c: FeatureSeq, f_d: FeatureSeq, w: CrossSyncFusion, mode: str):
    """Ablation variants of the fusion pipeline; returns the condition vector."""
    if len(f_c) != len(f_d):
        raise ValueError("window lengths differ")
    with torch.no_grad():
        return w.fuse_variant_tensors(_to_tensor(f_c), _to_tensor(f_d), mode).numpy()


def save_fusion(path, w: CrossSyncFusion) -> None:
    records = {k: v.detach().numpy().astype(np.float32) for k, v in w.state_dict().items()}
    meta = {
        "content_dim": w.content_dim, "dynamic_dim": w.dynamic_dim,
        "dim": w.dim, "out_dim": w.out_dim,
        "n_heads": w.cdca_content.n_heads, "qk_split": w.cdca_content.qk_split,
    }
    dfb.write_archive(path, records, meta=meta)


def load_fusion(path) -> CrossSyncFusion:
    records, meta = dfb.read_archive(path)
    w = CrossSyncFusion(
        content_dim=meta["content_dim"], dynamic_dim=meta["dynamic_dim"],
        dim=meta["dim"], out_dim=meta["out_dim"],
        n_heads=meta["n_heads"], qk_split=meta["qk_split"],
    )
    w.load_state_dict({k: torch.from_numpy(v) for k, v in records.items()})
    return w
