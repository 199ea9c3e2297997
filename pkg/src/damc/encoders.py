"""Content and dynamic audio encoders, the cosine sync discriminator, and the
sync-supervised pretraining of the dynamic encoder."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import dfb
from .audio import AlignedWindows
from .errors import ConfigurationError, DatasetError, FormatError
from .features import FeatureSeq

# fixed affine that brings log-mel values (floor log(1e-5) ~ -11.5) to O(1)
MEL_SHIFT = 11.5
MEL_SCALE = 0.1


class ContentEncoder(nn.Module):
    """Pseudo-phoneme logits from a waveform window.

    Strided 1-D convolutions over the (loudness-normalized) window, mean-pooled
    and mapped to one logit per phone-like class. Per-window RMS normalization
    keeps the features about linguistic content rather than level.
    """

    def __init__(self, window: int = 3200, out_dim: int = 44, seed: int = 0):
        super().__init__()
        self.window = window
        self.out_dim = out_dim
        self.seed = seed
        torch.manual_seed(seed)
        self.convs = nn.Sequential(
            nn.Conv1d(1, 16, kernel_size=16, stride=8), nn.ReLU(),
            nn.Conv1d(16, 32, kernel_size=15, stride=8), nn.ReLU(),
            nn.Conv1d(32, 64, kernel_size=9, stride=8), nn.ReLU(),
        )
        self.head = nn.Linear(64, out_dim)

    def forward(self, wave: torch.Tensor) -> torch.Tensor:
        """wave: [B, window] -> logits [B, out_dim]."""
        if wave.shape[1] != self.window:
            raise ConfigurationError(
                f"window {wave.shape[1]} != configured {self.window}"
            )
        rms = wave.pow(2).mean(dim=1, keepdim=True).sqrt()
        x = wave / (rms + 1e-6)
        h = self.convs(x[:, None, :]).mean(dim=2)
        return self.head(h)


class DynamicEncoder(nn.Module):
    """Unit-norm sync embedding of one mel window."""

    def __init__(self, w_mel: int = 16, n_mels: int = 80, out_dim: int = 512, seed: int = 0):
        super().__init__()
        self.w_mel = w_mel
        self.n_mels = n_mels
        self.out_dim = out_dim
        self.seed = seed
        torch.manual_seed(seed)
        self.convs = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.ReLU(),
            nn.Conv2d(32, 64, 3, stride=2, padding=1), nn.ReLU(),
        )
        flat = 64 * (w_mel // 8) * (n_mels // 8)
        self.head = nn.Linear(flat, out_dim)

    def forward(self, mel: torch.Tensor) -> torch.Tensor:
        """mel: [B, w_mel, n_mels] log values -> unit-norm [B, out_dim]."""
        if mel.shape[1:] != (self.w_mel, self.n_mels):
            raise ConfigurationError(
                f"mel window {tuple(mel.shape[1:])} != configured "
                f"({self.w_mel}, {self.n_mels})"
            )
        x = (mel + MEL_SHIFT) * MEL_SCALE
        h = self.convs(x[:, None, :, :]).flatten(1)
        return F.normalize(self.head(h), dim=1)


class VisualEncoder(nn.Module):
    """Unit-norm embedding of a mouth-aperture trajectory window."""

    def __init__(self, w_vis: int = 16, out_dim: int = 512, seed: int = 100):
        super().__init__()
        self.w_vis = w_vis
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(w_vis, 64), nn.ReLU(), nn.Linear(64, out_dim)
        )

    def forward(self, ap: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.net(ap), dim=1)


class ApertureDecoder(nn.Module):
    """Reconstructs the (standardized) aperture window from an audio embedding."""

    def __init__(self, in_dim: int = 512, w_vis: int = 16, seed: int = 200):
        super().__init__()
        torch.manual_seed(seed)
        self.net = nn.Sequential(
            nn.Linear(in_dim, 64), nn.ReLU(), nn.Linear(64, w_vis)
        )

    def forward(self, emb: torch.Tensor) -> torch.Tensor:
        return self.net(emb)


def content_encode(windows: AlignedWindows, enc: ContentEncoder) -> FeatureSeq:
    with torch.no_grad():
        out = enc(torch.as_tensor(windows.wave_windows))
    return FeatureSeq(out.numpy(), windows.fps, "content")


def dynamic_encode(windows: AlignedWindows, enc: DynamicEncoder) -> FeatureSeq:
    with torch.no_grad():
        out = enc(torch.as_tensor(windows.mel_windows))
    return FeatureSeq(out.numpy(), windows.fps, "dynamic")


def load_external_content_features(path, target_rate: float = 25.0) -> FeatureSeq:
    """Load a DFB1 feature file and linearly resample its time axis."""
    arr, header = dfb.read_array(path)
    if header.get("kind") != "feat":
        raise FormatError(f"expected kind 'feat', got {header.get('kind')!r}")
    if arr.ndim != 2:
        raise FormatError(f"expected 2-D features, got shape {list(arr.shape)}")
    src_rate = float(header.get("meta", {}).get("frame_rate", target_rate))
    if src_rate == target_rate:
        return FeatureSeq(arr, target_rate, "content")
    t_src = np.arange(arr.shape[0]) / src_rate
    n_out = max(int(np.floor(t_src[-1] * target_rate)) + 1, 1)
    t_out = np.arange(n_out) / target_rate
    out = np.stack(
        [np.interp(t_out, t_src, arr[:, j]) for j in range(arr.shape[1])], axis=1
    )
    return FeatureSeq(out.astype(np.float32), target_rate, "content")


def sync_score(audio_emb, visual_emb) -> float:
    """(1 + cosine) / 2 of two unit-norm embeddings; 1 = aligned, 0 = antipodal."""
    a = np.asarray(audio_emb, dtype=np.float64)
    v = np.asarray(visual_emb, dtype=np.float64)
    if a.shape != v.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {v.shape}")
    return float((1.0 + a @ v) / 2.0)


@dataclass
class SyncPair:
    mel_window: np.ndarray   # [W_mel, n_mels]
    aperture_window: np.ndarray  # [W_vis]
    aligned: bool
    shift_frames: int = 0


def make_sync_pairs(
    windows: AlignedWindows,
    aperture: np.ndarray,
    w_vis: int = 16,
    min_shift: int = 5,
    max_shift: int = 25,
    seed: int = 0,
) -> list[SyncPair]:
    """One aligned and one shifted pair per usable video frame."""
    rng = np.random.default_rng(seed)
    aperture = np.asarray(aperture, dtype=np.float32)
    n = min(windows.n_frames, len(aperture))
    half = w_vis // 2
    pairs = []
    for i in range(half + max_shift, n - half - max_shift):
        ap_win = aperture[i - half : i - half + w_vis]
        pairs.append(SyncPair(windows.mel_windows[i], ap_win, True, 0))
        shift = int(rng.integers(min_shift, max_shift + 1)) * (
            1 if rng.random() < 0.5 else -1
        )
        j = i + shift
        ap_shifted = aperture[j - half : j - half + w_vis]
        pairs.append(SyncPair(windows.mel_windows[i], ap_shifted, False, shift))
    return pairs


@dataclass
class SyncPretrainConfig:
    iters: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    sync_weight: float = 1.0
    recon_weight: float = 1.0
    holdout_fraction: float = 0.2
    w_vis: int = 16
    embed_dim: int = 512


@dataclass
class SyncPretrainResult:
    encoder: DynamicEncoder
    visual_encoder: VisualEncoder
    decoder: ApertureDecoder
    log: list = field(default_factory=list)
    aperture_mean: float = 0.0
    aperture_std: float = 1.0
    holdout: list = field(default_factory=list)


def _scores(enc, venc, pairs) -> np.ndarray:
    with torch.no_grad():
        mel = torch.as_tensor(np.stack([p.mel_window for p in pairs]))
        ap = torch.as_tensor(np.stack([p.aperture_window for p in pairs]))
        a = enc(mel)
        v = venc(ap)
        return ((1.0 + (a * v).sum(dim=1)) / 2.0).numpy()


def roc_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Rank-based AUC (probability a positive outscores a negative)."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    ranks[order] = np.arange(1, len(scores) + 1)
    pos = labels.astype(bool)
    n_pos, n_neg = pos.sum(), (~pos).sum()
    if n_pos == 0 or n_neg == 0:
        raise DatasetError("AUC needs both classes")
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def pretrain_dynamic_encoder(
    pairs: list[SyncPair], cfg: SyncPretrainConfig | None = None
) -> SyncPretrainResult:
    """Jointly train the dynamic encoder, a small visual encoder, and an
    aperture decoder with reconstruction (MSE) + sync (BCE on the cosine
    score) losses. Returns the trained weights and a per-step loss log."""
    cfg = cfg or SyncPretrainConfig()
    labels = np.array([p.aligned for p in pairs])
    if labels.all() or not labels.any():
        raise DatasetError("sync pretraining needs both aligned and shifted pairs")

    rng = np.random.default_rng(cfg.seed)
    order = rng.permutation(len(pairs))
    n_hold = max(int(len(pairs) * cfg.holdout_fraction), 2)
    hold_idx, train_idx = order[:n_hold], order[n_hold:]
    train_pairs = [pairs[i] for i in train_idx]
    hold_pairs = [pairs[i] for i in hold_idx]

    sample = pairs[0]
    w_mel, n_mels = sample.mel_window.shape
    enc = DynamicEncoder(w_mel, n_mels, cfg.embed_dim, seed=cfg.seed)
    venc = VisualEncoder(cfg.w_vis, cfg.embed_dim, seed=cfg.seed + 100)
    dec = ApertureDecoder(cfg.embed_dim, cfg.w_vis, seed=cfg.seed + 200)

    ap_all = np.stack([p.aperture_window for p in train_pairs])
    ap_mean = float(ap_all.mean())
    ap_std = float(ap_all.std() + 1e-8)

    result = SyncPretrainResult(
        encoder=enc, visual_encoder=venc, decoder=dec,
        aperture_mean=ap_mean, aperture_std=ap_std, holdout=hold_pairs,
    )
    if cfg.iters == 0:
        return result

    opt = torch.optim.Adam(
        list(enc.parameters()) + list(venc.parameters()) + list(dec.parameters()),
        lr=cfg.lr,
    )
    torch.manual_seed(cfg.seed)
    mel_train = torch.as_tensor(np.stack([p.mel_window for p in train_pairs]))
    ap_train = torch.as_tensor(np.stack([p.aperture_window for p in train_pairs]))
    lbl_train = torch.as_tensor(labels[train_idx].astype(np.float32))
    ap_norm = (ap_train - ap_mean) / ap_std
    aligned_mask = lbl_train.bool()

    for step in range(cfg.iters):
        idx = torch.as_tensor(
            rng.choice(len(train_pairs), size=min(cfg.batch_size, len(train_pairs)),
                       replace=False)
        )
        mel_b, ap_b, lbl_b = mel_train[idx], ap_norm[idx], lbl_train[idx]
        a_emb = enc(mel_b)
        v_emb = venc(ap_b)
        score = ((1.0 + (a_emb * v_emb).sum(dim=1)) / 2.0).clamp(1e-6, 1 - 1e-6)
        sync_loss = F.binary_cross_entropy(score, lbl_b)
        # reconstruction only against the aligned trajectory of each window
        al = aligned_mask[idx]
        if al.any():
            recon = dec(a_emb[al])
            recon_loss = F.mse_loss(recon, ap_b[al])
        else:
            recon_loss = torch.zeros(())
        loss = cfg.sync_weight * sync_loss + cfg.recon_weight * recon_loss
        opt.zero_grad()
        loss.backward()
        opt.step()
        result.log.append(
            {
                "step": step,
                "sync_loss": float(sync_loss.detach()),
                "recon_loss": float(recon_loss.detach()),
            }
        )
    return result


def evaluate_sync(result: SyncPretrainResult, pairs: list[SyncPair] | None = None) -> dict:
    """Held-out AUC and aligned/shifted score separation."""
    pairs = pairs if pairs is not None else result.holdout
    labels = np.array([p.aligned for p in pairs])
    norm = [
        SyncPair(
            p.mel_window,
            ((p.aperture_window - result.aperture_mean) / result.aperture_std).astype(
                np.float32
            ),
            p.aligned, p.shift_frames,
        )
        for p in pairs
    ]
    scores = _scores(result.encoder, result.visual_encoder, norm)
    return {
        "auc": roc_auc(scores, labels),
        "separation": float(scores[labels].mean() - scores[~labels].mean()),
        "mean_aligned": float(scores[labels].mean()),
        "mean_shifted": float(scores[~labels].mean()),
    }


def _save_module(path, module: nn.Module, meta: dict) -> None:
    records = {
        k: v.detach().numpy().astype(np.float32) for k, v in module.state_dict().items()
    }
    dfb.write_archive(path, records, meta=meta)


def save_content_encoder(path, enc: ContentEncoder) -> None:
    _save_module(path, enc, {
        "arch": "content", "window": enc.window, "out_dim": enc.out_dim, "seed": enc.seed,
    })


def load_content_encoder(path) -> ContentEncoder:
    records, meta = dfb.read_archive(path)
    if meta.get("arch") != "content":
        raise ConfigurationError("not a content encoder archive")
    enc = ContentEncoder(meta["window"], meta["out_dim"], seed=meta["seed"])
    enc.load_state_dict({k: torch.from_numpy(v) for k, v in records.items()})
    return enc


def save_sync_result(path, result: SyncPretrainResult) -> None:
    records = {}
    for prefix, module in (
        ("encoder", result.encoder),
        ("visual", result.visual_encoder),
        ("decoder", result.decoder),
    ):
        for k, v in module.state_dict().items():
            records[f"{prefix}.{k}"] = v.detach().numpy().astype(np.float32)
    meta = {
        "arch": "dynamic_sync",
        "w_mel": result.encoder.w_mel,
        "n_mels": result.encoder.n_mels,
        "out_dim": result.encoder.out_dim,
        "seed": result.encoder.seed,
        "w_vis": result.visual_encoder.w_vis,
        "aperture_mean": result.aperture_mean,
        "aperture_std": result.aperture_std,
    }
    dfb.write_archive(path, records, meta=meta)


def load_sync_result(path) -> SyncPretrainResult:
    records, meta = dfb.read_archive(path)
    if meta.get("arch") != "dynamic_sync":
        raise ConfigurationError("not a dynamic encoder archive")
    enc = DynamicEncoder(meta["w_mel"], meta["n_mels"], meta["out_dim"], seed=meta["seed"])
    venc = VisualEncoder(meta["w_vis"], meta["out_dim"])
    dec = ApertureDecoder(meta["out_dim"], meta["w_vis"])
    for prefix, module in (("encoder", enc), ("visual", venc), ("decoder", dec)):
        state = {
            k[len(prefix) + 1 :]: torch.from_numpy(v)
            for k, v in records.items()
            if k.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    return SyncPretrainResult(
        encoder=enc, visual_encoder=venc, decoder=dec,
        aperture_mean=meta["aperture_mean"], aperture_std=meta["aperture_std"],
    )
