"""Two-stage optimization of the audio-conditioned field: coarse ray MSE,
then patch MSE plus a gradient-structure perceptual surrogate."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np
import torch
import torch.nn.functional as F

from . import dfb
from .audio import MelParams, align_windows, compute_mel
from .config import config_hash
from .csfm import MODES, CrossSyncFusion
from .encoders import ContentEncoder, DynamicEncoder
from .errors import ConfigurationError, DatasetError
from .render import RenderedFrame, generate_rays, render_rays, sample_stratified
from .scene import GroundTruthBundle, holdout_indices
from .triplane import TriPlaneField


@dataclass
class TrainConfig:
    stage1_iters: int = 2000
    stage2_iters: int = 500
    rays_per_iter: int = 1024
    patch_size: int = 32
    perceptual_weight: float = 0.01
    lr_grids: float = 1e-2
    lr_networks: float = 5e-4
    betas: tuple = (0.9, 0.99)
    eps_grids: float = 1e-15
    seed: int = 0
    fusion_mode: str = "full"
    window: int = 16
    n_samples: int = 64
    n_levels: int = 14
    table_size: int = 2**14
    finest_resolution: int = 512
    cond_dim: int = 64
    hidden_dim: int = 64
    holdout_every: int = 8
    log_every: int = 10

    def __post_init__(self):
        if min(self.stage1_iters, self.stage2_iters) < 0 or self.rays_per_iter <= 0:
            raise ConfigurationError("iteration and ray counts must be non-negative")
        if self.perceptual_weight < 0:
            raise ConfigurationError("perceptual weight must be >= 0")
        if self.patch_size**2 > self.rays_per_iter:
            raise ConfigurationError("patch_size^2 must not exceed rays_per_iter")
        if self.fusion_mode not in MODES:
            raise ConfigurationError(f"unknown fusion mode {self.fusion_mode!r}")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


def coarse_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean squared error over rays and channels."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).mean()


def perceptual_surrogate(p: torch.Tensor, q: torch.Tensor) -> torch.Tensor:
    """Multi-scale gradient-structure distance between two [k, k, 3] patches.

    Mean squared difference of horizontal and vertical finite-difference
    images at three dyadic scales. Invariant to a constant intensity shift."""
    p = torch.as_tensor(p)
    q = torch.as_tensor(q)
    if p.shape != q.shape:
        raise ValueError("patch shapes differ")
    k = p.shape[0]
    if k < 8:
        raise ValueError("patch side must be at least 8")
    total = p.new_zeros(())
    pc = p.permute(2, 0, 1)[None]  # [1, 3, k, k]
    qc = q.permute(2, 0, 1)[None]
    for scale in range(3):
        if scale > 0:
            pc = F.avg_pool2d(pc, 2)
            qc = F.avg_pool2d(qc, 2)
        dpx = pc[..., :, 1:] - pc[..., :, :-1]
        dqx = qc[..., :, 1:] - qc[..., :, :-1]
        dpy = pc[..., 1:, :] - pc[..., :-1, :]
        dqy = qc[..., 1:, :] - qc[..., :-1, :]
        total = total + ((dpx - dqx) ** 2).mean() + ((dpy - dqy) ** 2).mean()
    return total / 6.0


def fine_loss(pred_patch, gt_patch, weight: float) -> torch.Tensor:
    pred_patch = torch.as_tensor(pred_patch)
    gt_patch = torch.as_tensor(gt_patch)
    if pred_patch.shape != gt_patch.shape:
        raise ValueError("patch shapes differ")
    mse = ((pred_patch - gt_patch) ** 2).mean()
    return mse + weight * perceptual_surrogate(pred_patch, gt_patch)


@dataclass
class TrainData:
    frames: torch.Tensor  # [N, H, W, 3] float32
    cameras: list
    f_c: torch.Tensor     # [N, content_dim]
    f_d: torch.Tensor     # [N, dynamic_dim]
    train_idx: list
    holdout_idx: list
    envelope: np.ndarray
    aperture: np.ndarray
    fps: float


def prepare_training_data(
    bundle: GroundTruthBundle,
    content_enc: ContentEncoder,
    dynamic_enc: DynamicEncoder,
    mel_cfg: MelParams | None = None,
    holdout_every: int = 8,
) -> TrainData:
    """Precompute frozen per-frame audio features and the train/holdout split."""
    mel_cfg = mel_cfg or MelParams()
    n = bundle.n_frames
    min_samples = int((n - 1) / bundle.spec.fps * mel_cfg.sample_rate)
    if len(bundle.audio.samples) < min_samples:
        raise DatasetError("audio shorter than the video it should drive")
    mel = compute_mel(bundle.audio, mel_cfg)
    windows = align_windows(bundle.audio, mel, bundle.spec.fps, n_frames=n)
    with torch.no_grad():
        f_c = content_enc(torch.as_tensor(windows.wave_windows))
        f_d = dynamic_enc(torch.as_tensor(windows.mel_windows))
    hold = holdout_indices(n, holdout_every)
    train = [i for i in range(n) if i not in set(hold)]
    return TrainData(
        frames=torch.as_tensor(bundle.frames),
        cameras=list(bundle.cameras),
        f_c=f_c, f_d=f_d,
        train_idx=train, holdout_idx=hold,
        envelope=np.asarray(bundle.envelope),
        aperture=np.asarray(bundle.aperture),
        fps=bundle.spec.fps,
    )


def window_indices(t: int, n: int, window: int) -> np.ndarray:
    """Edge-clamped index window of the given length centered on frame t."""
    return np.clip(np.arange(t - window // 2, t - window // 2 + window), 0, n - 1)


def frame_condition(
    fusion: CrossSyncFusion, data: TrainData, t: int, window: int, mode: str
) -> torch.Tensor:
    idx = window_indices(t, data.f_c.shape[0], window)
    return fusion.fuse_variant_tensors(data.f_c[idx], data.f_d[idx], mode)


@dataclass
class Checkpoint:
    field: TriPlaneField
    fusion: CrossSyncFusion
    iteration: int = 0
    config: dict = dc_field(default_factory=dict)
    log: list = dc_field(default_factory=list)
    optimizer_state: dict | None = None

    @property
    def config_hash(self) -> str:
        return config_hash(self.config)


def init_checkpoint(cfg: TrainConfig) -> Checkpoint:
    fld = TriPlaneField(
        n_levels=cfg.n_levels, table_size=cfg.table_size,
        finest_resolution=cfg.finest_resolution, cond_dim=cfg.cond_dim,
        hidden_dim=cfg.hidden_dim, seed=cfg.seed,
    )
    fusion = CrossSyncFusion(out_dim=cfg.cond_dim, seed=cfg.seed)
    return Checkpoint(field=fld, fusion=fusion, config=cfg.to_dict())


def _make_optimizer(cfg: TrainConfig, fld: TriPlaneField, fusion: CrossSyncFusion):
    grid_params, net_params = [], []
    for name, p in fld.named_parameters():
        (grid_params if "tables" in name else net_params).append(p)
    net_params += list(fusion.parameters())
    return torch.optim.Adam(
        [
            {"params": grid_params, "lr": cfg.lr_grids, "eps": cfg.eps_grids},
            {"params": net_params, "lr": cfg.lr_networks},
        ],
        betas=tuple(cfg.betas),
    )


def train_stage(
    stage: str,
    cfg: TrainConfig,
    data: TrainData,
    ckpt_in: Checkpoint | None = None,
    progress=None,
) -> Checkpoint:
    """Run one optimization stage; encoders stay frozen, the fusion module and
    the field train jointly. Deterministic under the config seed."""
    if stage not in ("coarse", "fine"):
        raise ValueError(f"unknown stage {stage!r}")
    ckpt = ckpt_in if ckpt_in is not None else init_checkpoint(cfg)
    fld, fusion = ckpt.field, ckpt.fusion
    iters = cfg.stage1_iters if stage == "coarse" else cfg.stage2_iters
    if iters == 0:
        return ckpt
    opt = _make_optimizer(cfg, fld, fusion)
    rng = np.random.default_rng(cfg.seed + (0 if stage == "coarse" else 1_000_000))
    torch.manual_seed(cfg.seed)
    n, h, w = data.frames.shape[0], data.frames.shape[1], data.frames.shape[2]
    k = cfg.patch_size
    for it in range(iters):
        t = int(data.train_idx[rng.integers(len(data.train_idx))])
        cond = frame_condition(fusion, data, t, cfg.window, cfg.fusion_mode)
        cam = data.cameras[t]
        if stage == "coarse":
            flat = rng.choice(h * w, size=cfg.rays_per_iter, replace=False)
            pix = np.stack([flat // w, flat % w], axis=1)
        else:
            r0 = int(rng.integers(0, h - k + 1))
            c0 = int(rng.integers(0, w - k + 1))
            rr, cc = np.meshgrid(np.arange(r0, r0 + k), np.arange(c0, c0 + k),
                                 indexing="ij")
            pix = np.stack([rr.ravel(), cc.ravel()], axis=1)
        rays = generate_rays(cam, pixels=pix)
        sample_stratified(rays, cfg.n_samples)
        rgb, _, _ = render_rays(fld, rays, cond, chunk=1 << 22)
        gt = data.frames[t][pix[:, 0], pix[:, 1]]
        if stage == "coarse":
            loss = coarse_loss(rgb, gt)
            mse = loss
            perc = torch.zeros(())
        else:
            pred_patch = rgb.reshape(k, k, 3)
            gt_patch = gt.reshape(k, k, 3)
            mse = ((pred_patch - gt_patch) ** 2).mean()
            perc = perceptual_surrogate(pred_patch, gt_patch)
            loss = mse + cfg.perceptual_weight * perc
        opt.zero_grad()
        loss.backward()
        opt.step()
        ckpt.iteration += 1
        if it % cfg.log_every == 0 or it == iters - 1:
            rec = {
                "stage": stage, "iter": ckpt.iteration,
                "loss": float(loss.detach()), "mse": float(mse.detach()),
                "perceptual": float(perc.detach()),
            }
            ckpt.log.append(rec)
            if progress is not None:
                progress(rec)
    ckpt.optimizer_state = {"stage": stage, "steps": iters}
    return ckpt


def render_checkpoint(
    ckpt: Checkpoint, data: TrainData, t: int,
    n_samples: int | None = None, mode: str | None = None, chunk: int = 1 << 22,
) -> RenderedFrame:
    """Render frame t with the checkpoint's field under its audio condition."""
    cfg = ckpt.config
    with torch.no_grad():
        cond = frame_condition(
            ckpt.fusion, data, t, cfg.get("window", 16),
            mode or cfg.get("fusion_mode", "full"),
        )
        cam = data.cameras[t]
        rays = generate_rays(cam)
        sample_stratified(rays, n_samples or cfg.get("n_samples", 64))
        rgb, opacity, depth = render_rays(ckpt.field, rays, cond, chunk=chunk)
    h, w = cam.height, cam.width
    return RenderedFrame(
        rgb=rgb.reshape(h, w, 3).numpy().astype(np.float32),
        opacity=opacity.reshape(h, w).numpy().astype(np.float32),
        depth=depth.reshape(h, w).numpy().astype(np.float32),
    )


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    records = {}
    for prefix, module in (("field", ckpt.field), ("fusion", ckpt.fusion)):
        for k, v in module.state_dict().items():
            records[f"{prefix}.{k}"] = v.detach().numpy().astype(np.float32)
    fld = ckpt.field
    meta = {
        "iteration": ckpt.iteration,
        "config": ckpt.config,
        "log": ckpt.log,
        "optimizer_state": ckpt.optimizer_state,
        "field_hparams": {
            "n_levels": fld.n_levels, "n_features": fld.n_features,
            "table_size": fld.plane_xy.table_size,
            "base_resolution": fld.plane_xy.base_resolution,
            "growth": fld.plane_xy.growth,
            "cond_dim": fld.cond_dim, "hidden_dim": fld.trunk[0].out_features,
            "dir_bands": fld.dir_bands,
        },
        "fusion_hparams": {
            "content_dim": ckpt.fusion.content_dim,
            "dynamic_dim": ckpt.fusion.dynamic_dim,
            "dim": ckpt.fusion.dim, "out_dim": ckpt.fusion.out_dim,
            "n_heads": ckpt.fusion.cdca_content.n_heads,
            "qk_split": ckpt.fusion.cdca_content.qk_split,
        },
    }
    dfb.write_archive(path, records, meta=meta)


def load_checkpoint(path) -> Checkpoint:
    records, meta = dfb.read_archive(path)
    fh = meta["field_hparams"]
    fld = TriPlaneField(
        n_levels=fh["n_levels"], n_features=fh["n_features"],
        table_size=fh["table_size"], base_resolution=fh["base_resolution"],
        growth=fh["growth"], cond_dim=fh["cond_dim"],
        hidden_dim=fh["hidden_dim"], dir_bands=fh["dir_bands"],
    )
    uh = meta["fusion_hparams"]
    fusion = CrossSyncFusion(
        content_dim=uh["content_dim"], dynamic_dim=uh["dynamic_dim"],
        dim=uh["dim"], out_dim=uh["out_dim"],
        n_heads=uh["n_heads"], qk_split=uh["qk_split"],
    )
    for prefix, module in (("field", fld), ("fusion", fusion)):
        state = {
            k[len(prefix) + 1 :]: torch.from_numpy(v)
            for k, v in records.items() if k.startswith(prefix + ".")
        }
        module.load_state_dict(state)
    return Checkpoint(
        field=fld, fusion=fusion, iteration=meta["iteration"],
        config=meta["config"], log=meta["log"],
        optimizer_state=meta.get("optimizer_state"),
    )
