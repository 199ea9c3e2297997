"""Camera rays, stratified sampling, and volumetric alpha compositing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class Camera:
    focal: float
    width: int
    height: int
    rotation: np.ndarray     # 3x3, camera-to-world
    translation: np.ndarray  # camera center in world coords
    near: float
    far: float
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.cx is None:
            self.cx = (self.width - 1) / 2.0
        if self.cy is None:
            self.cy = (self.height - 1) / 2.0
        err = np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3)))
        if err > 1e-6:
            raise ValueError(f"rotation not orthonormal (err {err:.2e})")
        if not (0.0 < self.near < self.far):
            raise ValueError("require 0 < near < far")

    def to_dict(self) -> dict:
        return {
            "focal": self.focal,
            "width": self.width,
            "height": self.height,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "near": self.near,
            "far": self.far,
            "cx": self.cx,
            "cy": self.cy,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            focal=d["focal"], width=d["width"], height=d["height"],
            rotation=np.array(d["rotation"]), translation=np.array(d["translation"]),
            near=d["near"], far=d["far"], cx=d.get("cx"), cy=d.get("cy"),
        )


@dataclass
class RayBatch:
    origins: torch.Tensor     # [N, 3]
    directions: torch.Tensor  # [N, 3] unit
    pixel_indices: torch.Tensor  # [N, 2] (row, col)
    near: float
    far: float
    t_vals: torch.Tensor | None = None  # [N, S]
    deltas: torch.Tensor | None = None  # [N, S]

    def __len__(self) -> int:
        return self.origins.shape[0]


@dataclass
class RenderedFrame:
    rgb: np.ndarray      # [H, W, 3] in [0, 1]
    opacity: np.ndarray  # [H, W]
    depth: np.ndarray | None = None


def generate_rays(cam: Camera, pixels="all", dtype=torch.float32) -> RayBatch:
    """Pinhole rays through pixel centers; y points down the image, camera
    looks along +z."""
    if isinstance(pixels, str) and pixels == "all":
        rows, cols = np.meshgrid(
            np.arange(cam.height), np.arange(cam.width), indexing="ij"
        )
        pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
    else:
        pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
        if (
            (pix[:, 0] < 0).any() or (pix[:, 0] >= cam.height).any()
            or (pix[:, 1] < 0).any() or (pix[:, 1] >= cam.width).any()
        ):
            raise ValueError("pixel index out of image")
    x = (pix[:, 1] - cam.cx) / cam.focal
    y = (pix[:, 0] - cam.cy) / cam.focal
    dirs_cam = np.stack([x, y, np.ones_like(x)], axis=1)
    dirs_world = dirs_cam @ cam.rotation.T
    dirs_world = dirs_world / np.linalg.norm(dirs_world, axis=1, keepdims=True)
    n = pix.shape[0]
    origins = np.broadcast_to(cam.translation, (n, 3)).copy()
    return RayBatch(
        origins=torch.as_tensor(origins, dtype=dtype),
        directions=torch.as_tensor(dirs_world, dtype=dtype),
        pixel_indices=torch.as_tensor(pix),
        near=cam.near,
        far=cam.far,
    )


def sample_stratified(
    rays: RayBatch, n_samples: int, jitter: bool = False, seed: int = 0
) -> RayBatch:
    """Fill per-ray sample depths: one sample per uniform bin of [near, far]."""
    if n_samples < 2:
        raise ValueError("need at least 2 samples per ray")
    n = len(rays)
    dtype = rays.origins.dtype
    edges = torch.linspace(rays.near, rays.far, n_samples + 1, dtype=dtype)
    lo, width = edges[:-1], edges[1] - edges[0]
    if jitter:
        gen = torch.Generator().manual_seed(seed)
        u = torch.rand((n, n_samples), generator=gen, dtype=dtype)
    else:
        u = torch.full((n, n_samples), 0.5, dtype=dtype)
    t = lo[None, :] + u * width
    deltas = torch.diff(t, dim=1)
    last = rays.far - t[:, -1:]
    rays.t_vals = t
    rays.deltas = torch.cat([deltas, last], dim=1)
    return rays


def composite(
    sigma: torch.Tensor, color: torch.Tensor, deltas: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Alpha-composite per-sample (sigma, color) along each ray.

    alpha_i = 1 - exp(-sigma_i * delta_i); T_i = prod_{j<i}(1 - alpha_j);
    weight_i = T_i * alpha_i. Returns (rgb [N,3], opacity [N], weights [N,S]).
    """
    if (sigma < 0).any():
        raise ValueError("negative density")
    alpha = 1.0 - torch.exp(-sigma * deltas)
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alpha[:, :1]), 1.0 - alpha[:, :-1]], dim=1), dim=1
    )
    weights = trans * alpha
    rgb = (weights[..., None] * color).sum(dim=1)
    opacity = weights.sum(dim=1)
    return rgb, opacity, weights


def render_rays(
    field, rays: RayBatch, cond: torch.Tensor | None, chunk: int = 65536
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Query the field at every sample and composite; returns (rgb, opacity, depth)."""
    n, s = rays.t_vals.shape
    pts = rays.origins[:, None, :] + rays.t_vals[..., None] * rays.directions[:, None, :]
    dirs = rays.directions[:, None, :].expand(n, s, 3)
    rgb_out, op_out, depth_out = [], [], []
    for start in range(0, n, max(chunk // s, 1)):
        end = min(start + max(chunk // s, 1), n)
        p = pts[start:end].reshape(-1, 3)
        d = dirs[start:end].reshape(-1, 3)
        c, sigma = field(p, d, cond)
        c = c.reshape(end - start, s, 3)
        sigma = sigma.reshape(end - start, s)
        rgb, opacity, weights = composite(sigma, c, rays.deltas[start:end])
        rgb_out.append(rgb)
        op_out.append(opacity)
        depth_out.append((weights * rays.t_vals[start:end]).sum(dim=1))
    return torch.cat(rgb_out), torch.cat(op_out), torch.cat(depth_out)


def render_frame(
    field,
    cam: Camera,
    cond: torch.Tensor | None = None,
    n_samples: int = 64,
    background=(0.0, 0.0, 0.0),
    jitter: bool = False,
    seed: int = 0,
    chunk: int = 65536,
) -> RenderedFrame:
    """Render a full image from any queryable field (x, d, cond) -> (c, sigma)."""
    rays = generate_rays(cam)
    sample_stratified(rays, n_samples, jitter=jitter, seed=seed)
    with torch.no_grad():
        rgb, opacity, depth = render_rays(field, rays, cond, chunk=chunk)
    bg = torch.as_tensor(background, dtype=rgb.dtype)
    rgb = rgb + (1.0 - opacity)[:, None] * bg[None, :]
    h, w = cam.height, cam.width
    return RenderedFrame(
        rgb=rgb.reshape(h, w, 3).numpy().astype(np.float32),
        opacity=opacity.reshape(h, w).numpy().astype(np.float32),
        depth=depth.reshape(h, w).numpy().astype(np.float32),
    )
