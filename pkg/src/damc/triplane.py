"""Multiresolution 2-D hash grids on three orthogonal planes and the
audio-conditioned radiance head."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from . import dfb
from .errors import ConfigurationError

HASH_P1 = 1
HASH_P2 = 2654435761


class HashGrid2D(nn.Module):
    """One plane: L levels of bilinear features stored in fixed-size hash tables.

    Vertex (i, j) of level l indexes slot (i * p1 XOR j * p2) mod T. Queries
    are clamped to [-1, 1]^2.
    """

    def __init__(
        self,
        n_levels: int = 14,
        n_features: int = 1,
        table_size: int = 2**14,
        base_resolution: int = 16,
        growth: float | None = None,
        finest_resolution: int = 512,
        seed: int = 0,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.table_size = table_size
        self.base_resolution = base_resolution
        if growth is None:
            if n_levels > 1:
                growth = (finest_resolution / base_resolution) ** (1.0 / (n_levels - 1))
            else:
                growth = 1.0
        self.growth = growth
        self.resolutions = [
            int(np.floor(base_resolution * growth**l)) for l in range(n_levels)
        ]
        gen = torch.Generator().manual_seed(seed)
        init = (torch.rand((n_levels, table_size, n_features), generator=gen) * 2 - 1) * 1e-4
        self.tables = nn.Parameter(init)
        self.collision_counts = [self._count_collisions(n) for n in self.resolutions]

    def _count_collisions(self, res: int) -> int:
        i = torch.arange(res + 1, dtype=torch.int64)
        ii, jj = torch.meshgrid(i, i, indexing="ij")
        slots = ((ii * HASH_P1) ^ (jj * HASH_P2)) % self.table_size
        return int((res + 1) ** 2 - len(torch.unique(slots)))

    def forward(self, uv: torch.Tensor) -> torch.Tensor:
        """uv: [N, 2] in [-1, 1] (clamped). Returns [N, L*F]."""
        uv = uv.clamp(-1.0, 1.0)
        s01 = (uv + 1.0) / 2.0
        out = []
        for l, res in enumerate(self.resolutions):
            s = s01 * res
            i0 = torch.clamp(s.floor().to(torch.int64), max=res - 1)
            frac = s - i0.to(s.dtype)
            i1 = i0 + 1
            f = []
            for (iu, iv) in ((i0[:, 0], i0[:, 1]), (i0[:, 0], i1[:, 1]),
                             (i1[:, 0], i0[:, 1]), (i1[:, 0], i1[:, 1])):
                slot = ((iu * HASH_P1) ^ (iv * HASH_P2)) % self.table_size
                f.append(self.tables[l][slot])
            fu, fv = frac[:, 0:1], frac[:, 1:2]
            interp = (
                f[0] * (1 - fu) * (1 - fv)
                + f[1] * (1 - fu) * fv
                + f[2] * fu * (1 - fv)
                + f[3] * fu * fv
            )
            out.append(interp)
        return torch.cat(out, dim=1)


def hash2d(grid: HashGrid2D, u: float, v: float) -> np.ndarray:
    """Single-point query; returns the concatenated per-level feature vector."""
    with torch.no_grad():
        out = grid(torch.tensor([[u, v]], dtype=grid.tables.dtype))
    return out[0].numpy()


def frequency_encode(d: torch.Tensor, n_bands: int = 4) -> torch.Tensor:
    """sin/cos frequency encoding of a direction; [N, 3 + 6*n_bands]."""
    out = [d]
    for k in range(n_bands):
        out.append(torch.sin((2.0**k) * np.pi * d))
        out.append(torch.cos((2.0**k) * np.pi * d))
    return torch.cat(out, dim=1)


class TriPlaneField(nn.Module):
    """Three shared-geometry hash planes plus a small radiance head.

    Density is predicted from the plane features and the audio condition only;
    the viewing direction enters the color branch alone.
    """

    def __init__(
        self,
        n_levels: int = 14,
        n_features: int = 1,
        table_size: int = 2**14,
        base_resolution: int = 16,
        finest_resolution: int = 512,
        growth: float | None = None,
        cond_dim: int = 64,
        hidden_dim: int = 64,
        dir_bands: int = 4,
        seed: int = 0,
    ):
        super().__init__()
        self.n_levels = n_levels
        self.n_features = n_features
        self.cond_dim = cond_dim
        self.dir_bands = dir_bands
        kw = dict(
            n_levels=n_levels, n_features=n_features, table_size=table_size,
            base_resolution=base_resolution, finest_resolution=finest_resolution,
            growth=growth,
        )
        torch.manual_seed(seed)
        self.plane_xy = HashGrid2D(seed=seed, **kw)
        self.plane_yz = HashGrid2D(seed=seed + 1, **kw)
        self.plane_xz = HashGrid2D(seed=seed + 2, **kw)
        feat_dim = 3 * n_levels * n_features
        dir_dim = 3 + 6 * dir_bands
        self.trunk = nn.Sequential(
            nn.Linear(feat_dim + cond_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
        )
        self.sigma_head = nn.Linear(hidden_dim, 1)
        self.color_net = nn.Sequential(
            nn.Linear(hidden_dim + dir_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, 3),
        )

    @property
    def feature_dim(self) -> int:
        return 3 * self.n_levels * self.n_features

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """Concatenated plane features in the fixed order XY, YZ, XZ."""
        return torch.cat(
            [
                self.plane_xy(x[:, [0, 1]]),
                self.plane_yz(x[:, [1, 2]]),
                self.plane_xz(x[:, [0, 2]]),
            ],
            dim=1,
        )

    def forward(
        self, x: torch.Tensor, d: torch.Tensor, cond: torch.Tensor | None
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """(positions [N,3], unit directions [N,3], condition [cond_dim])
        -> (color [N,3] in [0,1], sigma [N] >= 0)."""
        norms = d.norm(dim=1)
        if ((norms - 1.0).abs() > 1e-4).any():
            raise ValueError("directions must be unit-norm")
        f_g = self.encode(x)
        if cond is None:
            cond = torch.zeros(self.cond_dim, dtype=x.dtype, device=x.device)
        if cond.dim() == 1:
            cond = cond[None, :].expand(x.shape[0], -1)
        if cond.shape[1] != self.cond_dim:
            raise ConfigurationError(
                f"condition dim {cond.shape[1]} != configured {self.cond_dim}"
            )
        h = self.trunk(torch.cat([f_g, cond], dim=1))
        sigma = torch.nn.functional.softplus(self.sigma_head(h)[:, 0])
        color = torch.sigmoid(
            self.color_net(torch.cat([h, frequency_encode(d, self.dir_bands)], dim=1))
        )
        return color, sigma

    def hyperparams(self) -> dict:
        return {
            "n_levels": self.n_levels,
            "n_features": self.n_features,
            "table_size": self.plane_xy.table_size,
            "base_resolution": self.plane_xy.base_resolution,
            "growth": self.plane_xy.growth,
            "cond_dim": self.cond_dim,
            "hidden_dim": self.trunk[0].out_features,
            "dir_bands": self.dir_bands,
        }

    def collision_stats(self) -> dict:
        """Per-level hash collision counts for each plane (debug info)."""
        return {
            "xy": self.plane_xy.collision_counts,
            "yz": self.plane_yz.collision_counts,
            "xz": self.plane_xz.collision_counts,
        }


def triplane_encode(field: TriPlaneField, x) -> np.ndarray:
    """Encode one position; returns f_g of length 3*L*F."""
    with torch.no_grad():
        pt = torch.as_tensor(x, dtype=field.plane_xy.tables.dtype).reshape(1, 3)
        return field.encode(pt)[0].numpy()


def radiance_query(field: TriPlaneField, x, d, cond) -> tuple[np.ndarray, float]:
    """Query one (position, direction, condition); returns (rgb, sigma)."""
    dt = field.plane_xy.tables.dtype
    with torch.no_grad():
        c, s = field(
            torch.as_tensor(x, dtype=dt).reshape(1, 3),
            torch.as_tensor(d, dtype=dt).reshape(1, 3),
            None if cond is None else torch.as_tensor(cond, dtype=dt),
        )
    return c[0].numpy(), float(s[0])


def save_field(path, field: TriPlaneField) -> None:
    records = {k: v.detach().numpy().astype(np.float32) for k, v in field.state_dict().items()}
    dfb.write_archive(path, records, meta={"hyperparams": field.hyperparams()})


def load_field(path) -> TriPlaneField:
    records, meta = dfb.read_archive(path)
    hp = meta.get("hyperparams")
    if hp is None:
        raise ConfigurationError("field archive missing hyperparameters")
    field = TriPlaneField(
        n_levels=hp["n_levels"], n_features=hp["n_features"],
        table_size=hp["table_size"], base_resolution=hp["base_resolution"],
        growth=hp["growth"], cond_dim=hp["cond_dim"], hidden_dim=hp["hidden_dim"],
        dir_bands=hp["dir_bands"],
    )
    state = {k: torch.from_numpy(v) for k, v in records.items()}
    field.load_state_dict(state)
    return field
