"""Analytic audio-driven test scene: an ellipsoid head whose mouth aperture
follows the audio envelope, color-keyed fiducial markers, ground-truth
rendering, and dataset export/import."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy.io import wavfile

from . import dfb
from .audio import Waveform
from .errors import DatasetError
from .render import Camera, RenderedFrame, render_frame


@dataclass
class Fiducial:
    name: str
    anchor: tuple  # (x, y, z), world units
    color: tuple   # key color, pure saturated RGB
    aperture_axis: float = 0.0  # lip markers ride the aperture along +-y
    radius: float | None = None  # None: use the spec-wide marker radius


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    fps: float = 25.0
    n_frames: int = 240
    head_axes: tuple = (0.5, 0.6, 0.5)
    head_center: tuple = (0.0, 0.0, 0.0)
    skin_color: tuple = (0.85, 0.65, 0.55)
    cavity_color: tuple = (0.04, 0.02, 0.02)
    sigma_head: float = 50.0
    sharpness: float = 15.0
    marker_sharpness: float = 80.0
    mouth_center: tuple = (0.0, 0.25, -0.42)
    mouth_half_width: float = 0.18
    mouth_depth: float = 0.15
    a_min: float = 0.02
    gain: float = 0.08
    lip_margin: float = 0.06
    marker_radius: float = 0.08
    fiducials: list = field(default_factory=list)
    camera_distance: float = 3.0
    orbit_degrees: float = 5.0
    focal: float = 110.0
    near: float = 1.5
    far: float = 4.5
    sample_rate: int = 16000
    carriers: tuple = (220.0, 440.0, 880.0)
    envelope: str = "random"  # random | zero | one

    @property
    def duration(self) -> float:
        return self.n_frames / self.fps

    @property
    def a_max(self) -> float:
        return self.a_min + self.gain

    def __post_init__(self):
        if self.a_min <= 0 or self.gain < 0:
            raise ValueError("require a_min > 0 and gain >= 0")
        if not self.fiducials:
            self.fiducials = default_fiducials(self)
        self.fiducials = [
            Fiducial(**f) if isinstance(f, dict) else f for f in self.fiducials
        ]

    def to_dict(self) -> dict:
        d = {
            k: v for k, v in self.__dict__.items() if k != "fiducials"
        }
        d["fiducials"] = [f.__dict__ for f in self.fiducials]
        return json.loads(json.dumps(d))

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        d["fiducials"] = [Fiducial(**f) for f in d.get("fiducials", [])]
        for k in ("head_axes", "head_center", "skin_color", "cavity_color",
                  "mouth_center", "carriers"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def surface_z(spec: SceneSpec, x: float, y: float) -> float:
    """Front (negative z) head-surface depth under the vertical line (x, y)."""
    ax, ay, az = spec.head_axes
    cx, cy, cz = spec.head_center
    q = 1.0 - ((x - cx) / ax) ** 2 - ((y - cy) / ay) ** 2
    if q <= 0:
        raise ValueError("point outside the head silhouette")
    return cz - az * np.sqrt(q)


def default_fiducials(spec: SceneSpec) -> list:
    """Six markers: two lips (aperture-driven), two eyes, nose, chin.

    y points down in both image and world coordinates, so the chin sits at
    positive y and the eyes at negative y.
    """
    mx, my, _ = spec.mouth_center
    lip_z = surface_z(spec, mx, my)
    pts = [
        ("lip_upper", (mx, my, lip_z), (1.0, 0.0, 0.0), -1.0, 0.055),
        ("lip_lower", (mx, my, lip_z), (0.0, 1.0, 0.0), 1.0, 0.055),
        ("eye_left", (-0.22, -0.18, surface_z(spec, -0.22, -0.18)), (0.0, 0.0, 1.0), 0.0, None),
        ("eye_right", (0.22, -0.18, surface_z(spec, 0.22, -0.18)), (0.0, 1.0, 1.0), 0.0, None),
        ("nose", (0.0, -0.05, surface_z(spec, 0.0, -0.05)), (1.0, 1.0, 0.0), 0.0, 0.06),
        ("chin", (0.0, 0.56, surface_z(spec, 0.0, 0.56)), (1.0, 0.0, 1.0), 0.0, None),
    ]
    return [Fiducial(n, a, c, ax, r) for n, a, c, ax, r in pts]


def generate_audio(spec: SceneSpec, seed: int = 0):
    """Driving audio: summed sine carriers modulated by a non-negative
    band-limited (<= 4 Hz) random envelope. Returns (Waveform, envelope series
    sampled at fps)."""
    n = int(round(spec.duration * spec.sample_rate))
    t = np.arange(n) / spec.sample_rate
    if spec.envelope == "zero":
        env = np.zeros(n)
    elif spec.envelope == "one":
        env = np.ones(n)
    else:
        rng = np.random.default_rng(seed)
        freqs = np.arange(1, int(4.0 * spec.duration) + 1) / spec.duration
        freqs = freqs[freqs <= 4.0]
        raw = np.zeros(n)
        for f in freqs:
            a, b = rng.standard_normal(2)
            raw += a * np.cos(2 * np.pi * f * t) + b * np.sin(2 * np.pi * f * t)
        lo, hi = raw.min(), raw.max()
        env = (raw - lo) / (hi - lo) if hi > lo else np.zeros(n)
    wave = np.zeros(n)
    for f in spec.carriers:
        wave += np.sin(2 * np.pi * f * t)
    wave *= env
    peak = np.abs(wave).max()
    if peak > 0:
        wave *= 0.5 / peak
    idx = np.clip(
        np.round(np.arange(spec.n_frames) * spec.sample_rate / spec.fps).astype(int),
        0, n - 1,
    )
    return Waveform(wave, spec.sample_rate), env[idx].copy()


def aperture_series(spec: SceneSpec, envelope: np.ndarray) -> np.ndarray:
    return spec.a_min + spec.gain * np.asarray(envelope, dtype=np.float64)


def marker_positions(spec: SceneSpec, aperture: float) -> np.ndarray:
    """World positions of all fiducials at a given mouth aperture, [M, 3].
    Lip markers slide along the head surface just beyond the mouth opening."""
    out = []
    for f in spec.fiducials:
        x, y, z = f.anchor
        if f.aperture_axis != 0.0:
            y = y + f.aperture_axis * (aperture + spec.lip_margin)
            z = surface_z(spec, x, y)
        out.append((x, y, z))
    return np.array(out, dtype=np.float64)


def analytic_field(spec: SceneSpec, t: int, envelope: np.ndarray):
    """Closed-form (x, d, cond) -> (color, sigma) field for frame t.

    Density: sigma_head inside the head ellipsoid with the mouth ellipsoid
    carved out, smoothly gated so quadrature converges. Color: skin, with a
    dark cavity region around the mouth and color-keyed marker balls."""
    if not 0 <= t < spec.n_frames:
        raise ValueError(f"frame {t} outside [0, {spec.n_frames})")
    ap = float(aperture_series(spec, envelope)[t])
    head_c = torch.tensor(spec.head_center, dtype=torch.float64)
    head_a = torch.tensor(spec.head_axes, dtype=torch.float64)
    mouth_c = torch.tensor(spec.mouth_center, dtype=torch.float64)
    mouth_a = torch.tensor(
        [spec.mouth_half_width, ap, spec.mouth_depth], dtype=torch.float64
    )
    cav_a = mouth_a * 1.25
    skin = torch.tensor(spec.skin_color, dtype=torch.float64)
    cavity = torch.tensor(spec.cavity_color, dtype=torch.float64)
    marks = torch.tensor(marker_positions(spec, ap), dtype=torch.float64)
    mark_colors = torch.tensor(
        [f.color for f in spec.fiducials], dtype=torch.float64
    )
    radii = torch.tensor(
        [f.radius if f.radius is not None else spec.marker_radius
         for f in spec.fiducials],
        dtype=torch.float64,
    )
    k = spec.sharpness
    km = spec.marker_sharpness

    def field(x, d, cond):
        dtype = x.dtype
        p = x.to(torch.float64)
        q_head = (((p - head_c) / head_a) ** 2).sum(dim=1)
        q_mouth = (((p - mouth_c) / mouth_a) ** 2).sum(dim=1)
        s_head = torch.sigmoid(k * (1.0 - q_head))
        s_mouth = torch.sigmoid(k * (1.0 - q_mouth))
        sigma = spec.sigma_head * s_head * (1.0 - s_mouth)
        q_cav = (((p - mouth_c) / cav_a) ** 2).sum(dim=1)
        w_cav = torch.sigmoid(k * (1.0 - q_cav))
        c = skin[None, :] * (1.0 - w_cav[:, None]) + cavity[None, :] * w_cav[:, None]
        dist = torch.cdist(p, marks)
        w_m = torch.sigmoid(km * (radii[None, :] - dist))
        for m in range(marks.shape[0]):
            w = w_m[:, m : m + 1]
            c = c * (1.0 - w) + mark_colors[m][None, :] * w
        return c.clamp(0.0, 1.0).to(dtype), sigma.to(dtype)

    return field


def camera_for_frame(spec: SceneSpec, t: int) -> Camera:
    """Orbiting camera: one sinusoidal sweep of +-orbit_degrees about the
    vertical axis over the clip, always aimed at the head center."""
    theta = np.deg2rad(spec.orbit_degrees) * np.sin(2 * np.pi * t / spec.n_frames)
    c, s = np.cos(theta), np.sin(theta)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    trans = rot @ np.array([0.0, 0.0, -spec.camera_distance])
    return Camera(
        focal=spec.focal, width=spec.width, height=spec.height,
        rotation=rot, translation=trans, near=spec.near, far=spec.far,
    )


def project_point(cam: Camera, p) -> np.ndarray:
    """Pinhole projection to (column, row) pixel coordinates."""
    pc = cam.rotation.T @ (np.asarray(p, dtype=np.float64) - cam.translation)
    if pc[2] <= 0:
        raise ValueError("point behind the camera")
    return np.array([
        cam.focal * pc[0] / pc[2] + cam.cx,
        cam.focal * pc[1] / pc[2] + cam.cy,
    ])


@dataclass
class GroundTruthBundle:
    spec: SceneSpec
    frames: np.ndarray      # [N, H, W, 3] float32
    audio: Waveform
    envelope: np.ndarray    # [N] at fps
    aperture: np.ndarray    # [N]
    landmarks: np.ndarray   # [N, M, 2] (column, row)
    cameras: list           # [N] Camera

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def render_ground_truth(
    spec: SceneSpec,
    s_gt: int = 256,
    seed: int = 0,
    frame_indices=None,
    chunk: int = 262144,
) -> GroundTruthBundle:
    """Render every frame of the analytic scene at high sample count and
    project the marker positions per frame."""
    audio, env = generate_audio(spec, seed)
    ap = aperture_series(spec, env)
    indices = list(range(spec.n_frames)) if frame_indices is None else list(frame_indices)
    frames, landmarks, cameras = [], [], []
    for t in indices:
        cam = camera_for_frame(spec, t)
        fld = analytic_field(spec, t, env)
        fr = render_frame(fld, cam, cond=None, n_samples=s_gt, chunk=chunk)
        frames.append(fr.rgb)
        landmarks.append(
            np.stack([project_point(cam, p) for p in marker_positions(spec, ap[t])])
        )
        cameras.append(cam)
    sel = np.asarray(indices)
    return GroundTruthBundle(
        spec=spec,
        frames=np.stack(frames),
        audio=audio,
        envelope=env[sel],
        aperture=ap[sel],
        landmarks=np.stack(landmarks),
        cameras=cameras,
    )


def holdout_indices(n_frames: int, every: int = 8) -> list:
    """Frames reserved for evaluation: every eighth frame by default."""
    return [i for i in range(n_frames) if i % every == every - 1]


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    h.update(path.read_bytes())
    return h.hexdigest()


def export_dataset(bundle: GroundTruthBundle, out_dir) -> Path:
    """Write the dataset directory: frames as PNG and DFB1, audio as WAV,
    per-frame metadata as JSON and DFB1, and a manifest with file hashes."""
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    (out / "frames_f32").mkdir(exist_ok=True)
    (out / "meta").mkdir(exist_ok=True)
    files = []
    for i in range(bundle.n_frames):
        png = out / "frames" / f"{i:05d}.png"
        img = np.clip(bundle.frames[i] * 255.0 + 0.5, 0, 255).astype(np.uint8)
        Image.fromarray(img).save(png)
        raw = out / "frames_f32" / f"{i:05d}.dfb1"
        dfb.write_array(raw, bundle.frames[i], kind="frame", meta={"index": i})
        files += [png, raw]
    wav = out / "audio.wav"
    wavfile.write(wav, bundle.audio.sample_rate,
                  bundle.audio.samples.astype(np.float32))
    files.append(wav)
    meta_json = {
        "landmarks": bundle.landmarks.tolist(),
        "cameras": [c.to_dict() for c in bundle.cameras],
        "aperture": bundle.aperture.tolist(),
        "envelope": bundle.envelope.tolist(),
    }
    for name in ("landmarks", "cameras", "aperture", "envelope"):
        p = out / "meta" / f"{name}.json"
        p.write_text(json.dumps(meta_json[name]))
        files.append(p)
    for name, arr in (
        ("landmarks", bundle.landmarks.astype(np.float64)),
        ("aperture", bundle.aperture.astype(np.float64)),
        ("envelope", bundle.envelope.astype(np.float64)),
    ):
        p = out / "meta" / f"{name}.dfb1"
        dfb.write_array(p, arr, kind="meta", meta={"name": name})
        files.append(p)
    manifest = {
        "n_frames": bundle.n_frames,
        "width": bundle.spec.width,
        "height": bundle.spec.height,
        "fps": bundle.spec.fps,
        "spec": bundle.spec.to_dict(),
        "files": {str(p.relative_to(out)): _sha256(p) for p in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def load_dataset(dataset_dir, check_integrity: bool = True) -> GroundTruthBundle:
    """Reload an exported dataset, verifying every file hash by default."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DatasetError(f"missing manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if check_integrity:
        for rel, want in manifest["files"].items():
            p = root / rel
            if not p.exists():
                raise DatasetError(f"missing dataset file {rel}")
            if _sha256(p) != want:
                raise DatasetError(f"hash mismatch for {rel}")
    spec = SceneSpec.from_dict(manifest["spec"])
    n = manifest["n_frames"]
    frames = np.stack(
        [dfb.read_array(root / "frames_f32" / f"{i:05d}.dfb1")[0] for i in range(n)]
    )
    rate, samples = wavfile.read(root / "audio.wav")
    audio = Waveform(samples.astype(np.float64), int(rate))
    meta = json.loads((root / "meta" / "cameras.json").read_text())
    cameras = [Camera.from_dict(d) for d in meta]
    landmarks, _ = dfb.read_array(root / "meta" / "landmarks.dfb1")
    aperture, _ = dfb.read_array(root / "meta" / "aperture.dfb1")
    envelope, _ = dfb.read_array(root / "meta" / "envelope.dfb1")
    return GroundTruthBundle(
        spec=spec, frames=frames, audio=audio,
        envelope=envelope, aperture=aperture,
        landmarks=landmarks, cameras=cameras,
    )
