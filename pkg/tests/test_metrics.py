import numpy as np
import pytest

from damc.audio import MelParams, align_windows, compute_mel
from damc.encoders import ContentEncoder, DynamicEncoder
from damc.errors import UndefinedMetricError
from damc.metrics import (
    CSV_COLUMNS,
    EvalReport,
    LandmarkSet,
    aperture_from_frames,
    evaluate,
    extract_landmarks_synthetic,
    lmd,
    pearson,
    psnr,
    rms_envelope,
    sync_metric,
    sync_metric_series,
    write_report_csv,
)
from damc.render import RenderedFrame
from damc.scene import SceneSpec, render_ground_truth
from damc.train import TrainConfig, init_checkpoint, prepare_training_data


class TestPsnr:
    def test_identical_capped_at_100(self):
        x = np.random.default_rng(0).random((8, 8, 3))
        assert psnr(x, x) == 100.0

    def test_known_mse(self):
        gt = np.zeros((10, 10, 3))
        pred = np.full((10, 10, 3), 0.1)
        assert psnr(pred, gt) == pytest.approx(20.0, abs=1e-9)

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((4, 4, 3)), rng.random((4, 4, 3))
        sq = 0.0
        for i in range(4):
            for j in range(4):
                for c in range(3):
                    sq += (a[i, j, c] - b[i, j, c]) ** 2
        want = 10 * np.log10(1.0 / (sq / 48))
        assert psnr(a, b) == pytest.approx(want, abs=1e-9)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((5, 4, 3)))

    def test_bad_max_val(self):
        with pytest.raises(ValueError):
            psnr(np.zeros((4, 4, 3)), np.zeros((4, 4, 3)), max_val=0.0)

    def test_strictly_decreasing_with_noise(self):
        rng = np.random.default_rng(2)
        gt = rng.random((16, 16, 3))
        noise = rng.standard_normal(gt.shape)
        vals = [psnr(gt + amp * noise, gt) for amp in (0.01, 0.05, 0.2)]
        assert vals[0] > vals[1] > vals[2]


def lms(points, visible=None):
    points = np.asarray(points, dtype=float)
    if visible is None:
        visible = np.ones(len(points), bool)
    return LandmarkSet(points, visible)


class TestLmd:
    def test_identical_zero(self):
        a = [lms([[1.0, 2.0], [3.0, 4.0]])]
        assert lmd(a, a) == 0.0

    def test_three_four_five(self):
        assert lmd([lms([[0.0, 0.0]])], [lms([[3.0, 4.0]])]) == pytest.approx(5.0)

    def test_mean_over_frames(self):
        pred = [lms([[0.0, 0.0]]), lms([[1.0, 1.0]])]
        gt = [lms([[5.0, 0.0]]), lms([[1.0, 1.0]])]
        assert lmd(pred, gt) == pytest.approx(2.5)

    def test_count_mismatch(self):
        with pytest.raises(ValueError):
            lmd([lms([[0, 0]])], [lms([[0, 0], [1, 1]])])

    def test_translation_equivariance(self):
        rng = np.random.default_rng(3)
        pts = rng.random((5, 2)) * 20
        shift = np.array([2.0, -1.0])
        base = lmd([lms(pts)], [lms(pts + shift)])
        moved = lmd([lms(pts + 7.0)], [lms(pts + shift + 7.0)])
        assert moved == pytest.approx(base, abs=1e-12)
        assert lmd([lms([[0.0, 0.0]])], [lms([[2.0, -1.0]])]) == pytest.approx(
            np.linalg.norm(shift)
        )

    def test_invisible_points_excluded(self):
        pred = [lms([[0.0, 0.0], [100.0, 100.0]], [True, False])]
        gt = [lms([[3.0, 4.0], [0.0, 0.0]])]
        assert lmd(pred, gt) == pytest.approx(5.0)

    def test_nothing_visible_undefined(self):
        pred = [lms([[0.0, 0.0]], [False])]
        gt = [lms([[0.0, 0.0]])]
        with pytest.raises(UndefinedMetricError):
            lmd(pred, gt)


@pytest.fixture(scope="module")
def gt_scene():
    spec = SceneSpec(n_frames=48)
    bundle = render_ground_truth(spec, s_gt=128, seed=0)
    return spec, bundle


class TestExtractLandmarks:
    def test_centroids_match_projections(self, gt_scene):
        spec, bundle = gt_scene
        for t in range(0, bundle.n_frames, 12):
            fr = RenderedFrame(rgb=bundle.frames[t], opacity=None)
            lm = extract_landmarks_synthetic(fr, spec)
            assert lm.visible.all()
            err = np.linalg.norm(lm.points - bundle.landmarks[t], axis=1)
            assert err.max() < 0.5, err

    def test_blank_frame_all_invisible(self, gt_scene):
        spec, _ = gt_scene
        fr = RenderedFrame(rgb=np.zeros((64, 64, 3), np.float32), opacity=None)
        lm = extract_landmarks_synthetic(fr, spec)
        assert not lm.visible.any()

    def test_translation_covariance(self, gt_scene):
        spec, bundle = gt_scene
        fr = RenderedFrame(rgb=bundle.frames[0], opacity=None)
        shifted = RenderedFrame(rgb=np.roll(bundle.frames[0], 2, axis=1), opacity=None)
        a = extract_landmarks_synthetic(fr, spec)
        b = extract_landmarks_synthetic(shifted, spec)
        delta = b.points - a.points
        assert np.allclose(delta[:, 0], 2.0, atol=0.1)
        assert np.allclose(delta[:, 1], 0.0, atol=0.1)


class TestSync:
    def test_affine_invariance(self):
        rng = np.random.default_rng(4)
        env = rng.random(50)
        assert sync_metric_series(env, 3.0 * env + 2.0) == pytest.approx(1.0, abs=1e-9)
        assert pearson(5 * env - 1, env) == pytest.approx(1.0, abs=1e-9)

    def test_constant_aperture_undefined(self):
        env = np.random.default_rng(5).random(30)
        with pytest.raises(UndefinedMetricError):
            sync_metric_series(env, np.full(30, 2.0))

    def test_shifted_envelope_scores_lower(self):
        t = np.arange(200) / 25.0
        env = 0.5 + 0.4 * np.sin(2 * np.pi * 1.1 * t)
        aligned = sync_metric_series(env, env * 0.1 + 0.02)
        shifted = sync_metric_series(env, np.roll(env, 10) * 0.1 + 0.02)
        assert shifted < aligned

    def test_rms_envelope_detrended(self):
        spec = SceneSpec(n_frames=32, envelope="one", carriers=(440.0,))
        from damc.scene import generate_audio

        audio, _ = generate_audio(spec, seed=0)
        cfg = MelParams()
        mel = compute_mel(audio, cfg)
        windows = align_windows(audio, mel, spec.fps, n_frames=32)
        env = rms_envelope(windows)
        assert abs(env.mean()) < 1e-9
        # interior frames only: the first/last windows are zero-padded
        interior = env[4:-4]
        assert interior.std() < 1e-2

    def test_ground_truth_frames_track_envelope(self, gt_scene):
        spec, bundle = gt_scene
        cfg = MelParams()
        mel = compute_mel(bundle.audio, cfg)
        windows = align_windows(bundle.audio, mel, spec.fps, n_frames=bundle.n_frames)
        env = rms_envelope(windows)
        frames = [RenderedFrame(rgb=f, opacity=None) for f in bundle.frames]
        r = sync_metric(env, frames, spec)
        assert r > 0.8

    def test_dataset_self_consistency(self, gt_scene):
        _, bundle = gt_scene
        assert sync_metric_series(bundle.envelope, bundle.aperture) == pytest.approx(
            1.0, abs=1e-6
        )

    def test_measured_aperture_tracks_true_aperture(self, gt_scene):
        spec, bundle = gt_scene
        frames = [RenderedFrame(rgb=f, opacity=None) for f in bundle.frames]
        ap = aperture_from_frames(frames, spec)
        assert not np.isnan(ap).any()
        assert pearson(ap, bundle.aperture) > 0.95


@pytest.fixture(scope="module")
def tiny_eval():
    spec = SceneSpec(width=16, height=16, n_frames=8, focal=26.0)
    bundle = render_ground_truth(spec, s_gt=32, seed=0)
    data = prepare_training_data(
        bundle, ContentEncoder(seed=0), DynamicEncoder(seed=0), holdout_every=4
    )
    cfg = TrainConfig(
        stage1_iters=1, stage2_iters=1, rays_per_iter=64, patch_size=8,
        n_levels=2, table_size=256, finest_resolution=32, cond_dim=16,
        hidden_dim=16, n_samples=8, window=4, holdout_every=4,
    )
    return init_checkpoint(cfg), data, bundle


class TestEvaluate:
    def test_empty_metric_list(self, tiny_eval):
        ckpt, data, bundle = tiny_eval
        rep = evaluate(ckpt, data, bundle, which=[], dataset_id="ds1")
        assert rep.dataset_id == "ds1"
        assert rep.scalars == {} and rep.series == {}

    def test_psnr_aggregation_identity(self, tiny_eval):
        ckpt, data, bundle = tiny_eval
        rep = evaluate(ckpt, data, bundle, which=["psnr"], n_samples=8)
        assert rep.scalars["psnr"] == pytest.approx(
            np.mean(rep.series["psnr"]), abs=1e-9
        )
        assert len(rep.series["psnr"]) == len(data.holdout_idx)

    def test_report_json_round_trip(self, tiny_eval, tmp_path):
        import json

        ckpt, data, bundle = tiny_eval
        rep = evaluate(ckpt, data, bundle, which=["psnr"], n_samples=8)
        p = tmp_path / "report.json"
        rep.write_json(p)
        loaded = json.loads(p.read_text())
        assert loaded["scalars"]["psnr"] == rep.scalars["psnr"]
        assert loaded["config_hash"] == ckpt.config_hash

    def test_csv_columns(self, tiny_eval, tmp_path):
        ckpt, data, bundle = tiny_eval
        rep = evaluate(ckpt, data, bundle, which=["psnr"], n_samples=8)
        p = tmp_path / "table.csv"
        write_report_csv(p, [rep])
        lines = p.read_text().strip().split("\n")
        assert lines[0] == "mode," + ",".join(CSV_COLUMNS)
        assert len(lines) == 2
        assert lines[1].startswith("full,")


class TestFigures:
    def test_figures_written(self, tiny_eval, tmp_path):
        from damc import figures

        ckpt, data, bundle = tiny_eval
        rep = evaluate(ckpt, data, bundle, which=["psnr"], n_samples=8)
        paths = [
            figures.plot_psnr_series(rep, tmp_path / "psnr.png"),
            figures.plot_sync_scatter(
                np.arange(10), np.arange(10) * 2.0, tmp_path / "sync.png", corr=1.0
            ),
            figures.plot_ablation_bars([rep], tmp_path / "bars.png", metric="psnr"),
            figures.plot_frame_comparison(
                bundle.frames[0], bundle.frames[1], tmp_path / "cmp.png"
            ),
            figures.plot_training_log(
                [{"stage": "coarse", "iter": 1, "mse": 0.1}], tmp_path / "log.png"
            ),
        ]
        for p in paths:
            assert p.exists() and p.stat().st_size > 0
