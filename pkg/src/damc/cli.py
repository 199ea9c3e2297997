"""Command-line entry point: dataset synthesis, sync pretraining, two-stage
training, rendering, evaluation with ablations, acoustic-model ingestion, and
pinyin projection."""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np
import torch

from . import dfb
from .audio import (
    MelParams,
    align_windows,
    compute_mel,
    ingest_tts,
    write_mel_dfb,
)
from .config import config_hash
from .csfm import MODES
from .encoders import (
    ContentEncoder,
    DynamicEncoder,
    evaluate_sync,
    load_sync_result,
    make_sync_pairs,
    pretrain_dynamic_encoder,
    save_sync_result,
    SyncPretrainConfig,
)
from .errors import (
    ConfigurationError,
    DamcError,
    DatasetError,
    EmptyInputError,
    FormatError,
)
from .metrics import (
    CSV_COLUMNS,
    aperture_from_frames,
    evaluate,
    rms_envelope,
    write_report_csv,
)
from .pinyin import build_mapping, project_series
from .scene import SceneSpec, export_dataset, load_dataset, render_ground_truth
from .train import (
    Checkpoint,
    TrainConfig,
    TrainData,
    load_checkpoint,
    prepare_training_data,
    render_checkpoint,
    save_checkpoint,
    train_stage,
)

EXIT_ORDERING = 1
EXIT_CONFIG = 2
EXIT_IO = 3


def _fail(code: int, message: str):
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _guard(fn, *args, **kwargs):
    """Map library errors onto the documented exit codes."""
    try:
        return fn(*args, **kwargs)
    except (ConfigurationError, ValueError, TypeError, KeyError,
            json.JSONDecodeError) as e:
        _fail(EXIT_CONFIG, str(e))
    except (DatasetError, FormatError, EmptyInputError, OSError) as e:
        _fail(EXIT_IO, str(e))
    except DamcError as e:
        _fail(EXIT_IO, str(e))


def _load_config_file(path, section: str) -> dict:
    if path is None:
        return {}
    data = json.loads(Path(path).read_text())
    sub = data.get(section, data)
    if not isinstance(sub, dict):
        raise ConfigurationError(f"config section {section!r} must be an object")
    return sub


def _merge(file_values: dict, overrides: dict) -> dict:
    out = dict(file_values)
    out.update({k: v for k, v in overrides.items() if v is not None})
    return out


@click.group()
@click.option(
    "--threads", type=int, default=None, envvar="DAMC_THREADS",
    help="Worker thread cap (default: env DAMC_THREADS or library default).",
)
def main(threads):
    if threads is not None:
        if threads < 1:
            raise click.UsageError("--threads must be >= 1")
        torch.set_num_threads(threads)


@main.command("synth-data")
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--frames", "n_frames", type=int, default=None)
@click.option("--size", type=int, default=None, help="Square frame size in px.")
@click.option("--s-gt", type=int, default=256, show_default=True)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
def cmd_synth_data(out_dir, seed, n_frames, size, s_gt, config_path):
    """Render the analytic scene and export it as a dataset directory."""

    def run():
        fields = _merge(
            _load_config_file(config_path, "scene"),
            {"n_frames": n_frames, "width": size, "height": size},
        )
        spec = SceneSpec(**fields)
        bundle = render_ground_truth(spec, s_gt=s_gt, seed=seed)
        out = export_dataset(bundle, out_dir)
        manifest_path = out / "manifest.json"
        manifest = json.loads(manifest_path.read_text())
        manifest["config_hash"] = config_hash(
            {"scene": spec.to_dict(), "seed": seed, "s_gt": s_gt}
        )
        manifest_path.write_text(json.dumps(manifest, indent=1))
        click.echo(json.dumps({
            "dataset": str(out), "n_frames": bundle.n_frames,
            "config_hash": manifest["config_hash"],
        }))

    _guard(run)


@main.command("pretrain-sync")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--iters", type=int, default=300, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--min-shift", type=int, default=5, show_default=True)
@click.option("--max-shift", type=int, default=25, show_default=True)
def cmd_pretrain_sync(data_dir, out_path, iters, seed, min_shift, max_shift):
    """Pretrain the dynamic encoder on aligned-vs-shifted audio pairs."""

    def run():
        bundle = load_dataset(data_dir)
        cfg = MelParams()
        mel = compute_mel(bundle.audio, cfg)
        windows = align_windows(bundle.audio, mel, bundle.spec.fps,
                                n_frames=bundle.n_frames)
        pairs = make_sync_pairs(windows, bundle.aperture, seed=seed,
                                min_shift=min_shift, max_shift=max_shift)
        pc = SyncPretrainConfig(iters=iters, seed=seed)
        result = pretrain_dynamic_encoder(pairs, pc)
        save_sync_result(out_path, result)
        summary = {"weights": str(out_path), "iters": iters,
                   "config_hash": config_hash(pc.__dict__)}
        if iters > 0:
            summary.update(evaluate_sync(result))
        click.echo(json.dumps(summary))

    _guard(run)


def _encoders_from_config(cfg: dict):
    content = ContentEncoder(seed=cfg.get("content_encoder_seed", cfg.get("seed", 0)))
    sync_path = cfg.get("sync_weights_path")
    if sync_path:
        dynamic = load_sync_result(sync_path).encoder
    else:
        dynamic = DynamicEncoder(seed=cfg.get("seed", 0))
    return content, dynamic


def _prepare(bundle, ckpt_config: dict) -> TrainData:
    content, dynamic = _encoders_from_config(ckpt_config)
    return prepare_training_data(
        bundle, content, dynamic,
        holdout_every=ckpt_config.get("holdout_every", 8),
    )


@main.command("train")
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.option("--fusion-mode", type=click.Choice(MODES), default=None)
@click.option("--stage1-iters", type=int, default=None)
@click.option("--stage2-iters", type=int, default=None)
@click.option("--rays", "rays_per_iter", type=int, default=None)
@click.option("--samples", "n_samples", type=int, default=None)
@click.option("--sync-weights", type=click.Path(exists=True), default=None)
@click.option("--resume", "resume_path", type=click.Path(exists=True), default=None,
              help="Stage-1 checkpoint; skips the coarse stage.")
@click.option("--config", "config_path", type=click.Path(exists=True), default=None)
@click.option("--quiet", is_flag=True)
def cmd_train(data_dir, out_path, seed, fusion_mode, stage1_iters, stage2_iters,
              rays_per_iter, n_samples, sync_weights, resume_path, config_path,
              quiet):
    """Two-stage training: coarse rays, then fine patches."""

    def run():
        fields = _merge(
            _load_config_file(config_path, "train"),
            {
                "seed": seed, "fusion_mode": fusion_mode,
                "stage1_iters": stage1_iters, "stage2_iters": stage2_iters,
                "rays_per_iter": rays_per_iter, "n_samples": n_samples,
            },
        )
        cfg = TrainConfig(**fields)
        extra = {"sync_weights_path": sync_weights,
                 "content_encoder_seed": cfg.seed}
        bundle = load_dataset(data_dir)
        data = _prepare(bundle, {**cfg.to_dict(), **extra})
        progress = None if quiet else (
            lambda r: click.echo(
                f"[{r['stage']}] iter {r['iter']} loss {r['loss']:.5f}", err=True
            )
        )
        if resume_path:
            ckpt = load_checkpoint(resume_path)
        else:
            ckpt = train_stage("coarse", cfg, data, progress=progress)
            ckpt.config.update(extra)
        ckpt = train_stage("fine", cfg, data, ckpt_in=ckpt, progress=progress)
        ckpt.config.update(extra)
        save_checkpoint(out_path, ckpt)
        click.echo(json.dumps({
            "checkpoint": str(out_path), "iterations": ckpt.iteration,
            "fusion_mode": cfg.fusion_mode, "config_hash": ckpt.config_hash,
        }))

    _guard(run)


def _parse_frame_range(text: str, n: int) -> list:
    if text is None or text == "all":
        return list(range(n))
    if ":" in text:
        a, b = text.split(":", 1)
        return list(range(int(a or 0), min(int(b), n)))
    return [int(text)]


@main.command("render")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path())
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--frames", "frame_range", default="all", show_default=True)
@click.option("--samples", "n_samples", type=int, default=None)
def cmd_render(ckpt_path, data_dir, out_dir, frame_range, n_samples):
    """Render frames from a trained checkpoint under its audio conditioning."""

    def run():
        if not Path(ckpt_path).exists():
            raise ConfigurationError(f"missing checkpoint {ckpt_path}")
        ckpt = load_checkpoint(ckpt_path)
        bundle = load_dataset(data_dir)
        data = _prepare(bundle, ckpt.config)
        indices = _parse_frame_range(frame_range, bundle.n_frames)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from PIL import Image

        for t in indices:
            fr = render_checkpoint(ckpt, data, t, n_samples=n_samples)
            dfb.write_array(out / f"{t:05d}.dfb1", fr.rgb, kind="frame",
                            meta={"index": t, "config_hash": ckpt.config_hash})
            img = np.clip(fr.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(out / f"{t:05d}.png")
        click.echo(json.dumps({
            "out": str(out), "frames": len(indices),
            "config_hash": ckpt.config_hash,
        }))

    _guard(run)


@main.command("eval")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path())
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--ablation", is_flag=True, help="Evaluate all five fusion modes.")
@click.option("--check-ordering", is_flag=True,
              help="Exit 1 unless sync(full) > sync(concat).")
@click.option("--samples", "n_samples", type=int, default=None)
@click.option("--metrics", "metric_list", default=",".join(CSV_COLUMNS),
              show_default=True)
def cmd_eval(ckpt_path, data_dir, out_dir, ablation, check_ordering, n_samples,
             metric_list):
    """Score held-out frames; writes JSON + CSV reports and figures."""

    def run():
        from . import figures

        ckpt = load_checkpoint(ckpt_path)
        bundle = load_dataset(data_dir)
        data = _prepare(bundle, ckpt.config)
        which = [m for m in metric_list.split(",") if m]
        modes = list(MODES) if ablation else [ckpt.config.get("fusion_mode", "full")]
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        reports = []
        for mode in modes:
            rep = evaluate(ckpt, data, bundle, which=which, mode=mode,
                           dataset_id=str(data_dir), n_samples=n_samples)
            rep.write_json(out / f"report_{mode}.json")
            reports.append(rep)
        write_report_csv(out / "report.csv", reports)
        main_rep = reports[modes.index(ckpt.config.get("fusion_mode", "full"))] \
            if ckpt.config.get("fusion_mode", "full") in modes else reports[0]
        if "psnr" in which:
            figures.plot_psnr_series(main_rep, out / "psnr.png")
        if len(reports) > 1:
            figures.plot_ablation_bars(reports, out / "ablation_sync.png")
        if ckpt.log:
            figures.plot_training_log(ckpt.log, out / "training_log.png")
        if "sync_surrogate" in which:
            mel = compute_mel(bundle.audio)
            windows = align_windows(bundle.audio, mel, bundle.spec.fps,
                                    n_frames=bundle.n_frames)
            idx = np.asarray(data.holdout_idx)
            env = rms_envelope(windows)[idx]
            rendered = [render_checkpoint(ckpt, data, int(t), n_samples=n_samples)
                        for t in idx]
            ap = aperture_from_frames(rendered, bundle.spec)
            ok = ~np.isnan(ap)
            figures.plot_sync_scatter(
                env[ok], ap[ok], out / "sync_scatter.png",
                corr=main_rep.scalars.get("sync_surrogate"),
            )
            t0 = int(idx[0])
            figures.plot_frame_comparison(
                rendered[0].rgb, bundle.frames[t0], out / "frame_comparison.png",
                title=f"held-out frame {t0}",
            )
        click.echo(json.dumps({
            "reports": [str(out / f"report_{m}.json") for m in modes],
            "csv": str(out / "report.csv"),
            "config_hash": ckpt.config_hash,
        }))
        if check_ordering:
            by_mode = {r.fusion_mode: r.scalars.get("sync_surrogate") for r in reports}
            full = by_mode.get("full")
            concat = by_mode.get("concat")
            if full is None or concat is None:
                raise ConfigurationError(
                    "--check-ordering needs sync_surrogate for modes full and concat"
                )
            if not full > concat:
                _fail(EXIT_ORDERING,
                      f"sync ordering violated: full {full:.4f} <= concat {concat:.4f}")

    _guard(run)


@main.command("tts-infer")
@click.option("--ckpt", "ckpt_path", required=True, type=click.Path(exists=True))
@click.option("--data", "data_dir", required=True, type=click.Path(),
              help="Dataset directory supplying the scene and cameras.")
@click.option("--mel", "mel_path", required=True, type=click.Path(exists=True))
@click.option("--wav", "wav_path", type=click.Path(exists=True), default=None)
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--frames", "frame_range", default="all", show_default=True)
@click.option("--samples", "n_samples", type=int, default=None)
@click.option("--gl-iters", type=int, default=60, show_default=True)
def cmd_tts_infer(ckpt_path, data_dir, mel_path, wav_path, out_dir, frame_range,
                  n_samples, gl_iters):
    """Drive the renderer from acoustic-model output: a mel file toward the
    dynamic path and a waveform (supplied or Griffin-Lim) toward content."""

    def run():
        ckpt = load_checkpoint(ckpt_path)
        bundle = load_dataset(data_dir)
        mel_cfg = MelParams()
        try:
            mel, wave = ingest_tts(mel_path, wav_path, cfg=mel_cfg,
                                   gl_iters=gl_iters)
        except FormatError as e:
            _fail(EXIT_CONFIG, str(e))
        fps = bundle.spec.fps
        duration = mel.n_frames * mel.hop_samples / mel.sample_rate
        n_frames = min(int(round(duration * fps)), bundle.n_frames)
        windows = align_windows(wave, mel, fps, n_frames=n_frames)
        content, dynamic = _encoders_from_config(ckpt.config)
        with torch.no_grad():
            f_c = content(torch.as_tensor(windows.wave_windows))
            f_d = dynamic(torch.as_tensor(windows.mel_windows))
        data = TrainData(
            frames=torch.as_tensor(bundle.frames[:n_frames]),
            cameras=list(bundle.cameras[:n_frames]),
            f_c=f_c, f_d=f_d, train_idx=list(range(n_frames)), holdout_idx=[],
            envelope=bundle.envelope[:n_frames],
            aperture=bundle.aperture[:n_frames], fps=fps,
        )
        indices = _parse_frame_range(frame_range, n_frames)
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        from PIL import Image

        for t in indices:
            fr = render_checkpoint(ckpt, data, t, n_samples=n_samples)
            dfb.write_array(out / f"{t:05d}.dfb1", fr.rgb, kind="frame",
                            meta={"index": t, "config_hash": ckpt.config_hash})
            img = np.clip(fr.rgb * 255.0 + 0.5, 0, 255).astype(np.uint8)
            Image.fromarray(img).save(out / f"{t:05d}.png")
        click.echo(json.dumps({
            "out": str(out), "frames": len(indices), "total_frames": n_frames,
            "waveform_source": "file" if wav_path else "griffin-lim",
            "config_hash": ckpt.config_hash,
        }))

    _guard(run)


@main.command("pinyin-map")
@click.option("--in", "in_path", required=True, type=click.Path())
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--table", "table_path", type=click.Path(exists=True), default=None)
@click.option("--keep-tones", is_flag=True)
def cmd_pinyin_map(in_path, out_path, table_path, keep_tones):
    """Project character-logit rows onto pinyin initial+final distributions."""

    def run():
        mapping = build_mapping(table_path, keep_tones=keep_tones)
        arr, header = dfb.read_array(in_path)
        if arr.ndim == 1:
            arr = arr[None, :]
        if arr.ndim != 2 or arr.shape[1] != mapping.vocab_size:
            raise FormatError(
                f"logit rows of width {arr.shape[-1]} do not match the "
                f"{mapping.vocab_size}-character vocabulary"
            )
        comps = project_series(arr, mapping).astype(np.float32)
        dfb.write_array(out_path, comps, kind="pinyin", meta={
            "n_initials": len(mapping.initials),
            "n_finals": len(mapping.finals),
            "component_count": mapping.component_count,
            "keep_tones": keep_tones,
        })
        click.echo(json.dumps({
            "out": str(out_path), "rows": comps.shape[0],
            "component_count": mapping.component_count,
        }))

    _guard(run)


if __name__ == "__main__":
    main()
