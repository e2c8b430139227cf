"""Operator command line: sampling, alignment, training, evaluation,
inference, analytics, complexity benchmarks, and the annotation service.

Every subcommand is a thin composition of library calls. Configuration
comes from a TOML file (sections [model], [train], [paths], [cache]) with
flag overrides; unknown keys are rejected before any work starts.

Exit codes: 0 success, 1 usage error, 2 data/validation error, 3 numeric
failure.
"""
from __future__ import annotations

import dataclasses
import json
import os
import sys
from datetime import datetime, timezone

import click
import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import align as A
from . import data as D
from . import metrics as ME
from . import pain as P
from . import train as TR
from .checkpoint import load_checkpoint
from .imgio import read_image, write_image
from .model import ModelConfig, attention_block_macs, attention_macs, init_params

_CTX = {"terminal_width": 80, "max_content_width": 80}

_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)}
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TR.TrainConfig)}
_PATH_KEYS = {
    "manifest",
    "landmarks",
    "annotations",
    "crops",
    "checkpoint",
    "log",
    "reports",
    "metrics",
    "static",
}
_CACHE_KEYS = {"journal"}
_TUPLE_KEYS = {"depths", "dims", "heads", "pos_weight"}


def load_run_config(path: str) -> dict:
    """Parse and validate the run configuration; relative paths resolve
    against the config file's directory."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    base = os.path.dirname(os.path.abspath(path))
    known_sections = {"model", "train", "paths", "cache"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")

    def section(name, allowed):
        content = raw.get(name, {})
        bad = set(content) - allowed
        if bad:
            raise ValueError(f"{path}: unknown keys in [{name}]: {sorted(bad)}")
        return content

    model_kwargs = {
        k: tuple(v) if k in _TUPLE_KEYS else v for k, v in section("model", _MODEL_KEYS).items()
    }
    train_kwargs = {
        k: tuple(v) if k in _TUPLE_KEYS else v for k, v in section("train", _TRAIN_KEYS).items()
    }
    paths = {k: os.path.join(base, v) for k, v in section("paths", _PATH_KEYS).items()}
    cache = {k: os.path.join(base, v) for k, v in section("cache", _CACHE_KEYS).items()}
    return {
        "model": ModelConfig(**model_kwargs),
        "train": TR.TrainConfig(**train_kwargs),
        "paths": paths,
        "cache": cache,
    }


def _require_paths(paths: dict, *keys: str) -> None:
    missing = [k for k in keys if k not in paths]
    if missing:
        raise ValueError(f"config [paths] is missing {missing}")
    absent = [paths[k] for k in keys if not os.path.exists(paths[k])]
    if absent:
        raise FileNotFoundError(f"missing input paths: {absent}")


@click.group(name="aupipe", context_settings=_CTX)
def cli():
    """Facial action-unit detection pipeline."""


@cli.command(context_settings=_CTX)
@click.option("--reports", "reports_path", required=True, type=click.Path(exists=True), help="Pain-report CSV.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True), help="Frame manifest CSV.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Write the selection JSON here instead of stdout.")
def sample(reports_path, manifest_path, out_path):
    """Schedule recording segments around pain reports and list the frames
    near each report."""
    reports = D.load_pain_reports(reports_path)
    frames = D.load_manifest(manifest_path)
    if frames:
        span = (min(f.captured_at for f in frames), max(f.captured_at for f in frames))
    else:
        now = datetime.now(timezone.utc)
        span = (now, now)
    segments = D.schedule_segments(reports, span[0], span[1])
    payload = {
        "segments": [
            {
                "start": D.format_timestamp(s.start),
                "end": D.format_timestamp(s.end),
                "reported_at": D.format_timestamp(s.reported_at),
            }
            for s in segments
        ],
        "reports": [
            {
                "patient_id": r.patient_id,
                "reported_at": D.format_timestamp(r.reported_at),
                "dvprs": r.dvprs,
                "frames": [f.frame_id for f in D.frames_near_report(frames, r)],
            }
            for r in sorted(reports, key=lambda r: (r.reported_at, r.patient_id))
        ],
    }
    text = json.dumps(payload, indent=2, sort_keys=True)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text + "\n")
    else:
        click.echo(text)


@cli.command(context_settings=_CTX)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True), help="Frame manifest CSV.")
@click.option("--landmarks", "landmarks_path", required=True, type=click.Path(exists=True), help="Landmark CSV (68 points per frame).")
@click.option("--out", "out_dir", required=True, type=click.Path(), help="Directory for aligned crops.")
@click.option("--size", default=224, show_default=True, help="Output crop side length.")
@click.option("--cache", "cache_path", type=click.Path(), default=None, help="Append-only transform cache journal.")
def align(manifest_path, landmarks_path, out_dir, size, cache_path):
    """Estimate similarity transforms and write aligned crops."""
    frames = D.load_manifest(manifest_path)
    landmark_sets = A.load_landmarks(landmarks_path)
    template = A.CanonicalTemplate.default().scaled(size)
    cache = A.AlignmentCache(journal=cache_path)
    os.makedirs(out_dir, exist_ok=True)
    for frame in sorted(frames, key=lambda f: f.frame_id):
        if frame.frame_id not in landmark_sets:
            raise ValueError(f"no landmarks for frame {frame.frame_id!r}")
        t = A.cached_transform(cache, landmark_sets[frame.frame_id], template)
        crop = A.warp_crop(read_image(frame.image_path), t, size)
        write_image(os.path.join(out_dir, f"{frame.frame_id}.png"), crop)
    click.echo(f"aligned {len(frames)} frames (cache hits {cache.hits}, misses {cache.misses})")


def _load_crops(crops_dir: str, frame_ids: list[str], input_size: int) -> np.ndarray:
    images = []
    for fid in frame_ids:
        path = os.path.join(crops_dir, f"{fid}.png")
        if not os.path.exists(path):
            raise FileNotFoundError(f"missing aligned crop {path}")
        raster = read_image(path)
        if raster.shape[0] != input_size or raster.shape[1] != input_size:
            raise ValueError(f"{path}: crop is {raster.shape[0]}x{raster.shape[1]}, model wants {input_size}")
        images.append(A.normalize(raster).data)
    return np.stack(images)


def _build_dataset(cfg_model, paths, patient_filter=None) -> TR.LabeledFrames:
    frames = D.load_manifest(paths["manifest"])
    store = D.AnnotationStore(paths["annotations"])
    if patient_filter is not None:
        frames = [f for f in frames if f.patient_id in patient_filter]
    annotated = store.annotated_frame_ids()
    frames = [f for f in frames if f.frame_id in annotated]
    if not frames:
        raise ValueError("no annotated frames available")
    frames.sort(key=lambda f: f.frame_id)
    ids = [f.frame_id for f in frames]
    labels, mask = D.query_labels(store, ids, cfg_model.au_ids, set(ids))
    images = _load_crops(paths["crops"], ids, cfg_model.input_size)
    return TR.LabeledFrames(images=images[mask], labels=labels[mask], frame_ids=tuple(np.array(ids)[mask]))


@cli.command(context_settings=_CTX)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Run configuration TOML.")
@click.option("--epochs", type=int, default=None, help="Override [train] epochs.")
@click.option("--learning-rate", type=float, default=None, help="Override [train] learning_rate.")
@click.option("--batch-size", type=int, default=None, help="Override [train] batch_size.")
@click.option("--seed", type=int, default=None, help="Override [train] seed.")
@click.option("--split-ratio", type=float, default=0.7, show_default=True, help="Patient-wise train fraction.")
def train(config_path, epochs, learning_rate, batch_size, seed, split_ratio):
    """Train the classifier on annotated, aligned frames."""
    run = load_run_config(config_path)
    cfg_model: ModelConfig = run["model"]
    cfg_train: TR.TrainConfig = run["train"]
    overrides = {
        k: v
        for k, v in {
            "epochs": epochs,
            "learning_rate": learning_rate,
            "batch_size": batch_size,
            "seed": seed,
        }.items()
        if v is not None
    }
    if overrides:
        cfg_train = dataclasses.replace(cfg_train, **overrides)
    paths = run["paths"]
    _require_paths(paths, "manifest", "annotations", "crops")
    if "checkpoint" not in paths:
        raise ValueError("config [paths] must name a checkpoint output")

    all_frames = D.load_manifest(paths["manifest"])
    split = D.split_by_patient({f.patient_id for f in all_frames}, ratio=split_ratio, seed=cfg_train.seed)
    train_data = _build_dataset(cfg_model, paths, patient_filter=set(split.train))
    test_data = _build_dataset(cfg_model, paths, patient_filter=set(split.test))

    params = init_params(cfg_model, seed=cfg_train.seed)
    params, state, history = TR.train(
        params,
        cfg_model,
        train_data,
        cfg_train,
        log_path=paths.get("log"),
        checkpoint_path=paths["checkpoint"],
    )
    report = TR.evaluate(params, cfg_model, test_data, num_workers=cfg_train.num_workers)
    if "metrics" in paths:
        with open(paths["metrics"], "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    click.echo(report.render_text())
    click.echo(f"final training loss {history[-1]['loss']:.6f}; checkpoint {paths['checkpoint']}")


@cli.command(name="eval", context_settings=_CTX)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None, help="Run configuration TOML (for --checkpoint mode).")
@click.option("--checkpoint", "checkpoint_path", type=click.Path(exists=True), default=None, help="Checkpoint to evaluate.")
@click.option("--split", type=click.Choice(["train", "test"]), default="test", show_default=True, help="Patient-wise split side.")
@click.option("--split-ratio", type=float, default=0.7, show_default=True)
@click.option("--split-seed", type=int, default=0, show_default=True)
@click.option("--predictions", "predictions_path", type=click.Path(exists=True), default=None, help="JSONL of {au_id, prob, truth} rows to score instead of a checkpoint.")
@click.option("--out", "out_path", type=click.Path(), default=None, help="Write the report JSON here.")
def eval_cmd(config_path, checkpoint_path, split, split_ratio, split_seed, predictions_path, out_path):
    """Score a checkpoint on a patient-wise split, or score a prediction
    file directly."""
    if (checkpoint_path is None) == (predictions_path is None):
        raise click.UsageError("provide exactly one of --checkpoint or --predictions")
    if predictions_path is not None:
        counters: dict[int, ME.ConfusionCounter] = {}
        with open(predictions_path, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                row = json.loads(line)
                au = int(row["au_id"])
                counters.setdefault(au, ME.ConfusionCounter(au))
                ME.update(counters[au], float(row["prob"]), int(row["truth"]))
        report = ME.report(list(counters.values()))
    else:
        if config_path is None:
            raise click.UsageError("--checkpoint mode requires --config")
        run = load_run_config(config_path)
        cfg_model: ModelConfig = run["model"]
        paths = run["paths"]
        _require_paths(paths, "manifest", "annotations", "crops")
        params, _, _ = load_checkpoint(checkpoint_path, cfg_model)
        all_frames = D.load_manifest(paths["manifest"])
        splits = D.split_by_patient({f.patient_id for f in all_frames}, ratio=split_ratio, seed=split_seed)
        chosen = set(splits.train if split == "train" else splits.test)
        data = _build_dataset(cfg_model, paths, patient_filter=chosen)
        report = TR.evaluate(params, cfg_model, data, num_workers=run["train"].num_workers)
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    click.echo(report.render_text())


@cli.command(context_settings=_CTX)
@click.option("--config", "config_path", required=True, type=click.Path(exists=True), help="Run configuration TOML.")
@click.option("--checkpoint", "checkpoint_path", required=True, type=click.Path(exists=True), help="Trained checkpoint.")
@click.option("--frames", "frames_dir", required=True, type=click.Path(exists=True), help="Directory of frames (PNG/PPM).")
@click.option("--landmarks", "landmarks_path", type=click.Path(exists=True), default=None, help="Landmark CSV; when given, frames are aligned first.")
@click.option("--intensities", "intensities_path", type=click.Path(exists=True), default=None, help="JSONL of {frame_id, intensities} rows; adds a PSPI score per listed frame.")
@click.option("--out", "out_path", required=True, type=click.Path(), help="Output JSONL.")
def infer(config_path, checkpoint_path, frames_dir, landmarks_path, intensities_path, out_path):
    """Per-frame AU probabilities (and PSPI when intensities are supplied)
    as JSON lines, sorted by frame id."""
    run = load_run_config(config_path)
    cfg_model: ModelConfig = run["model"]
    params, _, _ = load_checkpoint(checkpoint_path, cfg_model)

    names = sorted(
        f for f in os.listdir(frames_dir) if os.path.splitext(f)[1].lower() in (".png", ".ppm")
    )
    if not names:
        raise ValueError(f"no frames found in {frames_dir}")
    frame_ids = [os.path.splitext(n)[0] for n in names]

    landmark_sets = A.load_landmarks(landmarks_path) if landmarks_path else None
    template = A.CanonicalTemplate.default().scaled(cfg_model.input_size)
    images = []
    for name, fid in zip(names, frame_ids):
        raster = read_image(os.path.join(frames_dir, name))
        if landmark_sets is not None:
            if fid not in landmark_sets:
                raise ValueError(f"no landmarks for frame {fid!r}")
            t = A.estimate_similarity(landmark_sets[fid], template)
            raster = A.warp_crop(raster, t, cfg_model.input_size)
        elif raster.shape[0] != cfg_model.input_size or raster.shape[1] != cfg_model.input_size:
            raise ValueError(
                f"{name}: frame is {raster.shape[0]}x{raster.shape[1]} but the model wants "
                f"{cfg_model.input_size}; supply --landmarks to align"
            )
        images.append(A.normalize(raster).data)

    probs = TR.predict_probs(params, cfg_model, np.stack(images))
    if not np.all(np.isfinite(probs)):
        raise FloatingPointError("inference produced non-finite probabilities")

    intensities = {}
    if intensities_path:
        with open(intensities_path, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    row = json.loads(line)
                    intensities[row["frame_id"]] = {int(k): v for k, v in row["intensities"].items()}

    with open(out_path, "w", encoding="utf-8") as fh:
        for fid, row in zip(frame_ids, probs):
            record = {
                "frame_id": fid,
                "probabilities": {str(au): float(p) for au, p in zip(cfg_model.au_ids, row)},
            }
            if fid in intensities:
                record["pspi"] = P.pspi(intensities[fid])
            fh.write(json.dumps(record, sort_keys=True) + "\n")
    click.echo(f"wrote {len(frame_ids)} predictions to {out_path}")


@cli.command(context_settings=_CTX)
@click.option("--annotations", "annotations_path", required=True, type=click.Path(exists=True), help="Annotation JSONL journal.")
@click.option("--reports", "reports_path", required=True, type=click.Path(exists=True), help="Pain-report CSV.")
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True), help="Frame manifest CSV.")
@click.option("--out", "out_prefix", required=True, type=click.Path(), help="Output prefix; writes PREFIX.csv and PREFIX.json.")
def analyze(annotations_path, reports_path, manifest_path, out_prefix):
    """AU-presence by pain-category association table."""
    store = D.AnnotationStore(annotations_path)
    frames = D.load_manifest(manifest_path)
    reports = D.load_pain_reports(reports_path)
    labels_by_frame = {
        fid: D.consolidate_labels(store.docs_for_frame(fid)) for fid in store.annotated_frame_ids()
    }
    table = P.association_table(frames, labels_by_frame, reports)
    with open(out_prefix + ".csv", "w", encoding="utf-8") as fh:
        fh.write(table.to_csv())
    with open(out_prefix + ".json", "w", encoding="utf-8") as fh:
        json.dump(table.to_json_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    click.echo(f"wrote {out_prefix}.csv and {out_prefix}.json")


@cli.command(context_settings=_CTX)
@click.option("--config", "config_path", type=click.Path(exists=True), default=None, help="Run configuration TOML (defaults to the toy model).")
@click.option("--grid-sides", default="8,16,32", show_default=True, help="Comma-separated token-grid sides to tabulate.")
def bench(config_path, grid_sides):
    """Attention multiply-accumulate counts, windowed vs full."""
    cfg = load_run_config(config_path)["model"] if config_path else ModelConfig()
    dim = cfg.dims[0]
    m = cfg.window_size
    click.echo(f"attention MACs per block (dim {dim}, window {m}x{m})")
    click.echo(f"{'tokens':>8}{'full':>14}{'windowed':>14}{'ratio':>8}")
    for side in (int(s) for s in grid_sides.split(",")):
        n = side * side
        full = attention_block_macs(n, dim)["qk"]
        win = attention_block_macs(n, dim, m)["qk"]
        click.echo(f"{n:>8}{full:>14}{win:>14}{full / win:>8.1f}")
    click.echo("")
    click.echo(f"per-stage totals for the configured model ({cfg.attention_mode} mode)")
    click.echo(f"{'stage':>6}{'tokens':>8}{'dim':>6}{'blocks':>8}{'qk_total':>14}{'av_total':>14}")
    for row in attention_macs(cfg):
        click.echo(
            f"{row['stage']:>6}{row['tokens']:>8}{row['dim']:>6}{row['blocks']:>8}"
            f"{row['qk_total']:>14}{row['av_total']:>14}"
        )


@cli.command(context_settings=_CTX)
@click.option("--manifest", "manifest_path", required=True, type=click.Path(exists=True), help="Frame manifest CSV.")
@click.option("--annotations", "annotations_path", required=True, type=click.Path(), help="Annotation JSONL journal (created if absent).")
@click.option("--reports", "reports_path", type=click.Path(exists=True), default=None, help="Pain-report CSV for the association endpoint.")
@click.option("--metrics", "metrics_path", type=click.Path(), default=None, help="Latest evaluation report JSON.")
@click.option("--static", "static_dir", type=click.Path(exists=True), default=None, help="Console static files to serve at /.")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8000, show_default=True, type=int)
@click.option("--cors/--no-cors", default=False, show_default=True, help="Permissive CORS for a separately served console.")
@click.option("--order", type=click.Choice(["ascending", "random"]), default="ascending", show_default=True, help="Frame assignment order.")
def serve(manifest_path, annotations_path, reports_path, metrics_path, static_dir, host, port, cors, order):
    """Run the annotation service (and console, when --static is given)."""
    import uvicorn

    from .service import ServiceState, create_app

    state = ServiceState(
        store=D.AnnotationStore(annotations_path),
        frames=D.load_manifest(manifest_path),
        reports=D.load_pain_reports(reports_path) if reports_path else [],
        metrics_path=metrics_path,
        static_dir=static_dir,
        assignment_order=order,
    )
    uvicorn.run(create_app(state, cors=cors), host=host, port=port)


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.exceptions.Abort:
        return 1
    except click.UsageError as exc:
        click.echo(f"usage error: {exc.format_message()}", err=True)
        return 1
    except FloatingPointError as exc:
        click.echo(f"numeric failure: {exc}", err=True)
        return 3
    except (ValueError, KeyError, OSError, json.JSONDecodeError) as exc:
        click.echo(f"error: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
