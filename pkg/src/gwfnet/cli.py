"""Command-line entry point: preprocess, train, verify, sweep, synth.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 I/O or format error.
"""

from __future__ import annotations

import logging
import sys
from pathlib import Path

import click
import numpy as np

from . import dataio
from .errors import ConfigError, DomainError, FormatError, InputError, ShapeError, StateError
from .model import _BASES, architecture, build_preset, parse_preset
from .sampler import aggregate_video
from .training import (
    ClipDataset,
    Sample,
    TrainedArtifacts,
    TrainingConfig,
    augment_dataset,
    build_fold_plan,
    evaluate,
    fine_tune,
    fmt,
    holdout_split,
    train,
)
from .verify import SUITES, run_suites

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("gwfnet")


# -- shared helpers ---------------------------------------------------------------------


def preset_spatial(preset: str) -> tuple[int, int]:
    return _BASES[parse_preset(preset)[0]].spatial


def load_dataset(manifest_path, target=None, window_size: int = 5, max_frames: int = 100,
                 allow_any_size: bool = False) -> ClipDataset:
    """Clips from a manifest whose entries are clip files or raw frame directories."""
    manifest = dataio.read_manifest(manifest_path)
    if len(manifest) == 0:
        raise ConfigError(f"manifest {manifest_path} has no entries")
    samples = []
    for entry in manifest.entries:
        try:
            if entry.path.is_dir():
                if target is None:
                    raise ConfigError("raw frame directories need a target frame size")
                seq = dataio.load_frame_sequence(entry.path, target, entry.bbox_path)
                voxels = aggregate_video(seq, window_size, max_frames, entry.clip_id, allow_any_size).voxels
            else:
                voxels = dataio.read_clip(entry.path).voxels
        except (OSError, FormatError, InputError) as exc:
            raise type(exc)(f"entry {entry.path}: {exc}") from exc
        samples.append(Sample(voxels.astype(np.float32), manifest.label_index(entry), entry.clip_id, entry.clip_id, entry.subject))
    shapes = {s.voxels.shape for s in samples}
    if len(shapes) != 1:
        raise ShapeError(f"manifest clips differ in shape: {sorted(shapes)}")
    return ClipDataset(samples, manifest.class_names)


def _is_raw(manifest_path) -> bool:
    return all(e.path.is_dir() for e in dataio.read_manifest(manifest_path).entries)


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _splits(dataset: ClipDataset, folds: int, config: TrainingConfig, group_by: str):
    if folds == 1:
        return [holdout_split(dataset, config.train_fraction, config.seed, group_by)]
    return build_fold_plan(dataset, folds, config.seed, group_by).folds


def run_folds(dataset: ClipDataset, preset: str, config: TrainingConfig, folds: int, group_by: str = "source",
              out_dir: Path | None = None, pretrained: TrainedArtifacts | None = None, trainable=None,
              adapter: str | None = None, echo=click.echo) -> list[tuple[float, float]]:
    """Train and evaluate every fold; returns ``(train_acc, test_acc)`` per fold."""
    results = []
    for k, (train_idx, test_idx) in enumerate(_splits(dataset, folds, config, group_by)):
        tr, te = dataset.subset(train_idx), dataset.subset(test_idx)
        if pretrained is not None:
            art, logs = fine_tune(pretrained, tr, config, trainable or ("Conv4", "FC1"), adapter, te)
        else:
            model = build_preset(preset, window_count=tr.samples[0].voxels.shape[2], rng=config.seed,
                                 dropout_rate=config.dropout_rate)
            art, logs = train(model, None, tr, config, trainable, te)
        adapted_tr = tr if pretrained is None else _adapted(tr, art, adapter)
        adapted_te = te if pretrained is None else _adapted(te, art, adapter)
        train_acc = evaluate(art, adapted_tr).accuracy
        test_acc = evaluate(art, adapted_te).accuracy if len(te) else float("nan")
        results.append((train_acc, test_acc))
        echo(f"fold {k}\ttrain_acc {fmt(train_acc)}\ttest_acc {fmt(test_acc)}")
        if out_dir is not None:
            _write(out_dir / f"fold{k}_cnn.tsv", logs["cnn"].to_tsv())
            _write(out_dir / f"fold{k}_lstm.tsv", logs["lstm"].to_tsv())
            meta = {"seed": config.seed, "epoch": config.epochs, "num_classes": art.lstm.num_classes,
                    "class_names": art.class_names, "fold": k}
            dataio.save_checkpoint(out_dir / f"fold{k}.ckpt", art.model, art.lstm, meta, art.head)
    return results


def _adapted(ds: ClipDataset, art: TrainedArtifacts, adapter):
    from .training import fit_dataset

    return fit_dataset(ds, art.model, adapter)


def summarize(results) -> tuple[float, float]:
    acc = np.array([r[1] for r in results], dtype=np.float64)
    return float(np.mean(acc)), float(np.std(acc))


def _config(**kw) -> TrainingConfig:
    return TrainingConfig(**{k: v for k, v in kw.items() if v is not None})


def _parse_range(text: str) -> list[int]:
    try:
        if ".." in text:
            lo, hi = (int(v) for v in text.split(".."))
            values = list(range(lo, hi + 1))
        else:
            values = [int(v) for v in text.split(",")]
    except ValueError as exc:
        raise ConfigError(f"cannot parse range {text!r}") from exc
    if not values:
        raise ConfigError(f"empty range {text!r}")
    return values


# -- commands ------------------------------------------------------------------------------


@click.group()
@click.option("-v", "--verbose", is_flag=True, help="Log per-epoch progress.")
def cli(verbose):
    """Gaussian-weighted frame aggregation + 3D CNN + LSTM action recognition."""
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING, format="%(levelname)s %(message)s")


@cli.command("preprocess")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False), help="Raw manifest (frame directories).")
@click.option("--window-size", default=5, show_default=True, type=int)
@click.option("--max-frames", default=100, show_default=True, type=int)
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--preset", default="kth", show_default=True, help="Preset whose input size sets the crop target.")
@click.option("--size", default=None, help="Explicit crop target HxW, overrides --preset.")
def cmd_preprocess(manifest, window_size, max_frames, out_dir, preset, size):
    """Aggregate raw frame directories into clip files plus a clip manifest."""
    target = _parse_size(size) if size else preset_spatial(preset)
    dataset = load_dataset(manifest, target, window_size, max_frames)
    raw = dataio.read_manifest(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for sample, entry in zip(dataset.samples, raw.entries):
        path = out / f"{entry.clip_id}.gwfc"
        dataio.write_clip(path, sample.voxels)
        entries.append(dataio.ManifestEntry(path, entry.label, entry.subject))
    dataio.write_manifest(out / "manifest.tsv", entries)
    shape = "x".join(str(s) for s in dataset.samples[0].voxels.shape)
    click.echo(f"preprocessed {len(dataset)} clips of shape {shape} -> {out / 'manifest.tsv'}")


def _parse_size(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError as exc:
        raise ConfigError(f"--size must look like 34x54, got {text!r}") from exc
    return h, w


@cli.command("train")
@click.option("--preset", default="kth", show_default=True)
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--folds", default=5, show_default=True, type=int, help="1 = single train/test split.")
@click.option("--epochs", default=300, show_default=True, type=int)
@click.option("--lstm-epochs", default=None, type=int, help="Defaults to --epochs.")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--fine-tune-from", default=None, type=click.Path(dir_okay=False))
@click.option("--trainable", default=None, help="Comma-separated layer names, e.g. Conv4,FC1.")
@click.option("--out-dir", default="runs", show_default=True, type=click.Path(file_okay=False))
@click.option("--batch-size", default=16, show_default=True, type=int)
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--dropout", default=0.4, show_default=True, type=float)
@click.option("--augment-to", default=0, show_default=True, type=int, help="Grow the dataset to this many clips.")
@click.option("--group-by", default="source", show_default=True, type=click.Choice(["source", "subject"]))
@click.option("--adapter", default=None, type=click.Choice(["crop-pad"]))
@click.option("--window-size", default=5, show_default=True, type=int, help="Used for raw manifests.")
@click.option("--max-frames", default=100, show_default=True, type=int)
def cmd_train(preset, manifest, folds, epochs, lstm_epochs, seed, fine_tune_from, trainable, out_dir, batch_size,
              lr, dropout, augment_to, group_by, adapter, window_size, max_frames):
    """Two-step training with cross-validation; writes checkpoints and metrics."""
    config = _config(epochs=epochs, lstm_epochs=lstm_epochs, seed=seed, batch_size=batch_size, base_lr=lr,
                     dropout_rate=dropout, folds=folds)
    pretrained = None
    if fine_tune_from:
        loaded = dataio.load_checkpoint(fine_tune_from)
        if loaded.head is None or loaded.lstm is None:
            raise FormatError(f"{fine_tune_from} lacks the classifier head or LSTM")
        preset = loaded.model.spec.name
        names = loaded.meta.extra.get("class_names", [str(i) for i in range(loaded.meta.num_classes)])
        pretrained = TrainedArtifacts(loaded.model, loaded.head, loaded.lstm, names, config.policy,
                                      {"source": str(fine_tune_from)})
    parse_preset(preset)
    layers = [t.strip() for t in trainable.split(",") if t.strip()] if trainable else None
    if layers is not None:
        known = architecture(preset).parametric_layers
        unknown = sorted(set(layers) - set(known))
        if unknown:
            raise ConfigError(f"unknown --trainable layers {unknown}; known: {known}")
    dataset = load_dataset(manifest, preset_spatial(preset), window_size, max_frames)
    if augment_to:
        dataset = augment_dataset(dataset, augment_to)
    results = run_folds(dataset, preset, config, folds, group_by, Path(out_dir), pretrained, layers, adapter)
    rows = ["fold\ttrain_acc\ttest_acc"] + [f"{k}\t{fmt(a)}\t{fmt(b)}" for k, (a, b) in enumerate(results)]
    _write(Path(out_dir) / "summary.tsv", "\n".join(rows) + "\n")
    mean, std = summarize(results)
    click.echo(f"accuracy {fmt(mean)} ± {fmt(std)} over {len(results)} fold(s)")


@cli.command("verify")
@click.option("--suite", default="all", show_default=True, type=click.Choice(sorted(SUITES) + ["all"]))
def cmd_verify(suite):
    """Run invariant checks; exit code 1 if any fails."""
    names = sorted(SUITES) if suite == "all" else [suite]
    checks = run_suites(names)
    for check in checks:
        click.echo(check.line())
    failed = sum(not c.passed for c in checks)
    click.echo(f"{len(checks) - failed}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


@cli.command("sweep")
@click.option("--param", "param", required=True, type=click.Choice(["window-size", "layers"]))
@click.option("--range", "range_", default=None, help="e.g. 3..8 (window-size) or 5..8 (layers).")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--epochs", default=300, show_default=True, type=int)
@click.option("--lstm-epochs", default=None, type=int)
@click.option("--preset", default="kth", show_default=True)
@click.option("--folds", default=5, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--batch-size", default=16, show_default=True, type=int)
@click.option("--lr", default=1e-4, show_default=True, type=float)
@click.option("--dropout", default=0.4, show_default=True, type=float)
@click.option("--max-frames", default=100, show_default=True, type=int)
@click.option("--window-size", default=5, show_default=True, type=int, help="Fixed size for the layers sweep.")
@click.option("--out", default="sweep.tsv", show_default=True, type=click.Path(dir_okay=False))
def cmd_sweep(param, range_, manifest, epochs, lstm_epochs, preset, folds, seed, batch_size, lr, dropout,
              max_frames, window_size, out):
    """Retrain from scratch per setting; table of mean ± std test accuracy."""
    config = _config(epochs=epochs, lstm_epochs=lstm_epochs, seed=seed, batch_size=batch_size, base_lr=lr,
                     dropout_rate=dropout, folds=folds)
    base, _ = parse_preset(preset)
    values = _parse_range(range_ or ("3..8" if param == "window-size" else "5..8"))
    if param == "window-size":
        bad = [v for v in values if not 3 <= v <= 8]
        if bad:
            raise ConfigError(f"window sizes {bad} outside 3..8")
        for v in values:
            if max_frames // v < 9:
                raise ConfigError(f"window size {v} leaves {max_frames // v} frames; the CNN needs at least 9")
    else:
        bad = [v for v in values if not 5 <= v <= 8]
        if bad:
            raise ConfigError(f"layer counts {bad} outside 5..8")
    manifest_entries = dataio.read_manifest(manifest)
    if len(manifest_entries) == 0:
        raise ConfigError(f"manifest {manifest} has no entries")
    if param == "window-size" and not _is_raw(manifest):
        raise ConfigError("a window-size sweep needs a raw manifest of frame directories")
    target = _BASES[base].spatial
    rows = [f"{param}\tmean_acc\tstd_acc"]
    fixed = None if param == "window-size" else load_dataset(manifest, target, window_size, max_frames)
    for v in values:
        if param == "window-size":
            dataset, name = load_dataset(manifest, target, v, max_frames), base
        else:
            dataset, name = fixed, f"{base}-{v}"
        click.echo(f"{param} = {v}")
        mean, std = summarize(run_folds(dataset, name, config, folds))
        rows.append(f"{v}\t{fmt(mean)}\t{fmt(std)}")
    table = "\n".join(rows) + "\n"
    _write(Path(out), table)
    click.echo(table, nl=False)


@cli.command("synth")
@click.option("--out-dir", required=True, type=click.Path(file_okay=False))
@click.option("--per-class", default=6, show_default=True, type=int)
@click.option("--size", default="16x16", show_default=True)
@click.option("--frames", default=100, show_default=True, type=int)
@click.option("--seed", default=0, show_default=True, type=int)
def cmd_synth(out_dir, per_class, size, frames, seed):
    """Write a synthetic moving-square dataset as PGM frame directories."""
    from .synthetic import write_moving_square_raw

    path = write_moving_square_raw(out_dir, per_class, _parse_size(size), frames, seed=seed)
    click.echo(f"wrote {2 * per_class} clips -> {path}")


# -- entry point ----------------------------------------------------------------------------


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, DomainError, ShapeError, StateError)):
        return EXIT_CONFIG
    if isinstance(exc, (FormatError, InputError, OSError)):
        return EXIT_IO
    raise exc


def main(argv=None) -> int:
    try:
        rv = cli.main(args=argv, prog_name="gwfnet", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return exc.exit_code
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_VERIFY
    except (ConfigError, DomainError, ShapeError, StateError, FormatError, InputError, OSError) as exc:
        click.echo(f"error: {exc}", err=True)
        return exit_code_for(exc)
    return rv if isinstance(rv, int) else EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
