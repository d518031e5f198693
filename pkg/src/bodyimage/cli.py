"""``bodyimage`` command line: gen-data, train, segment, eval, sweep.

Every command reads one TOML config and works inside its workspace
directory.  Each stage writes a JSON manifest naming the config hash it was
built from and the sha256 of every artifact it wrote; downstream stages
refuse to run on top of a manifest whose hash disagrees with the current
config unless ``--force`` is given.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, netpbm, plotting
from .autodiff import CheckpointError
from .config import PRESETS, ConfigError, PipelineConfig, load_config, preset_text
from .dataset import DatasetFormatError, denormalize_motor, generate_dataset, load_dataset, make_record, save_dataset
from .evaluation import error_histogram, evaluate_dataset, histogram_csv, motor_sweep
from .model import NetworkParams, config_dict, train
from .segmentation import DegenerateDataError, apply_mask, collect_error_samples, extract_mask, fit_gmm2

log = logging.getLogger("bodyimage")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

TRAIN_FILE = "train.smbi"
TEST_FILE = "test.smbi"
CHECKPOINT = "model.smnn"
GMM_FILE = "gmm.txt"
THRESHOLD_FILE = "threshold.txt"


class StageError(Exception):
    """A data or validation problem that should end the command with exit code 2."""


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def manifest_path(workspace: Path, stage: str) -> Path:
    return workspace / f"{stage}.manifest.json"


def write_manifest(cfg: PipelineConfig, stage: str, artifacts: list[Path], extra: dict | None = None) -> Path:
    ws = cfg.workspace
    doc = {
        "stage": stage,
        "version": __version__,
        "config_hash": cfg.stage_hash(stage),
        "artifacts": {p.relative_to(ws).as_posix(): _sha256(p) for p in sorted(artifacts)},
    }
    if extra:
        doc.update(extra)
    path = manifest_path(ws, stage)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def read_manifest(cfg: PipelineConfig, stage: str, force: bool) -> dict:
    """Load an upstream manifest and check it still matches the config and files on disk."""
    path = manifest_path(cfg.workspace, stage)
    if not path.exists():
        raise StageError(f"{path}: missing; run `bodyimage {stage}` first")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise StageError(f"{path}: unreadable manifest ({exc})") from None
    problems = []
    if doc.get("config_hash") != cfg.stage_hash(stage):
        problems.append(f"{path.name} was built from a different config")
    for name, digest in doc.get("artifacts", {}).items():
        artifact = cfg.workspace / name
        if not artifact.exists():
            raise StageError(f"{artifact}: missing; run `bodyimage {stage}` again")
        if _sha256(artifact) != digest:
            problems.append(f"{name} changed since {stage} wrote it")
    if problems:
        if not force:
            raise StageError("; ".join(problems) + " (use --force to proceed anyway)")
        for p in problems:
            log.warning("%s; continuing because of --force", p)
    return doc


def _workspace(cfg: PipelineConfig) -> Path:
    cfg.workspace.mkdir(parents=True, exist_ok=True)
    return cfg.workspace


# ---------------------------------------------------------------------------
# Shared loaders
# ---------------------------------------------------------------------------


def _load_dataset(path: Path):
    try:
        return load_dataset(path)
    except FileNotFoundError:
        raise StageError(f"{path}: missing; run `bodyimage gen-data` first") from None


def _load_model(cfg: PipelineConfig, force: bool) -> NetworkParams:
    path = cfg.workspace / CHECKPOINT
    if not path.exists():
        raise StageError(f"{path}: no checkpoint; run `bodyimage train` first")
    read_manifest(cfg, "train", force)
    return NetworkParams.load(path, cfg.scene.image_dims, cfg.scene.geometry.n_joints)


def _load_threshold(cfg: PipelineConfig, force: bool) -> float:
    read_manifest(cfg, "segment", force)
    path = cfg.workspace / THRESHOLD_FILE
    try:
        return float(path.read_text())
    except ValueError:
        raise StageError(f"{path}: not a number") from None


def probe_motors(cfg: PipelineConfig) -> np.ndarray:
    """Uniform probe inputs for the error histogram, drawn from the segment seed."""
    rng = np.random.default_rng(cfg.segment.seed)
    return rng.uniform(-1.0, 1.0, size=(cfg.segment.probe_size, cfg.scene.geometry.n_joints))


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_data(cfg: PipelineConfig, force: bool = False) -> list[Path]:
    """Render the train and test sets from independent children of the dataset seed."""
    ws = _workspace(cfg)
    train_seed, test_seed = np.random.SeedSequence(cfg.dataset.seed).spawn(2)
    train_set = generate_dataset(cfg.dataset.n_train, cfg.scene, train_seed)
    test_set = generate_dataset(cfg.dataset.n_test, cfg.scene, test_seed)
    paths = [ws / TRAIN_FILE, ws / TEST_FILE]
    save_dataset(train_set, paths[0])
    save_dataset(test_set, paths[1])
    log.info("wrote %d training and %d test records", len(train_set), len(test_set))

    n = min(8, len(train_set))
    preview = netpbm.tile(train_set.images[None, :n])
    masks = netpbm.tile(train_set.masks[None, :n].astype(np.float32), fill=0.0)
    paths += [ws / "dataset_preview.ppm", ws / "dataset_masks.pgm"]
    netpbm.write_ppm(paths[2], preview)
    netpbm.write_pgm(paths[3], masks.max(axis=-1))
    write_manifest(cfg, "gen-data", paths, {"records": {"train": len(train_set), "test": len(test_set)}})
    return paths


def cmd_train(cfg: PipelineConfig, force: bool = False) -> list[Path]:
    ws = _workspace(cfg)
    checkpoint = ws / CHECKPOINT
    if checkpoint.exists() and not force:
        raise StageError(f"{checkpoint}: checkpoint exists; use --force to retrain")
    read_manifest(cfg, "gen-data", force)
    data = _load_dataset(ws / TRAIN_FILE)
    if data.image_dims != cfg.scene.image_dims or data.motor_dim != cfg.scene.geometry.n_joints:
        raise StageError(f"{ws / TRAIN_FILE}: shape does not match the scene config")
    result = train(data.motors, data.images, cfg.train, progress_every=100)
    result.params.save(checkpoint)
    history = ws / "loss_history.csv"
    history.write_text(result.history_csv())
    figure = ws / "loss_history.png"
    plotting.plot_loss_history(result.history, figure)
    write_manifest(cfg, "train", [checkpoint, history, figure],
                   {"train_config": config_dict(cfg.train), "dataset_sha256": _sha256(ws / TRAIN_FILE)})
    return [checkpoint, history, figure]


def cmd_segment(cfg: PipelineConfig, force: bool = False, model=None) -> list[Path]:
    """Fit the mixture to predicted errors on the probe inputs and pick the threshold.

    ``model`` is anything with ``predict(motors) -> (images, errors)``; by
    default the trained checkpoint.
    """
    ws = _workspace(cfg)
    model = model if model is not None else _load_model(cfg, force)
    motors = probe_motors(cfg)
    samples = collect_error_samples(model, motors)
    seg = cfg.segment
    try:
        fit = fit_gmm2(samples, max_iters=seg.max_iters, tol=seg.tol)
    except DegenerateDataError as exc:
        raise StageError(f"segment: {exc}") from None
    log.info("GMM means %.4f / %.4f, threshold %.4f", fit.means[0], fit.means[1], fit.threshold)

    gmm, threshold = ws / GMM_FILE, ws / THRESHOLD_FILE
    gmm.write_text(fit.to_record())
    threshold.write_text(f"{fit.threshold!r}\n")
    upper = max(float(samples.max()), fit.means[1] + 3 * fit.variances[1] ** 0.5)
    edges, mass = error_histogram(samples, seg.bins, (0.0, upper))
    hist_csv, hist_png = ws / "histogram.csv", ws / "histogram.png"
    hist_csv.write_text(histogram_csv(edges, mass))
    plotting.plot_error_histogram(edges, mass, fit, hist_png)
    paths = [gmm, threshold, hist_csv, hist_png]

    k = min(seg.mask_samples, len(motors))
    if k:
        images, errors = model.predict(motors[:k])
        masks = extract_mask(errors, fit.threshold)
        sample_dir = ws / "segment_samples"
        sample_dir.mkdir(exist_ok=True)
        for i in range(k):
            names = (f"prediction_{i}.ppm", f"mask_{i}.pgm", f"body_{i}.pam")
            netpbm.write_ppm(sample_dir / names[0], images[i])
            netpbm.write_pgm(sample_dir / names[1], masks[i].all(axis=-1))
            netpbm.write_pam(sample_dir / names[2], apply_mask(images[i], masks[i]))
            paths += [sample_dir / n for n in names]
        # render the probe poses too, so the figure can show what the camera would see
        bg_seeds = np.random.SeedSequence(seg.seed).spawn(k)
        targets = np.stack([make_record(denormalize_motor(m, cfg.scene.ranges), cfg.scene, s).sensory
                            for m, s in zip(motors[:k], bg_seeds)])
        examples = ws / "segment_examples.png"
        plotting.plot_examples(targets, images, errors, masks, examples)
        paths.append(examples)
    write_manifest(cfg, "segment", paths, {"n_samples": int(samples.size), "n_probe": len(motors)})
    return paths


def cmd_eval(cfg: PipelineConfig, force: bool = False, model=None, threshold: float | None = None) -> list[Path]:
    ws = _workspace(cfg)
    read_manifest(cfg, "gen-data", force)
    model = model if model is not None else _load_model(cfg, force)
    threshold = threshold if threshold is not None else _load_threshold(cfg, force)
    test_set = _load_dataset(ws / TEST_FILE)
    report = evaluate_dataset(model, threshold, test_set)
    csv, summary, figure = ws / "eval.csv", ws / "eval_summary.txt", ws / "eval_metrics.png"
    csv.write_text(report.to_csv())
    summary.write_text(report.summary())
    plotting.plot_metric_distribution(report, figure)

    n = min(8, len(test_set))
    images, errors = model.predict(test_set.motors[:n])
    masks = extract_mask(errors, threshold)
    examples = ws / "eval_examples.png"
    plotting.plot_examples(test_set.images[:n], images, errors, masks, examples)
    write_manifest(cfg, "eval", [csv, summary, figure, examples])
    print(report.summary(), end="")
    return [csv, summary, figure, examples]


def cmd_sweep(cfg: PipelineConfig, force: bool = False, model=None, threshold: float | None = None) -> list[Path]:
    """Sweep each motor dimension across its range with the others at the reference pose.

    Each tiled image has one row per motor dimension and one column per step.
    """
    ws = _workspace(cfg)
    model = model if model is not None else _load_model(cfg, force)
    threshold = threshold if threshold is not None else _load_threshold(cfg, force)
    grid = motor_sweep(model, cfg.sweep.steps, threshold, cfg.scene.geometry.n_joints)
    scale = max(float(grid.errors.max()), 1e-12)
    paths = [ws / "sweep_images.ppm", ws / "sweep_errors.ppm", ws / "sweep_masks.ppm", ws / "sweep_body.ppm"]
    netpbm.write_ppm(paths[0], netpbm.tile(grid.images))
    netpbm.write_ppm(paths[1], netpbm.tile(grid.errors / scale))
    netpbm.write_ppm(paths[2], netpbm.tile(grid.masks.astype(np.float32)))
    netpbm.write_ppm(paths[3], netpbm.tile(np.where(grid.masks, np.clip(grid.images, 0, 1), 0.0)))
    figure = ws / "sweep.png"
    plotting.plot_sweep(grid, figure)
    paths.append(figure)
    write_manifest(cfg, "sweep", paths, {"values": grid.values.tolist()})
    return paths


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the training and test datasets"),
    "train": (cmd_train, "train the forward model"),
    "segment": (cmd_segment, "fit the error mixture and pick the body threshold"),
    "eval": (cmd_eval, "score mask and appearance match on the test set"),
    "sweep": (cmd_sweep, "render predictions across each motor dimension"),
}


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1; exit 2 is reserved for bad data
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bodyimage", description="Learn a body image from sensorimotor prediction errors.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("config", type=Path, help="pipeline config (TOML)")
        p.add_argument("--workspace", type=Path, help="override the workspace directory")
        p.add_argument("--seed", type=int, help="override every stage seed")
        p.add_argument("--force", action="store_true", help="overwrite artifacts and ignore hash mismatches")
        p.add_argument("-q", "--quiet", action="store_true", help="only report warnings and errors")

    p = sub.add_parser("init-config", help="write a preset config file", description="write a preset config file")
    p.add_argument("--preset", choices=PRESETS, default="desk")
    p.add_argument("-o", "--output", type=Path, help="destination (default: stdout)")
    p.add_argument("--force", action="store_true", help="overwrite an existing file")
    return parser


def _init_config(args) -> int:
    text = preset_text(args.preset)
    if args.output is None:
        sys.stdout.write(text)
        return EXIT_OK
    if args.output.exists() and not args.force:
        raise StageError(f"{args.output}: exists; use --force to overwrite")
    args.output.write_text(text)
    return EXIT_OK


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.workspace is not None:
        cfg = PipelineConfig(cfg.scene, cfg.dataset, cfg.train, cfg.segment, cfg.sweep, args.workspace)
    return cfg


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "init-config":
            return _init_config(args)
        logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                            format="%(levelname)s %(message)s")
        cfg = resolve_config(args)
        COMMANDS[args.command][0](cfg, force=args.force)
    except (ConfigError, StageError, DatasetFormatError, CheckpointError) as exc:
        print(f"bodyimage: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
