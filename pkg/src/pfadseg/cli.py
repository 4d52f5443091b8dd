"""Command-line entry points.

Commands: train-student, train-seg, evaluate, visualize, synth-preview.
Every command writes into a run directory that records enough provenance to
reproduce it (config snapshot, seed, teacher digest, version string). Existing
run directories are never touched unless --overwrite is passed.
"""

from __future__ import annotations

import argparse
import json
import os
import shutil
import subprocess
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .data import (
    NormalImageStore,
    TextureStore,
    ingest_dataset,
    load_image,
    load_mask,
    save_image,
)
from .exceptions import ConfigurationError, DatasetValidationError
from .metrics import (
    CategoryMetrics,
    aggregate_metrics,
    compute_category_metrics,
    write_report_csv,
    write_report_json,
)
from .segmentation import image_score
from .synthesis import sample_training_pair
from .training import (
    Checkpoint,
    InferenceEngine,
    TrainConfig,
    build_teacher,
    load_config,
    save_config,
    synthesis_config,
    train_segmentation,
    train_student,
)
from .visualization import load_prob_array, save_heatmap, save_prob_array, save_prob_png


def version_string() -> str:
    """Best-effort `git describe` of the source tree, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--tags", "--always", "--dirty"],
            cwd=Path(__file__).resolve().parent,
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


# run directory prepared by the current invocation; error records only ever
# land in a directory this process created or wiped itself
_active_run_dir: Path | None = None


def prepare_run_dir(path: Path, overwrite: bool) -> Path:
    global _active_run_dir
    if path.exists() and any(path.iterdir()):
        if not overwrite:
            raise ConfigurationError(
                f"run directory {path} already exists; pass --overwrite to replace it"
            )
        shutil.rmtree(path)
    path.mkdir(parents=True, exist_ok=True)
    _active_run_dir = path
    return path


def write_provenance(run_dir: Path, args, cfg: TrainConfig, teacher_digest: str):
    save_config(run_dir / "config.txt", cfg)
    record = {
        "command": args.command,
        "category": getattr(args, "category", None),
        "seed": cfg.seed,
        "teacher_digest": teacher_digest,
        "version": version_string(),
        "argv": list(getattr(args, "argv", [])),
    }
    (run_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def resolve_config(args, base: TrainConfig = None) -> TrainConfig:
    """Config file (or ``base``) first, then command-line overrides on top."""
    if args.config:
        cfg = load_config(args.config)
    elif base is not None:
        cfg = base
    else:
        cfg = TrainConfig()
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.channel_scale is not None:
        updates["channel_scale"] = args.channel_scale
    if args.no_rcm:
        updates["use_rcm"] = False
    if args.no_aff:
        updates["use_aff"] = False
    if args.no_pcar:
        updates["use_pcar"] = False
    return replace(cfg, **updates) if updates else cfg


def _check_device(device: str):
    if device.startswith("cuda"):
        import torch

        if not torch.cuda.is_available():
            raise ConfigurationError("--device cuda requested but CUDA is unavailable")


def _data_root(args) -> Path:
    root = args.data_root or os.environ.get("PFADSEG_DATA_ROOT")
    if not root:
        raise ConfigurationError(
            "no dataset root: pass --data-root or set PFADSEG_DATA_ROOT"
        )
    return Path(root)


def _require_category(args) -> str:
    if not args.category:
        raise ConfigurationError(f"{args.command} requires --category")
    return args.category


def _texture_store(args) -> TextureStore:
    if not args.textures:
        raise ConfigurationError(f"{args.command} requires --textures DIR")
    return TextureStore.from_directory(args.textures)


def _default_out_dir(args) -> Path:
    if args.out_dir:
        return Path(args.out_dir)
    suffix = f"-{args.category}" if getattr(args, "category", None) else ""
    return Path("runs") / f"{args.command}{suffix}"


def cmd_train_student(args) -> int:
    cfg = resolve_config(args)
    _check_device(args.device)
    layout = ingest_dataset(_data_root(args))
    category = layout.category(_require_category(args))
    dataset = NormalImageStore(paths=category.train_good)
    textures = _texture_store(args)
    run_dir = prepare_run_dir(_default_out_dir(args), args.overwrite)
    teacher = build_teacher(cfg)
    write_provenance(run_dir, args, cfg, teacher.digest())
    ckpt = train_student(
        dataset, textures, cfg, teacher=teacher,
        log_path=run_dir / "train_log.jsonl", device=args.device,
    )
    ckpt.save(run_dir / "student.ckpt")
    print(f"stage-1 checkpoint: {run_dir / 'student.ckpt'}")
    return 0


def cmd_train_seg(args) -> int:
    if not args.checkpoint:
        raise ConfigurationError("train-seg requires --checkpoint (stage-1 output)")
    student_ckpt = Checkpoint.load(args.checkpoint)
    # the stage-1 config is the default so both stages stay consistent
    cfg = resolve_config(args, base=student_ckpt.config)
    for field in ("channel_scale", "use_aff", "use_pcar", "image_size"):
        if getattr(cfg, field) != getattr(student_ckpt.config, field):
            raise ConfigurationError(
                f"{field} differs from the stage-1 checkpoint "
                f"({getattr(cfg, field)} vs {getattr(student_ckpt.config, field)})"
            )
    _check_device(args.device)
    layout = ingest_dataset(_data_root(args))
    category = layout.category(_require_category(args))
    dataset = NormalImageStore(paths=category.train_good)
    textures = _texture_store(args)
    run_dir = prepare_run_dir(_default_out_dir(args), args.overwrite)
    teacher = build_teacher(cfg)
    write_provenance(run_dir, args, cfg, teacher.digest())
    ckpt = train_segmentation(
        dataset, textures, cfg, student_ckpt, teacher=teacher,
        log_path=run_dir / "train_log.jsonl", device=args.device,
    )
    ckpt.save(run_dir / "segmentation.ckpt")
    print(f"stage-2 checkpoint: {run_dir / 'segmentation.ckpt'}")
    return 0


def _map_for_image(maps_dir: Path, category: str, defect: str, stem: str) -> np.ndarray:
    path = maps_dir / category / defect / f"{stem}.npy"
    if not path.is_file():
        raise DatasetValidationError(f"no precomputed map for {category}/{defect}/{stem}: {path}")
    return load_prob_array(path)


def _evaluate_category(category, engine, maps_dir, save_dir) -> CategoryMetrics:
    scores, labels, maps, masks = [], [], [], []
    for img_path, defect, mask_path in category.iter_test():
        image = load_image(img_path)
        if maps_dir is not None:
            amap = _map_for_image(maps_dir, category.name, defect, img_path.stem)
            if amap.shape != image.shape[:2]:
                raise DatasetValidationError(
                    f"map {amap.shape} does not match image {image.shape[:2]}: {img_path}"
                )
            score = image_score(amap)
        else:
            amap, score = engine.infer(image)
        mask = (
            load_mask(mask_path)
            if mask_path is not None
            else np.zeros(image.shape[:2], dtype=np.uint8)
        )
        scores.append(score)
        labels.append(0 if defect == "good" else 1)
        maps.append(amap)
        masks.append(mask)
        if save_dir is not None:
            out = save_dir / category.name / defect
            out.mkdir(parents=True, exist_ok=True)
            save_prob_array(out / f"{img_path.stem}.npy", amap)
            save_prob_png(out / f"{img_path.stem}.png", amap)
    return compute_category_metrics(category.name, scores, labels, maps, masks)


def cmd_evaluate(args) -> int:
    _check_device(args.device)
    layout = ingest_dataset(_data_root(args))
    maps_dir = Path(args.maps_dir) if args.maps_dir else None
    engine = None
    teacher_digest = "none (precomputed maps)"
    if maps_dir is None:
        if not args.checkpoint:
            raise ConfigurationError("evaluate needs --checkpoint or --maps-dir")
        ckpt = Checkpoint.load(args.checkpoint)
        engine = InferenceEngine(ckpt, device=args.device)
        teacher_digest = ckpt.teacher_digest
    cfg = engine.config if engine is not None else resolve_config(args)

    categories = layout.categories
    if args.category:
        categories = [layout.category(args.category)]
    elif engine is not None:
        raise ConfigurationError(
            "evaluate with --checkpoint requires --category (one model per category)"
        )
    run_dir = prepare_run_dir(_default_out_dir(args), args.overwrite)
    write_provenance(run_dir, args, cfg, teacher_digest)
    save_dir = run_dir / "maps" if args.save_maps else None

    rows = [_evaluate_category(cat, engine, maps_dir, save_dir) for cat in categories]
    rows.append(aggregate_metrics(rows))
    write_report_json(run_dir / "report.json", rows)
    write_report_csv(run_dir / "report.csv", rows)
    for row in rows:
        cells = [row.category] + [
            "-" if getattr(row, n) is None else f"{getattr(row, n):.4f}"
            for n in ("image_auc", "pixel_ap", "pro", "iap", "iap_at_90")
        ]
        print("  ".join(str(c) for c in cells))
    print(f"report: {run_dir / 'report.json'}")
    return 0


def cmd_visualize(args) -> int:
    _check_device(args.device)
    layout = ingest_dataset(_data_root(args))
    category = layout.category(_require_category(args))
    maps_dir = Path(args.maps_dir) if args.maps_dir else None
    engine = None
    teacher_digest = "none (precomputed maps)"
    if maps_dir is None:
        if not args.checkpoint:
            raise ConfigurationError("visualize needs --checkpoint or --maps-dir")
        ckpt = Checkpoint.load(args.checkpoint)
        engine = InferenceEngine(ckpt, device=args.device)
        teacher_digest = ckpt.teacher_digest
    cfg = engine.config if engine is not None else resolve_config(args)
    run_dir = prepare_run_dir(_default_out_dir(args), args.overwrite)
    write_provenance(run_dir, args, cfg, teacher_digest)

    written = 0
    for img_path, defect, _ in category.iter_test():
        if args.limit and written >= args.limit:
            break
        image = load_image(img_path)
        if maps_dir is not None:
            amap = _map_for_image(maps_dir, category.name, defect, img_path.stem)
        else:
            amap, _ = engine.infer(image)
        out = run_dir / defect
        out.mkdir(parents=True, exist_ok=True)
        save_heatmap(out / f"{img_path.stem}_overlay.png", image, amap)
        written += 1
    print(f"{written} overlays in {run_dir}")
    return 0


def cmd_synth_preview(args) -> int:
    cfg = resolve_config(args)
    layout = ingest_dataset(_data_root(args))
    category = layout.category(_require_category(args))
    textures = _texture_store(args)
    run_dir = prepare_run_dir(_default_out_dir(args), args.overwrite)
    write_provenance(run_dir, args, cfg, "none (synthesis only)")
    syn = synthesis_config(cfg)
    rng = np.random.default_rng(cfg.seed)
    size = (cfg.image_size, cfg.image_size)
    for i in range(args.count):
        normal = load_image(category.train_good[i % len(category.train_good)], size)
        anomalous, mask = sample_training_pair(normal, textures, syn, rng)
        save_image(run_dir / f"sample_{i:03d}_image.png", anomalous)
        save_image(run_dir / f"sample_{i:03d}_mask.png", mask.astype(np.float32))
    print(f"{args.count} samples in {run_dir}")
    return 0


COMMANDS = {
    "train-student": cmd_train_student,
    "train-seg": cmd_train_seg,
    "evaluate": cmd_evaluate,
    "visualize": cmd_visualize,
    "synth-preview": cmd_synth_preview,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pfadseg",
        description="Anomaly segmentation by teacher/student feature distillation.",
    )
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=True):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--category", help="dataset category name")
        p.add_argument("--device", default="cpu")
        p.add_argument("--channel-scale", type=float, default=None)
        p.add_argument("--no-rcm", action="store_true", help="drop the RCM block")
        p.add_argument("--no-aff", action="store_true", help="sum instead of attentional fusion")
        p.add_argument("--no-pcar", action="store_true", help="plain conv instead of PCAR")
        p.add_argument("--out-dir", help="run directory (default runs/<command>)")
        p.add_argument("--overwrite", action="store_true", help="replace an existing run dir")
        if data:
            p.add_argument("--data-root", help="dataset root (default $PFADSEG_DATA_ROOT)")

    p = sub.add_parser("train-student", help="stage 1: distill the student")
    common(p)
    p.add_argument("--textures", help="directory of texture images")

    p = sub.add_parser("train-seg", help="stage 2: train the segmentation head")
    common(p)
    p.add_argument("--textures", help="directory of texture images")
    p.add_argument("--checkpoint", help="stage-1 checkpoint path")

    p = sub.add_parser("evaluate", help="compute metrics over the test split")
    common(p)
    p.add_argument("--checkpoint", help="stage-2 checkpoint path")
    p.add_argument("--maps-dir", help="precomputed .npy maps instead of a checkpoint")
    p.add_argument("--save-maps", action="store_true", help="persist per-image maps")

    p = sub.add_parser("visualize", help="write heatmap overlays for the test split")
    common(p)
    p.add_argument("--checkpoint", help="stage-2 checkpoint path")
    p.add_argument("--maps-dir", help="precomputed .npy maps instead of a checkpoint")
    p.add_argument("--limit", type=int, default=0, help="stop after N images (0 = all)")

    p = sub.add_parser("synth-preview", help="emit pseudo-anomalous training samples")
    common(p)
    p.add_argument("--textures", help="directory of texture images")
    p.add_argument("--count", type=int, default=8)

    return parser


def main(argv=None) -> int:
    global _active_run_dir
    _active_run_dir = None
    args = build_parser().parse_args(argv)
    args.argv = list(argv) if argv is not None else list(sys.argv[1:])
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # noqa: BLE001 - single reporting point for the CLI
        record = {
            "error": type(exc).__name__,
            "message": str(exc),
            "command": args.command,
        }
        line = json.dumps(record, sort_keys=True)
        print(line, file=sys.stderr)
        if _active_run_dir is not None and _active_run_dir.is_dir():
            (_active_run_dir / "error.json").write_text(line + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
