"""Command-line entry point: sample, simulate, train, infer, eval, gradcheck, toy.

Heavy imports happen inside the command handlers so --threads can pin the
BLAS thread count through environment variables before numpy loads. With the
default --threads 1 every subcommand is a deterministic function of its
inputs and --seed and replays byte-identically.

Exit codes: 0 success, 1 check failure, 2 config error, 3 I/O error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_CHECK = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4

_THREAD_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS",
                "NUMEXPR_NUM_THREADS")


class ConfigError(ValueError):
    """Bad run configuration; maps to exit code 2."""


def _require_keys(mapping: dict, required, optional, where: str) -> None:
    unknown = set(mapping) - set(required) - set(optional)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    missing = set(required) - set(mapping)
    if missing:
        raise ConfigError(f"{where}: missing keys {sorted(missing)}")


def _load_json(path, where: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{where}: invalid JSON in {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: {path} must hold a JSON object")
    return data


def _log_config(label: str, resolved: dict) -> None:
    print(f"[{label}] config {json.dumps(resolved, sort_keys=True)}", file=sys.stderr)


def _write_resolved(out_dir: Path, resolved: dict) -> None:
    with open(out_dir / "resolved_config.json", "w", encoding="utf-8") as fh:
        json.dump(resolved, fh, indent=2, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Manifest / config loading
# ---------------------------------------------------------------------------

_MANIFEST_REQUIRED = ("models",)
_MANIFEST_OPTIONAL = ("seed", "num_scenes", "points_per_model", "xy_bounds",
                      "floor_percentile", "floor_z", "backgrounds", "augment")
_MODEL_REQUIRED = ("path", "class_id")
_MODEL_OPTIONAL = ("name", "negative", "height")
_AUGMENT_KEYS = ("scale_min", "scale_max", "rotation_max", "crop_anchor_min",
                 "crop_anchor_max", "crop_prob", "overlap_voxel",
                 "overlap_keep_prob")


def load_manifest(path):
    """Parse and validate a scene manifest; paths resolve relative to it."""
    data = _load_json(path, "manifest")
    _require_keys(data, _MANIFEST_REQUIRED, _MANIFEST_OPTIONAL, "manifest")
    for i, entry in enumerate(data["models"]):
        _require_keys(entry, _MODEL_REQUIRED, _MODEL_OPTIONAL, f"manifest.models[{i}]")
    if "augment" in data:
        _require_keys(data["augment"], (), _AUGMENT_KEYS, "manifest.augment")
    data.setdefault("seed", 0)
    data.setdefault("num_scenes", 1)
    data.setdefault("points_per_model", 8196)
    data.setdefault("xy_bounds", [[0.0, 0.0], [4.0, 4.0]])
    data.setdefault("floor_percentile", 1.0)
    data.setdefault("floor_z", None)
    data.setdefault("backgrounds", [])
    data.setdefault("augment", {})
    data["_base"] = str(Path(path).resolve().parent)
    return data


def _manifest_models(manifest, points_per_model, seed):
    """Load meshes, normalize optional canonical heights, presample clouds."""
    import numpy as np

    from . import geometry
    from .objective import ModelSet

    base = Path(manifest["_base"])
    clouds: dict = {}
    negatives = set()
    names = {}
    for i, entry in enumerate(manifest["models"]):
        mesh = geometry.load_mesh(base / entry["path"])
        rng = np.random.default_rng(np.random.SeedSequence([seed, 104729, i]))
        cloud = geometry.poisson_disk_sample(mesh, points_per_model, rng)
        height = entry.get("height")
        if height is not None:
            z = cloud.positions[:, 2]
            extent = float(z.max() - z.min())
            if extent <= 0:
                raise ConfigError(f"model {entry['path']}: flat model cannot be height-normalized")
            cloud = geometry.scale(cloud, float(height) / extent)
        class_id = int(entry["class_id"])
        clouds.setdefault(class_id, []).append(cloud)
        if entry.get("negative", False):
            negatives.add(class_id)
        if "name" in entry:
            names[class_id] = entry["name"]
    backgrounds = [geometry.load_points(base / p) for p in manifest["backgrounds"]]
    return ModelSet(clouds, frozenset(negatives)), backgrounds, names


def _manifest_augment(manifest):
    from .scene import AugmentConfig

    try:
        return AugmentConfig(**manifest["augment"])
    except ValueError as exc:
        raise ConfigError(f"manifest.augment: {exc}") from None


def _xy_bounds(manifest):
    (xmin, ymin), (xmax, ymax) = manifest["xy_bounds"]
    return ((float(xmin), float(ymin)), (float(xmax), float(ymax)))


_TRAIN_REQUIRED = ("manifest", "classes", "embeddings")
_TRAIN_OPTIONAL = ("seed", "epochs", "steps_per_epoch", "lr", "beta1", "beta2",
                   "eps", "precision", "voxel_size", "encoder_widths",
                   "prototypes", "attention_dim", "inv_temperature", "use_dcr",
                   "normalize_anchors", "inference_temperature",
                   "points_per_model")

_TRAIN_DEFAULTS = {
    "seed": 0, "epochs": 200, "steps_per_epoch": 4, "lr": 1e-3, "beta1": 0.9,
    "beta2": 0.999, "eps": 1e-8, "precision": "float64", "voxel_size": 0.05,
    "encoder_widths": [32, 64, 96], "prototypes": 128, "attention_dim": 16,
    "inv_temperature": 0.5, "use_dcr": True, "normalize_anchors": False,
    "inference_temperature": 1.0,
}


def load_train_config(path):
    data = _load_json(path, "train config")
    _require_keys(data, _TRAIN_REQUIRED, _TRAIN_OPTIONAL, "train config")
    resolved = dict(_TRAIN_DEFAULTS)
    resolved.update(data)
    resolved["_base"] = str(Path(path).resolve().parent)
    return resolved


def _read_class_list(path):
    with open(path, "r", encoding="utf-8") as fh:
        names = [line.strip() for line in fh if line.strip()]
    if not names:
        raise ConfigError(f"{path}: empty class list")
    return names


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_sample(args) -> int:
    import numpy as np

    from . import geometry

    resolved = {"mesh": str(args.mesh), "n": args.n, "seed": args.seed,
                "out": str(args.out)}
    _log_config("sample", resolved)
    mesh = geometry.load_mesh(args.mesh)
    rng = np.random.default_rng(args.seed)
    cloud = geometry.poisson_disk_sample(mesh, args.n, rng)
    geometry.save_points(args.out, cloud)
    print(f"wrote {len(cloud)} points to {args.out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    import numpy as np

    from . import geometry
    from .objective import compose_step_scene

    manifest = load_manifest(args.manifest)
    seed = manifest["seed"] if args.seed is None else args.seed
    points = manifest["points_per_model"] if args.points is None else args.points
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    resolved = {k: v for k, v in manifest.items() if not k.startswith("_")}
    resolved.update({"seed": seed, "points_per_model": points, "out": str(out_dir)})
    _log_config("simulate", resolved)
    _write_resolved(out_dir, resolved)

    models, backgrounds, names = _manifest_models(manifest, points, seed)
    augment = _manifest_augment(manifest)
    bounds = _xy_bounds(manifest)

    for i in range(manifest["num_scenes"]):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 15485863, i]))
        scene = compose_step_scene(
            models, augment, rng, backgrounds=backgrounds or None,
            xy_bounds=bounds, floor_percentile=manifest["floor_percentile"],
        )
        geometry.save_points(out_dir / f"scene_{i:03d}.txt", scene.cloud)
        instances = []
        for inst in np.unique(scene.cloud.instance_ids):
            mask = scene.cloud.instance_ids == inst
            label = int(scene.cloud.labels[mask][0])
            instances.append({
                "instance_id": int(inst),
                "class_id": label,
                "class_name": names.get(label),
                "n_points": int(mask.sum()),
            })
        with open(out_dir / f"scene_{i:03d}.json", "w", encoding="utf-8") as fh:
            json.dump({"scene": i, "seed": seed, "class_set": scene.class_set,
                       "instances": instances}, fh, indent=2, sort_keys=True)
            fh.write("\n")
    print(f"wrote {manifest['num_scenes']} scenes to {out_dir}")
    return EXIT_OK


def _build_components(cfg, num_classes_embedding_path, class_names):
    import numpy as np

    from .anchors import load_embeddings
    from .encoder import SparseEncoder
    from .hull import PrototypeBank

    dtype = np.float64 if cfg["precision"] == "float64" else np.float32
    encoder = SparseEncoder.create(
        widths=tuple(cfg["encoder_widths"]), voxel_size=cfg["voxel_size"],
        seed=cfg["seed"], dtype=dtype,
    )
    bank = None
    if cfg["use_dcr"]:
        bank = PrototypeBank.create(
            num_prototypes=cfg["prototypes"], feature_dim=encoder.feature_dim,
            attention_dim=cfg["attention_dim"],
            inv_temperature=cfg["inv_temperature"], seed=cfg["seed"] + 1,
            dtype=dtype,
        )
    table = load_embeddings(
        num_classes_embedding_path, class_names, feature_dim=encoder.feature_dim,
        seed=cfg["seed"] + 2, dtype=dtype, normalize=cfg["normalize_anchors"],
    )
    return encoder, bank, table


def cmd_train(args) -> int:
    from .checkpoint import save_checkpoint
    from .objective import TrainConfig, train

    cfg = load_train_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    base = Path(cfg["_base"])
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    resolved = {k: v for k, v in cfg.items() if not k.startswith("_")}
    resolved["out"] = str(out_dir)
    _log_config("train", resolved)
    _write_resolved(out_dir, resolved)

    manifest = load_manifest(base / cfg["manifest"])
    points = cfg.get("points_per_model", manifest["points_per_model"])
    class_names = _read_class_list(base / cfg["classes"])
    models, backgrounds, _ = _manifest_models(manifest, points, cfg["seed"])
    encoder, bank, table = _build_components(cfg, base / cfg["embeddings"], class_names)

    try:
        train_cfg = TrainConfig(
            epochs=cfg["epochs"], steps_per_epoch=cfg["steps_per_epoch"],
            lr=cfg["lr"], beta1=cfg["beta1"], beta2=cfg["beta2"], eps=cfg["eps"],
            seed=cfg["seed"], use_dcr=cfg["use_dcr"], precision=cfg["precision"],
        )
    except ValueError as exc:
        raise ConfigError(f"train config: {exc}") from None

    with open(out_dir / "loss.log", "w", encoding="utf-8") as log:
        losses = train(
            models, table, encoder, bank, train_cfg,
            augment=_manifest_augment(manifest),
            backgrounds=backgrounds or None, xy_bounds=_xy_bounds(manifest),
            floor_percentile=manifest["floor_percentile"], log_file=log,
        )
    save_checkpoint(out_dir / "checkpoint.bin", encoder, bank, table,
                    meta={"train_config": {k: v for k, v in resolved.items() if k != "out"}})
    if losses:
        print(f"trained {len(losses)} epochs, loss {losses[0]:.4f} -> {losses[-1]:.4f}")
    else:
        print("trained 0 epochs, checkpoint equals initialization")
    print(f"checkpoint: {out_dir / 'checkpoint.bin'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    import numpy as np

    from . import geometry
    from .anchors import read_embedding_file
    from .checkpoint import load_checkpoint
    from .objective import infer_scene

    resolved = {"checkpoint": str(args.checkpoint), "scene": str(args.scene),
                "out": str(args.out), "temperature": args.temperature,
                "extend_classes": args.extend_classes,
                "embeddings": str(args.embeddings) if args.embeddings else None}
    _log_config("infer", resolved)

    ckpt = load_checkpoint(args.checkpoint)
    table = ckpt.table
    if args.extend_classes:
        if not args.embeddings:
            raise ConfigError("--extend-classes requires --embeddings")
        new_names = [n for n in args.extend_classes.split(",") if n]
        from .anchors import _name_tokens
        wanted = {t for n in new_names for t in _name_tokens(n)}
        vectors, dim = read_embedding_file(args.embeddings, wanted)
        if dim and dim != table.embedding_dim:
            raise ConfigError(
                f"embedding dim {dim} does not match checkpoint dim {table.embedding_dim}")
        for name in new_names:
            tokens = _name_tokens(name)
            missing = [t for t in tokens if t not in vectors]
            if missing:
                raise ConfigError(f"class {name!r}: tokens {missing} not in {args.embeddings}")
            table.add_class(name, np.mean([vectors[t] for t in tokens], axis=0))

    cloud = geometry.load_points(args.scene)
    probs = infer_scene(cloud, ckpt.encoder, ckpt.bank, table,
                        temperature=args.temperature)
    with open(args.out, "w", encoding="utf-8") as fh:
        for row in probs:
            fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")
    classes_path = Path(args.out).with_suffix(".classes.txt")
    with open(classes_path, "w", encoding="utf-8") as fh:
        fh.write("".join(f"{name}\n" for name in table.class_names))
    print(f"wrote {probs.shape[0]}x{probs.shape[1]} probabilities to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    import numpy as np

    from . import geometry
    from .metrics import evaluate_salient, mean_iou

    resolved = {"probs": str(args.probs), "gt": str(args.gt),
                "foreground": args.foreground, "miou": args.miou,
                "out": str(args.out) if args.out else None}
    _log_config("eval", resolved)

    probs = np.loadtxt(args.probs, dtype=np.float64, ndmin=2)
    gt = geometry.load_points(args.gt)
    if gt.labels is None:
        raise ConfigError(f"{args.gt}: ground-truth file has no labels")
    if len(gt) != len(probs):
        raise ConfigError(
            f"{len(probs)} probability rows vs {len(gt)} ground-truth points")

    class_names = None
    classes_path = Path(args.probs).with_suffix(".classes.txt")
    if classes_path.exists():
        class_names = dict(enumerate(_read_class_list(classes_path)))

    if args.foreground:
        foreground = [int(c) for c in args.foreground.split(",")]
    else:
        foreground = list(range(probs.shape[1]))
    report = evaluate_salient(probs, gt.labels, foreground, class_names=class_names)
    if args.miou:
        pred = probs.argmax(axis=1)
        report.per_class_iou, report.miou = mean_iou(pred, gt.labels, foreground)

    text = report.as_text()
    print(text, end="")
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
        kv_path = Path(args.out).with_suffix(".kv")
        with open(kv_path, "w", encoding="utf-8") as fh:
            fh.write("".join(line + "\n" for line in report.as_kv_lines()))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_all

    resolved = {"seed": args.seed, "repeat": args.repeat}
    _log_config("gradcheck", resolved)
    results = run_all(range(args.seed, args.seed + args.repeat))
    failures = 0
    for res in results:
        print(res)
        failures += 0 if res.passed else 1
    print(f"{len(results) - failures}/{len(results)} gradient checks passed")
    return EXIT_OK if failures == 0 else EXIT_CHECK


def cmd_toy(args) -> int:
    from .toydata import build_toy_dataset

    resolved = {"out": str(args.out), "points_per_model": args.points,
                "seed": args.seed, "num_scenes": args.scenes}
    _log_config("toy", resolved)
    build_toy_dataset(args.out, points_per_model=args.points, seed=args.seed,
                      num_scenes=args.scenes)
    print(f"toy dataset written to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing / dispatch
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenehull",
        description="Simulate crowded point-cloud scenes, train hull-regularized "
                    "features against language anchors, and evaluate salient detection.",
    )
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS thread cap (default 1 for determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("sample", help="Poisson-disk sample a mesh surface")
    p.add_argument("mesh")
    p.add_argument("-n", type=int, default=8196, help="number of points (default 8196)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("simulate", help="compose labeled scenes from a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--seed", type=int, default=None, help="override manifest seed")
    p.add_argument("--points", type=int, default=None, help="override points per model")
    p.add_argument("-o", "--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="train encoder, prototype bank and anchors")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--epochs", type=int, default=None, help="override config epochs")
    p.add_argument("-o", "--out", required=True, help="output run directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="per-point class probabilities for a scene")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--extend-classes", default="",
                   help="comma-separated unseen class names to add before inference")
    p.add_argument("--embeddings", default=None,
                   help="embedding file for --extend-classes")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="AP/AmAP (and optional mIoU) from probabilities")
    p.add_argument("--probs", required=True)
    p.add_argument("--gt", required=True, help="labeled scene file")
    p.add_argument("--foreground", default="",
                   help="comma-separated foreground class ids (default: all columns)")
    p.add_argument("--miou", action="store_true", help="also report argmax mIoU")
    p.add_argument("-o", "--out", default=None, help="report file (.kv written alongside)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeat", type=int, default=5, help="number of seeds")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("toy", help="write the procedural toy dataset")
    p.add_argument("-o", "--out", required=True)
    p.add_argument("--points", type=int, default=512)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--scenes", type=int, default=6)
    p.set_defaults(func=cmd_toy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads and args.threads > 0:
        for var in _THREAD_VARS:
            os.environ.setdefault(var, str(args.threads))
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except Exception as exc:  # noqa: BLE001 - map known failure classes to codes
        from .objective import TrainingDiverged

        if isinstance(exc, TrainingDiverged):
            print(f"numerical divergence: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, ValueError):
            print(f"config error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        raise


if __name__ == "__main__":
    sys.exit(main())
