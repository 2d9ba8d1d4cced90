"""Command-line interface: synth, prepare, train, crossval, fewshot, eval, predict, cam.

Every command writes into one output directory, records the resolved
configuration it ran with and finishes with a ``manifest.json`` listing
the files it produced. Failures print a single ``error:`` line and exit
nonzero.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, load_config, save_config
from .data import (
    CLASS_NAMES,
    CROP_CLASSES,
    make_folds,
    make_tiles,
    normalize_yields,
    rasterize_points,
    resample_bands,
    select_bands,
)
from .io import (
    load_tiles,
    read_points,
    read_scene,
    read_single_band,
    save_tiles,
    write_json,
    write_points,
    write_scene,
    write_single_band,
)
from .network import MODES

logger = logging.getLogger("mtcyp")

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CommandError(Exception):
    """Invalid input detected before any work was done."""


# ----------------------------------------------------------------------------
# Shared helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_manifest(out_dir: Path, command: str, argv: list[str], outputs: list[Path], seed) -> Path:
    missing = [str(p) for p in outputs if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"declared outputs were not written: {', '.join(missing)}")
    manifest = {
        "command": command,
        "argv": argv,
        "seed": seed,
        "version": __version__,
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "outputs": [
            {
                "path": str(Path(p).resolve().relative_to(out_dir.resolve()))
                if Path(p).resolve().is_relative_to(out_dir.resolve())
                else str(p),
                "bytes": Path(p).stat().st_size,
                "sha256": _sha256(Path(p)),
            }
            for p in outputs
        ],
    }
    path = out_dir / "manifest.json"
    write_json(manifest, path)
    return path


def _require_file(path: str | None, what: str) -> Path:
    if path is None:
        raise CommandError(f"{what} is required")
    p = Path(path)
    if not p.is_file():
        raise CommandError(f"{what} {p} does not exist")
    return p


def _require_dir(path: str | None, what: str) -> Path:
    if path is None:
        raise CommandError(f"{what} is required")
    p = Path(path)
    if not p.is_dir():
        raise CommandError(f"{what} {p} is not a directory")
    return p


def _out_dir(path: str) -> Path:
    p = Path(path)
    try:
        p.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {p}: {exc.strerror}") from exc
    return p


def _experiment(args) -> ExperimentConfig:
    cfg_path = _require_file(args.config, "--config")
    try:
        cfg = load_config(cfg_path)
    except (ValueError, TypeError, yaml.YAMLError) as exc:
        raise CommandError(f"{cfg_path}: {exc}") from exc
    train = cfg.train
    if getattr(args, "mode", None):
        train = replace(train, mode=args.mode)
    if args.seed is not None:
        train = replace(train, seed=args.seed)
        cfg.fold_seed = args.seed
    cfg.train = train
    if cfg.tiles is None:
        raise CommandError(f"{cfg_path}: 'tiles' (path to a prepared tile store) is not set")
    store = Path(cfg.tiles)
    if not store.is_absolute() and not (store / "index.json").exists():
        store = cfg_path.parent / store
    if not (store / "index.json").exists():
        raise CommandError(f"tile store {cfg.tiles} has no index.json; run `prepare` first")
    cfg.tiles = str(store)
    return cfg


def _load_store(cfg: ExperimentConfig):
    tiles, band_names = load_tiles(cfg.tiles)
    if cfg.bands:
        missing = [b for b in cfg.bands if b not in band_names]
        if missing:
            raise CommandError(f"bands {missing} not in tile store (has {band_names})")
        idx = [band_names.index(b) for b in cfg.bands]
        tiles = [replace(t, bands=t.bands[idx]) for t in tiles]
        band_names = list(cfg.bands)
    if not tiles:
        raise CommandError(f"tile store {cfg.tiles} is empty")
    return tiles, band_names


# ----------------------------------------------------------------------------
# Commands


def cmd_synth(args) -> list[Path]:
    from .synthetic import SynthSpec, generate_scene, sample_points

    raw = {}
    if args.spec is not None:
        raw = yaml.safe_load(_require_file(args.spec, "--spec").read_text()) or {}
        if not isinstance(raw, dict):
            raise CommandError(f"{args.spec}: top level must be a mapping")
    n_scenes = int(raw.pop("n_scenes", 4))
    n_points = int(raw.pop("points_per_scene", 40))
    if args.seed is not None:
        raw["seed"] = args.seed
    if n_scenes <= 0 or n_points < 0:
        raise CommandError("n_scenes must be positive and points_per_scene non-negative")
    try:
        spec = SynthSpec(**raw)
    except (TypeError, ValueError) as exc:
        raise CommandError(f"synthetic spec: {exc}") from exc

    out = _out_dir(args.out)
    dirs = {name: out / name for name in ("scenes", "masks", "truth")}
    for d in dirs.values():
        d.mkdir(exist_ok=True)
    outputs, points = [], []
    children = np.random.SeedSequence(spec.seed).spawn(n_scenes)
    for i, child in enumerate(children):
        s = replace(spec, seed=int(child.generate_state(1)[0]))
        sid = f"synth{i:03d}"
        scene, mask, dense = generate_scene(s, sid)
        points += sample_points(dense, mask, n_points, seed=s.seed + 1, scene_id=sid)
        write_scene(scene, dirs["scenes"] / f"{sid}.tif")
        write_single_band(mask, dirs["masks"] / f"{sid}.tif", scene.geotransform, scene.crs, "uint8")
        write_single_band(dense, dirs["truth"] / f"{sid}.tif", scene.geotransform, scene.crs, "float32")
        outputs += [dirs[k] / f"{sid}.tif" for k in ("scenes", "masks", "truth")]
    write_points(points, out / "points.csv")
    resolved = {**asdict(spec), "n_scenes": n_scenes, "points_per_scene": n_points}
    resolved = yaml.safe_load(yaml.safe_dump(_plain(resolved)))
    (out / "spec.yaml").write_text(yaml.safe_dump(resolved, sort_keys=False))
    logger.info("wrote %d scenes and %d points to %s", n_scenes, len(points), out)
    return outputs + [out / "points.csv", out / "spec.yaml"]


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def cmd_prepare(args) -> list[Path]:
    scenes_dir = _require_dir(args.scenes, "--scenes")
    masks_dir = _require_dir(args.masks, "--masks")
    points_csv = _require_file(args.points, "--points")
    scene_files = sorted(scenes_dir.glob("*.tif"))
    if not scene_files:
        raise CommandError(f"no .tif scenes in {scenes_dir}")
    bands = args.bands.split(",") if args.bands else None
    scenes = {}
    for f in scene_files:
        scene = read_scene(f)
        if not (masks_dir / f.name).exists():
            raise CommandError(f"scene {f.name} has no crop mask in {masks_dir}")
        scenes[scene.id] = (scene, masks_dir / f.name)
    plain = {sid: s for sid, (s, _) in scenes.items()}
    points = read_points(points_csv, plain)
    unknown = sorted({p.scene_id for p in points} - set(scenes))
    if unknown:
        raise CommandError(f"points reference unknown scenes {unknown[:5]}")
    bad_crop = sorted({p.crop_type for p in points} - set(CROP_CLASSES))
    if bad_crop:
        raise CommandError(f"points carry non-crop class codes {bad_crop}")

    out = _out_dir(args.out)
    points, norm = normalize_yields(points)
    by_scene: dict[str, list] = {sid: [] for sid in scenes}
    for p in points:
        by_scene[p.scene_id].append(p)
    tiles, report = [], {"scenes": {}, "normalization": {}, "degenerate": norm.degenerate}
    names = None
    for sid, (scene, mask_path) in scenes.items():
        scene = resample_bands(scene, 10.0)
        if bands:
            scene = select_bands(scene, bands)
        mask = read_single_band(mask_path)
        if mask.shape != (scene.height, scene.width):
            raise CommandError(f"mask for {sid} is {mask.shape}, scene is {(scene.height, scene.width)}")
        values, labeled, rr = rasterize_points(by_scene[sid], scene.height, scene.width)
        scene_tiles = make_tiles(scene, mask, values, labeled)
        tiles += scene_tiles
        names = scene.band_names
        report["scenes"][sid] = {**asdict(rr), "tiles": len(scene_tiles), "bands": scene.band_names}
    report["normalization"] = {
        CLASS_NAMES[c]: {"min": lo, "max": hi} for c, (lo, hi) in sorted(norm.constants.items())
    }
    report["n_tiles"] = len(tiles)
    report["n_points"] = int(sum(t.n_points for t in tiles))
    index = save_tiles(tiles, out / "tiles", names)
    write_json(report, out / "ingest_report.json")
    logger.info("prepared %d tiles with %d labeled pixels", len(tiles), report["n_points"])
    return [index, out / "ingest_report.json"]


def cmd_train(args) -> list[Path]:
    from .training import train

    cfg = _experiment(args)
    tiles, names = _load_store(cfg)
    plan = make_folds([t.id for t in tiles], cfg.k, cfg.fold_seed)
    if not 0 <= cfg.fold < cfg.k:
        raise CommandError(f"fold {cfg.fold} outside 0..{cfg.k - 1}")
    by_id = {t.id: t for t in tiles}
    val = [by_id[i] for i in sorted(plan.validation_ids(cfg.fold))]
    trn = [by_id[i] for i in sorted(plan.training_ids(cfg.fold))]
    out = _out_dir(args.out)
    save_config(cfg, out / "config.yaml")
    write_json({"fold": cfg.fold, "assignments": plan.assignments, "seed": plan.seed}, out / "folds.json")
    rec = train(trn, val, cfg.train, cfg.model_config(len(names)), out)
    logger.info("best epoch %s: %s", rec.best_epoch, rec.best_metrics)
    files = [out / "config.yaml", out / "folds.json", out / "train_log.jsonl", out / "run_record.json"]
    return files + [Path(p) for p in rec.checkpoints.values()]


def cmd_crossval(args) -> list[Path]:
    from .training import run_crossval

    cfg = _experiment(args)
    if args.k is not None:
        cfg.k = args.k
    tiles, names = _load_store(cfg)
    out = _out_dir(args.out)
    save_config(cfg, out / "config.yaml")
    res = run_crossval(tiles, cfg.train, cfg.model_config(len(names)), cfg.k, cfg.fold_seed, out_dir=out)
    write_json(res, out / "crossval.json")
    for key, s in res["summary"].items():
        logger.info("%s: %.4f +- %.4f over %d folds", key, s["mean"], s["std"], s["n"])
    return [out / "config.yaml", out / "crossval.json"]


def _parse_fractions(text: str) -> list[float]:
    if ".." in text:
        lo, hi = (float(v) for v in text.split(".."))
        n = int(round((hi - lo) / 0.1)) + 1
        fracs = [round(lo + 0.1 * i, 10) for i in range(n)]
    else:
        fracs = [float(v) for v in text.split(",")]
    if not fracs or any(not 0 < f <= 1 for f in fracs):
        raise CommandError(f"fractions must lie in (0, 1], got {text!r}")
    return fracs


def cmd_fewshot(args) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .training import run_fewshot

    fractions = _parse_fractions(args.fractions)
    if args.repeats <= 0:
        raise CommandError("--repeats must be positive")
    cfg = _experiment(args)
    tiles, names = _load_store(cfg)
    out = _out_dir(args.out)
    save_config(cfg, out / "config.yaml")
    res = run_fewshot(
        tiles, cfg.train, cfg.model_config(len(names)), fractions, args.repeats, seed=cfg.train.seed
    )
    write_json(res, out / "fewshot.json")
    pts = [(c["fraction"], c["mean_rmse"]) for c in res["curve"] if c["mean_rmse"] is not None]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if pts:
        ax.plot(*zip(*pts), marker="o")
    ax.set_xlabel("fraction of training pool")
    ax.set_ylabel("validation RMSE")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(out / "fewshot.png", dpi=120)
    plt.close(fig)
    return [out / "config.yaml", out / "fewshot.json", out / "fewshot.png"]


def _model(path: str):
    from .network import load_weights

    weights = _require_file(path, "--weights")
    try:
        return load_weights(weights)
    except (ValueError, KeyError, RuntimeError) as exc:
        raise CommandError(f"{weights}: {exc}") from exc


def cmd_eval(args) -> list[Path]:
    from .training import evaluate

    model = _model(args.weights)
    store = _require_dir(args.tiles, "--tiles")
    if not (store / "index.json").exists():
        raise CommandError(f"{store} has no index.json")
    tiles, names = load_tiles(store)
    if len(names) != model.config.in_channels:
        raise CommandError(f"tile store has {len(names)} bands, model expects {model.config.in_channels}")
    out_file = Path(args.out)
    out = _out_dir(str(out_file.parent))
    metrics = evaluate(model, tiles)
    metrics["n_tiles"] = len(tiles)
    write_json(metrics, out_file)
    logger.info("%s", metrics)
    return [out_file]


def cmd_predict(args) -> list[Path]:
    from .inference import export_maps, predict_scene

    model = _model(args.weights)
    scene = read_scene(_require_file(args.scene, "--scene"))
    if scene.bands.shape[0] != model.config.in_channels:
        raise CommandError(
            f"scene has {scene.bands.shape[0]} bands, model expects {model.config.in_channels}"
        )
    out = _out_dir(args.out)
    pred = predict_scene(model, scene)
    files = export_maps(pred, scene, out)
    write_json({"scene": scene.id, "n_tiles": pred.n_tiles}, out / "prediction.json")
    logger.info("predicted %s from %d tiles", scene.id, pred.n_tiles)
    return list(files.values()) + [out / "prediction.json"]


def cmd_cam(args) -> list[Path]:
    from .inference import gradcam, save_cam

    model = _model(args.weights)
    if not model.config.has_tcl:
        raise CommandError("Grad-CAM needs a multitask_tcl model")
    store = _require_dir(args.tiles, "--tiles")
    tiles, _ = load_tiles(store)
    match = [t for t in tiles if t.id == args.tile]
    if not match:
        raise CommandError(f"tile {args.tile!r} not in {store}")
    target = "yield" if args.target == "yield" else CLASS_NAMES.index(args.target)
    out = _out_dir(args.out)
    cam = gradcam(model, match[0].bands, target)
    name = f"cam_{args.tile.replace(':', '_')}_{args.target}"
    return list(save_cam(cam, out, name).values())


# ----------------------------------------------------------------------------
# Parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mtcyp", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--seed", type=int, default=None, help="overrides every seed of the run")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "generate synthetic scenes, masks and yield points")
    p.add_argument("--spec", help="YAML with synthetic-scene parameters")
    p.add_argument("--out", required=True)

    p = add("prepare", cmd_prepare, "resample, rasterize points and cut tiles")
    p.add_argument("--scenes", required=True)
    p.add_argument("--points", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--bands", help="comma-separated band subset, e.g. B02,B03,B04,B08")

    p = add("train", cmd_train, "train one model on one fold")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)

    p = add("crossval", cmd_crossval, "k-fold cross-validation")
    p.add_argument("--config", required=True)
    p.add_argument("--k", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)

    p = add("fewshot", cmd_fewshot, "RMSE against training-set fraction")
    p.add_argument("--config", required=True)
    p.add_argument("--fractions", default="0.1..0.9", help="'lo..hi' in 0.1 steps or a comma list")
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=MODES)

    p = add("eval", cmd_eval, "metrics of a checkpoint on a tile store")
    p.add_argument("--weights", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--out", required=True, help="metrics JSON file")

    p = add("predict", cmd_predict, "yield and class maps for a whole scene")
    p.add_argument("--weights", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)

    p = add("cam", cmd_cam, "Grad-CAM heatmap for one tile")
    p.add_argument("--weights", required=True)
    p.add_argument("--tiles", required=True, help="tile store holding the tile")
    p.add_argument("--tile", required=True, help="tile id, e.g. synth000:0:0")
    p.add_argument("--target", default="yield", choices=["yield", *CLASS_NAMES[:5]])
    p.add_argument("--out", required=True)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        outputs = args.func(args)
        out_dir = Path(args.out) if args.command != "eval" else Path(args.out).parent
        _write_manifest(out_dir, args.command, argv, outputs, args.seed)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - one-line cause for any failure
        logger.debug("command failed", exc_info=True)
        msg = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
        print(f"error: {type(exc).__name__}: {msg}", file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
