"""``fewcount`` command line: validate, split, crossval, train, eval, predict.

Exit codes: 0 success, 1 data or validation error, 2 configuration error,
3 runtime or numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as dt
import hashlib
import json
import logging
import os
import sys
import warnings
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import yaml

from . import __version__
from . import dataset as ds
from . import export
from . import model as M
from . import training as T
from .correlation import ExemplarError

log = logging.getLogger("fewcount")

EXIT_OK, EXIT_DATA, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
CONFIG_SECTIONS = ("model", "train")


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def _coerce_numbers(d: dict) -> dict:
    # YAML 1.1 reads "1e-5" as a string
    out = {}
    for k, v in d.items():
        if isinstance(v, str):
            try:
                v = float(v)
            except ValueError:
                pass
        out[k] = v
    return out


def load_config(path: str | None, seed: int | None) -> tuple[M.ModelConfig, T.TrainConfig, dict]:
    """Parse a YAML/JSON document with ``model`` and ``train`` sections."""
    doc: dict[str, Any] = {}
    if path is not None:
        try:
            doc = yaml.safe_load(Path(path).read_text()) or {}
        except FileNotFoundError:
            raise M.ConfigError(f"config file {path} does not exist") from None
        except yaml.YAMLError as exc:
            raise M.ConfigError(f"config file {path} is not valid YAML/JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise M.ConfigError(f"config file {path} must hold a mapping")
    unknown = sorted(set(doc) - set(CONFIG_SECTIONS))
    if unknown:
        raise M.ConfigError(f"unknown config sections: {', '.join(unknown)}", unknown)
    sections = {}
    for name in CONFIG_SECTIONS:
        sec = doc.get(name) or {}
        if not isinstance(sec, dict):
            raise M.ConfigError(f"config section {name!r} must be a mapping", [name])
        sections[name] = _coerce_numbers(sec)
    if seed is not None:
        sections["model"]["seed"] = seed
        sections["train"]["seed"] = seed
    model_cfg = M.ModelConfig.from_dict(sections["model"])
    train_cfg = T.TrainConfig.from_dict(sections["train"])
    snapshot = {"model": model_cfg.to_dict(), "train": train_cfg.to_dict()}
    return model_cfg, train_cfg, snapshot


# ---------------------------------------------------------------------------
# run manifest
# ---------------------------------------------------------------------------


def _blob_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def content_hash(paths: Sequence[Path]) -> str:
    """sha256 over (name, git blob id) of every input file, directories expanded in sorted order."""
    h = hashlib.sha256()
    for p in paths:
        p = Path(p)
        files = sorted(f for f in p.rglob("*") if f.is_file()) if p.is_dir() else [p]
        for f in files:
            rel = f.relative_to(p).as_posix() if p.is_dir() else f.name
            h.update(f"{rel}\0{_blob_hash(f.read_bytes())}\n".encode())
    return h.hexdigest()


@dataclasses.dataclass
class RunManifest:
    command: str
    config: dict
    seed: int | None
    started: str
    finished: str = ""
    outputs: list[str] = dataclasses.field(default_factory=list)
    inputs: list[str] = dataclasses.field(default_factory=list)
    input_hash: str = ""
    version: str = __version__

    def write(self, out_dir: Path) -> Path:
        self.finished = _now()
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(dataclasses.asdict(self), indent=2))
        return path


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _manifest(command: str, snapshot: dict, seed, inputs: Sequence[Path]) -> RunManifest:
    inputs = [Path(p) for p in inputs if p is not None]
    return RunManifest(command, snapshot, seed, _now(), inputs=[str(p) for p in inputs], input_hash=content_hash(inputs))


def _write_json(path: Path, doc) -> Path:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _data_root(args) -> Path:
    root = args.data or os.environ.get("FEWCOUNT_DATA")
    if not root:
        raise DataError("no dataset given: pass --data or set FEWCOUNT_DATA")
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset directory {root} does not exist")
    return root


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _select(samples: list[ds.ImageSample], split_path: str | None, subset: str) -> list[ds.ImageSample]:
    if split_path is None:
        return samples
    train_ids, test_ids, _ = ds.read_split_file(split_path)
    wanted = set(train_ids if subset == "train" else test_ids)
    have = {s.id for s in samples}
    missing = sorted(wanted - have)
    if missing:
        raise DataError(f"split file names samples that are not in the dataset: {', '.join(missing[:5])}")
    return [s for s in samples if s.id in wanted]


def _stats_from(ckpt: M.Checkpoint, fallback: Sequence[ds.ImageSample]) -> ds.NormStats:
    doc = ckpt.metadata.get("norm_stats")
    if doc is not None:
        return ds.NormStats.from_dict(doc)
    warnings.warn("checkpoint carries no normalisation statistics; computing them from the input images", stacklevel=2)
    return ds.compute_norm_stats(fallback)


def parse_boxes(text: str) -> list[ds.BoundingBox]:
    """``"x,y,h,w;x,y,h,w"`` → boxes."""
    boxes = []
    for chunk in filter(None, (c.strip() for c in text.split(";"))):
        parts = [p for p in chunk.replace(" ", ",").split(",") if p]
        if len(parts) != 4:
            raise DataError(f"box {chunk!r} must have four numbers x,y,h,w")
        try:
            boxes.append(ds.BoundingBox(*map(float, parts)))
        except ValueError:
            raise DataError(f"box {chunk!r} is not numeric") from None
    return boxes


def _metrics_table(report: T.MetricsReport, title: str) -> str:
    return "\n".join(
        [
            title,
            f"{'N':>6} {'MAE':>10} {'RMSE':>10} {'MNAE (%)':>10}",
            f"{len(report.per_sample):>6} {report.mae:>10.2f} {report.rmse:>10.2f} {100 * report.mnae:>10.2f}",
        ]
    )


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_validate(args) -> int:
    root = _data_root(args)
    results = ds.scan_dataset(root)
    if not results:
        print(f"warning: no images found in {root}", file=sys.stderr)
        return EXIT_OK
    bad = 0
    for sid, item in results:
        if isinstance(item, ds.DatasetError):
            bad += 1
            print(f"INVALID {sid}: {item}")
        else:
            print(f"ok      {sid}: {len(item.dots)} dots, {len(item.boxes)} boxes, {item.width}x{item.height}")
    print(f"{len(results) - bad}/{len(results)} samples valid")
    return EXIT_DATA if bad else EXIT_OK


def cmd_split(args) -> int:
    root = _data_root(args)
    samples = ds.load_dataset(root)
    seed = 0 if args.seed is None else args.seed
    train, test = ds.split_train_test(samples, args.ratio, seed)
    folds = ds.make_folds(train, args.k, seed)
    out = _out_dir(args)
    man = _manifest("split", {"ratio": args.ratio, "k": args.k}, seed, [root])
    path = out / "split.json"
    ds.write_split_file(path, train, test, folds, seed, args.ratio)
    man.outputs.append(str(path))
    man.write(out)
    print(f"{len(train)} train / {len(test)} test, {args.k} folds of sizes {folds.sizes()} -> {path}")
    return EXIT_OK


def cmd_crossval(args) -> int:
    model_cfg, tcfg, snapshot = load_config(args.config, args.seed)
    root = _data_root(args)
    samples = _select(ds.load_dataset(root), args.split, "train")
    k = args.k or tcfg.k_folds
    out = _out_dir(args)
    man = _manifest("crossval", snapshot, tcfg.seed, [root, args.config, args.split])
    cv = T.crossval(samples, k, model_cfg, tcfg, jobs=args.jobs)
    for f in cv.folds:
        n = f.fold + 1
        ckpt = dataclasses.replace(f.checkpoint, metadata={**f.checkpoint.metadata, "norm_stats": f.stats.to_dict()})
        M.write_checkpoint(ckpt, out / f"fold_{n}.ckpt")
        man.outputs += [str(_write_json(out / f"fold_{n}.json", f.to_dict())), str(out / f"fold_{n}.ckpt")]
    summary = cv.summary()
    man.outputs.append(str(_write_json(out / "summary.json", summary)))
    man.write(out)
    print(f"{'fold':>5} {'train MAE':>10} {'RMSE':>8} {'MNAE%':>7} {'val MAE':>9} {'RMSE':>8} {'MNAE%':>7}")
    rows = [(str(r["fold"]), r) for r in summary["folds"]] + [("mean", summary["mean"]), ("std", summary["std"])]
    for name, r in rows:
        tr, va = r["train"], r["validation"]
        print(
            f"{name:>5} {tr['mae']:>10.2f} {tr['rmse']:>8.2f} {100 * tr['mnae']:>7.2f}"
            f" {va['mae']:>9.2f} {va['rmse']:>8.2f} {100 * va['mnae']:>7.2f}"
        )
    return EXIT_OK


def cmd_train(args) -> int:
    model_cfg, tcfg, snapshot = load_config(args.config, args.seed)
    root = _data_root(args)
    samples = _select(ds.load_dataset(root), args.split, "train")
    if not samples:
        raise DataError("no training samples")
    out = _out_dir(args)
    man = _manifest("train", snapshot, tcfg.seed, [root, args.config, args.split])
    stats = ds.compute_norm_stats(samples)
    items = T.prepare(samples, stats, tcfg.n_exemplars, tcfg.seed)
    model = T.live_model(model_cfg, items)
    result = T.train_one(model, items, items, tcfg)
    ckpt = dataclasses.replace(result.checkpoint, metadata={**result.checkpoint.metadata, "norm_stats": stats.to_dict()})
    path = out / "model.ckpt"
    M.write_checkpoint(ckpt, path)
    doc = {
        "best_epoch": result.best_epoch,
        "epochs_run": len(result.loss_history),
        "stopped_early": result.stopped_early,
        "loss_history": result.loss_history,
        "monitor_mnae_history": result.val_history,
        "train": result.report.to_dict(),
    }
    man.outputs += [str(path), str(_write_json(out / "train.json", doc))]
    man.write(out)
    print(_metrics_table(result.report, f"best epoch {result.best_epoch}, training set"))
    return EXIT_OK


def cmd_eval(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    ckpt = M.read_checkpoint(args.checkpoint)
    model = M.model_from_checkpoint(ckpt)
    root = _data_root(args)
    samples = _select(ds.load_dataset(root), args.split, args.subset)
    if not samples:
        raise DataError("no samples to evaluate")
    stats = _stats_from(ckpt, samples)
    seed = 0 if args.seed is None else args.seed
    items = T.prepare(samples, stats, args.exemplars, seed, model.dtype)
    report = T.evaluate(model, items)
    out = _out_dir(args)
    man = _manifest("eval", {"model": model.cfg.to_dict(), "exemplars": args.exemplars}, seed, [root, args.checkpoint, args.split])
    man.outputs.append(str(_write_json(out / "metrics.json", report.to_dict())))
    man.write(out)
    print(_metrics_table(report, f"{model.cfg.variant} on {len(items)} images"))
    return EXIT_OK


def cmd_predict(args) -> int:
    if not Path(args.checkpoint).is_file():
        raise DataError(f"checkpoint {args.checkpoint} does not exist")
    image_path = Path(args.image)
    if not image_path.is_file():
        raise DataError(f"image {image_path} does not exist")
    ckpt = M.read_checkpoint(args.checkpoint)
    model = M.model_from_checkpoint(ckpt)
    pixels = ds.read_image(image_path)
    H, W = pixels.shape[1:]
    if args.boxes:
        boxes = parse_boxes(args.boxes)
    else:
        sidecar = Path(args.boxes_file) if args.boxes_file else image_path.with_suffix(".json")
        if not sidecar.is_file():
            raise DataError(f"no exemplar boxes: pass --boxes or provide {sidecar}")
        boxes = ds.read_annotation(sidecar)[1]
    if not boxes:
        raise DataError("at least one exemplar box is required")
    for i, b in enumerate(boxes):
        try:
            ds.check_box(b, H, W)
        except ValueError as exc:
            raise DataError(f"exemplar {i}: {exc}") from None
    sample = ds.ImageSample(image_path.stem, pixels, np.zeros((0, 2)), list(boxes))
    stats = _stats_from(ckpt, [sample])
    density = model.forward(ds.normalize(sample, stats, model.dtype), boxes).data.astype(np.float32)
    total = float(density.sum(dtype=np.float64))

    out = _out_dir(args)
    man = _manifest("predict", {"model": model.cfg.to_dict()}, args.seed, [image_path, args.checkpoint])
    grid = out / f"{sample.id}.density"
    export.write_density_grid(grid, density)
    export.save_density_png(out / f"{sample.id}_density.png", density)
    export.save_overlay_png(out / f"{sample.id}_overlay.png", pixels, density, boxes, f"count {total:.2f}")
    (out / f"{sample.id}_count.txt").write_text(f"{total:.6f}\n")
    man.outputs += [str(grid), *(str(out / f"{sample.id}{s}") for s in ("_density.png", "_overlay.png", "_count.txt"))]
    man.write(out)
    print(f"{total:.2f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--data", help="dataset directory (default: $FEWCOUNT_DATA)")
    common.add_argument("--seed", type=int, help="seed for every random choice of the run")
    common.add_argument("--out", default="runs", help="output directory (default: runs)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = argparse.ArgumentParser(prog="fewcount", description="Few-shot density-map colony counting.")
    p.add_argument("--version", action="version", version=f"fewcount {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("validate", parents=[common], help="check every image and annotation in a dataset")

    sp = sub.add_parser("split", parents=[common], help="write a train/test split with k folds")
    sp.add_argument("--ratio", type=float, default=0.8, help="training fraction (default 0.8)")
    sp.add_argument("--k", type=int, default=5, help="number of folds (default 5)")

    for name, text in (("crossval", "k-fold cross-validation"), ("train", "hold-out training")):
        sp = sub.add_parser(name, parents=[common], help=text)
        sp.add_argument("--config", help="YAML/JSON document with model and train sections")
        sp.add_argument("--split", help="split file; only its training samples are used")
        if name == "crossval":
            sp.add_argument("--jobs", type=int, default=1, help="folds run in parallel")
            sp.add_argument("--k", type=int, help="number of folds (default: train.k_folds)")

    sp = sub.add_parser("eval", parents=[common], help="metrics of a checkpoint on a dataset")
    sp.add_argument("checkpoint")
    sp.add_argument("--split", help="split file")
    sp.add_argument("--subset", choices=("train", "test"), default="test", help="split subset (default test)")
    sp.add_argument("--exemplars", type=int, default=3, help="exemplars drawn per image (default 3)")

    sp = sub.add_parser("predict", parents=[common], help="density map and count for one image")
    sp.add_argument("checkpoint")
    sp.add_argument("image")
    sp.add_argument("--boxes", help='exemplar boxes "x,y,h,w;x,y,h,w;..." in pixels')
    sp.add_argument("--boxes-file", help="annotation JSON whose boxes are the exemplars (default: image sidecar)")
    return p


COMMANDS = {
    "validate": cmd_validate,
    "split": cmd_split,
    "crossval": cmd_crossval,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except M.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        for key in exc.keys:
            print(f"  offending key: {key}", file=sys.stderr)
        return EXIT_CONFIG
    except (ds.DatasetError, DataError, ExemplarError, M.CheckpointError, export.GridFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ds.DegenerateStatsError) as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (RuntimeError, MemoryError, OSError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
