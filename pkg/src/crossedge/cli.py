"""Command-line entry point: ``crossedge {train,eval,infer,synth,report}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric divergence during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import DATA_ROOT_ENV, TOY_PRESET, ConfigKeyError, RunConfig
from .data import DataIntegrityError, load_bsds_style, split_train_val, synth_generate, write_bsds_style
from .evaluate import EvalReport, bench, nms_thin, ods_ois, predict_maps
from .losses import NumericError
from .nets import ConfigError, NetConfig
from .params import load_parameters
from .train import efficient_config, load_checkpoint, train_collaborative

log = logging.getLogger("crossedge")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- helpers ---------------------------------------------------------------------------


def _run_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "preset", None) == "toy":
        cfg = RunConfig.from_dict({**cfg.to_dict(), **TOY_PRESET})
    cfg = cfg.with_overrides(getattr(args, "set", None) or [])
    if getattr(args, "data_root", None):
        cfg = RunConfig.from_dict({**cfg.to_dict(), "data_root": args.data_root})
    return cfg


def _load_dataset(root: Path | None, key: str = "data_root"):
    if root is None:
        raise DataError(f"{key} is not set (pass --data-root or set {DATA_ROOT_ENV})")
    if not root.is_dir():
        raise DataError(f"{key} {root} does not exist")
    samples = load_bsds_style(root)
    if not samples:
        raise DataError(f"{key} {root} holds no images/*.png")
    return samples


def _read_map(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.ndim == 3:
        arr = arr[..., 0]
    return arr.astype(np.float64) / (65535.0 if arr.dtype == np.uint16 else 255.0)


def _write_map(path: Path, prob: np.ndarray) -> None:
    Image.fromarray(np.round(np.clip(prob, 0, 1) * 255).astype(np.uint8), "L").save(path)


def _load_model(path: Path):
    if not path.exists():
        raise DataError(f"parameter file {path} does not exist")
    theta, manifest = load_parameters(path)
    if "net_config" not in manifest:
        raise DataError(f"{path} has no net_config in its manifest")
    return theta, NetConfig.from_dict(manifest["net_config"])


def _prediction_for(pred_dir: Path, name: str) -> Path | list[Path] | None:
    if (pred_dir / f"{name}.png").exists():
        return pred_dir / f"{name}.png"
    for base in (pred_dir, pred_dir / "gt"):
        maps = sorted((base / name).glob("*.png"))
        if maps:
            return maps
    return None


# -- commands --------------------------------------------------------------------------


def cmd_train(args) -> int:
    if args.resume:
        ckpt = Path(args.resume)
        if not ckpt.exists():
            raise DataError(f"checkpoint {ckpt} does not exist")
        run_dir = ckpt.parent.parent
        saved = json.loads((run_dir / "run_config.json").read_text())
        cfg = RunConfig.from_dict(saved["run"])
        if args.data_root:
            cfg = RunConfig.from_dict({**cfg.to_dict(), "data_root": args.data_root})
        efficient = saved["efficient"]
        _, tcfg = load_checkpoint(ckpt)
    else:
        cfg = _run_config(args)
        efficient = args.efficient
        tcfg = efficient_config(cfg.train_config()) if efficient else cfg.train_config()
        run_dir = Path(args.out) / f"{'efficient' if efficient else 'collaborative'}-seed{cfg.seed}"
    samples = _load_dataset(cfg.resolved_data_root())
    try:
        split = split_train_val(samples, cfg.val_fraction, cfg.split_seed)
    except ValueError as err:
        raise DataError(str(err)) from err
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "run_config.json").write_text(json.dumps({"run": cfg.to_dict(), "efficient": efficient,
                                                        "train": tcfg.to_dict()}, indent=2))
    result = train_collaborative(split, tcfg, run_dir=run_dir, resume=args.resume)
    print(f"trained {result.state.epoch} epochs; parameters in {run_dir / 'final_params.npz'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    ecfg = cfg.eval_config()
    gt_root = Path(args.gt_dir) if args.gt_dir else cfg.resolved_data_root()
    dataset = _load_dataset(gt_root, "gt_dir")
    gts = [s.annotations for s in dataset]
    fps = n_params = None
    if args.params:
        theta, ncfg = _load_model(Path(args.params))
        scales = cfg.eval_scales if tuple(cfg.eval_scales) != (1.0,) else None
        preds = predict_maps(theta, ncfg, [s.image for s in dataset], scales)
        if args.bench:
            fps, n_params = bench(ncfg, theta, (1, 3, *dataset[0].shape), repeats=10)
    elif args.pred_dir:
        pred_dir = Path(args.pred_dir)
        preds, problems = [], []
        for s in dataset:
            src = _prediction_for(pred_dir, s.name)
            if src is None:
                problems.append(f"{s.name}: no prediction in {pred_dir}")
                continue
            m = np.mean([_read_map(p) for p in src], axis=0) if isinstance(src, list) else _read_map(src)
            if m.shape != s.shape:
                problems.append(f"{s.name}: prediction {m.shape} vs annotation {s.shape}")
            preds.append(m)
        if problems:
            raise DataError("prediction/annotation mismatch:\n  " + "\n  ".join(problems))
    else:
        raise UsageError("eval needs --params or --pred-dir")
    if ecfg.apply_thinning or args.params:
        preds = [nms_thin(p) for p in preds]
    report = ods_ois(preds, gts, ecfg)
    report = EvalReport(report.ods_f, report.ois_f, report.ods_threshold, report.pr_points, fps, n_params, ecfg)
    out = Path(args.out)
    js, csv_path = report.write(out, args.name)
    print(f"ODS={report.ods_f:.4f} OIS={report.ois_f:.4f} -> {js}, {csv_path}")
    return EXIT_OK


def cmd_infer(args) -> int:
    theta, ncfg = _load_model(Path(args.params))
    src = Path(args.input)
    img_dir = src / "images" if (src / "images").is_dir() else src
    paths = sorted(img_dir.glob("*.png"))
    if not paths:
        raise DataError(f"no .png images in {img_dir}")
    images = []
    for p in paths:
        with Image.open(p) as im:
            images.append(np.asarray(im.convert("RGB")).astype(np.float64) / 255.0)
    scales = tuple(args.scales) if args.scales else None
    maps = predict_maps(theta, ncfg, images, scales)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for p, m in zip(paths, maps):
        _write_map(out / p.name, nms_thin(m) if args.thin else m)
    print(f"wrote {len(maps)} maps to {out}")
    return EXIT_OK


def cmd_synth(args) -> int:
    out = Path(args.out) if args.out else None
    if out is None:
        env = os.environ.get(DATA_ROOT_ENV)
        if not env:
            raise UsageError(f"synth needs --out or {DATA_ROOT_ENV}")
        out = Path(env)
    try:
        samples = synth_generate(args.count, args.size, args.seed)
    except ValueError as err:
        raise UsageError(str(err)) from err
    write_bsds_style(samples, out)
    print(f"wrote {len(samples)} samples to {out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        raise DataError(f"run directory {run_dir} does not exist")
    warnings = []
    lines = [f"run: {run_dir}"]

    def load(name):
        p = run_dir / name
        if not p.exists():
            warnings.append(f"missing {name}")
            return None
        return json.loads(p.read_text())

    train_log = load("train_log.json")
    if train_log is not None:
        lines.append(f"epochs completed: {train_log['completed_epochs']}/{train_log['config']['loss']['epochs']}")
        if train_log["epochs"]:
            last = train_log["epochs"][-1]
            lines.append(f"last epoch loss: {json.dumps(last['loss'])}")
    params_file = run_dir / "final_params.npz"
    n_params = None
    if params_file.exists():
        theta, _ = load_parameters(params_file)
        n_params = theta.total_count
    else:
        warnings.append("missing final_params.npz")
    report = load(f"{args.name}_report.json")
    ods = ois = fps = None
    if report is not None:
        ods, ois, fps = report["ods_f"], report["ois_f"], report.get("throughput_fps")
        n_params = report.get("param_count") or n_params
        lines.append(f"ODS-F: {ods}")
        lines.append(f"OIS-F: {ois}")
    lines.append(f"accuracy (ODS-F): {ods if ods is not None else 'n/a'}")
    lines.append(f"speed (FPS): {fps if fps is not None else 'n/a'}")
    lines.append(f"size (M params): {n_params / 1e6 if n_params is not None else 'n/a'}")
    print("\n".join(lines))
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossedge", description="Collaborative edge detector training and evaluation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(sp):
        sp.add_argument("--config", help="JSON file with RunConfig keys")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
        sp.add_argument("--data-root", help=f"dataset directory (default: ${DATA_ROOT_ENV})")

    t = sub.add_parser("train", help="train the collaborative (or efficient) detector")
    config_args(t)
    t.add_argument("--preset", choices=["toy"], help="settings for short CPU runs on synthetic data")
    t.add_argument("--efficient", action="store_true", help="single network with pruning samples")
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a checkpoint file")
    t.add_argument("--out", default="runs", help="parent directory for run directories")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="ODS/OIS of saved predictions or a trained model")
    config_args(e)
    src = e.add_mutually_exclusive_group()
    src.add_argument("--params", help="final_params.npz of a run")
    src.add_argument("--pred-dir", help="directory of <id>.png probability maps")
    e.add_argument("--gt-dir", help="annotated dataset (default: data root)")
    e.add_argument("--out", default=".", help="where the report files go")
    e.add_argument("--name", default="eval", help="report file stem")
    e.add_argument("--no-bench", dest="bench", action="store_false", help="skip the throughput measurement")
    e.set_defaults(func=cmd_eval)

    i = sub.add_parser("infer", help="write edge maps for a directory of images")
    i.add_argument("--params", required=True)
    i.add_argument("--input", required=True, help="directory of .png images (or a dataset root)")
    i.add_argument("--out", required=True)
    i.add_argument("--scales", type=float, nargs="+")
    i.add_argument("--thin", action="store_true", help="apply non-maximum suppression")
    i.set_defaults(func=cmd_infer)

    s = sub.add_parser("synth", help="generate the synthetic shapes corpus")
    s.add_argument("--count", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", help=f"dataset directory (default: ${DATA_ROOT_ENV})")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("report", help="summarise a run directory")
    r.add_argument("run_dir")
    r.add_argument("--name", default="eval", help="report file stem written by eval")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigKeyError, ConfigError) as err:
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, DataIntegrityError, FileNotFoundError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as err:
        print(f"numeric divergence: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ValueError, TypeError) as err:
        # bad values in a config file or override
        print(f"usage error: {err}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
