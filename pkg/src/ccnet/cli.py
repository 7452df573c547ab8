"""Command-line interface: ``ccnet synth | train | predict | evaluate | ablate``.

Every path is resolved under ``--workdir``. Layout::

    data/manifest.json, data/images/, data/labels/        (synth)
    runs/<run>/config.json, split.json, train_log.jsonl    (train)
    runs/<run>/checkpoints/iter_XXXXXX.pt, final.pt        (train)
    runs/<run>/predictions/<case>.nrrd + <case>.json       (predict)
    runs/<run>/results/cases.csv, aggregate.json           (evaluate)
    ablations/<mode>/results.csv, ablations/<mode>/<setting>/...   (ablate)

Options come from an optional JSON config file (``--config``) with the
sections ``synth``, ``data``, ``train``, ``predict``, ``evaluate``, ``ablate``
and a top-level ``run_name``; command-line flags override the file, which
overrides built-in defaults. ``CCNET_DEVICE`` selects the torch device.

Exit codes: 0 success, 2 usage error, 3 missing input file, 4 invalid
configuration or data, 5 training diverged, 6 an output failed validation.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import datapipe
from .checkpoint import load_model, read_checkpoint
from .datapipe import DataError, SplitSpec
from .inference import binarize, sliding_window_predict, write_prediction
from .metrics import (METRIC_NAMES, evaluate_corpus, write_aggregate_json,
                      write_results_csv)
from .netcore import ConfigurationError
from .training import TrainConfig, TrainingDiverged, train

logger = logging.getLogger("ccnet")

DEFAULTS = {
    "run_name": "ccnet",
    "synth": {"n_cases": 100, "n_train": 80, "dims": [64, 64, 64], "seed": 1337,
              "fg_band": [0.02, 0.15]},
    "data": {"manifest": "data/manifest.json", "labeled_fraction": 0.1, "split_seed": 1337,
             "crop_margin": 25},
    "train": {},
    "predict": {"stride": [18, 18, 4], "threshold": 0.5, "checkpoint": None,
                "split": "test"},
    "evaluate": {"units": "voxel"},
    "ablate": {"lambda_s_grid": [0.1, 0.2, 0.3, 0.4, 0.5]},
}


class OutputError(RuntimeError):
    pass


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(args) -> tuple[dict, str | None]:
    raw = None
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise FileNotFoundError(path)
        raw = path.read_text()
        try:
            cfg = _merge(cfg, json.loads(raw))
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"{path}: invalid JSON ({e})") from None
    flag_map = {
        "run_name": ("run_name",), "iterations": ("train", "max_iteration"),
        "seed": ("train", "seed"), "base_channels": ("train", "base_channels"),
        "patch_size": ("train", "patch_size"), "lambda_s": ("train", "lambda_s"),
        "lr": ("train", "lr"), "shared_encoder": ("train", "shared_encoder"),
        "checkpoint_every": ("train", "checkpoint_every"),
        "labeled_fraction": ("data", "labeled_fraction"), "manifest": ("data", "manifest"),
        "n_cases": ("synth", "n_cases"), "n_train": ("synth", "n_train"),
        "dims": ("synth", "dims"), "synth_seed": ("synth", "seed"),
        "stride": ("predict", "stride"), "threshold": ("predict", "threshold"),
        "checkpoint": ("predict", "checkpoint"), "units": ("evaluate", "units"),
        "grid": ("ablate", "lambda_s_grid"),
    }
    for flag, keys in flag_map.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node.setdefault(k, {})
        node[keys[-1]] = value
    return cfg, raw


def _device() -> str:
    return os.environ.get("CCNET_DEVICE", "cpu")


def _run_dir(workdir: Path, cfg: dict) -> Path:
    if cfg.get("run_dir"):
        return workdir / cfg["run_dir"]
    return workdir / "runs" / cfg["run_name"]


def _verify(*paths: Path) -> None:
    for p in paths:
        if not p.exists() or p.stat().st_size == 0:
            raise OutputError(f"expected output {p} missing or empty")


# --- commands -----------------------------------------------------------------

def cmd_synth(workdir: Path, cfg: dict, raw: str | None) -> dict:
    s = cfg["synth"]
    n_train = s["n_train"] if s["n_train"] is not None else s["n_cases"]
    cases = datapipe.synth_generate(s["n_cases"], tuple(s["dims"]), s["seed"],
                                    tuple(s["fg_band"]))
    root = workdir / Path(cfg["data"]["manifest"]).parent
    manifest = datapipe.write_dataset(root, cases, n_train=n_train)
    entries = datapipe.read_manifest(manifest)
    if len(entries) != s["n_cases"]:
        raise OutputError("manifest does not list every generated case")
    _verify(manifest, *(manifest.parent / e["image_path"] for e in entries))
    frac = [float(np.count_nonzero(c.label)) / c.label.size for c in cases]
    summary = {"manifest": str(manifest), "n_cases": len(cases), "n_train": n_train,
               "n_test": len(cases) - n_train, "dims": list(s["dims"]),
               "foreground_fraction_mean": float(np.mean(frac)),
               "foreground_fraction_range": [float(min(frac)), float(max(frac))]}
    (root / "synth_config.json").write_text(json.dumps(
        {"config": cfg, "config_file": raw, "summary": summary}, indent=2))
    print(json.dumps(summary, indent=2))
    return summary


def _load_split(workdir: Path, cfg: dict):
    manifest = workdir / cfg["data"]["manifest"]
    entries = datapipe.read_manifest(manifest)
    train_cases = datapipe.load_manifest(manifest, "train")
    test_cases = datapipe.load_manifest(manifest, "test")
    if not train_cases:
        raise DataError(f"{manifest} lists no training case")
    spec = SplitSpec(train_count=len(train_cases), test_count=len(test_cases),
                     labeled_fraction=float(cfg["data"]["labeled_fraction"]),
                     seed=int(cfg["data"]["split_seed"]))
    return datapipe.split(train_cases + test_cases, spec), entries


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


def cmd_train(workdir: Path, cfg: dict, raw: str | None) -> Path:
    config = _train_config(cfg)
    split, _ = _load_split(workdir, cfg)
    margin = int(cfg["data"]["crop_margin"])
    labeled = [datapipe.preprocess(c, margin) for c in split.labeled]
    unlabeled = [datapipe.preprocess(c, margin) for c in split.unlabeled]
    run = _run_dir(workdir, cfg)
    run.mkdir(parents=True, exist_ok=True)
    split_info = {"labeled": [c.id for c in split.labeled],
                  "unlabeled": [c.id for c in split.unlabeled],
                  "test": [c.id for c in split.test]}
    (run / "split.json").write_text(json.dumps(split_info, indent=2))
    (run / "config.json").write_text(json.dumps(
        {"config": cfg, "config_file": raw, "train_config": config.to_dict()}, indent=2))
    msg = f"|D_L|={len(labeled)} |D_U|={len(unlabeled)} test={len(split.test)}"
    logger.info(msg)
    print(msg)
    t0 = time.time()
    state = train(config, labeled, unlabeled, out_dir=run, device=_device(),
                  metadata={"run_name": cfg["run_name"], "n_labeled": len(labeled),
                            "n_unlabeled": len(unlabeled)})
    final = run / "checkpoints" / "final.pt"
    _verify(final, run / "train_log.jsonl")
    read_checkpoint(final)
    n_lines = sum(1 for _ in open(run / "train_log.jsonl"))
    if n_lines != config.max_iteration:
        raise OutputError(f"train log has {n_lines} records, expected {config.max_iteration}")
    print(f"trained {state.iteration} iterations in {time.time() - t0:.1f}s -> {final}")
    return final


def cmd_predict(workdir: Path, cfg: dict, raw: str | None) -> Path:
    p = cfg["predict"]
    run = _run_dir(workdir, cfg)
    ckpt = Path(p["checkpoint"]) if p["checkpoint"] else run / "checkpoints" / "final.pt"
    if not ckpt.is_absolute() and p["checkpoint"]:
        ckpt = workdir / ckpt
    if not ckpt.exists():
        raise FileNotFoundError(ckpt)
    blob = read_checkpoint(ckpt)
    patch = tuple(blob["metadata"]["train_config"]["patch_size"])
    model = load_model(ckpt, "main").to(_device())
    manifest = workdir / cfg["data"]["manifest"]
    cases = datapipe.load_manifest(manifest, p["split"])
    out_dir = run / "predictions"
    stride = tuple(p["stride"])
    written = []
    for case in cases:
        prepped = datapipe.preprocess(datapipe.Case(case.volume),
                                      int(cfg["data"]["crop_margin"]))
        probs = sliding_window_predict(model, prepped.volume, patch, stride)
        mask = datapipe.uncrop(binarize(probs, p["threshold"]), prepped)
        written.extend(write_prediction(out_dir, case.id, mask, case.volume.spacing, ckpt,
                                        p["threshold"], stride))
    _verify(*written)
    print(f"wrote {len(cases)} masks to {out_dir}")
    return out_dir


def evaluate_run(workdir: Path, cfg: dict, pred_dir: Path | None = None,
                 out_dir: Path | None = None):
    run = _run_dir(workdir, cfg)
    pred_dir = pred_dir or run / "predictions"
    out_dir = out_dir or run / "results"
    manifest = workdir / cfg["data"]["manifest"]
    refs, preds, spacings = {}, {}, {}
    for e in datapipe.read_manifest(manifest):
        if e["split"] != cfg["predict"]["split"] or not e.get("label_path"):
            continue
        pred_path = pred_dir / f"{e['id']}.nrrd"
        if not pred_path.exists():
            raise FileNotFoundError(pred_path)
        case = datapipe.load_nrrd(manifest.parent / e["image_path"],
                                  manifest.parent / e["label_path"], e["id"])
        pred, _ = datapipe.read_nrrd_array(pred_path)
        refs[e["id"]] = case.label
        preds[e["id"]] = datapipe.check_label(pred, case.label.shape, e["id"])
        spacings[e["id"]] = case.volume.spacing
    if not refs:
        raise DataError("no labeled reference case to evaluate")
    units = cfg["evaluate"]["units"]
    if units not in ("voxel", "mm"):
        raise ConfigurationError(f"units must be 'voxel' or 'mm', got {units!r}")
    results, agg = evaluate_corpus(preds, refs, spacings if units == "mm" else None)
    agg["units"] = units
    csv_path = write_results_csv(out_dir / "cases.csv", results)
    json_path = write_aggregate_json(out_dir / "aggregate.json", agg)
    _verify(csv_path, json_path)
    return results, agg, csv_path


def cmd_evaluate(workdir: Path, cfg: dict, raw: str | None, pred_dir=None):
    results, agg, csv_path = evaluate_run(workdir, cfg, Path(pred_dir) if pred_dir else None)
    print(json.dumps(agg, indent=2))
    return csv_path


def cmd_ablate(workdir: Path, cfg: dict, raw: str | None, mode: str) -> Path:
    if mode == "encoder":
        settings = [("shared", {"shared_encoder": True}),
                    ("independent", {"shared_encoder": False})]
    elif mode == "lambda_s":
        settings = [(f"lambda_s={v:g}", {"lambda_s": float(v)})
                    for v in cfg["ablate"]["lambda_s_grid"]]
    else:
        raise ConfigurationError(f"unknown ablation mode {mode!r}")
    root = workdir / "ablations" / mode
    rows = []
    for name, override in settings:
        sub = copy.deepcopy(cfg)
        sub["train"] = {**sub["train"], **override}
        sub["run_name"] = f"{cfg['run_name']}-{mode}-{name}"
        sub["run_dir"] = str(Path("ablations") / mode / name)
        print(f"[{mode}] {name}")
        cmd_train(workdir, sub, raw)
        cmd_predict(workdir, sub, raw)
        _, agg, _ = evaluate_run(workdir, sub)
        rows.append({"setting": name, **{k: override[k] for k in override},
                     **{m: agg[f"{m}_mean"] for m in METRIC_NAMES},
                     "n": agg["n"], "skipped": agg["skipped"]})
    out = root / "results.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    (root / "config.json").write_text(json.dumps({"config": cfg, "config_file": raw}, indent=2))
    _verify(out)
    for row in rows:
        print(", ".join(f"{k}={v}" for k, v in row.items()))
    return out


# --- argument parsing -----------------------------------------------------------

def _int_triple(text: str) -> list[int]:
    parts = [int(v) for v in text.replace("x", ",").split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"expected three integers, got {text!r}")
    return parts


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ccnet", description=__doc__.split("\n")[0])
    parser.add_argument("--workdir", default=".", help="root for every relative path")
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("--run-name", dest="run_name")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic NRRD corpus")
    p.add_argument("--n-cases", dest="n_cases", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--dims", type=_int_triple)
    p.add_argument("--seed", dest="synth_seed", type=int)

    def add_train_flags(p):
        p.add_argument("--manifest")
        p.add_argument("--iterations", type=int)
        p.add_argument("--seed", type=int)
        p.add_argument("--labeled-fraction", dest="labeled_fraction", type=float)
        p.add_argument("--base-channels", dest="base_channels", type=int)
        p.add_argument("--patch-size", dest="patch_size", type=_int_triple)
        p.add_argument("--lambda-s", dest="lambda_s", type=float)
        p.add_argument("--lr", type=float)
        p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
        p.add_argument("--shared-encoder", dest="shared_encoder", action="store_const",
                       const=True)
        p.add_argument("--stride", type=_int_triple)
        p.add_argument("--threshold", type=float)

    add_train_flags(sub.add_parser("train", help="run complementary consistency training"))

    p = sub.add_parser("predict", help="main-model sliding-window masks")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--stride", type=_int_triple)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("evaluate", help="score predicted masks")
    p.add_argument("--pred-dir", dest="pred_dir")
    p.add_argument("--manifest")
    p.add_argument("--units", choices=("voxel", "mm"))

    p = sub.add_parser("ablate", help="shared-encoder or lambda_s ablation")
    p.add_argument("mode", choices=("encoder", "lambda_s"))
    p.add_argument("--grid", type=lambda s: [float(v) for v in s.split(",")])
    add_train_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    workdir = Path(args.workdir)
    try:
        cfg, raw = load_config(args)
        if args.command == "synth":
            cmd_synth(workdir, cfg, raw)
        elif args.command == "train":
            cmd_train(workdir, cfg, raw)
        elif args.command == "predict":
            cmd_predict(workdir, cfg, raw)
        elif args.command == "evaluate":
            cmd_evaluate(workdir, cfg, raw, args.pred_dir)
        elif args.command == "ablate":
            cmd_ablate(workdir, cfg, raw, args.mode)
    except FileNotFoundError as e:
        print(f"error: missing file: {e}", file=sys.stderr)
        return 3
    except (ConfigurationError, DataError) as e:
        print(f"error: invalid configuration or data: {e}", file=sys.stderr)
        return 4
    except TrainingDiverged as e:
        print(f"error: {e}; last record {json.dumps(e.record)}", file=sys.stderr)
        return 5
    except OutputError as e:
        print(f"error: {e}", file=sys.stderr)
        return 6
    return 0


if __name__ == "__main__":
    sys.exit(main())
