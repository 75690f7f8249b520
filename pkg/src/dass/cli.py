"""Command-line entry point.

Every subcommand resolves its settings as built-in defaults, then an optional
JSON config file (``--config``), then explicit flags. The resolved settings are
written to ``config.json`` inside the run directory, which is either
``--run-dir`` or ``<root>/<command>-<hash of settings>`` with the root taken
from ``--run-root`` or the ``DASS_RUN_ROOT`` environment variable.

Exit status: 0 on success, 2 for usage or config errors, 1 for runtime
failures. Errors are also printed to stderr as a one-line JSON object.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

CONFIG_VERSION = 1
RUN_ROOT_ENV = "DASS_RUN_ROOT"

log = logging.getLogger("dass")


class UsageError(Exception):
    def __init__(self, message: str, path=None):
        super().__init__(message)
        self.path = path


def _floats(text):
    return [float(t) for t in str(text).split(",") if t.strip()]


def _ints(text):
    return [int(t) for t in str(text).split(",") if t.strip()]


def _strs(text):
    return [t.strip() for t in str(text).split(",") if t.strip()]


# name -> (default, parser applied to flag strings and config values)
DEFAULTS = {
    "gen-data": {
        "train_clips": (2000, int), "eval_clips": (500, int), "classes": (8, int), "seed": (0, int),
        "clip_seconds": (10.0, float), "fbank": ("toy", str),
    },
    "train": {
        "data": (None, str), "model": ("dass", str), "preset": ("tiny", str), "pooling": (None, str),
        "seed": (0, int), "epochs": (None, int), "lr": (None, float), "batch_size": (None, int),
        "schedule": (None, str), "distill_loss": ("kl", str), "teacher": ([], _strs),
        "train_clips": (64, int), "eval_clips": (32, int), "data_seed": (0, int),
    },
    "eval": {
        "checkpoint": (None, str), "data": (None, str), "split": ("eval", str),
    },
    "niah": {
        "checkpoint": ([], _strs), "data": (None, str), "lengths": ("10,30,50", _floats),
        "positions": ("0,0.25,0.5,0.75,1", _floats), "filler": ("zeropad", _strs), "seed": (0, int),
        "clips": (32, int), "babble_dir": (None, str), "attention_positions": ("0", _floats),
        "preset": ("tiny", str),
    },
    "bench": {
        "models": ("dass,attention", _strs), "preset": ("tiny", str),
        "tokens": ("256,512,1024,2048,4096,8192", _ints), "repeats": (3, int), "mels": (16, int),
        "seed": (0, int),
    },
    "features": {
        "wav": (None, str), "fbank": ("default", str), "mean": (0.0, float), "std": (1.0, float),
    },
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dass", description="State-space audio classifier toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate the synthetic train/eval splits",
        "train": "train a model (optionally distilled from teacher checkpoints)",
        "eval": "score a checkpoint on a dataset split",
        "niah": "needle-in-a-haystack sweep",
        "bench": "forward-pass scaling benchmark",
        "features": "compute fbank features of a WAV file",
    }
    for name, opts in DEFAULTS.items():
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", help="JSON file of settings (flag names with underscores)")
        p.add_argument("--run-dir", help="output directory (default: derived from the settings)")
        p.add_argument("--run-root", help=f"root for derived run directories (env {RUN_ROOT_ENV})")
        for key, (default, conv) in opts.items():
            flag = "--" + key.replace("_", "-")
            if conv is _strs:
                p.add_argument(flag, action="append", default=None,
                               help=f"repeatable or comma separated (default {default or 'none'})")
            else:
                p.add_argument(flag, default=None, help=f"default {default}")
    return parser


def resolve_settings(command: str, args: argparse.Namespace) -> dict:
    spec = DEFAULTS[command]
    settings = {k: (conv(d) if isinstance(d, str) and conv is not str else d) for k, (d, conv) in spec.items()}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}", path=str(path))
        try:
            cfg = json.loads(path.read_text())
        except json.JSONDecodeError as err:
            raise UsageError(f"config file {path} is not valid JSON: {err}", path=str(path)) from None
        version = cfg.pop("config_version", CONFIG_VERSION)
        # run-directory snapshots carry the command name; accept them as configs
        if cfg.pop("command", command) != command:
            raise UsageError(f"config file {path} was written for another command", path=str(path))
        if version != CONFIG_VERSION:
            raise UsageError(f"config file {path} has version {version}, expected {CONFIG_VERSION}",
                             path=str(path))
        unknown = set(cfg) - set(spec)
        if unknown:
            raise UsageError(f"config file {path} has unknown keys {sorted(unknown)}", path=str(path))
        for k, v in cfg.items():
            settings[k] = _convert(spec[k][1], v)
    for k, (_, conv) in spec.items():
        v = getattr(args, k)
        if v is None:
            continue
        if isinstance(v, list):
            v = [x for item in v for x in _strs(item)]
        try:
            settings[k] = _convert(conv, v)
        except ValueError as err:
            raise UsageError(f"bad value for --{k.replace('_', '-')}: {err}") from None
    return settings


def _convert(conv, value):
    if value is None:
        return None
    if conv in (_strs, _floats, _ints):
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        return conv(value)
    return conv(value)


def run_directory(command: str, settings: dict, args) -> Path:
    if args.run_dir:
        out = Path(args.run_dir)
    else:
        root = Path(args.run_root or os.environ.get(RUN_ROOT_ENV, "runs"))
        digest = hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:10]
        out = root / f"{command}-{digest}"
    out.mkdir(parents=True, exist_ok=True)
    snapshot = {"config_version": CONFIG_VERSION, "command": command, **settings}
    (out / "config.json").write_text(json.dumps(snapshot, indent=1, sort_keys=True))
    return out


def _load_split(path, split):
    from .synth import load_dataset
    p = Path(path)
    if p.is_dir():
        p = p / f"{split}.arr"
    if not p.is_file():
        raise UsageError(f"dataset not found: {p}", path=str(p))
    return load_dataset(p)


def _model_from_checkpoint(path):
    from .models.checkpoint import load_checkpoint
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}", path=str(path))
    return load_checkpoint(path)[0]


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def cmd_gen_data(s, out):
    from .experiments import toy_splits
    from .synth import save_dataset
    train, ev = toy_splits(s["train_clips"], s["eval_clips"], s["classes"], s["seed"], s["clip_seconds"],
                           s["fbank"])
    save_dataset(out / "train.arr", train)
    save_dataset(out / "eval.arr", ev)
    return {"train": str(out / "train.arr"), "eval": str(out / "eval.arr"),
            "train_digest": train.digest(), "eval_digest": ev.digest(),
            "frames": int(train.features.shape[1]), "mels": int(train.features.shape[2])}


def cmd_train(s, out):
    from .distill import TeacherHandle, train
    from .experiments import build_model, toy_splits, train_config
    from .metrics import mean_average_precision
    from .distill import predict_logits
    from .models.checkpoint import save_checkpoint
    if s["data"]:
        tr, ev = _load_split(s["data"], "train"), _load_split(s["data"], "eval")
    else:
        tr, ev = toy_splits(s["train_clips"], s["eval_clips"], 8, s["data_seed"])
    teachers = [_model_from_checkpoint(p) for p in s["teacher"]]
    model = build_model(s["model"], s["preset"], tr.num_classes, s["pooling"], s["seed"])
    cfg = train_config(s["seed"], s["lr"], s["epochs"], s["batch_size"], s["schedule"], s["distill_loss"])
    log_path = out / "metrics.jsonl"
    log_path.unlink(missing_ok=True)
    t0 = time.perf_counter()
    result = train(model, tr.features, tr.labels, cfg, TeacherHandle(teachers) if teachers else None,
                   eval_set=(ev.features, ev.labels), log_path=log_path)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, result.model, {"train_config": cfg.to_dict(), "dataset_digest": tr.digest(),
                                         "fbank": tr.fbank_config.to_dict()}, result.optimizer)
    final = mean_average_precision(predict_logits(result.model, ev.features), ev.labels)[0]
    return {"checkpoint": str(ckpt), "checkpoint_sha256": _sha256(ckpt), "eval_mAP": final,
            "wallclock_s": time.perf_counter() - t0}


def cmd_eval(s, out):
    from .distill import predict_logits
    from .metrics import mean_average_precision
    if not s["checkpoint"]:
        raise UsageError("--checkpoint is required")
    if not s["data"]:
        raise UsageError("--data is required")
    model = _model_from_checkpoint(s["checkpoint"])
    ds = _load_split(s["data"], s["split"])
    m, per_class = mean_average_precision(predict_logits(model, ds.features), ds.labels)
    report = {"mAP": m, "per_class_ap": [None if np.isnan(v) else v for v in per_class],
              "clips": len(ds)}
    (out / "eval.json").write_text(json.dumps(report, indent=1))
    return report


def cmd_niah(s, out):
    from .experiments import build_model, toy_splits
    from .models.attention import AttentionClassifier
    from .niah import Filler, babble_from_files, run_sweep
    from .bench import token_count
    fillers = [Filler.parse(f) for f in s["filler"]]
    if s["data"]:
        ds = _load_split(s["data"], "eval")
    else:
        ds = toy_splits(1, s["clips"], 8, s["seed"])[1]
    n = min(s["clips"], len(ds))
    models, notes = {}, []
    if s["checkpoint"]:
        for i, path in enumerate(s["checkpoint"]):
            name, _, p = path.rpartition("=")
            models[name or f"model{i}"] = _model_from_checkpoint(p)
    else:
        models["dass-untrained"] = build_model("dass", s["preset"], ds.num_classes, None, s["seed"])
        notes.append("no checkpoint given: scored an untrained model (plumbing check only)")
    babble = None
    if s["babble_dir"]:
        files = sorted(Path(s["babble_dir"]).glob("*.wav"))
        if not files:
            raise UsageError(f"no WAV files in {s['babble_dir']}", path=s["babble_dir"])
        babble = babble_from_files(files, max(s["lengths"]), ds.fbank_config.sample_rate)
    positions = {name: s["attention_positions"] for name, m in models.items()
                 if isinstance(m, AttentionClassifier)}
    mels = ds.features.shape[2]
    report = run_sweep(models, ds.features[:n], ds.labels[:n], ds.fbank_config, s["lengths"], s["positions"],
                       fillers, powers=ds.powers[:n], seed=s["seed"], needle_len=ds.clip_seconds,
                       model_positions=positions, babble_source=babble,
                       token_counter=lambda m, frames: token_count(m, frames, mels))
    report.notes.extend(notes)
    report.check()
    report.to_csv(out / "niah.csv")
    report.to_json(out / "niah.json")
    report.emit_plot_data(out / "plots")
    return {"conditions": len(report.rows), "report": str(out / "niah.csv"), "notes": report.notes}


def cmd_bench(s, out):
    from .bench import scaling_bench, write_bench
    from .experiments import build_model
    models = {name: build_model(name, s["preset"], 8, None, s["seed"]) for name in s["models"]}
    if len(s["tokens"]) < 4 or max(s["tokens"]) < 8 * min(s["tokens"]):
        raise UsageError("need at least 4 token lengths spanning an 8x range")
    records, slopes = scaling_bench(models, s["tokens"], s["mels"], s["repeats"], seed=s["seed"])
    write_bench(out, records, slopes)
    return {"slopes": slopes, "report": str(out / "bench.csv")}


def cmd_features(s, out):
    from .features import TOY_FBANK, FbankConfig, fbank, read_wav
    from .models.checkpoint import save_arrays
    if not s["wav"]:
        raise UsageError("--wav is required")
    if not Path(s["wav"]).is_file():
        raise UsageError(f"WAV file not found: {s['wav']}", path=s["wav"])
    base = {"toy": TOY_FBANK, "default": FbankConfig()}.get(s["fbank"])
    if base is None:
        raise UsageError("--fbank must be 'toy' or 'default'")
    wav, rate = read_wav(s["wav"])
    cfg = dataclasses.replace(base, sample_rate=rate).with_stats(s["mean"], s["std"])
    feats = fbank(wav, cfg)
    save_arrays(out / "features.arr", {"fbank": feats}, kind="features", config=cfg.to_dict(),
                metadata={"source": str(s["wav"])})
    return {"frames": int(feats.shape[0]), "mels": int(feats.shape[1]), "output": str(out / "features.arr")}


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval": cmd_eval, "niah": cmd_niah,
            "bench": cmd_bench, "features": cmd_features}


def _fail(code: int, message: str, **extra) -> int:
    print(json.dumps({"status": "error", "exit_code": code, "message": message, **extra}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as err:
        return int(err.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        settings = resolve_settings(args.command, args)
        out = run_directory(args.command, settings, args)
        summary = COMMANDS[args.command](settings, out)
    except UsageError as err:
        return _fail(2, str(err), **({"path": err.path} if err.path else {}))
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        log.debug("failure", exc_info=True)
        return _fail(1, f"{type(err).__name__}: {err}")
    summary = {"status": "ok", "command": args.command, "run_dir": str(out), **summary}
    (out / "summary.json").write_text(json.dumps(summary, indent=1, default=float))
    print(json.dumps(summary, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
