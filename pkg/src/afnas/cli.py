"""Command-line entry point: ``afnas <subcommand> [flags]``.

Every flag has a twin key in the optional ``--config`` file (flat
``key = value`` lines, dashes written as underscores); flags win over the
file, the file wins over the profile defaults. Each run writes a
``manifest.json`` next to its outputs with the fully resolved settings.

Exit codes: 0 success, 1 usage, 2 data, 3 infeasible model, 4 internal.
Errors go to stderr as ``afnas-error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import glob
import json
import os
import sys

import numpy as np

from . import __version__, cost, deploy, nas
from .data import (
    DatasetSplit,
    make_split,
    read_csv_record,
    read_raw_record,
    synthesize_dataset,
    write_csv_record,
    write_raw_record,
)
from .errors import (
    AfnasError,
    ConfigError,
    ContractError,
    DeadlockError,
    InfeasibleShapeError,
    ParseError,
)
from .metrics import evaluate, format_report
from .nn import build_network
from .train import TrainConfig, load_checkpoint, save_checkpoint, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INFEASIBLE, EXIT_INTERNAL = 0, 1, 2, 3, 4

PROFILES = {
    "paper": {
        "generations": 190, "offspring": 8, "epochs": 30, "sample_rate_hz": 128.0,
        "batch_size": 32, "max_macs": None,
    },
    "desk": {
        "generations": 10, "offspring": 8, "epochs": 10, "sample_rate_hz": 32.0,
        "batch_size": 8, "max_macs": 200_000,
    },
}

# key -> (type, default); every key is also a flag
SETTINGS = {
    "profile": (str, "paper"),
    "seed": (int, 0),
    "out": (str, None),
    "dataset": (str, "synthetic"),
    "sample_rate_hz": (float, None),
    "generations": (int, None),
    "offspring": (int, None),
    "epochs": (int, None),
    "max_kernel": (int, 32),
    "batch_size": (int, None),
    "max_macs": (int, None),
    "probands": (int, 30),
    "windows_per_proband": (int, 12),
    "split": (str, "test"),
    "genome": (str, "k16c16s8-k8c32s4@q16.8"),
    "checkpoint": (str, None),
    "blob": (str, None),
    "predictions": (str, None),
    "log": (str, None),
    "format": (str, "csv"),
    "default_label": (str, "NORMAL"),
}


class UsageError(AfnasError):
    pass


class InfeasibleModel(AfnasError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _flag(key):
    return "--" + key.replace("_", "-")


def build_parser():
    p = _Parser(prog="afnas", description="Hardware-aware AF classifier search and deployment.")
    p.add_argument("--version", action="version", version=f"afnas {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    helps = {
        "synth-data": "write synthetic records (CSV or RAW)",
        "train": "train one genome, write a checkpoint and metrics",
        "eval": "print sensitivity / specificity / noise specificity",
        "search": "run the architecture search",
        "export": "fold a checkpoint and write the integer blob",
        "infer": "stream windows through a blob, write predictions",
        "report": "Pareto scatter and cost table from a run log",
    }
    for name, text in helps.items():
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config")
        for key, (typ, _) in SETTINGS.items():
            kw = {"type": typ, "default": argparse.SUPPRESS, "dest": key}
            if key == "profile":
                kw["choices"] = sorted(PROFILES)
            if key == "split":
                kw["choices"] = ["train", "validation", "test", "all"]
            if key == "format":
                kw["choices"] = ["csv", "raw"]
            sp.add_argument(_flag(key), **kw)
    return p


def _read_config(path):
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    cp = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"))
    try:
        cp.read_string("[config]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise UsageError(f"malformed config {path}: {exc}") from None
    out = {}
    for key, raw in cp["config"].items():
        key = key.replace("-", "_")
        if key not in SETTINGS:
            raise UsageError(f"unknown config key {key!r} in {path}")
        typ = SETTINGS[key][0]
        try:
            out[key] = typ(raw)
        except ValueError:
            raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {typ.__name__}") from None
    return out


def resolve(args) -> dict:
    """Merge defaults, profile, config file and flags (in rising priority)."""
    given = {k: v for k, v in vars(args).items() if k in SETTINGS}
    file_cfg = _read_config(args.config) if getattr(args, "config", None) else {}
    profile = given.get("profile", file_cfg.get("profile", SETTINGS["profile"][1]))
    if profile not in PROFILES:
        raise UsageError(f"unknown profile {profile!r}")
    cfg = {k: d for k, (_, d) in SETTINGS.items()}
    cfg.update({k: v for k, v in PROFILES[profile].items()})
    cfg.update(file_cfg)
    cfg.update(given)
    cfg["profile"] = profile
    if cfg["split"] not in ("train", "validation", "test", "all"):
        raise UsageError(f"unknown split {cfg['split']!r}")
    return cfg


def _out_dir(cfg, fallback):
    out = cfg["out"] or fallback
    os.makedirs(out, exist_ok=True)
    return out


def _write_manifest(out, command, cfg, extra=None):
    man = {"command": command, "version": __version__, "config": cfg}
    if extra:
        man.update(extra)
    with open(os.path.join(out, "manifest.json"), "w") as fh:
        json.dump(man, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- dataset plumbing --------------------------------------------------------


def _load_windows(cfg):
    src = cfg["dataset"]
    if src == "synthetic":
        return synthesize_dataset(cfg["probands"], cfg["windows_per_proband"], cfg["sample_rate_hz"], cfg["seed"])
    if not os.path.isdir(src):
        raise ConfigError(f"dataset {src!r} is neither 'synthetic' nor a directory")
    windows = []
    for path in sorted(glob.glob(os.path.join(src, "*.csv"))):
        windows += read_csv_record(path, cfg["sample_rate_hz"], default_label=cfg["default_label"])
    for path in sorted(glob.glob(os.path.join(src, "*.raw"))):
        windows += read_raw_record(path, default_label=cfg["default_label"])
    if not windows:
        raise ConfigError(f"no .csv or .raw records in {src}")
    return windows


def _window_ids(windows):
    seen, ids = {}, []
    for w in windows:
        i = seen.get(w.source_id, 0)
        seen[w.source_id] = i + 1
        ids.append(f"{w.source_id}:{i}")
    return ids


def _split(cfg):
    return make_split(_load_windows(cfg), cfg["seed"])


def _pick(split: DatasetSplit, which):
    if which == "all":
        return list(split.train) + list(split.validation) + list(split.test)
    return list(getattr(split, which))


def _train_config(cfg):
    return TrainConfig(epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"])


def _constraints(cfg):
    return cost.ConstraintConfig(max_kernel=cfg["max_kernel"], max_macs=cfg["max_macs"])


def _need(cfg, key):
    if not cfg.get(key):
        raise UsageError(f"{_flag(key)} is required for this command")
    return cfg[key]


# --- subcommands -------------------------------------------------------------


def cmd_synth_data(cfg):
    out = _out_dir(cfg, "synthetic-data")
    windows = synthesize_dataset(cfg["probands"], cfg["windows_per_proband"], cfg["sample_rate_hz"], cfg["seed"])
    by_source = {}
    for w in windows:
        by_source.setdefault(w.source_id, []).append(w)
    files = []
    for sid, ws in sorted(by_source.items()):
        path = os.path.join(out, f"{sid}.{cfg['format']}")
        (write_csv_record if cfg["format"] == "csv" else write_raw_record)(path, ws)
        files.append(os.path.basename(path))
    _write_manifest(out, "synth-data", cfg, {"files": files, "windows": len(windows)})
    print(f"wrote {len(files)} records, {len(windows)} windows to {out}")


def cmd_train(cfg):
    out = _out_dir(cfg, "train-run")
    genome = nas.Genome.parse(cfg["genome"])
    split = _split(cfg)
    h = split.train[0].length
    violations = cost.validate(genome, _constraints(cfg), h)
    if violations:
        raise InfeasibleModel("; ".join(f"{v.code}: {v.message}" for v in violations))
    net = build_network(list(genome.layers), genome.quant, seed=cfg["seed"])
    net, history = train(net, split, _train_config(cfg))
    save_checkpoint(os.path.join(out, "checkpoint.afck"), net, genome.to_dict(), history)
    overall, noise = evaluate(net, _pick(split, cfg["split"]))
    text = format_report(overall, noise)
    with open(os.path.join(out, "metrics.txt"), "w") as fh:
        fh.write(text)
    with open(os.path.join(out, "history.json"), "w") as fh:
        json.dump(history, fh, indent=2, sort_keys=True)
        fh.write("\n")
    _write_manifest(out, "train", cfg)
    sys.stdout.write(text)


def _labels_from_predictions(path):
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ConfigError(f"cannot read predictions {path}: {exc.strerror}") from None
    out = {}
    for i, row in enumerate(rows, start=2):
        try:
            out[row["window_id"]] = (int(row["logit_code"]), row["label"] == "AF")
        except (KeyError, ValueError, TypeError):
            raise ParseError("malformed prediction row", line=i) from None
    return out


def cmd_eval(cfg):
    split = _split(cfg)
    windows = _pick(split, cfg["split"])
    if cfg["predictions"]:
        preds = _labels_from_predictions(cfg["predictions"])
        ids = _window_ids(_pick(split, "all"))
        all_w = _pick(split, "all")
        lookup = dict(zip(map(id, all_w), ids))
        try:
            logits = np.array([1.0 if preds[lookup[id(w)]][1] else -1.0 for w in windows])
        except KeyError as exc:
            raise ConfigError(f"no prediction for window {exc.args[0]}") from None
        overall, noise = evaluate(None, windows, logits=logits)
    elif cfg["blob"]:
        model = deploy.load(cfg["blob"])
        res = deploy.stream_predictions(model, windows)
        overall, noise = evaluate(None, windows, logits=[1.0 if r.is_af else -1.0 for r in res])
    else:
        net, _ = load_checkpoint(_need(cfg, "checkpoint"))
        overall, noise = evaluate(net, windows)
    sys.stdout.write(format_report(overall, noise))


def cmd_search(cfg):
    out = _out_dir(cfg, "search-run")
    split = _split(cfg)
    workers = os.cpu_count() or 1
    sc = nas.SearchConfig(
        generations=cfg["generations"], offspring=cfg["offspring"], seed=cfg["seed"],
        constraints=_constraints(cfg), train=_train_config(cfg), workers=workers,
    )
    log_path = os.path.join(out, "run_log.jsonl")

    def progress(rec):
        n_feas = sum(1 for d in rec["offspring"] if d["feasible"])
        print(f"generation {rec['generation']}: {n_feas}/{len(rec['offspring'])} feasible offspring, "
              f"front size {len(rec['front'])}, hypervolume {rec['hypervolume']:.6g}", flush=True)

    front, _ = nas.run_search(sc, split, log_path, progress)
    nas.write_pareto_csv(os.path.join(out, "pareto.csv"), front)
    _write_manifest(out, "search", cfg, {"workers_capped_by": "AFNAS_THREADS"})
    if not any(p.feasible for p in front):
        raise InfeasibleModel("search finished without a feasible individual")
    print(f"front: {len(front)} individuals, written to {os.path.join(out, 'pareto.csv')}")


def cmd_export(cfg):
    out = _out_dir(cfg, "export-run")
    net, header = load_checkpoint(_need(cfg, "checkpoint"))
    split = _split(cfg)
    folded = deploy.fold_batchnorm(net)
    folded = deploy.profile_accumulators(folded, list(split.train) + list(split.validation))
    path = os.path.join(out, "model.afnn")
    n = deploy.export(folded, path)
    _write_manifest(out, "export", cfg, {"bytes": n, "payload_bytes": folded.payload_bytes,
                                         "codes": folded.code_count})
    print(f"wrote {path}: {n} bytes ({folded.payload_bytes} payload, {folded.code_count} codes)")


def cmd_infer(cfg):
    out = _out_dir(cfg, "infer-run")
    model = deploy.load(_need(cfg, "blob"))
    split = _split(cfg)
    windows = _pick(split, cfg["split"])
    all_w = _pick(split, "all")
    lookup = dict(zip(map(id, all_w), _window_ids(all_w)))
    results = deploy.stream_predictions(model, windows)
    path = os.path.join(out, "predictions.csv")
    deploy.write_predictions(path, [lookup[id(w)] for w in windows], results)
    _write_manifest(out, "infer", cfg)
    print(f"wrote {len(results)} predictions to {path}")


def cmd_report(cfg):
    out = _out_dir(cfg, "report")
    header, gens = nas.read_log(_need(cfg, "log"))
    if header is None:
        raise ParseError("run log has no header record", line=1)
    archive = [nas.Individual.from_dict(d) for rec in gens for d in rec["offspring"]]
    front = nas.pareto_front(archive)
    keys = {p.key for p in front}
    with open(os.path.join(out, "pareto_scatter.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["id", "fnr", "fpr", "noise_fpr", "on_front", "feasible"])
        for p in archive:
            if p.objectives is None:
                continue
            o = p.objectives
            wr.writerow([p.key, repr(o.fnr), repr(o.fpr), repr(o.noise_fpr), int(p.key in keys), int(p.feasible)])
    h = header["input_length"]
    with open(os.path.join(out, "cost_table.csv"), "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        fields = list(cost.CostReport.__dataclass_fields__)
        wr.writerow(["id", "genome", *fields])
        for p in archive:
            rep = cost.report(p.genome, h).as_dict()
            wr.writerow([p.key, str(p.genome), *(rep[f] for f in fields)])
    _write_manifest(out, "report", cfg, {"individuals": len(archive), "front": len(front)})
    print(f"{len(archive)} individuals, front of {len(front)}; tables in {out}")


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "search": cmd_search,
    "export": cmd_export,
    "infer": cmd_infer,
    "report": cmd_report,
}


def _fail(kind, code, message):
    first, *rest = str(message).splitlines() or [""]
    sys.stderr.write(f"afnas-error[{kind}]: {first}\n")
    for line in rest:
        sys.stderr.write(f"  {line}\n")
    return code


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except (InfeasibleModel, InfeasibleShapeError) as exc:
        return _fail("infeasible", EXIT_INFEASIBLE, exc)
    except (ParseError, ConfigError) as exc:
        return _fail("data", EXIT_DATA, exc)
    except DeadlockError as exc:
        return _fail("internal", EXIT_INTERNAL, exc)
    except ContractError as exc:
        return _fail("usage", EXIT_USAGE, exc)
    except OSError as exc:
        return _fail("data", EXIT_DATA, exc)
    except Exception as exc:  # last resort: report, never a traceback
        return _fail("internal", EXIT_INTERNAL, f"{type(exc).__name__}: {exc}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
