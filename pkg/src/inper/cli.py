"""Command-line driver: gen-data, train, adapt, eval, dump-embeddings.

Every command writes JSON-lines metrics to ``<out>/metrics.jsonl``. A config
file (YAML or JSON) can hold any setting; command-line flags override it.
"""
import argparse
import copy
import dataclasses
import json
import logging
import os
import shutil
import sys
import tempfile

import numpy as np
import yaml

from ._files import atomic_write_text
from .datagen import default_domains, generate, leave_one_out, load_dataset, save_dataset, write_tdf
from .errors import InPerError, InvalidConfigurationError, NotFoundError
from .experiment import METHODS, evaluate, summarize, train_for, uses_enin, uses_hoper
from .hoper import HoPerConfig, save_bank
from .nnet import TrainConfig, accuracy, load_checkpoint, save_checkpoint
from .enin import EnInConfig

log = logging.getLogger("inper")

DEFAULTS = {
    "data": None,
    "generate": {"per_domain": 500, "seed": 0, "leakage": 0.3, "num_classes": 4},
    "target_domain": None,
    "method": "inper",
    "seed": 0,
    "seeds": None,
    "out": None,
    "checkpoint": None,
    "train": {},
    "hoper": {},
}

# flag name -> path into the config document
FLAG_PATHS = {
    "data": ("data",),
    "target_domain": ("target_domain",),
    "method": ("method",),
    "seed": ("seed",),
    "seeds": ("seeds",),
    "out": ("out",),
    "checkpoint": ("checkpoint",),
    "per_domain": ("generate", "per_domain"),
    "leakage": ("generate", "leakage"),
    "steps": ("train", "steps"),
    "lr": ("train", "lr"),
    "batch_size": ("train", "batch_size"),
    "enin_prob": ("train", "enin", "apply_probability"),
    "beta_alpha": ("train", "enin", "beta_alpha"),
    "homeo_threshold": ("hoper", "homeo_threshold"),
    "entropy_threshold": ("hoper", "entropy_threshold"),
    "bank_capacity": ("hoper", "capacity"),
    "cp_lambda": ("hoper", "cp_lambda"),
}


class Metrics:
    def __init__(self, command):
        self.command = command
        self.lines = []

    def emit(self, metric, value, seed=None, target_domain=None, method=None):
        if isinstance(value, (np.floating, np.integer)):
            value = value.item()
        rec = {
            "command": self.command,
            "seed": seed,
            "target_domain": target_domain,
            "method": method,
            "metric": metric,
            "value": value,
        }
        self.lines.append(json.dumps(rec, sort_keys=True))

    def write(self, out_dir):
        atomic_write_text(os.path.join(out_dir, "metrics.jsonl"), "".join(line + "\n" for line in self.lines))


def _set(doc, path, value):
    for key in path[:-1]:
        doc = doc.setdefault(key, {})
    doc[path[-1]] = value


def load_config(path):
    try:
        with open(path) as f:
            doc = yaml.safe_load(f) or {}
    except FileNotFoundError as exc:
        raise NotFoundError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise InvalidConfigurationError(f"cannot parse config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise InvalidConfigurationError("config must be a mapping")
    return doc


def resolve_config(args):
    """Merge defaults, the config file and explicit flags (in that order)."""
    doc = copy.deepcopy(DEFAULTS)
    if args.config:
        for key, value in load_config(args.config).items():
            if isinstance(value, dict) and isinstance(doc.get(key), dict):
                doc[key].update(value)
            else:
                doc[key] = value
    for flag, path in FLAG_PATHS.items():
        value = getattr(args, flag, None)
        if value is not None:
            _set(doc, path, value)
    patch = getattr(args, "patch_ratio", None)
    if patch is not None:
        _set(doc, ("train", "enin", "patch_area_ratio"), patch)
        _set(doc, ("hoper", "patch_area_ratio"), patch)
    if isinstance(doc["seeds"], str):
        doc["seeds"] = [int(s) for s in doc["seeds"].split(",") if s.strip()]
    if doc["method"] not in METHODS:
        raise InvalidConfigurationError(f"method must be one of {METHODS}, got {doc['method']!r}")
    return doc


def train_config(doc):
    t = dict(doc.get("train") or {})
    enin = dict(t.pop("enin", {}) or {})
    if "insertion_points" in enin:
        enin["insertion_points"] = tuple(enin["insertion_points"])
    fields = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(t) - fields
    if unknown:
        raise InvalidConfigurationError(f"unknown train settings: {sorted(unknown)}")
    try:
        return TrainConfig(**t, enin=EnInConfig(**enin))
    except TypeError as exc:
        raise InvalidConfigurationError(str(exc)) from exc


def hoper_config(doc):
    try:
        return HoPerConfig(**(doc.get("hoper") or {}))
    except TypeError as exc:
        raise InvalidConfigurationError(str(exc)) from exc


def seeds_of(doc):
    return list(doc["seeds"]) if doc["seeds"] else [int(doc["seed"])]


def require_out(doc):
    if not doc["out"]:
        raise InvalidConfigurationError("--out is required")
    os.makedirs(doc["out"], exist_ok=True)
    return doc["out"]


def get_dataset(doc):
    if doc["data"]:
        return load_dataset(doc["data"])
    g = doc["generate"]
    return generate(default_domains(g["leakage"]), g.get("num_classes", 4), g["per_domain"], g["seed"])


def target_domains(doc, dataset):
    t = doc["target_domain"]
    if t is None or t == "all":
        return list(dataset.domain_ids)
    return [int(t)]


def ckpt_name(method, target, seed):
    return f"{'enin' if uses_enin(method) else 'baseline'}-t{target}-s{seed}.ipnn"


def cmd_gen_data(doc):
    out = require_out(doc)
    g = doc["generate"]
    ds = generate(default_domains(g["leakage"]), g.get("num_classes", 4), g["per_domain"], int(doc["seed"]))
    dest = os.path.join(out, "data")
    tmp = tempfile.mkdtemp(prefix=".data-", dir=out)
    try:
        save_dataset(ds, tmp)
        if os.path.exists(dest):
            shutil.rmtree(dest)
        os.replace(tmp, dest)
    finally:
        if os.path.exists(tmp):
            shutil.rmtree(tmp)
    m = Metrics("gen-data")
    m.emit("num_samples", len(ds), seed=int(doc["seed"]))
    for d in ds.domain_ids:
        m.emit("domain_samples", int((ds.domains == d).sum()), seed=int(doc["seed"]), target_domain=d)
    m.write(out)
    log.info("wrote dataset to %s", dest)


def cmd_train(doc):
    out = require_out(doc)
    ds = get_dataset(doc)
    cfg = train_config(doc)
    method = doc["method"]
    m = Metrics("train")
    for target in target_domains(doc, ds):
        source, _ = leave_one_out(ds, target)
        for seed in seeds_of(doc):
            res = train_for(method, source, cfg, seed)
            save_checkpoint(res.model, os.path.join(out, ckpt_name(method, target, seed)))
            curve = {"losses": res.losses, "step_log": res.step_log}
            atomic_write_text(
                os.path.join(out, f"losses-{method}-t{target}-s{seed}.json"), json.dumps(curve, sort_keys=True)
            )
            fired = sum(s is not None for e in res.step_log for s in e["enin"].values())
            m.emit("final_loss", res.losses[-1] if res.losses else None, seed, target, method)
            m.emit("source_accuracy", accuracy(res.model, source.images, source.labels), seed, target, method)
            m.emit("enin_fired", fired, seed, target, method)
            log.info("trained %s target=%s seed=%s", method, target, seed)
    m.write(out)


def _model_for(doc, method, source, target, seed, cfg):
    if doc["checkpoint"]:
        path = doc["checkpoint"]
        if os.path.isdir(path):
            path = os.path.join(path, ckpt_name(method, target, seed))
        if not os.path.exists(path):
            raise NotFoundError(f"checkpoint not found: {path}")
        return load_checkpoint(path)
    return train_for(method, source, cfg, seed).model


def cmd_adapt(doc):
    out = require_out(doc)
    method = doc["method"]
    if not uses_hoper(method):
        raise InvalidConfigurationError("adapt needs method inper or inper-no-homeoscore")
    ds = get_dataset(doc)
    cfg, hcfg = train_config(doc), hoper_config(doc)
    m = Metrics("adapt")
    for target in target_domains(doc, ds):
        source, tgt = leave_one_out(ds, target)
        for seed in seeds_of(doc):
            model = _model_for(doc, method, source, target, seed, cfg)
            metrics, (preds, records, bank) = evaluate(method, model, tgt, hcfg, seed)
            tag = f"{method}-t{target}-s{seed}"
            write_tdf(os.path.join(out, f"predictions-{tag}.tdf"), preds.astype(np.float32))
            save_bank(bank, os.path.join(out, f"bank-{tag}.ipbk"))
            rows = [
                json.dumps(
                    {
                        "index": i,
                        "label": int(tgt.labels[i]),
                        "pseudo_label": r.pseudo_label,
                        "homeo_score": r.homeo_score,
                        "perturbed_entropy": r.perturbed_entropy,
                        "admitted": r.admitted,
                        "prediction": int(preds[i]),
                    },
                    sort_keys=True,
                )
                for i, r in enumerate(records)
            ]
            atomic_write_text(os.path.join(out, f"records-{tag}.jsonl"), "".join(r + "\n" for r in rows))
            for key, value in metrics.items():
                m.emit(key, value, seed, target, method)
    m.write(out)


def cmd_eval(doc):
    out = require_out(doc)
    ds = get_dataset(doc)
    cfg, hcfg = train_config(doc), hoper_config(doc)
    methods = doc.get("methods") or [doc["method"]]
    if isinstance(methods, str):
        methods = [s.strip() for s in methods.split(",")]
    for method in methods:
        if method not in METHODS:
            raise InvalidConfigurationError(f"unknown method {method!r}")
    m = Metrics("eval")
    acc = {meth: {} for meth in methods}
    targets = target_domains(doc, ds)
    for target in targets:
        source, tgt = leave_one_out(ds, target)
        for seed in seeds_of(doc):
            models = {}
            for method in methods:
                key = uses_enin(method)
                if key not in models:
                    models[key] = _model_for(doc, method, source, target, seed, cfg)
                metrics, _ = evaluate(method, models[key], tgt, hcfg, seed)
                for k, v in metrics.items():
                    m.emit(k, v, seed, target, method)
                acc[method].setdefault(target, []).append(metrics["accuracy"])
                log.info("eval %s target=%s seed=%s acc=%.4f", method, target, seed, metrics["accuracy"])
    for method in methods:
        for target in targets:
            s = summarize(acc[method][target])
            m.emit("accuracy_mean", s["mean"], None, target, method)
            m.emit("accuracy_std", s["std"], None, target, method)
        per_seed = np.mean([acc[method][t] for t in targets], axis=0)
        s = summarize(per_seed)
        m.emit("avg_accuracy_mean", s["mean"], None, None, method)
        m.emit("avg_accuracy_std", s["std"], None, None, method)
    m.write(out)


def cmd_dump_embeddings(doc):
    out = require_out(doc)
    ds = get_dataset(doc)
    method = doc["method"]
    cfg = train_config(doc)
    m = Metrics("dump-embeddings")
    for target in target_domains(doc, ds):
        source, _ = leave_one_out(ds, target)
        for seed in seeds_of(doc):
            model = _model_for(doc, method, source, target, seed, cfg)
            emb = np.concatenate(
                [model.features(ds.images[i : i + 256]).mean(axis=(2, 3)) for i in range(0, len(ds), 256)]
            )
            tag = f"{ckpt_name(method, target, seed)[:-5]}"
            write_tdf(os.path.join(out, f"embeddings-{tag}.tdf"), emb)
            write_tdf(os.path.join(out, f"labels-{tag}.tdf"), ds.labels.astype(np.float32))
            write_tdf(os.path.join(out, f"domains-{tag}.tdf"), ds.domains.astype(np.float32))
            m.emit("num_embeddings", len(emb), seed, target, method)
    m.write(out)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "dump-embeddings": cmd_dump_embeddings,
}


def _target(value):
    return value if value == "all" else int(value)


def build_parser():
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML or JSON config file")
    shared.add_argument("--seed", type=int)
    shared.add_argument("--seeds", help="comma-separated seed list, e.g. 0,1,2")
    shared.add_argument("--target-domain", type=_target, help="domain id or 'all'")
    shared.add_argument("--method", choices=METHODS)
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--data", help="dataset directory (default: generate in memory)")
    shared.add_argument("--checkpoint", help="checkpoint file or directory of checkpoints")
    shared.add_argument("--per-domain", type=int)
    shared.add_argument("--leakage", type=float)
    shared.add_argument("--steps", type=int)
    shared.add_argument("--lr", type=float)
    shared.add_argument("--batch-size", type=int)
    shared.add_argument("--enin-prob", type=float)
    shared.add_argument("--beta-alpha", type=float)
    shared.add_argument("--patch-ratio", choices=("1/4", "1/8"))
    shared.add_argument("--homeo-threshold", type=float)
    shared.add_argument("--entropy-threshold", type=float)
    shared.add_argument("--bank-capacity", type=int)
    shared.add_argument("--cp-lambda", help="fixed:X or beta")
    shared.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(prog="inper", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[shared])
        if name == "eval":
            p.add_argument("--methods", help="comma-separated methods evaluated on shared models")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        doc = resolve_config(args)
        if getattr(args, "methods", None):
            doc["methods"] = args.methods
        COMMANDS[args.command](doc)
    except (InPerError, OSError, ValueError, KeyError, TypeError) as exc:
        print(f"inper {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
