"""Leave-one-domain-out runs for the four ablation methods."""
import dataclasses
import math
import statistics

import numpy as np

from .datagen import leave_one_out
from .hoper import HoPerConfig, adapt_stream
from .nnet import ConvNet, TrainConfig, accuracy, train
from .tensor import RngStream

METHODS = ("baseline", "enin", "inper", "inper-no-homeoscore")


def uses_enin(method):
    return method != "baseline"


def uses_hoper(method):
    return method.startswith("inper")


def hoper_config_for(method, cfg):
    if method == "inper-no-homeoscore":
        return dataclasses.replace(cfg, homeo_threshold=math.inf)
    return cfg


def train_for(method, source, train_cfg, seed):
    cfg = dataclasses.replace(train_cfg, seed=seed, use_enin=uses_enin(method))
    model = ConvNet(source.num_classes, seed=seed)
    return train(model, source.images, source.labels, cfg)


def evaluate(method, model, target, hoper_cfg, seed):
    """Target accuracy plus HomeoScore diagnostics for the inper methods."""
    out = {}
    if not uses_hoper(method):
        out["accuracy"] = accuracy(model, target.images, target.labels)
        return out, None
    cfg = hoper_config_for(method, hoper_cfg)
    preds, records, bank = adapt_stream(model, target.images, cfg, RngStream(seed).spawn("adapt"))
    labels = target.labels
    out["accuracy"] = float((preds == labels).mean()) if len(labels) else float("nan")
    pseudo = np.array([r.pseudo_label for r in records])
    scores = np.array([r.homeo_score for r in records])
    correct = pseudo == labels
    out["homeo_correct"] = float(scores[correct].mean()) if correct.any() else float("nan")
    out["homeo_incorrect"] = float(scores[~correct].mean()) if (~correct).any() else float("nan")
    out["admitted"] = int(sum(r.admitted for r in records))
    return out, (preds, records, bank)


def run_target(dataset, target_domain, seed, train_cfg, hoper_cfg, methods=METHODS):
    """All requested methods for one (target, seed); models are shared where possible."""
    source, target = leave_one_out(dataset, target_domain)
    results = {}
    trained = {}
    for method in methods:
        key = uses_enin(method)
        if key not in trained:
            trained[key] = train_for(method, source, train_cfg, seed)
        metrics, _ = evaluate(method, trained[key].model, target, hoper_cfg, seed)
        metrics["final_loss"] = trained[key].losses[-1] if trained[key].losses else float("nan")
        results[method] = metrics
    return results


def summarize(values):
    """Mean and sample standard deviation across seeds."""
    values = [float(v) for v in values]
    mean = statistics.fmean(values) if values else float("nan")
    std = statistics.stdev(values) if len(values) > 1 else 0.0
    return {"mean": mean, "std": std, "n": len(values)}


def default_train_config(**overrides):
    return dataclasses.replace(TrainConfig(), **overrides)


def default_hoper_config(**overrides):
    return dataclasses.replace(HoPerConfig(), **overrides)
