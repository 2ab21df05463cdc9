"""Experiment harnesses shared by the CLI and the acceptance tests.

Each harness takes an already-loaded :class:`~migen.data.Dataset` and a
resolved config dict (see :mod:`migen.config`), trains fresh models where
needed and returns plain rows or dicts ready for CSV/JSON output. Nothing
here touches the filesystem.
"""
from __future__ import annotations

import dataclasses
import logging
from typing import Callable, Optional, Sequence

import numpy as np

from . import config as C
from .data import Dataset, InstanceBag
from .decode import BeamConfig, beam_search, greedy_decode
from .errors import ConfigError, InputError
from .metrics import SLOTS, classification_scores, semantic_extract, slot_accuracy, text_scores
from .model import MIGenModel, nll_loss
from .tensor import no_grad
from .train import TrainResult, apply_mask_augment, train
from .vocab import decode

logger = logging.getLogger(__name__)

CLASSIFIER_PARAMS = ("cls", "clf.w", "clf.b")

# name -> ModelConfig changes, in reporting order
ABLATION_VARIANTS = (
    ("off", {"pam_mode": "off"}),
    ("k3", {"pam_mode": "hierarchical", "pam_kernels": (3,)}),
    ("k7", {"pam_mode": "hierarchical", "pam_kernels": (7,)}),
    ("last_layer_only", {"pam_mode": "last_layer_only", "pam_kernels": (3, 7, 13)}),
    ("k3_5_7", {"pam_mode": "hierarchical", "pam_kernels": (3, 5, 7)}),
    ("k3_7_13", {"pam_mode": "hierarchical", "pam_kernels": (3, 7, 13)}),
)

AUGMENTATIONS = (
    ("none", {}),
    ("shuffle", {"shuffle_instances": True}),
    ("shuffle+mask", {"shuffle_instances": True, "mask_ratio": 0.5}),
)


def build_model(cfg: dict, ds: Dataset, **changes) -> MIGenModel:
    bag = next((b for _, b in ds.all_bags()), None)
    if bag is None:
        raise InputError("dataset has no bags")
    return MIGenModel(C.model_config(cfg, ds.vocab.size, bag.embed_dim, **changes))


def train_model(ds: Dataset, cfg: dict, model_changes: Optional[dict] = None,
                train_changes: Optional[dict] = None, **kwargs) -> TrainResult:
    """Fresh model trained on the train split with the configured schedule."""
    model = build_model(cfg, ds, **(model_changes or {}))
    tcfg = dataclasses.replace(C.train_config(cfg), **(train_changes or {})).validate()
    if not ds.train:
        raise InputError("dataset has an empty train split")
    return train(model, ds.train, ds.vocab, tcfg, **kwargs)


# ----------------------------------------------------------------------------
# generation and evaluation
# ----------------------------------------------------------------------------

def generate_reports(model: MIGenModel, bags: Sequence[InstanceBag], vocab, beam: BeamConfig) -> list[dict]:
    beam.validate(model)
    out = []
    for bag in bags:
        if beam.beam_size == 1:
            ids = greedy_decode(model, bag.embeddings, beam.max_len)
        else:
            ids = beam_search(model, bag.embeddings, beam)
        out.append({"bag_id": bag.bag_id, "report": decode(ids, vocab)})
    return out


def _mean(values) -> float:
    return float(np.mean(values)) if len(values) else 0.0


def evaluate_reports(generated: dict, bags: Sequence[InstanceBag], keyword_map: Optional[dict] = None,
                     templates: Optional[Sequence[str]] = None) -> dict:
    """Per-bag and aggregate scores for ``generated`` (bag_id -> text).

    Slot accuracies appear when bags carry blob metadata; a semantic
    extraction classification block appears when bags carry class labels
    and a keyword map is given.
    """
    by_id = {b.bag_id: b for b in bags}
    unknown = sorted(set(generated) - set(by_id))
    if unknown:
        raise InputError(f"generated reports reference unknown bag_ids: {', '.join(unknown)}")
    kwargs = {} if templates is None else {"templates": tuple(templates)}
    per_bag = []
    for bag_id in sorted(generated):
        bag, text = by_id[bag_id], generated[bag_id]
        row = {"bag_id": bag_id, **text_scores(text, bag.report)}
        if bag.blob is not None:
            for slot, ok in slot_accuracy(text, bag.blob, **kwargs).items():
                row[f"{slot}_ok"] = int(ok)
        per_bag.append(row)
    metric_keys = [k for k in (per_bag[0] if per_bag else {}) if k != "bag_id"]
    aggregate = {k: _mean([r[k] for r in per_bag]) for k in metric_keys}
    aggregate["n"] = len(per_bag)
    result = {"aggregate": aggregate, "per_bag": per_bag}
    labelled = [by_id[i] for i in sorted(generated) if by_id[i].class_label is not None]
    if keyword_map and labelled:
        n_classes = max(keyword_map) + 1
        pred = [semantic_extract(generated[b.bag_id], keyword_map) for b in labelled]
        result["classification"] = classification_scores(pred, [b.class_label for b in labelled], n_classes)
    return result


def quadrant_accuracy(model: MIGenModel, bags, vocab, beam: BeamConfig) -> tuple[float, float]:
    """(BLEU-1, quadrant-slot accuracy) of ``model`` on ``bags``."""
    gen = {g["bag_id"]: g["report"] for g in generate_reports(model, bags, vocab, beam)}
    agg = evaluate_reports(gen, bags)["aggregate"]
    return agg["bleu_1"], agg.get("quadrant_ok", 0.0)


# ----------------------------------------------------------------------------
# sweeps
# ----------------------------------------------------------------------------

def mask_bags(bags: Sequence[InstanceBag], ratio: float, seed: int) -> list[InstanceBag]:
    """Each bag masked with its own generator keyed on (seed, ratio, position)."""
    key = int(round(ratio * 1000))
    return [apply_mask_augment(b, ratio, np.random.default_rng([seed, key, i])) for i, b in enumerate(bags)]


def mask_sweep(models: dict, bags: Sequence[InstanceBag], vocab, ratios: Sequence[float], seed: int,
               beam: BeamConfig) -> list[dict]:
    rows = []
    for ratio in ratios:
        masked = mask_bags(bags, ratio, seed)
        for name, model in models.items():
            bleu1, quad = quadrant_accuracy(model, masked, vocab, beam)
            rows.append({"ratio": float(ratio), "model": name, "bleu_1": bleu1, "quadrant_acc": quad})
    return rows


def _variant_row(name: str, model: MIGenModel, ds: Dataset, beam: BeamConfig) -> dict:
    gen = {g["bag_id"]: g["report"] for g in generate_reports(model, ds.test, ds.vocab, beam)}
    agg = evaluate_reports(gen, ds.test)["aggregate"]
    row = {"variant": name, "pam_mode": model.config.pam_mode,
           "pam_kernels": "+".join(map(str, model.config.pam_kernels)) if model.config.pam_mode != "off" else "",
           "bleu_1": agg["bleu_1"], "bleu_4": agg["bleu_4"]}
    for slot in SLOTS:
        row[f"{slot}_acc"] = agg.get(f"{slot}_ok", 0.0)
    return row


def pam_ablation(ds: Dataset, cfg: dict, variants=ABLATION_VARIANTS,
                 on_model: Optional[Callable[[str, TrainResult], None]] = None) -> list[dict]:
    """Train one model per PAM variant with an identical seed and schedule."""
    beam = C.beam_config(cfg)
    rows = []
    for name, changes in variants:
        logger.info("ablation variant %s", name)
        result = train_model(ds, cfg, changes)
        if on_model is not None:
            on_model(name, result)
        rows.append(_variant_row(name, result.model, ds, beam))
    return rows


def shuffle_study(ds: Dataset, cfg: dict, augmentations=AUGMENTATIONS,
                  pam_variants=(("pam", "hierarchical"), ("no_pam", "off"))) -> list[dict]:
    """Train-time augmentation grid, each evaluated on clean test bags."""
    beam = C.beam_config(cfg)
    rows = []
    for aug, tchanges in augmentations:
        for name, mode in pam_variants:
            logger.info("shuffle study %s / %s", aug, name)
            model = train_model(ds, cfg, {"pam_mode": mode}, tchanges).model
            bleu1, quad = quadrant_accuracy(model, ds.test, ds.vocab, beam)
            rows.append({"augmentation": aug, "model": name, "bleu_1": bleu1, "quadrant_acc": quad})
    return rows


# ----------------------------------------------------------------------------
# classification
# ----------------------------------------------------------------------------

def _require_labels(bags, split: str) -> list[int]:
    labels = [b.class_label for b in bags]
    if not bags or any(l is None for l in labels):
        raise InputError(f"split {split!r} is empty or lacks class labels")
    return labels


def with_classifier(model: MIGenModel, n_classes: int) -> MIGenModel:
    """Copy of ``model`` with a freshly initialised CLS token and head."""
    cfg = dataclasses.replace(model.config, n_classes=n_classes)
    fresh = MIGenModel(cfg)
    for name, p in model.params.items():
        if name not in CLASSIFIER_PARAMS:
            fresh.params[name].data[...] = p.data
    return fresh


def predict_classes(model: MIGenModel, bags) -> list[int]:
    with no_grad():
        return [int(np.argmax(model.classify(b.embeddings).data)) for b in bags]


def classify_finetune(model: MIGenModel, ds: Dataset, cfg: dict, full_model: Optional[bool] = None) -> dict:
    """Train the CLS head (optionally everything) on train, score on test."""
    ccfg = cfg["classify"]
    full = ccfg["full_model"] if full_model is None else full_model
    train_labels = _require_labels(ds.train, "train")
    test_labels = _require_labels(ds.test, "test")
    n_classes = ds.n_classes
    clf = with_classifier(model, n_classes)
    tcfg = dataclasses.replace(C.train_config(cfg), learning_rate=ccfg["learning_rate"], max_steps=ccfg["steps"],
                               mask_ratio=0.0, shuffle_instances=False).validate()
    labels = {b.bag_id: l for b, l in zip(ds.train, train_labels)}

    def loss_fn(m, bag, _rng):
        return nll_loss(m.classify(bag.embeddings).reshape(1, 1, n_classes), [[labels[bag.bag_id]]], pad_id=-1)
    trainable = None if full else set(CLASSIFIER_PARAMS)
    result = train(clf, ds.train, ds.vocab, tcfg, loss_fn=loss_fn, trainable=trainable)
    scores = classification_scores(predict_classes(result.model, ds.test), test_labels, n_classes)
    scores.update({"mode": "finetune", "full_model": bool(full), "final_loss": result.losses[-1][1]
                   if result.losses else None})
    return scores


def classify_semantic(model: Optional[MIGenModel], ds: Dataset, beam: BeamConfig, split: str = "test") -> dict:
    """Class read from generated reports, or from ground truth when ``model`` is None."""
    bags = ds.split(split)
    truth = _require_labels(bags, split)
    if not ds.keyword_map:
        raise ConfigError("dataset has no keyword map for semantic extraction")
    if model is None:
        texts = [b.report for b in bags]
    else:
        texts = [g["report"] for g in generate_reports(model, bags, ds.vocab, beam)]
    pred = [semantic_extract(t, ds.keyword_map) for t in texts]
    scores = classification_scores(pred, truth, ds.n_classes)
    scores["mode"] = "semantic" if model is not None else "semantic-ground-truth"
    return scores
