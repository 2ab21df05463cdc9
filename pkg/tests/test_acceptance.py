"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The desk-scale models are trained once per session and shared between the
ablation, permutation, mask-sweep and semantic-extraction criteria. Expect
roughly fifteen minutes single-threaded.
"""
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pytest

from metric_fixtures import FIXTURES
from migen import cli
from migen import config as C
from migen import experiments as X
from migen import kernels
from migen.data import synth_dataset
from migen.decode import BeamConfig, beam_search, greedy_decode
from migen.metrics import bleu_n, meteor_lite, rouge_l, semantic_extract
from migen.model import MIGenModel, ModelConfig, pam_forward
from migen.tensor import Tensor, grad_check
from migen.train import train
from migen.vocab import BOS, encode
from test_decode import _exhaustive_best, micro
from test_tensor import PRIMITIVES

pytestmark = pytest.mark.slow

TIE = 0.02  # ablation ordering tolerance (two points)
BAND = 0.03  # mask-sweep noise band on BLEU-1


@pytest.fixture(scope="module")
def desk():
    cfg = C.load_config("preset:desk")
    return cfg, synth_dataset(C.synth_config(cfg))


@pytest.fixture(scope="module")
def ablation(desk):
    cfg, ds = desk
    models = {}
    rows = X.pam_ablation(ds, cfg, on_model=lambda name, result: models.__setitem__(name, result.model))
    return {r["variant"]: r for r in rows}, models


@pytest.fixture(scope="module")
def sweep_models(desk):
    cfg, ds = desk
    ratio = cfg["experiments"]["sweep_train_mask_ratio"]
    return {name: X.train_model(ds, cfg, {"pam_mode": mode}, {"mask_ratio": ratio}).model
            for name, mode in (("pam", "hierarchical"), ("no_pam", "off"))}


# ----------------------------------------------------------------------------


def test_criterion_01_gradients(criterion):
    t0 = time.perf_counter()
    worst = {}
    for backend in kernels.available_backends():
        prev = kernels.use_backend(backend)
        try:
            for name, (f, make) in PRIMITIVES.items():
                worst[f"{backend}:{name}"] = grad_check(f, make(), h=1e-5)
        finally:
            kernels.use_backend(prev)
    cfg = ModelConfig(n_layers=1, n_heads=2, d_model=8, d_ff=16, vocab_size=7, max_report_len=8,
                      pam_kernels=(3,), input_dim=8, init_seed=1)
    model = MIGenModel(cfg)
    E = np.random.default_rng(2).normal(size=(6, 8))
    ids = [BOS, 4, 5, 6, 3, 2]
    names = list(model.params)

    def loss(*ps):
        return MIGenModel(cfg, dict(zip(names, ps))).report_loss(E, ids)
    worst["micro_model"] = grad_check(loss, [Tensor(p.data.copy(), requires_grad=True) for p in model.params.values()],
                                      h=1e-5)
    elapsed = time.perf_counter() - t0
    top = max(worst, key=worst.get)
    ok = worst[top] < 1e-5 and elapsed < 120
    criterion(1, "gradient checks", ok, f"max rel err {worst[top]:.2e} ({top}), {len(worst)} checks, {elapsed:.0f}s")
    assert ok


def test_criterion_02_zero_pam_identity(criterion):
    failures = []
    for m in (1, 2, 9, 10, 50, 197):
        for ks in ((3,), (3, 7, 13)):
            E = np.random.default_rng(m).normal(size=(m, 16))
            convs = [(Tensor(np.zeros((k, k, 16))), Tensor(np.zeros(16))) for k in ks]
            if not np.array_equal(pam_forward(Tensor(E), convs).data, E):
                failures.append((m, ks))
    ok = not failures
    criterion(2, "zero-initialised PAM is a bitwise identity", ok, f"12 cases, failures {failures}")
    assert ok


def test_criterion_03_permutation_contract(criterion, desk, ablation):
    cfg, ds = desk
    _, models = ablation
    max_len = cfg["decode"]["max_len"]
    off, pam = models["off"], models["k3_7_13"]
    drift, changed_off, changed_pam = 0.0, 0, 0
    for i, bag in enumerate(ds.test):
        base = greedy_decode(off, bag.embeddings, max_len)
        H0 = off.encode(bag.embeddings)
        ref = off.decode_logits(H0, np.array([base])).data
        pam_base = greedy_decode(pam, bag.embeddings, max_len)
        rng = np.random.default_rng([99, i])
        for _ in range(20):
            perm = rng.permutation(bag.n_instances)
            E = bag.embeddings[perm]
            changed_off += greedy_decode(off, E, max_len) != base
            drift = max(drift, float(np.abs(off.decode_logits(off.encode(E), np.array([base])).data - ref).max()))
            if changed_pam == 0:
                changed_pam += greedy_decode(pam, E, max_len) != pam_base
    ok = changed_off == 0 and drift < 1e-9 and changed_pam > 0
    criterion(3, "permutation contract", ok,
              f"off: {changed_off} changed outputs, max logit drift {drift:.1e}; hierarchical changed: {changed_pam > 0}")
    assert ok


def test_criterion_04_overfit(criterion):
    cfg = C.load_config("preset:overfit")
    ds = synth_dataset(C.synth_config(cfg))
    model = X.build_model(cfg, ds)
    t0 = time.perf_counter()
    result = train(model, ds.train, ds.vocab, C.train_config(cfg))
    elapsed = time.perf_counter() - t0
    nll = float(np.mean([model.report_loss(b.embeddings, encode(b.report, ds.vocab)).item() for b in ds.train]))
    exact = [greedy_decode(model, b.embeddings, cfg["model"]["max_report_len"]) == encode(b.report, ds.vocab)
             for b in ds.train]
    ok = nll < 0.05 and all(exact) and len(result.losses) <= 3000 and model.config.d_model == 64
    criterion(4, "overfit eight bags", ok,
              f"mean NLL {nll:.4g}, exact {sum(exact)}/8, {len(result.losses)} steps at lr "
              f"{cfg['train']['learning_rate']}, {elapsed:.0f}s")
    assert ok


def test_criterion_05_spatial_benefit(criterion, ablation):
    rows, _ = ablation
    q = {name: r["quadrant_acc"] for name, r in rows.items()}
    multi = [q["k3_7_13"], q["k3_5_7"]]
    single = [q["k3"], q["k7"]]
    margin = q["k3_7_13"] - q["off"]
    ordered = min(multi) >= max(single) - TIE and min(single) >= q["off"] - TIE
    ok = margin >= 0.10 and ordered
    criterion(5, "spatial benefit and ablation ordering", ok,
              "quadrant acc " + ", ".join(f"{k}={v:.3f}" for k, v in q.items()) + f"; margin {margin:+.3f}")
    assert ok


def test_criterion_06_mask_sweep(criterion, desk, sweep_models):
    cfg, ds = desk
    exp = cfg["experiments"]
    rows = X.mask_sweep(sweep_models, ds.test, ds.vocab, exp["mask_ratios"], exp["mask_seed"], C.beam_config(cfg))
    curve = {(r["model"], r["ratio"]): r["bleu_1"] for r in rows}
    drops = all(curve[(m, 0.9)] < curve[(m, 0.0)] for m in sweep_models)
    gaps = {r: curve[("pam", r)] - curve[("no_pam", r)] for r in exp["mask_ratios"] if r >= 0.3}
    ok = drops and min(gaps.values()) >= -BAND
    criterion(6, "mask-sweep direction", ok,
              f"BLEU-1 0->0.9 pam {curve[('pam', 0.0)]:.3f}->{curve[('pam', 0.9)]:.3f}, "
              f"no_pam {curve[('no_pam', 0.0)]:.3f}->{curve[('no_pam', 0.9)]:.3f}; "
              f"worst pam-no_pam gap at ratio>=0.3: {min(gaps.values()):+.4f}")
    assert ok


def test_criterion_07_decoding(criterion):
    mismatches = 0
    for i in range(100):
        model = micro(4 + i % 6, seed=i)
        E = np.random.default_rng(1000 + i).normal(size=(1 + i % 11, 8))
        mismatches += beam_search(model, E, BeamConfig(1, 6)) != greedy_decode(model, E, 6)
    exhaustive_fail = 0
    cases = 0
    for vocab_size in (4,):
        for max_len in (1, 2, 3):
            for seed in range(10):
                model = micro(vocab_size, seed, max_len=3)
                E = np.random.default_rng(seed).normal(size=(5, 8))
                _, best = _exhaustive_best(model, E, max_len)
                got = beam_search(model, E, BeamConfig((vocab_size - 2) ** max_len, max_len))
                exhaustive_fail += got != best
                cases += 1
    ok = mismatches == 0 and exhaustive_fail == 0
    criterion(7, "beam search contracts", ok,
              f"beam1 vs greedy mismatches {mismatches}/100, exhaustive mismatches {exhaustive_fail}/{cases}")
    assert ok


def test_criterion_08_metric_oracles(criterion):
    worst = 0.0
    for cand, ref, bleus, rouge, meteor in FIXTURES:
        for n, expected in enumerate(bleus, start=1):
            worst = max(worst, abs(bleu_n(cand, [ref], n) - expected))
        worst = max(worst, abs(rouge_l(cand, ref) - rouge), abs(meteor_lite(cand, ref) - meteor))
    ok = len(FIXTURES) >= 10 and worst <= 1e-9
    criterion(8, "metric oracles", ok, f"{len(FIXTURES)} fixtures, max abs error {worst:.1e}")
    assert ok


def test_criterion_09_semantic_extraction(criterion, desk, ablation):
    cfg, ds = desk
    _, models = ablation
    bags = [b for _, b in ds.all_bags()]
    truth_acc = np.mean([semantic_extract(b.report, ds.keyword_map) == b.class_label for b in bags])
    beam = C.beam_config(cfg)
    pam = X.classify_semantic(models["k3_7_13"], ds, beam)["accuracy"]
    off = X.classify_semantic(models["off"], ds, beam)["accuracy"]
    ok = truth_acc == 1.0 and pam >= off
    criterion(9, "semantic extraction", ok,
              f"ground truth {truth_acc:.3f} on {len(bags)} bags; generated pam {pam:.3f} vs off {off:.3f}")
    assert ok


def _digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if not p.is_file():
            continue
        if p.name == "run.json":
            runs = json.loads(p.read_text())["runs"]
            body = json.dumps([{k: v for k, v in r.items() if k != "duration_s"} for r in runs], sort_keys=True)
            out[str(p.relative_to(root))] = hashlib.sha256(body.encode()).hexdigest()
        else:
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _pipeline(root: Path, monkeypatch) -> dict:
    root.mkdir()
    monkeypatch.chdir(root)
    small = ["--config", "preset:desk", "--set", "synth.n_train=32", "--set", "synth.n_test=8"]
    steps = ["--max-steps", "12"]
    commands = [
        ["synth", *small, "--out", "data"],
        ["train", *small, *steps, "--data", "data", "--out", "pam"],
        ["train", *small, *steps, "--pam-mode", "off", "--data", "data", "--out", "off"],
        ["generate", *small, "--checkpoint", "pam/model.ckpt", "--data", "data", "--out", "gen"],
        ["evaluate", "--generated", "gen/generated_test.json", "--data", "data", "--out", "eval"],
        ["mask-sweep", *small, "--checkpoint", "pam=pam/model.ckpt", "--checkpoint", "no_pam=off/model.ckpt",
         "--data", "data", "--out", "sweep"],
        ["pam-ablate", *small, *steps, "--data", "data", "--out", "ablate"],
        ["shuffle-study", *small, *steps, "--data", "data", "--out", "shuffle"],
        ["classify", *small, "--checkpoint", "pam/model.ckpt", "--mode", "finetune", "--data", "data",
         "--set", "classify.steps=5", "--out", "cls"],
        ["classify", *small, "--checkpoint", "pam/model.ckpt", "--mode", "semantic", "--data", "data", "--out", "cls"],
    ]
    for argv in commands:
        assert cli.main(argv) == 0, argv
    return _digest(root)


def test_criterion_10_determinism(criterion, tmp_path, monkeypatch):
    first = _pipeline(tmp_path / "one", monkeypatch)
    second = _pipeline(tmp_path / "two", monkeypatch)
    differing = sorted(k for k in first.keys() | second.keys() if first.get(k) != second.get(k))
    ok = not differing and len(first) > 0
    criterion(10, "byte-identical reruns", ok, f"{len(first)} files compared, differing: {differing[:5]}")
    assert ok
