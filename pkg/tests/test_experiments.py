import numpy as np
import pytest

from migen import config as C
from migen import experiments as X
from migen.data import SynthConfig, synth_dataset
from migen.decode import BeamConfig
from migen.errors import ConfigError, InputError


@pytest.fixture(scope="module")
def small():
    cfg = C.load_config("preset:desk", ["synth.n_train=8", "synth.n_test=4", "train.max_steps=3"])
    return cfg, synth_dataset(C.synth_config(cfg))


def test_presets_resolve():
    assert {"desk", "overfit", "paper"} <= set(C.preset_names())
    paper = C.load_config("preset:paper")
    assert paper["model"]["d_model"] == 512 and paper["model"]["pam_kernels"] == [3, 7, 13]
    assert paper["decode"]["beam_size"] == 3 and paper["train"]["learning_rate"] == 1e-4


def test_config_overrides_parse_values():
    cfg = C.load_config("preset:desk", ["train.learning_rate=0.5", "model.pam_kernels=[3, 5]", "model.pam_mode=off"])
    assert cfg["train"]["learning_rate"] == 0.5
    assert cfg["model"]["pam_kernels"] == [3, 5] and cfg["model"]["pam_mode"] == "off"
    with pytest.raises(ConfigError):
        C.load_config(None, ["nosection=1"])
    with pytest.raises(ConfigError):
        C.load_config("preset:missing")


def test_mask_bags_seeded_and_ratio_zero_identity(small):
    _, ds = small
    assert all(a is b for a, b in zip(X.mask_bags(ds.test, 0.0, 7), ds.test))
    a, b = X.mask_bags(ds.test, 0.5, 7), X.mask_bags(ds.test, 0.5, 7)
    assert all(x.equals(y) for x, y in zip(a, b))
    c = X.mask_bags(ds.test, 0.5, 8)
    assert not all(x.equals(y) for x, y in zip(a, c))


def test_evaluate_reports_blocks(small):
    _, ds = small
    truth = {b.bag_id: b.report for b in ds.test}
    res = X.evaluate_reports(truth, ds.test, ds.keyword_map)
    assert res["aggregate"]["bleu_4"] == 1.0 and res["aggregate"]["n"] == len(ds.test)
    assert res["classification"]["accuracy"] == 1.0
    assert [r["bag_id"] for r in res["per_bag"]] == sorted(truth)
    with pytest.raises(InputError, match="ghost"):
        X.evaluate_reports({"ghost": "x"}, ds.test)


def test_evaluate_reports_empty():
    res = X.evaluate_reports({}, [])
    assert res["aggregate"] == {"n": 0} and res["per_bag"] == []


def test_semantic_on_ground_truth_is_exact(small):
    _, ds = small
    assert X.classify_semantic(None, ds, BeamConfig(1, 5), "train")["accuracy"] == 1.0


def test_missing_labels_refused(small):
    cfg, ds = small
    unlabelled = synth_dataset(SynthConfig(n_train=2, n_val=0, n_test=2, seed=1))
    for b in unlabelled.test:
        b.class_label = None
    with pytest.raises(InputError):
        X.classify_semantic(None, unlabelled, BeamConfig(1, 5))
    with pytest.raises(InputError):
        X.classify_finetune(X.build_model(cfg, ds), unlabelled, cfg)


def test_with_classifier_keeps_trained_weights(small):
    cfg, ds = small
    model = X.build_model(cfg, ds)
    clf = X.with_classifier(model, 4)
    assert {"cls", "clf.w", "clf.b"} <= set(clf.params)
    assert all(np.array_equal(clf.params[k].data, v.data) for k, v in model.params.items())


def test_ablation_variants_differ_only_in_pam_fields(small):
    cfg, ds = small
    base = X.build_model(cfg, ds).config.to_dict()
    for _, changes in X.ABLATION_VARIANTS:
        assert set(changes) <= {"pam_mode", "pam_kernels"}
        varied = X.build_model(cfg, ds, **changes).config.to_dict()
        assert {k for k in base if base[k] != varied[k]} <= {"pam_mode", "pam_kernels"}


@pytest.mark.slow
def test_finetune_separable_case_is_exact():
    cfg = C.load_config("preset:desk", ["synth.noise_sigma=0.0", "synth.n_train=64", "synth.n_test=32",
                                        "train.max_steps=150", "classify.steps=100"])
    ds = synth_dataset(C.synth_config(cfg))
    model = X.train_model(ds, cfg).model
    scores = X.classify_finetune(model, ds, cfg, full_model=True)
    assert scores["accuracy"] == 1.0 and scores["abstentions"] == 0
