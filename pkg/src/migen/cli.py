"""``migen`` command-line entry point.

Exit status is 0 on success, 1 for user or configuration errors (bad
config, bad input files, refused overwrites) and 2 for internal invariant
violations. Every command appends one record to ``run.json`` in its output
directory; relative output paths are resolved under ``$MIGEN_OUTPUT_ROOT``
when that variable is set.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import shutil
import sys
import time
from pathlib import Path
from typing import Optional

from . import __version__
from . import config as C
from . import experiments as X
from .data import SPLITS, load_dataset, save_dataset, synth_dataset
from .decode import BeamConfig
from .errors import BagIOError, ConfigError, ContractError, FormatError, InputError, MigenError, TrainingDiverged
from .model import load_checkpoint, save_checkpoint, vocab_digest
from .train import AdamState, train, write_loss_trace

logger = logging.getLogger("migen")

OUTPUT_ROOT_ENV = "MIGEN_OUTPUT_ROOT"
RUN_MANIFEST = "run.json"
USER_ERRORS = (ConfigError, InputError, FormatError, BagIOError, TrainingDiverged)


class Refusal(MigenError):
    """The command declined to run; exit status 1."""


# ----------------------------------------------------------------------------
# output helpers
# ----------------------------------------------------------------------------

def out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def write_csv(path: Path, rows: list, fields: Optional[list] = None) -> None:
    fields = fields or (list(rows[0]) if rows else [])
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    path.write_text(buf.getvalue(), encoding="utf-8")


def append_manifest(directory: Path, command: str, cfg: Optional[dict], seed, artifacts: list, started: float,
                    extra: Optional[dict] = None) -> None:
    """Append a run record; the manifest file is never rewritten in place."""
    path = directory / RUN_MANIFEST
    runs = json.loads(path.read_text(encoding="utf-8"))["runs"] if path.exists() else []
    record = {"command": command, "config": cfg, "seed": seed, "artifacts": sorted(artifacts),
              "version": __version__, "duration_s": round(time.perf_counter() - started, 3)}
    if extra:
        record.update(extra)
    runs.append(record)
    tmp = path.with_suffix(".tmp")
    tmp.write_text(dumps({"runs": runs}), encoding="utf-8")
    tmp.replace(path)


def prepare_out(path: str, force: bool = False, data_dir: Optional[str] = None) -> Path:
    p = out_dir(path)
    if data_dir is not None and p.resolve() == Path(data_dir).resolve():
        raise Refusal("output directory must differ from the dataset directory")
    if p.exists() and not p.is_dir():
        raise Refusal(f"{p} exists and is not a directory")
    p.mkdir(parents=True, exist_ok=True)
    return p


def resolved_config(args) -> dict:
    cfg = C.load_config(getattr(args, "config", None), getattr(args, "set", None) or [])
    for flag, key in FLAG_KEYS:
        value = getattr(args, flag, None)
        if value is not None:
            C.set_key(cfg, key.split("."), value)
    return cfg


# flag attribute -> config key it overrides
FLAG_KEYS = (
    ("seed", "train.seed"),
    ("max_steps", "train.max_steps"),
    ("lr", "train.learning_rate"),
    ("batch_size", "train.batch_size"),
    ("mask_ratio", "train.mask_ratio"),
    ("pam_mode", "model.pam_mode"),
    ("beam", "decode.beam_size"),
    ("max_len", "decode.max_len"),
    ("synth_seed", "synth.seed"),
)


# ----------------------------------------------------------------------------
# commands
# ----------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    scfg = C.synth_config(cfg)
    scfg.validate()
    out = out_dir(args.out)
    if out.exists() and any(out.iterdir()) and not args.force:
        raise Refusal(f"{out} is not empty; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    if args.force:
        # only files this command owns; anything else in the directory is left alone
        shutil.rmtree(out / "bags", ignore_errors=True)
        for name in (RUN_MANIFEST, "manifest.json", "vocab.txt"):
            (out / name).unlink(missing_ok=True)
    ds = synth_dataset(scfg)
    save_dataset(ds, out)
    append_manifest(out, "synth", cfg, scfg.seed, ["manifest.json", "vocab.txt", "bags/"], started)
    print(f"wrote {len(ds.train)}/{len(ds.val)}/{len(ds.test)} train/val/test bags to {out}")
    return 0


def _checkpoint_writer(out: Path, digest: str, seed: int):
    def write(model, state, losses):
        step = state.step
        save_checkpoint(model, out / "model.ckpt", {"step": step, "vocab_digest": digest, "seed": seed})
        state.save(out / "optim.ckpt")
    return write


def cmd_train(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    ds = load_dataset(args.data)
    out = prepare_out(args.out, data_dir=args.data)
    digest = vocab_digest(ds.vocab.itos)
    tcfg = C.train_config(cfg)
    prior = []
    start_step = 0
    state = None
    if args.resume:
        resume = Path(args.resume)
        model, meta = load_checkpoint(resume / "model.ckpt")
        if meta.get("vocab_digest") != digest:
            raise Refusal(f"checkpoint vocabulary in {resume} does not match dataset {args.data}")
        state = AdamState.load(resume / "optim.ckpt")
        start_step = int(meta.get("step", state.step))
        loss_path = resume / "loss.csv"
        if loss_path.exists():
            rows = list(csv.DictReader(loss_path.read_text(encoding="utf-8").splitlines()))
            prior = [(int(r["step"]), float(r["loss"])) for r in rows if int(r["step"]) <= start_step]
        logger.warning("resuming at step %d: batch order after resume differs from an uninterrupted run",
                       start_step)
    else:
        model = X.build_model(cfg, ds)
    result = train(model, ds.train, ds.vocab, tcfg, state=state, start_step=start_step,
                   on_checkpoint=_checkpoint_writer(out, digest, tcfg.seed))
    _checkpoint_writer(out, digest, tcfg.seed)(result.model, result.state, result.losses)
    losses = prior + result.losses
    write_loss_trace(losses, out / "loss.csv")
    append_manifest(out, "train", cfg, tcfg.seed, ["model.ckpt", "optim.ckpt", "loss.csv"], started,
                    {"data": str(args.data), "resumed_from": args.resume, "final_step": result.state.step})
    final = f"{losses[-1][1]:.6f}" if losses else "n/a"
    print(f"trained to step {result.state.step}; final loss {final}")
    return 0


def beam_for(cfg: dict, args, models) -> BeamConfig:
    """Configured beam; an unset --max-len is capped at the models' report length."""
    beam = C.beam_config(cfg)
    if getattr(args, "max_len", None) is None:
        cap = min(m.config.max_report_len for m in models)
        beam = dataclasses.replace(beam, max_len=min(beam.max_len, cap))
    return beam


def cmd_generate(args) -> int:
    started = time.perf_counter()
    if args.split not in SPLITS:
        raise Refusal(f"unknown split {args.split!r}; expected one of {SPLITS}")
    cfg = resolved_config(args)
    model, meta = load_checkpoint(args.checkpoint)
    ds = load_dataset(args.data)
    if meta.get("vocab_digest") not in (None, vocab_digest(ds.vocab.itos)):
        raise Refusal("checkpoint vocabulary does not match the dataset")
    beam = beam_for(cfg, args, [model])
    rows = X.generate_reports(model, ds.split(args.split), ds.vocab, beam)
    out = prepare_out(args.out, data_dir=args.data)
    stem = f"generated_{args.split}"
    (out / f"{stem}.json").write_text(dumps(rows), encoding="utf-8")
    write_csv(out / f"{stem}.csv", rows, ["bag_id", "report"])
    append_manifest(out, "generate", cfg, None, [f"{stem}.json", f"{stem}.csv"], started,
                    {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split})
    print(f"generated {len(rows)} reports into {out}")
    return 0


def read_generated(path: Path) -> dict:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError as exc:
        raise InputError(f"generated file {path} not found") from exc
    if path.suffix == ".csv":
        rows = list(csv.DictReader(text.splitlines()))
    else:
        try:
            rows = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
    if not isinstance(rows, list) or any(not isinstance(r, dict) or "bag_id" not in r or "report" not in r
                                         for r in rows):
        raise FormatError(f"{path}: expected a list of records with bag_id and report")
    out = {}
    for r in rows:
        if r["bag_id"] in out:
            raise InputError(f"{path}: duplicate bag_id {r['bag_id']}")
        out[r["bag_id"]] = r["report"]
    return out


def cmd_evaluate(args) -> int:
    started = time.perf_counter()
    generated = read_generated(Path(args.generated))
    ds = load_dataset(args.data)
    bags = [b for _, b in ds.all_bags()]
    templates = ds.synth_config.templates if ds.synth_config is not None else None
    result = X.evaluate_reports(generated, bags, ds.keyword_map, templates)
    out = prepare_out(args.out, data_dir=args.data)
    (out / "eval.json").write_text(dumps({"aggregate": result["aggregate"],
                                          "classification": result.get("classification")}), encoding="utf-8")
    write_csv(out / "eval_per_bag.csv", result["per_bag"])
    append_manifest(out, "evaluate", None, None, ["eval.json", "eval_per_bag.csv"], started,
                    {"generated": str(args.generated), "data": str(args.data)})
    agg = result["aggregate"]
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.items() if k != "n") + f" n={agg['n']}")
    return 0


def _named_checkpoints(items: list) -> dict:
    models = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep:
            path = item
        model, _ = load_checkpoint(path)
        if not sep:
            name = "pam" if model.config.pam_mode != "off" else "no_pam"
        if name in models:
            raise Refusal(f"two checkpoints share the name {name!r}; use NAME=PATH")
        models[name] = model
    return models


def cmd_mask_sweep(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    ds = load_dataset(args.data)
    models = _named_checkpoints(args.checkpoint)
    ratios = [float(r) for r in args.ratios.split(",")] if args.ratios else cfg["experiments"]["mask_ratios"]
    if any(not 0.0 <= r < 1.0 for r in ratios):
        raise ConfigError(f"mask ratios must lie in [0, 1), got {ratios}")
    seed = int(cfg["experiments"]["mask_seed"])
    rows = X.mask_sweep(models, ds.split(args.split), ds.vocab, ratios, seed,
                   beam_for(cfg, args, models.values()))
    out = prepare_out(args.out, data_dir=args.data)
    write_csv(out / "mask_sweep.csv", rows, ["ratio", "model", "bleu_1", "quadrant_acc"])
    append_manifest(out, "mask-sweep", cfg, seed, ["mask_sweep.csv"], started,
                    {"checkpoints": list(args.checkpoint), "data": str(args.data), "split": args.split})
    print(f"wrote {len(rows)} rows to {out / 'mask_sweep.csv'}")
    return 0


def cmd_pam_ablate(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    ds = load_dataset(args.data)
    out = prepare_out(args.out, data_dir=args.data)
    variants = X.ABLATION_VARIANTS
    if args.variants:
        wanted = args.variants.split(",")
        known = dict(variants)
        missing = [v for v in wanted if v not in known]
        if missing:
            raise ConfigError(f"unknown ablation variants {missing}; known: {list(known)}")
        variants = tuple((v, known[v]) for v in wanted)
    rows = X.pam_ablation(ds, cfg, variants)
    write_csv(out / "pam_ablation.csv", rows)
    append_manifest(out, "pam-ablate", cfg, cfg["train"]["seed"], ["pam_ablation.csv"], started,
                    {"data": str(args.data)})
    print(f"wrote {len(rows)} variants to {out / 'pam_ablation.csv'}")
    return 0


def cmd_shuffle_study(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    ds = load_dataset(args.data)
    out = prepare_out(args.out, data_dir=args.data)
    rows = X.shuffle_study(ds, cfg)
    write_csv(out / "shuffle_study.csv", rows, ["augmentation", "model", "bleu_1", "quadrant_acc"])
    append_manifest(out, "shuffle-study", cfg, cfg["train"]["seed"], ["shuffle_study.csv"], started,
                    {"data": str(args.data)})
    print(f"wrote {len(rows)} rows to {out / 'shuffle_study.csv'}")
    return 0


def cmd_classify(args) -> int:
    started = time.perf_counter()
    cfg = resolved_config(args)
    ds = load_dataset(args.data)
    if args.ground_truth:
        if args.mode != "semantic":
            raise ConfigError("--ground-truth only applies to --mode semantic")
        model = None
    else:
        if not args.checkpoint:
            raise ConfigError("--checkpoint is required unless --ground-truth is given")
        model, _ = load_checkpoint(args.checkpoint)
    if args.mode == "finetune":
        scores = X.classify_finetune(model, ds, cfg, full_model=True if args.full_model else None)
    else:
        scores = X.classify_semantic(model, ds, beam_for(cfg, args, [model] if model else []) if model else C.beam_config(cfg),
                                     args.split)
    out = prepare_out(args.out, data_dir=args.data)
    (out / f"classify_{args.mode}.json").write_text(dumps(scores), encoding="utf-8")
    append_manifest(out, "classify", cfg, cfg["train"]["seed"], [f"classify_{args.mode}.json"], started,
                    {"checkpoint": args.checkpoint, "data": str(args.data), "mode": args.mode})
    print(f"accuracy={scores['accuracy']:.4f} macro_f1={scores['macro_f1']:.4f} "
          f"abstentions={scores['abstentions']} n={scores['n']}")
    return 0


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------

def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML file or preset:NAME (" + ", ".join(C.preset_names()) + ")")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config key")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="migen", description="Report generation from bags of patch embeddings.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", dest="synth_seed", type=int)
    p.add_argument("--force", action="store_true", help="write into a non-empty directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a report generator")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="directory holding model.ckpt and optim.ckpt")
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--mask-ratio", type=float)
    p.add_argument("--pam-mode", choices=("hierarchical", "last_layer_only", "off"))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="decode reports for one split")
    _config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="score generated reports against ground truth")
    p.add_argument("--generated", required=True, help="JSON or CSV from `migen generate`")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("mask-sweep", help="score checkpoints on increasingly masked test bags")
    _config_args(p)
    p.add_argument("--checkpoint", action="append", required=True, metavar="[NAME=]PATH")
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--ratios", help="comma-separated mask ratios")
    p.add_argument("--beam", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mask_sweep)

    p = sub.add_parser("pam-ablate", help="train and score each PAM variant")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", help="comma-separated subset of " + ",".join(n for n, _ in X.ABLATION_VARIANTS))
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_pam_ablate)

    p = sub.add_parser("shuffle-study", help="train-time shuffle and mask augmentation grid")
    _config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--beam", type=int)
    p.set_defaults(func=cmd_shuffle_study)

    p = sub.add_parser("classify", help="bag classification by fine-tuning or semantic extraction")
    _config_args(p)
    p.add_argument("--checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--mode", choices=("finetune", "semantic"), required=True)
    p.add_argument("--full-model", action="store_true", help="fine-tune every parameter, not just the head")
    p.add_argument("--ground-truth", action="store_true", help="semantic mode on reference reports")
    p.add_argument("--split", default="test")
    p.add_argument("--beam", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (Refusal, *USER_ERRORS) as exc:
        print(f"migen {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ContractError as exc:
        print(f"migen {args.command}: internal error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - any other failure is an internal invariant violation
        logger.debug("unhandled", exc_info=True)
        print(f"migen {args.command}: internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
