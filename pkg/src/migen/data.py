"""Instance bags, the synthetic spatial-slide generator, and the dataset layout.

On-disk layout of a dataset directory::

    manifest.json        dataset manifest (see ``save_dataset``)
    vocab.txt            one token per line, line k holds id k
    bags/<bag_id>.json   per-bag header: shape, grid coords, report, labels
    bags/<bag_id>.f64    M * l little-endian float64 embeddings, row-major

Manifest fields: ``format`` ("migen-dataset"), ``version`` (1),
``synth_config`` (generator settings or null), ``vocab_file``, and ``bags``,
a list of records with ``bag_id``, ``split`` (train/val/test),
``n_instances`` (M), ``embed_dim`` (l), ``report``, ``class_label`` and
``blob`` (``subtype``, ``subtype_index``, ``center`` [row, col], ``radius``,
``diameter``, ``quadrant``) or null.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import BagIOError, ConfigError, FormatError, InputError
from .vocab import Vocab, build_vocab

SPLITS = ("train", "val", "test")
QUADRANTS = ("upper-left", "upper-right", "lower-left", "lower-right")
SUBTYPE_NAMES = ("ductal", "lobular", "mucinous", "papillary", "medullary", "tubular", "cribriform", "micropapillary")
DEFAULT_TEMPLATE = "invasive {subtype} carcinoma measuring {diameter} units located in the {quadrant} quadrant"


@dataclass(eq=False)
class InstanceBag:
    bag_id: str
    embeddings: np.ndarray
    grid_coords: np.ndarray
    report: str = ""
    class_label: Optional[int] = None
    blob: Optional[dict] = None
    instance_labels: Optional[np.ndarray] = None

    def __post_init__(self):
        self.embeddings = np.ascontiguousarray(self.embeddings, dtype=np.float64)
        self.grid_coords = np.asarray(self.grid_coords, dtype=np.int64).reshape(-1, 2)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise InputError(f"bag {self.bag_id}: embeddings must be a non-empty (M, l) matrix")
        if self.grid_coords.shape[0] != self.embeddings.shape[0]:
            raise InputError(f"bag {self.bag_id}: {self.grid_coords.shape[0]} coords for {self.embeddings.shape[0]} instances")
        if (self.grid_coords < 0).any():
            raise InputError(f"bag {self.bag_id}: grid coords must be non-negative")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)

    @property
    def n_instances(self) -> int:
        return self.embeddings.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.embeddings.shape[1]

    def subset(self, rows) -> "InstanceBag":
        rows = np.asarray(rows, dtype=np.int64)
        labels = None if self.instance_labels is None else self.instance_labels[rows]
        return dataclasses.replace(self, embeddings=self.embeddings[rows], grid_coords=self.grid_coords[rows],
                                   instance_labels=labels)

    def equals(self, other: "InstanceBag") -> bool:
        """Bitwise equality of every field."""
        def same(a, b):
            if a is None or b is None:
                return a is b
            return a.shape == b.shape and a.dtype == b.dtype and a.tobytes() == b.tobytes()
        return (self.bag_id == other.bag_id and self.report == other.report
                and self.class_label == other.class_label and self.blob == other.blob
                and same(self.embeddings, other.embeddings) and same(self.grid_coords, other.grid_coords)
                and same(self.instance_labels, other.instance_labels))


def raster_order(bag: InstanceBag) -> InstanceBag:
    """Reorder instances row-major by (row, col)."""
    rows, cols = bag.grid_coords[:, 0], bag.grid_coords[:, 1]
    order = np.lexsort((cols, rows))
    ordered = bag.grid_coords[order]
    if (np.diff(ordered, axis=0) == 0).all(axis=1).any():
        raise InputError(f"bag {bag.bag_id}: duplicate grid coordinates")
    return bag.subset(order)


# ----------------------------------------------------------------------------
# synthetic generator
# ----------------------------------------------------------------------------

@dataclass
class SynthConfig:
    grid_side: int = 8
    embed_dim: int = 32
    n_tissue_types: int = 2
    subtype_count: int = 4
    min_radius: int = 1
    max_radius: int = 3
    noise_sigma: float = 0.5
    templates: tuple = (DEFAULT_TEMPLATE,)
    n_train: int = 64
    n_val: int = 16
    n_test: int = 16
    seed: int = 0

    def __post_init__(self):
        self.templates = tuple(self.templates)

    def validate(self):
        G = self.grid_side
        if G < 4:
            raise ConfigError(f"grid_side must be >= 4, got {G}")
        if self.embed_dim < 1:
            raise ConfigError(f"embed_dim must be >= 1, got {self.embed_dim}")
        if self.n_tissue_types < 1:
            raise ConfigError(f"n_tissue_types must be >= 1, got {self.n_tissue_types}")
        if not 1 <= self.subtype_count <= len(SUBTYPE_NAMES):
            raise ConfigError(f"subtype_count must be in [1, {len(SUBTYPE_NAMES)}], got {self.subtype_count}")
        if self.min_radius < 0 or self.min_radius > self.max_radius:
            raise ConfigError(f"min_radius must be in [0, max_radius], got {self.min_radius}")
        if not self.max_radius < G / 2:
            raise ConfigError(f"max_radius={self.max_radius} does not fit a grid of side {G} (need radius < {G / 2})")
        if self.noise_sigma < 0:
            raise ConfigError(f"noise_sigma must be >= 0, got {self.noise_sigma}")
        if min(self.n_train, self.n_val, self.n_test) < 0:
            raise ConfigError("split sizes must be non-negative")
        if not self.templates:
            raise ConfigError("at least one report template is required")
        for t in self.templates:
            for slot in ("{subtype}", "{diameter}", "{quadrant}"):
                if slot not in t:
                    raise ConfigError(f"template {t!r} lacks slot {slot}")

    @property
    def subtypes(self) -> tuple[str, ...]:
        return SUBTYPE_NAMES[:self.subtype_count]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["templates"] = list(self.templates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown synth config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class Dataset:
    train: list
    val: list
    test: list
    vocab: Vocab
    synth_config: Optional[SynthConfig] = None
    keyword_map: dict = field(default_factory=dict)

    def split(self, name: str) -> list:
        if name not in SPLITS:
            raise InputError(f"unknown split {name!r}; expected one of {SPLITS}")
        return getattr(self, name)

    def all_bags(self):
        for name in SPLITS:
            for bag in getattr(self, name):
                yield name, bag

    @property
    def n_classes(self) -> int:
        labels = [b.class_label for _, b in self.all_bags() if b.class_label is not None]
        if self.synth_config is not None:
            return self.synth_config.subtype_count
        return max(labels) + 1 if labels else 0


def quadrant_of(center, grid_side: int) -> str:
    row, col = center
    vertical = "upper" if row < grid_side / 2 else "lower"
    horizontal = "left" if col < grid_side / 2 else "right"
    return f"{vertical}-{horizontal}"


def blob_mask(center, radius: int, grid_side: int) -> np.ndarray:
    rr, cc = np.mgrid[0:grid_side, 0:grid_side]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius * radius


def render_report(template: str, blob: dict) -> str:
    return template.format(subtype=blob["subtype"], diameter=blob["diameter"], quadrant=blob["quadrant"])


def synth_dataset(cfg: SynthConfig) -> Dataset:
    """Generate a dataset of G x G rasters with one planted circular tumor each.

    Background cells draw one of ``n_tissue_types`` base vectors, tumor cells
    the base vector of the bag's subtype; every cell adds Gaussian noise. The
    report names the subtype, the blob diameter (2r + 1 cells) and the
    quadrant holding the blob center.
    """
    cfg.validate()
    G, l = cfg.grid_side, cfg.embed_dim
    rng = np.random.default_rng(cfg.seed)
    tissue_bases = rng.normal(size=(cfg.n_tissue_types, l))
    subtype_bases = rng.normal(size=(cfg.subtype_count, l))
    rr, cc = np.mgrid[0:G, 0:G]
    coords = np.stack([rr.ravel(), cc.ravel()], axis=1)

    bags = []
    total = cfg.n_train + cfg.n_val + cfg.n_test
    for i in range(total):
        s = int(rng.integers(cfg.subtype_count))
        r = int(rng.integers(cfg.min_radius, cfg.max_radius + 1))
        center = (int(rng.integers(r, G - r)), int(rng.integers(r, G - r)))
        tissue = rng.integers(cfg.n_tissue_types, size=G * G)
        noise = rng.normal(size=(G * G, l)) * cfg.noise_sigma
        template = cfg.templates[int(rng.integers(len(cfg.templates)))]

        tumor = blob_mask(center, r, G).ravel()
        labels = np.where(tumor, cfg.n_tissue_types + s, tissue)
        emb = np.where(tumor[:, None], subtype_bases[s], tissue_bases[tissue]) + noise
        blob = {
            "subtype": cfg.subtypes[s],
            "subtype_index": s,
            "center": [center[0], center[1]],
            "radius": r,
            "diameter": 2 * r + 1,
            "quadrant": quadrant_of(center, G),
        }
        bags.append(InstanceBag(f"bag{i:05d}", emb, coords.copy(), render_report(template, blob), s, blob, labels))

    train = bags[:cfg.n_train]
    val = bags[cfg.n_train:cfg.n_train + cfg.n_val]
    test = bags[cfg.n_train + cfg.n_val:]
    vocab = build_vocab([b.report for b in (train or bags)])
    keyword_map = {k: [name] for k, name in enumerate(cfg.subtypes)}
    return Dataset(train, val, test, vocab, cfg, keyword_map)


def synth_base_vectors(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """The (tissue, subtype) base vectors ``synth_dataset`` draws for ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    tissue = rng.normal(size=(cfg.n_tissue_types, cfg.embed_dim))
    subtype = rng.normal(size=(cfg.subtype_count, cfg.embed_dim))
    return tissue, subtype


# ----------------------------------------------------------------------------
# persistence
# ----------------------------------------------------------------------------

def _dumps(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def save_bag(bag: InstanceBag, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    header = {
        "bag_id": bag.bag_id,
        "n_instances": bag.n_instances,
        "embed_dim": bag.embed_dim,
        "grid_coords": bag.grid_coords.tolist(),
        "report": bag.report,
        "class_label": bag.class_label,
        "blob": bag.blob,
        "instance_labels": None if bag.instance_labels is None else bag.instance_labels.tolist(),
    }
    (directory / f"{bag.bag_id}.json").write_text(_dumps(header), encoding="utf-8")
    (directory / f"{bag.bag_id}.f64").write_bytes(bag.embeddings.astype("<f8").tobytes())


def load_bag(directory, bag_id: str) -> InstanceBag:
    directory = Path(directory)
    head_path, data_path = directory / f"{bag_id}.json", directory / f"{bag_id}.f64"
    try:
        header = json.loads(head_path.read_text(encoding="utf-8"))
        raw = data_path.read_bytes()
    except FileNotFoundError as exc:
        raise BagIOError(f"bag {bag_id}: missing file {exc.filename}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"bag {bag_id}: corrupt header ({exc})") from exc
    try:
        M, l = int(header["n_instances"]), int(header["embed_dim"])
        coords = header["grid_coords"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"bag {bag_id}: header missing field ({exc})") from exc
    if len(raw) != M * l * 8:
        raise FormatError(f"bag {bag_id}: header says {M}x{l} scalars but file holds {len(raw)} bytes "
                          f"({len(raw) / 8:g} scalars)")
    if len(coords) != M:
        raise FormatError(f"bag {bag_id}: {len(coords)} grid coords for {M} instances")
    emb = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(M, l)
    labels = header.get("instance_labels")
    return InstanceBag(bag_id, emb, np.array(coords, dtype=np.int64).reshape(M, 2), header.get("report", ""),
                       header.get("class_label"), header.get("blob"),
                       None if labels is None else np.array(labels, dtype=np.int64))


def save_dataset(ds: Dataset, root, extra: Optional[dict] = None) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    records = []
    for split, bag in ds.all_bags():
        save_bag(bag, root / "bags")
        records.append({
            "bag_id": bag.bag_id,
            "split": split,
            "n_instances": bag.n_instances,
            "embed_dim": bag.embed_dim,
            "report": bag.report,
            "class_label": bag.class_label,
            "blob": bag.blob,
        })
    manifest = {
        "format": "migen-dataset",
        "version": 1,
        "synth_config": None if ds.synth_config is None else ds.synth_config.to_dict(),
        "keyword_map": {str(k): v for k, v in ds.keyword_map.items()},
        "vocab_file": "vocab.txt",
        "bags": records,
    }
    if extra:
        manifest.update(extra)
    ds.vocab.save(root / "vocab.txt")
    (root / "manifest.json").write_text(_dumps(manifest), encoding="utf-8")


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise BagIOError(f"no dataset manifest at {path}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt dataset manifest {path}: {exc}") from exc
    if manifest.get("format") != "migen-dataset":
        raise FormatError(f"{path} is not a migen dataset manifest")
    return manifest


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = read_manifest(root)
    splits = {s: [] for s in SPLITS}
    for rec in manifest["bags"]:
        bag = load_bag(root / "bags", rec["bag_id"])
        if (bag.n_instances, bag.embed_dim) != (rec["n_instances"], rec["embed_dim"]):
            raise FormatError(f"bag {rec['bag_id']}: manifest shape ({rec['n_instances']}, {rec['embed_dim']}) "
                              f"disagrees with bag file ({bag.n_instances}, {bag.embed_dim})")
        if rec["split"] not in splits:
            raise FormatError(f"bag {rec['bag_id']}: unknown split {rec['split']!r}")
        splits[rec["split"]].append(bag)
    vocab = Vocab.load(root / manifest.get("vocab_file", "vocab.txt"))
    cfg = manifest.get("synth_config")
    keyword_map = {int(k): list(v) for k, v in manifest.get("keyword_map", {}).items()}
    return Dataset(splits["train"], splits["val"], splits["test"], vocab,
                   None if cfg is None else SynthConfig.from_dict(cfg), keyword_map)
