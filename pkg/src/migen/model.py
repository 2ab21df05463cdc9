"""Transformer encoder-decoder with hierarchical position-aware modules.

The encoder has no positional encoding of its own. Position awareness comes
only from the position-aware modules (PAMs): each one pads the instance
sequence to the next square length, folds it into a square grid, runs one
same-padded convolution per configured kernel size, adds the sum of those to
the grid as a residual, and unfolds back to the original length. In
``hierarchical`` mode a PAM sits on every encoder layer output and the
decoder memory is the sum of all PAM outputs.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, FormatError, InputError
from .tensor import Tensor
from .vocab import BOS, PAD

PAM_MODES = ("hierarchical", "last_layer_only", "off")
NEG_INF = -1e30


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 3
    n_heads: int = 4
    d_model: int = 512
    d_ff: int = 2048
    vocab_size: int = 32
    max_report_len: int = 64
    pam_kernels: tuple = (3, 7, 13)
    pam_mode: str = "hierarchical"
    pam_depthwise: bool = True
    dropout_rate: float = 0.0
    input_dim: int = 512
    n_classes: int = 0
    pam_init: str = "normal"
    init_seed: int = 0
    ln_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "pam_kernels", tuple(int(k) for k in self.pam_kernels))

    def validate(self) -> "ModelConfig":
        if self.n_layers < 1 or self.n_heads < 1:
            raise ConfigError("n_layers and n_heads must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.pam_mode not in PAM_MODES:
            raise ConfigError(f"pam_mode must be one of {PAM_MODES}, got {self.pam_mode!r}")
        if any(k < 1 or k % 2 == 0 for k in self.pam_kernels):
            raise ConfigError(f"pam_kernels must be odd positive integers, got {self.pam_kernels}")
        if self.pam_mode != "off" and not self.pam_kernels:
            raise ConfigError("a PAM needs at least one kernel")
        if self.vocab_size < 4:
            raise ConfigError("vocab_size must cover the four special tokens")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.pam_init not in ("normal", "zeros"):
            raise ConfigError(f"pam_init must be 'normal' or 'zeros', got {self.pam_init!r}")
        if self.max_report_len < 1 or self.d_ff < 1 or self.input_dim < 1:
            raise ConfigError("max_report_len, d_ff and input_dim must be positive")
        return self

    def pam_layers(self) -> list[int]:
        if self.pam_mode == "hierarchical":
            return list(range(self.n_layers))
        if self.pam_mode == "last_layer_only":
            return [self.n_layers - 1]
        return []

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pam_kernels"] = list(self.pam_kernels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------

def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map for every learnable tensor."""
    d, f, V = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes: dict[str, tuple[int, ...]] = {}

    def attn(prefix):
        for n in ("q", "k", "v", "o"):
            shapes[f"{prefix}.w{n}"] = (d, d)
            shapes[f"{prefix}.b{n}"] = (d,)

    def ln(prefix):
        shapes[f"{prefix}.g"] = (d,)
        shapes[f"{prefix}.b"] = (d,)

    def ffn(prefix):
        shapes[f"{prefix}.w1"] = (d, f)
        shapes[f"{prefix}.b1"] = (f,)
        shapes[f"{prefix}.w2"] = (f, d)
        shapes[f"{prefix}.b2"] = (d,)

    if cfg.input_dim != d:
        shapes["in_proj.w"] = (cfg.input_dim, d)
        shapes["in_proj.b"] = (d,)
    pam = set(cfg.pam_layers())
    for i in range(cfg.n_layers):
        attn(f"enc.{i}.attn")
        ln(f"enc.{i}.ln1")
        ffn(f"enc.{i}.ff")
        ln(f"enc.{i}.ln2")
        if i in pam:
            for k in cfg.pam_kernels:
                shapes[f"enc.{i}.pam.k{k}.w"] = (k, k, d) if cfg.pam_depthwise else (k, k, d, d)
                shapes[f"enc.{i}.pam.k{k}.b"] = (d,)
    shapes["tok_emb"] = (V, d)
    for i in range(cfg.n_layers):
        attn(f"dec.{i}.self")
        ln(f"dec.{i}.ln1")
        attn(f"dec.{i}.cross")
        ln(f"dec.{i}.ln2")
        ffn(f"dec.{i}.ff")
        ln(f"dec.{i}.ln3")
    shapes["out.w"] = (d, V)
    shapes["out.b"] = (V,)
    if cfg.n_classes > 0:
        shapes["cls"] = (d,)
        shapes["clf.w"] = (d, cfg.n_classes)
        shapes["clf.b"] = (cfg.n_classes,)
    return shapes


def count_params(cfg: ModelConfig) -> int:
    """Closed-form parameter count."""
    d, f, V, N = cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.n_layers
    attn = 4 * d * d + 4 * d
    ln = 2 * d
    ffn = 2 * d * f + f + d
    per_pam = sum(k * k * (d if cfg.pam_depthwise else d * d) + d for k in cfg.pam_kernels)
    n_pam = {"hierarchical": N, "last_layer_only": 1, "off": 0}[cfg.pam_mode]
    total = N * (attn + ffn + 2 * ln) + n_pam * per_pam
    total += V * d + N * (2 * attn + ffn + 3 * ln) + d * V + V
    if cfg.input_dim != d:
        total += cfg.input_dim * d + d
    if cfg.n_classes > 0:
        total += d + d * cfg.n_classes + cfg.n_classes
    return total


def init_params(cfg: ModelConfig) -> dict[str, Tensor]:
    cfg.validate()
    rng = np.random.default_rng(cfg.init_seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if ".pam." in name:
            if cfg.pam_init == "zeros" or leaf == "b":
                value = np.zeros(shape)
            else:
                k = shape[0]
                fan_in = k * k * (1 if cfg.pam_depthwise else shape[2])
                value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        elif name == "tok_emb":
            value = rng.normal(0.0, 1.0 / math.sqrt(cfg.d_model), size=shape)
        elif name == "cls":
            value = rng.normal(0.0, 0.02, size=shape)
        elif len(shape) == 2:
            bound = math.sqrt(6.0 / (shape[0] + shape[1]))
            value = rng.uniform(-bound, bound, size=shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            value = np.zeros(shape)
        params[name] = Tensor(value, requires_grad=True)
    return params


def sinusoid_table(n_positions: int, d: int) -> np.ndarray:
    pos = np.arange(n_positions)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------

def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, n, d = x.shape
    x = x.reshape(tuple(lead) + (n, h, d // h))
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, n, dk = x.shape
    axes = tuple(range(len(lead))) + (len(lead) + 1, len(lead), len(lead) + 2)
    return T.transpose(x, axes).reshape(tuple(lead) + (n, h * dk))


def _layer_norm(x, p, prefix, eps):
    return T.layer_norm(x, p[f"{prefix}.g"], p[f"{prefix}.b"], eps)


def _ffn(x, p, prefix):
    hidden = T.relu(_linear(x, p[f"{prefix}.w1"], p[f"{prefix}.b1"]))
    return _linear(hidden, p[f"{prefix}.w2"], p[f"{prefix}.b2"])


def _attention(q_in, k_heads_t, v_heads, p, prefix, h, mask=None, record=None):
    """Scaled dot-product attention given pre-split keys (transposed) and values."""
    q = _split_heads(_linear(q_in, p[f"{prefix}.wq"], p[f"{prefix}.bq"]), h)
    scores = T.matmul(q, k_heads_t) * (1.0 / math.sqrt(q.shape[-1]))
    if mask is not None:
        scores = T.masked_fill(scores, mask, NEG_INF)
    weights = T.softmax(scores, axis=-1)
    if record is not None:
        record.setdefault(prefix, weights.data)
    ctx = _merge_heads(T.matmul(weights, v_heads))
    return _linear(ctx, p[f"{prefix}.wo"], p[f"{prefix}.bo"])


def _kv(x, p, prefix, h):
    k = _split_heads(_linear(x, p[f"{prefix}.wk"], p[f"{prefix}.bk"]), h)
    v = _split_heads(_linear(x, p[f"{prefix}.wv"], p[f"{prefix}.bv"]), h)
    nd = k.ndim
    kt = T.transpose(k, tuple(range(nd - 2)) + (nd - 1, nd - 2))
    return kt, v


def _self_attention(x, p, prefix, h, mask=None, record=None):
    kt, v = _kv(x, p, prefix, h)
    return _attention(x, kt, v, p, prefix, h, mask, record)


# ----------------------------------------------------------------------------
# position-aware module
# ----------------------------------------------------------------------------

@dataclass(frozen=True)
class PadRecord:
    original: int
    padded: int
    side: int


def square_record(m: int) -> PadRecord:
    if m < 1:
        raise InputError("cannot pad an empty sequence")
    side = math.isqrt(m - 1) + 1
    return PadRecord(m, side * side, side)


def pad_to_square(E: Tensor) -> tuple[Tensor, PadRecord]:
    """Zero-pad an (M, l) sequence to the next square length and fold it to (s, s, l)."""
    rec = square_record(E.shape[0])
    if rec.padded > rec.original:
        E = T.concat([E, Tensor(np.zeros((rec.padded - rec.original, E.shape[1])))], axis=0)
    return E.reshape(rec.side, rec.side, E.shape[1]), rec


def pam_forward(E: Tensor, convs: list[tuple[Tensor, Tensor]], depthwise: bool = True) -> Tensor:
    """Residual sum of multi-kernel convolutions over the square-folded sequence."""
    grid, rec = pad_to_square(E)
    outs = [grid] + [T.conv2d_same(grid, w, b, depthwise) for w, b in convs]
    total = T.add_n(outs)
    flat = total.reshape(rec.padded, E.shape[1])
    if rec.padded == rec.original:
        return flat
    return T.take_rows(flat, slice(0, rec.original))


def _pam_convs(p, cfg, layer):
    return [(p[f"enc.{layer}.pam.k{k}.w"], p[f"enc.{layer}.pam.k{k}.b"]) for k in cfg.pam_kernels]


# ----------------------------------------------------------------------------
# encoder / decoder
# ----------------------------------------------------------------------------

def _maybe_dropout(x, cfg, rng):
    return T.dropout(x, cfg.dropout_rate, rng) if rng is not None else x


def encoder_layer(x: Tensor, p, cfg: ModelConfig, i: int, rng=None) -> Tensor:
    a = _self_attention(x, p, f"enc.{i}.attn", cfg.n_heads)
    x = _layer_norm(T.add(x, _maybe_dropout(a, cfg, rng)), p, f"enc.{i}.ln1", cfg.ln_eps)
    f = _ffn(x, p, f"enc.{i}.ff")
    return _layer_norm(T.add(x, _maybe_dropout(f, cfg, rng)), p, f"enc.{i}.ln2", cfg.ln_eps)


def project_input(embeddings, p, cfg: ModelConfig) -> Tensor:
    x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
    if x.ndim != 2 or x.shape[1] != cfg.input_dim:
        raise InputError(f"bag embeddings of shape {x.shape} do not match input_dim={cfg.input_dim}")
    if "in_proj.w" in p:
        x = _linear(x, p["in_proj.w"], p["in_proj.b"])
    return x


def encoder_forward(E0: Tensor, p, cfg: ModelConfig, rng=None, layers_out: Optional[list] = None) -> Tensor:
    """Run the encoder stack and aggregate the decoder memory H (M, d)."""
    pam = set(cfg.pam_layers())
    x = E0
    collected = []
    for i in range(cfg.n_layers):
        x = encoder_layer(x, p, cfg, i, rng)
        if layers_out is not None:
            layers_out.append(x)
        if i in pam:
            collected.append(pam_forward(x, _pam_convs(p, cfg, i), cfg.pam_depthwise))
    if cfg.pam_mode == "off":
        return x
    if len(collected) == 1:
        return collected[0]
    return T.add_n(collected)


def decoder_forward(H: Tensor, prefixes, p, cfg: ModelConfig, rng=None, record: Optional[dict] = None) -> Tensor:
    """Teacher-forced logits (B, T, vocab) for a batch of prefixes over one memory."""
    ids = np.asarray(prefixes, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None, :]
    B, n = ids.shape
    if n > cfg.max_report_len:
        raise ContractError(f"prefix length {n} exceeds max_report_len={cfg.max_report_len}")
    h, d = cfg.n_heads, cfg.d_model
    pos = Tensor(sinusoid_table(n, d))
    x = T.embedding(p["tok_emb"], ids) * math.sqrt(d)
    x = _maybe_dropout(T.add(x, T.expand_batch(pos, B)), cfg, rng)
    causal = np.triu(np.ones((n, n), dtype=bool), k=1)
    for i in range(cfg.n_layers):
        a = _self_attention(x, p, f"dec.{i}.self", h, mask=causal, record=record)
        x = _layer_norm(T.add(x, _maybe_dropout(a, cfg, rng)), p, f"dec.{i}.ln1", cfg.ln_eps)
        kt, v = _kv(H, p, f"dec.{i}.cross", h)
        c = _attention(x, T.expand_batch(kt, B), T.expand_batch(v, B), p, f"dec.{i}.cross", h, record=record)
        x = _layer_norm(T.add(x, _maybe_dropout(c, cfg, rng)), p, f"dec.{i}.ln2", cfg.ln_eps)
        f = _ffn(x, p, f"dec.{i}.ff")
        x = _layer_norm(T.add(x, _maybe_dropout(f, cfg, rng)), p, f"dec.{i}.ln3", cfg.ln_eps)
    return _linear(x, p["out.w"], p["out.b"])


def nll_loss(logits: Tensor, targets, pad_id: int = PAD) -> Tensor:
    """Mean negative log-likelihood over non-PAD target positions."""
    tg = np.asarray(targets, dtype=np.int64)
    if tg.shape != logits.shape[:-1]:
        raise InputError(f"targets {tg.shape} do not align with logits {logits.shape}")
    V = logits.shape[-1]
    z = logits.data.reshape(-1, V)
    t = tg.reshape(-1)
    keep = t != pad_id
    count = int(keep.sum())
    if count == 0:
        raise ContractError("every target position is padding")
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.nonzero(keep)[0]
    loss = -logp[rows, t[rows]].sum() / count
    shape = logits.shape

    def backward(g):
        grad = np.exp(logp)
        grad[np.arange(len(t)), t] -= 1.0
        grad[~keep] = 0.0
        return (grad.reshape(shape) * (float(g) / count),)
    return Tensor._make(np.array(loss), (logits,), backward, "nll")


# ----------------------------------------------------------------------------
# model wrapper
# ----------------------------------------------------------------------------

class MIGenModel:
    """Parameters plus configuration, with the forward passes as methods."""

    def __init__(self, config: ModelConfig, params: Optional[dict] = None):
        self.config = config.validate()
        self.params = params if params is not None else init_params(config)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self):
        return self.params.items()

    def n_params(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def copy(self) -> "MIGenModel":
        return MIGenModel(self.config, {k: Tensor(v.data.copy(), requires_grad=True) for k, v in self.params.items()})

    def encode(self, embeddings, rng=None) -> Tensor:
        return encoder_forward(project_input(embeddings, self.params, self.config), self.params, self.config, rng)

    def decode_logits(self, H: Tensor, prefixes, rng=None, record=None) -> Tensor:
        return decoder_forward(H, prefixes, self.params, self.config, rng, record)

    def report_loss(self, embeddings, ids, rng=None) -> Tensor:
        """Teacher-forced loss for one bag; ``ids`` is BOS ... EOS."""
        ids = np.asarray(ids, dtype=np.int64)[: self.config.max_report_len + 1]
        H = self.encode(embeddings, rng)
        logits = self.decode_logits(H, ids[None, :-1], rng)
        return nll_loss(logits, ids[None, 1:])

    def classify(self, embeddings, rng=None) -> Tensor:
        """Class logits from the encoded state of a prepended CLS token."""
        if self.config.n_classes <= 0:
            raise ContractError("model was built without a classifier head")
        x = project_input(embeddings, self.params, self.config)
        cls = self.params["cls"].reshape(1, self.config.d_model)
        H = encoder_forward(T.concat([cls, x], axis=0), self.params, self.config, rng)
        return _linear(T.take_rows(H, slice(0, 1)), self.params["clf.w"], self.params["clf.b"]).reshape(-1)


def classify(bag, model: MIGenModel) -> Tensor:
    return model.classify(bag.embeddings)


# ----------------------------------------------------------------------------
# checkpoints
# ----------------------------------------------------------------------------

CKPT_MAGIC = "MIGEN-CHECKPOINT 1"


def vocab_digest(itos) -> str:
    return hashlib.sha256("\n".join(itos).encode("utf-8")).hexdigest()


def write_tensor_file(path, header: dict, sections: dict[str, dict], arrays: dict[str, np.ndarray]) -> None:
    """Text header of ``[section]`` key = JSON value lines, then raw little-endian float64 blobs."""
    lines = [CKPT_MAGIC]
    for name, values in [("header", header)] + list(sections.items()):
        lines.append(f"[{name}]")
        for k in sorted(values):
            lines.append(f"{k} = {json.dumps(values[k], sort_keys=True)}")
    lines.append("[tensors]")
    for name, arr in arrays.items():
        lines.append(f"{name} {'x'.join(str(s) for s in arr.shape) or 'scalar'}")
    lines.append("[data]")
    blob = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays.values())
    Path(path).write_bytes(("\n".join(lines) + "\n").encode("utf-8") + blob)


def read_tensor_file(path) -> tuple[dict, dict[str, dict], dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    marker = b"\n[data]\n"
    cut = raw.find(marker)
    if not raw.startswith(CKPT_MAGIC.encode()) or cut < 0:
        raise FormatError(f"{path}: not a migen checkpoint")
    text = raw[:cut].decode("utf-8").split("\n")[1:]
    blob = raw[cut + len(marker):]
    sections: dict[str, dict] = {}
    specs: list[tuple[str, tuple[int, ...]]] = []
    current = None
    for line in text:
        if line.startswith("[") and line.endswith("]"):
            current = line[1:-1]
            sections.setdefault(current, {})
            continue
        if current == "tensors":
            name, dims = line.rsplit(" ", 1)
            specs.append((name, () if dims == "scalar" else tuple(int(s) for s in dims.split("x"))))
        elif current is not None:
            key, _, value = line.partition(" = ")
            try:
                sections[current][key] = json.loads(value)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: bad header line {line!r}") from exc
    expected = sum(int(np.prod(s)) for _, s in specs) * 8
    if expected != len(blob):
        raise FormatError(f"{path}: tensor data holds {len(blob)} bytes, header implies {expected}")
    arrays, offset = {}, 0
    for name, shape in specs:
        n = int(np.prod(shape))
        arrays[name] = np.frombuffer(blob, dtype="<f8", count=n, offset=offset * 8).astype(np.float64).reshape(shape)
        offset += n
    header = sections.pop("header", {})
    return header, sections, arrays


def save_checkpoint(model: MIGenModel, path, meta: Optional[dict] = None) -> None:
    write_tensor_file(path, {"kind": "model"}, {"config": model.config.to_dict(), "meta": meta or {}},
                      {k: v.data for k, v in model.params.items()})


def load_checkpoint(path) -> tuple[MIGenModel, dict]:
    header, sections, arrays = read_tensor_file(path)
    if header.get("kind") != "model":
        raise FormatError(f"{path}: not a model checkpoint")
    cfg = ModelConfig.from_dict(sections.get("config", {})).validate()
    shapes = param_shapes(cfg)
    if list(arrays) != list(shapes):
        missing = sorted(set(shapes) - set(arrays))
        extra = sorted(set(arrays) - set(shapes))
        raise FormatError(f"{path}: parameter set does not match config (missing {missing}, unexpected {extra})")
    for name, shape in shapes.items():
        if arrays[name].shape != shape:
            raise FormatError(f"{path}: parameter {name} has shape {arrays[name].shape}, config implies {shape}")
    params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
    return MIGenModel(cfg, params), sections.get("meta", {})
