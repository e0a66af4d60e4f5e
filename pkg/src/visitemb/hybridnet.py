"""CNN-over-text plus MLP-over-structured network, trained jointly on 19
multi-label targets; the visit embedding is the MLP hidden layer concatenated
with the CNN pooled features."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import numcore as nc
from .corpus import N_LABELS
from .errors import CheckpointError, ConfigError, ShapeError, TrainingError
from .featurize import PAD, EncodedStay

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"VEMBCKPT"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_structured: int
    word_dim: int = 50
    conv_widths: tuple = (3, 4, 5)
    channels_per_width: int = 64
    mlp_hidden: int = 256
    n_labels: int = N_LABELS
    dropout_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "conv_widths", tuple(int(w) for w in self.conv_widths))
        for name in ("vocab_size", "n_structured", "word_dim", "channels_per_width", "mlp_hidden", "n_labels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.vocab_size < 2:
            raise ConfigError("vocab_size must include PAD and UNK")
        if not self.conv_widths or min(self.conv_widths) <= 0:
            raise ConfigError("conv_widths must be non-empty positive integers")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout_rate must be in [0, 1)")

    @property
    def pooled_dim(self) -> int:
        return len(self.conv_widths) * self.channels_per_width

    @property
    def embedding_dim(self) -> int:
        return self.mlp_hidden + self.pooled_dim

    @property
    def min_len(self) -> int:
        return max(self.conv_widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_widths"] = list(self.conv_widths)
        return d

    @classmethod
    def from_dict(cls, d) -> "ModelConfig":
        return cls(**d)


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    shapes = {"embed": (config.vocab_size, config.word_dim)}
    for w in config.conv_widths:
        shapes[f"conv{w}.kernel"] = (w, config.word_dim, config.channels_per_width)
        shapes[f"conv{w}.bias"] = (config.channels_per_width,)
    shapes["text_out.weight"] = (config.n_labels, config.pooled_dim)
    shapes["text_out.bias"] = (config.n_labels,)
    shapes["mlp_hidden.weight"] = (config.mlp_hidden, config.n_structured)
    shapes["mlp_hidden.bias"] = (config.mlp_hidden,)
    shapes["mlp_out.weight"] = (config.n_labels, config.mlp_hidden)
    shapes["mlp_out.bias"] = (config.n_labels,)
    return shapes


def init_params(config: ModelConfig) -> dict[str, np.ndarray]:
    """Glorot-uniform weights, zero biases, small uniform word vectors, zero PAD row."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name == "embed":
            arr = rng.uniform(-0.05, 0.05, size=shape)
            arr[PAD] = 0.0
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            if len(shape) == 3:
                w, d, c = shape
                fan_in, fan_out = w * d, w * c
            else:
                fan_out, fan_in = shape
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            arr = rng.uniform(-limit, limit, size=shape)
        params[name] = arr
    return params


def check_params(params, config: ModelConfig) -> None:
    expected = param_shapes(config)
    if set(params) != set(expected):
        raise ShapeError(f"parameter names {sorted(params)} do not match config")
    for name, shape in expected.items():
        if params[name].shape != shape:
            raise ShapeError(f"{name}: shape {params[name].shape} != {shape}")


# -- batching ----------------------------------------------------------------


@dataclass
class Batch:
    tokens: np.ndarray  # (N,) int, all rows back to back, each left-padded to >= min_len
    starts: np.ndarray  # (B,) offset of each row in tokens
    lengths: np.ndarray  # (B,) length of each row
    structured: np.ndarray  # (B, n_structured)
    labels: np.ndarray  # (B, n_labels) float
    stay_ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.lengths)


def left_pad(token_ids: Sequence[int], min_len: int) -> list[int]:
    ids = list(token_ids)
    if len(ids) < min_len:
        ids = [PAD] * (min_len - len(ids)) + ids
    return ids


def make_batch(encoded: Sequence[EncodedStay], config: ModelConfig) -> Batch:
    rows = [left_pad(e.token_ids, config.min_len) for e in encoded]
    lengths = np.array([len(r) for r in rows], dtype=np.int64)
    starts = np.cumsum(lengths) - lengths
    tokens = np.array([t for r in rows for t in r], dtype=np.int64)
    structured = np.zeros((len(rows), config.n_structured))
    for i, e in enumerate(encoded):
        for c, v in e.structured.items():
            structured[i, c] = v
    labels = np.array([e.labels for e in encoded], dtype=np.float64).reshape(len(rows), -1)
    return Batch(tokens, starts, lengths, structured, labels, [e.stay_id for e in encoded])


# -- forward / backward ------------------------------------------------------


def _text_forward(params, config, tokens, starts, lengths):
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ShapeError("token id out of vocabulary range")
    # PAD positions read as zero whatever the table holds, so the PAD row has no gradient
    emb = params["embed"][tokens] * (tokens != PAD)[:, None]
    pooled, branches = [], []
    for w in config.conv_widths:
        # one convolution over the packed rows; windows that straddle two rows are never pooled
        pre = nc.conv1d_valid(emb, params[f"conv{w}.kernel"], params[f"conv{w}.bias"])
        act = nc.relu(pre)
        p, arg = nc.segment_max(act, starts, lengths - w + 1)
        pooled.append(p)
        branches.append((w, pre, arg))
    return emb, np.concatenate(pooled, axis=-1), branches


def forward(params, config: ModelConfig, batch: Batch, mode: str = "infer", rng=None):
    """Batched forward pass. Returns ``(out, cache)`` where ``out`` holds
    ``pooled``, ``hidden``, ``text_scores``, ``structured_scores``, ``scores`` and ``probs``."""
    if batch.structured.shape[-1] != config.n_structured:
        raise ShapeError(f"structured input width {batch.structured.shape[-1]} != {config.n_structured}")
    rate = config.dropout_rate
    emb, pooled, branches = _text_forward(params, config, batch.tokens, batch.starts, batch.lengths)
    pooled_d, mask_t = nc.dropout(pooled, rate, rng, mode)
    text_scores = nc.dense(pooled_d, params["text_out.weight"], params["text_out.bias"])

    hidden_pre = nc.dense(batch.structured, params["mlp_hidden.weight"], params["mlp_hidden.bias"])
    hidden = nc.relu(hidden_pre)
    hidden_d, mask_s = nc.dropout(hidden, rate, rng, mode)
    structured_scores = nc.dense(hidden_d, params["mlp_out.weight"], params["mlp_out.bias"])

    scores = text_scores + structured_scores
    out = {
        "pooled": pooled,
        "hidden": hidden,
        "text_scores": text_scores,
        "structured_scores": structured_scores,
        "scores": scores,
        "probs": nc.sigmoid(scores),
    }
    cache = dict(
        emb=emb, branches=branches, pooled_d=pooled_d, mask_t=mask_t,
        hidden_pre=hidden_pre, hidden_d=hidden_d, mask_s=mask_s,
    )
    return out, cache


def backward(params, config: ModelConfig, batch: Batch, cache, grad_scores) -> dict[str, np.ndarray]:
    grads = {}
    g_pd, grads["text_out.weight"], grads["text_out.bias"] = nc.dense_backward(
        grad_scores, cache["pooled_d"], params["text_out.weight"]
    )
    g_pooled = nc.dropout_backward(g_pd, cache["mask_t"])
    g_emb = np.zeros_like(cache["emb"])
    C = config.channels_per_width
    for j, (w, pre, arg) in enumerate(cache["branches"]):
        g_act = nc.segment_max_backward(g_pooled[:, j * C : (j + 1) * C], arg, len(pre))
        g_pre = nc.relu_backward(g_act, pre)
        g_e, grads[f"conv{w}.kernel"], grads[f"conv{w}.bias"] = nc.conv1d_valid_backward(
            g_pre, cache["emb"], params[f"conv{w}.kernel"]
        )
        g_emb += g_e
    g_table = np.zeros_like(params["embed"])
    np.add.at(g_table, batch.tokens, g_emb)
    g_table[PAD] = 0.0
    grads["embed"] = g_table

    g_hd, grads["mlp_out.weight"], grads["mlp_out.bias"] = nc.dense_backward(
        grad_scores, cache["hidden_d"], params["mlp_out.weight"]
    )
    g_hidden = nc.dropout_backward(g_hd, cache["mask_s"])
    g_pre = nc.relu_backward(g_hidden, cache["hidden_pre"])
    _, grads["mlp_hidden.weight"], grads["mlp_hidden.bias"] = nc.dense_backward(
        g_pre, batch.structured, params["mlp_hidden.weight"]
    )
    return grads


def batch_loss(probs, labels) -> float:
    """Mean over the batch of the per-stay summed binary cross-entropy."""
    return sum(nc.bce_sum(p, y) for p, y in zip(probs, labels)) / max(len(labels), 1)


def loss_and_grads(params, config: ModelConfig, batch: Batch, mode: str = "train", rng=None):
    out, cache = forward(params, config, batch, mode, rng)
    loss = batch_loss(out["probs"], batch.labels)
    # d(mean bce)/d(score) through the sigmoid
    grad_scores = (out["probs"] - batch.labels) / len(batch)
    return loss, backward(params, config, batch, cache, grad_scores)


# -- per-stay entry points ---------------------------------------------------


def forward_text(params, config: ModelConfig, token_ids, mode="infer", rng=None):
    """Returns ``(pooled, text_scores)`` for one token sequence."""
    ids = np.array(left_pad(token_ids, config.min_len), dtype=np.int64)
    _, pooled, _ = _text_forward(params, config, ids, np.array([0]), np.array([len(ids)]))
    dropped, _ = nc.dropout(pooled, config.dropout_rate, rng, mode)
    scores = nc.dense(dropped, params["text_out.weight"], params["text_out.bias"])
    return pooled[0], scores[0]


def forward_structured(params, config: ModelConfig, vector, mode="infer", rng=None):
    """Returns ``(hidden, structured_scores)`` for one dense structured vector."""
    x = np.asarray(vector, dtype=np.float64)
    if x.shape != (config.n_structured,):
        raise ShapeError(f"structured vector length {x.shape} != ({config.n_structured},)")
    hidden = nc.relu(nc.dense(x, params["mlp_hidden.weight"], params["mlp_hidden.bias"]))
    dropped, _ = nc.dropout(hidden, config.dropout_rate, rng, mode)
    return hidden, nc.dense(dropped, params["mlp_out.weight"], params["mlp_out.bias"])


def combine_and_predict(text_scores, structured_scores):
    t = np.asarray(text_scores, dtype=np.float64)
    s = np.asarray(structured_scores, dtype=np.float64)
    if t.shape != s.shape:
        raise ShapeError("score vectors differ in shape")
    return nc.sigmoid(t + s)


# -- training ----------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 3
    min_rel_improvement: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size <= 0 or self.max_epochs < 0 or self.patience < 1:
            raise ConfigError("invalid training configuration")


def _batches(encoded, config, batch_size, order=None):
    idx = np.arange(len(encoded)) if order is None else order
    for start in range(0, len(idx), batch_size):
        yield make_batch([encoded[i] for i in idx[start : start + batch_size]], config)


def evaluate_loss(params, config, encoded, batch_size=256) -> float:
    total, n = 0.0, 0
    for batch in _batches(encoded, config, batch_size):
        out, _ = forward(params, config, batch, "infer")
        total += batch_loss(out["probs"], batch.labels) * len(batch)
        n += len(batch)
    return total / n if n else float("nan")


def fit(train_encoded: Sequence[EncodedStay], config: ModelConfig, train_config: TrainConfig,
        val_encoded: Sequence[EncodedStay] = (), params=None):
    """Adam on mean batch loss with early stopping on the epoch-mean training loss.

    Returns ``(best_params, history)``.
    """
    if not train_encoded:
        raise TrainingError("empty training split")
    params = init_params(config) if params is None else {k: v.copy() for k, v in params.items()}
    check_params(params, config)
    if train_config.max_epochs == 0:
        return params, []
    rng = np.random.default_rng(train_config.seed)
    state = nc.AdamState(lr=train_config.lr)
    best_loss, best_params, stale = np.inf, params, 0
    history = []
    for epoch in range(1, train_config.max_epochs + 1):
        order = rng.permutation(len(train_encoded))
        total, n = 0.0, 0
        for bi, batch in enumerate(_batches(train_encoded, config, train_config.batch_size, order)):
            loss, grads = loss_and_grads(params, config, batch, "train", rng)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            params, state = nc.adam_step(params, grads, state)
            total += loss * len(batch)
            n += len(batch)
        train_loss = total / n
        val_loss = evaluate_loss(params, config, val_encoded) if len(val_encoded) else None
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss})
        log.info("epoch %d train_loss %.6f val_loss %s", epoch, train_loss, val_loss)
        if train_loss < best_loss * (1.0 - train_config.min_rel_improvement):
            best_loss, best_params, stale = train_loss, params, 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break
    return best_params, history


def train(dataset, splits, preprocessing, model_config: ModelConfig, train_config: TrainConfig):
    train_enc = preprocessing.encode_all(splits.stays(dataset, "train"))
    val_enc = preprocessing.encode_all(splits.stays(dataset, "validation"))
    return fit(train_enc, model_config, train_config, val_enc)


def model_config_for(preprocessing, **overrides) -> ModelConfig:
    return ModelConfig(vocab_size=preprocessing.vocab_size, n_structured=preprocessing.n_structured, **overrides)


# -- inference ---------------------------------------------------------------


def predict_proba(params, config, encoded: Sequence[EncodedStay], batch_size=256) -> np.ndarray:
    parts = [forward(params, config, b, "infer")[0]["probs"] for b in _batches(encoded, config, batch_size)]
    return np.concatenate(parts) if parts else np.zeros((0, config.n_labels))


def embed_encoded(params, config, encoded: Sequence[EncodedStay], batch_size=256) -> np.ndarray:
    """Inference-mode ``[hidden || pooled]`` rows, one per stay."""
    parts = []
    for b in _batches(encoded, config, batch_size):
        out, _ = forward(params, config, b, "infer")
        parts.append(np.concatenate([out["hidden"], out["pooled"]], axis=1))
    return np.concatenate(parts) if parts else np.zeros((0, config.embedding_dim))


def extract_embedding(params, config, preprocessing, stay) -> np.ndarray:
    return embed_encoded(params, config, [preprocessing.encode(stay)])[0]


def write_embeddings_csv(stay_ids, vectors, path) -> None:
    vectors = np.asarray(vectors)
    dim = vectors.shape[1] if vectors.ndim == 2 else 0
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(["stay_id"] + [f"e{i}" for i in range(dim)]) + "\n")
        for sid, row in zip(stay_ids, vectors):
            fh.write(sid + "," + ",".join(repr(float(x)) for x in row) + "\n")


def read_embeddings_csv(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if not header or header[0] != "stay_id":
            raise CheckpointError("embeddings CSV must start with a stay_id column")
        ids, rows = [], []
        for line in fh:
            parts = line.rstrip("\n").split(",")
            ids.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    return ids, np.array(rows).reshape(len(ids), len(header) - 1)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params, config: ModelConfig, preprocessing_sha256: str, path) -> None:
    """Write atomically: magic, version, JSON header, little-endian float64
    tensors, then a SHA-256 of everything before it."""
    check_params(params, config)
    names = list(param_shapes(config))
    header = {
        "config": config.to_dict(),
        "embedding_dim": config.embedding_dim,
        "preprocessing_sha256": preprocessing_sha256,
        "tensors": [{"name": n, "dims": list(params[n].shape)} for n in names],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = bytearray(CHECKPOINT_MAGIC)
    body += struct.pack("<IQ", CHECKPOINT_VERSION, len(hbytes))
    body += hbytes
    for n in names:
        body += np.ascontiguousarray(params[n], dtype="<f8").tobytes()
    body += hashlib.sha256(body).digest()
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(body)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path):
    """Returns ``(params, config, preprocessing_sha256)``."""
    blob = Path(path).read_bytes()
    head = len(CHECKPOINT_MAGIC) + 12
    if len(blob) < head + 32 or blob[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint or truncated")
    version, hlen = struct.unpack("<IQ", blob[len(CHECKPOINT_MAGIC) : head])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if hashlib.sha256(blob[:-32]).digest() != blob[-32:]:
        raise CheckpointError(f"{path}: checksum mismatch (truncated or corrupted)")
    try:
        header = json.loads(blob[head : head + hlen])
        config = ModelConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad header ({exc})") from None
    expected = param_shapes(config)
    offset = head + hlen
    params = {}
    for t in header["tensors"]:
        name, dims = t["name"], tuple(t["dims"])
        if expected.get(name) != dims:
            raise CheckpointError(f"{path}: tensor {name} dims {dims} inconsistent with config")
        count = int(np.prod(dims))
        end = offset + 8 * count
        if end > len(blob) - 32:
            raise CheckpointError(f"{path}: truncated tensor data for {name}")
        params[name] = np.frombuffer(blob[offset:end], dtype="<f8").astype(np.float64).reshape(dims)
        offset = end
    if offset != len(blob) - 32 or set(params) != set(expected):
        raise CheckpointError(f"{path}: tensor blocks do not match config")
    return params, config, header["preprocessing_sha256"]
