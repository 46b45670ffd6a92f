"""Item embeddings, session encoders, decoders and the ``CORM1`` checkpoint.

Encoders:

* ``ave``: session = mean of its item embeddings.
* ``trm``: a self-attention stack produces one score per position; the
  softmax of those scores weights the *input* item embeddings.
* ``nonlinear``: the same stack, but the session is the stack output at the
  last real position (the usual SASRec readout), so it leaves item space.

Decoders: ``rdm`` scores candidates by cosine/temperature with dropout on the
candidate matrix during training; ``dot`` uses plain dot products.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .attention import MASKED, init_stack, run_stack
from .data import Batch
from .errors import ChecksumError, ConfigError, ContractError
from .tensor import (
    Tensor,
    cosine_rows,
    cross_entropy_from_logits,
    dropout,
    embedding_lookup,
    matmul,
    softmax,
    swap_last,
    take,
    where,
)

ENCODERS = ("ave", "trm", "nonlinear")
DECODERS = ("rdm", "dot")
CHECKPOINT_MAGIC = b"CORM1"


@dataclass
class ModelConfig:
    d: int = 100
    encoder: str = "trm"
    n_layers: int = 2
    n_heads: int = 2
    d_ff: int = 256
    d_weight: Optional[int] = None  # width d' of the features scored by w; None means d
    decoder: str = "rdm"
    tau: float = 0.07
    rho: float = 0.2
    max_len: int = 50
    hidden_dropout: float = 0.2
    causal: bool = False
    init_std: float = 0.02

    def __post_init__(self):
        if self.d <= 0:
            raise ConfigError(f"d must be positive, got {self.d}")
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.decoder not in DECODERS:
            raise ConfigError(f"decoder must be one of {DECODERS}, got {self.decoder!r}")
        if not self.tau > 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if not 0.0 <= self.rho < 1.0:
            raise ConfigError(f"rho must lie in [0, 1), got {self.rho}")
        if not 0.0 <= self.hidden_dropout < 1.0:
            raise ConfigError(f"hidden_dropout must lie in [0, 1), got {self.hidden_dropout}")
        if self.n_heads < 1 or self.d % self.n_heads:
            raise ConfigError(f"d={self.d} is not divisible by n_heads={self.n_heads}")
        if self.n_layers < 1 or self.d_ff < 1 or self.max_len < 1:
            raise ConfigError("n_layers, d_ff and max_len must be positive")
        if self.d_weight is not None and self.d_weight <= 0:
            raise ConfigError(f"d_weight must be positive, got {self.d_weight}")

    @property
    def feature_width(self) -> int:
        return self.d if self.d_weight is None else self.d_weight

    def replace(self, **changes) -> "ModelConfig":
        return ModelConfig(**{**asdict(self), **changes})


class ModelState:
    """Parameters of one model, keyed by name in a fixed order."""

    def __init__(self, config: ModelConfig, n_items: int, params: dict):
        self.config = config
        self.n_items = n_items
        self.params = params

    @property
    def item_embedding(self) -> Tensor:
        return self.params["item_embedding"]

    @property
    def pad_index(self) -> int:
        return self.n_items

    def copy(self) -> "ModelState":
        return ModelState(
            self.config,
            self.n_items,
            {k: Tensor(v.data, requires_grad=v.requires_grad) for k, v in self.params.items()},
        )

    def snapshot(self) -> dict:
        return {k: v.data.copy() for k, v in self.params.items()}

    def restore(self, snapshot: dict) -> None:
        for k, arr in snapshot.items():
            self.params[k].data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def init_state(config: ModelConfig, n_items: int, rng: np.random.Generator) -> ModelState:
    if n_items < 1:
        raise ConfigError(f"need at least one item, got {n_items}")
    d, std = config.d, config.init_std
    table = rng.normal(0.0, std, size=(n_items + 1, d))
    table[n_items] = 0.0
    params = {"item_embedding": Tensor(table, requires_grad=True)}
    if config.encoder in ("trm", "nonlinear"):
        init_stack(params, rng, d, config.d_ff, config.n_layers, config.max_len, std)
    if config.encoder == "trm":
        if config.d_weight is not None and config.d_weight != d:
            params["projection"] = Tensor(rng.normal(0.0, std, size=(d, config.d_weight)), requires_grad=True)
        params["weight_vector"] = Tensor(rng.normal(0.0, std, size=config.feature_width), requires_grad=True)
    return ModelState(config, n_items, params)


@dataclass
class SessionEncoding:
    h_s: Tensor  # B×d
    alpha: Optional[Tensor]  # B×L, None for the nonlinear readout


def _check_width(batch: Batch, state: ModelState) -> None:
    if batch.items.shape[1] > state.config.max_len:
        raise ContractError(
            f"prefix width {batch.items.shape[1]} exceeds max_len={state.config.max_len}; truncate first"
        )


def _convex_combine(H: Tensor, alpha: Tensor) -> Tensor:
    """``sum_i alpha_i H_i`` written as ``H_0 + sum_i alpha_i (H_i - H_0)``.

    Equal when ``alpha`` sums to one; the anchored form keeps sessions of a
    single repeated item bit-exact.
    """
    B, L, d = H.shape
    anchor = take(H, (slice(None), 0))
    offsets = H - anchor.reshape(B, 1, d)
    return anchor + matmul(alpha.reshape(B, 1, L), offsets).reshape(B, d)


def encode_rce_ave(batch: Batch, state: ModelState) -> SessionEncoding:
    _check_width(batch, state)
    H = embedding_lookup(state.item_embedding, batch.items)
    alpha = Tensor(batch.mask / batch.lengths[:, None].astype(np.float64))
    return SessionEncoding(_convex_combine(H, alpha), alpha)


def _features(H: Tensor, batch: Batch, state: ModelState, training: bool, rng) -> Tensor:
    cfg = state.config
    return run_stack(
        H, batch.mask, state.params, cfg.n_layers, cfg.n_heads, cfg.hidden_dropout, cfg.causal, training, rng
    )


def encode_rce_trm(batch: Batch, state: ModelState, training: bool = False, rng=None) -> SessionEncoding:
    _check_width(batch, state)
    H = embedding_lookup(state.item_embedding, batch.items)
    F = _features(H, batch, state, training, rng)
    if "projection" in state.params:
        F = matmul(F, state.params["projection"])
    B, L = batch.items.shape
    w = state.params["weight_vector"].reshape(state.config.feature_width, 1)
    scores = matmul(F, w).reshape(B, L)
    alpha = softmax(where(batch.mask, scores, MASKED), axis=1)
    # combine the raw item embeddings, not the stack features
    return SessionEncoding(_convex_combine(H, alpha), alpha)


def encode_nonlinear_baseline(batch: Batch, state: ModelState, training: bool = False, rng=None) -> SessionEncoding:
    _check_width(batch, state)
    H = embedding_lookup(state.item_embedding, batch.items)
    F = _features(H, batch, state, training, rng)
    last = take(F, (np.arange(len(batch)), batch.lengths - 1))
    return SessionEncoding(last, None)


def encode(batch: Batch, state: ModelState, training: bool = False, rng=None) -> SessionEncoding:
    kind = state.config.encoder
    if kind == "ave":
        return encode_rce_ave(batch, state)
    if kind == "trm":
        return encode_rce_trm(batch, state, training, rng)
    return encode_nonlinear_baseline(batch, state, training, rng)


def _candidates(state: ModelState) -> Tensor:
    return take(state.item_embedding, slice(0, state.n_items))


def rdm_loss(
    h_s: Tensor,
    targets,
    state: ModelState,
    tau: Optional[float] = None,
    rho: Optional[float] = None,
    training: bool = False,
    rng=None,
) -> Tensor:
    """Cross-entropy over cosine/tau logits against dropped-out candidates.

    One dropout draw is shared by the whole candidate matrix, target row included.
    """
    tau = state.config.tau if tau is None else tau
    rho = state.config.rho if rho is None else rho
    if not tau > 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    cand = dropout(_candidates(state), rho, training, rng)
    logits = cosine_rows(h_s, cand) * (1.0 / tau)
    return cross_entropy_from_logits(logits, targets)


def dot_loss(h_s: Tensor, targets, state: ModelState) -> Tensor:
    logits = matmul(h_s, swap_last(_candidates(state)))
    return cross_entropy_from_logits(logits, targets)


def score_all(h_s: Tensor, state: ModelState, decoder: Optional[str] = None) -> Tensor:
    """Logits for every real item (padding excluded), evaluation mode."""
    decoder = decoder or state.config.decoder
    cand = _candidates(state)
    if decoder == "rdm":
        return cosine_rows(h_s, cand) * (1.0 / state.config.tau)
    if decoder == "dot":
        return matmul(h_s, swap_last(cand))
    raise ConfigError(f"decoder must be one of {DECODERS}, got {decoder!r}")


def batch_loss(batch: Batch, state: ModelState, training: bool = False, rng=None) -> Tensor:
    enc = encode(batch, state, training, rng)
    if state.config.decoder == "rdm":
        return rdm_loss(enc.h_s, batch.targets, state, training=training, rng=rng)
    return dot_loss(enc.h_s, batch.targets, state)


# ---------------------------------------------------------------------------
# CORM1 checkpoint


def checkpoint_to_bytes(state: ModelState, meta: Optional[dict] = None) -> bytes:
    header = {"config": asdict(state.config), "n_items": state.n_items, "meta": meta or {}}
    block = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<Q", len(block)), block, struct.pack("<Q", len(state.params))]
    for name, t in state.params.items():
        raw = name.encode("utf-8")
        parts.append(struct.pack("<Q", len(raw)) + raw)
        parts.append(struct.pack("<Q", t.ndim) + struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return b"".join(parts)


def checkpoint_from_bytes(buf: bytes) -> tuple:
    """Return ``(state, meta)``."""
    pos = 0

    def take_bytes(n):
        nonlocal pos
        if pos + n > len(buf):
            raise ChecksumError("truncated checkpoint")
        out = buf[pos : pos + n]
        pos += n
        return out

    def u64():
        return struct.unpack("<Q", take_bytes(8))[0]

    if take_bytes(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise ChecksumError("not a CORM1 checkpoint (bad magic)")
    header = json.loads(take_bytes(u64()).decode("utf-8"))
    known = {f.name for f in fields(ModelConfig)}
    config = ModelConfig(**{k: v for k, v in header["config"].items() if k in known})
    params = {}
    for _ in range(u64()):
        name = take_bytes(u64()).decode("utf-8")
        ndim = u64()
        shape = struct.unpack(f"<{ndim}Q", take_bytes(8 * ndim))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take_bytes(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        params[name] = Tensor(arr, requires_grad=True)
    if pos != len(buf):
        raise ChecksumError(f"{len(buf) - pos} trailing bytes in checkpoint")
    return ModelState(config, header["n_items"], params), header.get("meta", {})


def save_checkpoint(path, state: ModelState, meta: Optional[dict] = None) -> None:
    Path(path).write_bytes(checkpoint_to_bytes(state, meta))


def load_checkpoint(path) -> tuple:
    return checkpoint_from_bytes(Path(path).read_bytes())
