"""Losses, optimizers, the training loop and the binary checkpoint format."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as T
from .model import Model, ModelConfig, build_model
from .tensor import ShapeError, Tensor

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SDEEP-CHECKPOINT\n"
CHECKPOINT_VERSION = 1
PROB_FLOOR = 1e-12


class TrainingDivergedError(RuntimeError):
    """A non-finite loss appeared during training."""


class CheckpointError(ValueError):
    """Checkpoint file is corrupt or of an unsupported version."""


@dataclass
class HyperParams:
    lambda_aux: Optional[float] = None  # None -> 0.5 with an auxiliary head, else 0
    learning_rate: float = 1e-3
    weight_decay: float = 1e-6
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    seed: int = 0
    optimizer: str = "adam"  # adam | adagrad

    def resolve(self, cfg: ModelConfig) -> "HyperParams":
        """Fill the auxiliary weight from the model and validate."""
        has_aux = cfg.attention_mode == "multi"
        lam = self.lambda_aux if self.lambda_aux is not None else (0.5 if has_aux else 0.0)
        if lam < 0:
            raise ValueError(f"lambda_aux must be >= 0, got {lam}")
        if lam > 0 and not has_aux:
            raise ValueError(
                f"lambda_aux={lam} requires an auxiliary head, but attention_mode={cfg.attention_mode!r}"
            )
        if self.learning_rate < 0 or self.weight_decay < 0:
            raise ValueError("learning_rate and weight_decay must be non-negative")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be positive")
        if self.optimizer not in ("adam", "adagrad"):
            raise ValueError(f"optimizer must be 'adam' or 'adagrad', got {self.optimizer!r}")
        return dataclasses.replace(self, lambda_aux=float(lam))


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _labels(labels, num_classes: int) -> np.ndarray:
    y = np.asarray(labels)
    if y.ndim != 1 or not np.issubdtype(y.dtype, np.integer):
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() >= num_classes):
        raise ValueError(f"label out of range [0, {num_classes}): min {y.min()}, max {y.max()}")
    return y


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean over rows of -log p[label], with p floored at 1e-12."""
    if probs.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (N, C) probabilities, got {probs.shape}")
    y = _labels(labels, probs.shape[1])
    if y.shape[0] != probs.shape[0]:
        raise ShapeError(f"cross_entropy: {probs.shape[0]} rows but {y.shape[0]} labels")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(y.size), y] = 1.0
    logp = T.log(T.clamp_min(probs, PROB_FLOOR))
    return T.neg(T.mean(T.sum_(T.mul(logp, onehot), axis=1)))


def multi_head_loss(main: Tensor, aux: Optional[Tensor], labels, lambda_aux: float) -> Tensor:
    """CE(main) + lambda * CE(aux); exactly CE(main) when there is no auxiliary head."""
    if lambda_aux > 0 and aux is None:
        raise ValueError(f"lambda_aux={lambda_aux} but the model produced no auxiliary output")
    loss = cross_entropy(main, labels)
    if lambda_aux > 0:
        loss = T.add(loss, T.mul(cross_entropy(aux, labels), lambda_aux))
    return loss


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------


@dataclass
class OptimizerState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


def _decayed(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], name: str, decay: float) -> np.ndarray:
    g = grads[name]
    p = params[name]
    if g.shape != p.shape:
        raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter has {p.shape}")
    return g + decay * p.data if decay else g


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
              hp: HyperParams) -> OptimizerState:
    """One bias-corrected Adam update with coupled L2 decay, applied in place."""
    state.step += 1
    c1 = 1.0 - ADAM_BETA1 ** state.step
    c2 = 1.0 - ADAM_BETA2 ** state.step
    for name, p in params.items():
        g = _decayed(params, grads, name, hp.weight_decay)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= ADAM_BETA1
        m += (1.0 - ADAM_BETA1) * g
        v *= ADAM_BETA2
        v += (1.0 - ADAM_BETA2) * (g * g)
        p.assign_(p.data - hp.learning_rate * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS))
    return state


def adagrad_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: OptimizerState,
                 hp: HyperParams) -> OptimizerState:
    state.step += 1
    for name, p in params.items():
        g = _decayed(params, grads, name, hp.weight_decay)
        acc = state.v.setdefault(name, np.zeros_like(p.data))
        acc += g * g
        p.assign_(p.data - hp.learning_rate * g / (np.sqrt(acc) + ADAM_EPS))
    return state


OPTIMIZERS = {"adam": adam_step, "adagrad": adagrad_step}


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass
class Checkpoint:
    config: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    epoch: int
    best_val_loss: float
    rng_state: dict
    metadata: dict = field(default_factory=dict)
    version: int = CHECKPOINT_VERSION

    def to_model(self) -> Model:
        model = build_model(self.config, seed=0)
        model.load_state_dict(self.params)
        return model


def _json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=True).encode("utf-8")


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in ck.params.values())
    header = {
        "config": ck.config.to_dict(),
        "epoch": int(ck.epoch),
        "best_val_loss": float(ck.best_val_loss),
        "rng_state": ck.rng_state,
        "metadata": ck.metadata,
        "manifest": [[name, list(a.shape)] for name, a in ck.params.items()],
        "payload_bytes": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hb = _json_bytes(header)
    return (
        CHECKPOINT_MAGIC
        + f"version: {ck.version}\n".encode()
        + f"header-bytes: {len(hb)}\n".encode()
        + hb
        + b"\n"
        + payload
    )


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(ck))


def _read_line(buf: bytes, pos: int, prefix: bytes) -> Tuple[bytes, int]:
    end = buf.find(b"\n", pos)
    if end < 0 or not buf.startswith(prefix, pos):
        raise CheckpointError(f"corrupt checkpoint: expected {prefix!r} line")
    return buf[pos + len(prefix) : end], end + 1


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        buf = fh.read()
    if not buf.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    raw, pos = _read_line(buf, pos, b"version: ")
    try:
        version = int(raw)
    except ValueError:
        raise CheckpointError(f"{path}: corrupt version field") from None
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    raw, pos = _read_line(buf, pos, b"header-bytes: ")
    try:
        hlen = int(raw)
        header = json.loads(buf[pos : pos + hlen].decode("utf-8"))
    except (ValueError, UnicodeDecodeError):
        raise CheckpointError(f"{path}: corrupt header") from None
    pos += hlen
    if buf[pos : pos + 1] != b"\n":
        raise CheckpointError(f"{path}: corrupt header terminator")
    payload = buf[pos + 1 :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']} (truncated?)"
        )
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError(f"{path}: payload checksum mismatch")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    offset = 0
    for name, shape in header["manifest"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset).astype(np.float64)
        params[name] = arr.reshape(shape)
        offset += 8 * count
    if offset != len(payload):
        raise CheckpointError(f"{path}: manifest does not cover the payload")
    return Checkpoint(
        config=ModelConfig.from_dict(header["config"]),
        params=params,
        epoch=header["epoch"],
        best_val_loss=header["best_val_loss"],
        rng_state=header["rng_state"],
        metadata=header["metadata"],
        version=version,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_accuracy")


def write_history_csv(history: List[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_COLUMNS)
        for rec in history:
            writer.writerow([rec.epoch] + [repr(float(getattr(rec, c))) for c in HISTORY_COLUMNS[1:]])


def _arrays(ds) -> Tuple[np.ndarray, np.ndarray]:
    if isinstance(ds, tuple):
        x, y = ds
    else:
        x, y = ds.series, ds.label
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.int64)


def evaluate_loss(model: Model, x: np.ndarray, y: np.ndarray, lambda_aux: float,
                  batch_size: int = 256) -> Tuple[float, float]:
    """Dataset-level (L_global, main-head accuracy) without dropout.

    Batch sums are accumulated in index order so the result is reproducible.
    """
    total, correct = 0.0, 0
    for start in range(0, len(x), batch_size):
        xb, yb = x[start : start + batch_size], y[start : start + batch_size]
        out = model.forward(xb)
        loss = multi_head_loss(out.main, out.aux, yb, lambda_aux)
        total += float(loss.data) * len(xb)
        correct += int((np.argmax(out.main.data, axis=1) == yb).sum())
    return total / len(x), correct / len(x)


def train(model: Model, train_set, val_set, hp: HyperParams,
          metadata: Optional[dict] = None) -> Tuple[Checkpoint, List[EpochRecord]]:
    """Fit ``model`` in place; return the minimum-validation-loss checkpoint and history.

    After the call the model holds the parameters of the last epoch run, not
    of the returned checkpoint.
    """
    cfg = model.cfg
    hp = hp.resolve(cfg)
    xt, yt = _arrays(train_set)
    xv, yv = _arrays(val_set)
    if len(xt) == 0 or len(xv) == 0:
        raise ValueError("train and validation sets must be non-empty")
    expected = (cfg.num_timesteps, cfg.num_channels)
    for name, x in (("train", xt), ("validation", xv)):
        if x.shape[1:] != expected:
            raise ShapeError(f"{name} series have shape {x.shape[1:]}, model expects {expected}")
    for name, y in (("train", yt), ("validation", yv)):
        _labels(y, cfg.num_classes)

    rng = np.random.default_rng(hp.seed)
    step_fn = OPTIMIZERS[hp.optimizer]
    state = OptimizerState()
    params = model.parameters()
    history: List[EpochRecord] = []
    best: Optional[Checkpoint] = None
    stale = 0
    meta = dict(metadata or {})
    meta["hyperparams"] = dataclasses.asdict(hp)

    for epoch in range(1, hp.max_epochs + 1):
        order = rng.permutation(len(xt))
        loss_sum, correct = 0.0, 0
        for start in range(0, len(order), hp.batch_size):
            idx = order[start : start + hp.batch_size]
            xb, yb = xt[idx], yt[idx]
            for p in params.values():
                p.zero_grad()
            out = model.forward(xb, rng=rng)
            loss = multi_head_loss(out.main, out.aux, yb, hp.lambda_aux)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingDivergedError(f"non-finite training loss at epoch {epoch}")
            T.backward(loss)
            step_fn(params, {k: p.grad for k, p in params.items()}, state, hp)
            bad = next((k for k, p in params.items() if not np.isfinite(p.data).all()), None)
            if bad is not None:
                raise TrainingDivergedError(f"parameter {bad} became non-finite at epoch {epoch}")
            loss_sum += value * len(idx)
            correct += int((np.argmax(out.main.data, axis=1) == yb).sum())
        val_loss, val_acc = evaluate_loss(model, xv, yv, hp.lambda_aux)
        if not math.isfinite(val_loss):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, loss_sum / len(xt), correct / len(xt), val_loss, val_acc)
        history.append(rec)
        logger.info("epoch %d train_loss=%.5f val_loss=%.5f val_acc=%.4f",
                    epoch, rec.train_loss, val_loss, val_acc)
        if best is None or val_loss < best.best_val_loss:
            best = Checkpoint(
                config=cfg,
                params=model.state_dict(),
                epoch=epoch,
                best_val_loss=val_loss,
                rng_state=rng.bit_generator.state,
                metadata=meta,
            )
            stale = 0
        else:
            stale += 1
            if stale >= hp.patience:
                logger.info("stopping after %d epochs without improvement", stale)
                break
    return best, history
