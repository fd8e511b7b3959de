"""Multilayer perceptron with three sigmoid outputs (one per affinity edge).

Hidden units are rectified linear, training is plain minibatch SGD on a
masked cross-entropy loss with "inverse margin" targets, and dropout uses
inverted scaling so inference needs no rescaling.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

from ._chunked import chunked_matmul

log = logging.getLogger(__name__)

MODEL_MAGIC = b"DWMP"
MODEL_VERSION = 1
OUTPUT_EPS = 2.0**-24   # keeps float32 predictions strictly inside (0, 1)
LOG_FLOOR = 1e-12


class ModelFormatError(ValueError):
    pass


@dataclass
class MLPParams:
    """Weights ``W[l]`` of shape ``(sizes[l], sizes[l+1])`` and biases ``b[l]``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout_hidden: float = 0.5
    dropout_input: float = 0.0
    inverse_margin: float = 0.1

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (w.shape[1],):
                raise ValueError(f"layer {l}: bias {b.shape} vs weights {w.shape}")
            if l and w.shape[0] != self.weights[l - 1].shape[1]:
                raise ValueError(f"layer {l} input {w.shape[0]} != previous output")

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def astype(self, dtype) -> "MLPParams":
        return MLPParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases],
                         self.dropout_hidden, self.dropout_input, self.inverse_margin)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.02
    batch_size: int = 40
    updates: int = 500_000
    dropout_hidden: float = 0.5
    dropout_input: float = 0.0
    inverse_margin: float = 0.1
    hidden_units: int = 200
    hidden_layers: int = 1
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.learning_rate < 1:
            raise ValueError("learning_rate must be in [0, 1)")
        if not (0 <= self.dropout_hidden < 1 and 0 <= self.dropout_input < 1):
            raise ValueError("dropout rates must be in [0, 1)")
        if not 0 <= self.inverse_margin < 0.5:
            raise ValueError("inverse_margin must be in [0, 0.5)")
        if self.batch_size < 1 or self.updates < 0:
            raise ValueError("batch_size must be >= 1 and updates >= 0")
        if self.hidden_units < 1 or self.hidden_layers < 1:
            raise ValueError("need at least one hidden layer with one unit")

    def layer_sizes(self, d: int) -> list[int]:
        return [d] + [self.hidden_units] * self.hidden_layers + [3]


def init_params(sizes: Sequence[int], rng, config: TrainConfig | None = None) -> MLPParams:
    """Weights uniform in ``±1/sqrt(fan_in)``, zero biases (float64)."""
    config = config or TrainConfig()
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return MLPParams(weights, biases, config.dropout_hidden, config.dropout_input,
                     config.inverse_margin)


def dropout_masks(params: MLPParams, batch: int, rng) -> list[np.ndarray | None]:
    """Inverted-dropout multipliers for the input and every hidden layer."""
    rates = [params.dropout_input] + [params.dropout_hidden] * (len(params.weights) - 1)
    masks = []
    for rate, width in zip(rates, params.sizes[:-1]):
        if rate == 0:
            masks.append(None)
        else:
            keep = rng.random((batch, width)) >= rate
            masks.append(keep * (1.0 / (1.0 - rate)))
    return masks


def forward(params: MLPParams, x, masks: Sequence[np.ndarray | None] | None = None):
    """Return ``(activations, outputs)``.

    ``activations[l]`` is the (masked) input to weight layer ``l``;
    ``activations[0]`` is the input itself.
    """
    a = np.asarray(x)
    if not np.all(np.isfinite(a)):
        raise ValueError("non-finite input to forward")
    if a.shape[-1] != params.sizes[0]:
        raise ValueError(f"input length {a.shape[-1]} != {params.sizes[0]}")
    if masks is not None and masks[0] is not None:
        a = a * masks[0]
    acts = [a]
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w + b
        if l == last:
            return acts, expit(z)
        a = np.maximum(z, 0.0)
        if masks is not None and masks[l + 1] is not None:
            a = a * masks[l + 1]
        acts.append(a)
    raise AssertionError("unreachable")


def margin_targets(labels: np.ndarray, margin: float) -> tuple[np.ndarray, np.ndarray]:
    """Map ternary labels to ``(targets, valid)``: +1 -> 1-margin, -1 -> margin."""
    labels = np.asarray(labels)
    targets = np.where(labels > 0, 1.0 - margin, margin)
    return targets, labels != 0


def loss_and_gradient(params: MLPParams, x, targets, valid, masks=None):
    """Mean masked cross-entropy over valid outputs and its gradients.

    Returns ``(loss, (weight_grads, bias_grads))``.
    """
    acts, o = forward(params, x, masks)
    t = np.asarray(targets, dtype=o.dtype)
    v = np.asarray(valid, dtype=bool)
    n_valid = int(v.sum())
    gw = [np.zeros_like(w) for w in params.weights]
    gb = [np.zeros_like(b) for b in params.biases]
    if n_valid == 0:
        return 0.0, (gw, gb)
    ce = -(t * np.log(np.maximum(o, LOG_FLOOR)) + (1 - t) * np.log(np.maximum(1 - o, LOG_FLOOR)))
    loss = float(ce[v].sum() / n_valid)
    delta = np.where(v, o - t, 0.0) / n_valid
    for l in range(len(params.weights) - 1, -1, -1):
        gw[l] = acts[l].T @ delta
        gb[l] = delta.sum(axis=0)
        if l == 0:
            break
        delta = delta @ params.weights[l].T
        delta = delta * (acts[l] > 0)
        if masks is not None and masks[l] is not None:
            delta = delta * masks[l]
    return loss, (gw, gb)


class BalancedSampler:
    """Draws minibatches alternating between two record pools.

    The *negative* pool holds records with at least one negative labelled edge,
    the *positive* pool records whose labelled edges are all positive; records
    with no labelled edge are never drawn.  Within a pool, records are drawn
    with probability proportional to ``weights`` (LED multipliers).
    """

    def __init__(self, labels, weights=None, seed: int = 0):
        labels = np.asarray(labels)
        neg = (labels < 0).any(axis=1)
        pos = ~neg & (labels > 0).any(axis=1)
        if weights is None:
            weights = np.ones(len(labels))
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (len(labels),) or (weights < 1).any():
            raise ValueError("sampler weights must be >= 1, one per record")
        self.pools = [np.flatnonzero(neg), np.flatnonzero(pos)]
        if not any(len(p) for p in self.pools):
            raise ValueError("no labelled records to sample from")
        self._cum = [np.cumsum(weights[p]) for p in self.pools]
        self.rng = np.random.default_rng(seed)

    def _draw(self, pool: int, n: int) -> np.ndarray:
        cum = self._cum[pool]
        u = self.rng.random(n) * cum[-1]
        return self.pools[pool][np.minimum(np.searchsorted(cum, u, side="right"), len(cum) - 1)]

    def draw(self, batch: int) -> np.ndarray:
        """Record indices for one minibatch; even slots negative, odd slots positive."""
        if not len(self.pools[0]) or not len(self.pools[1]):
            return self._draw(0 if len(self.pools[0]) else 1, batch)
        out = np.empty(batch, dtype=np.int64)
        out[0::2] = self._draw(0, (batch + 1) // 2)
        out[1::2] = self._draw(1, batch // 2)
        return out


def train(features, labels, config: TrainConfig, weights=None,
          transform: Callable[[np.ndarray], np.ndarray] | None = None,
          sampler: BalancedSampler | None = None) -> MLPParams:
    """Run exactly ``config.updates`` SGD steps and return float32 parameters.

    ``features`` may be any array-like supporting fancy row indexing (e.g. a
    memory-mapped shard); ``transform`` is applied to each fetched batch.
    """
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("empty training source")
    rng = np.random.default_rng(config.seed)
    d = np.asarray(features[:1]).shape[1]
    params = init_params(config.layer_sizes(d), rng, config)
    sampler = sampler or BalancedSampler(labels, weights, seed=config.seed + 1)
    lr = config.learning_rate
    for step in range(config.updates):
        idx = sampler.draw(config.batch_size)
        x = np.asarray(features[idx], dtype=np.float64)
        if transform is not None:
            x = np.asarray(transform(x), dtype=np.float64)
        targets, valid = margin_targets(labels[idx], config.inverse_margin)
        masks = dropout_masks(params, len(idx), rng)
        loss, (gw, gb) = loss_and_gradient(params, x, targets, valid, masks)
        if lr:
            for l in range(len(gw)):
                params.weights[l] -= lr * gw[l]
                params.biases[l] -= lr * gb[l]
        if step and step % 10000 == 0:
            log.debug("update %d loss %.4f", step, loss)
    return params.astype(np.float32)


def predict(params: MLPParams, features) -> np.ndarray:
    """Inference-mode outputs ``(n, 3)`` as float32 strictly inside (0, 1)."""
    a = np.asarray(features, dtype=np.float32)
    if a.ndim == 1:
        return predict(params, a[None])[0]
    if a.shape[1] != params.sizes[0]:
        raise ValueError(f"feature length {a.shape[1]} != model input {params.sizes[0]}")
    last = len(params.weights) - 1
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = chunked_matmul(a, np.asarray(w, dtype=np.float32)) + np.asarray(b, dtype=np.float32)
        a = expit(z) if l == last else np.maximum(z, np.float32(0))
    return np.clip(a, OUTPUT_EPS, 1 - OUTPUT_EPS).astype(np.float32)


# ---------------------------------------------------------------------------
# file format


def save_mlp(params: MLPParams, path) -> None:
    sizes = params.sizes
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4sII", MODEL_MAGIC, MODEL_VERSION, len(params.weights)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(struct.pack("<3d", params.dropout_hidden, params.dropout_input,
                             params.inverse_margin))
        for w, b in zip(params.weights, params.biases):
            fh.write(np.asarray(w, "<f4").tobytes())
            fh.write(np.asarray(b, "<f4").tobytes())


def load_mlp(path) -> MLPParams:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"{path}: not an MLP model file")
    _, version, layers = struct.unpack_from("<4sII", raw)
    if version != MODEL_VERSION:
        raise ModelFormatError(f"{path}: unsupported version {version}")
    pos = 12
    if len(raw) < pos + 4 * (layers + 1) + 24:
        raise ModelFormatError(f"{path}: truncated header")
    sizes = struct.unpack_from(f"<{layers + 1}I", raw, pos)
    pos += 4 * (layers + 1)
    dh, di, margin = struct.unpack_from("<3d", raw, pos)
    pos += 24
    weights, biases = [], []
    expected = pos + 4 * sum(a * b + b for a, b in zip(sizes[:-1], sizes[1:]))
    if expected != len(raw):
        raise ModelFormatError(f"{path}: {len(raw)} bytes, header implies {expected}")
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        w = np.frombuffer(raw, "<f4", fan_in * fan_out, pos).reshape(fan_in, fan_out)
        pos += 4 * fan_in * fan_out
        b = np.frombuffer(raw, "<f4", fan_out, pos)
        pos += 4 * fan_out
        weights.append(w.astype(np.float32))
        biases.append(b.astype(np.float32))
    return MLPParams(weights, biases, dh, di, margin)
