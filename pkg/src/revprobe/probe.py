"""Linear probes trained with mini-batch SGD with momentum.

The reverse probe maps binary concept vectors to cluster logits; its held-out
cross-entropy bounds the conditional entropy of the clusters given the
concepts. Forward probes map features to one binary attribute each.
"""

from __future__ import annotations

import json
import logging
import struct
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import ConceptMatrix, FeatureMatrix, SplitIndices, _frozen
from .errors import ArgumentError, ConstructionError, DegenerateAttribute, DivergenceError, FormatError

log = logging.getLogger("revprobe")

PROBE_MAGIC = b"RPLP"
_PROBE_HEADER = struct.Struct("<4sIQQ")


@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 100
    batch_size: int = 512
    lr: float = 3.5
    momentum: float = 0.9
    lr_drop_epochs: tuple = (60, 80)
    lr_drop_factor: float = 0.1
    weight_decay: float = 3e-6
    seed: int = 0
    select_by_val: bool = True

    def __post_init__(self):
        drops = tuple(int(e) for e in self.lr_drop_epochs)
        object.__setattr__(self, "lr_drop_epochs", drops)
        if self.epochs < 0 or self.batch_size < 1:
            raise ConstructionError("epochs must be >= 0 and batch_size >= 1")
        if not self.lr > 0:
            raise ConstructionError("lr must be positive")
        if not 0 <= self.momentum < 1:
            raise ConstructionError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ConstructionError("weight_decay must be non-negative")
        if any(b <= a for a, b in zip(drops, drops[1:])):
            raise ConstructionError("lr_drop_epochs must be strictly increasing")
        # epochs == 0 is the untrained probe, whatever the schedule says
        if self.epochs and drops and (drops[0] < 0 or drops[-1] >= self.epochs):
            raise ConstructionError("lr_drop_epochs must lie in [0, epochs)")

    def lr_at(self, epoch: int) -> float:
        n_drops = sum(1 for e in self.lr_drop_epochs if epoch >= e)
        return self.lr * self.lr_drop_factor ** n_drops

    def to_dict(self) -> dict:
        d = asdict(self)
        d["lr_drop_epochs"] = list(self.lr_drop_epochs)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ProbeConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class ReverseProbe:
    weights: np.ndarray
    bias: np.ndarray
    config: ProbeConfig = field(default_factory=ProbeConfig)
    # (train cross-entropy, val cross-entropy) per epoch, nats
    train_history: tuple = ()
    best_epoch: int | None = None
    concept_names: tuple = ()

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        b = np.asarray(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.shape != (w.shape[0],):
            raise ConstructionError(f"weights {w.shape} and bias {b.shape} do not match")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ConstructionError("probe parameters must be finite")
        object.__setattr__(self, "weights", _frozen(w))
        object.__setattr__(self, "bias", _frozen(b))
        object.__setattr__(self, "train_history", tuple(tuple(h) for h in self.train_history))
        object.__setattr__(self, "concept_names", tuple(self.concept_names))

    @property
    def k(self) -> int:
        return self.weights.shape[0]

    @property
    def m(self) -> int:
        return self.weights.shape[1]


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-sample ``-ln q(target | x)`` in nats."""
    return -log_softmax(logits)[np.arange(len(targets)), targets]


def mean_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> float:
    """Mean of :func:`cross_entropy`, shifted by the first term (exact for constant losses)."""
    ce = cross_entropy(logits, targets)
    return float(ce[0] + np.mean(ce - ce[0]))


def objective(weights, bias, x, targets, weight_decay=0.0) -> float:
    """Mean softmax cross-entropy plus ``weight_decay / 2 * ||weights||^2``."""
    logits = x @ weights.T + bias
    return float(cross_entropy(logits, targets).mean() + 0.5 * weight_decay * np.sum(weights * weights))


def softmax_gradient(weights, bias, x, targets, weight_decay=0.0):
    """Analytic gradient of :func:`objective` with respect to (weights, bias)."""
    n = x.shape[0]
    if n == 0:
        raise ArgumentError("gradient needs a non-empty batch")
    delta = softmax(x @ weights.T + bias)
    delta[np.arange(n), targets] -= 1.0
    delta /= n
    return delta.T @ x + weight_decay * weights, delta.sum(axis=0)


def gradient(p: ReverseProbe, concepts, targets):
    """Gradient of the training objective at the probe's parameters."""
    x = _concept_array(concepts)
    return softmax_gradient(p.weights, p.bias, x, np.asarray(targets), p.config.weight_decay)


def _concept_array(concepts) -> np.ndarray:
    if isinstance(concepts, ConceptMatrix):
        return concepts.bits.astype(np.float64)
    if isinstance(concepts, FeatureMatrix):
        return concepts.values.astype(np.float64)
    return np.asarray(concepts, dtype=np.float64)


def _mean_ce(w, b, x, t) -> float:
    if len(t) == 0:
        return float("nan")
    return mean_cross_entropy(x @ w.T + b, t)


def _fit_softmax(x, targets, n_classes, train_idx, val_idx, config: ProbeConfig):
    """SGD-with-momentum fit of a multinomial logistic model from zero init.

    Returns ``(weights, bias, history, best_epoch)``. With val selection the
    zero initialization competes too, as ``best_epoch = -1``; it wins only
    when every epoch is worse than the uniform posterior.
    """
    n_in = x.shape[1]
    w = np.zeros((n_classes, n_in))
    b = np.zeros(n_classes)
    vw = np.zeros_like(w)
    vb = np.zeros_like(b)
    train_idx = np.asarray(train_idx, dtype=np.int64)
    val_idx = np.asarray(val_idx, dtype=np.int64)
    if train_idx.size == 0:
        raise ArgumentError("training split is empty")
    x_tr, t_tr = x[train_idx], targets[train_idx]
    x_va, t_va = x[val_idx], targets[val_idx]
    rng = np.random.default_rng(config.seed)
    mu, wd, bs = config.momentum, config.weight_decay, config.batch_size

    history = []
    best = (np.inf, w.copy(), b.copy(), None)
    if config.select_by_val and val_idx.size and config.epochs:
        best = (_mean_ce(w, b, x_va, t_va), w.copy(), b.copy(), -1)
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(train_idx.size)
        with np.errstate(over="ignore", invalid="ignore"):
            for lo in range(0, order.size, bs):
                sel = order[lo:lo + bs]
                gw, gb = softmax_gradient(w, b, x_tr[sel], t_tr[sel], wd)
                vw = mu * vw + gw
                vb = mu * vb + gb
                w -= lr * vw
                b -= lr * vb
            train_ce = _mean_ce(w, b, x_tr, t_tr)
            val_ce = _mean_ce(w, b, x_va, t_va)
        if not np.isfinite(train_ce) or not (np.isfinite(val_ce) or val_idx.size == 0):
            raise DivergenceError(epoch, lr)
        history.append((train_ce, val_ce))
        if config.select_by_val and val_idx.size and val_ce < best[0]:
            best = (val_ce, w.copy(), b.copy(), epoch)

    if config.select_by_val and best[3] is not None:
        if best[3] == -1:
            log.warning("no epoch beat the zero initialization on validation; "
                        "the learning rate %g is probably too high for these inputs", config.lr)
        return best[1], best[2], history, best[3]
    return w, b, history, (config.epochs - 1 if config.epochs else None)


def train_reverse_probe(concepts: ConceptMatrix, targets, splits: SplitIndices,
                        config: ProbeConfig | None = None, k: int | None = None) -> ReverseProbe:
    """Fit the concepts -> cluster probe on ``splits.train``.

    ``targets`` is a ClusterAssignment or an integer label vector; ``k``
    defaults to the assignment's cluster count.
    """
    config = config or ProbeConfig()
    labels = np.asarray(getattr(targets, "labels", targets), dtype=np.int64)
    k = k if k is not None else getattr(targets, "k", int(labels.max()) + 1)
    x = _concept_array(concepts)
    if x.shape[0] != labels.size:
        raise ArgumentError(f"{x.shape[0]} concept rows for {labels.size} targets")
    if labels.min() < 0 or labels.max() >= k:
        raise ArgumentError(f"targets must lie in [0, {k})")
    w, b, history, best_epoch = _fit_softmax(x, labels, k, splits.train, splits.val, config)
    names = concepts.concept_names if isinstance(concepts, ConceptMatrix) else ()
    return ReverseProbe(w, b, config, tuple(history), best_epoch, names)


def probe_logits(p: ReverseProbe, concepts, idx=None) -> np.ndarray:
    x = _concept_array(concepts)
    if x.ndim != 2 or x.shape[1] != p.m:
        raise ArgumentError(f"probe expects {p.m} concepts, got {x.shape[-1]}")
    if idx is not None:
        x = x[np.asarray(idx)]
    return x @ p.weights.T + p.bias


def predict(p: ReverseProbe, concepts, idx=None) -> np.ndarray:
    return np.argmax(probe_logits(p, concepts, idx), axis=1)


# --------------------------------------------------------------------------
# forward probes


@dataclass(frozen=True)
class ForwardProbeSet:
    attribute_ids: tuple
    attribute_names: tuple
    # per attribute: (weights 2 x D, bias 2), or None when degenerate
    classifiers: tuple
    accuracies: tuple
    degenerate: tuple = ()

    def accuracy(self, name_or_id) -> float:
        key = self.attribute_names if isinstance(name_or_id, str) else self.attribute_ids
        return self.accuracies[list(key).index(name_or_id)]


def train_forward_probes(features: FeatureMatrix, concepts: ConceptMatrix, attribute_ids: Sequence[int],
                         splits: SplitIndices, config: ProbeConfig | None = None) -> ForwardProbeSet:
    """One binary logistic classifier per attribute; accuracy is on ``splits.test``."""
    config = config or ProbeConfig()
    if features.n_samples != concepts.n_samples:
        raise ArgumentError("features and concepts are not aligned")
    x = features.values.astype(np.float64)
    classifiers, accs, degenerate = [], [], []
    for a in attribute_ids:
        y = concepts.bits[:, a].astype(np.int64)
        y_train = y[splits.train]
        if y_train.min() == y_train.max():
            warnings.warn(f"attribute {concepts.concept_names[a]!r} is constant on the train split",
                          DegenerateAttribute, stacklevel=2)
            degenerate.append(int(a))
            classifiers.append(None)
            accs.append(float(np.mean(y[splits.test] == y_train[0])))
            continue
        w, b, _, _ = _fit_softmax(x, y, 2, splits.train, splits.val, config)
        pred = np.argmax(x[splits.test] @ w.T + b, axis=1)
        classifiers.append((w, b))
        accs.append(float(np.mean(pred == y[splits.test])))
    names = tuple(concepts.concept_names[a] for a in attribute_ids)
    return ForwardProbeSet(tuple(int(a) for a in attribute_ids), names, tuple(classifiers),
                           tuple(accs), tuple(degenerate))


# --------------------------------------------------------------------------
# serialization


def save_probe(p: ReverseProbe, path) -> None:
    blob = json.dumps({
        "config": p.config.to_dict(),
        "train_history": [list(h) for h in p.train_history],
        "best_epoch": p.best_epoch,
        "concept_names": list(p.concept_names),
    }).encode("utf-8")
    parts = [
        _PROBE_HEADER.pack(PROBE_MAGIC, 1, p.k, p.m),
        p.weights.astype("<f8").tobytes(order="C"),
        p.bias.astype("<f8").tobytes(),
        struct.pack("<Q", len(blob)),
        blob,
    ]
    Path(path).write_bytes(b"".join(parts))


def load_probe(path) -> ReverseProbe:
    raw = Path(path).read_bytes()
    if len(raw) < _PROBE_HEADER.size:
        raise FormatError(f"{path}: file too short for an RPLP header")
    magic, version, k, m = _PROBE_HEADER.unpack_from(raw)
    if magic != PROBE_MAGIC or version != 1:
        raise FormatError(f"{path}: not an RPLP v1 file")
    pos = _PROBE_HEADER.size
    n_params = k * m + k
    if len(raw) < pos + 8 * n_params + 8:
        raise FormatError(f"{path}: truncated parameters")
    params = np.frombuffer(raw, dtype="<f8", count=n_params, offset=pos).astype(np.float64)
    pos += 8 * n_params
    (blob_len,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    if len(raw) != pos + blob_len:
        raise FormatError(f"{path}: config blob length mismatch")
    try:
        meta = json.loads(raw[pos:].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: bad config blob ({exc})") from None
    return ReverseProbe(
        params[:k * m].reshape(k, m), params[k * m:],
        ProbeConfig.from_dict(meta.get("config", {})),
        tuple(tuple(h) for h in meta.get("train_history", [])),
        meta.get("best_epoch"),
        tuple(meta.get("concept_names", [])),
    )
