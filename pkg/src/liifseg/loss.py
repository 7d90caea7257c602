"""Training loss: temperature-scaled cross-entropy plus an edge-weighted term.

The edge term re-applies cross-entropy on the pixels that sit on ground-truth
label boundaries (any of the 8 neighbors carries a different label), weighted
by ``lam``. Boundary extraction happens at whatever resolution the labels
arrive in, i.e. after any mask resizing.
"""

import dataclasses

import numpy as np

from . import numerics as nx
from .errors import ConfigError, DataError

_NEIGHBOR_SHIFTS = tuple(
    (dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1) if (dy, dx) != (0, 0)
)


@dataclasses.dataclass
class LossConfig:
    lam: float = 10.0  # weight of the edge term
    tau: float = 0.5  # softmax temperature
    include_background_in_loss: bool = True

    def validate(self):
        if self.lam < 0:
            raise ConfigError(f"lam must be >= 0, got {self.lam}")
        if self.tau <= 0:
            raise ConfigError(f"tau must be > 0, got {self.tau}")


def extract_edges(labels):
    """Boolean H x W map, true where any 8-neighbor has a different label."""
    labels = np.asarray(labels)
    edges = np.zeros(labels.shape, dtype=bool)
    h, w = labels.shape
    for dy, dx in _NEIGHBOR_SHIFTS:
        ys = slice(max(0, -dy), h - max(0, dy))
        xs = slice(max(0, -dx), w - max(0, dx))
        ys2 = slice(max(0, dy), h - max(0, -dy))
        xs2 = slice(max(0, dx), w - max(0, -dx))
        edges[ys, xs] |= labels[ys, xs] != labels[ys2, xs2]
    return edges


def extract_edges_batch(labels):
    labels = np.asarray(labels)
    return np.stack([extract_edges(lab) for lab in labels], axis=0)


def _check_labels(logits, labels):
    labels = np.asarray(labels)
    n, c = logits.shape[0], logits.shape[1]
    if labels.shape != (n,) + logits.shape[2:]:
        raise DataError(
            f"labels shape {labels.shape} does not match logits shape {logits.shape}"
        )
    bad = (labels < 0) | (labels >= c)
    if bad.any():
        where = tuple(int(v) for v in np.argwhere(bad)[0])
        raise DataError(
            f"label {int(labels[where])} out of range [0, {c}) at pixel {where}"
        )
    return labels


def _pixel_nll(logits, labels, tau):
    logp = nx.log_softmax(logits, temperature=tau, axis=1)
    return nx.scale(nx.take_label_channel(logp, labels), -1.0)


def cross_entropy(logits, labels, tau=1.0):
    """Mean over all pixels of -log softmax(logits / tau)[label]."""
    labels = _check_labels(logits, labels)
    return nx.mean_all(_pixel_nll(logits, labels, tau))


def edge_cross_entropy(logits, labels, edges, tau=1.0):
    """Cross-entropy averaged over the masked (edge) pixels; 0 for an empty mask."""
    labels = _check_labels(logits, labels)
    edges = np.asarray(edges)
    if edges.shape != labels.shape:
        raise DataError(f"edge mask shape {edges.shape} does not match labels {labels.shape}")
    count = int(edges.sum())
    if count == 0:
        return nx.tensor(np.zeros((), dtype=logits.dtype))
    mask = nx.tensor(edges.astype(logits.dtype))
    masked = nx.mul(_pixel_nll(logits, labels, tau), mask)
    return nx.scale(nx.sum_all(masked), 1.0 / count)


def total_loss(logits, labels, cfg):
    """cross_entropy + lam * edge_cross_entropy, edges taken from the labels."""
    cfg.validate()
    labels = _check_labels(logits, labels)
    if not cfg.include_background_in_loss:
        keep = labels != 0
        if not keep.any():
            return nx.tensor(np.zeros((), dtype=logits.dtype))
        mask = nx.tensor(keep.astype(logits.dtype))
        base = nx.scale(nx.sum_all(nx.mul(_pixel_nll(logits, labels, cfg.tau), mask)), 1.0 / keep.sum())
    else:
        base = cross_entropy(logits, labels, cfg.tau)
    if cfg.lam == 0:
        return base
    edges = extract_edges_batch(labels)
    if not cfg.include_background_in_loss:
        edges &= labels != 0
    return nx.add(base, nx.scale(edge_cross_entropy(logits, labels, edges, cfg.tau), cfg.lam))
