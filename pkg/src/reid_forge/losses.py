"""Loss stack: part-weighted grid construction, batch-hard triplet, classification
terms, and the multi-task combination."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .data import BoundingBox
from .errors import ConfigurationError, ContractError
from .tensor import Tensor

# Distances pass through sqrt; this keeps the derivative finite at zero
# without moving any loss value at the 1e-12 comparison scale.
_DIST_EPS = 1e-24

LOSS_TERM_KEYS = (
    "triplet_avg",
    "triplet_weighted",
    "id_ce",
    "color_ce",
    "type_ce",
    "attr_bce",
    "contrastive",
)

# Binding config-file spelling of each term weight.
CONFIG_WEIGHT_KEYS = {
    "w_triplet_avg": "triplet_avg",
    "w_triplet_dp": "triplet_weighted",
    "w_id": "id_ce",
    "w_color": "color_ce",
    "w_type": "type_ce",
    "w_attr": "attr_bce",
    "w_contrastive": "contrastive",
}

VARIANT_WEIGHTS = {
    "triplet-only": {"triplet_avg": 1.0},
    "contrastive-only": {"contrastive": 1.0},
    "id-only": {"id_ce": 1.0},
    "triplet+id": {"triplet_avg": 1.0, "id_ce": 1.0},
    "multi-task": {
        "triplet_avg": 1.0,
        "id_ce": 1.0,
        "color_ce": 1.0,
        "type_ce": 1.0,
        "attr_bce": 1.0,
    },
    "multi-task+dp": {
        "triplet_avg": 1.0,
        "triplet_weighted": 1.0,
        "id_ce": 1.0,
        "color_ce": 1.0,
        "type_ce": 1.0,
        "attr_bce": 1.0,
    },
}


@dataclass(frozen=True)
class WeightMatrix:
    """Per-cell pooling weights over the feature grid; cells are 1 or gamma."""

    grid: np.ndarray
    gamma: float

    def __post_init__(self):
        if self.gamma <= 0:
            raise ContractError(f"gamma must be positive, got {self.gamma}")
        ok = np.isclose(self.grid, 1.0) | np.isclose(self.grid, self.gamma)
        if not ok.all():
            raise ContractError("weight grid cells must be 1 or gamma")


def build_weight_matrix(
    boxes: list[BoundingBox],
    image_size: int,
    grid_size: int,
    gamma: float,
) -> WeightMatrix:
    """Cell gets weight gamma iff its center (in image coordinates) falls inside
    at least one part box, else 1. No boxes means an all-ones grid."""
    if gamma < 1.0:
        raise ContractError(f"gamma must be >= 1, got {gamma}")
    if image_size % grid_size != 0:
        raise ConfigurationError(
            f"grid of {grid_size} does not evenly tile a {image_size} px image"
        )
    cell = image_size / grid_size
    grid = np.ones((grid_size, grid_size), dtype=np.float64)
    for box in boxes:
        if box.x_max > image_size or box.y_max > image_size:
            raise ContractError(f"box {box.as_list()} exceeds the {image_size} px image")
    if gamma == 1.0 or not boxes:
        return WeightMatrix(grid=grid, gamma=gamma)
    for row in range(grid_size):
        cy = (row + 0.5) * cell
        for col in range(grid_size):
            cx = (col + 0.5) * cell
            if any(b.contains_point(cx, cy) for b in boxes):
                grid[row, col] = gamma
    return WeightMatrix(grid=grid, gamma=gamma)


def _check_batch_identities(identity_ids: np.ndarray) -> None:
    ids, counts = np.unique(identity_ids, return_counts=True)
    if len(ids) < 2:
        raise ContractError("batch needs at least 2 identities for triplet mining")
    singles = ids[counts < 2]
    if len(singles):
        raise ContractError(
            f"identity {int(singles[0])} has a single entry, no positive exists"
        )


def batch_hard_triplet(tape, embeddings: Tensor, identity_ids, margin: float) -> Tensor:
    """Hardest-pair hinge: (1/B)·Σ_a max(0, m + max_pos d(a,·) − min_neg d(a,·)).

    Gradients flow only through each anchor's selected hardest positive and
    hardest negative; ties pick the lowest index.
    """
    identity_ids = np.asarray(identity_ids)
    batch = embeddings.data.shape[0]
    if identity_ids.shape != (batch,):
        raise ContractError("identity_ids must align with the embedding rows")
    _check_batch_identities(identity_ids)

    d2 = ops.pairwise_sq_distances(tape, embeddings)
    dist = np.sqrt(d2.data + _DIST_EPS)
    same = identity_ids[:, None] == identity_ids[None, :]
    eye = np.eye(batch, dtype=bool)

    pos_masked = np.where(same & ~eye, dist, -np.inf)
    neg_masked = np.where(~same, dist, np.inf)
    hard_pos = pos_masked.argmax(axis=1)
    hard_neg = neg_masked.argmin(axis=1)
    rows = np.arange(batch)
    hinge = margin + dist[rows, hard_pos] - dist[rows, hard_neg]
    active = hinge > 0
    data = np.asarray(np.where(active, hinge, 0.0).mean())

    def backward(g):
        gd2 = np.zeros_like(d2.data)
        coef = float(g) / batch
        # d(sqrt(d2))/d(d2) = 0.5 / dist at the selected entries only.
        np.add.at(gd2, (rows[active], hard_pos[active]), coef * 0.5 / dist[rows, hard_pos][active])
        np.add.at(gd2, (rows[active], hard_neg[active]), -coef * 0.5 / dist[rows, hard_neg][active])
        return (gd2,)

    out = Tensor(data, requires_grad=embeddings.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (d2,), backward)
    return out


def id_cross_entropy(tape, logits: Tensor, labels) -> Tensor:
    """Mean cross entropy over softmax classes; used for ID, color, and type heads."""
    return ops.softmax_cross_entropy(tape, logits, labels)


def attribute_bce(tape, logits: Tensor, labels) -> Tensor:
    """Mean stabilized binary cross entropy over the four binary attributes."""
    targets = np.asarray(labels, dtype=np.float64)
    return ops.sigmoid_bce(tape, logits, targets)


@dataclass
class LossReport:
    """Per-term scalar values, their weights, and the weighted combination."""

    terms: dict[str, float]
    weights: dict[str, float]
    combined: float

    def __post_init__(self):
        expected = sum(self.weights.get(k, 0.0) * v for k, v in self.terms.items())
        if abs(self.combined - expected) > 1e-9 * max(1.0, abs(expected)):
            raise ContractError(
                f"combined {self.combined} does not match weighted sum {expected}"
            )

    def as_row(self) -> dict[str, float]:
        row = {k: self.terms.get(k, 0.0) for k in LOSS_TERM_KEYS}
        row["combined"] = self.combined
        return row


def term_weights_from_config(config: dict) -> dict[str, float]:
    """Translate the config-file weight keys into internal term names."""
    weights = {}
    for key, value in config.items():
        if key in CONFIG_WEIGHT_KEYS:
            weights[CONFIG_WEIGHT_KEYS[key]] = float(value)
    return weights


def combine_multi_task(tape, terms: dict[str, Tensor], weights: dict[str, float]) -> Tensor:
    """Weighted sum of loss terms in a fixed accumulation order.

    Terms with zero weight are skipped entirely, so disabled branches never
    need to be evaluated.
    """
    unknown = set(weights) - set(LOSS_TERM_KEYS)
    if unknown:
        raise ConfigurationError(f"unknown loss terms {sorted(unknown)}")
    if any(w < 0 for w in weights.values()):
        raise ConfigurationError("loss weights must be >= 0")
    if not any(w > 0 for w in weights.values()):
        raise ConfigurationError("at least one loss weight must be positive")

    total = None
    for key in LOSS_TERM_KEYS:
        w = weights.get(key, 0.0)
        if w == 0.0:
            continue
        if key not in terms:
            raise ConfigurationError(f"loss term {key!r} has weight {w} but no value")
        piece = ops.scale(tape, terms[key], w)
        total = piece if total is None else ops.add(tape, total, piece)
    return total


def make_report(terms: dict[str, Tensor], weights: dict[str, float], combined: Tensor) -> LossReport:
    return LossReport(
        terms={k: float(t.data) for k, t in terms.items()},
        weights=dict(weights),
        combined=float(combined.data),
    )
