"""Retrieval and classification evaluation: distances, mAP, CMC curves,
attribute accuracy with the type confusion matrix, and the forced-choice
benchmark."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BINARY_ATTRIBUTES, VEHICLE_TYPES, DatasetManifest
from .errors import ProtocolError, ShapeError


@dataclass
class EvalReport:
    """One evaluation's retrieval, classification, and detection numbers."""

    map_score: float
    cmc: list[float]
    attribute_accuracy: dict[str, float]
    type_confusion: list[list[int]]
    detection: dict[str, float] | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (0.0 <= self.map_score <= 1.0):
            raise ProtocolError(f"mAP {self.map_score} outside [0, 1]")
        last = 0.0
        for k, value in enumerate(self.cmc, start=1):
            if value < last - 1e-12 or not (0.0 <= value <= 1.0):
                raise ProtocolError(f"CMC must be nondecreasing in [0, 1], broken at k={k}")
            last = value

    def to_json(self) -> dict:
        out = {
            "map": self.map_score,
            "cmc": list(self.cmc),
            "attribute_accuracy": dict(self.attribute_accuracy),
            "type_confusion": [list(map(int, row)) for row in self.type_confusion],
            "meta": dict(self.meta),
        }
        if self.detection is not None:
            out["detection"] = dict(self.detection)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "EvalReport":
        return cls(
            map_score=obj["map"],
            cmc=list(obj["cmc"]),
            attribute_accuracy=dict(obj["attribute_accuracy"]),
            type_confusion=[list(row) for row in obj["type_confusion"]],
            detection=dict(obj["detection"]) if "detection" in obj else None,
            meta=dict(obj.get("meta", {})),
        )


def save_report(report: EvalReport, out_dir: str | Path, stem: str = "report") -> None:
    """Write the JSON report plus CMC and confusion CSVs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{stem}.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out / f"{stem}_cmc.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["rank", "cmc"])
        for k, value in enumerate(report.cmc, start=1):
            writer.writerow([k, f"{value:.10f}"])
    with open(out / f"{stem}_confusion.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["true\\pred"] + list(VEHICLE_TYPES))
        for name, row in zip(VEHICLE_TYPES, report.type_confusion):
            writer.writerow([name] + list(map(int, row)))


def distance_matrix(query_embs: np.ndarray, gallery_embs: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances between every query row and gallery row."""
    q = np.asarray(query_embs, dtype=np.float64)
    g = np.asarray(gallery_embs, dtype=np.float64)
    if q.ndim != 2 or g.ndim != 2 or q.shape[1] != g.shape[1]:
        raise ShapeError(f"embedding dims differ: {q.shape} vs {g.shape}")
    diff = q[:, None, :] - g[None, :, :]
    return np.sqrt(np.einsum("qgd,qgd->qg", diff, diff))


def _ranking(distmat_row: np.ndarray, keep: np.ndarray) -> np.ndarray:
    """Gallery indices sorted by ascending distance, ties by index, masked rows
    removed."""
    order = np.argsort(distmat_row, kind="stable")
    return order[keep[order]]


def _query_masks(
    q_ids, q_cams, g_ids, g_cams, cross_camera_only: bool
) -> tuple[np.ndarray, np.ndarray]:
    """Per query: which gallery entries count as positives / stay in the ranking."""
    q_ids = np.asarray(q_ids)
    g_ids = np.asarray(g_ids)
    q_cams = np.asarray(q_cams)
    g_cams = np.asarray(g_cams)
    same_id = q_ids[:, None] == g_ids[None, :]
    same_cam = q_cams[:, None] == g_cams[None, :]
    if cross_camera_only:
        keep = ~(same_id & same_cam)
        positives = same_id & ~same_cam
    else:
        keep = np.ones_like(same_id, dtype=bool)
        positives = same_id
    return positives, keep


def compute_map(
    distmat: np.ndarray,
    query_ids,
    query_cams,
    gallery_ids,
    gallery_cams,
    cross_camera_only: bool = False,
) -> float:
    """Mean average precision with ascending-distance ranking, ties by gallery
    index, AP = mean precision at each positive's rank."""
    positives, keep = _query_masks(
        query_ids, query_cams, gallery_ids, gallery_cams, cross_camera_only
    )
    aps = []
    for qi in range(distmat.shape[0]):
        order = _ranking(distmat[qi], keep[qi])
        rel = positives[qi][order]
        n_pos = int(rel.sum())
        if n_pos == 0:
            raise ProtocolError(f"query {qi} has no positive in the gallery")
        hits = np.cumsum(rel)
        ranks = np.arange(1, len(order) + 1)
        precision_at_pos = hits[rel] / ranks[rel]
        aps.append(precision_at_pos.mean())
    return float(np.mean(aps))


def compute_cmc(
    distmat: np.ndarray,
    query_ids,
    query_cams,
    gallery_ids,
    gallery_cams,
    max_k: int = 10,
    cross_camera_only: bool = False,
) -> np.ndarray:
    """cmc[k-1] = fraction of queries with a positive among the k nearest."""
    positives, keep = _query_masks(
        query_ids, query_cams, gallery_ids, gallery_cams, cross_camera_only
    )
    n_queries = distmat.shape[0]
    hits = np.zeros(max_k, dtype=np.float64)
    for qi in range(n_queries):
        order = _ranking(distmat[qi], keep[qi])
        rel = positives[qi][order]
        if not rel.any():
            raise ProtocolError(f"query {qi} has no positive in the gallery")
        first = int(np.argmax(rel))
        if first < max_k:
            hits[first:] += 1.0
    return hits / n_queries


def attribute_eval(
    predictions: dict[str, np.ndarray], labels: dict[str, np.ndarray]
) -> tuple[dict[str, float], np.ndarray]:
    """Accuracy per attribute task plus the 7x7 vehicle-type confusion matrix.

    Multi-class tasks ("color", "vtype") hold argmax class indices; binary
    attributes hold booleans. confusion[i][j] counts true type i predicted j.
    """
    accuracies = {}
    for task in ("color", "vtype", *BINARY_ATTRIBUTES):
        pred = np.asarray(predictions[task])
        true = np.asarray(labels[task])
        if pred.shape != true.shape:
            raise ShapeError(f"{task}: prediction/label shapes differ")
        accuracies[task] = float((pred == true).mean()) if len(pred) else 0.0

    n_types = len(VEHICLE_TYPES)
    confusion = np.zeros((n_types, n_types), dtype=np.int64)
    np.add.at(
        confusion,
        (np.asarray(labels["vtype"], dtype=int), np.asarray(predictions["vtype"], dtype=int)),
        1,
    )
    return accuracies, confusion


@dataclass(frozen=True)
class TwoAFCTrial:
    """One forced-choice trial over image ids."""

    query: str
    positive: str
    distractor: str


def make_2afc_benchmark(
    manifest: DatasetManifest,
    n_trials: int = 100,
    seed: int = 0,
    allow_fewer: bool = False,
) -> list[TwoAFCTrial]:
    """Sample forced-choice trials from the test records.

    Each trial pairs a query with a cross-camera image of the same identity
    and a distractor image of a different identity whose attributes are
    identical to the query's. Queries are drawn without replacement.
    """
    test = [r for r in manifest.records if r.split != "train"]
    by_identity: dict[int, list] = {}
    for rec in test:
        by_identity.setdefault(rec.identity_id, []).append(rec)

    feasible = []
    for rec in test:
        positives = [
            r
            for r in by_identity[rec.identity_id]
            if r.camera_id != rec.camera_id
        ]
        distractors = [
            r
            for r in test
            if r.identity_id != rec.identity_id and r.attributes == rec.attributes
        ]
        if positives and distractors:
            feasible.append((rec, positives, distractors))

    if len(feasible) < n_trials and not allow_fewer:
        raise ProtocolError(
            f"only {len(feasible)} feasible queries for {n_trials} requested trials"
        )

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x2AFC)))
    order = rng.permutation(len(feasible))[: min(n_trials, len(feasible))]
    trials = []
    for idx in order:
        rec, positives, distractors = feasible[int(idx)]
        pos = positives[int(rng.integers(0, len(positives)))]
        dis = distractors[int(rng.integers(0, len(distractors)))]
        trials.append(
            TwoAFCTrial(query=rec.image_id, positive=pos.image_id, distractor=dis.image_id)
        )
    return trials


def score_2afc(embedder, benchmark: list[TwoAFCTrial]) -> float:
    """Fraction of trials where the same-identity candidate is strictly nearer.

    `embedder` maps an image_id to a 1-d embedding; ties count as incorrect.
    """
    correct = 0
    for trial in benchmark:
        q = np.asarray(embedder(trial.query), dtype=np.float64)
        p = np.asarray(embedder(trial.positive), dtype=np.float64)
        d = np.asarray(embedder(trial.distractor), dtype=np.float64)
        if np.linalg.norm(q - p) < np.linalg.norm(q - d):
            correct += 1
    return correct / len(benchmark) if benchmark else 0.0
