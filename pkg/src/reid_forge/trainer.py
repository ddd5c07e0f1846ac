"""Training loop over PK batches, variant loss selection, checkpoint I/O, and
checkpoint evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ops
from .backbone import BackboneConfig, ReidModel, config_from_dict, config_to_dict
from .data import (
    BINARY_ATTRIBUTES,
    BoundingBox,
    DatasetManifest,
    ImageRecord,
    pk_sample_batches,
)
from .detect import Detection, detect_parts, detection_metrics, nms, select_parts
from .errors import ConfigurationError, ContractError, NumericError, ProtocolError
from .evalreid import (
    EvalReport,
    attribute_eval,
    compute_cmc,
    compute_map,
    distance_matrix,
)
from .losses import (
    LOSS_TERM_KEYS,
    VARIANT_WEIGHTS,
    LossReport,
    batch_hard_triplet,
    build_weight_matrix,
    combine_multi_task,
    id_cross_entropy,
    attribute_bce,
    make_report,
)
from .optim import AdamState, adam_step, lr_schedule
from .synth import apply_augment, augment_params, transform_box
from .tensor import Tape, Tensor, backpropagate, constant
from .tensorio import load_checkpoint, load_tensor_file, save_checkpoint

CHECKPOINT_FORMAT = "reid-embedder-checkpoint"


@dataclass
class TrainConfig:
    """One training run's recipe."""

    variant: str = "multi-task"
    epochs: int = 40
    decay_start: int = 21
    lr0: float = 1e-3
    p: int = 6
    k: int = 4
    margin: float = 0.3
    gamma: float = 1.3
    seed: int = 0
    gt_parts: bool = True
    conf_thr: float = 0.25
    nms_thr: float = 0.4
    top_k_parts: int = 3
    detector_window: int = 9
    two_phase_dp: bool = False
    term_weights: dict | None = None
    backbone: BackboneConfig = field(default_factory=BackboneConfig)

    def __post_init__(self):
        if self.variant not in VARIANT_WEIGHTS:
            raise ConfigurationError(
                f"unknown variant {self.variant!r}; choose from {sorted(VARIANT_WEIGHTS)}"
            )
        if self.decay_start > self.epochs:
            raise ConfigurationError("decay_start must be <= epochs")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.margin < 0:
            raise ConfigurationError("margin must be >= 0")
        if self.gamma < 1.0:
            raise ConfigurationError("gamma must be >= 1")

    def weights(self) -> dict[str, float]:
        if self.term_weights is not None:
            return dict(self.term_weights)
        return dict(VARIANT_WEIGHTS[self.variant])


class ImageStore:
    """Resolves manifest tensor_refs to arrays, with an in-memory cache."""

    def __init__(
        self,
        manifest: DatasetManifest,
        root: str | Path | None = None,
        images: dict[str, np.ndarray] | None = None,
    ):
        self._refs = {r.image_id: r.tensor_ref for r in manifest.records}
        self._root = Path(root) if root is not None else None
        self._cache: dict[str, np.ndarray] = dict(images) if images else {}

    def get(self, image_id: str) -> np.ndarray:
        if image_id in self._cache:
            return self._cache[image_id]
        ref = self._refs.get(image_id)
        if ref is None:
            raise ConfigurationError(f"image {image_id!r} is not in the manifest")
        if ref.startswith("mem:"):
            raise ConfigurationError(
                f"image {image_id!r} has an in-memory ref but no array was provided"
            )
        if self._root is None:
            raise ConfigurationError("ImageStore needs a root directory for file refs")
        array = load_tensor_file(self._root / ref)
        self._cache[image_id] = array
        return array


def _derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence(parts).generate_state(1)[0])


def contrastive_loss(tape, embeddings: Tensor, identity_ids, margin: float, seed: int) -> Tensor:
    """Pair loss: d^2 for same-identity pairs, max(0, m - d)^2 for sampled
    different-identity pairs, averaged over the union.

    All same-identity pairs are used; an equal number of different-identity
    pairs is drawn deterministically from the batch.
    """
    identity_ids = np.asarray(identity_ids)
    batch = embeddings.data.shape[0]
    iu, ju = np.triu_indices(batch, k=1)
    same = identity_ids[iu] == identity_ids[ju]
    pos_pairs = np.stack([iu[same], ju[same]], axis=1)
    neg_candidates = np.stack([iu[~same], ju[~same]], axis=1)
    if len(pos_pairs) == 0:
        raise ContractError("contrastive loss needs at least one same-identity pair")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0xCA1)))
    n_pos = len(pos_pairs)
    if len(neg_candidates) >= n_pos:
        pick = rng.choice(len(neg_candidates), size=n_pos, replace=False)
    else:
        pick = rng.choice(len(neg_candidates), size=n_pos, replace=True)
    neg_pairs = neg_candidates[np.sort(pick)]

    d2 = ops.pairwise_sq_distances(tape, embeddings)
    eps = 1e-24
    pi, pj = pos_pairs[:, 0], pos_pairs[:, 1]
    ni, nj = neg_pairs[:, 0], neg_pairs[:, 1]
    neg_dist = np.sqrt(d2.data[ni, nj] + eps)
    hinge = np.maximum(margin - neg_dist, 0.0)
    n_total = len(pos_pairs) + len(neg_pairs)
    data = np.asarray((d2.data[pi, pj].sum() + (hinge**2).sum()) / n_total)

    def backward(g):
        gd2 = np.zeros_like(d2.data)
        coef = float(g) / n_total
        np.add.at(gd2, (pi, pj), coef)
        active = hinge > 0
        np.add.at(gd2, (ni[active], nj[active]), -coef * hinge[active] / neg_dist[active])
        return (gd2,)

    out = Tensor(data, requires_grad=embeddings.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record(out, (d2,), backward)
    return out


def _record_labels(records: list[ImageRecord], identity_index: dict[int, int] | None):
    ids = np.array(
        [identity_index[r.identity_id] if identity_index else r.identity_id for r in records]
    )
    color = np.array([r.attributes.color_index() for r in records])
    vtype = np.array([r.attributes.vtype_index() for r in records])
    attrs = np.array([r.attributes.binary_vector() for r in records], dtype=np.float64)
    return ids, color, vtype, attrs


def _weight_grids(
    records: list[ImageRecord],
    images: list[np.ndarray],
    aug: list[tuple[int, bool]],
    config: TrainConfig,
) -> np.ndarray:
    grid_size = config.backbone.grid_size
    size = config.backbone.image_size
    grids = np.empty((len(records), grid_size, grid_size), dtype=np.float64)
    for idx, rec in enumerate(records):
        if config.gt_parts:
            turns, flip = aug[idx]
            boxes = [transform_box(b, size, turns, flip) for b in rec.parts]
        else:
            boxes = detect_parts(
                images[idx],
                conf_thr=config.conf_thr,
                nms_thr=config.nms_thr,
                k=config.top_k_parts,
                window=config.detector_window,
            )
        grids[idx] = build_weight_matrix(boxes, size, grid_size, config.gamma).grid
    return grids


@dataclass
class TrainResult:
    model: ReidModel
    history: list[dict]
    identity_index: dict[int, int]
    adam: AdamState


def train(
    manifest: DatasetManifest,
    config: TrainConfig,
    store: ImageStore,
    log_path: str | Path | None = None,
) -> TrainResult:
    """Run the full training loop.

    History rows carry the epoch mean of every loss term plus the learning
    rate. Deterministic given (manifest, config); divergence aborts with
    the epoch/batch location.
    """
    train_ids = sorted({r.identity_id for r in manifest.records if r.split == "train"})
    if not train_ids:
        raise ConfigurationError("manifest has no train split")
    identity_index = {identity: i for i, identity in enumerate(train_ids)}

    model = ReidModel(config.backbone, n_identities=len(train_ids), seed=config.seed)
    adam = AdamState.create(model.params)
    params = tuple(model.params.values())
    base_weights = config.weights()
    history: list[dict] = []

    for epoch in range(1, config.epochs + 1):
        weights = dict(base_weights)
        if (
            config.two_phase_dp
            and weights.get("triplet_weighted", 0.0) > 0
            and epoch <= config.epochs // 2
        ):
            weights["triplet_weighted"] = 0.0
        lr = lr_schedule(epoch, config.epochs, config.lr0, config.decay_start)
        batches = pk_sample_batches(
            manifest, config.p, config.k, seed=_derive_seed(config.seed, 0x5EED, epoch)
        )
        sums = {key: 0.0 for key in (*LOSS_TERM_KEYS, "combined")}
        for batch_index, batch in enumerate(batches):
            records = [manifest.records[i] for i in batch.flat_indices()]
            try:
                report = _train_step(
                    model, adam, records, config, weights, lr,
                    seed_parts=(config.seed, epoch, batch_index),
                    identity_index=identity_index,
                    store=store,
                    params=params,
                )
            except NumericError as err:
                raise NumericError(
                    f"training diverged at epoch {epoch}, batch {batch_index}: {err}"
                ) from err
            for key, value in report.as_row().items():
                sums[key] += value
        row = {key: value / len(batches) for key, value in sums.items()}
        row["epoch"] = epoch
        row["lr"] = lr
        history.append(row)

    if log_path is not None:
        write_loss_log(history, log_path)
    return TrainResult(model=model, history=history, identity_index=identity_index, adam=adam)


def _train_step(
    model: ReidModel,
    adam: AdamState,
    records: list[ImageRecord],
    config: TrainConfig,
    weights: dict[str, float],
    lr: float,
    seed_parts: tuple[int, ...],
    identity_index: dict[int, int],
    store: ImageStore,
    params: tuple[Tensor, ...],
) -> LossReport:
    size = config.backbone.image_size
    images = []
    aug = []
    for j, rec in enumerate(records):
        turns, flip = augment_params(_derive_seed(*seed_parts, j))
        aug.append((turns, flip))
        images.append(apply_augment(store.get(rec.image_id), turns, flip))

    ids, color, vtype, attrs = _record_labels(records, identity_index)
    tape = Tape()
    x = constant(np.stack(images))
    feats = model.features(tape, x)
    pooled_avg = model.pool(tape, feats, None)

    terms = {}
    if weights.get("triplet_avg", 0.0) > 0:
        terms["triplet_avg"] = batch_hard_triplet(tape, pooled_avg, ids, config.margin)
    if weights.get("contrastive", 0.0) > 0:
        terms["contrastive"] = contrastive_loss(
            tape, pooled_avg, ids, config.margin, seed=_derive_seed(*seed_parts, 0xCA1)
        )
    needs_heads = any(
        weights.get(key, 0.0) > 0 for key in ("id_ce", "color_ce", "type_ce", "attr_bce")
    )
    if needs_heads:
        necked = model.neck(tape, pooled_avg, training=True, update_running=True)
        logits = model.head_logits(tape, necked)
        if weights.get("id_ce", 0.0) > 0:
            terms["id_ce"] = id_cross_entropy(tape, logits["id"], ids)
        if weights.get("color_ce", 0.0) > 0:
            terms["color_ce"] = id_cross_entropy(tape, logits["color"], color)
        if weights.get("type_ce", 0.0) > 0:
            terms["type_ce"] = id_cross_entropy(tape, logits["type"], vtype)
        if weights.get("attr_bce", 0.0) > 0:
            terms["attr_bce"] = attribute_bce(tape, logits["attr"], attrs)
    if weights.get("triplet_weighted", 0.0) > 0:
        grids = _weight_grids(records, images, aug, config)
        pooled_dp = model.pool(tape, feats, constant(grids))
        terms["triplet_weighted"] = batch_hard_triplet(tape, pooled_dp, ids, config.margin)

    combined = combine_multi_task(tape, terms, weights)
    for p in params:
        p.zero_grad()
    backpropagate(tape, combined, params=params)
    adam_step(model.params, adam, lr)
    return make_report(terms, weights, combined)


def write_loss_log(history: list[dict], path: str | Path) -> None:
    """Per-epoch CSV: epoch, each loss term, combined, learning rate."""
    columns = ["epoch", *LOSS_TERM_KEYS, "combined", "lr"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in history:
            writer.writerow([row["epoch"]] + [f"{row[c]:.12g}" for c in columns[1:]])


def save_model_checkpoint(
    path: str | Path,
    model: ReidModel,
    adam: AdamState,
    identity_index: dict[int, int],
    epoch: int,
    train_meta: dict | None = None,
) -> None:
    tensors = model.state_tensors()
    for name in model.params:
        tensors[f"adam.m.{name}"] = adam.m[name]
        tensors[f"adam.v.{name}"] = adam.v[name]
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": 1,
        "epoch": epoch,
        "backbone": config_to_dict(model.config),
        "n_identities": model.n_identities,
        "identity_index": {str(k): v for k, v in sorted(identity_index.items())},
        "adam": {
            "step": adam.step,
            "beta1": adam.beta1,
            "beta2": adam.beta2,
            "eps": adam.eps,
        },
        "train": dict(train_meta or {}),
    }
    save_checkpoint(path, tensors, meta)


def load_model_checkpoint(path: str | Path) -> tuple[ReidModel, AdamState, dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"not a model checkpoint: {path}")
    model = ReidModel(config_from_dict(meta["backbone"]), meta["n_identities"], seed=0)
    model.load_state_tensors(tensors)
    adam = AdamState.create(model.params, **meta["adam"])
    for name in model.params:
        adam.m[name] = tensors[f"adam.m.{name}"].copy()
        adam.v[name] = tensors[f"adam.v.{name}"].copy()
    return model, adam, meta


def _parts_for_eval(
    rec: ImageRecord,
    gt_parts: bool,
    detections: dict[str, list[Detection]] | None,
    conf_thr: float,
    nms_thr: float,
    top_k: int,
) -> list[BoundingBox]:
    if detections is not None:
        if rec.image_id not in detections:
            raise ProtocolError(f"no detections for image {rec.image_id!r}")
        return select_parts(nms(detections[rec.image_id], nms_thr), conf_thr, top_k)
    if gt_parts:
        return list(rec.parts)
    raise ConfigurationError(
        "weighted evaluation needs either a detections file or ground-truth parts"
    )


def embed_records(
    model: ReidModel,
    records: list[ImageRecord],
    store: ImageStore,
    feature: str = "average",
    gamma: float = 1.3,
    gt_parts: bool = True,
    detections: dict[str, list[Detection]] | None = None,
    conf_thr: float = 0.25,
    nms_thr: float = 0.4,
    top_k: int = 3,
    l2_normalize: bool = False,
    chunk: int = 64,
) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Eval-mode embeddings plus head predictions for a record list.

    feature "average" uses uniform pooling; "weighted" builds a per-image
    weight grid from part boxes (ground truth or supplied detections).
    Returns (embeddings N x D, predictions dict).
    """
    if feature not in ("average", "weighted"):
        raise ConfigurationError(f"unknown feature mode {feature!r}")
    size = model.config.image_size
    grid_size = model.config.grid_size
    embs = []
    preds: dict[str, list] = {key: [] for key in ("color", "vtype", *BINARY_ATTRIBUTES)}
    for start in range(0, len(records), chunk):
        batch = records[start : start + chunk]
        x = constant(np.stack([store.get(r.image_id) for r in batch]))
        feats = model.features(None, x)
        if feature == "average":
            pooled = model.pool(None, feats, None)
        else:
            grids = np.empty((len(batch), grid_size, grid_size))
            for i, rec in enumerate(batch):
                boxes = _parts_for_eval(rec, gt_parts, detections, conf_thr, nms_thr, top_k)
                grids[i] = build_weight_matrix(boxes, size, grid_size, gamma).grid
            pooled = model.pool(None, feats, constant(grids))
        necked = model.neck(None, pooled, training=False)
        logits = model.head_logits(None, necked)
        embs.append(necked.data)
        preds["color"].append(np.argmax(logits["color"].data, axis=1))
        preds["vtype"].append(np.argmax(logits["type"].data, axis=1))
        attr_logits = logits["attr"].data
        for i, name in enumerate(BINARY_ATTRIBUTES):
            preds[name].append(attr_logits[:, i] > 0)

    embeddings = np.concatenate(embs, axis=0)
    if l2_normalize:
        norms = np.linalg.norm(embeddings, axis=1, keepdims=True)
        embeddings = embeddings / np.maximum(norms, 1e-12)
    return embeddings, {key: np.concatenate(vals) for key, vals in preds.items()}


def evaluate_checkpoint(
    checkpoint: str | Path | ReidModel,
    manifest: DatasetManifest,
    store: ImageStore,
    feature: str = "average",
    gamma: float = 1.3,
    gt_parts: bool = True,
    detections: dict[str, list[Detection]] | None = None,
    conf_thr: float = 0.25,
    nms_thr: float = 0.4,
    iou_thr: float = 0.5,
    top_k: int = 3,
    cross_camera_only: bool = False,
    l2_normalize: bool = False,
    max_rank: int = 10,
) -> EvalReport:
    """Embed the query/gallery split and produce the full evaluation report."""
    if isinstance(checkpoint, ReidModel):
        model = checkpoint
        epoch = None
    else:
        model, _, meta = load_model_checkpoint(checkpoint)
        epoch = meta.get("epoch")

    query = manifest.subset("query")
    gallery = manifest.subset("gallery")
    if not query or not gallery:
        raise ProtocolError("manifest has no query/gallery split; run the split first")

    records = query + gallery
    embeddings, predictions = embed_records(
        model,
        records,
        store,
        feature=feature,
        gamma=gamma,
        gt_parts=gt_parts,
        detections=detections,
        conf_thr=conf_thr,
        nms_thr=nms_thr,
        top_k=top_k,
        l2_normalize=l2_normalize,
    )
    nq = len(query)
    distmat = distance_matrix(embeddings[:nq], embeddings[nq:])
    q_ids = [r.identity_id for r in query]
    q_cams = [r.camera_id for r in query]
    g_ids = [r.identity_id for r in gallery]
    g_cams = [r.camera_id for r in gallery]
    map_score = compute_map(distmat, q_ids, q_cams, g_ids, g_cams, cross_camera_only)
    max_rank = min(max_rank, len(gallery))
    cmc = compute_cmc(distmat, q_ids, q_cams, g_ids, g_cams, max_rank, cross_camera_only)

    labels = {
        "color": np.array([r.attributes.color_index() for r in records]),
        "vtype": np.array([r.attributes.vtype_index() for r in records]),
    }
    for i, name in enumerate(BINARY_ATTRIBUTES):
        labels[name] = np.array([r.attributes.binary_vector()[i] for r in records])
    accuracies, confusion = attribute_eval(predictions, labels)

    detection_block = None
    if feature == "weighted" and detections is not None:
        truth = {r.image_id: list(r.parts) for r in records}
        preds = {r.image_id: detections.get(r.image_id, []) for r in records}
        metrics = detection_metrics(preds, truth, conf_thr, iou_thr)
        detection_block = {
            "precision": metrics.precision,
            "recall": metrics.recall,
            "f_score": metrics.f_score,
        }

    return EvalReport(
        map_score=map_score,
        cmc=[float(v) for v in cmc],
        attribute_accuracy=accuracies,
        type_confusion=confusion.tolist(),
        detection=detection_block,
        meta={
            "feature": feature,
            "gamma": gamma,
            "cross_camera_only": cross_camera_only,
            "l2_normalize": l2_normalize,
            "n_query": nq,
            "n_gallery": len(gallery),
            "epoch": epoch,
        },
    )
