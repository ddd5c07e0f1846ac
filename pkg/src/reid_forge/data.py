"""Domain records, manifest file I/O, the query/gallery split, and PK batch sampling."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    ConfigurationError,
    ContractError,
    ManifestParseError,
    SplitInfeasibleError,
    ValidationError,
)

COLORS = ("White", "Black", "Gray", "Red", "Green", "Blue", "Yellow", "Brown", "Other")
VEHICLE_TYPES = ("Sedan", "Hatchback", "SUV", "Bus", "Lorry", "Truck", "Other")
BINARY_ATTRIBUTES = ("skylight", "bumper", "spare_tire", "luggage_rack")
SPLIT_TAGS = ("train", "query", "gallery", "unassigned-test")

_MANIFEST_KEYS = frozenset(
    {
        "image_id",
        "identity_id",
        "camera_id",
        "color",
        "vtype",
        "skylight",
        "bumper",
        "spare_tire",
        "luggage_rack",
        "parts",
        "tensor_ref",
        "width",
        "height",
        "split",
    }
)


@dataclass(frozen=True)
class AttributeSet:
    """Categorical and binary appearance attributes of one vehicle."""

    color: str
    vtype: str
    skylight: bool
    bumper: bool
    spare_tire: bool
    luggage_rack: bool

    def __post_init__(self):
        if self.color not in COLORS:
            raise ValidationError(f"unknown color {self.color!r}")
        if self.vtype not in VEHICLE_TYPES:
            raise ValidationError(f"unknown vehicle type {self.vtype!r}")
        for name in BINARY_ATTRIBUTES:
            if not isinstance(getattr(self, name), bool):
                raise ValidationError(f"attribute {name!r} must be a bool")

    def color_index(self) -> int:
        return COLORS.index(self.color)

    def vtype_index(self) -> int:
        return VEHICLE_TYPES.index(self.vtype)

    def binary_vector(self) -> tuple[bool, bool, bool, bool]:
        return (self.skylight, self.bumper, self.spare_tire, self.luggage_rack)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box in image coordinates, origin top-left, continuous pixels."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValidationError(
                f"degenerate box ({self.x_min}, {self.y_min}, {self.x_max}, {self.y_max})"
            )
        if self.x_min < 0 or self.y_min < 0:
            raise ValidationError("box coordinates must be >= 0")

    def as_list(self) -> list[float]:
        return [self.x_min, self.y_min, self.x_max, self.y_max]

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)

    def contains_point(self, x: float, y: float) -> bool:
        # Half-open membership so adjacent boxes do not double-claim edges.
        return self.x_min <= x < self.x_max and self.y_min <= y < self.y_max


@dataclass(frozen=True)
class ImageRecord:
    """One annotated vehicle image."""

    image_id: str
    identity_id: int
    camera_id: int
    attributes: AttributeSet
    parts: tuple[BoundingBox, ...]
    tensor_ref: str
    width: int
    height: int
    split: str = "unassigned-test"

    def __post_init__(self):
        if self.identity_id < 0 or self.camera_id < 0:
            raise ValidationError(f"{self.image_id}: identity_id and camera_id must be >= 0")
        if self.split not in SPLIT_TAGS:
            raise ValidationError(f"{self.image_id}: unknown split tag {self.split!r}")
        for box in self.parts:
            if box.x_max > self.width or box.y_max > self.height:
                raise ValidationError(
                    f"{self.image_id}: part box {box.as_list()} exceeds "
                    f"image extent ({self.width}, {self.height})"
                )


@dataclass
class DatasetManifest:
    """The full image collection with per-record split tags."""

    records: list[ImageRecord] = field(default_factory=list)

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.records:
            if rec.image_id in seen:
                raise ValidationError(f"duplicate image_id {rec.image_id!r}")
            seen.add(rec.image_id)
        self._check_cross_camera()

    def _check_cross_camera(self):
        """Every query identity must have a cross-camera gallery record."""
        gallery: dict[int, set[int]] = {}
        for rec in self.records:
            if rec.split == "gallery":
                gallery.setdefault(rec.identity_id, set()).add(rec.camera_id)
        for rec in self.records:
            if rec.split != "query":
                continue
            cams = gallery.get(rec.identity_id, set())
            if not (cams - {rec.camera_id}):
                raise ValidationError(
                    f"query {rec.image_id} (identity {rec.identity_id}) has no "
                    "cross-camera gallery record"
                )

    def subset(self, split: str) -> list[ImageRecord]:
        return [r for r in self.records if r.split == split]

    def by_identity(self, split: str | None = None) -> dict[int, list[int]]:
        """Record indices grouped by identity, optionally restricted to one split."""
        groups: dict[int, list[int]] = {}
        for i, rec in enumerate(self.records):
            if split is None or rec.split == split:
                groups.setdefault(rec.identity_id, []).append(i)
        return groups


@dataclass(frozen=True)
class BatchSpec:
    """A PK mini-batch: P identity groups of exactly K record indices each."""

    p: int
    k: int
    groups: tuple[tuple[int, tuple[int, ...]], ...]  # (identity_id, record indices)

    def __post_init__(self):
        if len(self.groups) != self.p:
            raise ValidationError(f"expected {self.p} identity groups, got {len(self.groups)}")
        for identity_id, indices in self.groups:
            if len(indices) != self.k:
                raise ValidationError(
                    f"identity {identity_id}: expected {self.k} indices, got {len(indices)}"
                )

    @property
    def size(self) -> int:
        return self.p * self.k

    def flat_indices(self) -> list[int]:
        return [i for _, indices in self.groups for i in indices]


def _record_to_json(rec: ImageRecord) -> dict:
    return {
        "image_id": rec.image_id,
        "identity_id": rec.identity_id,
        "camera_id": rec.camera_id,
        "color": rec.attributes.color,
        "vtype": rec.attributes.vtype,
        "skylight": rec.attributes.skylight,
        "bumper": rec.attributes.bumper,
        "spare_tire": rec.attributes.spare_tire,
        "luggage_rack": rec.attributes.luggage_rack,
        "parts": [b.as_list() for b in rec.parts],
        "tensor_ref": rec.tensor_ref,
        "width": rec.width,
        "height": rec.height,
        "split": rec.split,
    }


def _record_from_json(obj: dict, line_number: int) -> ImageRecord:
    if not isinstance(obj, dict):
        raise ManifestParseError("record is not a JSON object", line_number)
    unknown = set(obj) - _MANIFEST_KEYS
    if unknown:
        raise ManifestParseError(f"unknown keys {sorted(unknown)}", line_number)
    missing = _MANIFEST_KEYS - set(obj) - {"split"}
    if missing:
        raise ManifestParseError(f"missing keys {sorted(missing)}", line_number)
    attributes = AttributeSet(
        color=obj["color"],
        vtype=obj["vtype"],
        skylight=obj["skylight"],
        bumper=obj["bumper"],
        spare_tire=obj["spare_tire"],
        luggage_rack=obj["luggage_rack"],
    )
    parts = tuple(BoundingBox(*[float(v) for v in p]) for p in obj["parts"])
    return ImageRecord(
        image_id=obj["image_id"],
        identity_id=int(obj["identity_id"]),
        camera_id=int(obj["camera_id"]),
        attributes=attributes,
        parts=parts,
        tensor_ref=obj["tensor_ref"],
        width=int(obj["width"]),
        height=int(obj["height"]),
        split=obj.get("split", "unassigned-test"),
    )


def load_manifest(path: str | Path) -> DatasetManifest:
    """Load a JSON-lines manifest, validating every record.

    Raises ManifestParseError with the offending line number on malformed
    input and ValidationError naming the image_id on invariant violations.
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ManifestParseError(f"invalid JSON ({exc.msg})", line_number) from exc
            records.append(_record_from_json(obj, line_number))
    return DatasetManifest(records=records)


def save_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    """Write a manifest as UTF-8 JSON-lines, one record per line."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in manifest.records:
            fh.write(json.dumps(_record_to_json(rec), sort_keys=True))
            fh.write("\n")


def make_query_gallery_split(
    manifest: DatasetManifest, query_fraction: float, seed: int
) -> DatasetManifest:
    """Partition the test records into query and gallery sets.

    Per identity the gallery is anchored first: two records from distinct
    cameras when two or more gallery slots exist, or a record from a
    camera unique to this identity when only one slot remains. Either
    anchor covers every possible query camera, so each query record is
    guaranteed a cross-camera positive. The realized query count lands
    within one record of round(query_fraction * n) per identity. Train
    records pass through untouched.
    """
    if not (0.0 < query_fraction < 1.0):
        raise ContractError(f"query_fraction must be in (0, 1), got {query_fraction}")

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x5711)))
    new_records = list(manifest.records)
    test_groups: dict[int, list[int]] = {}
    for i, rec in enumerate(manifest.records):
        if rec.split != "train":
            test_groups.setdefault(rec.identity_id, []).append(i)

    for identity_id in sorted(test_groups):
        indices = test_groups[identity_id]
        cameras = {manifest.records[i].camera_id for i in indices}
        if len(indices) < 2:
            raise SplitInfeasibleError(identity_id, "fewer than 2 test images")
        if len(cameras) < 2:
            raise SplitInfeasibleError(identity_id, "all test images from a single camera")

        order = [indices[j] for j in rng.permutation(len(indices))]
        cam_of = {i: manifest.records[i].camera_id for i in indices}

        n = len(indices)
        target_q = int(round(query_fraction * n))
        target_q = min(max(target_q, 1), n - 1)
        g_size = n - target_q

        gallery: list[int] = []
        if g_size == 1:
            # A single gallery record covers every query only if its camera
            # appears nowhere else for this identity.
            counts: dict[int, int] = {}
            for i in indices:
                counts[cam_of[i]] = counts.get(cam_of[i], 0) + 1
            singles = [i for i in order if counts[cam_of[i]] == 1]
            if singles:
                gallery = [singles[0]]
            else:
                g_size = 2  # one query short of target, still within +-1
        if g_size >= 2:
            first = order[0]
            partner = next(i for i in order[1:] if cam_of[i] != cam_of[first])
            gallery = [first, partner]
            gallery += [i for i in order if i not in (first, partner)][: g_size - 2]

        in_gallery = set(gallery)
        for i in order:
            tag = "gallery" if i in in_gallery else "query"
            new_records[i] = replace(manifest.records[i], split=tag)

    return DatasetManifest(records=new_records)


def pk_sample_batches(
    manifest: DatasetManifest, p: int, k: int, seed: int
) -> list[BatchSpec]:
    """Build one epoch of PK batches over the train split.

    Every train identity appears in at least one batch. Identities with
    fewer than K images contribute each image once plus uniformly resampled
    extras, so an identity with K-1 images repeats exactly one index.
    """
    if p < 2 or k < 2:
        raise ConfigurationError("P and K must both be >= 2 for triplet mining")
    groups = manifest.by_identity("train")
    identities = sorted(groups)
    if len(identities) < p:
        raise ConfigurationError(
            f"need at least P={p} train identities, found {len(identities)}"
        )

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x9B4C)))
    order = [identities[j] for j in rng.permutation(len(identities))]
    # Pad the tail chunk with distinct identities already covered this epoch.
    remainder = len(order) % p
    if remainder:
        pool = [i for i in order[: len(order) - remainder] if i not in order[-remainder:]]
        pad = [pool[j] for j in rng.permutation(len(pool))[: p - remainder]]
        order.extend(pad)

    batches = []
    for start in range(0, len(order), p):
        chosen = order[start : start + p]
        batch_groups = []
        for identity_id in chosen:
            indices = groups[identity_id]
            if len(indices) >= k:
                picks = [indices[j] for j in rng.permutation(len(indices))[:k]]
            else:
                extras = rng.integers(0, len(indices), size=k - len(indices))
                picks = list(indices) + [indices[int(j)] for j in extras]
            batch_groups.append((identity_id, tuple(picks)))
        batches.append(BatchSpec(p=p, k=k, groups=tuple(batch_groups)))
    return batches
