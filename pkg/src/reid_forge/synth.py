"""Synthetic vehicle imagery where identity lives only inside annotated part boxes.

Each image is a smooth background fully determined by the vehicle's
attributes (color field, type silhouette, binary-attribute markers) plus an
identity-specific high-frequency texture patch planted at a random location
and recorded as the ground-truth part box. Optional Gaussian noise and a
per-camera brightness shift sit on top.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    BINARY_ATTRIBUTES,
    COLORS,
    VEHICLE_TYPES,
    AttributeSet,
    BoundingBox,
    DatasetManifest,
    ImageRecord,
    save_manifest,
)
from .errors import ConfigurationError, ShapeError
from .tensorio import save_tensor_file

_COLOR_RGB = {
    "White": (0.95, 0.95, 0.95),
    "Black": (0.08, 0.08, 0.08),
    "Gray": (0.50, 0.50, 0.50),
    "Red": (0.80, 0.12, 0.12),
    "Green": (0.12, 0.65, 0.20),
    "Blue": (0.12, 0.22, 0.78),
    "Yellow": (0.88, 0.82, 0.12),
    "Brown": (0.55, 0.36, 0.16),
    "Other": (0.58, 0.40, 0.68),
}

_PART_MARGIN = 2


@dataclass(frozen=True)
class SynthConfig:
    """Generation parameters for one synthetic dataset."""

    n_identities: int
    images_per_identity: int
    n_cameras: int = 2
    image_size: int = 64
    channels: int = 3
    part_size_range: tuple[int, int] = (12, 20)
    noise_sigma: float = 0.05
    attribute_seed: int = 0
    attribute_twins: bool = True
    train_identities: int | None = None
    camera_tint: float = 0.0
    grid_divisor: int = 8

    def __post_init__(self):
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ConfigurationError("need at least one identity and one image each")
        if self.n_cameras < 2:
            raise ConfigurationError("capture protocol requires n_cameras >= 2")
        if self.noise_sigma < 0:
            raise ConfigurationError("noise_sigma must be >= 0")
        if self.image_size % self.grid_divisor != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} is not divisible by the "
                f"feature-grid divisor {self.grid_divisor}"
            )
        lo, hi = self.part_size_range
        if not (1 <= lo <= hi):
            raise ConfigurationError(f"bad part_size_range ({lo}, {hi})")
        if hi + 2 * _PART_MARGIN > self.image_size:
            raise ConfigurationError(
                f"part size up to {hi} px does not fit a {self.image_size} px image"
            )
        if self.train_identities is not None and not (
            0 <= self.train_identities <= self.n_identities
        ):
            raise ConfigurationError("train_identities out of range")

    @property
    def n_train(self) -> int:
        if self.train_identities is not None:
            return self.train_identities
        return self.n_identities // 2


def _box_blur3(img: np.ndarray) -> np.ndarray:
    """3x3 box filter per channel with edge padding; keeps the shape."""
    p = np.pad(img, ((0, 0), (1, 1), (1, 1)), mode="edge")
    out = np.zeros_like(img)
    for dy in range(3):
        for dx in range(3):
            out += p[:, dy : dy + img.shape[1], dx : dx + img.shape[2]]
    return out / 9.0


def _silhouette_mask(vtype: str, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    if vtype == "Sedan":
        return (yy > 0.42) & (yy < 0.72) & (xx > 0.12) & (xx < 0.88)
    if vtype == "Hatchback":
        body = (yy > 0.45) & (yy < 0.75) & (xx > 0.15) & (xx < 0.85)
        cab = (yy > 0.30) & (yy <= 0.45) & (xx > 0.40) & (xx < 0.80)
        return body | cab
    if vtype == "SUV":
        return (yy > 0.30) & (yy < 0.75) & (xx > 0.15) & (xx < 0.85)
    if vtype == "Bus":
        return (yy > 0.18) & (yy < 0.80) & (xx > 0.20) & (xx < 0.80)
    if vtype == "Lorry":
        cab = (yy > 0.35) & (yy < 0.70) & (xx > 0.08) & (xx < 0.30)
        bed = (yy > 0.28) & (yy < 0.70) & (xx > 0.34) & (xx < 0.92)
        return cab | bed
    if vtype == "Truck":
        body = (yy > 0.40) & (yy < 0.75) & (xx > 0.10) & (xx < 0.90)
        return body & (xx + yy < 1.40)
    # Other
    return ((xx - 0.5) / 0.35) ** 2 + ((yy - 0.5) / 0.28) ** 2 < 1.0


def render_background(attributes: AttributeSet, size: int, channels: int = 3) -> np.ndarray:
    """Deterministic low-frequency canvas that depends only on the attributes."""
    rgb = _COLOR_RGB[attributes.color]
    grad = np.linspace(0.75, 1.0, size)[None, :, None]  # vertical shading
    img = np.empty((channels, size, size), dtype=np.float64)
    for c in range(channels):
        img[c] = rgb[c % 3]
    img *= grad

    mask = _silhouette_mask(attributes.vtype, size)
    img[:, mask] = img[:, mask] * 0.55 + 0.18

    # Binary-attribute markers: solid low-contrast shapes at fixed spots.
    half = size // 2
    if attributes.skylight:
        img[:, 4:10, half - 3 : half + 3] = 0.72
    if attributes.bumper:
        img[:, size - 10 : size - 6, 8 : size - 8] = 0.70
    if attributes.spare_tire:
        img[:, half - 4 : half + 4, size - 12 : size - 4] = 0.28
    if attributes.luggage_rack:
        for col in (8, 14, 20):
            img[:, 4:12, col : col + 2] = 0.30

    return _box_blur3(img)


def identity_texture(seed: int, identity_id: int, config: SynthConfig) -> np.ndarray:
    """The planted fine-grained patch; one fixed draw per identity.

    Coarse patch appearance (size, base color, contrast) is keyed by the
    same pairing block as the attributes, so paired identities get parts
    that match in color and only differ in fine structure: an identity-keyed
    grating orientation, wavelength, phase, and pixel noise. Telling paired
    identities apart therefore requires reading the fine structure, not just
    the patch's average color.
    """
    block = identity_id // 2 if config.attribute_twins else identity_id
    rng_coarse = np.random.default_rng(np.random.SeedSequence((seed, 0x7E02, block)))
    lo, hi = config.part_size_range
    s = int(rng_coarse.integers(lo, hi + 1))
    base = rng_coarse.uniform(0.15, 0.85, size=(config.channels, 1, 1))
    amplitude = rng_coarse.uniform(0.3, 0.55, size=(config.channels, 1, 1))

    rng = np.random.default_rng(np.random.SeedSequence((seed, 0x7E01, identity_id)))
    theta = rng.uniform(0.0, np.pi)
    wavelength = rng.uniform(2.0, 4.0)
    phase = rng.uniform(0.0, 2.0 * np.pi)
    yy, xx = np.mgrid[0:s, 0:s].astype(np.float64)
    carrier = np.sin(
        2.0 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / wavelength + phase
    )
    noise = rng.uniform(-0.15, 0.15, size=(config.channels, s, s))
    return base + amplitude * carrier[None, :, :] + noise


def _draw_attributes(rng: np.random.Generator) -> AttributeSet:
    flags = rng.random(4) < 0.5
    return AttributeSet(
        color=COLORS[int(rng.integers(0, len(COLORS)))],
        vtype=VEHICLE_TYPES[int(rng.integers(0, len(VEHICLE_TYPES)))],
        **{name: bool(flags[i]) for i, name in enumerate(BINARY_ATTRIBUTES)},
    )


def generate_dataset(
    config: SynthConfig, seed: int, out_dir: str | Path | None = None
) -> tuple[DatasetManifest, dict[str, np.ndarray]]:
    """Produce the manifest and image tensors for one synthetic dataset.

    When attribute_twins is on, identities 2i and 2i+1 share one attribute
    draw, so every identity has a same-attribute distractor. The first
    config.n_train identities are tagged "train"; the rest stay
    "unassigned-test" until a query/gallery split is applied. Per-image
    randomness is seeded from (seed, identity, image index), so generation
    order does not matter. Deterministic given (config, seed).

    If out_dir is given, tensors are written under out_dir/tensors and
    tensor_ref holds the relative path; otherwise refs use a mem: scheme and
    the returned dict is the only copy.
    """
    size = config.image_size
    tensor_dir = None
    if out_dir is not None:
        tensor_dir = Path(out_dir) / "tensors"
        tensor_dir.mkdir(parents=True, exist_ok=True)

    attributes: list[AttributeSet] = []
    for identity in range(config.n_identities):
        block = identity // 2 if config.attribute_twins else identity
        rng_attr = np.random.default_rng(
            np.random.SeedSequence((config.attribute_seed, 0xA77, block))
        )
        attributes.append(_draw_attributes(rng_attr))

    backgrounds: dict[AttributeSet, np.ndarray] = {}
    records = []
    images: dict[str, np.ndarray] = {}
    for identity in range(config.n_identities):
        attr = attributes[identity]
        if attr not in backgrounds:
            backgrounds[attr] = render_background(attr, size, config.channels)
        texture = identity_texture(seed, identity, config)
        s = texture.shape[1]
        split = "train" if identity < config.n_train else "unassigned-test"

        for j in range(config.images_per_identity):
            camera = j % config.n_cameras
            image_id = f"id{identity:04d}_cam{camera}_{j:02d}"
            rng_img = np.random.default_rng(np.random.SeedSequence((seed, identity, j)))
            img = backgrounds[attr].copy()
            x0 = int(rng_img.integers(_PART_MARGIN, size - s - _PART_MARGIN + 1))
            y0 = int(rng_img.integers(_PART_MARGIN, size - s - _PART_MARGIN + 1))
            img[:, y0 : y0 + s, x0 : x0 + s] = texture
            if config.camera_tint != 0.0:
                img += config.camera_tint * (camera - (config.n_cameras - 1) / 2.0)
            if config.noise_sigma > 0:
                img += rng_img.normal(0.0, config.noise_sigma, size=img.shape)

            if tensor_dir is not None:
                ref = f"tensors/{image_id}.tnsr"
                save_tensor_file(tensor_dir / f"{image_id}.tnsr", img)
            else:
                ref = f"mem:{image_id}"
            images[image_id] = img
            records.append(
                ImageRecord(
                    image_id=image_id,
                    identity_id=identity,
                    camera_id=camera,
                    attributes=attr,
                    parts=(BoundingBox(float(x0), float(y0), float(x0 + s), float(y0 + s)),),
                    tensor_ref=ref,
                    width=size,
                    height=size,
                    split=split,
                )
            )

    manifest = DatasetManifest(records=records)
    if out_dir is not None:
        save_manifest(manifest, Path(out_dir) / "manifest.jsonl")
    return manifest, images


def augment_params(seed: int) -> tuple[int, bool]:
    """Draw the augmentation decision: (clockwise 90-degree turns, flip)."""
    rng = np.random.default_rng(seed)
    turns = 0
    if rng.random() < 0.2:
        turns = int(rng.integers(1, 4))
    flip = bool(rng.random() < 0.5)
    return turns, flip


def apply_augment(image: np.ndarray, turns: int, flip: bool) -> np.ndarray:
    """Rotate clockwise by turns*90 degrees, then optionally flip horizontally."""
    if image.ndim != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"augment needs a square (C, S, S) tensor, got {image.shape}")
    out = image
    if turns:
        out = np.rot90(out, k=-turns, axes=(1, 2))
    if flip:
        out = out[:, :, ::-1]
    return np.ascontiguousarray(out)


def transform_box(box: BoundingBox, size: int, turns: int, flip: bool) -> BoundingBox:
    """Map a part box through the same rotation/flip applied to the image."""
    x0, y0, x1, y1 = box.x_min, box.y_min, box.x_max, box.y_max
    for _ in range(turns % 4):
        # One clockwise quarter turn: (x, y) -> (size - y, x).
        x0, y0, x1, y1 = size - y1, x0, size - y0, x1
    if flip:
        x0, x1 = size - x1, size - x0
    return BoundingBox(x0, y0, x1, y1)


def augment(image: np.ndarray, seed: int) -> np.ndarray:
    """Seeded training augmentation: maybe rotate (p=0.2, uniform quarter turns
    clockwise), then maybe flip horizontally (p=0.5)."""
    turns, flip = augment_params(seed)
    return apply_augment(image, turns, flip)
