"""Compact convolutional embedding model with a batchnorm neck and four
classification heads (identity, color, vehicle type, binary attributes)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import ops
from .data import BINARY_ATTRIBUTES, COLORS, VEHICLE_TYPES
from .errors import ConfigurationError
from .ops import BatchNormState
from .tensor import Tape, Tensor, parameter


@dataclass(frozen=True)
class BackboneConfig:
    """Stride-2 conv stack settings; the last channel count is the embedding dim."""

    in_channels: int = 3
    conv_channels: tuple[int, ...] = (16, 32, 32)
    kernel: int = 3
    stride: int = 2
    image_size: int = 64

    def __post_init__(self):
        if not self.conv_channels:
            raise ConfigurationError("need at least one conv layer")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel size must be odd so padding keeps the grid")
        if self.image_size % self.downsample != 0:
            raise ConfigurationError(
                f"image_size {self.image_size} does not map to an integer grid "
                f"(downsample factor {self.downsample})"
            )

    @property
    def padding(self) -> int:
        return self.kernel // 2

    @property
    def downsample(self) -> int:
        return self.stride ** len(self.conv_channels)

    @property
    def grid_size(self) -> int:
        return self.image_size // self.downsample

    @property
    def embed_dim(self) -> int:
        return self.conv_channels[-1]


class ReidModel:
    """Conv feature extractor + pooling + BN neck + linear heads.

    The triplet losses read the pooled embedding before the neck; the
    classification heads and the retrieval embedding use the neck output.
    Both pooling branches share the same neck parameters and running
    statistics, so uniform pooling weights give identical embeddings.
    """

    def __init__(self, config: BackboneConfig, n_identities: int, seed: int = 0):
        if n_identities < 1:
            raise ConfigurationError("need at least one identity class")
        self.config = config
        self.n_identities = n_identities
        rng = np.random.default_rng(np.random.SeedSequence((seed, 0xB0E)))
        self.params: dict[str, Tensor] = {}

        c_prev = config.in_channels
        for layer, c_out in enumerate(config.conv_channels):
            fan_in = c_prev * config.kernel * config.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(c_out, c_prev, config.kernel, config.kernel))
            self._add(f"conv{layer}.w", w)
            self._add(f"conv{layer}.b", np.zeros(c_out))
            c_prev = c_out

        dim = config.embed_dim
        self._add("neck.gamma", np.ones(dim))
        self._add("neck.beta", np.zeros(dim))
        heads = {
            "head_id": n_identities,
            "head_color": len(COLORS),
            "head_type": len(VEHICLE_TYPES),
            "head_attr": len(BINARY_ATTRIBUTES),
        }
        for name, width in heads.items():
            self._add(f"{name}.w", rng.normal(0.0, np.sqrt(1.0 / dim), size=(dim, width)))
            self._add(f"{name}.b", np.zeros(width))

        self.bn_state = BatchNormState.create(dim)

    def _add(self, name: str, data: np.ndarray) -> None:
        self.params[name] = parameter(data, name=name)

    def features(self, tape: Tape | None, images: Tensor) -> Tensor:
        """Conv stack: (B, C_in, S, S) -> (B, embed_dim, grid, grid)."""
        x = images
        for layer in range(len(self.config.conv_channels)):
            x = ops.conv2d(
                tape,
                x,
                self.params[f"conv{layer}.w"],
                self.params[f"conv{layer}.b"],
                stride=self.config.stride,
                padding=self.config.padding,
            )
            x = ops.relu(tape, x)
        return x

    def pool(self, tape: Tape | None, feats: Tensor, weights: Tensor | None = None) -> Tensor:
        if weights is None:
            return ops.global_avg_pool(tape, feats)
        return ops.weighted_pool(tape, feats, weights)

    def neck(
        self, tape: Tape | None, pooled: Tensor, training: bool, update_running: bool = True
    ) -> Tensor:
        return ops.batchnorm_vec(
            tape,
            pooled,
            self.params["neck.gamma"],
            self.params["neck.beta"],
            self.bn_state,
            training=training,
            update_running=update_running,
        )

    def head_logits(self, tape: Tape | None, necked: Tensor) -> dict[str, Tensor]:
        return {
            name: ops.linear(tape, necked, self.params[f"head_{name}.w"], self.params[f"head_{name}.b"])
            for name in ("id", "color", "type", "attr")
        }

    def state_tensors(self) -> dict[str, np.ndarray]:
        tensors = {name: p.data for name, p in self.params.items()}
        tensors["bn.running_mean"] = self.bn_state.running_mean
        tensors["bn.running_var"] = self.bn_state.running_var
        return tensors

    def load_state_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for name, p in self.params.items():
            if name not in tensors:
                raise ConfigurationError(f"checkpoint is missing parameter {name!r}")
            if tensors[name].shape != p.data.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {name!r} has shape {tensors[name].shape}, "
                    f"expected {p.data.shape}"
                )
            p.data = tensors[name].copy()
        self.bn_state.running_mean = tensors["bn.running_mean"].copy()
        self.bn_state.running_var = tensors["bn.running_var"].copy()


def config_to_dict(config: BackboneConfig) -> dict:
    out = asdict(config)
    out["conv_channels"] = list(config.conv_channels)
    return out


def config_from_dict(obj: dict) -> BackboneConfig:
    data = dict(obj)
    data["conv_channels"] = tuple(data["conv_channels"])
    return BackboneConfig(**data)
