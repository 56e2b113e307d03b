"""Architecture and deployment configuration."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from .errors import ConfigError

ACTIVATIONS = ("relu", "gelu")


@dataclass(frozen=True)
class TransformerConfig:
    """All hyperparameters of the model and its deployment.

    `devices` is the number of virtual devices the feature dimension is split
    across; `bytes_per_element` is used for byte accounting only (the numeric
    path is always 32-bit float).
    """

    layers: int
    features: int
    heads: int
    tokens: int
    mlp_hidden: int | None = None
    mlp_layers: int = 1
    activation: str = "gelu"
    devices: int = 1
    bytes_per_element: int = 1

    def __post_init__(self):
        if self.mlp_hidden is None:
            object.__setattr__(self, "mlp_hidden", 2 * self.features)
        self.validate()

    def validate(self) -> None:
        if self.layers < 0:
            raise ConfigError("layers must be >= 0")
        for name in ("features", "heads", "tokens", "mlp_hidden", "mlp_layers",
                     "devices", "bytes_per_element"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.features % self.heads:
            raise ConfigError(
                f"heads ({self.heads}) must divide features ({self.features})")
        if self.features % self.devices:
            raise ConfigError(
                f"devices ({self.devices}) must divide features ({self.features})")
        if self.heads % self.devices:
            raise ConfigError(
                f"devices ({self.devices}) must divide heads ({self.heads}); "
                "each attention head runs on exactly one device, so the head "
                "count upper-bounds the device count")
        if self.mlp_hidden % self.devices:
            raise ConfigError(
                f"devices ({self.devices}) must divide mlp_hidden ({self.mlp_hidden})")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")

    # Derived sizes -----------------------------------------------------

    @property
    def cols_per_device(self) -> int:
        return self.features // self.devices

    @property
    def mlp_cols_per_device(self) -> int:
        return self.mlp_hidden // self.devices

    @property
    def head_dim(self) -> int:
        return self.features // self.heads

    @property
    def heads_per_device(self) -> int:
        return self.heads // self.devices

    @property
    def mlp_weight_count(self) -> int:
        """Number of weight matrices in the residual block (hidden layers + 1)."""
        return self.mlp_layers + 1

    def mlp_weight_shapes(self) -> list[tuple[int, int]]:
        shapes = []
        for i in range(self.mlp_weight_count):
            rows = self.features if i == 0 else self.mlp_hidden
            cols = self.features if i == self.mlp_weight_count - 1 else self.mlp_hidden
            shapes.append((rows, cols))
        return shapes

    def weight_elements(self) -> int:
        """Total weight-matrix elements across all layers (layernorm excluded)."""
        per_layer = 4 * self.features * self.features
        per_layer += sum(r * c for r, c in self.mlp_weight_shapes())
        return self.layers * per_layer

    # Serialization -----------------------------------------------------

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TransformerConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def from_json_file(cls, path) -> "TransformerConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def with_overrides(self, **kwargs) -> "TransformerConfig":
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        return replace(self, **kwargs) if kwargs else self
