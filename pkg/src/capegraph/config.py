"""Run configuration: one JSON file, every field optional, CLI flags override."""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig


@dataclass
class RunConfig:
    # model
    image_size: int = 128
    channels: int = 64
    encoder_layers: int = 3
    decoder_layers: int = 3
    heads: int = 4
    mask_variance: float = 1.0
    heatmap_sigma: float = 2.0
    lambda_heatmap: float = 2.0
    use_graph: bool = True
    # episodes
    n_shots: int = 1
    # optimizer
    lr: float = 1e-3
    decay_epochs: list[int] = field(default_factory=lambda: [24, 27])
    decay_factor: float = 0.1
    batch_size: int = 8
    epochs: int = 30
    episodes_per_epoch: int = 900
    grad_clip: float = 1.0
    # data
    seed: int = 0
    n_train: int = 20
    n_val: int = 5
    n_test: int = 10
    k_min: int = 4
    k_max: int = 8
    edge_density: float = 0.15
    noise_std: float = 0.05
    repaint_train: bool = True  # redraw node intensities per training episode
    layout_jitter: float = 0.04  # std of per-episode layout noise on training categories
    annotations: str | None = None
    val_episodes: int = 50
    eval_episodes: int = 50
    # output
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("image_size", "channels", "encoder_layers", "heads", "batch_size", "epochs",
                     "episodes_per_epoch", "n_train", "n_val", "n_test"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.layout_jitter < 0:
            raise ValueError("layout_jitter must be non-negative")
        if self.decoder_layers < 0:
            raise ValueError("decoder_layers must be non-negative")
        if self.n_shots not in (1, 5):
            raise ValueError(f"n_shots must be 1 or 5, got {self.n_shots}")
        if any(not 0 < e < self.epochs for e in self.decay_epochs):
            raise ValueError(f"decay epochs {self.decay_epochs} must lie in (0, {self.epochs})")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")
        if self.channels % 16:
            raise ValueError("channels must be divisible by 16 (4 heads x sin/cos per axis)")

    def model(self) -> ModelConfig:
        return ModelConfig(self.image_size, self.channels, 1, self.encoder_layers,
                           self.decoder_layers, self.heads, self.mask_variance,
                           self.heatmap_sigma, self.lambda_heatmap, self.use_graph)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, path: str | Path | None = None, **overrides) -> "RunConfig":
        data = json.loads(Path(path).read_text()) if path else {}
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_dict(data)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def reference_schedule() -> dict:
    """Overrides reproducing the published recipe (200 epochs, lr 1e-5, decay at 160/180)."""
    return {"epochs": 200, "lr": 1e-5, "decay_epochs": [160, 180], "batch_size": 16}
