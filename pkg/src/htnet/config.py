"""JSON run configuration shared by every CLI command."""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .features.apex import DEFAULT_BINS, Rect
from .features.farneback import FlowParams
from .model import ModelConfig
from .training import TrainConfig


class RunConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SpotConfig:
    bins: int = DEFAULT_BINS
    # half side of the landmark-centred ROI squares; None -> 8% of the shorter frame side
    roi_half_size: int | None = None
    # explicit ROI rectangles [x0, y0, x1, y1] used instead of landmark squares
    rois: tuple[tuple[int, int, int, int], ...] | None = None

    def rects(self) -> list[Rect] | None:
        return None if self.rois is None else [Rect(*r) for r in self.rois]

    def half_size_for(self, height: int, width: int) -> int:
        if self.roi_half_size is not None:
            return self.roi_half_size
        return max(2, int(round(0.08 * min(height, width))))

    def to_dict(self) -> dict:
        return {
            "bins": self.bins,
            "roi_half_size": self.roi_half_size,
            "rois": None if self.rois is None else [list(r) for r in self.rois],
        }


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    flow: FlowParams = field(default_factory=FlowParams)
    spotting: SpotConfig = field(default_factory=SpotConfig)

    def with_seed(self, seed: int | None) -> RunConfig:
        seed = self.seed if seed is None else seed
        return replace(self, seed=seed, train=replace(self.train, seed=seed))

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "flow": self.flow.to_dict(),
            "spotting": self.spotting.to_dict(),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> RunConfig:
        unknown = set(obj) - {"seed", "model", "train", "flow", "spotting"}
        if unknown:
            raise RunConfigError(f"unknown config sections: {sorted(unknown)}")
        try:
            spot = dict(obj.get("spotting", {}))
            if spot.get("rois") is not None:
                spot["rois"] = tuple(tuple(int(v) for v in r) for r in spot["rois"])
            cfg = cls(
                seed=int(obj.get("seed", 0)),
                model=ModelConfig.from_dict(obj.get("model", {})),
                train=TrainConfig.from_dict(obj.get("train", {})),
                flow=FlowParams(**obj.get("flow", {})),
                spotting=SpotConfig(**spot),
            )
        except (TypeError, ValueError) as exc:
            raise RunConfigError(f"invalid run config: {exc}") from exc
        return cfg.with_seed(None)


def load_run_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        obj = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise RunConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(obj)


def dump_run_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2) + "\n"


def synth_run_config(seed: int = 0) -> RunConfig:
    """Desk-scale settings for the bundled synthetic corpus."""
    return RunConfig(
        seed=seed,
        model=ModelConfig(
            dims=(16, 32, 48), heads=(2, 2, 2), head_dim=8, layers=(1, 1, 1), head_hidden=32
        ),
        train=TrainConfig(learning_rate=1e-3, epochs=40, batch_size=32, seed=seed),
    )
