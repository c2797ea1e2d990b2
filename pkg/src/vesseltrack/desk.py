"""The desk-scale preset: configurations, phantom datasets and a model cache."""

from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import asdict, dataclass, replace

import numpy as np

from . import cnn, phantom
from .proximity import OSTIA_PROXIMITY, SEED_PROXIMITY, ProximityConfig
from .sphere import fibonacci_codebook
from .training import TrainConfig, TrainingData, train, train_proximity
from .volume import PatchSpec

log = logging.getLogger(__name__)

DESK_CHANNELS = (16, 16, 16, 16, 32, 32)
DESK_NDIRS = 100
DESK_PATCH = PatchSpec(width=19, voxel_mm=0.5, pad_value=0.0)
DESK_TRAIN = TrainConfig(batch_size=32, iterations=3000, lr=0.01, lr_decay=0.1, lr_interval=1000,
                         background_fraction=0.2, end_fraction=0.5)
PROXIMITY_TRAIN = replace(DESK_TRAIN, background_fraction=0.0, end_fraction=0.0)

# which models exist and how each one is trained
MODEL_KINDS = ("tracker", "tracker-notrans", "proximity-seeds", "proximity-ostia")
# ostia are learned only where vessels leave a trunk; the free tube phantoms
# mark their start points as ostia, which would teach "tube end = ostium"
OSTIA_SOURCES = ("branching",)


@dataclass(frozen=True)
class ModelRecipe:
    kind: str
    train: TrainConfig
    seed: int = 0

    def key(self) -> str:
        text = f"{self.kind}|{sorted(asdict(self.train).items())}|{self.seed}|{DESK_CHANNELS}|{DESK_NDIRS}|{DESK_PATCH}"
        if self.kind == "proximity-ostia":
            text += f"|{OSTIA_SOURCES}"
        return hashlib.sha1(text.encode()).hexdigest()[:12]


def recipe(kind: str, iterations: int | None = None, seed: int = 0) -> ModelRecipe:
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}")
    cfg = PROXIMITY_TRAIN if kind.startswith("proximity") else DESK_TRAIN
    if kind == "tracker-notrans":
        cfg = replace(cfg, translation_augment=False)
    if iterations is not None:
        cfg = replace(cfg, iterations=iterations)
    return ModelRecipe(kind, cfg, seed)


def load_dataset(specs) -> list[TrainingData]:
    out = []
    for spec in specs:
        vol, refs, ostia = phantom.rasterize(spec)
        out.append(TrainingData(vol, refs, ostia, spec.name))
    return out


def tracker_spec() -> cnn.NetworkSpec:
    return cnn.table1_spec(DESK_NDIRS, channels=DESK_CHANNELS)


def proximity_spec(cfg: ProximityConfig) -> cnn.NetworkSpec:
    return cnn.table1_spec(0, channels=DESK_CHANNELS, head="proximity", output_scale=cfg.peak)


def ostia_data(data: list[TrainingData]) -> list[TrainingData]:
    return [d for d in data if d.name.split("-")[0] in OSTIA_SOURCES]


def train_model(rec: ModelRecipe, data: list[TrainingData], progress=None) -> cnn.NetworkParams:
    if rec.kind.startswith("tracker"):
        params, losses = train(data, rec.train, tracker_spec(), fibonacci_codebook(DESK_NDIRS), DESK_PATCH,
                               seed=rec.seed, progress=progress)
    else:
        pcfg = SEED_PROXIMITY if rec.kind == "proximity-seeds" else OSTIA_PROXIMITY
        targets = "centerlines" if rec.kind == "proximity-seeds" else "ostia"
        if targets == "ostia":
            data = ostia_data(data)
        params, losses = train_proximity(data, rec.train, proximity_spec(pcfg), pcfg, targets,
                                         seed=rec.seed, progress=progress)
    params.meta["kind"] = rec.kind
    params.meta["loss_first"] = repr(float(losses[0])) if len(losses) else "nan"
    params.meta["loss_last"] = repr(float(np.mean(losses[-20:]))) if len(losses) else "nan"
    return params


def cached_model(rec: ModelRecipe, cache_dir, data: list[TrainingData] | None = None,
                 progress=None) -> cnn.NetworkParams:
    """Load the model for ``rec`` from ``cache_dir`` or train and store it."""
    path = os.path.join(cache_dir, f"{rec.kind}-{rec.key()}.vtw")
    if os.path.exists(path):
        return cnn.load_weights(path)
    if data is None:
        train_specs, _ = phantom.desk_split()
        data = load_dataset(train_specs)
    log.info("training %s (%d iterations) into %s", rec.kind, rec.train.iterations, path)
    params = train_model(rec, data, progress)
    os.makedirs(cache_dir, exist_ok=True)
    tmp = path + ".tmp"
    cnn.save_weights(params, tmp)
    os.replace(tmp, path)
    return cnn.load_weights(path)
