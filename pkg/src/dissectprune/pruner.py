"""Unstructured magnitude pruning, lottery-ticket rewinding and replay."""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .model import ResNet, build_model, load_named_tensors, named_tensors
from .trainer import CheckpointSeries, apply_mask, finetune_standard, restore, train

log = logging.getLogger(__name__)


class ScheduleExhaustedError(ValueError):
    pass


def default_prunable(name: str, tensor: np.ndarray) -> bool:
    """Convolution and fully-connected weights; biases and norm parameters are exempt."""
    return name.endswith(".weight") and np.ndim(tensor) in (2, 4)


@dataclass(frozen=True)
class PruneConfig:
    fraction: float = 0.2
    scope: str = "global"
    prunable: Callable[[str, np.ndarray], bool] = default_prunable

    def __post_init__(self):
        if not 0 < self.fraction < 1:
            raise ValueError("prune fraction must be in (0, 1)")
        if self.scope not in ("global", "layer"):
            raise ValueError("scope must be 'global' or 'layer'")

    def digest(self) -> str:
        blob = json.dumps({"fraction": self.fraction, "scope": self.scope,
                           "prunable": getattr(self.prunable, "__name__", repr(self.prunable))})
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class PruningMask:
    """Boolean keep-masks (True = keep) over the prunable tensors."""

    masks: dict[str, np.ndarray]
    round: int = 0
    parent_hash: str = ""

    @classmethod
    def full(cls, tensors: dict[str, np.ndarray], config: PruneConfig | None = None) -> "PruningMask":
        config = config or PruneConfig()
        return cls({k: np.ones(np.shape(v), dtype=bool) for k, v in sorted(tensors.items())
                    if config.prunable(k, v)})

    @property
    def kept(self) -> int:
        return int(sum(int(m.sum()) for m in self.masks.values()))

    @property
    def total(self) -> int:
        return int(sum(m.size for m in self.masks.values()))

    @property
    def fraction_remaining(self) -> float:
        return self.kept / self.total

    def is_subset_of(self, other: "PruningMask") -> bool:
        return self.masks.keys() == other.masks.keys() and all(
            not np.any(self.masks[k] & ~other.masks[k]) for k in self.masks
        )

    def apply(self, tensors: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        out = dict(tensors)
        for k, m in self.masks.items():
            out[k] = np.where(m, tensors[k], np.float32(0)).astype(np.float32)
        return out

    def digest(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self.masks):
            h.update(k.encode())
            h.update(str(self.masks[k].shape).encode())
            h.update(np.packbits(self.masks[k].ravel()).tobytes())
        return h.hexdigest()

    def save(self, directory, config: PruneConfig | None = None) -> None:
        """One packed bitset per tensor plus ``mask.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        files = {}
        for k in sorted(self.masks):
            fname = f"{k}.bits"
            (directory / fname).write_bytes(np.packbits(self.masks[k].ravel()).tobytes())
            files[k] = {"file": fname, "shape": list(self.masks[k].shape)}
        manifest = {
            "round": self.round,
            "fraction_remaining": self.fraction_remaining,
            "kept": self.kept,
            "total": self.total,
            "config_hash": config.digest() if config else "",
            "parent_hash": self.parent_hash,
            "mask_hash": self.digest(),
            "tensors": files,
        }
        (directory / "mask.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "PruningMask":
        directory = Path(directory)
        manifest = json.loads((directory / "mask.json").read_text())
        masks = {}
        for k, entry in manifest["tensors"].items():
            shape = tuple(entry["shape"])
            bits = np.frombuffer((directory / entry["file"]).read_bytes(), dtype=np.uint8)
            masks[k] = np.unpackbits(bits, count=math.prod(shape)).astype(bool).reshape(shape)
        mask = cls(masks, manifest["round"], manifest["parent_hash"])
        if mask.digest() != manifest["mask_hash"]:
            raise ValueError(f"{directory}: mask hash mismatch")
        return mask


def _drop_smallest(values: list[np.ndarray], n_drop: int) -> list[np.ndarray]:
    """Indices (per array) of the ``n_drop`` smallest magnitudes.

    Ties go to the earlier array, then the lower flat index.
    """
    flat = np.concatenate([np.abs(v) for v in values]) if values else np.zeros(0)
    order = np.argsort(flat, kind="stable")[:n_drop]
    sizes = np.cumsum([0] + [v.size for v in values])
    return [order[(order >= lo) & (order < hi)] - lo for lo, hi in zip(sizes[:-1], sizes[1:])]


def magnitude_prune(
    weights: dict[str, np.ndarray],
    mask: PruningMask,
    config: PruneConfig,
    n_drop: int | None = None,
) -> PruningMask:
    """Drop the lowest-magnitude kept weights.

    By default ``floor(fraction * kept)`` positions go (per tensor for layer
    scope). ``n_drop`` overrides the global count.
    """
    names = sorted(mask.masks)
    kept_idx = {k: np.flatnonzero(mask.masks[k].ravel()) for k in names}
    kept_vals = {k: np.asarray(weights[k], dtype=np.float32).ravel()[kept_idx[k]] for k in names}
    new = {k: mask.masks[k].copy() for k in names}
    if config.scope == "global":
        kept = sum(v.size for v in kept_vals.values())
        count = math.floor(config.fraction * kept) if n_drop is None else n_drop
        if count >= kept:
            raise ScheduleExhaustedError("pruning would leave no weights")
        drops = _drop_smallest([kept_vals[k] for k in names], count)
        for k, d in zip(names, drops):
            new[k].ravel()[kept_idx[k][d]] = False
    else:
        if n_drop is not None:
            raise ValueError("n_drop is only meaningful for global scope")
        for k in names:
            count = math.floor(config.fraction * kept_vals[k].size)
            if kept_vals[k].size and count >= kept_vals[k].size:
                raise ScheduleExhaustedError(f"pruning would empty {k}")
            (d,) = _drop_smallest([kept_vals[k]], count)
            new[k].ravel()[kept_idx[k][d]] = False
    return PruningMask(new, mask.round + 1, mask.digest())


def sparsity_after_rounds(r: int, fraction: float = 0.2) -> float:
    if r < 0:
        raise ValueError("r must be >= 0")
    return (1.0 - fraction) ** r


def scheduled_drop(mask: PruningMask, fraction: float = 0.2) -> int:
    """Positions to drop next so that kept == round(total * (1 - fraction)**(round + 1))."""
    target = round(mask.total * sparsity_after_rounds(mask.round + 1, fraction))
    return mask.kept - target


def rewind(series: CheckpointSeries, rewind_epoch: int, mask: PruningMask) -> ResNet:
    """Fresh model holding the epoch-``rewind_epoch`` snapshot with ``mask`` applied."""
    snap = series[rewind_epoch]
    if series.spec is None:
        raise ValueError("checkpoint series carries no model spec")
    model = restore(build_model(series.spec, 0), snap)
    apply_mask(model, mask)
    return model


def replay(
    model: ResNet,
    mask: PruningMask,
    series: CheckpointSeries,
    rewind_epoch: int,
    dataset,
    replay_epochs: int | None = None,
    callback=None,
) -> tuple[CheckpointSeries, ResNet]:
    """Retrain a rewound model from ``rewind_epoch`` under the original schedule.

    ``replay_epochs`` shorter than the remaining schedule stops early.
    Optimizer momentum is restored from the snapshot (masked).
    """
    T = series.schedule.epochs
    stop = T if replay_epochs is None else min(T, rewind_epoch + replay_epochs)
    momentum = mask.apply(series[rewind_epoch].momentum) if mask else series[rewind_epoch].momentum
    return train(
        model, dataset, series.schedule, mask=mask, start_epoch=rewind_epoch,
        stop_epoch=stop, momentum_state=momentum, callback=callback,
    )


@dataclass
class PruneRound:
    round: int
    mask: PruningMask
    model: ResNet
    series: CheckpointSeries | None = None
    extra: dict = field(default_factory=dict)


def prune_round(
    weights: dict[str, np.ndarray],
    mask: PruningMask,
    config: PruneConfig,
    series: CheckpointSeries,
    dataset,
    mode: str = "rewind",
    rewind_epoch: int = 0,
    replay_epochs: int | None = None,
    finetune_epochs: int = 1,
) -> PruneRound:
    """Prune ``weights`` one step and retrain the survivors."""
    n_drop = scheduled_drop(mask, config.fraction) if config.scope == "global" else None
    new_mask = magnitude_prune(weights, mask, config, n_drop=n_drop)
    if mode == "rewind":
        model = rewind(series, rewind_epoch, new_mask)
        run, model = replay(model, new_mask, series, rewind_epoch, dataset, replay_epochs)
    elif mode == "standard-finetune":
        model = build_model(series.spec, 0)
        load_named_tensors(model, weights)
        apply_mask(model, new_mask)
        model = finetune_standard(model, new_mask, finetune_epochs, series.schedule, dataset)
        run = None
    else:
        raise ValueError(f"unknown mode {mode!r}")
    log.info("stage=prune round=%d fraction_remaining=%.6f", new_mask.round, new_mask.fraction_remaining)
    return PruneRound(new_mask.round, new_mask, model, run)


def iterate_prune(
    series: CheckpointSeries,
    config: PruneConfig,
    rounds: int,
    dataset,
    mode: str = "rewind",
    rewind_epoch: int = 0,
    replay_epochs: int | None = None,
    finetune_epochs: int = 1,
) -> list[PruneRound]:
    """Prune, retrain, repeat; each round prunes the previous round's trained weights."""
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    weights = series.final().tensors
    mask = PruningMask.full(weights, config)
    out = []
    for _ in range(rounds):
        result = prune_round(weights, mask, config, series, dataset, mode,
                             rewind_epoch, replay_epochs, finetune_epochs)
        out.append(result)
        mask = result.mask
        weights = named_tensors(result.model)
    return out
