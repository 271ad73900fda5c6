"""Epoch-checkpointed SGD training with step learning-rate schedules and weight masks."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F

from .model import (
    Checkpoint,
    ModelSpec,
    ResNet,
    decode_tensors,
    encode_tensors,
    load_checkpoint,
    load_named_tensors,
    named_tensors,
    save_checkpoint,
)

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, message: str):
        super().__init__(f"epoch {epoch}: {message}")
        self.epoch = epoch


@dataclass(frozen=True)
class TrainingSchedule:
    epochs: int
    lr: float = 0.1
    decay_factor: float = 10.0
    decay_epochs: tuple[int, ...] = ()
    batch_size: int = 64
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "decay_epochs", tuple(self.decay_epochs))
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.decay_factor <= 0:
            raise ValueError("decay factor must be positive")
        d = self.decay_epochs
        if any(b <= a for a, b in zip(d, d[1:])):
            raise ValueError("decay epochs must be strictly increasing")
        if d and (d[0] < 0 or d[-1] >= max(self.epochs, 1)):
            raise ValueError("decay epochs must lie in [0, epochs)")
        if self.batch_size <= 0:
            raise ValueError("batch size must be positive")


def learning_rate_at(schedule: TrainingSchedule, epoch: int) -> float:
    """``lr / factor**k`` where ``k`` counts the decay epochs <= ``epoch``."""
    if not 0 <= epoch < schedule.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {schedule.epochs})")
    passed = sum(1 for d in schedule.decay_epochs if d <= epoch)
    return schedule.lr / schedule.decay_factor**passed


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Batch order for an epoch; a pure function of (seed, epoch)."""
    return np.random.default_rng([seed, epoch]).permutation(n)


@dataclass
class Snapshot:
    """Model tensors and optimizer state at the start of ``epoch``."""

    epoch: int
    tensors: dict[str, np.ndarray]
    momentum: dict[str, np.ndarray]
    rng_state: dict = field(default_factory=dict)


@dataclass
class CheckpointSeries:
    schedule: TrainingSchedule
    snapshots: dict[int, Snapshot] = field(default_factory=dict)
    spec_hash: str = ""
    spec: ModelSpec | None = None
    lr_trace: list[tuple[int, int, float]] = field(default_factory=list)

    def __getitem__(self, epoch: int) -> Snapshot:
        try:
            return self.snapshots[epoch]
        except KeyError:
            raise KeyError(f"no snapshot for epoch {epoch}") from None

    def __contains__(self, epoch):
        return epoch in self.snapshots

    @property
    def epochs(self) -> list[int]:
        return sorted(self.snapshots)

    def final(self) -> Snapshot:
        return self.snapshots[max(self.snapshots)]

    def save(self, directory) -> None:
        """``epoch_<e>/`` checkpoints plus optimizer.bin, rng.bin and series.json."""
        directory = Path(directory)
        entries = []
        for e in self.epochs:
            snap = self.snapshots[e]
            d = directory / f"epoch_{e}"
            save_checkpoint(d, Checkpoint(e, snap.tensors, self.spec_hash, snap.rng_state))
            (d / "optimizer.bin").write_bytes(encode_tensors(snap.momentum))
            (d / "rng.bin").write_bytes(json.dumps(snap.rng_state, sort_keys=True).encode())
            h = hashlib.sha256()
            for name in ("manifest.json", "tensors.bin", "optimizer.bin", "rng.bin"):
                h.update((d / name).read_bytes())
            entries.append({"epoch": e, "sha256": h.hexdigest()})
        manifest = {
            "schedule": asdict(self.schedule),
            "spec": asdict(self.spec) if self.spec else None,
            "spec_hash": self.spec_hash,
            "epochs": entries,
        }
        (directory / "series.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, verify: bool = True) -> "CheckpointSeries":
        directory = Path(directory)
        manifest = json.loads((directory / "series.json").read_text())
        schedule = TrainingSchedule(**manifest["schedule"])
        spec = ModelSpec(**manifest["spec"]) if manifest.get("spec") else None
        series = cls(schedule, spec_hash=manifest["spec_hash"], spec=spec)
        for entry in manifest["epochs"]:
            d = directory / f"epoch_{entry['epoch']}"
            if verify:
                h = hashlib.sha256()
                for name in ("manifest.json", "tensors.bin", "optimizer.bin", "rng.bin"):
                    h.update((d / name).read_bytes())
                if h.hexdigest() != entry["sha256"]:
                    raise ValueError(f"{d}: content hash mismatch")
            ckpt = load_checkpoint(d)
            momentum = decode_tensors((d / "optimizer.bin").read_bytes())
            series.snapshots[ckpt.epoch] = Snapshot(ckpt.epoch, ckpt.tensors, momentum, ckpt.rng_state)
        return series


def _prunable_params(model, mask):
    if mask is None:
        return []
    params = dict(model.named_parameters())
    return [(params[name], torch.from_numpy(~np.asarray(m, dtype=bool))) for name, m in mask.masks.items()]


def apply_mask(model, mask) -> None:
    """Zero masked positions of ``model``'s weights in place."""
    with torch.no_grad():
        # masked_fill keeps pruned entries at +0.0 (a multiply would leave -0.0)
        for p, dropped in _prunable_params(model, mask):
            p.masked_fill_(dropped, 0.0)


def _make_optimizer(model, schedule: TrainingSchedule, momentum_state: dict[str, np.ndarray] | None):
    opt = torch.optim.SGD(
        model.parameters(),
        lr=schedule.lr,
        momentum=schedule.momentum,
        weight_decay=schedule.weight_decay,
        foreach=False,
    )
    if momentum_state:
        for name, p in model.named_parameters():
            if name in momentum_state:
                opt.state[p]["momentum_buffer"] = torch.from_numpy(
                    np.array(momentum_state[name], dtype=np.float32)
                )
    return opt


def _momentum_state(model, opt) -> dict[str, np.ndarray]:
    out = {}
    for name, p in model.named_parameters():
        buf = opt.state.get(p, {}).get("momentum_buffer")
        out[name] = (
            buf.detach().numpy().copy() if buf is not None else np.zeros(tuple(p.shape), np.float32)
        )
    return out


def _rng_state(schedule: TrainingSchedule, epoch: int) -> dict:
    # Data order is derived from (seed, epoch); this is the full RNG state.
    return {"seed": schedule.seed, "epoch": epoch, "order": "numpy.default_rng([seed, epoch])"}


def train(
    model: ResNet,
    dataset,
    schedule: TrainingSchedule,
    mask=None,
    start_epoch: int = 0,
    stop_epoch: int | None = None,
    momentum_state: dict[str, np.ndarray] | None = None,
    callback: Callable[[int, int, float, float], None] | None = None,
) -> tuple[CheckpointSeries, ResNet]:
    """Train ``model`` in place from ``start_epoch`` up to ``stop_epoch`` (default T).

    The learning rate in epoch ``e`` is ``learning_rate_at(schedule, e)``
    whatever the start epoch. A snapshot is recorded at the start of every
    epoch and after the last one. ``callback(epoch, step, lr, loss)`` is
    called after every optimizer step.
    """
    T = schedule.epochs
    stop = T if stop_epoch is None else stop_epoch
    if not 0 <= start_epoch <= stop <= T:
        raise ValueError(f"need 0 <= start_epoch ({start_epoch}) <= stop ({stop}) <= T ({T})")
    spec = getattr(model, "spec", None)
    series = CheckpointSeries(schedule, spec_hash=spec.digest() if spec else "", spec=spec)
    masks = _prunable_params(model, mask)
    apply_mask(model, mask)
    opt = _make_optimizer(model, schedule, momentum_state)
    if masks and momentum_state:
        with torch.no_grad():
            for p, dropped in masks:
                opt.state[p]["momentum_buffer"].masked_fill_(dropped, 0.0)

    def snapshot(epoch):
        series.snapshots[epoch] = Snapshot(
            epoch, named_tensors(model), _momentum_state(model, opt), _rng_state(schedule, epoch)
        )

    x_all = torch.as_tensor(np.asarray(dataset.images, dtype=np.float32))
    y_all = torch.as_tensor(np.asarray(dataset.labels, dtype=np.int64))
    n = len(y_all)
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(True)
    try:
        snapshot(start_epoch)
        for epoch in range(start_epoch, stop):
            lr = learning_rate_at(schedule, epoch)
            for group in opt.param_groups:
                group["lr"] = lr
            model.train()
            order = torch.from_numpy(epoch_order(schedule.seed, epoch, n))
            total = 0.0
            for step, i in enumerate(range(0, n, schedule.batch_size)):
                idx = order[i : i + schedule.batch_size]
                loss = F.cross_entropy(model(x_all[idx]), y_all[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(epoch, f"non-finite loss at step {step}")
                opt.zero_grad(set_to_none=False)
                loss.backward()
                with torch.no_grad():
                    for p, dropped in masks:
                        p.grad.masked_fill_(dropped, 0.0)
                opt.step()
                with torch.no_grad():
                    for p, dropped in masks:
                        p.masked_fill_(dropped, 0.0)
                series.lr_trace.append((epoch, step, lr))
                total += float(loss.detach()) * len(idx)
                if callback is not None:
                    callback(epoch, step, lr, float(loss.detach()))
            model.eval()
            log.info("stage=train epoch=%d lr=%g loss=%.4f", epoch, lr, total / max(n, 1))
            snapshot(epoch + 1)
    finally:
        torch.use_deterministic_algorithms(prev)
    model.eval()
    return series, model


def restore(model: ResNet, snapshot: Snapshot) -> ResNet:
    load_named_tensors(model, snapshot.tensors)
    model.eval()
    return model


def finetune_standard(model: ResNet, mask, epochs: int, schedule: TrainingSchedule, dataset, callback=None) -> ResNet:
    """Continue training at the schedule's final learning rate for ``epochs`` epochs."""
    if epochs == 0:
        apply_mask(model, mask)
        return model
    final_lr = learning_rate_at(schedule, schedule.epochs - 1)
    constant = replace(schedule, epochs=epochs, lr=final_lr, decay_epochs=())
    _, model = train(model, dataset, constant, mask=mask, callback=callback)
    return model
