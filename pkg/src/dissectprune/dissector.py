"""Network dissection: quantile thresholds, upsampled segmentations, dataset IoU."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .concept_data import ConceptDataset, to_model_input
from .model import ResNet, layer_activations, tensors_digest, named_tensors

TOP_QUANTILE = 0.995
IOU_THRESHOLD = 0.05
RESERVOIR_SIZE = 1_000_000


@dataclass(frozen=True)
class UnitThreshold:
    unit: int
    threshold: float
    sample_size: int


@dataclass
class UnitDissection:
    unit: int
    layer: str
    threshold: float
    best_concept: int | None
    best_iou: float
    interpretable: bool
    ious: np.ndarray | None = None  # indexed by concept_id - 1


@dataclass
class DissectionReport:
    layers: list[str]
    units: list[UnitDissection]
    dataset_hash: str = ""
    model_hash: str = ""
    mask_hash: str = ""
    concept_names: dict[int, tuple[str, str]] = field(default_factory=dict)

    def interpretable_units(self) -> set[tuple[str, int]]:
        return {(u.layer, u.unit) for u in self.units if u.interpretable}

    def to_json(self) -> dict:
        return {
            "header": {
                "model_hash": self.model_hash,
                "mask_hash": self.mask_hash,
                "dataset_hash": self.dataset_hash,
                "layers": list(self.layers),
                "thresholds": [[u.layer, u.unit, u.threshold] for u in self.units],
            },
            "units": [
                {
                    "unit": u.unit,
                    "layer": u.layer,
                    "threshold": u.threshold,
                    "best_concept": u.best_concept,
                    "best_concept_name": self.concept_names.get(u.best_concept, (None, None))[0],
                    "category": self.concept_names.get(u.best_concept, (None, None))[1],
                    "best_iou": u.best_iou,
                    "interpretable": u.interpretable,
                }
                for u in self.units
            ],
        }

    def save(self, path, iou_table=None) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        if iou_table is not None:
            lines = ["layer,unit,concept_id,iou"]
            for u in self.units:
                if u.ious is not None:
                    lines.extend(f"{u.layer},{u.unit},{c + 1},{v!r}" for c, v in enumerate(u.ious.tolist()))
            Path(iou_table).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "DissectionReport":
        data = json.loads(Path(path).read_text())
        head = data["header"]
        units, names = [], {}
        for rec in data["units"]:
            units.append(UnitDissection(rec["unit"], rec["layer"], rec["threshold"],
                                        rec["best_concept"], rec["best_iou"], rec["interpretable"]))
            if rec["best_concept"] is not None:
                names[rec["best_concept"]] = (rec["best_concept_name"], rec["category"])
        return cls(head["layers"], units, head["dataset_hash"], head["model_hash"], head["mask_hash"], names)


def upper_quantile(values: np.ndarray, q: float = TOP_QUANTILE) -> float:
    """Smallest sample value v with empirical P(X <= v) >= q."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise ValueError("empty sample")
    k = int(np.ceil(q * v.size - 1e-9))
    return float(v[max(k, 1) - 1])


def reservoir(values: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample of at most ``size`` values without replacement."""
    values = np.asarray(values).ravel()
    if values.size <= size:
        return values
    return values[np.sort(rng.choice(values.size, size, replace=False))]


def compute_thresholds(
    activations: np.ndarray,
    q: float = TOP_QUANTILE,
    max_samples: int = RESERVOIR_SIZE,
    seed: int = 0,
) -> list[UnitThreshold]:
    """Per-unit thresholds from N x K x H x W activations pooled over images and positions."""
    acts = np.asarray(activations)
    if acts.shape[0] == 0:
        raise ValueError("no profiling images")
    if not np.all(np.isfinite(acts)):
        raise ValueError("non-finite activations")
    rng = np.random.default_rng(seed)
    out = []
    for k in range(acts.shape[1]):
        sample = reservoir(acts[:, k], max_samples, rng)
        out.append(UnitThreshold(k, upper_quantile(sample, q), int(sample.size)))
    return out


def _interp_matrix(n_out: int, n_in: int) -> np.ndarray:
    """Corner-aligned linear interpolation weights, shape n_out x n_in."""
    m = np.zeros((n_out, n_in))
    if n_in == 1:
        m[:, 0] = 1.0
        return m
    pos = np.arange(n_out) * (n_in - 1) / max(n_out - 1, 1)
    lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
    frac = pos - lo
    m[np.arange(n_out), lo] = 1.0 - frac
    m[np.arange(n_out), lo + 1] += frac
    return m


def upsample_activation(amap: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear upsampling with the corner pixels of source and target aligned.

    Accepts a single H_a x W_a map or a stack (... x H_a x W_a).
    """
    amap = np.asarray(amap, dtype=np.float64)
    h, w = amap.shape[-2:]
    if h == 0 or w == 0:
        raise ValueError("cannot upsample an empty map")
    if target[0] < h or target[1] < w:
        raise ValueError(f"target {target} smaller than source {(h, w)}")
    if (h, w) == tuple(target):
        return amap.copy()
    return _interp_matrix(target[0], h) @ amap @ _interp_matrix(target[1], w).T


def segment(upsampled: np.ndarray, threshold) -> np.ndarray:
    t = threshold.threshold if isinstance(threshold, UnitThreshold) else threshold
    return np.asarray(upsampled) > t


class IoUAccumulator:
    """Running |seg & label| and |seg | label| sums per (unit, concept)."""

    def __init__(self, n_units: int, n_concepts: int):
        self.inter = np.zeros((n_units, n_concepts), dtype=np.int64)
        self.union = np.zeros((n_units, n_concepts), dtype=np.int64)

    def add(self, seg: np.ndarray, labels: dict[str, np.ndarray]) -> None:
        """``seg``: K x H x W bool; ``labels``: per-category H x W concept-id maps."""
        k = seg.shape[0]
        flat = seg.reshape(k, -1).astype(np.int64)
        seg_count = flat.sum(1)
        n = self.inter.shape[1]
        for lab in labels.values():
            ids = lab.ravel()
            onehot = np.zeros((ids.size, n + 1), dtype=np.int64)
            onehot[np.arange(ids.size), ids] = 1
            onehot = onehot[:, 1:]
            inter = flat @ onehot
            lab_count = onehot.sum(0)
            present = lab_count > 0
            self.inter[:, present] += inter[:, present]
            self.union[:, present] += (seg_count[:, None] + lab_count[None, :] - inter)[:, present]
        # concepts absent from the image: union grows by the segmentation alone
        absent = np.ones(n, dtype=bool)
        for lab in labels.values():
            ids = np.unique(lab)
            absent[ids[ids > 0] - 1] = False
        self.union[:, absent] += seg_count[:, None]

    def merge(self, other: "IoUAccumulator") -> "IoUAccumulator":
        self.inter += other.inter
        self.union += other.union
        return self

    def iou(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.union > 0, self.inter / np.maximum(self.union, 1), 0.0)


def dataset_iou(segmentations: Sequence[np.ndarray], labels: Sequence[np.ndarray]) -> float:
    """IoU of one unit and one concept aggregated over images (sum inter / sum union)."""
    inter = union = 0
    for s, l in zip(segmentations, labels):
        s, l = np.asarray(s, bool), np.asarray(l, bool)
        inter += int(np.count_nonzero(s & l))
        union += int(np.count_nonzero(s | l))
    return inter / union if union else 0.0


def best_concepts(ious: np.ndarray, iou_threshold: float = IOU_THRESHOLD):
    """Argmax concept (lowest id on ties), its IoU and the interpretability flag per unit."""
    ious = np.asarray(ious)
    best = np.argmax(ious, axis=1)
    best_iou = ious[np.arange(len(ious)), best]
    return [
        (int(b) + 1 if v > 0 else None, float(v), bool(v > iou_threshold))
        for b, v in zip(best, best_iou)
    ]


def dissect_activations(
    activations: dict[str, np.ndarray],
    labels: Sequence[dict[str, np.ndarray]],
    n_concepts: int,
    image_size: tuple[int, int],
    iou_threshold: float = IOU_THRESHOLD,
    keep_ious: bool = False,
    seed: int = 0,
    max_samples: int = RESERVOIR_SIZE,
) -> list[UnitDissection]:
    """Dissect precomputed activations (per layer N x K x H_a x W_a)."""
    out = []
    for layer in activations:
        acts = activations[layer]
        thresholds = compute_thresholds(acts, seed=seed, max_samples=max_samples)
        t = np.array([u.threshold for u in thresholds])[:, None, None]
        acc = IoUAccumulator(acts.shape[1], n_concepts)
        for i, lab in enumerate(labels):
            seg = upsample_activation(acts[i], image_size) > t
            acc.add(seg, lab)
        ious = acc.iou()
        for k, (best, biou, interp) in enumerate(best_concepts(ious, iou_threshold)):
            out.append(UnitDissection(k, layer, thresholds[k].threshold, best, biou, interp,
                                      ious[k] if keep_ious else None))
    return out


def dissect_network(
    model: ResNet,
    mask,
    dataset: ConceptDataset,
    layers: Sequence[str] | None = None,
    split: str | None = None,
    iou_threshold: float = IOU_THRESHOLD,
    keep_ious: bool = False,
    seed: int = 0,
) -> DissectionReport:
    """Dissect ``layers`` of ``model`` (with ``mask`` applied) over ``dataset``."""
    from .trainer import apply_mask

    layers = list(layers or model.spec.layers())
    if mask is not None:
        apply_mask(model, mask)
    ids = dataset.image_ids(split)
    if not ids:
        raise ValueError("dataset split is empty")
    images = np.stack([dataset.image(i) for i in ids])
    image_size = images.shape[1:3]
    acts = layer_activations(model, to_model_input(images), layers)
    labels = [{c: dataset.label_map(i, c) for c in dataset.index.categories} for i in ids]
    units = dissect_activations(acts, labels, len(dataset.index), image_size, iou_threshold, keep_ious, seed)
    names = {c.concept_id: (c.name, c.category) for c in dataset.index.concepts}
    return DissectionReport(
        layers,
        units,
        dataset_hash=dataset.content_hash(),
        model_hash=tensors_digest(named_tensors(model)),
        mask_hash=mask.digest() if mask is not None else "",
        concept_names=names,
    )
