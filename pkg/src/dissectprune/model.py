"""Small CIFAR-style residual networks with named dissection layers."""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

FORMAT_VERSION = 1
_MAGIC = b"DPTENS01"


@dataclass(frozen=True)
class ModelSpec:
    input_size: tuple[int, int] = (32, 32)
    in_channels: int = 3
    widths: tuple[int, ...] = (16, 32, 64)
    blocks: tuple[int, ...] = (3, 3, 3)
    num_classes: int = 10
    dissection_layers: tuple[str, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(self.input_size))
        object.__setattr__(self, "widths", tuple(self.widths))
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if self.dissection_layers is not None:
            object.__setattr__(self, "dissection_layers", tuple(self.dissection_layers))

    def validate(self) -> None:
        if not self.widths or len(self.widths) != len(self.blocks):
            raise ValueError("widths and blocks must be non-empty and of equal length")
        if min(self.widths) <= 0 or min(self.blocks) <= 0:
            raise ValueError("widths and block counts must be positive")
        if self.num_classes <= 0 or self.in_channels <= 0 or min(self.input_size) <= 0:
            raise ValueError("num_classes, in_channels and input_size must be positive")
        unknown = set(self.layers()) - set(self.block_names())
        if unknown:
            raise ValueError(f"unknown dissection layers {sorted(unknown)}")

    def block_names(self) -> list[str]:
        return [f"stage{s + 1}.block{b}" for s, n in enumerate(self.blocks) for b in range(n)]

    def layers(self) -> tuple[str, ...]:
        """Dissection layers; defaults to the final stage's block outputs."""
        if self.dissection_layers is not None:
            return self.dissection_layers
        last = len(self.blocks)
        return tuple(f"stage{last}.block{b}" for b in range(self.blocks[-1]))

    def layer_width(self, name: str) -> int:
        stage = int(name.split(".")[0].removeprefix("stage"))
        return self.widths[stage - 1]

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


class BasicBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = nn.Sequential()
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(
                nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class ResNet(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        spec.validate()
        self.spec = spec
        w0 = spec.widths[0]
        self.stem = nn.Sequential(
            nn.Conv2d(spec.in_channels, w0, 3, 1, 1, bias=False), nn.BatchNorm2d(w0), nn.ReLU()
        )
        cin = w0
        for s, (width, n) in enumerate(zip(spec.widths, spec.blocks)):
            blocks = []
            for b in range(n):
                stride = 2 if (s > 0 and b == 0) else 1
                blocks.append(BasicBlock(cin, width, stride))
                cin = width
            setattr(self, f"stage{s + 1}", nn.Sequential(*blocks))
        self.fc = nn.Linear(cin, spec.num_classes)

    def stages(self):
        return [getattr(self, f"stage{s + 1}") for s in range(len(self.spec.widths))]

    def block(self, name: str) -> nn.Module:
        stage, block = name.split(".")
        try:
            return getattr(self, stage)[int(block.removeprefix("block"))]
        except (AttributeError, IndexError, ValueError):
            raise KeyError(f"unknown layer {name!r}") from None

    def forward(self, x):
        x = self.stem(x)
        for stage in self.stages():
            x = stage(x)
        x = F.adaptive_avg_pool2d(x, 1).flatten(1)
        return self.fc(x)


def build_model(spec: ModelSpec, seed: int) -> ResNet:
    """Deterministically initialized network; ``n_params`` counts learnable parameters."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = ResNet(spec)
    model.eval()
    return model


def n_params(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# ---------------------------------------------------------------------------
# named tensors


def named_tensors(model: nn.Module) -> dict[str, np.ndarray]:
    """Weights, biases and normalization statistics as float32 arrays."""
    return {
        k: v.detach().cpu().numpy().astype(np.float32, copy=True)
        for k, v in model.state_dict().items()
    }


def load_named_tensors(model: nn.Module, tensors: dict[str, np.ndarray]) -> None:
    state = model.state_dict()
    missing = set(state) - set(tensors)
    extra = set(tensors) - set(state)
    if missing or extra:
        raise KeyError(f"tensor set mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
    new = {}
    for k, ref in state.items():
        arr = np.asarray(tensors[k])
        if tuple(arr.shape) != tuple(ref.shape):
            raise ValueError(f"{k}: shape {arr.shape} != {tuple(ref.shape)}")
        new[k] = torch.from_numpy(np.array(arr, dtype=np.float32)).to(ref.dtype)
    model.load_state_dict(new)


def tensors_digest(tensors: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(tensors):
        arr = np.asarray(tensors[k], dtype="<f4", order="C")
        h.update(k.encode())
        h.update(str(arr.shape).encode())
        h.update(arr.tobytes())
    return h.hexdigest()


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    """Container: magic, u64 header length, JSON header, little-endian float32 data."""
    entries, chunks, offset = [], [], 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f4", order="C")
        data = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    header = json.dumps({"dtype": "<f4", "tensors": entries}, sort_keys=True).encode()
    return _MAGIC + struct.pack("<Q", len(header)) + header + b"".join(chunks)


def decode_tensors(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != _MAGIC:
        raise ValueError("not a tensor container")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16 : 16 + hlen])
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        raw = blob[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        out[e["name"]] = np.frombuffer(raw, dtype="<f4").reshape(e["shape"]).astype(np.float32)
    return out


@dataclass
class Checkpoint:
    epoch: int
    tensors: dict[str, np.ndarray]
    spec_hash: str = ""
    rng_state: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``manifest.json`` + ``tensors.bin`` into directory ``path``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "tensors.bin").write_bytes(encode_tensors(ckpt.tensors))
    manifest = {
        "format_version": FORMAT_VERSION,
        "epoch": ckpt.epoch,
        "spec_hash": ckpt.spec_hash,
        "rng_state": ckpt.rng_state,
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {manifest.get('format_version')}")
    tensors = decode_tensors((path / "tensors.bin").read_bytes())
    return Checkpoint(manifest["epoch"], tensors, manifest["spec_hash"], manifest["rng_state"])


# ---------------------------------------------------------------------------
# activations and evaluation


@dataclass
class ActivationMap:
    layer: str
    activations: np.ndarray  # K x H_a x W_a

    @property
    def n_units(self) -> int:
        return self.activations.shape[0]


@torch.no_grad()
def layer_activations(model: ResNet, images, layers, batch_size: int = 256) -> dict[str, np.ndarray]:
    """Block outputs for ``layers`` as float32 arrays of shape N x K x H_a x W_a."""
    modules = {name: model.block(name) for name in layers}
    was_training = model.training
    model.eval()
    store: dict[str, list] = {name: [] for name in layers}
    handles = [
        mod.register_forward_hook(lambda _m, _i, out, name=name: store[name].append(out.numpy().copy()))
        for name, mod in modules.items()
    ]
    try:
        x = torch.as_tensor(np.asarray(images, dtype=np.float32))
        for i in range(0, len(x), batch_size):
            model(x[i : i + batch_size])
    finally:
        for h in handles:
            h.remove()
        model.train(was_training)
    return {
        name: np.concatenate(chunks) if chunks else np.zeros((0, model.spec.layer_width(name), 0, 0), np.float32)
        for name, chunks in store.items()
    }


def capture_activations(model: ResNet, images, layer: str) -> list[ActivationMap]:
    if layer not in model.spec.block_names():
        raise KeyError(f"unknown layer {layer!r}")
    acts = layer_activations(model, images, [layer])[layer]
    return [ActivationMap(layer, a) for a in acts]


@torch.no_grad()
def predict(model: nn.Module, images, batch_size: int = 512) -> np.ndarray:
    was_training = model.training
    model.eval()
    x = torch.as_tensor(np.asarray(images, dtype=np.float32))
    out = [model(x[i : i + batch_size]).argmax(1).numpy() for i in range(0, len(x), batch_size)]
    model.train(was_training)
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_accuracy(model: nn.Module, dataset) -> float:
    """Top-1 accuracy on an ``ArrayDataset``."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty set")
    labels = np.asarray(dataset.labels)
    n_cls = getattr(getattr(model, "spec", None), "num_classes", None)
    if n_cls is not None and (labels.min() < 0 or labels.max() >= n_cls):
        raise ValueError("labels outside the model's class range")
    return float(np.mean(predict(model, dataset.images) == labels))
