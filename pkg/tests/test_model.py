import numpy as np
import pytest
import torch

from dissectprune.concept_data import ArrayDataset
from dissectprune.model import (
    Checkpoint,
    ModelSpec,
    build_model,
    capture_activations,
    decode_tensors,
    encode_tensors,
    evaluate_accuracy,
    layer_activations,
    load_checkpoint,
    load_named_tensors,
    n_params,
    named_tensors,
    save_checkpoint,
)

TINY = ModelSpec(input_size=(16, 16), widths=(4, 8, 16), blocks=(1, 1, 1), num_classes=3)


def _conv(cin, cout, k):
    return cin * cout * k * k


def _bn(c):
    return 2 * c


def test_param_count_matches_shape_arithmetic():
    spec = ModelSpec(widths=(16, 32, 64), blocks=(3, 3, 3), num_classes=10)
    expected = _conv(3, 16, 3) + _bn(16)
    cin = 16
    for width, blocks in zip(spec.widths, spec.blocks):
        for b in range(blocks):
            expected += _conv(cin, width, 3) + _bn(width) + _conv(width, width, 3) + _bn(width)
            if cin != width:
                expected += _conv(cin, width, 1) + _bn(width)
            cin = width
    expected += 64 * 10 + 10
    assert n_params(build_model(spec, 0)) == expected


def test_same_seed_same_tensors():
    a, b = named_tensors(build_model(TINY, 3)), named_tensors(build_model(TINY, 3))
    assert a.keys() == b.keys()
    for k in a:
        np.testing.assert_array_equal(a[k], b[k])
    c = named_tensors(build_model(TINY, 4))
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_final_stage_width_sets_unit_count():
    spec = ModelSpec(input_size=(16, 16), widths=(4, 8, 64), blocks=(1, 1, 2), num_classes=2)
    assert spec.layers() == ("stage3.block0", "stage3.block1")
    maps = capture_activations(build_model(spec, 0), np.zeros((2, 3, 16, 16), np.float32), "stage3.block1")
    assert len(maps) == 2 and maps[0].n_units == 64
    assert maps[0].activations.shape == (64, 4, 4)


def test_invalid_spec():
    with pytest.raises(ValueError):
        build_model(ModelSpec(widths=(4, 0), blocks=(1, 1)), 0)
    with pytest.raises(ValueError):
        build_model(ModelSpec(widths=(4,), blocks=(1, 1)), 0)
    with pytest.raises(ValueError):
        build_model(ModelSpec(dissection_layers=("stage9.block0",)), 0)


def test_unknown_layer():
    with pytest.raises(KeyError):
        capture_activations(build_model(TINY, 0), np.zeros((1, 3, 16, 16), np.float32), "fc")


def test_zero_weights_give_bias_pattern():
    model = build_model(TINY, 0)
    block = model.block("stage3.block0")
    with torch.no_grad():
        for conv in (block.conv1, block.conv2, block.shortcut[0]):
            conv.weight.zero_()
        block.bn2.bias.copy_(torch.linspace(-1, 1, 16))
        block.shortcut[1].bias.copy_(torch.linspace(0, 0.5, 16))
    x = np.random.default_rng(0).normal(size=(3, 3, 16, 16)).astype(np.float32)
    acts = layer_activations(model, x, ["stage3.block0"])["stage3.block0"]
    bias = np.maximum(torch.linspace(-1, 1, 16).numpy() + torch.linspace(0, 0.5, 16).numpy(), 0)
    np.testing.assert_allclose(acts, np.broadcast_to(bias[None, :, None, None], acts.shape), rtol=0, atol=1e-6)


def test_identity_network_passes_input_through():
    spec = ModelSpec(input_size=(5, 5), widths=(3,), blocks=(1,), num_classes=2)
    model = build_model(spec, 0)
    with torch.no_grad():
        stem = model.stem[0]
        stem.weight.zero_()
        for c in range(3):
            stem.weight[c, c, 1, 1] = 1.0
        block = model.block("stage1.block0")
        block.conv1.weight.zero_()
        block.conv2.weight.zero_()
        for bn in (model.stem[1], block.bn1, block.bn2):
            bn.eps = 0.0
            bn.running_mean.zero_()
            bn.running_var.fill_(1.0)
            bn.weight.fill_(1.0)
            bn.bias.zero_()
    x = np.random.default_rng(1).uniform(0, 1, size=(2, 3, 5, 5)).astype(np.float32)
    maps = capture_activations(model, x, "stage1.block0")
    for m, xi in zip(maps, x):
        np.testing.assert_array_equal(m.activations, xi)


def test_forward_pure_and_capture_does_not_perturb_logits():
    model = build_model(TINY, 0)
    x = torch.from_numpy(np.random.default_rng(2).normal(size=(4, 3, 16, 16)).astype(np.float32))
    with torch.no_grad():
        a = model(x)
        handle = model.block("stage3.block0").register_forward_hook(lambda *_: None)
        b = model(x)
        handle.remove()
        c = model(x)
    assert torch.equal(a, b) and torch.equal(a, c)
    layer_activations(model, x.numpy(), ["stage3.block0"])
    with torch.no_grad():
        assert torch.equal(model(x), a)


def test_masked_weight_equals_zeroed_weight():
    model = build_model(TINY, 0)
    x = torch.from_numpy(np.random.default_rng(3).normal(size=(2, 3, 16, 16)).astype(np.float32))
    tensors = named_tensors(model)
    mask = np.random.default_rng(4).random(tensors["stage2.0.conv1.weight"].shape) > 0.5
    zeroed = dict(tensors)
    zeroed["stage2.0.conv1.weight"] = tensors["stage2.0.conv1.weight"] * mask
    other = build_model(TINY, 0)
    load_named_tensors(other, zeroed)
    with torch.no_grad():
        model.stage2[0].conv1.weight.mul_(torch.from_numpy(mask.astype(np.float32)))
        assert torch.equal(model(x), other(x))


def test_accuracy_constant_and_half():
    model = build_model(TINY, 0)
    with torch.no_grad():
        model.fc.weight.zero_()
        model.fc.bias.copy_(torch.tensor([0.0, 5.0, 0.0]))
    x = np.zeros((10, 3, 16, 16), np.float32)
    assert evaluate_accuracy(model, ArrayDataset(x, np.ones(10, np.int64))) == 1.0
    labels = np.array([1] * 5 + [0] * 5)
    assert evaluate_accuracy(model, ArrayDataset(x, labels)) == 0.5
    with pytest.raises(ValueError):
        evaluate_accuracy(model, ArrayDataset(x[:0], labels[:0]))
    with pytest.raises(ValueError):
        evaluate_accuracy(model, ArrayDataset(x, np.full(10, 7)))


def test_accuracy_matches_recount():
    model = build_model(TINY, 5)
    rng = np.random.default_rng(5)
    x = rng.normal(size=(37, 3, 16, 16)).astype(np.float32)
    y = rng.integers(0, 3, size=37)
    with torch.no_grad():
        preds = [int(model(torch.from_numpy(xi[None])).argmax()) for xi in x]
    assert evaluate_accuracy(model, ArrayDataset(x, y)) == sum(p == t for p, t in zip(preds, y)) / 37


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = build_model(TINY, 9)
    tensors = named_tensors(model)
    save_checkpoint(tmp_path / "c", Checkpoint(3, tensors, TINY.digest(), {"seed": 9}))
    back = load_checkpoint(tmp_path / "c")
    assert back.epoch == 3 and back.spec_hash == TINY.digest() and back.rng_state == {"seed": 9}
    for k in tensors:
        assert back.tensors[k].tobytes() == tensors[k].tobytes()
    blob = (tmp_path / "c" / "tensors.bin").read_bytes()
    assert encode_tensors(decode_tensors(blob)) == blob
