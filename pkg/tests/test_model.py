import pytest
import torch

from jigssl.model import (DualHeadModel, EncoderDescriptor, build_model, inference_state_dict, load_checkpoint,
                          save_checkpoint)
from jigssl.permset import generate_permutation_set


def test_supervised_shape_and_softmax():
    m = build_model("tiny-cnn", P=5, seed=0).eval()
    x = torch.rand(4, 3, 96, 96)
    logits = m.forward_supervised(x)
    assert logits.shape == (4, 2)
    assert torch.isfinite(logits).all()
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(4), atol=1e-6)


def test_duplicate_rows_identical_in_eval():
    m = build_model("tiny-cnn", P=5, seed=0).eval()
    x = torch.rand(1, 3, 48, 48).repeat(3, 1, 1, 1)
    out = m.forward_supervised(x)
    assert torch.equal(out[0], out[1]) and torch.equal(out[1], out[2])


@pytest.mark.parametrize("P", [30, 100])
def test_jigsaw_width(P):
    m = build_model("tiny-cnn", P=P, seed=0).eval()
    logits = m.forward_jigsaw(torch.rand(2, 3, 48, 48))
    assert logits.shape == (2, P + 1)
    assert torch.allclose(torch.softmax(logits, 1).sum(1), torch.ones(2), atol=1e-6)


def test_resnet18_contract():
    m = build_model("resnet18", P=30, seed=0)
    assert m.feature_dim == 512
    assert m.jigsaw_head.out_features == 31
    assert m.supervised_head.out_features == 2
    assert m.supervised_head.in_features == 512


def test_baseline_has_no_jigsaw_head():
    m = build_model("tiny-cnn", P=None, seed=0)
    assert not m.has_jigsaw_head
    with pytest.raises(RuntimeError):
        m.forward_jigsaw(torch.rand(1, 3, 24, 24))


def test_seeded_init_identical():
    a, b = build_model("tiny-cnn", 5, seed=3), build_model("tiny-cnn", 5, seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


def test_unknown_descriptor_and_missing_weights(tmp_path):
    with pytest.raises(KeyError):
        build_model("vgg-99", 5)
    with pytest.raises(FileNotFoundError):
        build_model(EncoderDescriptor("tiny-cnn", "pretrained-file", str(tmp_path / "none.pt")), 5)
    torch.save({"bogus": torch.zeros(1)}, tmp_path / "bad.pt")
    with pytest.raises(ValueError):
        build_model(EncoderDescriptor("tiny-cnn", "pretrained-file", str(tmp_path / "bad.pt")), 5)


def test_pretrained_file_init(tmp_path):
    src = build_model("tiny-cnn", 5, seed=1)
    torch.save(src.encoder.state_dict(), tmp_path / "enc.pt")
    m = build_model(EncoderDescriptor("tiny-cnn", "pretrained-file", str(tmp_path / "enc.pt")), 5, seed=2)
    for k, v in src.encoder.state_dict().items():
        assert torch.equal(m.encoder.state_dict()[k], v)


def test_head_isolation():
    m = build_model("tiny-cnn", P=5, seed=0).eval()
    x = torch.rand(2, 3, 24, 24)
    jig, sup = m.forward_jigsaw(x), m.forward_supervised(x)
    with torch.no_grad():
        m.supervised_head.weight.add_(1.0)
    assert torch.equal(m.forward_jigsaw(x), jig)
    sup = m.forward_supervised(x)
    with torch.no_grad():
        m.jigsaw_head.weight.add_(1.0)
    assert torch.equal(m.forward_supervised(x), sup)


def test_encoder_perturbation_changes_both_heads():
    m = build_model("tiny-cnn", P=5, seed=0).eval()
    x = torch.rand(2, 3, 24, 24)
    sup, jig = m.forward_supervised(x), m.forward_jigsaw(x)
    with torch.no_grad():
        m.encoder.body[0].weight.mul_(1.5)
    assert not torch.equal(m.forward_supervised(x), sup)
    assert not torch.equal(m.forward_jigsaw(x), jig)


def test_checkpoint_round_trip(tmp_path):
    ps = generate_permutation_set(3, 5, seed=2)
    m = build_model("tiny-cnn", 5, seed=0).eval()
    save_checkpoint(m, tmp_path / "ck.pt", ps, {"image_side": 24})
    m2, ps2, extra = load_checkpoint(tmp_path / "ck.pt")
    assert ps2 == ps
    assert extra == {"image_side": 24}
    x = torch.rand(2, 3, 24, 24)
    assert torch.equal(m.forward_jigsaw(x), m2.forward_jigsaw(x))
    assert torch.load(tmp_path / "ck.pt", weights_only=False)["version"] == 1


def test_inference_state_drops_jigsaw_head():
    m = build_model("tiny-cnn", 5, seed=0)
    keys = inference_state_dict(m)
    assert not any(k.startswith("jigsaw_head") for k in keys)
    assert any(k.startswith("supervised_head") for k in keys)
