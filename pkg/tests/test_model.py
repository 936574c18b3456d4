import math

import numpy as np
import pytest
import torch

from dermxkit import model as M
from dermxkit.errors import ConfigError, GradCamError, ShapeError


def tiny(kind="dermx", **kw):
    cfg = M.config_for_kind(kind, backbone="tiny-cnn", pretrained=False, input_size=(32, 32),
                            num_characteristics=4, dropout=0.0, **kw)
    torch.manual_seed(0)
    return M.build_model(cfg, kind)


@pytest.fixture(scope="module")
def effnet():
    torch.manual_seed(0)
    return M.build_model(M.DermXConfig(pretrained=False), "dermx")


def test_default_wiring(effnet):
    assert effnet.diagnosis_out.in_features == 74
    assert effnet.feature_shape == (1408, 9, 9)
    assert effnet.attention_size == (9, 9)


def test_default_gradcam_is_9x9(effnet):
    x = torch.randn(1, 3, 260, 260)
    cam = M.grad_cam(effnet.eval(), x[0], 3)
    assert cam.shape == (9, 9)
    assert cam.min() >= 0 and cam.max() <= 1


def test_dx_has_no_characteristic_head():
    m = tiny("dx")
    assert m.diagnosis_out.in_features == 64
    out = m(torch.randn(2, 3, 32, 32))
    assert out.characteristic_probs is None
    with pytest.raises(GradCamError):
        M.grad_cam(m, torch.randn(3, 32, 32), 0, "characteristic")


def test_output_contract():
    out = tiny()(torch.randn(2, 3, 32, 32))
    assert out.diagnosis_probs.shape == (2, 6)
    assert torch.allclose(out.diagnosis_probs.sum(1), torch.ones(2), atol=1e-5)
    assert out.characteristic_probs.shape == (2, 4)
    assert ((out.characteristic_probs >= 0) & (out.characteristic_probs <= 1)).all()
    assert out.last_conv_features.shape == (2, 8, 8, 8)


def test_characteristics_feed_diagnosis():
    m = tiny().eval()
    feats = m.backbone(torch.randn(1, 3, 32, 32))
    _, base = m.heads(feats)
    _, moved = m.heads(feats, characteristic_logits=torch.full((1, 4), 5.0))
    assert not torch.allclose(base, moved)


def test_config_validation():
    with pytest.raises(ConfigError):
        M.config_for_kind("dermx++")
    with pytest.raises(ConfigError):
        M.DermXConfig(lambda_a=-1)
    with pytest.raises(ConfigError):
        M.build_backbone("vgg")
    cfg = M.config_for_kind("dermx+")
    assert (cfg.lambda_d, cfg.lambda_c, cfg.lambda_a) == (1.0, 1.0, 10.0)


def test_loss_examples():
    y = torch.eye(6)[:2]
    assert M.loss_diagnosis(y.clone(), y).item() <= 1e-6
    z = torch.tensor([[1.0, 0.0, 1.0, 0.0]])
    assert M.loss_characteristics(torch.full((1, 4), 0.5), z).item() == pytest.approx(math.log(2), abs=1e-6)
    cfg = M.DermXConfig(pretrained=False, lambda_c=0.0)
    losses = {"diagnosis": torch.tensor(0.3), "characteristics": torch.tensor(0.7)}
    assert M.combine(losses, cfg).item() == pytest.approx(0.3)


def test_dice_terms():
    # product-form Dice reaches zero for identical binary maps
    A = (torch.rand(2, 3, 5, 5, dtype=torch.float64) > 0.5).double()
    A[..., 0, 0] = 1.0
    assert M.dice_terms(A, A).max().item() <= 1e-6
    soft = torch.full((1, 1, 2, 2), 0.5, dtype=torch.float64)
    assert M.dice_terms(soft, soft).item() == pytest.approx(0.5, abs=1e-6)
    ones, zeros = torch.ones(1, 1, 4, 4, dtype=torch.float64), torch.zeros(1, 1, 4, 4, dtype=torch.float64)
    assert M.dice_terms(ones, zeros).item() == pytest.approx(1.0, abs=1e-6)
    a = torch.tensor([[[[1.0, 0.0]]]], dtype=torch.float64)
    m = torch.tensor([[[[0.5, 0.5]]]], dtype=torch.float64)
    assert M.dice_terms(a, m).item() == pytest.approx(1 - 2 * 0.5 / (2 + 1e-6), abs=1e-9)
    with pytest.raises(ShapeError):
        M.dice_terms(ones, torch.ones(1, 1, 4, 3))


def test_attention_loss_masks_invalid_pairs():
    A = torch.ones(2, 2, 3, 3)
    R = torch.zeros(2, 2, 3, 3)
    valid = torch.tensor([[True, False], [False, False]])
    assert M.loss_attention(A, R, valid).item() == pytest.approx(0.25, abs=1e-6)


def test_normalize_maps():
    cams = torch.tensor([[[1.0, 3.0], [2.0, 5.0]], [[2.0, 2.0], [2.0, 2.0]]])
    out = M.normalize_maps(cams)
    assert out[0].min() == 0 and out[0].max() == 1
    assert torch.equal(out[1], torch.zeros(2, 2))


def test_gradcam_needs_gradients():
    m = tiny().eval()
    with torch.no_grad(), pytest.raises(GradCamError):
        M.grad_cam(m, torch.randn(3, 32, 32), 0)


def test_gradcam_matches_manual_computation():
    m = tiny().eval()
    x = torch.randn(1, 3, 32, 32)
    feats = m.backbone(x).detach().requires_grad_(True)
    logits, _ = m.heads(feats)
    (g,) = torch.autograd.grad(logits[0, 2], feats)
    raw = torch.relu((g.mean(dim=(2, 3), keepdim=True) * feats).sum(1))[0].detach().numpy()
    span = raw.max() - raw.min()
    expected = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    np.testing.assert_allclose(M.grad_cam(m, x[0], 2), expected, atol=1e-6)


def test_differentiable_gradcam_has_second_order_path():
    m = tiny()
    feats = m.backbone(torch.randn(2, 3, 32, 32))
    cams = M.grad_cam_from_features(m, feats, [0, 1], create_graph=True)
    assert cams.requires_grad
    cams.sum().backward()
    assert m.characteristic_out.weight.grad is not None
    assert m.backbone[0].weight.grad.abs().sum() > 0


def test_weight_randomization_changes_maps():
    m = tiny().eval()
    x = torch.randn(3, 32, 32)
    before = M.grad_cam(m, x, 1)
    torch.manual_seed(123)
    for module in m.modules():
        if hasattr(module, "reset_parameters"):
            module.reset_parameters()
    after = M.grad_cam(m, x, 1)
    assert np.abs(before - after).mean() > 0


def test_to_input():
    t = M.to_input(np.full((10, 12, 3), 255, np.uint8), (8, 8))
    assert t.shape == (3, 8, 8)
    expected = (1 - torch.tensor(M.IMAGENET_MEAN)) / torch.tensor(M.IMAGENET_STD)
    assert torch.allclose(t[:, 0, 0], expected, atol=1e-6)


def test_checkpoint_round_trip(tmp_path):
    m = tiny("dermx+").eval()
    M.save_checkpoint(tmp_path / "c.pt", m, diseases=("a",) * 6, characteristics=("p", "q", "r", "s"),
                      extra={"fold": 2})
    m2, payload = M.load_checkpoint(tmp_path / "c.pt")
    assert payload["format_version"] == M.CHECKPOINT_VERSION and payload["kind"] == "dermx+"
    assert payload["extra"]["fold"] == 2
    x = torch.randn(1, 3, 32, 32)
    assert torch.equal(m(x).diagnosis_probs, m2(x).diagnosis_probs)
    bad = torch.load(tmp_path / "c.pt", weights_only=True)
    bad["format_version"] = 99
    torch.save(bad, tmp_path / "bad.pt")
    with pytest.raises(ConfigError):
        M.load_checkpoint(tmp_path / "bad.pt")
