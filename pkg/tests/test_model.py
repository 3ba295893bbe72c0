import logging

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from earface.checkpoint import load_model, read_weights, save_backbone_weights, save_model
from earface.errors import ConfigError, DimensionError
from earface.fusion import channel_fuse
from earface.imageops import to_chw_batch
from earface.losses import CenterBank, multitask_loss, task_loss
from earface.model import (
    AgeGenderNet,
    BackboneSpec,
    ClassifierHead,
    adapt_input_channels,
    build_backbone,
    count_parameters,
    forward_feature_fusion,
    forward_multitask,
)

TINY = BackboneSpec("vgg_like", 0.125, input_size=(16, 16), stage_layout=(1, 1), embedding_dim=32)


def images(n, size=16, seed=0):
    return np.random.default_rng(seed).random((n, size, size, 3), dtype=np.float32)


def test_full_scale_vgg_layout_and_embedding():
    net = AgeGenderNet(BackboneSpec("vgg_like"), tasks=("age",)).eval()
    stream = net.streams["main"]
    assert sum(isinstance(m, torch.nn.Conv2d) for m in net.modules()) == 13
    assert sum(isinstance(m, torch.nn.Linear) for m in net.modules()) == 3
    with torch.no_grad():
        emb = stream(torch.zeros(1, 3, 224, 224))
    assert emb.shape == (1, 4096)


def test_full_scale_residual_pools_before_output():
    spec = BackboneSpec("residual_like", 0.125, input_size=(64, 64))
    net = build_backbone(spec)
    assert net.fc is None
    assert net(torch.zeros(2, 3, 64, 64)).shape == (2, spec.map_channels)
    assert len(spec.layout) == 4 and sum(spec.layout) == 16


def test_spec_validation():
    with pytest.raises(ConfigError):
        BackboneSpec("inception")
    with pytest.raises(ConfigError):
        BackboneSpec(width_scale=0.0)
    with pytest.raises(ConfigError):
        BackboneSpec(input_channels=4)
    with pytest.raises(ConfigError):
        BackboneSpec(input_size=(8, 8))
    assert BackboneSpec.from_dict(TINY.to_dict()) == TINY


def test_build_is_deterministic_and_batches():
    a, b = build_backbone(TINY, seed=4), build_backbone(TINY, seed=4)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)
    c = build_backbone(TINY, seed=5)
    assert not torch.equal(a.first_conv.weight, c.first_conv.weight)
    assert a(to_chw_batch(images(7))).shape == (7, 32)


def test_adaptation_identity_on_duplicated_input():
    net = build_backbone(TINY, seed=1)
    original = net.first_conv
    w0, b0 = original.weight.detach().clone(), original.bias.detach().clone()
    adapt_input_channels(net, 6)
    assert net.first_conv.weight.shape[1] == 6
    assert net.first_conv.weight.numel() == 2 * w0.numel()
    for i, img in enumerate(images(5, seed=9)):
        x3 = to_chw_batch([img]).double()
        x6 = to_chw_batch([channel_fuse(img, img)]).double()
        ref = F.conv2d(x3, w0.double(), b0.double(), padding=1)
        got = F.conv2d(x6, net.first_conv.weight.double(), net.first_conv.bias.double(), padding=1)
        assert torch.max(torch.abs(got - ref)) <= 1e-6 * torch.max(torch.abs(ref))
    rand6 = torch.rand(2, 6, 16, 16)
    assert torch.isfinite(net(rand6)).all()


def test_adaptation_twice_warns(caplog):
    net = adapt_input_channels(build_backbone(TINY), 6)
    with caplog.at_level(logging.WARNING, logger="earface.model"):
        adapt_input_channels(net, 6)
    assert "no-op" in caplog.text


def test_feature_fusion_concatenates_profile_first():
    p, e = build_backbone(TINY, 0), build_backbone(TINY, 1)
    head = ClassifierHead(64, ("age", "gender"), 32)
    x_p, x_e = to_chw_batch(images(3, seed=1)), to_chw_batch(images(3, seed=2))
    out = forward_feature_fusion(p, e, head, (x_p, x_e))
    assert out.head_input.shape == (3, 64)
    torch.testing.assert_close(out.head_input[:, :32], p(x_p))
    torch.testing.assert_close(out.head_input[:, 32:], e(x_e))
    swapped = forward_feature_fusion(e, p, head, (x_e, x_p))
    torch.testing.assert_close(swapped.head_input, torch.cat([out.head_input[:, 32:], out.head_input[:, :32]], 1))
    with torch.no_grad():
        for prm in e.parameters():
            prm.zero_()
    zero_ear = forward_feature_fusion(p, e, head, (x_p, x_e))
    assert torch.all(zero_ear.head_input[:, 32:] == 0)


def test_feature_fusion_full_scale_width():
    spec = BackboneSpec("vgg_like", input_size=(32, 32), stage_layout=(1,), width_scale=0.0625)
    net = AgeGenderNet(spec, fusion_mode="feature")
    assert net.head.in_dim == 2 * 256
    assert BackboneSpec("vgg_like").resolved_embedding_dim * 2 == 8192


def test_feature_fusion_width_mismatch():
    other = BackboneSpec("vgg_like", 0.125, input_size=(16, 16), stage_layout=(1, 1), embedding_dim=16)
    head = ClassifierHead(64, ("age",), 32)
    with pytest.raises(DimensionError):
        forward_feature_fusion(build_backbone(TINY), build_backbone(other), head, (torch.zeros(1, 3, 16, 16),) * 2)


def test_residual_feature_fusion_pools_concatenated_maps():
    spec = BackboneSpec("residual_like", 0.125, input_size=(16, 16), stage_layout=(1, 1), stem="compact")
    net = AgeGenderNet(spec, fusion_mode="feature").eval()
    x_p, x_e = to_chw_batch(images(2, seed=3)), to_chw_batch(images(2, seed=4))
    out = net((x_p, x_e))
    fmap = torch.cat([net.streams["profile"].feature_map(x_p), net.streams["ear"].feature_map(x_e)], 1)
    torch.testing.assert_close(out.head_input, fmap.mean(dim=(2, 3)))


def test_multitask_heads_and_task_errors():
    both = AgeGenderNet(TINY, ("age", "gender"))
    out = forward_multitask(both, to_chw_batch(images(4)))
    assert out.logits("age").shape == (4, 5) and out.logits("gender").shape == (4, 2)
    assert len(out) == 4
    gender_only = AgeGenderNet(TINY, ("gender",))
    out = forward_multitask(gender_only, to_chw_batch(images(2)))
    assert out.age_logits is None and out.age_embedding is None
    with pytest.raises(ConfigError):
        forward_multitask(gender_only, to_chw_batch(images(1)), tasks=("age",))


def test_eval_forward_deterministic():
    net = AgeGenderNet(TINY).eval()
    x = to_chw_batch(images(3))
    torch.testing.assert_close(net(x).age_logits, net(x).age_logits, rtol=0, atol=0)


def test_beta_one_gives_zero_gender_head_gradient():
    net = AgeGenderNet(TINY)
    x = to_chw_batch(images(4))
    y_age, y_gender = torch.tensor([0, 1, 2, 3]), torch.tensor([0, 1, 0, 1])
    out = net(x)
    banks = {t: CenterBank.zeros(5 if t == "age" else 2, 32) for t in ("age", "gender")}
    la = task_loss(out.logits("age"), out.embedding("age"), y_age, banks["age"]).total
    lg = task_loss(out.logits("gender"), out.embedding("gender"), y_gender, banks["gender"]).total
    multitask_loss(la, lg, 1.0).backward()
    assert all(p.grad is None or torch.all(p.grad == 0) for p in net.head.gender.parameters())
    assert any(p.grad is not None and torch.any(p.grad != 0) for p in net.head.age.parameters())


def _two_conv_spec():
    return BackboneSpec("vgg_like", 0.0625, input_size=(8, 8), stage_layout=(2,), embedding_dim=6, dropout_rate=0.0)


def test_end_to_end_gradient_matches_differences():
    torch.manual_seed(0)
    net = AgeGenderNet(_two_conv_spec(), seed=3).double().eval()
    x = torch.rand(3, 3, 8, 8, dtype=torch.float64)
    y_age, y_gender = torch.tensor([0, 3, 4]), torch.tensor([1, 0, 1])
    banks = {
        "age": CenterBank(torch.randn(5, 6, dtype=torch.float64)),
        "gender": CenterBank(torch.randn(2, 6, dtype=torch.float64)),
    }

    def loss():
        out = net(x)
        la = task_loss(out.logits("age"), out.embedding("age"), y_age, banks["age"]).total
        lg = task_loss(out.logits("gender"), out.embedding("gender"), y_gender, banks["gender"]).total
        return multitask_loss(la, lg, 0.75)

    net.zero_grad()
    loss().backward()
    params = [p for p in net.parameters() if p.requires_grad]
    rng = np.random.default_rng(0)
    checked = 0
    for p in params:
        flat = p.data.view(-1)
        for i in rng.choice(flat.numel(), size=min(4, flat.numel()), replace=False):
            old = flat[i].item()
            with torch.no_grad():
                flat[i] = old + 1e-6
                fp = loss().item()
                flat[i] = old - 1e-6
                fm = loss().item()
                flat[i] = old
            numeric = (fp - fm) / 2e-6
            analytic = p.grad.view(-1)[i].item()
            denom = max(abs(numeric), abs(analytic), 1e-7)
            assert abs(numeric - analytic) / denom < 1e-3, (p.shape, i, numeric, analytic)
            checked += 1
    assert checked > 10


def test_checkpoint_round_trip(tmp_path):
    net = AgeGenderNet(TINY, fusion_mode="channel", seed=2).eval()
    net.center_banks = {"age": CenterBank(torch.randn(5, 32)), "gender": CenterBank(torch.randn(2, 32))}
    net.metadata = {"stages": [{"name": "a"}]}
    path = save_model(net, tmp_path / "m.npz")
    header, arrays = read_weights(path)
    assert header["format"] == "earface-weights" and header["kind"] == "model"
    assert all(a.dtype == np.float32 for k, a in arrays.items() if "num_batches" not in k)
    back = load_model(path).eval()
    x = torch.rand(2, 6, 16, 16)
    torch.testing.assert_close(back(x).age_logits, net(x).age_logits)
    torch.testing.assert_close(back.center_banks["gender"].centers, net.center_banks["gender"].centers)
    assert back.metadata == net.metadata and back.fusion_mode == "channel"


def test_pretrained_three_channel_weights_widen_for_channel_fusion(tmp_path):
    base = build_backbone(TINY, seed=8)
    path = save_backbone_weights(base, tmp_path / "rgb.npz")
    from dataclasses import replace

    six = build_backbone(replace(TINY, input_channels=6, pretrained_weights_ref=str(path)))
    assert six.first_conv.in_channels == 6
    torch.testing.assert_close(six.first_conv.weight[:, :3] * 2, base.first_conv.weight)
    three = build_backbone(replace(TINY, pretrained_weights_ref=str(path)))
    torch.testing.assert_close(three.fc.weight, base.fc.weight)


def test_count_parameters_positive():
    assert count_parameters(build_backbone(TINY)) > 0
