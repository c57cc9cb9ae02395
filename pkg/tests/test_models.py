import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from shadowtrace import models as M
from shadowtrace.errors import ArchitectureMismatch, FormatError, ShapeError
from shadowtrace.flopsest import descriptor_flops, model_flops

import gradcheck

W = gradcheck.TOY_WIDTHS


def arch(kind, **kw):
    kw.setdefault("input_height", 64)
    kw.setdefault("input_width", 64)
    return M.ArchSpec(kind, W, **kw)


def test_arch_validation():
    with pytest.raises(ValueError):
        M.ArchSpec("segmentation", (4, 4, 4, 4, 4))
    with pytest.raises(ValueError):
        M.ArchSpec("segmentation", (8, 4, 4, 4, 4, 4))
    with pytest.raises(ValueError):
        M.ArchSpec("nope")
    a = M.ArchSpec("confidence")
    assert len(a.widths) == 6 and a.stride == 32 and a.out_channels == 1


def test_classifier_shapes_and_softmax():
    m = M.build_model(arch("classifier"), 0).eval()
    x = torch.randn(5, 1, 64, 64)
    with torch.no_grad():
        y = M.classifier_forward(m, x)
    assert y.shape == (5, 2) and torch.isfinite(y).all()
    assert torch.allclose(torch.softmax(y, 1).sum(1), torch.ones(5), atol=1e-6)


def test_duplicate_rows_identical():
    m = M.build_model(arch("classifier", attention=True), 0).eval()
    x = torch.randn(1, 1, 64, 64).repeat(3, 1, 1, 1)
    with torch.no_grad():
        y = m(x)
    assert torch.equal(y[0], y[1]) and torch.equal(y[1], y[2])


def test_shape_errors():
    m = M.build_model(arch("segmentation"), 0)
    with pytest.raises(ShapeError):
        M.seg_forward(m, torch.zeros(1, 1, 48, 64))
    with pytest.raises(ShapeError):
        M.seg_forward(m, torch.zeros(1, 2, 64, 64))
    with pytest.raises(ArchitectureMismatch):
        M.conf_raw(m, torch.zeros(1, 1, 64, 64))


def test_seg_shapes_and_tie_rule():
    m = M.build_model(arch("segmentation", attention=True), 0).eval()
    x = torch.randn(2, 1, 64, 96)
    with torch.no_grad():
        y = M.seg_forward(m, x)
        assert y.shape == (2, 2, 64, 96)
        assert torch.allclose(torch.softmax(y, 1).sum(1), torch.ones(2, 64, 96), atol=1e-6)
        m.head.weight.zero_()
        m.head.bias.zero_()
        y = M.seg_forward(m, x)
    assert torch.all(y == 0)
    assert not M.logits_to_mask(y).any()


@pytest.mark.parametrize("act", ["clamp", "sigmoid"])
def test_confidence_range(act):
    m = M.build_model(arch("confidence", conf_activation=act), 3).eval()
    with torch.no_grad():
        m.head.bias.fill_(0.5)
        x = 10 * torch.randn(2, 1, 64, 64)
        c = M.conf_forward(m, x)
        c2 = M.conf_forward(m, x)
    assert c.shape == (2, 64, 64)
    assert c.min() >= 0 and c.max() <= 1
    assert torch.equal(c, c2)


def test_transfer():
    src = M.build_model(arch("classifier"), 1)
    dst = M.build_model(arch("segmentation"), 2)
    before_dec = {k: v.clone() for k, v in dst.state_dict().items() if not k.startswith("encoder.")}
    x = torch.randn(2, 1, 64, 64)
    src.eval()
    with torch.no_grad():
        ref = src(x)
    M.transfer_encoder_weights(src, dst)
    for k, v in src.encoder.state_dict().items():
        assert torch.equal(v, dst.encoder.state_dict()[k])
    for k, v in dst.state_dict().items():
        if not k.startswith("encoder."):
            assert torch.equal(v, before_dec[k])
    # no aliasing: training dst must not move src
    with torch.no_grad():
        for p in dst.encoder.parameters():
            p.add_(1.0)
        assert torch.equal(src(x), ref)


def test_transfer_mismatch():
    src = M.build_model(M.ArchSpec("classifier", (2, 2, 4, 4, 4, 8)), 0)
    dst = M.build_model(arch("segmentation"), 0)
    with pytest.raises(ArchitectureMismatch):
        M.transfer_encoder_weights(src, dst)


def _gate_inputs(m, x):
    feats = m.encoder(x)
    f3 = torch.relu(m.bn_out(feats[-1]))
    return feats, f3


def test_attention_gate_force_one():
    m = M.build_model(arch("classifier", attention=True), 0).eval()
    x = torch.randn(3, 1, 64, 64)
    m.gate1.force = m.gate2.force = 1.0
    with torch.no_grad():
        y = m(x)
        feats, f3 = _gate_inputs(m, x)
        expect = m.head.fc(torch.cat([feats[3].mean((2, 3)), feats[4].mean((2, 3)), f3.mean((2, 3))], 1))
    assert torch.allclose(y, expect, atol=1e-6)


def test_attention_gate_force_zero():
    m = M.build_model(arch("classifier", attention=True), 0).eval()
    m.gate1.force = m.gate2.force = 0.0
    x = torch.randn(3, 1, 64, 64)
    with torch.no_grad():
        y = m(x)
        _, f3 = _gate_inputs(m, x)
        c1, c2 = W[3], W[4]
        w = m.head.fc.weight[:, c1 + c2:]
        expect = f3.mean((2, 3)) @ w.T + m.head.fc.bias
    assert torch.allclose(y, expect, atol=1e-6)


def test_attention_coefficients():
    m = M.build_model(arch("segmentation", attention=True), 0).eval()
    x = torch.randn(2, 1, 64, 64)
    with torch.no_grad():
        m(x)
        feats = m.encoder(x)
    for g, f in ((m.gate1, feats[3]), (m.gate2, feats[4])):
        a = g.last_alpha
        assert a.shape[-2:] == f.shape[-2:]
        assert a.min() >= 0 and a.max() <= 1
    pooled = M.AttentionHead(3, 5, 7, 2).pooled(torch.ones(1, 3, 4, 4), torch.ones(1, 5, 2, 2),
                                                 torch.ones(1, 7, 1, 1))
    assert pooled.shape == (1, 15)


@pytest.mark.parametrize("attention", [False, True])
def test_param_count_symmetry(attention):
    seg = M.build_model(arch("segmentation", attention=attention), 0)
    conf = M.build_model(arch("confidence", attention=attention), 0)
    # the heads differ by one output channel: W[0] weights and one bias
    assert M.n_parameters(seg) - M.n_parameters(conf) == W[0] + 1


def test_decoder_mirrors_encoder():
    m = M.build_model(M.ArchSpec("segmentation"), 0)
    assert len(m.encoder.blocks) == 6 and len(m.decoder) == 6
    outs = [b.conv2.out_channels for b in m.decoder]
    assert outs == [128, 128, 128, 64, 32, 16]


@given(st.integers(0, 3), st.integers(0, 3))
def test_block_padding_translation(dy, dx):
    torch.manual_seed(0)
    b = M.ResidualBlock(3, 5, 1).double().eval()
    with torch.no_grad():
        for bn in (b.bn1, b.bn2):
            bn.running_mean.uniform_(-1, 1)
            bn.running_var.uniform_(0.5, 2)
        x = torch.randn(1, 3, 12, 12, dtype=torch.float64)
        big = torch.nn.functional.pad(x, (dx, 4 - dx, dy, 4 - dy))
        y = b(x)
        yb = b(big)[..., dy:dy + 12, dx:dx + 12]
    # receptive field of two 3x3 convs: two pixels from the border are affected
    assert torch.allclose(y[..., 2:-2, 2:-2], yb[..., 2:-2, 2:-2], atol=1e-5)


def test_multichannel_init_matches_single():
    one = M.build_model(arch("classifier"), 7)
    two = M.build_model(arch("classifier", in_channels=2), 7)
    s1, s2 = one.state_dict(), two.state_dict()
    for k in s1:
        if k == "encoder.stem.weight":
            assert torch.equal(s1[k], s2[k][:, :1])
        else:
            assert torch.equal(s1[k], s2[k])


def test_blob_round_trip():
    m = M.build_model(arch("confidence", attention=True), 0)
    state = m.state_dict()
    back = M.blob_to_state(M.state_to_blob(state))
    assert list(back) == list(state)
    for k in state:
        assert torch.equal(back[k], state[k].float())
    raw = M.state_to_blob(state)
    with pytest.raises(FormatError):
        M.blob_to_state(raw[:-3])
    with pytest.raises(FormatError):
        M.blob_to_state(b"XXXX" + raw[4:])


def test_descriptor_round_trip():
    a = M.ArchSpec("confidence", W, attention=True, conf_activation="sigmoid", input_height=64,
                   input_width=128)
    m = M.build_model(a, 0)
    text = M.describe(m)
    assert M.parse_descriptor(text) == a
    total, rows = descriptor_flops(text)
    assert total == model_flops(M.conv_layers(m, 64, 128))[0]
    assert not any("gate" in n for n, _ in rows)
    with pytest.raises(FormatError):
        M.parse_descriptor("kind = confidence\n")


def test_pad_to_multiple():
    x = torch.ones(1, 1, 50, 64)
    y = M.pad_to_multiple(x, 64)
    assert y.shape == (1, 1, 64, 64) and y[..., 50:, :].abs().sum() == 0
    assert M.pad_to_multiple(y, 64) is y


@pytest.mark.parametrize("attention", [False, True])
def test_gradients_match_finite_differences(attention):
    for name, m, closure in gradcheck.loss_fns(0, attention):
        assert M.n_parameters(m) <= 10_000
        assert gradcheck.check(m, closure, n=20, seed=1) < 1e-4, name
