import pytest
from hypothesis import given, strategies as st

from shadowtrace.errors import NonIntegralOutputExtent, UnresolvedShape
from shadowtrace.flopsest import (ConvLayerSpec, conv_layer_flops, descriptor_flops, gflops, model_flops,
                                  parse_conv_line)


def test_worked_examples():
    assert conv_layer_flops(ConvLayerSpec(W=224, H=224, K=3, P=1, S=1, F=32, C=1)) == 117_211_136
    assert conv_layer_flops(ConvLayerSpec(W=2, H=2, K=1, P=0, S=1, F=1, C=1)) == 4
    assert conv_layer_flops(ConvLayerSpec(W=4, H=4, K=2, P=0, S=2, F=2, C=3)) == 1088


def test_non_integral():
    with pytest.raises(NonIntegralOutputExtent):
        conv_layer_flops(ConvLayerSpec(W=256, H=256, K=3, P=1, S=2, F=8, C=8))


def test_empty_and_additive():
    assert model_flops([])[0] == 0
    l = ConvLayerSpec(W=16, H=16, K=3, P=1, S=1, F=4, C=2)
    assert model_flops([l, l])[0] == 2 * conv_layer_flops(l)


specs = st.builds(ConvLayerSpec, W=st.integers(1, 64), H=st.integers(1, 64), K=st.sampled_from([1, 3]),
                  P=st.integers(0, 1), S=st.just(1), F=st.integers(1, 32), C=st.integers(1, 16))


@given(st.lists(specs, max_size=6))
def test_additivity(layers):
    layers = [l for l in layers if l.W - l.K + 2 * l.P >= 0 and l.H - l.K + 2 * l.P >= 0]
    assert model_flops(layers)[0] == sum(conv_layer_flops(l) for l in layers)


@given(specs, st.integers(1, 8))
def test_homogeneous_in_filters(l, k):
    if l.W - l.K + 2 * l.P < 0 or l.H - l.K + 2 * l.P < 0:
        return
    base = conv_layer_flops(l)
    scaled = conv_layer_flops(ConvLayerSpec(l.W, l.H, l.K, l.P, l.S, l.F * k, l.C))
    assert scaled == k * base


def test_descriptor():
    text = "kind = x\nconv.a = 224 224 3 1 1 32 1\nconv.b = 4 4 2 0 2 2 3\n"
    total, br = descriptor_flops(text)
    assert total == 117_211_136 + 1088
    assert [n for n, _ in br] == ["a", "b"]
    assert gflops(total) == "0.117"


def test_unresolved():
    with pytest.raises(UnresolvedShape):
        parse_conv_line("224 224 3 1 1 ?", "x")
    with pytest.raises(UnresolvedShape):
        descriptor_flops("conv.a = 1 2 3")
