"""Inference cost of conv + ReLU layers.

Per layer::

    out_w * out_h * n * (n - 1) * F + F * W * H,   n = C * K * K
    out_w = (W - K + 2P) / S + 1   (likewise out_h)

The second term counts the ReLU.  BN, pooling, attention and concatenation
are not counted.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import NonIntegralOutputExtent, UnresolvedShape


@dataclass(frozen=True)
class ConvLayerSpec:
    W: int
    H: int
    K: int
    P: int
    S: int
    F: int
    C: int
    name: str = ""

    @property
    def n(self) -> int:
        return self.C * self.K * self.K

    def out_extent(self):
        ext = []
        for d in (self.W, self.H):
            num = d - self.K + 2 * self.P
            if num < 0 or num % self.S:
                raise NonIntegralOutputExtent(
                    f"{self.name or 'conv'}: ({d} - {self.K} + 2*{self.P}) not divisible by stride {self.S}")
            ext.append(num // self.S + 1)
        return tuple(ext)


def conv_layer_flops(spec: ConvLayerSpec) -> int:
    for k in ("W", "H", "K", "S", "F", "C"):
        if getattr(spec, k) <= 0:
            raise ValueError(f"{k} must be positive")
    if spec.P < 0:
        raise ValueError("P must be >= 0")
    ow, oh = spec.out_extent()
    n = spec.n
    return ow * oh * n * (n - 1) * spec.F + spec.F * spec.W * spec.H


def model_flops(layers) -> tuple:
    """Total Flops and per-layer breakdown [(name, flops), ...]."""
    breakdown = [(l.name, conv_layer_flops(l)) for l in layers]
    return sum(f for _, f in breakdown), breakdown


def gflops(total: int) -> str:
    return f"{total / 1e9:.3f}"


CONV_FIELDS = ("W", "H", "K", "P", "S", "F", "C")


def parse_conv_line(value: str, name: str = "") -> ConvLayerSpec:
    """Parse ``"W H K P S F C"`` from an architecture descriptor."""
    parts = value.split()
    if len(parts) != len(CONV_FIELDS):
        raise UnresolvedShape(f"conv layer {name!r}: expected {len(CONV_FIELDS)} fields, got {value!r}")
    try:
        vals = [int(p) for p in parts]
    except ValueError as exc:
        raise UnresolvedShape(f"conv layer {name!r}: non-integer field in {value!r}") from exc
    return ConvLayerSpec(*vals, name=name)


def descriptor_flops(descriptor_text: str) -> tuple:
    """Flops of every ``conv.<name> = W H K P S F C`` line in a descriptor."""
    layers = []
    for raw in descriptor_text.splitlines():
        line = raw.strip()
        if not line.startswith("conv."):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UnresolvedShape(f"malformed conv line {line!r}")
        layers.append(parse_conv_line(value.strip(), key.strip()[len("conv."):]))
    return model_flops(layers)
