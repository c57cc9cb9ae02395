"""Residual encoder / decoder networks for shadow classification, segmentation
and confidence estimation.

All three networks share one encoder layout: a 3x3 stem convolution followed
by six pre-activation residual blocks (BN -> ReLU -> conv -> BN -> ReLU ->
conv, plus an identity or 1x1-projected skip).  Blocks 2-6 halve the
resolution.  The classifier global-average-pools the final map into a linear
layer; the segmentation and confidence networks add a mirrored six-block
decoder with skip concatenations.

With ``attention`` the feature maps entering the last two down-sampling
blocks are passed through additive attention gates driven by the final
encoder map.
"""

from __future__ import annotations

import copy
import io
import struct
from dataclasses import dataclass, field, asdict, replace
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ArchitectureMismatch, FormatError, ShapeError
from .flopsest import ConvLayerSpec

KINDS = ("classifier", "segmentation", "confidence")
CONF_ACTIVATIONS = ("clamp", "sigmoid")
DEFAULT_WIDTHS = (16, 32, 64, 128, 128, 128)


@dataclass(frozen=True)
class ArchSpec:
    kind: str = "segmentation"
    widths: tuple = DEFAULT_WIDTHS
    in_channels: int = 1
    n_classes: int = 2
    attention: bool = False
    conf_activation: str = "clamp"
    input_height: int = 256
    input_width: int = 256

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if len(self.widths) != 6:
            raise ValueError("encoder needs exactly six residual blocks")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("channel widths must be non-decreasing")
        if self.conf_activation not in CONF_ACTIVATIONS:
            raise ValueError(f"conf_activation must be one of {CONF_ACTIVATIONS}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))

    @property
    def stride(self) -> int:
        return 2 ** (len(self.widths) - 1)

    @property
    def out_channels(self) -> int:
        return {"classifier": self.n_classes, "segmentation": 2, "confidence": 1}[self.kind]

    def encoder_key(self):
        return (self.in_channels, self.widths)


class ResidualBlock(nn.Module):
    """Pre-activation residual unit.

    A stride-2 unit halves the resolution with 2x2 average pooling ahead of
    its 3x3 convolutions, so every conv output extent divides exactly.
    """

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1):
        super().__init__()
        if stride not in (1, 2):
            raise ValueError("stride must be 1 or 2")
        self.stride = stride
        self.bn1 = nn.BatchNorm2d(in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.project = None
        if in_ch != out_ch:
            self.project = nn.Conv2d(in_ch, out_ch, 1)

    def forward(self, x):
        if self.stride == 2:
            x = F.avg_pool2d(x, 2)
        h = F.relu(self.bn1(x))
        skip = x if self.project is None else self.project(h)
        h = self.conv1(h)
        h = self.conv2(F.relu(self.bn2(h)))
        return h + skip


class AttentionGate(nn.Module):
    """Additive attention: alpha = sigmoid(psi(relu(Wx x + Wg up(g)))), out = alpha * x."""

    def __init__(self, x_ch: int, g_ch: int, inter_ch: Optional[int] = None):
        super().__init__()
        inter_ch = inter_ch or max(1, x_ch // 2)
        self.theta = nn.Conv2d(x_ch, inter_ch, 1, bias=False)
        self.phi = nn.Conv2d(g_ch, inter_ch, 1)
        self.psi = nn.Conv2d(inter_ch, 1, 1)
        self.force: Optional[float] = None  # fixes alpha; used for ablations
        self.last_alpha: Optional[torch.Tensor] = None

    def forward(self, x, g):
        if self.force is not None:
            alpha = torch.full_like(x[:, :1], float(self.force))
        else:
            gg = F.interpolate(self.phi(g), size=x.shape[-2:], mode="bilinear", align_corners=False)
            alpha = torch.sigmoid(self.psi(F.relu(self.theta(x) + gg)))
        self.last_alpha = alpha
        return alpha * x


class Encoder(nn.Module):
    def __init__(self, in_channels: int, widths):
        super().__init__()
        self.stem = nn.Conv2d(in_channels, widths[0], 3, padding=1)
        blocks = []
        c = widths[0]
        for k, w in enumerate(widths):
            blocks.append(ResidualBlock(c, w, 1 if k == 0 else 2))
            c = w
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x):
        feats = []
        h = self.stem(x)
        for b in self.blocks:
            h = b(h)
            feats.append(h)
        return feats


class AttentionHead(nn.Module):
    """GAP of the two gated maps and the final map, concatenated, then one FC layer."""

    def __init__(self, c1: int, c2: int, c3: int, n_out: int):
        super().__init__()
        self.fc = nn.Linear(c1 + c2 + c3, n_out)

    def pooled(self, f1, f2, f3):
        return torch.cat([f.mean(dim=(2, 3)) for f in (f1, f2, f3)], dim=1)

    def forward(self, f1, f2, f3):
        return self.fc(self.pooled(f1, f2, f3))


class ShadowClassifier(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        w = arch.widths
        self.encoder = Encoder(arch.in_channels, w)
        self.bn_out = nn.BatchNorm2d(w[-1])
        if arch.attention:
            self.gate1 = AttentionGate(w[3], w[5])
            self.gate2 = AttentionGate(w[4], w[5])
            self.head = AttentionHead(w[3], w[4], w[5], arch.n_classes)
        else:
            self.fc = nn.Linear(w[-1], arch.n_classes)

    def forward(self, x):
        feats = self.encoder(x)
        f3 = F.relu(self.bn_out(feats[-1]))
        if not self.arch.attention:
            return self.fc(f3.mean(dim=(2, 3)))
        # maps entering the last two down-sampling blocks
        f1 = self.gate1(feats[3], f3)
        f2 = self.gate2(feats[4], f3)
        return self.head(f1, f2, f3)


class EncoderDecoder(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        w = arch.widths
        self.encoder = Encoder(arch.in_channels, w)
        dec = [ResidualBlock(w[5], w[5], 1)]
        for k in range(4, -1, -1):
            dec.append(ResidualBlock(w[k + 1] + w[k], w[k], 1))
        self.decoder = nn.ModuleList(dec)
        if arch.attention:
            self.gate1 = AttentionGate(w[3], w[5])
            self.gate2 = AttentionGate(w[4], w[5])
        self.bn_out = nn.BatchNorm2d(w[0])
        self.head = nn.Conv2d(w[0], arch.out_channels, 1)

    def forward(self, x):
        feats = self.encoder(x)
        skips = list(feats)
        if self.arch.attention:
            skips[3] = self.gate1(feats[3], feats[5])
            skips[4] = self.gate2(feats[4], feats[5])
        h = self.decoder[0](feats[5])
        for j, k in enumerate(range(4, -1, -1), start=1):
            h = F.interpolate(h, size=skips[k].shape[-2:], mode="nearest")
            h = self.decoder[j](torch.cat([h, skips[k]], dim=1))
        return self.head(F.relu(self.bn_out(h)))


def _init_seeded(arch: ArchSpec, seed: int) -> nn.Module:
    torch.manual_seed(seed)
    cls = ShadowClassifier if arch.kind == "classifier" else EncoderDecoder
    return cls(arch)


def build_model(arch: ArchSpec, seed: int = 0, dtype=torch.float32) -> nn.Module:
    """Seeded model construction.

    Extra input channels beyond the first get their own random stream, so the
    image-channel weights and every other parameter match the single-channel
    model built from the same seed.
    """
    if arch.in_channels == 1:
        model = _init_seeded(arch, seed)
    else:
        base = _init_seeded(replace(arch, in_channels=1), seed)
        model = _init_seeded(arch, seed)
        state = base.state_dict()
        stem_w = model.encoder.stem.weight.detach().clone()
        stem_w[:, :1] = state["encoder.stem.weight"]
        state["encoder.stem.weight"] = stem_w
        model.load_state_dict(state)
    return model.to(dtype)


# ----------------------------------------------------------------- helpers


def pad_to_multiple(x: torch.Tensor, multiple: int) -> torch.Tensor:
    h, w = x.shape[-2:]
    ph = (-h) % multiple
    pw = (-w) % multiple
    if ph == 0 and pw == 0:
        return x
    return F.pad(x, (0, pw, 0, ph))


def _check_input(model: nn.Module, x: torch.Tensor):
    arch = model.arch
    if x.ndim != 4 or x.shape[1] != arch.in_channels:
        raise ShapeError(f"expected (B, {arch.in_channels}, H, W) input, got {tuple(x.shape)}")
    if x.shape[-1] % arch.stride or x.shape[-2] % arch.stride:
        raise ShapeError(f"spatial dims {tuple(x.shape[-2:])} not divisible by {arch.stride}")


def classifier_forward(model: ShadowClassifier, x: torch.Tensor) -> torch.Tensor:
    _check_input(model, x)
    return model(x)


def seg_forward(model: EncoderDecoder, x: torch.Tensor) -> torch.Tensor:
    if model.arch.kind != "segmentation":
        raise ArchitectureMismatch(f"expected a segmentation model, got {model.arch.kind}")
    _check_input(model, x)
    return model(x)


def logits_to_mask(logits: torch.Tensor) -> torch.Tensor:
    """Per-pixel argmax; ties resolve to background."""
    return logits[:, 1] > logits[:, 0]


def conf_raw(model: EncoderDecoder, x: torch.Tensor) -> torch.Tensor:
    if model.arch.kind != "confidence":
        raise ArchitectureMismatch(f"expected a confidence model, got {model.arch.kind}")
    _check_input(model, x)
    return model(x)[:, 0]


def conf_activate(raw: torch.Tensor, activation: str) -> torch.Tensor:
    return torch.sigmoid(raw) if activation == "sigmoid" else raw.clamp(0.0, 1.0)


def conf_forward(model: EncoderDecoder, x: torch.Tensor) -> torch.Tensor:
    return conf_activate(conf_raw(model, x), model.arch.conf_activation)


def transfer_encoder_weights(src: ShadowClassifier, dst: EncoderDecoder) -> EncoderDecoder:
    """Copy the classifier's encoder (parameters and BN statistics) into ``dst``."""
    if src.arch.encoder_key() != dst.arch.encoder_key():
        raise ArchitectureMismatch(
            f"encoder mismatch: {src.arch.encoder_key()} vs {dst.arch.encoder_key()}")
    state = {k: v.detach().clone() for k, v in src.encoder.state_dict().items()}
    dst.encoder.load_state_dict(state)
    return dst


# -------------------------------------------------------------- descriptor


def conv_layers(model: nn.Module, height: int, width: int) -> list:
    """Resolved conv layer shapes for a forward pass at (height, width).

    Attention-gate convolutions are excluded from the cost model.
    """
    gate_convs = {id(m) for g in model.modules() if isinstance(g, AttentionGate) for m in g.modules()}
    records = []
    hooks = []
    for name, m in model.named_modules():
        if isinstance(m, nn.Conv2d) and id(m) not in gate_convs:
            def hook(mod, inp, out, name=name):
                _, c, h, w = inp[0].shape
                records.append(ConvLayerSpec(W=w, H=h, K=mod.kernel_size[0], P=mod.padding[0],
                                             S=mod.stride[0], F=mod.out_channels, C=c, name=name))
            hooks.append(m.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            p = next(model.parameters())
            model(torch.zeros(1, model.arch.in_channels, height, width, dtype=p.dtype))
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    return records


def describe(model: nn.Module) -> str:
    arch = model.arch
    lines = [
        f"kind = {arch.kind}",
        f"widths = {' '.join(map(str, arch.widths))}",
        f"in_channels = {arch.in_channels}",
        f"n_classes = {arch.n_classes}",
        f"attention = {int(arch.attention)}",
        f"conf_activation = {arch.conf_activation}",
        f"input_height = {arch.input_height}",
        f"input_width = {arch.input_width}",
        "downsample_blocks = 2 3 4 5 6",
        "block = bn relu conv3x3 bn relu conv3x3 + skip",
    ]
    for c in conv_layers(model, arch.input_height, arch.input_width):
        lines.append(f"conv.{c.name} = {c.W} {c.H} {c.K} {c.P} {c.S} {c.F} {c.C}")
    return "\n".join(lines) + "\n"


def parse_descriptor(text: str) -> ArchSpec:
    kv = {}
    for line in text.splitlines():
        if "=" in line and not line.startswith("conv."):
            k, _, v = line.partition("=")
            kv[k.strip()] = v.strip()
    try:
        return ArchSpec(
            kind=kv["kind"],
            widths=tuple(int(x) for x in kv["widths"].split()),
            in_channels=int(kv["in_channels"]),
            n_classes=int(kv.get("n_classes", 2)),
            attention=bool(int(kv["attention"])),
            conf_activation=kv.get("conf_activation", "clamp"),
            input_height=int(kv["input_height"]),
            input_width=int(kv["input_width"]),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad architecture descriptor: {exc}") from exc


# ------------------------------------------------------------ param blobs

_BLOB_MAGIC = b"SPB1"


def state_to_blob(state: dict) -> bytes:
    """Named arrays as little-endian float32, in state-dict order."""
    buf = io.BytesIO()
    buf.write(_BLOB_MAGIC)
    buf.write(struct.pack("<I", len(state)))
    for name, t in state.items():
        a = t.detach().cpu().numpy()
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<B", a.ndim))
        buf.write(struct.pack(f"<{a.ndim}I", *a.shape))
        buf.write(np.ascontiguousarray(a, dtype="<f4").tobytes())
    return buf.getvalue()


def blob_to_state(raw: bytes) -> dict:
    try:
        if raw[:4] != _BLOB_MAGIC:
            raise FormatError("bad parameter blob magic")
        off = 4
        (n,) = struct.unpack_from("<I", raw, off)
        off += 4
        state = {}
        for _ in range(n):
            (ln,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", raw, off)
            off += 4 * nd
            cnt = int(np.prod(shape)) if nd else 1
            a = np.frombuffer(raw, dtype="<f4", count=cnt, offset=off).reshape(shape)
            off += 4 * cnt
            state[name] = torch.from_numpy(a.astype(np.float32))
        if off != len(raw):
            raise FormatError("trailing bytes in parameter blob")
        return state
    except struct.error as exc:
        raise FormatError(f"truncated parameter blob: {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"corrupt parameter blob: {exc}") from exc


def load_state(model: nn.Module, state: dict) -> nn.Module:
    own = model.state_dict()
    conv = {}
    for k, v in state.items():
        if k not in own:
            raise ArchitectureMismatch(f"unexpected parameter {k}")
        conv[k] = v.to(own[k].dtype)
    model.load_state_dict(conv)
    return model


def n_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())
