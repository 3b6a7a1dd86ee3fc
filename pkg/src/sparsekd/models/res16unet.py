"""Res16UNet34C and its width-scaled students."""

from __future__ import annotations

import re
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from ..nn import BatchNorm, Module, ReLU, SparseConv, SparseConvTranspose, concat, residual_add
from ..sparse import SparseTensor

BASE_PLANES = (32, 64, 128, 256, 256, 128, 96, 96)
BLOCK_COUNTS = (2, 3, 4, 6, 2, 2, 2, 2)

_NAMED_DIVISORS = {
    "Res16UNet34C": 1,
    "Res16UNet34C_Half": 2,
    "Res16UNet34C_Quarter": 4,
}
_DIVISOR_RE = re.compile(r"^Res16UNet34C@divisor=(\d+)$")


@dataclass(frozen=True)
class ArchSpec:
    width_divisor: int = 1
    num_classes: int = 20
    in_channels: int = 3
    dims: int = 3
    base_planes: tuple = BASE_PLANES
    block_counts: tuple = BLOCK_COUNTS
    stem_kernel: int = 3

    def __post_init__(self):
        if self.width_divisor < 1:
            raise ValueError("width_divisor must be >= 1")
        if len(self.base_planes) != 8 or len(self.block_counts) != 8:
            raise ValueError("planes and block_counts need 8 entries (4 encoder + 4 decoder levels)")
        for p in self.base_planes:
            if p // self.width_divisor == 0:
                raise ValueError(f"width divisor {self.width_divisor} gives a zero-width layer")
            if p % self.width_divisor:
                raise ValueError(f"width divisor {self.width_divisor} does not divide {p}")
        if self.num_classes < 1:
            raise ValueError("num_classes must be positive")

    @property
    def planes(self) -> tuple:
        return tuple(p // self.width_divisor for p in self.base_planes)

    @property
    def init_dim(self) -> int:
        return self.planes[0]

    @property
    def name(self) -> str:
        for name, d in _NAMED_DIVISORS.items():
            if d == self.width_divisor:
                return name
        return f"Res16UNet34C@divisor={self.width_divisor}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["base_planes"] = list(self.base_planes)
        d["block_counts"] = list(self.block_counts)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        for key in ("base_planes", "block_counts"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def parse_arch(name: str, num_classes: int = 20, **kw) -> ArchSpec:
    """``Res16UNet34C``, ``..._Half``, ``..._Quarter`` or ``Res16UNet34C@divisor=N``."""
    if name in _NAMED_DIVISORS:
        divisor = _NAMED_DIVISORS[name]
    else:
        m = _DIVISOR_RE.match(name)
        if m is None:
            raise ValueError(f"unknown architecture {name!r}")
        divisor = int(m.group(1))
    return ArchSpec(width_divisor=divisor, num_classes=num_classes, **kw)


class TappedOutput(NamedTuple):
    logits: SparseTensor
    encoder_tap: SparseTensor
    decoder_tap: SparseTensor


class Sequential(Module):
    def __init__(self, *layers):
        super().__init__()
        self.layers = list(layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g):
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


class BasicBlock(Module):
    """conv3-bn-relu-conv3-bn plus identity (or 1x1 conv-bn) shortcut, then relu."""

    def __init__(self, inplanes, planes, dim, rng):
        super().__init__()
        self.conv1 = SparseConv(inplanes, planes, 3, dim=dim, rng=rng)
        self.bn1 = BatchNorm(planes)
        self.relu1 = ReLU()
        self.conv2 = SparseConv(planes, planes, 3, dim=dim, rng=rng)
        self.bn2 = BatchNorm(planes)
        self.downsample = (
            Sequential(SparseConv(inplanes, planes, 1, dim=dim, rng=rng), BatchNorm(planes))
            if inplanes != planes
            else None
        )
        self.relu2 = ReLU()

    def forward(self, x):
        out = self.relu1.forward(self.bn1.forward(self.conv1.forward(x)))
        out = self.bn2.forward(self.conv2.forward(out))
        shortcut = self.downsample.forward(x) if self.downsample is not None else x
        return self.relu2.forward(residual_add(out, shortcut))

    def backward(self, g):
        g = self.relu2.backward(g)
        g_main = self.conv2.backward(self.bn2.backward(g))
        g_main = self.conv1.backward(self.bn1.backward(self.relu1.backward(g_main)))
        g_short = self.downsample.backward(g) if self.downsample is not None else g
        return g_main + g_short


def _conv_bn_relu(cin, cout, kernel, stride, dim, rng, transposed=False):
    conv_cls = SparseConvTranspose if transposed else SparseConv
    return Sequential(conv_cls(cin, cout, kernel, stride, dim=dim, rng=rng), BatchNorm(cout), ReLU())


class Res16UNet(Module):
    """Four-level sparse residual U-Net with skip concatenation.

    Encoder strides go 1 -> 2 -> 4 -> 8 -> 16 and the decoder mirrors them,
    so the logits live on the input coordinates. ``forward_tapped`` also
    returns the bottleneck output (encoder tap, stride 16) and the last
    decoder block output (decoder tap, stride 1).
    """

    def __init__(self, spec: ArchSpec, seed: int = 0):
        super().__init__()
        self.spec = spec
        rng = np.random.default_rng(seed)
        p, n, d = spec.planes, spec.block_counts, spec.dims
        init = spec.init_dim

        def blocks(inplanes, planes, count):
            out = [BasicBlock(inplanes, planes, d, rng)]
            out += [BasicBlock(planes, planes, d, rng) for _ in range(count - 1)]
            return Sequential(*out)

        self.stem = _conv_bn_relu(spec.in_channels, init, spec.stem_kernel, 1, d, rng)
        self.down1 = _conv_bn_relu(init, init, 2, 2, d, rng)
        self.block1 = blocks(init, p[0], n[0])
        self.down2 = _conv_bn_relu(p[0], p[0], 2, 2, d, rng)
        self.block2 = blocks(p[0], p[1], n[1])
        self.down3 = _conv_bn_relu(p[1], p[1], 2, 2, d, rng)
        self.block3 = blocks(p[1], p[2], n[2])
        self.down4 = _conv_bn_relu(p[2], p[2], 2, 2, d, rng)
        self.block4 = blocks(p[2], p[3], n[3])

        self.up4 = _conv_bn_relu(p[3], p[4], 2, 2, d, rng, transposed=True)
        self.block5 = blocks(p[4] + p[2], p[4], n[4])
        self.up5 = _conv_bn_relu(p[4], p[5], 2, 2, d, rng, transposed=True)
        self.block6 = blocks(p[5] + p[1], p[5], n[5])
        self.up6 = _conv_bn_relu(p[5], p[6], 2, 2, d, rng, transposed=True)
        self.block7 = blocks(p[6] + p[0], p[6], n[6])
        self.up7 = _conv_bn_relu(p[6], p[7], 2, 2, d, rng, transposed=True)
        self.block8 = blocks(p[7] + init, p[7], n[7])

        self.classifier = SparseConv(p[7], spec.num_classes, 1, bias=True, dim=d, rng=rng)

    # (decoder upsample, decoder blocks, skip channel count) per level
    def _decoder(self):
        p, init = self.spec.planes, self.spec.init_dim
        return [
            (self.up4, self.block5, p[2]),
            (self.up5, self.block6, p[1]),
            (self.up6, self.block7, p[0]),
            (self.up7, self.block8, init),
        ]

    def forward_tapped(self, x: SparseTensor) -> TappedOutput:
        if x.features.shape[1] != self.spec.in_channels:
            raise ValueError(f"expected {self.spec.in_channels} input channels, got {x.features.shape[1]}")
        if x.stride != 1:
            raise ValueError("network input must be at tensor stride 1")
        skips = [self.stem.forward(x)]
        out = skips[0]
        for down, block in ((self.down1, self.block1), (self.down2, self.block2), (self.down3, self.block3)):
            out = block.forward(down.forward(out))
            skips.append(out)
        encoder_tap = self.block4.forward(self.down4.forward(out))
        out = encoder_tap
        for (up, block, _), skip in zip(self._decoder(), reversed(skips)):
            out = block.forward(concat(up.forward(out), skip))
        decoder_tap = out
        return TappedOutput(self.classifier.forward(decoder_tap), encoder_tap, decoder_tap)

    def forward(self, x: SparseTensor) -> SparseTensor:
        return self.forward_tapped(x).logits

    def backward(self, grad_logits, grad_encoder=None, grad_decoder=None) -> np.ndarray:
        """Backpropagate logit (and optional tap) gradients; returns d/d input features."""
        g = self.classifier.backward(grad_logits)
        if grad_decoder is not None:
            g = g + grad_decoder
        skip_grads = []
        for up, block, skip_ch in reversed(self._decoder()):
            g = block.backward(g)
            up_ch = g.shape[1] - skip_ch
            skip_grads.append(g[:, up_ch:])
            g = up.backward(g[:, :up_ch])
        if grad_encoder is not None:
            g = g + grad_encoder
        g = self.down4.backward(self.block4.backward(g))
        # skip_grads is ordered by stride 1, 2, 4, 8
        for (down, block), skip_g in zip(
            ((self.down3, self.block3), (self.down2, self.block2), (self.down1, self.block1)),
            skip_grads[:0:-1],
        ):
            g = down.backward(block.backward(g + skip_g))
        return self.stem.backward(g + skip_grads[0])


def build_res16unet(spec: ArchSpec, seed: int = 0) -> Res16UNet:
    return Res16UNet(spec, seed)


def forward_tapped(network: Res16UNet, x: SparseTensor, training: bool) -> TappedOutput:
    network.train(training)
    return network.forward_tapped(x)


@dataclass
class ParamCount:
    trainable: int
    total: int
    per_layer: dict = field(default_factory=dict)


def param_count(network: Module) -> ParamCount:
    """Trainable count covers conv weights/biases and BN affine terms; total adds BN running stats."""
    trainable = sum(p.size for p in network.parameters())
    buffers = sum(b.size for _, b in network.named_buffers())
    per_layer = {name: p.shape for name, p in network.named_parameters()}
    return ParamCount(trainable, trainable + buffers, per_layer)
