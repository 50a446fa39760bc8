"""Composite building blocks: VGG-style encoder stages, multi-scale progressive
channel attention (MPCA), frequency-spatial attention (FSA) with its spatial
branch, decoder blocks, and the prediction head.

Blocks are parameter containers plus pure forward functions; weights are
created in a shared registry at construction time (Kaiming-uniform fan-in
for conv kernels, zero biases, all-ones spectral filters).
"""

from __future__ import annotations

import numpy as np

from . import fourier, ops
from .errors import ShapeError
from .tensor import ParameterRegistry, RealTensor4

#: VGG16 stage layout: convolutions per stage and stage output channels
VGG_STAGE_CONVS = (2, 2, 3, 3, 3)
VGG_STAGE_CHANNELS = (64, 128, 256, 512, 512)


def _kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = float(np.sqrt(6.0 / fan_in))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2dLayer:
    """3x3/1x1/7x7 convolution with bias and optional padding."""

    def __init__(self, reg: ParameterRegistry, name: str, cin: int, cout: int, k: int,
                 rng: np.random.Generator, dtype, padding: int = 0):
        self.padding = padding
        w = _kaiming_uniform(rng, (cout, cin, k, k), cin * k * k, dtype)
        self.weight = reg.create(f"{name}.weight", w)
        self.bias = reg.create(f"{name}.bias", np.zeros((1, cout, 1, 1), dtype=dtype))

    def __call__(self, x: RealTensor4) -> RealTensor4:
        return ops.conv2d(x, self.weight.value, self.bias.value, stride=1, padding=self.padding)


class ConvTranspose2dLayer:
    """2x2 stride-2 transposed convolution (channel-matching 2x upsampler)."""

    def __init__(self, reg: ParameterRegistry, name: str, cin: int, cout: int,
                 rng: np.random.Generator, dtype):
        w = _kaiming_uniform(rng, (cin, cout, 2, 2), cin * 4, dtype)
        self.weight = reg.create(f"{name}.weight", w)
        self.bias = reg.create(f"{name}.bias", np.zeros((1, cout, 1, 1), dtype=dtype))

    def __call__(self, x: RealTensor4) -> RealTensor4:
        return ops.conv_transpose2d(x, self.weight.value, self.bias.value)


class EncoderStage:
    """Stack of (3x3 conv pad 1 + ReLU) layers feeding one feature level."""

    def __init__(self, reg, name, cin, cout, n_convs, rng, dtype):
        self.convs = [
            Conv2dLayer(reg, f"{name}.conv{j}", cin if j == 0 else cout, cout, 3, rng, dtype, padding=1)
            for j in range(n_convs)
        ]

    def __call__(self, x: RealTensor4) -> RealTensor4:
        for conv in self.convs:
            x = ops.relu(conv(x))
        return x


class Encoder:
    """Five VGG16-style stages; features are tapped before each maxpool."""

    def __init__(self, reg, input_channels: int, rng, dtype):
        self.stages = []
        cin = input_channels
        for i, (n_convs, cout) in enumerate(zip(VGG_STAGE_CONVS, VGG_STAGE_CHANNELS), start=1):
            self.stages.append(EncoderStage(reg, f"enc{i}", cin, cout, n_convs, rng, dtype))
            cin = cout

    def __call__(self, image: RealTensor4) -> list[RealTensor4]:
        h, w = image.dims[2], image.dims[3]
        if h % 16 or w % 16:
            raise ShapeError(f"encoder input must be divisible by 16, got {h}x{w}")
        feats = []
        x = image
        for i, stage in enumerate(self.stages):
            if i > 0:
                x = ops.maxpool2(x)
            x = stage(x)
            feats.append(x)
        return feats


class MPCABlock:
    """Cross-scale channel attention over two adjacent feature levels.

    Pipeline: per-branch GAP + 1x1 conv, concat, fusing 1x1 conv + sigmoid
    into the attention map, split back per level, channel-weight both inputs,
    transposed-conv upsample the coarser one, and add.
    """

    def __init__(self, reg, name, c_cur: int, c_next: int, rng, dtype):
        self.c_cur = c_cur
        self.c_next = c_next
        self.conv_cur = Conv2dLayer(reg, f"{name}.conv_cur", c_cur, c_cur, 1, rng, dtype)
        self.conv_next = Conv2dLayer(reg, f"{name}.conv_next", c_next, c_next, 1, rng, dtype)
        self.fuse = Conv2dLayer(reg, f"{name}.fuse", c_cur + c_next, c_cur + c_next, 1, rng, dtype)
        self.up = ConvTranspose2dLayer(reg, f"{name}.up", c_next, c_cur, rng, dtype)

    def attention_map(self, f_cur: RealTensor4, f_next: RealTensor4) -> RealTensor4:
        d_cur = self.conv_cur(ops.global_avg_pool(f_cur))
        d_next = self.conv_next(ops.global_avg_pool(f_next))
        return ops.sigmoid(self.fuse(ops.concat_channels(d_cur, d_next)))

    def __call__(self, f_cur: RealTensor4, f_next: RealTensor4) -> RealTensor4:
        n, c, h, w = f_cur.dims
        if f_next.dims[2] * 2 != h or f_next.dims[3] * 2 != w:
            raise ShapeError(
                f"MPCA inputs must halve spatially: got {f_cur.dims} and {f_next.dims}"
            )
        a = self.attention_map(f_cur, f_next)
        a_cur, a_next = ops.split_channels(a, self.c_cur)
        weighted_cur = ops.broadcast_mul(f_cur, a_cur)
        weighted_next = ops.broadcast_mul(f_next, a_next)
        return ops.add(weighted_cur, self.up(weighted_next))


class SpatialAttention:
    """CBAM-style spatial attention: 7x7 conv over channelwise max+mean maps."""

    def __init__(self, reg, name, rng, dtype):
        self.conv = Conv2dLayer(reg, f"{name}.conv", 2, 1, 7, rng, dtype, padding=3)

    def __call__(self, x: RealTensor4) -> RealTensor4:
        stats = ops.concat_channels(ops.channel_max(x), ops.channel_mean(x))
        attn = ops.sigmoid(self.conv(stats))
        return ops.broadcast_mul(x, attn)


class FSABlock:
    """Frequency-spatial attention bound to one feature resolution.

    The frequency branch transforms the input, splits the centered spectrum
    into complementary low/high bands, filters the low band with a learnable
    per-frequency multiplier, recombines, inverse-transforms, and keeps the
    real part. The output adds the spatial-attention branch.
    """

    def __init__(self, reg, name, channels: int, hw: tuple[int, int], rho: float,
                 filter_mode: str, rng, dtype):
        h, w = hw
        self.hw = (h, w)
        self.masks = fourier.build_masks(h, w, rho)
        c_filt = 1 if filter_mode == "broadcast" else channels
        param = reg.create(f"{name}.filter", np.ones((1, c_filt, h, w), dtype=dtype))
        self.filter = fourier.GlobalFilter(filter_mode, param)
        self.spatial = SpatialAttention(reg, f"{name}.sa", rng, dtype)

    def frequency_branch(self, x: RealTensor4) -> RealTensor4:
        spectrum = fourier.fftshift2(fourier.dft2(x))
        low = fourier.apply_mask(spectrum, self.masks.low)
        high = fourier.apply_mask(spectrum, self.masks.high)
        recombined = fourier.complex_add(high, fourier.apply_filter(low, self.filter))
        return fourier.take_real(fourier.idft2(fourier.ifftshift2(recombined)))

    def __call__(self, x: RealTensor4) -> RealTensor4:
        if (x.dims[2], x.dims[3]) != self.hw:
            raise ShapeError(
                f"FSA block built for {self.hw[0]}x{self.hw[1]} received {x.dims[2]}x{x.dims[3]}"
            )
        return ops.add(self.frequency_branch(x), self.spatial(x))


class DecoderBlock:
    """Upsample the coarser input 2x, concat with the skip, fuse with two convs."""

    def __init__(self, reg, name, c_skip: int, c_below: int, rng, dtype):
        cin = c_skip + c_below
        self.conv0 = Conv2dLayer(reg, f"{name}.conv0", cin, c_skip, 3, rng, dtype, padding=1)
        self.conv1 = Conv2dLayer(reg, f"{name}.conv1", c_skip, c_skip, 3, rng, dtype, padding=1)

    def __call__(self, skip: RealTensor4, below: RealTensor4) -> RealTensor4:
        if below.dims[2] * 2 != skip.dims[2] or below.dims[3] * 2 != skip.dims[3]:
            raise ShapeError(
                f"decoder inputs must halve spatially: skip {skip.dims}, below {below.dims}"
            )
        x = ops.concat_channels(skip, ops.interpolate2x(below))
        x = ops.relu(self.conv0(x))
        return ops.relu(self.conv1(x))


class PredictionHead:
    """Two 3x3 convolutions mapping decoder features to per-class logits.

    ReLU after the first conv only; softmax lives in the loss.
    """

    def __init__(self, reg, name, cin: int, n_classes: int, rng, dtype):
        self.conv0 = Conv2dLayer(reg, f"{name}.conv0", cin, cin, 3, rng, dtype, padding=1)
        self.conv1 = Conv2dLayer(reg, f"{name}.conv1", cin, n_classes, 3, rng, dtype, padding=1)

    def __call__(self, x: RealTensor4) -> RealTensor4:
        return self.conv1(ops.relu(self.conv0(x)))
