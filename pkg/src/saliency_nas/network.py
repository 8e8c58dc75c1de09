"""Materialise a subnet from the shared store and run it.

Encoder: stride-2 stem, seven MBConv stages, 1x1 last conv. Decoder: five
upsampling stages, each a x2 bilinear resize, a 3x3 conv and relu, plus an
additive skip from the encoder feature at that resolution; a 1x1 head, a
sigmoid and a per-image division by the sum turn the result into a
probability map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import ops
from .space import ArchConfig, ConfigError, decoder_tail_width, se_channels
from .store import ParameterStore, SliceSpec, decoder_dims, mbconv_layer_dims, slice_weights
from .tensor import ShapeError, Tensor


@dataclass(frozen=True)
class ConvLayer:
    """A conv (+ optional bn / activation) reading a slice of the store."""

    name: str
    spec: SliceSpec
    stride: int = 1
    groups: int = 1
    bn: str | None = None
    bias: bool = False
    act: str | None = None

    @property
    def padding(self) -> int:
        return self.spec.k // 2

    @property
    def out_channels(self) -> int:
        return self.spec.c_out


@dataclass(frozen=True)
class MBLayer:
    block: int
    index: int
    in_ch: int
    mid: int
    out_ch: int
    kernel: int
    stride: int
    act: str
    expand: ConvLayer | None
    dw: ConvLayer
    se: tuple[ConvLayer, ConvLayer] | None
    project: ConvLayer

    @property
    def residual(self) -> bool:
        return self.stride == 1 and self.in_ch == self.out_ch


@dataclass
class ExecutableNet:
    """A subnet: an ArchConfig bound to a ParameterStore."""

    config: ArchConfig
    store: ParameterStore
    stem: ConvLayer
    layers: list[MBLayer]
    last: ConvLayer
    decoder: list[ConvLayer]
    head: ConvLayer
    skip_blocks: tuple[int, ...]
    training: bool = True
    bn_momentum: float = 0.1
    forward_count: int = 0
    _used: list = field(default_factory=list, repr=False)

    # ------------------------------------------------------------ helpers
    def train(self) -> "ExecutableNet":
        self.training = True
        return self

    def eval(self) -> "ExecutableNet":
        self.training = False
        return self

    @property
    def conv_layer_count(self) -> int:
        """Stem + MBConv layers + last conv, then decoder stages + head."""
        return 2 + len(self.layers) + len(self.decoder) + 1

    def used_parameters(self) -> list[tuple[str, tuple]]:
        """(name, index) of every store window this subnet reads."""
        return list(self._used)

    def weight_elements(self) -> int:
        """Element count over the sliced views actually read by this subnet."""
        return sum(self.store[name].data[idx].size for name, idx in self._used)

    def _conv(self, layer: ConvLayer, x: Tensor) -> Tensor:
        w = slice_weights(self.store[f"{layer.name}.weight"], layer.spec)
        b = self.store[f"{layer.name}.bias"][: layer.spec.c_out] if layer.bias else None
        y = ops.conv2d(x, w, b, stride=layer.stride, padding=layer.padding, groups=layer.groups)
        if layer.bn is not None:
            c = y.shape[1]
            y = ops.batch_norm(
                y, self.store[f"{layer.bn}.weight"][:c], self.store[f"{layer.bn}.bias"][:c],
                self.store.buffer(f"{layer.bn}.running_mean")[:c],
                self.store.buffer(f"{layer.bn}.running_var")[:c],
                training=self.training, momentum=self.bn_momentum)
        if layer.act is not None:
            y = ops.elementwise(layer.act, y)
        return y

    def _mbconv(self, layer: MBLayer, x: Tensor) -> Tensor:
        h = self._conv(layer.expand, x) if layer.expand is not None else x
        h = self._conv(layer.dw, h)
        if layer.se is not None:
            reduce, expand = layer.se
            s = ops.global_avg_pool(h)
            s = self._conv(reduce, s)
            s = self._conv(expand, s)
            h = h * s
        h = self._conv(layer.project, h)
        return h + x if layer.residual else h

    # ------------------------------------------------------------ forward
    def encode(self, x: Tensor) -> tuple[Tensor, list[Tensor]]:
        """Encoder output plus the skip features consumed by the decoder."""
        h = self._conv(self.stem, x)
        block_out: dict[int, Tensor] = {}
        for layer in self.layers:
            h = self._mbconv(layer, h)
            block_out[layer.block] = h
        h = self._conv(self.last, h)
        return h, [block_out[b] for b in self.skip_blocks]

    def __call__(self, image) -> Tensor:
        return self.forward(image)

    def forward(self, image) -> Tensor:
        x = image if isinstance(image, Tensor) else Tensor(np.asarray(image, dtype=self.store.dtype))
        if x.dtype != self.store.dtype:
            x = Tensor(x.data.astype(self.store.dtype))
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"expected image batch (B, 3, H, W), got {x.shape}")
        if tuple(x.shape[2:]) != tuple(self.config.resolution):
            raise ShapeError(
                f"input resolution {x.shape[2]}x{x.shape[3]} does not match config resolution "
                f"{self.config.resolution[0]}x{self.config.resolution[1]}")
        self.forward_count += 1
        h, skips = self.encode(x)
        targets = [s.shape[2:] for s in skips] + [x.shape[2:]]
        for i, stage in enumerate(self.decoder):
            h = ops.bilinear_upsample(h, 2, size=tuple(targets[i]))
            h = self._conv(stage, h)
            if i < len(skips):
                h = h + skips[i]
        z = self._conv(self.head, h)
        s = ops.sigmoid(z)
        return s / s.sum(axis=(2, 3), keepdims=True)


def _check_fits(name: str, store: ParameterStore, spec: SliceSpec) -> None:
    key = f"{name}.weight"
    if key not in store:
        raise ConfigError(f"store has no layer {name!r} (config deeper than the store)")
    try:
        spec.check(store[key].shape)
    except ValueError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def build_network(config: ArchConfig, store: ParameterStore) -> ExecutableNet:
    """Resolve every layer of ``config`` to slices of ``store``."""
    space = store.space
    if len(config.blocks) != len(space.mbconv):
        raise ConfigError(f"config has {len(config.blocks)} MBConv blocks, store has {len(space.mbconv)}")
    used: list[tuple[str, tuple]] = []

    def conv(name, c_out, c_in, k, stride=1, groups=1, bn=True, bias=False, act=None) -> ConvLayer:
        spec = SliceSpec(c_out, c_in, k)
        _check_fits(name, store, spec)
        used.append((f"{name}.weight", spec.index(store[f"{name}.weight"].shape)))
        if bias:
            used.append((f"{name}.bias", (slice(0, c_out),)))
        bn_name = None
        if bn:
            bn_name = name.rsplit(".", 1)[0] + ".bn"
            used.append((f"{bn_name}.weight", (slice(0, c_out),)))
            used.append((f"{bn_name}.bias", (slice(0, c_out),)))
        return ConvLayer(name, spec, stride, groups, bn_name, bias, act)

    stem = conv("first_conv.conv", config.first_conv_width, 3, 3, stride=space.first_conv.stride,
                act=space.first_conv.activation)
    max_depth = {bi: 0 for bi in range(len(space.mbconv))}
    for d in mbconv_layer_dims(space):
        max_depth[d.block] += 1

    layers: list[MBLayer] = []
    prev = config.first_conv_width
    for bi, (spec, blk) in enumerate(zip(space.mbconv, config.blocks)):
        if blk.depth > max_depth[bi]:
            raise ConfigError(f"{spec.name}: depth {blk.depth} exceeds store depth {max_depth[bi]}")
        for li in range(blk.depth):
            p = f"mbconv{bi + 1}.{li}"
            cin = prev if li == 0 else blk.width
            stride = spec.stride if li == 0 else 1
            mid = cin * blk.expansion
            expand = None
            if blk.expansion > 1:
                expand = conv(f"{p}.expand.conv", mid, cin, 1, act=spec.activation)
            dw = conv(f"{p}.dw.conv", mid, 1, blk.kernel, stride=stride, groups=mid, act=spec.activation)
            se = None
            if spec.se:
                r = se_channels(mid)
                se = (conv(f"{p}.se.reduce", r, mid, 1, bn=False, bias=True, act="relu"),
                      conv(f"{p}.se.expand", mid, r, 1, bn=False, bias=True, act="sigmoid"))
            project = conv(f"{p}.project.conv", blk.width, mid, 1)
            layers.append(MBLayer(bi, li, cin, mid, blk.width, blk.kernel, stride, spec.activation,
                                  expand, dw, se, project))
            prev = blk.width

    last = conv("last_conv.conv", config.last_conv_width, prev, 1, act=space.last_conv.activation)

    widths = [b.width for b in config.blocks]
    tail = decoder_tail_width(widths[0])
    chain = [config.last_conv_width, widths[4], widths[2], widths[1], widths[0], tail]
    n_stages = len(decoder_dims(space)) - 1
    decoder = [conv(f"decoder.{i}", chain[i + 1], chain[i], 3, bn=False, bias=True, act="relu")
               for i in range(n_stages)]
    head = conv("head", 1, tail, 1, bn=False, bias=True)
    # skip features at the resolutions of mbconv5, mbconv3, mbconv2, mbconv1
    skip_blocks = (4, 2, 1, 0)
    return ExecutableNet(config, store, stem, layers, last, decoder, head, skip_blocks, _used=used)


def forward_saliency(net: ExecutableNet, image) -> Tensor:
    return net.forward(image)
