"""Closed-form parameter and FLOP counts for ArchConfigs.

FLOPs are 2 x multiply-accumulates for every convolution, plus one op per
element for each activation and each global-average-pool input. Batch
norm is treated as folded into the preceding conv for FLOPs but its affine
pair is counted as parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .space import ArchConfig, SearchSpace, decoder_tail_width, se_channels

SCOPES = ("encoder", "full")


@dataclass(frozen=True)
class LayerCost:
    name: str
    params: int
    flops: int
    spatial: bool = True  # False for costs that do not scale with H*W


@dataclass
class CostReport:
    params: int
    flops: int
    resolution: tuple[int, int]
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def fixed_flops(self) -> int:
        """FLOPs that do not depend on the input resolution (SE bottlenecks)."""
        return sum(l.flops for l in self.layers if not l.spatial)


def _down(n: int, stride: int) -> int:
    # same for k=3 and k=5 with padding k // 2
    return (n - 1) // stride + 1


def conv_cost(name, h, w, cin, cout, k, stride=1, groups=1, bias=False, bn=False, act=False):
    """Cost of one conv at input size h x w; returns (LayerCost, out_h, out_w)."""
    ho, wo = _down(h, stride), _down(w, stride)
    params = cout * (cin // groups) * k * k + (cout if bias else 0) + (2 * cout if bn else 0)
    flops = 2 * ho * wo * cout * (cin // groups) * k * k + (ho * wo * cout if act else 0)
    return LayerCost(name, params, flops), ho, wo


def layer_costs(config: ArchConfig, resolution: tuple[int, int] | None = None,
                scope: str = "full", space: SearchSpace | None = None) -> list[LayerCost]:
    if scope not in SCOPES:
        raise ValueError(f"scope must be one of {SCOPES}, got {scope!r}")
    from .space import full_space

    space = space or full_space()
    h, w = resolution or config.resolution
    out: list[LayerCost] = []

    c, h1, w1 = conv_cost("first_conv", h, w, 3, config.first_conv_width, 3, stride=space.first_conv.stride,
                      bn=True, act=True)
    out.append(c)
    hh, ww = h1, w1
    prev = config.first_conv_width
    skip_res: dict[int, tuple[int, int]] = {}
    for bi, (spec, blk) in enumerate(zip(space.mbconv, config.blocks)):
        for li in range(blk.depth):
            p = f"mbconv{bi + 1}.{li}"
            cin = prev if li == 0 else blk.width
            stride = spec.stride if li == 0 else 1
            mid = cin * blk.expansion
            if blk.expansion > 1:
                c, _, _ = conv_cost(f"{p}.expand", hh, ww, cin, mid, 1, bn=True, act=True)
                out.append(c)
            c, hh, ww = conv_cost(f"{p}.dw", hh, ww, mid, mid, blk.kernel, stride=stride, groups=mid,
                              bn=True, act=True)
            out.append(c)
            if spec.se:
                r = se_channels(mid)
                out.append(LayerCost(f"{p}.se.pool", 0, hh * ww * mid))
                out.append(LayerCost(f"{p}.se.reduce", mid * r + r, 2 * mid * r + r, spatial=False))
                out.append(LayerCost(f"{p}.se.expand", r * mid + mid, 2 * r * mid + mid, spatial=False))
            c, _, _ = conv_cost(f"{p}.project", hh, ww, mid, blk.width, 1, bn=True)
            out.append(c)
            prev = blk.width
        skip_res[bi] = (hh, ww)
    c, _, _ = conv_cost("last_conv", hh, ww, prev, config.last_conv_width, 1, bn=True, act=True)
    out.append(c)
    if scope == "encoder":
        return out

    widths = [b.width for b in config.blocks]
    tail = decoder_tail_width(widths[0])
    chain = [config.last_conv_width, widths[4], widths[2], widths[1], widths[0], tail]
    targets = [skip_res[4], skip_res[2], skip_res[1], skip_res[0], (h, w)]
    for i in range(5):
        th, tw = targets[i]
        c, _, _ = conv_cost(f"decoder.{i}", th, tw, chain[i], chain[i + 1], 3, bias=True, act=True)
        out.append(c)
    c, _, _ = conv_cost("head", h, w, tail, 1, 1, bias=True, act=True)
    out.append(c)
    return out


def cost_report(config: ArchConfig, resolution: tuple[int, int] | None = None, scope: str = "full",
                space: SearchSpace | None = None) -> CostReport:
    layers = layer_costs(config, resolution, scope, space)
    return CostReport(sum(l.params for l in layers), sum(l.flops for l in layers),
                      tuple(resolution or config.resolution), layers)


def count_params(config: ArchConfig, scope: str = "full", space: SearchSpace | None = None) -> int:
    return sum(l.params for l in layer_costs(config, None, scope, space))


def count_flops(config: ArchConfig, resolution: tuple[int, int] | None = None, scope: str = "full",
                space: SearchSpace | None = None) -> int:
    return sum(l.flops for l in layer_costs(config, resolution, scope, space))
