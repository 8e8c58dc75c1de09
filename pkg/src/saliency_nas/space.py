"""Search space description, architecture configs and subnet sampling."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from typing import Iterable, Sequence

import numpy as np

Resolution = tuple[int, int]

MBCONV_NAMES = tuple(f"mbconv{i}" for i in range(1, 8))
TABLE1_RESOLUTIONS: tuple[Resolution, ...] = ((256, 192), (384, 288))


class ConfigError(ValueError):
    """Raised when an ArchConfig does not fit its search space or store."""


@dataclass(frozen=True)
class BlockSpec:
    """Choice lists for one row of the search-space table."""

    name: str
    widths: tuple[int, ...]
    depths: tuple[int, ...] = (1,)
    kernels: tuple[int, ...] = (3,)
    expansions: tuple[int, ...] = (1,)
    se: bool = False
    stride: int = 1
    activation: str = "relu"

    def __post_init__(self):
        for label in ("widths", "depths", "kernels", "expansions"):
            values = tuple(getattr(self, label))
            if not values:
                raise ValueError(f"{self.name}: empty {label} choice list")
            if list(values) != sorted(set(values)):
                raise ValueError(f"{self.name}: {label} must be strictly ascending, got {values}")
            object.__setattr__(self, label, values)
        if any(k % 2 == 0 for k in self.kernels):
            raise ValueError(f"{self.name}: kernel sizes must be odd")


@dataclass(frozen=True)
class SearchSpace:
    """Ordered block rows: first conv, seven MBConv stages, last conv."""

    first_conv: BlockSpec
    mbconv: tuple[BlockSpec, ...]
    last_conv: BlockSpec
    resolutions: tuple[Resolution, ...] = TABLE1_RESOLUTIONS
    name: str = "custom"

    def __post_init__(self):
        if len(self.mbconv) != 7:
            raise ValueError(f"expected 7 MBConv stages, got {len(self.mbconv)}")
        res = tuple(tuple(int(v) for v in r) for r in self.resolutions)
        if not res:
            raise ValueError("empty resolution choice list")
        res = tuple(sorted(set(res), key=lambda r: (r[0] * r[1], r)))
        object.__setattr__(self, "resolutions", res)
        object.__setattr__(self, "mbconv", tuple(self.mbconv))

    @property
    def blocks(self) -> tuple[BlockSpec, ...]:
        return (self.first_conv, *self.mbconv, self.last_conv)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(b.stride for b in self.blocks)

    def with_resolutions(self, resolutions: Iterable[Resolution]) -> "SearchSpace":
        """Copy with the resolution choices replaced (desk-scale override)."""
        return replace(self, resolutions=tuple(tuple(r) for r in resolutions))

    def validate(self, config: "ArchConfig") -> None:
        def check(label, value, choices):
            if value not in choices:
                raise ConfigError(f"{label}={value} not in choices {list(choices)}")

        check("resolution", tuple(config.resolution), self.resolutions)
        check("first_conv_width", config.first_conv_width, self.first_conv.widths)
        check("last_conv_width", config.last_conv_width, self.last_conv.widths)
        if len(config.blocks) != 7:
            raise ConfigError(f"expected 7 MBConv blocks, got {len(config.blocks)}")
        for spec, blk in zip(self.mbconv, config.blocks):
            check(f"{spec.name}.width", blk.width, spec.widths)
            check(f"{spec.name}.depth", blk.depth, spec.depths)
            check(f"{spec.name}.kernel", blk.kernel, spec.kernels)
            check(f"{spec.name}.expansion", blk.expansion, spec.expansions)

    def count_subnets(self, per_layer: bool = False) -> int:
        """Number of distinct configs.

        With ``per_layer`` the kernel and expansion are counted as if chosen
        independently for every layer of a stage.
        """
        total = len(self.resolutions) * len(self.first_conv.widths) * len(self.last_conv.widths)
        for spec in self.mbconv:
            ke = len(spec.kernels) * len(spec.expansions)
            if per_layer:
                stage = sum(ke ** d for d in spec.depths)
            else:
                stage = len(spec.depths) * ke
            total *= len(spec.widths) * stage
        return total

    def to_dict(self) -> dict:
        def block(b: BlockSpec) -> dict:
            return {"name": b.name, "widths": list(b.widths), "depths": list(b.depths),
                    "kernels": list(b.kernels), "expansions": list(b.expansions),
                    "se": b.se, "stride": b.stride, "activation": b.activation}

        return {"name": self.name, "first_conv": block(self.first_conv),
                "mbconv": [block(b) for b in self.mbconv], "last_conv": block(self.last_conv),
                "resolutions": [list(r) for r in self.resolutions]}

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpace":
        def block(x: dict) -> BlockSpec:
            return BlockSpec(name=x["name"], widths=tuple(x["widths"]), depths=tuple(x["depths"]),
                             kernels=tuple(x["kernels"]), expansions=tuple(x["expansions"]),
                             se=bool(x["se"]), stride=int(x["stride"]), activation=x["activation"])

        return cls(first_conv=block(d["first_conv"]), mbconv=tuple(block(b) for b in d["mbconv"]),
                   last_conv=block(d["last_conv"]),
                   resolutions=tuple(tuple(r) for r in d["resolutions"]), name=d.get("name", "custom"))


def full_space() -> SearchSpace:
    """The full-size search space (widths, depths, kernels, expansions, SE, strides)."""
    k = (3, 5)
    e = (4, 5, 6)
    return SearchSpace(
        first_conv=BlockSpec("first_conv", (16, 24), stride=2, activation="hswish"),
        mbconv=(
            BlockSpec("mbconv1", (16, 24), (1, 2), k, (1,), se=False, stride=1, activation="relu"),
            BlockSpec("mbconv2", (24, 32), (3, 4, 5), k, e, se=False, stride=2, activation="relu"),
            BlockSpec("mbconv3", (32, 40), (3, 4, 5, 6), k, e, se=True, stride=2, activation="hswish"),
            BlockSpec("mbconv4", (62, 70), (3, 4, 5, 6), k, e, se=False, stride=2, activation="hswish"),
            BlockSpec("mbconv5", (112, 120, 128), (3, 4, 5, 6, 7, 8), k, e, se=True, stride=1,
                      activation="hswish"),
            BlockSpec("mbconv6", (192, 200, 208, 216), (3, 4, 5, 6, 7, 8), k, (6,), se=True, stride=2,
                      activation="hswish"),
            BlockSpec("mbconv7", (216, 224), (1, 2), k, (6,), se=True, stride=1, activation="hswish"),
        ),
        last_conv=BlockSpec("last_conv", (1296, 1344), kernels=(1,), expansions=(6,), stride=1,
                            activation="hswish"),
        resolutions=TABLE1_RESOLUTIONS,
        name="full",
    )


def desk_space(resolutions: Sequence[Resolution] = ((32, 24),)) -> SearchSpace:
    """A shrunken copy of the full space that trains in seconds on one core.

    Widths are roughly a quarter of the full table, depths are capped at 2
    and expansion ratios reduced; strides, SE flags and kernel choices are
    unchanged.
    """
    k = (3, 5)
    e = (2, 3)
    return SearchSpace(
        first_conv=BlockSpec("first_conv", (4, 6), stride=2, activation="hswish"),
        mbconv=(
            BlockSpec("mbconv1", (4, 6), (1, 2), k, (1,), se=False, stride=1, activation="relu"),
            BlockSpec("mbconv2", (6, 8), (1, 2), k, e, se=False, stride=2, activation="relu"),
            BlockSpec("mbconv3", (8, 10), (1, 2), k, e, se=True, stride=2, activation="hswish"),
            BlockSpec("mbconv4", (16, 18), (1, 2), k, e, se=False, stride=2, activation="hswish"),
            BlockSpec("mbconv5", (28, 30, 32), (1, 2), k, e, se=True, stride=1, activation="hswish"),
            BlockSpec("mbconv6", (48, 52), (1, 2), k, (3,), se=True, stride=2, activation="hswish"),
            BlockSpec("mbconv7", (52, 56), (1,), k, (3,), se=True, stride=1, activation="hswish"),
        ),
        last_conv=BlockSpec("last_conv", (96, 112), kernels=(1,), expansions=(2,), stride=1,
                            activation="hswish"),
        resolutions=tuple(resolutions),
        name="desk",
    )


SPACES = {"full": full_space, "desk": desk_space}


def get_space(name: str) -> SearchSpace:
    try:
        return SPACES[name]()
    except KeyError:
        raise ConfigError(f"unknown search space {name!r}; expected one of {sorted(SPACES)}") from None


@dataclass(frozen=True)
class BlockConfig:
    width: int
    depth: int
    kernel: int
    expansion: int


@dataclass(frozen=True)
class ArchConfig:
    """One subnet: a choice for every elastic dimension."""

    resolution: Resolution
    first_conv_width: int
    blocks: tuple[BlockConfig, ...]
    last_conv_width: int

    def __post_init__(self):
        object.__setattr__(self, "resolution", tuple(int(v) for v in self.resolution))
        object.__setattr__(self, "blocks", tuple(self.blocks))

    @property
    def total_depth(self) -> int:
        return sum(b.depth for b in self.blocks)

    def to_dict(self) -> dict:
        return {
            "resolution": list(self.resolution),
            "first_conv_width": self.first_conv_width,
            "blocks": [{"width": b.width, "depth": b.depth, "kernel": b.kernel, "expansion": b.expansion}
                       for b in self.blocks],
            "last_conv_width": self.last_conv_width,
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    def key(self) -> str:
        return json.dumps(self.to_dict(), separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        try:
            blocks = tuple(BlockConfig(int(b["width"]), int(b["depth"]), int(b["kernel"]),
                                       int(b["expansion"])) for b in d["blocks"])
            return cls(resolution=tuple(d["resolution"]), first_conv_width=int(d["first_conv_width"]),
                       blocks=blocks, last_conv_width=int(d["last_conv_width"]))
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"malformed ArchConfig JSON: {exc!r}") from None

    @classmethod
    def from_json(cls, text: str) -> "ArchConfig":
        return cls.from_dict(json.loads(text))


def sample_subnet(space: SearchSpace, mode: str = "uniform-random",
                  rng: np.random.Generator | int | None = None) -> ArchConfig:
    """Pick a config: ``min`` / ``max`` per-dimension extremes, or uniform random."""
    if mode in ("min", "max"):
        pick = (lambda xs: xs[0]) if mode == "min" else (lambda xs: xs[-1])
    elif mode in ("uniform-random", "random"):
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)

        def pick(xs):
            return xs[int(rng.integers(len(xs)))]
    else:
        raise ValueError(f"unknown sampling mode {mode!r}")

    resolution = pick(space.resolutions)
    first = pick(space.first_conv.widths)
    blocks = tuple(BlockConfig(pick(s.widths), pick(s.depths), pick(s.kernels), pick(s.expansions))
                   for s in space.mbconv)
    last = pick(space.last_conv.widths)
    return ArchConfig(resolution, first, blocks, last)


def mutate(space: SearchSpace, config: ArchConfig, rng: np.random.Generator) -> ArchConfig:
    """Resample exactly one elastic dimension to a different value (when possible)."""
    dims = [("resolution", None, space.resolutions), ("first_conv_width", None, space.first_conv.widths),
            ("last_conv_width", None, space.last_conv.widths)]
    for i, s in enumerate(space.mbconv):
        dims += [("width", i, s.widths), ("depth", i, s.depths), ("kernel", i, s.kernels),
                 ("expansion", i, s.expansions)]
    dims = [d for d in dims if len(d[2]) > 1]
    if not dims:
        return config
    label, idx, choices = dims[int(rng.integers(len(dims)))]
    current = getattr(config, label) if idx is None else getattr(config.blocks[idx], label)
    others = [c for c in choices if c != current]
    value = others[int(rng.integers(len(others)))]
    if idx is None:
        return replace(config, **{label: value})
    blocks = list(config.blocks)
    blocks[idx] = replace(blocks[idx], **{label: value})
    return replace(config, blocks=tuple(blocks))


def se_channels(channels: int) -> int:
    """Squeeze-excite bottleneck width (reduction 4)."""
    return max(1, channels // 4)


def decoder_tail_width(mb1_width: int) -> int:
    return math.ceil(mb1_width / 2)
