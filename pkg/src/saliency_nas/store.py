"""Shared supernet weights held at maximal dimensions, and slicing into them."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .space import SearchSpace, decoder_tail_width, se_channels
from .tensor import Tensor, dtype_for, getitem


class StoreError(ValueError):
    pass


@dataclass(frozen=True)
class SliceSpec:
    """Leading output/input channel counts and a centred kernel window."""

    c_out: int
    c_in: int
    k: int

    def check(self, full_shape: tuple) -> None:
        cout, cin, kk, _ = full_shape
        if not (1 <= self.c_out <= cout):
            raise StoreError(f"c_out'={self.c_out} outside [1, {cout}]")
        if not (1 <= self.c_in <= cin):
            raise StoreError(f"c_in'={self.c_in} outside [1, {cin}]")
        if not (1 <= self.k <= kk) or self.k % 2 == 0:
            raise StoreError(f"k'={self.k} must be odd and <= {kk}")

    def index(self, full_shape: tuple) -> tuple:
        self.check(full_shape)
        off = (full_shape[2] - self.k) // 2
        return (slice(0, self.c_out), slice(0, self.c_in), slice(off, off + self.k), slice(off, off + self.k))


def slice_weights(entry: Tensor, spec: SliceSpec) -> Tensor:
    """Channel-prefix, kernel-centre view of a stored conv weight.

    The returned tensor's data aliases ``entry.data``; its gradient lands in
    the matching window of ``entry.grad``.
    """
    if entry.ndim != 4:
        raise StoreError(f"conv weight entry must be 4-D, got shape {entry.shape}")
    return getitem(entry, spec.index(entry.shape))


@dataclass(frozen=True)
class LayerDims:
    """Maximal dimensions of one MBConv layer slot."""

    block: int
    layer: int
    in_max: int
    mid_max: int
    out_max: int
    kernel_max: int
    has_expand: bool
    se: bool


def mbconv_layer_dims(space: SearchSpace) -> list[LayerDims]:
    dims = []
    prev_max = max(space.first_conv.widths)
    for bi, spec in enumerate(space.mbconv):
        out_max = max(spec.widths)
        for li in range(max(spec.depths)):
            in_max = prev_max if li == 0 else out_max
            exp_max = max(spec.expansions)
            dims.append(LayerDims(bi, li, in_max, in_max * exp_max, out_max, max(spec.kernels),
                                  exp_max > 1, spec.se))
        prev_max = out_max
    return dims


def decoder_dims(space: SearchSpace) -> list[tuple[int, int]]:
    """(in_max, out_max) for the five decoder stages and the 1x1 head."""
    mb = [max(s.widths) for s in space.mbconv]
    last = max(space.last_conv.widths)
    tail = decoder_tail_width(mb[0])
    chain = [last, mb[4], mb[2], mb[1], mb[0], tail]
    stages = [(chain[i], chain[i + 1]) for i in range(5)]
    return stages + [(tail, 1)]


class ParameterStore:
    """All supernet weights, namespaced ``block.layer.role``.

    ``params`` hold learnable tensors; ``buffers`` hold batch-norm running
    statistics. Every subnet reads views into these arrays.
    """

    def __init__(self, space: SearchSpace, params: dict[str, Tensor], buffers: dict[str, np.ndarray],
                 precision: str):
        self.space = space
        self.params = params
        self.buffers = buffers
        self.precision = precision

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(dtype_for(self.precision))

    # ------------------------------------------------------------ creation
    @classmethod
    def from_space(cls, space: SearchSpace, rng: np.random.Generator | int | None = 0,
                   precision: str = "standard") -> "ParameterStore":
        if not isinstance(rng, np.random.Generator):
            rng = np.random.default_rng(rng)
        dtype = dtype_for(precision)
        params: dict[str, Tensor] = {}
        buffers: dict[str, np.ndarray] = {}

        def conv(name, cout, cin, k, bias=False, gain=2.0):
            std = np.sqrt(gain / (cin * k * k))
            w = rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)
            params[f"{name}.weight"] = Tensor(w, requires_grad=True, name=f"{name}.weight")
            if bias:
                params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True, name=f"{name}.bias")

        def bn(name, c):
            params[f"{name}.weight"] = Tensor(np.ones(c, dtype), requires_grad=True, name=f"{name}.weight")
            params[f"{name}.bias"] = Tensor(np.zeros(c, dtype), requires_grad=True, name=f"{name}.bias")
            buffers[f"{name}.running_mean"] = np.zeros(c, dtype)
            buffers[f"{name}.running_var"] = np.ones(c, dtype)

        stem = max(space.first_conv.widths)
        conv("first_conv.conv", stem, 3, 3)
        bn("first_conv.bn", stem)
        for d in mbconv_layer_dims(space):
            p = f"mbconv{d.block + 1}.{d.layer}"
            if d.has_expand:
                conv(f"{p}.expand.conv", d.mid_max, d.in_max, 1)
                bn(f"{p}.expand.bn", d.mid_max)
            conv(f"{p}.dw.conv", d.mid_max, 1, d.kernel_max)
            bn(f"{p}.dw.bn", d.mid_max)
            if d.se:
                r = se_channels(d.mid_max)
                conv(f"{p}.se.reduce", r, d.mid_max, 1, bias=True)
                conv(f"{p}.se.expand", d.mid_max, r, 1, bias=True, gain=1.0)
            conv(f"{p}.project.conv", d.out_max, d.mid_max, 1, gain=1.0)
            bn(f"{p}.project.bn", d.out_max)
        last = max(space.last_conv.widths)
        conv("last_conv.conv", last, max(space.mbconv[-1].widths), 1)
        bn("last_conv.bn", last)
        stages = decoder_dims(space)
        for i, (cin, cout) in enumerate(stages[:-1]):
            conv(f"decoder.{i}", cout, cin, 3, bias=True)
        conv("head", 1, stages[-1][0], 1, bias=True, gain=1.0)
        return cls(space, params, buffers, precision)

    def copy(self) -> "ParameterStore":
        params = {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.copy() for k, v in self.buffers.items()}
        return ParameterStore(self.space, params, buffers, self.precision)

    # ----------------------------------------------------------- accessors
    def __getitem__(self, name: str) -> Tensor:
        try:
            return self.params[name]
        except KeyError:
            raise StoreError(f"no parameter named {name!r}") from None

    def buffer(self, name: str) -> np.ndarray:
        try:
            return self.buffers[name]
        except KeyError:
            raise StoreError(f"no buffer named {name!r}") from None

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def grads(self) -> dict[str, np.ndarray]:
        return {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in self.params.items()}

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def num_elements(self) -> int:
        return sum(p.size for p in self.params.values())

    def load_arrays(self, params: dict[str, np.ndarray], buffers: dict[str, np.ndarray] | None = None) -> None:
        """Copy values in place (keeps existing views valid)."""
        for k, v in params.items():
            self[k].data[...] = v
        for k, v in (buffers or {}).items():
            self.buffer(k)[...] = v

    # --------------------------------------------------------- persistence
    MAGIC = b"SNCK"

    def save(self, path: str | Path, metadata: dict | None = None) -> None:
        """Write a deterministic little-endian checkpoint (no timestamps)."""
        entries, chunks, offset = [], [], 0
        for kind, table in (("param", self.param_arrays()), ("buffer", self.buffers)):
            for name in sorted(table):
                arr = np.ascontiguousarray(table[name], dtype=self.dtype).astype(self.dtype.newbyteorder("<"))
                raw = arr.tobytes()
                entries.append({"name": name, "kind": kind, "shape": list(arr.shape),
                                "offset": offset, "nbytes": len(raw)})
                chunks.append(raw)
                offset += len(raw)
        header = {"format": "saliency-nas-checkpoint", "version": 1, "precision": self.precision,
                  "space": self.space.to_dict(), "metadata": metadata or {}, "entries": entries}
        hbytes = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC + struct.pack("<Q", len(hbytes)) + hbytes)
            for raw in chunks:
                fh.write(raw)

    @classmethod
    def load(cls, path: str | Path) -> tuple["ParameterStore", dict]:
        blob = Path(path).read_bytes()
        if len(blob) < 12 or blob[:4] != cls.MAGIC:
            raise StoreError(f"{path}: not a checkpoint (bad magic)")
        (hlen,) = struct.unpack("<Q", blob[4:12])
        if 12 + hlen > len(blob):
            raise StoreError(f"{path}: truncated header, expected {12 + hlen} bytes, got {len(blob)}")
        header = json.loads(blob[12 : 12 + hlen])
        space = SearchSpace.from_dict(header["space"])
        precision = header["precision"]
        dtype = np.dtype(dtype_for(precision)).newbyteorder("<")
        body = blob[12 + hlen :]
        expected = sum(e["nbytes"] for e in header["entries"])
        if len(body) != expected:
            raise StoreError(f"{path}: payload is {len(body)} bytes, expected {expected}")
        params, buffers = {}, {}
        for e in header["entries"]:
            arr = np.frombuffer(body, dtype=dtype, count=int(np.prod(e["shape"], dtype=np.int64)),
                                offset=e["offset"]).reshape(e["shape"]).astype(dtype_for(precision))
            if e["kind"] == "param":
                params[e["name"]] = Tensor(arr, requires_grad=True, name=e["name"])
            else:
                buffers[e["name"]] = arr
        return cls(space, params, buffers, precision), header["metadata"]
