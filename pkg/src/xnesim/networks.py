"""Network descriptors for the workload runner.

Layers are engine-shaped: stride-1 valid convolutions over inputs that
carry an explicit zero-bit halo, so a padded stride-1 network layer of
output h x w has input (h+fs-1) x (w+fs-1). Two reshapes keep every
layer in that form:

  * stride-2 convolutions are described by their output geometry with
    the pre-strided input (same MAC count, engine-native walk);
  * a large-kernel stem is im2col'd to fs=1 with nif = c*k*k; its
    unfolded input buffer is produced on the fly and therefore does
    not count toward resident activations.

Classifier heads are flattened fully-connected layers (fs=1, 1x1).
Pooling between layers is OR pooling (max over +/-1) or majority
(average then sign).

Parameter footprint is counted packed: d_eff weight bits per output
channel tap plus one 8-bit threshold per channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

from .bits import words_for_bits
from .errors import ShapeError
from .golden import LayerSpec


@dataclass(frozen=True)
class NetLayer:
    name: str
    spec: LayerSpec
    pools: tuple[str, ...] = ()   # applied after the layer: "max2" | "avg2"
    im2col: bool = False          # input buffer is streamed, not resident

    @property
    def packed_param_bits(self) -> int:
        s = self.spec
        return s.nof * s.d_eff * s.fs * s.fs + 8 * s.nof

    def input_buffer_bytes(self) -> int:
        """Resident halo'd input image, one bit per channel padded to
        whole words per pixel."""
        s = self.spec
        return s.h_in * s.w_in * words_for_bits(s.nif) * 4

    def output_buffer_bytes(self) -> int:
        s = self.spec
        return s.h_out * s.w_out * words_for_bits(s.nof) * 4


@dataclass
class NetworkDescriptor:
    name: str
    input_shape: tuple[int, int, int]
    layers: list[NetLayer] = field(default_factory=list)

    @property
    def total_macs(self) -> int:
        return sum(l.spec.macs for l in self.layers)

    @property
    def total_ops(self) -> int:
        return sum(l.spec.ops for l in self.layers)

    @property
    def packed_param_bits(self) -> int:
        return sum(l.packed_param_bits for l in self.layers)

    def activation_peak_bytes(self) -> int:
        """Largest set of activation buffers alive at once: while a
        layer runs, its (halo'd) input and raw output coexist; while
        pooling, the raw output and the next layer's halo'd input do.
        im2col inputs are not resident."""
        peak = 0
        for i, l in enumerate(self.layers):
            live = l.output_buffer_bytes()
            if not l.im2col:
                live += l.input_buffer_bytes()
            peak = max(peak, live)
            if i + 1 < len(self.layers):
                nxt = self.layers[i + 1]
                handoff = l.output_buffer_bytes() + nxt.input_buffer_bytes()
                peak = max(peak, handoff)
        return peak

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_shape": list(self.input_shape),
            "layers": [{
                "name": l.name,
                "nif": l.spec.nif, "nof": l.spec.nof, "fs": l.spec.fs,
                "h_out": l.spec.h_out, "w_out": l.spec.w_out,
                "d": l.spec.d,
                "pools": list(l.pools),
                "im2col": l.im2col,
            } for l in self.layers],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkDescriptor":
        layers = [NetLayer(
            name=row["name"],
            spec=LayerSpec(row["nif"], row["nof"], row["fs"],
                           row["h_out"], row["w_out"], row.get("d")),
            pools=tuple(row.get("pools") or ()),
            im2col=bool(row.get("im2col", False)),
        ) for row in doc["layers"]]
        return cls(doc["name"], tuple(doc["input_shape"]), layers)

    @classmethod
    def from_json(cls, text: str) -> "NetworkDescriptor":
        return cls.from_dict(json.loads(text))


def make_resnet(depth: int) -> NetworkDescriptor:
    """Binary ResNet-18/34 in engine form.

    The 7x7/s2 stem is im2col'd (nif = 3*49 = 147, fs = 1, 112x112).
    Identity and pooling shortcuts only; no 1x1 downsample convolutions.
    The head flattens 7x7x512 straight into the classifier.
    """
    if depth == 18:
        blocks = [2, 2, 2, 2]
    elif depth == 34:
        blocks = [3, 4, 6, 3]
    else:
        raise ShapeError(f"resnet depth {depth} is not 18 or 34")
    net = NetworkDescriptor(f"resnet{depth}", (3, 224, 224))
    net.layers.append(NetLayer(
        "conv1", LayerSpec(nif=147, nof=64, fs=1, h_out=112, w_out=112),
        pools=("max2",), im2col=True))
    chans = [64, 128, 256, 512]
    sizes = [56, 28, 14, 7]
    c_in = 64
    for s, (c, hw, n) in enumerate(zip(chans, sizes, blocks), start=1):
        for b in range(n):
            for conv in (1, 2):
                nif = c_in if (b == 0 and conv == 1) else c
                net.layers.append(NetLayer(
                    f"conv{s+1}_{b+1}{'ab'[conv-1]}",
                    LayerSpec(nif=nif, nof=c, fs=3, h_out=hw, w_out=hw)))
        c_in = c
    net.layers.append(NetLayer(
        "fc", LayerSpec(nif=512 * 7 * 7, nof=1000, fs=1, h_out=1, w_out=1)))
    return net


MVGG_CHANNELS = [128, 128, 256, 256, 512, 512]


def make_mvgg(groups: int | str) -> NetworkDescriptor:
    """Six 3x3 conv layers on 32x32 with pooling every two, a final
    majority average pool, and a 2048->10 classifier.

    `groups` caps how many input bands each conv is split into (the
    first layer is always dense); "f" splits maximally, leaving one
    input channel per band.
    """
    full = isinstance(groups, str)
    if full:
        if groups.lower() != "f":
            raise ShapeError(f"unknown mvgg variant {groups!r}")
        gcap = None
    else:
        if groups < 1 or (groups & (groups - 1)):
            raise ShapeError("group count must be a power of two")
        gcap = groups
    name = "mvgg-f" if full else f"mvgg-{groups}"
    net = NetworkDescriptor(name, (3, 32, 32))
    sizes = [32, 32, 16, 16, 8, 8]
    c_in = 3
    for i, (c, hw) in enumerate(zip(MVGG_CHANNELS, sizes), start=1):
        if i == 1:
            d = None
        else:
            g = min(c_in, c) if gcap is None else min(gcap, c_in, c)
            d = c_in // g
        pools = ()
        if i in (2, 4):
            pools = ("max2",)
        elif i == 6:
            pools = ("max2", "avg2")
        net.layers.append(NetLayer(
            f"conv{i}", LayerSpec(nif=c_in, nof=c, fs=3, h_out=hw, w_out=hw,
                                  d=d), pools=pools))
        c_in = c
    net.layers.append(NetLayer(
        "fc", LayerSpec(nif=512 * 2 * 2, nof=10, fs=1, h_out=1, w_out=1)))
    return net


def get_network(name: str) -> NetworkDescriptor:
    n = name.lower()
    if n in ("resnet18", "resnet-18"):
        return make_resnet(18)
    if n in ("resnet34", "resnet-34"):
        return make_resnet(34)
    if n.startswith("mvgg-"):
        tag = n.split("-", 1)[1]
        return make_mvgg(tag if tag == "f" else int(tag))
    raise ShapeError(f"unknown network {name!r}")
