"""Text serialization of networks.

Format, version 1 (one record per line, fields separated by single spaces,
floats written with ``float.hex`` so the round trip is bit-exact)::

    sbn-network 1
    noise logistic
    layer fc <n_in> <n_out>
    W <n_out*n_in hex floats, row-major>
    b <n_out hex floats>
    layer conv <c_in> <height> <width> <c_out> <kh> <kw> <stride>
    W <c_out*c_in*kh*kw hex floats, row-major>
    b <c_out hex floats>
    head softmax <n_in> <n_classes>
    W <n_classes*n_in hex floats>
    b <n_classes hex floats>
    end

Layer records appear in network order; the head record comes last.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .model import LOGISTIC, Conv2DLayer, FCLayer, Network, SoftmaxHead

MAGIC = "sbn-network"
VERSION = 1


def _floats(tag: str, arr: np.ndarray) -> str:
    return " ".join([tag] + [float(v).hex() for v in np.asarray(arr, dtype=np.float64).ravel()])


def dumps(net: Network) -> str:
    lines = [f"{MAGIC} {VERSION}", f"noise {net.noise.kind}"]
    for layer in net.layers:
        if layer.kind == "fc":
            lines.append(f"layer fc {layer.in_size} {layer.out_size}")
        else:
            c, h, w = layer.in_shape
            o, _, kh, kw = layer.W.shape
            lines.append(f"layer conv {c} {h} {w} {o} {kh} {kw} {layer.stride}")
        lines.append(_floats("W", layer.W))
        lines.append(_floats("b", layer.b))
    if net.head.kind != "softmax":
        raise ValueError("only the softmax head can be serialized")
    lines.append(f"head softmax {net.head.n_in} {net.head.n_classes}")
    lines.append(_floats("W", net.head.W))
    lines.append(_floats("b", net.head.b))
    lines.append("end")
    return "\n".join(lines) + "\n"


class FormatError(ValueError):
    pass


def _read_floats(line: str, tag: str, shape) -> np.ndarray:
    parts = line.split()
    if not parts or parts[0] != tag:
        raise FormatError(f"expected a {tag!r} record, got {line[:40]!r}")
    vals = np.array([float.fromhex(p) for p in parts[1:]], dtype=np.float64)
    if vals.size != int(np.prod(shape)):
        raise FormatError(f"{tag} record has {vals.size} values, expected {int(np.prod(shape))}")
    return vals.reshape(shape)


def loads(text: str) -> Network:
    lines = [l for l in text.splitlines() if l.strip()]
    if not lines or lines[0].split() != [MAGIC, str(VERSION)]:
        raise FormatError("not an sbn-network version 1 file")
    if lines[1].split() != ["noise", "logistic"]:
        raise FormatError(f"unsupported noise record {lines[1]!r}")
    layers, head, pos = [], None, 2
    while pos < len(lines):
        rec = lines[pos].split()
        if rec[0] == "end":
            break
        if rec[0] == "layer" and rec[1] == "fc":
            n_in, n_out = map(int, rec[2:4])
            W = _read_floats(lines[pos + 1], "W", (n_out, n_in))
            b = _read_floats(lines[pos + 2], "b", (n_out,))
            layers.append(FCLayer(W, b))
        elif rec[0] == "layer" and rec[1] == "conv":
            c, h, w, o, kh, kw, s = map(int, rec[2:9])
            W = _read_floats(lines[pos + 1], "W", (o, c, kh, kw))
            b = _read_floats(lines[pos + 2], "b", (o,))
            layers.append(Conv2DLayer(W, b, (c, h, w), s))
        elif rec[0] == "head" and rec[1] == "softmax":
            n_in, K = map(int, rec[2:4])
            head = SoftmaxHead(_read_floats(lines[pos + 1], "W", (K, n_in)), _read_floats(lines[pos + 2], "b", (K,)))
        else:
            raise FormatError(f"unknown record {lines[pos][:40]!r}")
        pos += 3
    else:
        raise FormatError("missing 'end' record")
    if head is None:
        raise FormatError("missing head record")
    return Network(tuple(layers), head, LOGISTIC)


def save_network(net: Network, path) -> Path:
    path = Path(path)
    path.write_text(dumps(net))
    return path


def load_network(path) -> Network:
    return loads(Path(path).read_text())
