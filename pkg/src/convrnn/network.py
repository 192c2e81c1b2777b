"""Architecture strings, network construction, and parameter accounting.

An architecture string such as "CLstm384P256 + Pooling + Lstm2000P750 +
3×ReLU2000" describes the hidden layers left to right; a softmax output
layer over `num_classes` is always appended.  The grammar:

    arch  := term ("+" term)*
    term  := [count ("×" | "x")] group
    group := "(" arch ")" | layer
    layer := ("ReLU" | "Maxout") size ["G" gsize]
           | ("Lstm" | "CLstm") size ["P" proj]
           | "Rnn" size
           | "Conv" | "Pooling"

Whitespace is ignored.  "N×(...)" repeats the group contents N times;
"N×layer" keeps a single LayerSpec with repeat=N.  "Rnn" is an extension
token (a plain tanh recurrence) so that every layer family is reachable
from the command line.

Specs can also be given as JSON documents mirroring NetworkSpec: see
`network_spec_from_json` for the schema.
"""

import json
import re
import struct
from dataclasses import dataclass, asdict
from typing import Optional

import numpy as np

from . import layers as L

CHECKPOINT_MAGIC = b"CRNP"
CHECKPOINT_VERSION = 1
POSTERIOR_FLOOR = 1e-10

PATCH_KINDS = ("Conv", "CLstm", "CLstmP")
FC_FIRST_KINDS = ("ReLU", "Maxout")

_LAYER_TAGS = {"rnn": 1, "lstm": 2, "conv": 3, "pool": 4, "clstm": 5,
               "relu": 6, "maxout": 7, "output": 8}


class ArchError(ValueError):
    """Base class for architecture-string problems."""

    def __init__(self, message, position=None):
        self.position = position
        if position is not None:
            message = "%s (at position %d)" % (message, position)
        super().__init__(message)


class ArchSyntaxError(ArchError):
    pass


class ArchSemanticError(ArchError):
    pass


class BuildError(ValueError):
    """Raised when a spec cannot be wired into a concrete network."""


@dataclass
class PatchGeometry:
    """Patch/pool geometry knobs shared by all patch layers of a network.

    Patch layers reading the raw feature bands use (patch_size, patch_stride);
    stacked patch layers reading a previous patch/pool output treat each
    group as one position and use (stacked_patch_size, stacked_patch_stride).
    """

    patch_size: int = 10
    patch_stride: int = 1
    pool_size: int = 3
    stacked_patch_size: int = 3
    stacked_patch_stride: int = 1
    conv_units: int = 256


@dataclass
class InputSpec:
    """Feature interface of a network: band structure plus context window."""

    num_bands: int = 33
    num_channels: int = 3
    context: int = 0

    @property
    def frame_dim(self):
        return self.num_bands * self.num_channels

    @property
    def dim(self):
        return self.frame_dim * (2 * self.context + 1)


@dataclass
class LayerSpec:
    kind: str
    size: Optional[int] = None
    projection: Optional[int] = None
    group_size: Optional[int] = None
    repeat: int = 1
    geometry: Optional[dict] = None  # optional {"patch_size":…, "stride":…} override

    def __post_init__(self):
        if self.repeat < 1:
            raise ArchSemanticError("repeat must be >= 1")
        if self.projection is not None and self.kind not in ("LstmP", "CLstmP"):
            raise ArchSemanticError("projection only valid for LstmP/CLstmP")
        if self.group_size is not None and self.kind != "Maxout":
            raise ArchSemanticError("group size only valid for Maxout")


@dataclass
class NetworkSpec:
    input: InputSpec
    layers: list
    num_classes: int

    def expanded_layers(self):
        out = []
        for spec in self.layers:
            out.extend([spec] * spec.repeat)
        return out


# ---------------------------------------------------------------------------
# parsing


_TOKEN_RE = re.compile(
    r"""(?P<count>\d+)
      | (?P<times>[×x*])
      | (?P<plus>\+)
      | (?P<lparen>\()
      | (?P<rparen>\))
      | (?P<layer>CLstm(?P<clsize>\d+)(?:P(?P<clproj>\d+))?
            | Lstm(?P<lsize>\d+)(?:P(?P<lproj>\d+))?
            | ReLU(?P<rsize>\d+)(?:G(?P<rgroup>\d+))?
            | Maxout(?P<msize>\d+)(?:G(?P<mgroup>\d+))?
            | Rnn(?P<nsize>\d+)
            | Conv
            | Pooling)
    """,
    re.VERBOSE,
)


def _tokenize(text):
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN_RE.match(text, pos)
        if not m:
            raise ArchSyntaxError("unrecognized token %r" % text[pos], pos)
        tokens.append((m, pos))
        pos = m.end()
    return tokens


def _layer_from_match(m, pos):
    if m.group("clsize"):
        size, proj = int(m.group("clsize")), m.group("clproj")
        if proj is not None:
            return LayerSpec("CLstmP", size, projection=int(proj))
        return LayerSpec("CLstm", size)
    if m.group("lsize"):
        size, proj = int(m.group("lsize")), m.group("lproj")
        if proj is not None:
            return LayerSpec("LstmP", size, projection=int(proj))
        return LayerSpec("Lstm", size)
    if m.group("rsize"):
        if m.group("rgroup") is not None:
            raise ArchSemanticError("ReLU does not take a group size", pos)
        return LayerSpec("ReLU", int(m.group("rsize")))
    if m.group("msize"):
        group = m.group("mgroup")
        # group size defaults to 3 when the G suffix is omitted
        return LayerSpec("Maxout", int(m.group("msize")),
                         group_size=int(group) if group is not None else 3)
    if m.group("nsize"):
        return LayerSpec("Rnn", int(m.group("nsize")))
    name = m.group("layer")
    if name == "Conv":
        return LayerSpec("Conv")
    return LayerSpec("Pooling")


class _Parser:
    def __init__(self, text):
        self.text = text
        self.tokens = _tokenize(text)
        self.idx = 0

    def _peek(self):
        return self.tokens[self.idx] if self.idx < len(self.tokens) else (None, len(self.text))

    def _next(self):
        tok = self._peek()
        self.idx += 1
        return tok

    def parse(self):
        specs = self.parse_arch()
        m, pos = self._peek()
        if m is not None:
            raise ArchSyntaxError("unexpected %r" % m.group(0), pos)
        return specs

    def parse_arch(self):
        specs = self.parse_term()
        while True:
            m, _ = self._peek()
            if m is None or not m.group("plus"):
                return specs
            self._next()
            specs.extend(self.parse_term())

    def parse_term(self):
        m, pos = self._peek()
        if m is None:
            raise ArchSyntaxError("expected a layer", pos)
        count = 1
        if m.group("count"):
            count = int(m.group(0))
            self._next()
            m2, pos2 = self._next()
            if m2 is None or not m2.group("times"):
                raise ArchSyntaxError("expected ×  after repeat count", pos2)
            m, pos = self._peek()
            if m is None:
                raise ArchSyntaxError("expected a layer or group", pos)
        if m.group("lparen"):
            self._next()
            inner = self.parse_arch()
            m2, pos2 = self._next()
            if m2 is None or not m2.group("rparen"):
                raise ArchSyntaxError("unclosed parenthesis", pos2)
            return inner * count
        if m.group("layer"):
            self._next()
            spec = _layer_from_match(m, pos)
            spec.repeat = count
            return [spec]
        raise ArchSyntaxError("expected a layer or group, got %r" % m.group(0), pos)


def validate_layer_order(specs):
    """Pooling must immediately follow a Conv/CLstm/CLstmP layer."""
    prev = None
    for spec in specs:
        for _ in range(spec.repeat):
            if spec.kind == "Pooling" and prev not in PATCH_KINDS:
                raise ArchSemanticError(
                    "Pooling must immediately follow a Conv/CLstm/CLstmP layer")
            prev = spec.kind
    if prev is None:
        raise ArchSemanticError("architecture has no layers")


def default_context(specs):
    """±5 frame windows for feed-forward-first nets, none for the rest."""
    return 5 if specs and specs[0].kind in FC_FIRST_KINDS else 0


def parse_arch(text, input_spec=None, num_classes=5529):
    """Parse an architecture string into a NetworkSpec.

    When input_spec is omitted, the default 33-band x 3-channel interface is
    used with an 11-frame context window for ReLU/Maxout-first networks and
    single-frame input otherwise.
    """
    specs = _Parser(text).parse()
    validate_layer_order(specs)
    if input_spec is None:
        input_spec = InputSpec(context=default_context(specs))
    return NetworkSpec(input=input_spec, layers=specs, num_classes=num_classes)


def render_arch(specs):
    """Canonical architecture string; parse_arch(render_arch(s)) round-trips."""
    parts = []
    for spec in specs:
        if spec.kind == "Conv":
            name = "Conv"
        elif spec.kind == "Pooling":
            name = "Pooling"
        elif spec.kind in ("Lstm", "LstmP"):
            name = "Lstm%d" % spec.size
            if spec.projection is not None:
                name += "P%d" % spec.projection
        elif spec.kind in ("CLstm", "CLstmP"):
            name = "CLstm%d" % spec.size
            if spec.projection is not None:
                name += "P%d" % spec.projection
        elif spec.kind == "Maxout":
            name = "Maxout%dG%d" % (spec.size, spec.group_size)
        elif spec.kind == "ReLU":
            name = "ReLU%d" % spec.size
        elif spec.kind == "Rnn":
            name = "Rnn%d" % spec.size
        else:
            raise ValueError("unknown layer kind %r" % spec.kind)
        parts.append("%d×%s" % (spec.repeat, name) if spec.repeat > 1 else name)
    return " + ".join(parts)


# ---------------------------------------------------------------------------
# spec JSON


def network_spec_to_json(spec):
    doc = {
        "input": asdict(spec.input),
        "num_classes": spec.num_classes,
        "layers": [
            {k: v for k, v in asdict(ls).items() if v is not None and (k != "repeat" or v != 1)}
            for ls in spec.layers
        ],
    }
    return json.dumps(doc, indent=2)


def network_spec_from_json(text):
    """Parse the JSON form of a NetworkSpec.

    Schema: {"input": {"num_bands": int, "num_channels": int, "context": int},
             "num_classes": int,
             "layers": [{"kind": str, "size": int?, "projection": int?,
                         "group_size": int?, "repeat": int?,
                         "geometry": {"patch_size": int, "stride": int}?}, ...]}
    """
    doc = json.loads(text)
    input_spec = InputSpec(**doc.get("input", {}))
    specs = [LayerSpec(**entry) for entry in doc["layers"]]
    validate_layer_order(specs)
    return NetworkSpec(input=input_spec, layers=specs,
                       num_classes=doc["num_classes"])


# ---------------------------------------------------------------------------
# planning and building


@dataclass
class _Iface:
    """Inter-layer interface: flat width plus optional band structure."""

    dim: int
    positions: int = 0
    channels: int = 0
    channel_major: bool = False
    poolable: bool = False  # directly behind a Conv/CLstm/CLstmP layer
    raw_bands: bool = False  # the untouched feature bands

    @property
    def banded(self):
        return self.positions > 0


def _input_iface(input_spec):
    if input_spec.context > 0:
        return _Iface(dim=input_spec.dim)
    return _Iface(dim=input_spec.frame_dim, positions=input_spec.num_bands,
                  channels=input_spec.num_channels, channel_major=True,
                  raw_bands=True)


def _patch_layout(iface, spec, geom):
    if spec.geometry:
        size = spec.geometry["patch_size"]
        stride = spec.geometry.get("stride", 1)
    elif iface.raw_bands:
        size, stride = geom.patch_size, geom.patch_stride
    else:
        size, stride = geom.stacked_patch_size, geom.stacked_patch_stride
    if iface.positions < size:
        raise BuildError(
            "patch size %d exceeds %d available positions" % (size, iface.positions))
    return L.PatchLayout(
        num_positions=iface.positions,
        channels_per_position=iface.channels,
        patch_size=size,
        stride=stride,
        channel_major=iface.channel_major,
    )


@dataclass
class _Plan:
    kind: str
    name: str
    args: dict
    shapes: list  # ordered (field, shape) pairs


def plan_network(spec, geometry=None):
    """Resolve inter-layer dimensions into per-layer construction plans.

    This single walk backs both count_params and build, so the counted and
    the materialized network can never disagree.
    """
    geom = geometry or PatchGeometry()
    iface = _input_iface(spec.input)
    plans = []
    for idx, ls in enumerate(spec.expanded_layers()):
        name = "L%02d_%s" % (idx, ls.kind.lower())
        if ls.kind in ("ReLU", "Maxout", "Rnn", "Lstm", "LstmP"):
            d = iface.dim
            if ls.kind == "ReLU":
                plans.append(_Plan("relu", name, {"in": d, "units": ls.size},
                                   [("W", (ls.size, d)), ("b", (ls.size,))]))
                iface = _Iface(dim=ls.size)
            elif ls.kind == "Maxout":
                g = ls.group_size or 3
                pre = ls.size * g
                plans.append(_Plan("maxout", name,
                                   {"in": d, "units": ls.size, "group": g},
                                   [("W", (pre, d)), ("b", (pre,))]))
                iface = _Iface(dim=ls.size)
            elif ls.kind == "Rnn":
                plans.append(_Plan("rnn", name, {"in": d, "units": ls.size},
                                   [("W_xh", (ls.size, d)), ("W_hh", (ls.size, ls.size)),
                                    ("b_h", (ls.size,))]))
                iface = _Iface(dim=ls.size)
            else:
                proj = ls.projection
                plans.append(_Plan("lstm", name,
                                   {"in": d, "cells": ls.size, "proj": proj},
                                   _lstm_shapes(d, ls.size, proj)))
                iface = _Iface(dim=proj if proj else ls.size)
        elif ls.kind in ("Conv", "CLstm", "CLstmP"):
            if not iface.banded:
                raise BuildError(
                    "%s requires band-structured input (no context window, no "
                    "preceding fully connected or plain recurrent layer)" % ls.kind)
            layout = _patch_layout(iface, ls, geom)
            j = layout.num_patches
            if ls.kind == "Conv":
                k = geom.conv_units
                plans.append(_Plan("conv", name,
                                   {"layout": layout, "units": k},
                                   [("W", (k, layout.patch_dim)), ("b", (k,))]))
                unit = k
            else:
                proj = ls.projection
                plans.append(_Plan("clstm", name,
                                   {"layout": layout, "cells": ls.size, "proj": proj},
                                   _lstm_shapes(layout.patch_dim, ls.size, proj)))
                unit = proj if proj else ls.size
            iface = _Iface(dim=j * unit, positions=j, channels=unit,
                           poolable=True)
        elif ls.kind == "Pooling":
            if not iface.poolable:
                raise BuildError("Pooling must immediately follow a patch layer")
            j, k = iface.positions, iface.channels
            g = -(-j // geom.pool_size)
            plans.append(_Plan("pool", name,
                               {"patches": j, "unit": k, "pool": geom.pool_size},
                               []))
            iface = _Iface(dim=g * k, positions=g, channels=k)
        else:
            raise BuildError("unknown layer kind %r" % ls.kind)
    plans.append(_Plan("output", "output",
                       {"in": iface.dim, "classes": spec.num_classes},
                       [("W", (spec.num_classes, iface.dim)),
                        ("b", (spec.num_classes,))]))
    return plans


def _lstm_shapes(d, n, proj):
    r = proj if proj else n
    shapes = [("W_xi", (n, d)), ("W_xf", (n, d)), ("W_xc", (n, d)), ("W_xo", (n, d)),
              ("W_hi", (n, r)), ("W_hf", (n, r)), ("W_hc", (n, r)), ("W_ho", (n, r)),
              ("W_ci", (n,)), ("W_cf", (n,)), ("W_co", (n,)),
              ("b_i", (n,)), ("b_f", (n,)), ("b_c", (n,)), ("b_o", (n,))]
    if proj:
        shapes.append(("W_proj", (proj, n)))
    return shapes


def count_params(spec, geometry=None, per_layer=False):
    """Exact trainable parameter count (biases, peepholes, projections included)."""
    plans = plan_network(spec, geometry)
    counts = [(p.name, sum(int(np.prod(s)) for _, s in p.shapes)) for p in plans]
    if per_layer:
        return counts
    return sum(c for _, c in counts)


def _materialize(plan, rng):
    kind, name, args = plan.kind, plan.name, plan.args

    def u(shape):
        return rng.uniform(-L.INIT_RANGE, L.INIT_RANGE, size=shape)

    if kind == "relu":
        return L.ReluLayer(name, u((args["units"], args["in"])),
                           np.zeros(args["units"]))
    if kind == "maxout":
        pre = args["units"] * args["group"]
        return L.MaxoutLayer(name, u((pre, args["in"])), np.zeros(pre),
                             args["group"])
    if kind == "rnn":
        n, d = args["units"], args["in"]
        return L.RnnLayer(name, u((n, d)), u((n, n)), np.zeros(n))
    if kind == "lstm":
        params = L.init_lstm_params(rng, args["in"], args["cells"], args["proj"])
        return L.LstmLayer(name, params)
    if kind == "clstm":
        layout = args["layout"]
        params = L.init_lstm_params(rng, layout.patch_dim, args["cells"],
                                    args["proj"])
        return L.ClstmLayer(name, params, layout)
    if kind == "conv":
        layout = args["layout"]
        return L.ConvLayer(name, u((args["units"], layout.patch_dim)),
                           np.zeros(args["units"]), layout)
    if kind == "pool":
        return L.PoolLayer(name, args["patches"], args["unit"], args["pool"])
    if kind == "output":
        return L.OutputLayer(name, u((args["classes"], args["in"])),
                             np.zeros(args["classes"]))
    raise BuildError("unknown plan kind %r" % kind)


class Network:
    """An ordered stack of layers ending in the softmax output layer."""

    def __init__(self, spec, layer_objs):
        self.spec = spec
        self.layers = layer_objs

    @property
    def num_classes(self):
        return self.spec.num_classes

    def forward(self, x):
        """x: (N, L, input dim) -> (posteriors (N, L, classes), tapes)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.spec.input.dim:
            raise ValueError("input dim %d != expected %d"
                             % (x.shape[-1], self.spec.input.dim))
        tapes = []
        for layer in self.layers:
            x, tape = layer.forward(x)
            tapes.append(tape)
        return x, tapes

    def backward(self, tapes, dlogits):
        """Propagate a pre-softmax logit gradient; returns per-layer grad dicts."""
        grads = [None] * len(self.layers)
        d = dlogits
        for idx in reversed(range(len(self.layers))):
            d, g = self.layers[idx].backward(tapes[idx], d)
            grads[idx] = g
        return grads

    def param_blocks(self):
        """Ordered (block name, array) pairs over every trainable parameter."""
        out = []
        for layer in self.layers:
            for field_name, arr in layer.param_items():
                out.append(("%s.%s" % (layer.name, field_name), arr))
        return out

    def grad_blocks(self, grads):
        out = []
        for layer, g in zip(self.layers, grads):
            for field_name, _ in layer.param_items():
                out.append(g[field_name])
        return out

    def num_params(self):
        return sum(arr.size for _, arr in self.param_blocks())

    def flat_params(self):
        blocks = [arr.ravel() for _, arr in self.param_blocks()]
        return np.concatenate(blocks) if blocks else np.zeros(0)

    def apply_sgd(self, grads, lr):
        for layer, g in zip(self.layers, grads):
            for field_name, arr in layer.param_items():
                arr -= lr * g[field_name]


def build(spec, seed, geometry=None):
    """Deterministically initialize a Network from its spec."""
    plans = plan_network(spec, geometry)
    rng = np.random.default_rng(seed)
    return Network(spec, [_materialize(p, rng) for p in plans])


def randomize_params(network, seed, scale=0.5):
    """Redraw every parameter uniformly in [-scale, scale].

    Gradient checking needs parameters at a generic point: with the small
    training initialization the recurrent-weight gradients are so close to
    zero that finite-difference cancellation noise swamps the comparison.
    """
    rng = np.random.default_rng(seed)
    for _, arr in network.param_blocks():
        arr[...] = rng.uniform(-scale, scale, size=arr.shape)


# ---------------------------------------------------------------------------
# posteriors -> pseudo likelihood


def compute_priors(alignments, num_classes, smoothing=1.0):
    """Label frequencies over the training alignments, Laplace-smoothed."""
    counts = np.full(num_classes, smoothing, dtype=np.float64)
    for ali in alignments:
        counts += np.bincount(ali.labels, minlength=num_classes)
    return counts / counts.sum()


def posterior_to_pseudo_likelihood(posteriors, priors):
    """log p(state|frame) - log p(state), the hybrid HMM emission score."""
    priors = np.asarray(priors, dtype=np.float64)
    posteriors = np.asarray(posteriors, dtype=np.float64)
    if priors.ndim != 1 or priors.shape[0] != posteriors.shape[-1]:
        raise ValueError("prior length %s does not match posterior classes %d"
                         % (priors.shape, posteriors.shape[-1]))
    if (priors <= 0).any() or abs(priors.sum() - 1.0) > 1e-6:
        raise ValueError("priors must be positive and sum to 1")
    return (np.log(np.maximum(posteriors, POSTERIOR_FLOOR))
            - np.log(priors))


# ---------------------------------------------------------------------------
# checkpoints


def _layer_dims(layer):
    if layer.kind == "rnn":
        return [layer.W_xh.shape[1], layer.W_xh.shape[0]]
    if layer.kind == "lstm":
        p = layer.params
        return [p.input_dim, p.num_cells,
                p.W_proj.shape[0] if p.W_proj is not None else 0]
    if layer.kind == "clstm":
        p, lo = layer.params, layer.layout
        return [lo.num_positions, lo.channels_per_position, lo.patch_size,
                lo.stride, p.num_cells,
                p.W_proj.shape[0] if p.W_proj is not None else 0,
                1 if lo.channel_major else 0]
    if layer.kind == "conv":
        lo = layer.layout
        return [lo.num_positions, lo.channels_per_position, lo.patch_size,
                lo.stride, layer.W.shape[0], 1 if lo.channel_major else 0]
    if layer.kind == "pool":
        return [layer.num_patches, layer.unit_dim, layer.pool_size]
    if layer.kind == "relu":
        return [layer.W.shape[1], layer.W.shape[0]]
    if layer.kind == "maxout":
        return [layer.W.shape[1], layer.W.shape[0] // layer.group_size,
                layer.group_size]
    if layer.kind == "output":
        return [layer.W.shape[1], layer.W.shape[0]]
    raise ValueError("unknown layer kind %r" % layer.kind)


def save_checkpoint(path, network):
    """Binary parameter file: magic "CRNP", version, then per-layer blocks.

    Per layer: u32 type tag, u32 dim count, the dims as u32, then the raw
    little-endian float64 parameter arrays in field order.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<2I", CHECKPOINT_VERSION, len(network.layers)))
        for layer in network.layers:
            dims = _layer_dims(layer)
            fh.write(struct.pack("<2I", _LAYER_TAGS[layer.kind], len(dims)))
            fh.write(struct.pack("<%dI" % len(dims), *dims))
            for _, arr in layer.param_items():
                fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


class CheckpointFormatError(Exception):
    pass


def _read_exact(fh, n, path, what):
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointFormatError("%s: truncated %s" % (path, what))
    return data


def _rebuild_layer(tag, dims, name, reader):
    def arr(*shape):
        n = int(np.prod(shape))
        return np.frombuffer(reader(n * 8), dtype="<f8").reshape(shape).copy()

    if tag == _LAYER_TAGS["rnn"]:
        d, n = dims
        return L.RnnLayer(name, arr(n, d), arr(n, n), arr(n))
    if tag == _LAYER_TAGS["lstm"]:
        d, n, p = dims
        shapes = _lstm_shapes(d, n, p if p else None)
        values = {fname: arr(*shape) for fname, shape in shapes}
        if not p:
            values["W_proj"] = None
        return L.LstmLayer(name, L.LstmParams(**values))
    if tag == _LAYER_TAGS["clstm"]:
        pos, ch, s, stride, n, p, cm = dims
        layout = L.PatchLayout(pos, ch, s, stride, channel_major=bool(cm))
        shapes = _lstm_shapes(layout.patch_dim, n, p if p else None)
        values = {fname: arr(*shape) for fname, shape in shapes}
        if not p:
            values["W_proj"] = None
        return L.ClstmLayer(name, L.LstmParams(**values), layout)
    if tag == _LAYER_TAGS["conv"]:
        pos, ch, s, stride, k, cm = dims
        layout = L.PatchLayout(pos, ch, s, stride, channel_major=bool(cm))
        return L.ConvLayer(name, arr(k, layout.patch_dim), arr(k), layout)
    if tag == _LAYER_TAGS["pool"]:
        j, k, pool = dims
        return L.PoolLayer(name, j, k, pool)
    if tag == _LAYER_TAGS["relu"]:
        d, n = dims
        return L.ReluLayer(name, arr(n, d), arr(n))
    if tag == _LAYER_TAGS["maxout"]:
        d, n, g = dims
        return L.MaxoutLayer(name, arr(n * g, d), arr(n * g), g)
    if tag == _LAYER_TAGS["output"]:
        d, n = dims
        return L.OutputLayer(name, arr(n, d), arr(n))
    raise CheckpointFormatError("unknown layer tag %d" % tag)


def load_checkpoint(path, spec=None):
    """Rebuild a Network from a checkpoint file.

    The binary layout is self-describing; when `spec` is given it is attached
    to the network (and its dims are trusted to match — forward will reject
    mismatched inputs).  Otherwise a minimal spec is inferred from the layers.
    """
    kinds = {v: k for k, v in _LAYER_TAGS.items()}
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointFormatError("%s: bad magic %r" % (path, magic))
        version, n_layers = struct.unpack("<2I", _read_exact(fh, 8, path, "header"))
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError("%s: unsupported version %d" % (path, version))
        layer_objs = []
        for idx in range(n_layers):
            tag, ndims = struct.unpack("<2I", _read_exact(fh, 8, path, "layer header"))
            dims = struct.unpack("<%dI" % ndims,
                                 _read_exact(fh, 4 * ndims, path, "layer dims"))
            name = "L%02d_%s" % (idx, kinds.get(tag, "?"))
            if idx == n_layers - 1:
                name = "output"
            layer = _rebuild_layer(tag, list(dims), name,
                                   lambda n: _read_exact(fh, n, path, "parameters"))
            layer_objs.append(layer)
    if spec is None:
        spec = _infer_spec(layer_objs)
    return Network(spec, layer_objs)


def _infer_spec(layer_objs):
    first = layer_objs[0]
    if first.kind in ("clstm", "conv"):
        lo = first.layout
        input_spec = InputSpec(num_bands=lo.num_positions,
                               num_channels=lo.channels_per_position, context=0)
    else:
        if first.kind == "rnn":
            d = first.W_xh.shape[1]
        elif first.kind == "lstm":
            d = first.params.input_dim
        else:
            d = first.W.shape[1]
        # flat input: remember only the width
        input_spec = InputSpec(num_bands=d, num_channels=1, context=0)
    classes = layer_objs[-1].output_dim
    return NetworkSpec(input=input_spec, layers=[], num_classes=classes)
