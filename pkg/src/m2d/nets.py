"""Declarative networks and the copy / sever / attach-decoder surgery.

Activation positions are counted with the input as position 0, so position
``k`` is the output of layer ``k - 1``. Tap points and the sever point both
use positions. Severing an ``[2 -> 8 -> 4 -> 3]`` classifier at position 1
keeps the first dense layer and exposes its 8-dim output as the embedding.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from m2d import autodiff as ad
from m2d.autodiff import Parameter, Tensor

KINDS = ("classifier", "encoder", "decoder", "encoder_decoder")
ACTIVATIONS = ("linear", "relu", "tanh")
INPUT_TAP = "input"


class SpecError(ValueError):
    """Invalid model specification or surgery plan."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # dense | conv2d | flatten | reshape
    in_shape: tuple[int, ...]
    out_shape: tuple[int, ...]
    activation: str = "linear"
    kernel: int = 0
    stride: int = 1

    def param_shapes(self) -> list[tuple[int, ...]]:
        if self.kind == "dense":
            return [(self.in_shape[0], self.out_shape[0]), (self.out_shape[0],)]
        if self.kind == "conv2d":
            return [(self.kernel, self.kernel, self.in_shape[2], self.out_shape[2]), (self.out_shape[2],)]
        return []

    def validate(self) -> None:
        if self.kind not in ("dense", "conv2d", "flatten", "reshape"):
            raise SpecError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"unknown activation {self.activation!r}")
        if any(d <= 0 for d in self.in_shape + self.out_shape):
            raise SpecError(f"{self.kind}: dimensions must be positive")
        if self.kind == "dense":
            if len(self.in_shape) != 1 or len(self.out_shape) != 1:
                raise SpecError("dense layers take and produce vectors")
        elif self.kind == "conv2d":
            if len(self.in_shape) != 3 or len(self.out_shape) != 3 or self.kernel < 1 or self.stride < 1:
                raise SpecError("conv2d needs HxWxC shapes, kernel >= 1 and stride >= 1")
            h, w, _ = self.in_shape
            oh = (h - self.kernel) // self.stride + 1
            ow = (w - self.kernel) // self.stride + 1
            if (oh, ow) != self.out_shape[:2]:
                raise SpecError(f"conv2d output {self.out_shape} inconsistent with kernel/stride")
        else:
            if math.prod(self.in_shape) != math.prod(self.out_shape):
                raise SpecError(f"{self.kind}: {self.in_shape} and {self.out_shape} differ in size")
            if self.activation != "linear":
                raise SpecError(f"{self.kind} layers cannot carry an activation")


def dense(n_in: int, n_out: int, activation: str = "relu") -> LayerSpec:
    return LayerSpec("dense", (n_in,), (n_out,), activation)


def conv2d(in_shape: Sequence[int], channels: int, kernel: int, stride: int = 1, activation: str = "relu") -> LayerSpec:
    h, w, _ = in_shape
    out = ((h - kernel) // stride + 1, (w - kernel) // stride + 1, channels)
    return LayerSpec("conv2d", tuple(in_shape), out, activation, kernel, stride)


def flatten(in_shape: Sequence[int]) -> LayerSpec:
    return LayerSpec("flatten", tuple(in_shape), (math.prod(in_shape),))


def reshape(in_shape: Sequence[int], out_shape: Sequence[int]) -> LayerSpec:
    return LayerSpec("reshape", tuple(in_shape), tuple(out_shape))


def mlp(dims: Sequence[int], hidden: str = "relu", taps: Mapping[str, int] | None = None) -> "ModelSpec":
    """Dense stack ``dims[0] -> ... -> dims[-1]`` with a linear last layer."""
    layers = [dense(a, b, hidden) for a, b in zip(dims[:-2], dims[1:-1])]
    layers.append(dense(dims[-2], dims[-1], "linear"))
    if taps is None:
        taps = {f"h{i}": i for i in range(1, len(dims) - 1)}
    return ModelSpec(tuple(layers), dict(taps))


@dataclass(frozen=True)
class ModelSpec:
    layers: tuple[LayerSpec, ...]
    tap_points: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.layers[0].in_shape

    @property
    def output_shape(self) -> tuple[int, ...]:
        return self.layers[-1].out_shape

    def shape_at(self, position: int) -> tuple[int, ...]:
        return self.input_shape if position == 0 else self.layers[position - 1].out_shape

    def validate(self) -> None:
        if not self.layers:
            raise SpecError("model needs at least one layer")
        for i, layer in enumerate(self.layers):
            layer.validate()
            if i and self.layers[i - 1].out_shape != layer.in_shape:
                raise SpecError(
                    f"layer {i} expects input {layer.in_shape} but layer {i - 1} produces {self.layers[i - 1].out_shape}"
                )
        for name, pos in self.tap_points.items():
            if not 0 <= pos <= len(self.layers):
                raise SpecError(f"tap {name!r} refers to position {pos}, outside 0..{len(self.layers)}")

    def describe(self) -> str:
        """Line-oriented text form used by the model file format."""
        lines = []
        for layer in self.layers:
            parts = [
                f"layer {layer.kind}",
                f"in={_fmt_shape(layer.in_shape)}",
                f"out={_fmt_shape(layer.out_shape)}",
                f"act={layer.activation}",
            ]
            if layer.kind == "conv2d":
                parts += [f"kernel={layer.kernel}", f"stride={layer.stride}"]
            lines.append(" ".join(parts))
        for name, pos in self.tap_points.items():
            lines.append(f"tap {name} {pos}")
        return "\n".join(lines)

    @classmethod
    def parse(cls, lines: Sequence[str]) -> "ModelSpec":
        layers, taps = [], {}
        for line in lines:
            head, *rest = line.split()
            if head == "layer":
                kind, kv = rest[0], dict(item.split("=", 1) for item in rest[1:])
                layers.append(
                    LayerSpec(
                        kind,
                        _parse_shape(kv["in"]),
                        _parse_shape(kv["out"]),
                        kv.get("act", "linear"),
                        int(kv.get("kernel", 0)),
                        int(kv.get("stride", 1)),
                    )
                )
            elif head == "tap":
                taps[rest[0]] = int(rest[1])
            else:
                raise SpecError(f"unrecognised descriptor line {line!r}")
        spec = cls(tuple(layers), taps)
        spec.validate()
        return spec


def _fmt_shape(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape)


def _parse_shape(text: str) -> tuple[int, ...]:
    return tuple(int(d) for d in text.split("x"))


@dataclass
class SurgeryPlan:
    sever_at: int
    decoder_spec: ModelSpec | None = None  # None -> mirrored decoder


class Network:
    """Instantiated parameters for a :class:`ModelSpec`.

    ``encoder_depth`` is the number of leading layers that form the encoder
    of an ``encoder_decoder`` network (0 for other kinds).
    """

    def __init__(self, spec: ModelSpec, params: list[list[Parameter]], kind: str = "classifier", encoder_depth: int = 0):
        if kind not in KINDS:
            raise SpecError(f"unknown network kind {kind!r}")
        spec.validate()
        if len(params) != len(spec.layers):
            raise SpecError("one parameter group per layer required")
        for i, (layer, group) in enumerate(zip(spec.layers, params)):
            shapes = [p.shape for p in group]
            if shapes != layer.param_shapes():
                raise SpecError(f"layer {i}: parameter shapes {shapes} != {layer.param_shapes()}")
        self.spec = spec
        self.layer_params = params
        self.kind = kind
        self.encoder_depth = encoder_depth
        ids = [p.identifier for p in self.parameters()]
        if len(set(ids)) != len(ids):
            raise SpecError("parameter identifiers must be unique")

    def parameters(self) -> list[Parameter]:
        return [p for group in self.layer_params for p in group]

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def __repr__(self) -> str:
        return f"Network(kind={self.kind}, layers={len(self.spec.layers)}, params={self.num_parameters()})"

    def _prepare_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        want = self.spec.input_shape
        if x.shape[1:] == want:
            return x
        if x.data.ndim >= 2 and math.prod(x.shape[1:]) == math.prod(want):
            return ad.reshape(x, (x.shape[0],) + want)
        raise ad.GraphError(f"input shape {x.shape[1:]} does not match network input {want}")

    def activations(self, x, upto: int | None = None) -> list[Tensor]:
        """Post-activation values at positions ``0..upto`` (default: all)."""
        upto = len(self.spec.layers) if upto is None else upto
        h = self._prepare_input(x)
        acts = [h]
        for layer, group in zip(self.spec.layers[:upto], self.layer_params):
            n = h.shape[0]
            if layer.kind == "dense":
                h = ad.dense(h, *group)
            elif layer.kind == "conv2d":
                h = ad.conv2d(h, *group, stride=layer.stride)
            else:
                h = ad.reshape(h, (n,) + layer.out_shape)
            if layer.activation == "relu":
                h = ad.relu(h)
            elif layer.activation == "tanh":
                h = ad.tanh(h)
            acts.append(h)
        return acts

    def forward(self, x) -> Tensor:
        return self.activations(x)[-1]

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.forward(x).data, axis=1)

    def param_bytes(self) -> bytes:
        return b"".join(p.data.tobytes() for p in self.parameters())


def build(spec: ModelSpec, seed: int, kind: str = "classifier") -> Network:
    """Instantiate ``spec`` with Glorot-uniform weights and zero biases."""
    spec.validate()
    rng = ad.make_rng(seed)
    params = []
    for i, layer in enumerate(spec.layers):
        params.append(_init_layer(layer, i, rng))
    return Network(spec, params, kind)


def _init_layer(layer: LayerSpec, index: int, rng: np.random.Generator) -> list[Parameter]:
    shapes = layer.param_shapes()
    if not shapes:
        return []
    wshape, bshape = shapes
    if layer.kind == "dense":
        fan_in, fan_out = wshape
    else:
        k2 = wshape[0] * wshape[1]
        fan_in, fan_out = k2 * wshape[2], k2 * wshape[3]
    w = ad.glorot_uniform(rng, wshape, fan_in, fan_out)
    return [Parameter(w, f"layers.{index}.weight"), Parameter(np.zeros(bshape), f"layers.{index}.bias")]


def duplicate(net: Network) -> Network:
    """Deep copy; the copy shares no arrays with the original."""
    params = [[Parameter(p.data.copy(), p.identifier) for p in group] for group in net.layer_params]
    return Network(copy.deepcopy(net.spec), params, net.kind, net.encoder_depth)


def mirror_decoder_spec(spec: ModelSpec, sever_at: int) -> ModelSpec:
    """Decoder mirroring the encoder ``spec.layers[:sever_at]``.

    Dense layers walk the flattened activation sizes back to the input size
    (relu hidden, linear output); a trailing reshape restores image inputs.
    """
    sizes = [math.prod(spec.shape_at(p)) for p in range(sever_at + 1)]
    layers: list[LayerSpec] = []
    top = spec.shape_at(sever_at)
    if len(top) > 1:
        layers.append(flatten(top))
    path = sizes[::-1]
    for j, (a, b) in enumerate(zip(path[:-1], path[1:])):
        last = j == len(path) - 2
        layers.append(dense(a, b, "linear" if last else "relu"))
    if len(spec.input_shape) > 1:
        layers.append(reshape((sizes[0],), spec.input_shape))
    return ModelSpec(tuple(layers), {})


def _check_plan(net: Network, plan: SurgeryPlan) -> ModelSpec:
    n_layers = len(net.spec.layers)
    if not 1 <= plan.sever_at < n_layers:
        raise SpecError(f"sever_at must be in 1..{n_layers - 1}, got {plan.sever_at}")
    dec = plan.decoder_spec or mirror_decoder_spec(net.spec, plan.sever_at)
    dec.validate()
    if dec.input_shape != net.spec.shape_at(plan.sever_at) and dec.input_shape != (
        math.prod(net.spec.shape_at(plan.sever_at)),
    ):
        raise SpecError(f"decoder input {dec.input_shape} != embedding shape {net.spec.shape_at(plan.sever_at)}")
    if dec.output_shape != net.spec.input_shape:
        raise SpecError(f"decoder output {dec.output_shape} != network input {net.spec.input_shape}")
    return dec


def sever_and_attach(net: Network, plan: SurgeryPlan, seed: int) -> Network:
    """Keep ``net``'s first ``sever_at`` layers and append a fresh decoder."""
    if net.kind != "classifier":
        raise SpecError(f"surgery expects a classifier, got {net.kind}")
    dec_spec = _check_plan(net, plan)
    enc_layers = net.spec.layers[: plan.sever_at]
    if dec_spec.layers[0].in_shape != enc_layers[-1].out_shape:
        # decoder was declared on the flattened embedding
        dec_spec = ModelSpec((flatten(enc_layers[-1].out_shape),) + dec_spec.layers, {})
    taps = {k: v for k, v in net.spec.tap_points.items() if v <= plan.sever_at}
    spec = ModelSpec(enc_layers + dec_spec.layers, taps)
    rng = ad.make_rng(seed)
    params = [[Parameter(p.data.copy(), p.identifier) for p in g] for g in net.layer_params[: plan.sever_at]]
    for i, layer in enumerate(dec_spec.layers, start=plan.sever_at):
        params.append(_init_layer(layer, i, rng))
    return Network(spec, params, "encoder_decoder", encoder_depth=plan.sever_at)


def encoder_half(net: Network) -> Network:
    """The encoder part of an ``encoder_decoder`` network (copied)."""
    if net.kind != "encoder_decoder":
        raise SpecError(f"expected encoder_decoder, got {net.kind}")
    depth = net.encoder_depth
    taps = {k: v for k, v in net.spec.tap_points.items() if v <= depth}
    spec = ModelSpec(net.spec.layers[:depth], taps)
    params = [[Parameter(p.data.copy(), p.identifier) for p in g] for g in net.layer_params[:depth]]
    return Network(spec, params, "encoder")


def truncate(net: Network, depth: int, kind: str = "encoder") -> Network:
    """Copy of the first ``depth`` layers of ``net``."""
    if not 1 <= depth <= len(net.spec.layers):
        raise SpecError(f"depth must be in 1..{len(net.spec.layers)}, got {depth}")
    taps = {k: v for k, v in net.spec.tap_points.items() if v <= depth}
    spec = ModelSpec(net.spec.layers[:depth], taps)
    params = [[Parameter(p.data.copy(), p.identifier) for p in g] for g in net.layer_params[:depth]]
    return Network(spec, params, kind)


def resolve_tap(spec: ModelSpec, tap: str) -> int:
    if tap == INPUT_TAP:
        return 0
    if tap not in spec.tap_points:
        raise KeyError(f"unknown tap {tap!r}; available: {sorted(spec.tap_points)}")
    return spec.tap_points[tap]


def pool_feature(act: Tensor) -> Tensor:
    """Vector feature from an activation: spatial maps are mean-pooled per channel."""
    if act.data.ndim == 4:
        return ad.spatial_mean(act)
    if act.data.ndim == 2:
        return act
    return ad.flatten(act)


def feature_tensors(net: Network, x, taps: Sequence[str]) -> tuple[Tensor, dict[str, Tensor]]:
    """Differentiable per-tap features; returns the input tensor used as well."""
    positions = {t: resolve_tap(net.spec, t) for t in taps}
    x = x if isinstance(x, Tensor) else Tensor(x)
    acts = net.activations(x, upto=max(positions.values(), default=0))
    feats = {}
    for t, pos in positions.items():
        a = acts[pos]
        feats[t] = ad.flatten(a) if pos == 0 else pool_feature(a)
    return x, feats


def extract_features(net: Network, x, taps: Sequence[str]) -> dict[str, np.ndarray]:
    """Per-tap feature matrices of shape (N, d_tap)."""
    _, feats = feature_tensors(net, x, taps)
    return {t: f.data for t, f in feats.items()}
