"""Encoder -> projector -> dual-classifier network and its parameter partition.

The encoder is an MLP whose hidden layers are Linear-ReLU-BN and whose final
layer is a plain Linear readout. The projector follows the same pattern but
keeps a BN after its final layer as well (when enabled). Two linear softmax
heads sit on top: a shared one reading the pre-projection representation z
(or u when placed post-projection) and a local one reading the
post-projection representation u.

Every parameter slot carries a fixed name and a GLOBAL/PERSONAL tag assigned
at construction time; running statistics are tagged independently of their
host layer so they can stay local while the affine parameters are shared.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from types import MappingProxyType
from typing import Iterator, Mapping

import numpy as np

from .errors import DimensionError, DualFedError, SchemaMismatchError
from .tensor import (
    EVAL,
    BatchNormState,
    Tensor,
    batchnorm_backward,
    batchnorm_forward,
    linear_backward,
    linear_forward,
    relu_backward,
    relu_forward,
    softmax_forward,
)

GLOBAL = "global"
PERSONAL = "personal"

GROUP_ENCODER = "encoder"
GROUP_PROJECTOR = "projector"
GROUP_PERSONAL_HEAD = "personal_classifier"
GROUP_GLOBAL_HEAD = "global_classifier"
GROUPS = (GROUP_ENCODER, GROUP_PROJECTOR, GROUP_PERSONAL_HEAD, GROUP_GLOBAL_HEAD)

PLACEMENT_PRE = "pre"
PLACEMENT_POST = "post"

BN_MOMENTUM = 0.1
BN_EPSILON = 1e-5

_RUNNING_STAT_SUFFIXES = (".running_mean", ".running_var")


@dataclass(frozen=True)
class ArchConfig:
    """Network dimensions: encoder widths, projector shape, class count."""

    input_dim: int = 64
    encoder_layers: tuple[int, ...] = (64, 32, 16)
    projector_depth: int = 2
    projector_hidden: int = 32
    projector_out: int = 16
    projector_use_bn: bool = True
    num_classes: int = 7

    def __post_init__(self):
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not self.encoder_layers:
            raise ValueError("encoder_layers must list at least one width")
        if any(w < 1 for w in self.encoder_layers):
            raise ValueError("all encoder widths must be >= 1")
        if self.projector_depth < 1:
            raise ValueError("projector_depth must be >= 1")
        if self.projector_hidden < 1 or self.projector_out < 1:
            raise ValueError("projector widths must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")

    @property
    def pre_projection_dim(self) -> int:
        return self.encoder_layers[-1]

    @property
    def post_projection_dim(self) -> int:
        return self.projector_out


@dataclass
class LinearLayer:
    weight: Tensor
    bias: Tensor


@dataclass
class Layer:
    """One MLP stage: Linear, then optional ReLU, then optional BN."""

    linear: LinearLayer
    relu: bool
    bn: BatchNormState | None


@dataclass
class ForwardTrace:
    """The four values of interest from one full forward pass."""

    z: Tensor
    u: Tensor
    y_s: Tensor
    y_p: Tensor


class ModelParams:
    """All parameter slots of one model instance, with their tags.

    Slots are enumerated in a fixed order; the tag map is frozen at
    construction.
    """

    def __init__(self, arch: ArchConfig, encoder: list[Layer],
                 projector: list[Layer], personal_head: LinearLayer,
                 global_head: LinearLayer | None, placement: str,
                 tags: dict[str, str]):
        self.arch = arch
        self.encoder = encoder
        self.projector = projector
        self.personal_head = personal_head
        self.global_head = global_head
        self.placement = placement
        self.tags: Mapping[str, str] = MappingProxyType(dict(tags))

    # -- slot enumeration ------------------------------------------------

    def _stack_slots(self, prefix: str, layers: list[Layer]) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(layers):
            yield f"{prefix}.{i}.weight", layer.linear.weight
            yield f"{prefix}.{i}.bias", layer.linear.bias
            if layer.bn is not None:
                yield f"{prefix}.{i}.gamma", layer.bn.gamma
                yield f"{prefix}.{i}.beta", layer.bn.beta
                yield f"{prefix}.{i}.running_mean", layer.bn.running_mean
                yield f"{prefix}.{i}.running_var", layer.bn.running_var

    def slots(self) -> Iterator[tuple[str, Tensor]]:
        yield from self._stack_slots(GROUP_ENCODER, self.encoder)
        yield from self._stack_slots(GROUP_PROJECTOR, self.projector)
        yield f"{GROUP_PERSONAL_HEAD}.weight", self.personal_head.weight
        yield f"{GROUP_PERSONAL_HEAD}.bias", self.personal_head.bias
        if self.global_head is not None:
            yield f"{GROUP_GLOBAL_HEAD}.weight", self.global_head.weight
            yield f"{GROUP_GLOBAL_HEAD}.bias", self.global_head.bias

    def slot(self, name: str) -> Tensor:
        for n, t in self.slots():
            if n == name:
                return t
        raise KeyError(name)

    def slot_names(self, tag: str | None = None) -> list[str]:
        return [n for n, _ in self.slots() if tag is None or self.tags[n] == tag]

    def param_count(self, tag: str | None = None, group: str | None = None) -> int:
        total = 0
        for name, tensor in self.slots():
            if tag is not None and self.tags[name] != tag:
                continue
            if group is not None and slot_group(name) != group:
                continue
            total += tensor.data.size
        return total

    # -- copying ---------------------------------------------------------

    def clone(self) -> "ModelParams":
        def copy_stack(layers: list[Layer]) -> list[Layer]:
            out = []
            for layer in layers:
                bn = None
                if layer.bn is not None:
                    bn = BatchNormState(
                        gamma=layer.bn.gamma.copy(),
                        beta=layer.bn.beta.copy(),
                        running_mean=layer.bn.running_mean.copy(),
                        running_var=layer.bn.running_var.copy(),
                        momentum=layer.bn.momentum,
                        epsilon=layer.bn.epsilon,
                    )
                out.append(Layer(
                    linear=LinearLayer(layer.linear.weight.copy(),
                                       layer.linear.bias.copy()),
                    relu=layer.relu,
                    bn=bn,
                ))
            return out

        head = LinearLayer(self.personal_head.weight.copy(),
                           self.personal_head.bias.copy())
        ghead = None
        if self.global_head is not None:
            ghead = LinearLayer(self.global_head.weight.copy(),
                                self.global_head.bias.copy())
        return ModelParams(self.arch, copy_stack(self.encoder),
                           copy_stack(self.projector), head, ghead,
                           self.placement, dict(self.tags))


def slot_group(name: str) -> str:
    return name.split(".", 1)[0]


def is_running_stat(name: str) -> bool:
    return name.endswith(_RUNNING_STAT_SUFFIXES)


# -- construction --------------------------------------------------------

DUALFED_GROUP_TAGS: Mapping[str, str] = MappingProxyType({
    GROUP_ENCODER: GLOBAL,
    GROUP_PROJECTOR: PERSONAL,
    GROUP_PERSONAL_HEAD: PERSONAL,
    GROUP_GLOBAL_HEAD: GLOBAL,
})


def _glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def _build_stack(rng: np.random.Generator, widths: list[tuple[int, int]],
                 relu_flags: list[bool], bn_flags: list[bool]) -> list[Layer]:
    layers = []
    for (fan_in, fan_out), relu, bn in zip(widths, relu_flags, bn_flags):
        layers.append(Layer(
            linear=LinearLayer(
                weight=_glorot_uniform(rng, fan_in, fan_out),
                bias=Tensor(np.zeros((1, fan_out))),
            ),
            relu=relu,
            bn=BatchNormState.identity(fan_out, BN_MOMENTUM, BN_EPSILON) if bn else None,
        ))
    return layers


def build_params(arch: ArchConfig, seed: int, *, dual_head: bool = True,
                 placement: str = PLACEMENT_PRE,
                 group_tags: Mapping[str, str] | None = None,
                 localize_bn_stats: bool = True) -> ModelParams:
    """Construct and initialize a model with its slot tagging.

    Weights are Glorot-uniform from a generator seeded with `seed`; biases
    are zero; BN starts at the identity transform with (0, 1) running stats.
    The draw order is fixed, so equal seeds give bit-identical parameters.
    """
    if placement not in (PLACEMENT_PRE, PLACEMENT_POST):
        raise ValueError(f"placement must be 'pre' or 'post', got {placement!r}")
    group_tags = dict(DUALFED_GROUP_TAGS if group_tags is None else group_tags)
    unknown = set(group_tags) - set(GROUPS)
    if unknown:
        raise ValueError(f"unknown slot groups in tag map: {sorted(unknown)}")

    rng = np.random.default_rng(seed)

    enc_dims = []
    prev = arch.input_dim
    for w in arch.encoder_layers:
        enc_dims.append((prev, w))
        prev = w
    n_enc = len(enc_dims)
    # hidden encoder layers carry ReLU+BN; the final one is a plain readout
    encoder = _build_stack(rng, enc_dims,
                           relu_flags=[i < n_enc - 1 for i in range(n_enc)],
                           bn_flags=[i < n_enc - 1 for i in range(n_enc)])

    proj_dims = []
    prev = arch.pre_projection_dim
    for i in range(arch.projector_depth):
        out = arch.projector_out if i == arch.projector_depth - 1 else arch.projector_hidden
        proj_dims.append((prev, out))
        prev = out
    d = arch.projector_depth
    projector = _build_stack(rng, proj_dims,
                             relu_flags=[i < d - 1 for i in range(d)],
                             bn_flags=[arch.projector_use_bn] * d)

    personal_head = LinearLayer(
        weight=_glorot_uniform(rng, arch.post_projection_dim, arch.num_classes),
        bias=Tensor(np.zeros((1, arch.num_classes))),
    )
    global_head = None
    if dual_head:
        head_in = (arch.pre_projection_dim if placement == PLACEMENT_PRE
                   else arch.post_projection_dim)
        global_head = LinearLayer(
            weight=_glorot_uniform(rng, head_in, arch.num_classes),
            bias=Tensor(np.zeros((1, arch.num_classes))),
        )

    params = ModelParams(arch, encoder, projector, personal_head, global_head,
                         placement, tags={})
    tags = {}
    for name, _ in params.slots():
        if is_running_stat(name):
            tags[name] = PERSONAL if localize_bn_stats else group_tags[slot_group(name)]
        else:
            tags[name] = group_tags[slot_group(name)]
    params.tags = MappingProxyType(tags)
    return params


def init_params(arch: ArchConfig, seed: int) -> ModelParams:
    """Default dual-head model with the standard tag partition."""
    return build_params(arch, seed)


# -- forward / backward --------------------------------------------------

@dataclass
class LayerCache:
    x_in: Tensor
    lin_out: Tensor
    act_out: Tensor  # input of the BN stage (== lin_out when no ReLU)


def run_stack(layers: list[Layer], x: Tensor, mode: str,
              keep_cache: bool = False) -> tuple[Tensor, list[LayerCache]]:
    caches = []
    h = x
    for layer in layers:
        lin = linear_forward(h, layer.linear.weight, layer.linear.bias)
        act = relu_forward(lin) if layer.relu else lin
        out = batchnorm_forward(act, layer.bn, mode) if layer.bn is not None else act
        if keep_cache:
            caches.append(LayerCache(x_in=h, lin_out=lin, act_out=act))
        h = out
    return h, caches


def backward_stack(layers: list[Layer], prefix: str, caches: list[LayerCache],
                   grad_out: np.ndarray, mode: str,
                   grads: dict[str, np.ndarray]) -> np.ndarray:
    """Chain gradients back through a stack, filling `grads` by slot name."""
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        layer, cache = layers[i], caches[i]
        if layer.bn is not None:
            g, ggamma, gbeta = batchnorm_backward(cache.act_out, layer.bn, mode, g)
            grads[f"{prefix}.{i}.gamma"] = ggamma
            grads[f"{prefix}.{i}.beta"] = gbeta
        if layer.relu:
            g = relu_backward(cache.lin_out, g)
        g, gw, gb = linear_backward(cache.x_in, layer.linear.weight, g)
        grads[f"{prefix}.{i}.weight"] = gw
        grads[f"{prefix}.{i}.bias"] = gb
    return g


def encode(params: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Map raw inputs to pre-projection representations z."""
    if x.cols != params.arch.input_dim:
        raise DimensionError(
            f"encode: expected {params.arch.input_dim} features, got {x.cols}")
    z, _ = run_stack(params.encoder, x, mode)
    return z


def project(params: ModelParams, z: Tensor, mode: str) -> Tensor:
    """Map pre-projection representations to post-projection ones."""
    if z.cols != params.arch.pre_projection_dim:
        raise DimensionError(
            f"project: expected {params.arch.pre_projection_dim} features, got {z.cols}")
    u, _ = run_stack(params.projector, z, mode)
    return u


def head_probs(head: LinearLayer, reps: Tensor) -> Tensor:
    return softmax_forward(linear_forward(reps, head.weight, head.bias))


def _require_global_head(params: ModelParams) -> LinearLayer:
    if params.global_head is None:
        raise DualFedError("model was built without a global classifier")
    return params.global_head


def predict_global(params: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Softmax prediction through the shared classifier only."""
    head = _require_global_head(params)
    reps = encode(params, x, mode)
    if params.placement == PLACEMENT_POST:
        reps = project(params, reps, mode)
    return head_probs(head, reps)


def predict_personal(params: ModelParams, x: Tensor, mode: str) -> Tensor:
    """Softmax prediction through the projector and the local classifier."""
    u = project(params, encode(params, x, mode), mode)
    return head_probs(params.personal_head, u)


def forward_trace(params: ModelParams, x: Tensor, mode: str) -> ForwardTrace:
    """One shared forward pass yielding z, u and both softmax outputs."""
    head = _require_global_head(params)
    z = encode(params, x, mode)
    u = project(params, z, mode)
    global_reps = z if params.placement == PLACEMENT_PRE else u
    return ForwardTrace(
        z=z,
        u=u,
        y_s=head_probs(head, global_reps),
        y_p=head_probs(params.personal_head, u),
    )


def predict_ensemble(params: ModelParams, x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Sum of both softmax outputs plus argmax labels (lowest index on ties)."""
    trace = forward_trace(params, x, EVAL)
    scores = Tensor(trace.y_p.data + trace.y_s.data)
    labels = np.argmax(scores.data, axis=1)
    return scores, labels


# -- serialization -------------------------------------------------------

_MAGIC = b"DFPB1\n"


def serialize_params(params: ModelParams) -> bytes:
    """Flat ordered slot list: (name, tag, shape, float64 LE payload)."""
    meta = {
        "arch": {
            "input_dim": params.arch.input_dim,
            "encoder_layers": list(params.arch.encoder_layers),
            "projector_depth": params.arch.projector_depth,
            "projector_hidden": params.arch.projector_hidden,
            "projector_out": params.arch.projector_out,
            "projector_use_bn": params.arch.projector_use_bn,
            "num_classes": params.arch.num_classes,
        },
        "dual_head": params.global_head is not None,
        "placement": params.placement,
    }
    out = [_MAGIC]
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    out.append(struct.pack("<I", len(meta_bytes)))
    out.append(meta_bytes)
    slots = list(params.slots())
    out.append(struct.pack("<I", len(slots)))
    for name, tensor in slots:
        name_bytes = name.encode("utf-8")
        out.append(struct.pack("<H", len(name_bytes)))
        out.append(name_bytes)
        out.append(struct.pack("<B", 0 if params.tags[name] == GLOBAL else 1))
        out.append(struct.pack("<II", tensor.rows, tensor.cols))
        out.append(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())
    return b"".join(out)


def deserialize_params(blob: bytes) -> ModelParams:
    if not blob.startswith(_MAGIC):
        raise SchemaMismatchError("not a parameter blob (bad magic)")
    off = len(_MAGIC)
    (meta_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    meta = json.loads(blob[off:off + meta_len].decode("utf-8"))
    off += meta_len
    arch = ArchConfig(
        input_dim=meta["arch"]["input_dim"],
        encoder_layers=tuple(meta["arch"]["encoder_layers"]),
        projector_depth=meta["arch"]["projector_depth"],
        projector_hidden=meta["arch"]["projector_hidden"],
        projector_out=meta["arch"]["projector_out"],
        projector_use_bn=meta["arch"]["projector_use_bn"],
        num_classes=meta["arch"]["num_classes"],
    )
    params = build_params(arch, seed=0, dual_head=meta["dual_head"],
                          placement=meta["placement"])
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    tags = {}
    schema = list(params.slots())
    if count != len(schema):
        raise SchemaMismatchError(
            f"blob has {count} slots, schema expects {len(schema)}")
    for name, tensor in schema:
        (name_len,) = struct.unpack_from("<H", blob, off)
        off += 2
        got = blob[off:off + name_len].decode("utf-8")
        off += name_len
        if got != name:
            raise SchemaMismatchError(f"slot order mismatch: {got!r} vs {name!r}")
        (tag_byte,) = struct.unpack_from("<B", blob, off)
        off += 1
        tags[name] = GLOBAL if tag_byte == 0 else PERSONAL
        rows, cols = struct.unpack_from("<II", blob, off)
        off += 8
        if (rows, cols) != tensor.shape:
            raise SchemaMismatchError(
                f"slot {name}: shape {(rows, cols)} vs expected {tensor.shape}")
        n = rows * cols * 8
        tensor.data[...] = np.frombuffer(blob[off:off + n], dtype="<f8").reshape(rows, cols)
        off += n
    params.tags = MappingProxyType(tags)
    return params
