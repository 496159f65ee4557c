"""Conv-MPN and the vanilla-GNN baseline.

Both models consume one building at a time: every candidate edge (a node of
the inference graph) is encoded from the RGB image stacked with that edge's
binary mask, all nodes travel together as the batch axis, and batch norm
normalizes across the nodes of the building.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import functional as F
from .geometry import DEFAULT_HALF_WIDTH, InferenceGraph, build_inference_graph, rasterize_edge_mask
from .layers import (
    ConvReluBN,
    FcReluBN,
    LayerSpec,
    Linear,
    Module,
    ResidualBlock,
    build_layer,
    chain_shapes,
)
from .tensor import ShapeError, Tensor, default_dtype

VARIANTS = ("conv_mpn", "vanilla_gnn", "per_edge", "zero_message")
POOLINGS = ("max", "sum", "mean")


@dataclass(frozen=True)
class ModelConfig:
    preset: str = "desk"
    t: int = 1
    pooling: str = "max"
    variant: str = "conv_mpn"
    image_size: int = 64
    channel_scale: int = 4
    mask_half_width: int = DEFAULT_HALF_WIDTH
    seed: int = 0

    def __post_init__(self):
        if self.preset not in ("paper", "desk"):
            raise ValueError(f"preset must be 'paper' or 'desk', got {self.preset!r}")
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.pooling not in POOLINGS:
            raise ValueError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.t < 0:
            raise ValueError("t must be >= 0")
        if self.preset == "paper" and self.t > 3:
            raise ValueError("the paper preset supports at most 3 message-passing iterations")
        if self.image_size % 4 or (self.image_size // 4) % 2:
            raise ValueError(f"image_size {self.image_size} must be divisible by 8")
        if 64 % self.channel_scale:
            raise ValueError(f"channel_scale {self.channel_scale} must divide 64")

    @classmethod
    def paper(cls, **kw) -> "ModelConfig":
        return cls(preset="paper", image_size=256, channel_scale=1, **kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        return cls(preset="desk", image_size=64, channel_scale=4, **kw)

    @property
    def iterations(self) -> int:
        """Message-passing steps actually run by this variant."""
        if self.variant == "per_edge":
            return 0
        if self.variant == "zero_message":
            return 1
        return self.t

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def _ch(c: int, cfg: ModelConfig) -> int:
    return c // cfg.channel_scale


def encoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    """Shared DRN-style trunk: conv_relu_bn1 and residual blocks 1-3."""
    c = lambda v: _ch(v, cfg)
    return [
        LayerSpec("conv2d", 4, c(16), kernel=7, stride=1, padding=3, name="conv_relu_bn1"),
        LayerSpec("residual_block", c(16), c(16), stride=1, name="residual_block1"),
        LayerSpec("residual_block", c(16), c(32), stride=2, name="residual_block2"),
        LayerSpec("residual_block", c(32), c(64), stride=2, name="residual_block3.0"),
        LayerSpec("residual_block", c(64), c(64), stride=1, name="residual_block3.1"),
    ]


def _conv(cin, cout, name):
    return LayerSpec("conv2d", cin, cout, kernel=3, stride=1, padding=1, name=name)


def feature_init_specs(cfg: ModelConfig) -> list[LayerSpec]:
    return encoder_specs(cfg) + [_conv(_ch(64, cfg), _ch(32, cfg), "conv_relu_bn2")]


def message_passing_specs(cfg: ModelConfig) -> list[LayerSpec]:
    c = lambda v: _ch(v, cfg)
    rows = [(c(64), c(64))] * 4 + [(c(64), c(32))] + [(c(32), c(32))] * 2
    return [_conv(a, b, f"mp_conv{k}") for k, (a, b) in enumerate(rows)]


def pool_window(cfg: ModelConfig) -> int:
    return cfg.image_size // 8


def verification_specs(cfg: ModelConfig) -> list[LayerSpec]:
    c = lambda v: _ch(v, cfg)
    rows = [(c(32), c(32)), (c(32), c(64)), (c(64), c(64)), (c(64), c(128)), (c(128), c(128))]
    specs = [_conv(a, b, f"conv_relu_bn{6 + k}") for k, (a, b) in enumerate(rows)]
    w = pool_window(cfg)
    specs.append(LayerSpec("max_pool2d", c(128), c(128), stride=w, window=w, name="max_pooling"))
    return specs


def gnn_encoder_specs(cfg: ModelConfig) -> list[LayerSpec]:
    c = lambda v: _ch(v, cfg)
    rows = [(c(64), c(32)), (c(32), c(32)), (c(32), c(64)), (c(64), c(64)), (c(64), c(128)), (c(128), c(128))]
    specs = encoder_specs(cfg) + [_conv(a, b, f"conv_relu_bn{2 + k}") for k, (a, b) in enumerate(rows)]
    w = pool_window(cfg)
    specs.append(LayerSpec("max_pool2d", c(128), c(128), stride=w, window=w, name="max_pooling"))
    return specs


def gnn_message_specs(cfg: ModelConfig) -> list[LayerSpec]:
    d = _ch(128, cfg) * 4  # flattened (C, 2, 2) vector width
    rows = [(2 * d, 2 * d)] * 3 + [(2 * d, d)] + [(d, d)] * 2
    return [LayerSpec("linear", a, b, name=f"fc_relu_bn{8 + k}") for k, (a, b) in enumerate(rows)]


HEAD_INIT_SCALE = 0.01


def _head(width: int, rng) -> Linear:
    """Final 2-way classifier, started near zero so first confidences sit close to 0.5
    instead of saturating the clamped loss."""
    head = Linear(width, 2, rng=rng)
    head.weight.data *= HEAD_INIT_SCALE
    return head


def _stack(specs: Sequence[LayerSpec], rng) -> list[Module]:
    return [build_layer(s, rng) for s in specs if s.kind != "max_pool2d"]


@dataclass
class NodeInputs:
    """Encoder input for every node: one shared RGB image plus a per-node edge mask.

    ``dense()`` gives the literal (N, 4, S, S) stack; the encoder's first
    convolution consumes the factored form directly, which is equivalent and
    avoids convolving the shared RGB channels once per node.
    """

    image: np.ndarray  # (3, S, S)
    masks: np.ndarray  # (N, 1, S, S)

    def __len__(self) -> int:
        return self.masks.shape[0]

    def dense(self) -> Tensor:
        n, _, s, _ = self.masks.shape
        out = np.empty((n, 4, s, s), dtype=default_dtype())
        out[:, :3] = self.image
        out[:, 3:] = self.masks
        return Tensor(out)


def node_inputs(image: np.ndarray, corners, graph: InferenceGraph, half_width: int = DEFAULT_HALF_WIDTH) -> NodeInputs:
    """RGB image plus each candidate edge's binary mask."""
    image = np.asarray(image, dtype=default_dtype())
    if image.ndim != 3 or image.shape[0] != 3 or image.shape[1] != image.shape[2]:
        raise ShapeError(f"expected a (3, S, S) image, got {image.shape}")
    s = image.shape[1]
    masks = np.empty((len(graph), 1, s, s), dtype=default_dtype())
    for k, (i, j) in enumerate(graph.nodes):
        masks[k, 0] = rasterize_edge_mask(corners[i], corners[j], s, half_width)
    return NodeInputs(image, masks)


class ConvMPN(Module):
    """Feature initialization, ``t`` unshared message-passing stages and the
    edge-verification decoder."""

    def __init__(self, cfg: ModelConfig):
        if cfg.variant == "vanilla_gnn":
            raise ValueError("use VanillaGNN for the vanilla_gnn variant")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.init_layers = _stack(feature_init_specs(cfg), rng)
        self.mp_layers = [_stack(message_passing_specs(cfg), rng) for _ in range(cfg.iterations)]
        self.verify_layers = _stack(verification_specs(cfg), rng)
        self.head = _head(_ch(128, cfg) * 4, rng)

    # named_parameters walks lists of Modules only, so expose the nested lists
    def named_parameters(self, prefix: str = ""):
        yield from _walk(self, prefix, "named_parameters")

    def named_buffers(self, prefix: str = ""):
        yield from _walk(self, prefix, "named_buffers")

    def modules(self):
        yield self
        for group in self._groups():
            for _, m in group:
                yield from m.modules()

    def _groups(self):
        yield [(f"init.{k}", m) for k, m in enumerate(self.init_layers)]
        for t, stage in enumerate(self.mp_layers):
            yield [(f"mp{t}.{k}", m) for k, m in enumerate(stage)]
        yield [(f"verify.{k}", m) for k, m in enumerate(self.verify_layers)]
        yield [("head", self.head)]

    # -- stages -------------------------------------------------------------
    def init_features(self, inputs: "Tensor | NodeInputs", record: list | None = None) -> Tensor:
        """Per-node feature volumes from (N, 4, S, S) inputs."""
        return _encode(self.init_layers, inputs, self.cfg, record)

    def message_pass_step(self, volumes: Tensor, graph: InferenceGraph, iteration: int,
                          zero_message: bool = False, record: list | None = None) -> Tensor:
        if not 0 <= iteration < len(self.mp_layers):
            raise IndexError(f"no message-passing weights for iteration {iteration} (have {len(self.mp_layers)})")
        if len(graph) != volumes.shape[0]:
            raise ShapeError(f"{volumes.shape[0]} feature volumes for {len(graph)} graph nodes")
        if zero_message:
            pooled = F.zeros_like(volumes)
        else:
            pooled = F.neighbor_pool(volumes, graph.adjacency, self.cfg.pooling)
        x = F.concat_channels([volumes, pooled])
        for m in self.mp_layers[iteration]:
            x = m(x)
            if record is not None:
                record.append(x.shape[1:])
        return x

    def verify_edges(self, volumes: Tensor, record: list | None = None) -> Tensor:
        """Return (N, 2) logits; the positive-class softmax is the confidence."""
        expected = (_ch(32, self.cfg), self.cfg.image_size // 4, self.cfg.image_size // 4)
        if volumes.shape[1:] != expected:
            raise ShapeError(f"verify_edges expects volumes of shape (N, {expected}), got {volumes.shape}")
        x = volumes
        for m in self.verify_layers:
            x = m(x)
            if record is not None:
                record.append(x.shape[1:])
        x = F.max_pool2d(x, pool_window(self.cfg))
        if record is not None:
            record.append(x.shape[1:])
        x = x.flatten_rows()
        logits = self.head(x)
        if record is not None:
            record.append(logits.shape[1:])
        return logits

    def forward_inputs(self, inputs: Tensor, graph: InferenceGraph, iterations: int | None = None,
                       record: list | None = None) -> Tensor:
        f = self.init_features(inputs, record)
        zero = self.cfg.variant == "zero_message"
        steps = self.cfg.iterations if iterations is None else iterations
        if steps > len(self.mp_layers):
            raise IndexError(f"{steps} iterations requested, model has {len(self.mp_layers)}")
        for t in range(steps):
            f = self.message_pass_step(f, graph, t, zero_message=zero, record=record)
        return self.verify_edges(f, record)

    def forward(self, image: np.ndarray, corners, graph: InferenceGraph | None = None,
                iterations: int | None = None) -> Tensor:
        graph = build_inference_graph(corners) if graph is None else graph
        if graph.empty or len(graph) == 0:
            raise ValueError("forward needs at least 2 corners")
        inputs = node_inputs(image, corners, graph, self.cfg.mask_half_width)
        return self.forward_inputs(inputs, graph, iterations)


class VanillaGNN(Module):
    """Baseline that encodes each candidate edge as a flat vector and passes
    messages through fully connected blocks."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.init_layers = _stack(gnn_encoder_specs(cfg), rng)
        self.mp_layers = [_stack(gnn_message_specs(cfg), rng) for _ in range(cfg.t)]
        self.head = _head(_ch(128, cfg) * 4, rng)

    def named_parameters(self, prefix: str = ""):
        yield from _walk(self, prefix, "named_parameters")

    def named_buffers(self, prefix: str = ""):
        yield from _walk(self, prefix, "named_buffers")

    def modules(self):
        yield self
        for group in self._groups():
            for _, m in group:
                yield from m.modules()

    def _groups(self):
        yield [(f"init.{k}", m) for k, m in enumerate(self.init_layers)]
        for t, stage in enumerate(self.mp_layers):
            yield [(f"mp{t}.{k}", m) for k, m in enumerate(stage)]
        yield [("head", self.head)]

    def encode(self, inputs: "Tensor | NodeInputs", record: list | None = None) -> Tensor:
        x = _encode(self.init_layers, inputs, self.cfg, record)
        x = F.max_pool2d(x, pool_window(self.cfg))
        if record is not None:
            record.append(x.shape[1:])
        return x.flatten_rows()

    def message_pass_step(self, vectors: Tensor, graph: InferenceGraph, iteration: int,
                          record: list | None = None) -> Tensor:
        pooled = F.neighbor_pool(vectors, graph.adjacency, self.cfg.pooling)
        x = F.concat_channels([vectors, pooled])
        if record is not None:
            record.append(x.shape[1:])
        for m in self.mp_layers[iteration]:
            x = m(x)
            if record is not None:
                record.append(x.shape[1:])
        return x

    def forward_inputs(self, inputs: Tensor, graph: InferenceGraph, iterations: int | None = None,
                       record: list | None = None) -> Tensor:
        v = self.encode(inputs, record)
        steps = self.cfg.t if iterations is None else iterations
        for t in range(steps):
            v = self.message_pass_step(v, graph, t, record)
        logits = self.head(v)
        if record is not None:
            record.append(logits.shape[1:])
        return logits

    def forward(self, image: np.ndarray, corners, graph: InferenceGraph | None = None,
                iterations: int | None = None) -> Tensor:
        graph = build_inference_graph(corners) if graph is None else graph
        if graph.empty or len(graph) == 0:
            raise ValueError("forward needs at least 2 corners")
        inputs = node_inputs(image, corners, graph, self.cfg.mask_half_width)
        return self.forward_inputs(inputs, graph, iterations)


def _encode(layers: list[Module], inputs, cfg: ModelConfig, record: list | None) -> Tensor:
    s = cfg.image_size
    first, rest = layers[0], layers[1:]
    if isinstance(inputs, NodeInputs):
        if inputs.masks.shape[2:] != (s, s):
            raise ShapeError(f"image size {inputs.masks.shape[2:]} does not match model image_size {s}")
        conv = first.conv
        x = first.bn(F.relu(F.conv2d_shared(inputs.image, inputs.masks, conv.weight, conv.bias, conv.stride, conv.padding)))
    else:
        if inputs.shape[2:] != (s, s):
            raise ShapeError(f"image size {inputs.shape[2:]} does not match model image_size {s}")
        x = first(inputs)
    if record is not None:
        record.append(x.shape[1:])
    for m in rest:
        x = m(x)
        if record is not None:
            record.append(x.shape[1:])
    return x


def _walk(model, prefix: str, method: str):
    for group in model._groups():
        for name, m in group:
            yield from getattr(m, method)(f"{prefix}{name}.")


def build_model(cfg: ModelConfig) -> Module:
    return VanillaGNN(cfg) if cfg.variant == "vanilla_gnn" else ConvMPN(cfg)


def confidences(logits: Tensor) -> Tensor:
    """Positive-class softmax probability per node."""
    return F.softmax(logits)[:, 1]


def gnn_forward(model: VanillaGNN, image, corners, graph=None) -> Tensor:
    return confidences(model(image, corners, graph))


def forward(model: ConvMPN, image, corners, graph=None) -> Tensor:
    return confidences(model(image, corners, graph))


def expected_shapes(cfg: ModelConfig) -> dict[str, list[tuple[int, ...]]]:
    """Per-stage output shapes implied by the architecture tables (per node)."""
    s = cfg.image_size
    init = chain_shapes(feature_init_specs(cfg), (4, s, s))
    mp_in = (2 * init[-1][0],) + init[-1][1:]
    mp = chain_shapes(message_passing_specs(cfg), mp_in)
    ver = chain_shapes(verification_specs(cfg), mp[-1])
    gnn = chain_shapes(gnn_encoder_specs(cfg), (4, s, s))
    d = int(np.prod(gnn[-1]))
    gmp = chain_shapes(gnn_message_specs(cfg), (2 * d,))
    return {
        "feature_init": init,
        "message_passing": mp,
        "verification": ver + [(int(np.prod(ver[-1])),), (2,)],
        "gnn_encoder": gnn,
        "gnn_message_passing": [(2 * d,)] + gmp,
        "gnn_head": [(2,)],
    }
