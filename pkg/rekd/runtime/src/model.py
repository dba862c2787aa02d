"""The rotation-equivariant keypoint detector.

For every internal scale s the grayscale input is resized by scale_factor**s
and run through `num_layers` equivariant conv-bn-relu layers (one lifting
convolution, then group convolutions). Two heads read the per-scale group
features H_s:

* keypoints: P_s = max over the group axis, resized to the input resolution,
  concatenated over scales and fused by a plain 1x1 convolution into K.
* orientation: Q_s = channel pooling of H_s, resized and summed over scales,
  then a softmax over the group axis gives the histogram map O.
"""
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from src.config import RekdConfig
from src.equivariant import ChannelPool, GroupConv, GroupPoolMax, LiftConv
from src.errors import ShapeError
from src.tensor import (
    BatchNormState,
    BilinearResize,
    Conv2d,
    DiffOp,
    GroupBatchNorm,
    ReLU,
    Softmax,
    Tensor,
)


def scale_shape(height: int, width: int, factor: float) -> Tuple[int, int]:
    return max(1, int(round(height * factor))), max(1, int(round(width * factor)))


def minimum_size(config: RekdConfig) -> int:
    """Smallest input side whose coarsest internal scale still spans two kernels."""
    factor = config.scale_factor ** (config.num_scales - 1)
    side = 1
    while min(scale_shape(side, side, factor)) < 2 * config.kernel_size:
        side += 1
    return side


def parameter_count(config: RekdConfig) -> int:
    """Closed-form count of learnable parameters.

    With |G|*C fixed the group convolutions dominate and shrink as 1/|G|.
    """
    k2 = config.kernel_size**2
    c, g = config.channels, config.group_order
    count = c * k2
    count += (config.num_layers - 1) * c * g * c * k2
    count += 2 * config.num_layers * c
    if config.channel_pooling == "conv":
        count += c
    count += config.num_scales * c + 1
    return count


@dataclass
class _Step:
    op: DiffOp
    params: Tuple[str, ...] = ()


@dataclass
class _ScaleGraph:
    trunk: List[_Step] = field(default_factory=list)
    down: Optional[BilinearResize] = None
    pool: Optional[GroupPoolMax] = None
    channel: Optional[_Step] = None
    up_p: Optional[BilinearResize] = None
    up_q: Optional[BilinearResize] = None


@dataclass
class ModelOutput:
    """Score map K [B,H,W], orientation map O [B,|G|,H,W] and per-scale internals.

    `layers[s][l]` is the output of layer l at internal scale s. Unbatched
    inputs give unbatched K and O; internals always keep the batch axis.
    """

    K: Tensor
    O: Tensor
    P: List[Tensor]
    Q: List[Tensor]
    layers: List[List[Tensor]]
    batched: bool = True
    _graph: Optional[List[_ScaleGraph]] = field(default=None, repr=False)
    _heads: Optional[Tuple[DiffOp, DiffOp]] = field(default=None, repr=False)


class RekdModel:
    """Parameters, batch-norm buffers and the forward/backward passes."""

    def __init__(
        self,
        config: RekdConfig,
        params: Dict[str, np.ndarray],
        bn_states: Optional[Dict[str, BatchNormState]] = None,
    ):
        self.config = config
        self.params = params
        self.bn_states = bn_states or {
            f"bn{l}": BatchNormState.initial(config.channels, config.dtype)
            for l in range(config.num_layers)
        }

    @classmethod
    def initialize(cls, config: RekdConfig, seed: Optional[int] = None) -> "RekdModel":
        """He-normal weights, unit batch-norm scales, zero biases."""
        rng = np.random.default_rng(config.seed if seed is None else seed)
        k, c, g = config.kernel_size, config.channels, config.group_order
        dtype = config.dtype

        def he(shape, fan_in):
            return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(dtype)

        params = {"layer0.weight": he((c, 1, k, k), k * k)}
        for l in range(1, config.num_layers):
            params[f"layer{l}.weight"] = he((c, g * c, k, k), g * c * k * k)
        for l in range(config.num_layers):
            params[f"bn{l}.gamma"] = np.ones(c, dtype=dtype)
            params[f"bn{l}.beta"] = np.zeros(c, dtype=dtype)
        if config.channel_pooling == "conv":
            params["orientation.weight"] = he((c,), c)
        params["score.weight"] = he((1, config.num_scales * c, 1, 1), config.num_scales * c)
        params["score.bias"] = np.zeros(1, dtype=dtype)
        return cls(config, params)

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for name, state in self.bn_states.items():
            out[f"{name}.running_mean"] = state.running_mean
            out[f"{name}.running_var"] = state.running_var
        return out

    def tensors(self) -> Dict[str, np.ndarray]:
        """Parameters then buffers, in a stable order"""
        return {**self.params, **self.buffers()}

    def expected_shapes(self) -> Dict[str, Tuple[int, ...]]:
        reference = RekdModel.initialize(self.config, seed=0)
        return {name: t.shape for name, t in reference.tensors().items()}

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def forward(self, img: Tensor, training: bool = False) -> ModelOutput:
        """Run the detector on [H,W] or [B,H,W] grayscale images in [0, 1]."""
        cfg = self.config
        batched = img.ndim == 3
        if img.ndim == 2:
            img = img[None]
        if img.ndim != 3:
            raise ShapeError(f"expected [H,W] or [B,H,W] image, got {img.shape}")
        x = img.astype(cfg.dtype, copy=False)[:, None]
        _, _, height, width = x.shape
        coarsest = scale_shape(height, width, cfg.scale_factor ** (cfg.num_scales - 1))
        if min(coarsest) < 2 * cfg.kernel_size:
            raise ShapeError(
                f"image {height}x{width} is too small: coarsest scale {coarsest} "
                f"is below twice the kernel size"
            )

        graphs: List[_ScaleGraph] = []
        p_maps, q_maps, layers = [], [], []
        p_full, q_sum = [], None
        for s in range(cfg.num_scales):
            graph = _ScaleGraph()
            hs, ws = scale_shape(height, width, cfg.scale_factor**s)
            h = x
            if (hs, ws) != (height, width):
                graph.down = BilinearResize(hs, ws)
                h = graph.down(h)
            outputs = []
            for l in range(cfg.num_layers):
                conv: DiffOp
                if l == 0:
                    conv = LiftConv(cfg.group_order, cfg.padding)
                else:
                    conv = GroupConv(cfg.group_order, cfg.padding)
                norm = GroupBatchNorm(
                    self.bn_states[f"bn{l}"], training, cfg.bn_momentum, cfg.bn_eps
                )
                steps = [
                    _Step(conv, (f"layer{l}.weight",)),
                    _Step(norm, (f"bn{l}.gamma", f"bn{l}.beta")),
                    _Step(ReLU()),
                ]
                for step in steps:
                    h = step.op(h, *(self.params[name] for name in step.params))
                graph.trunk.extend(steps)
                outputs.append(h)
            layers.append(outputs)

            graph.pool = GroupPoolMax()
            p = graph.pool(h)
            weight_names = ("orientation.weight",) if cfg.channel_pooling == "conv" else ()
            graph.channel = _Step(ChannelPool(cfg.channel_pooling), weight_names)
            q = graph.channel.op(h, *(self.params[name] for name in weight_names))
            p_maps.append(p)
            q_maps.append(q)
            if (hs, ws) != (height, width):
                graph.up_p = BilinearResize(height, width)
                graph.up_q = BilinearResize(height, width)
                p = graph.up_p(p)
                q = graph.up_q(q)
            p_full.append(p)
            q_sum = q if q_sum is None else q_sum + q
            graphs.append(graph)

        fuse = Conv2d()
        k_map = fuse(np.concatenate(p_full, axis=1), self.params["score.weight"])[:, 0]
        k_map = k_map + self.params["score.bias"][0]
        softmax = Softmax(axis=1)
        o_map = softmax(q_sum)
        if not batched:
            k_map, o_map = k_map[0], o_map[0]
        return ModelOutput(
            K=k_map,
            O=o_map,
            P=p_maps,
            Q=q_maps,
            layers=layers,
            batched=batched,
            _graph=graphs,
            _heads=(fuse, softmax),
        )

    def backward(
        self,
        output: ModelOutput,
        grad_K: Optional[Tensor] = None,
        grad_O: Optional[Tensor] = None,
    ) -> Dict[str, np.ndarray]:
        """Parameter gradients of a scalar whose gradients w.r.t. K and O are given."""
        if output._graph is None or output._heads is None:
            raise ValueError("output does not carry a forward graph")
        grads = {name: np.zeros_like(p) for name, p in self.params.items()}
        fuse, softmax = output._heads
        c = self.config.channels

        def batch(g):
            return g if output.batched else g[None]

        dp_full: Optional[List[Tensor]] = None
        if grad_K is not None:
            dk = batch(grad_K)
            grads["score.bias"] += dk.sum()
            dcat, dweight = fuse.backward(dk[:, None])
            grads["score.weight"] += dweight
            dp_full = [dcat[:, s * c : (s + 1) * c] for s in range(len(output._graph))]
        dq_full = softmax.backward(batch(grad_O))[0] if grad_O is not None else None

        for s, graph in enumerate(output._graph):
            dh = None
            if dp_full is not None:
                dp = dp_full[s]
                if graph.up_p is not None:
                    (dp,) = graph.up_p.backward(dp)
                (dh,) = graph.pool.backward(dp)
            if dq_full is not None:
                dq = dq_full
                if graph.up_q is not None:
                    (dq,) = graph.up_q.backward(dq)
                channel_grads = graph.channel.op.backward(dq)
                dh = channel_grads[0] if dh is None else dh + channel_grads[0]
                for name, g in zip(graph.channel.params, channel_grads[1:]):
                    grads[name] += g
            if dh is None:
                continue
            for step in reversed(graph.trunk):
                step_grads = step.op.backward(dh)
                dh = step_grads[0]
                for name, g in zip(step.params, step_grads[1:]):
                    grads[name] += g
        return grads

    def copy(self) -> "RekdModel":
        return RekdModel(
            self.config,
            {name: p.copy() for name, p in self.params.items()},
            {
                name: BatchNormState(s.running_mean.copy(), s.running_var.copy())
                for name, s in self.bn_states.items()
            },
        )


def rotate_output(output: ModelOutput, quarters: int = 1) -> Dict[str, np.ndarray]:
    """Expected outputs for a quarter-turned input: turn every map, shift group axes.

    Returns maps keyed like `output_maps`; shifts need |G| divisible by 4.
    """
    maps = output_maps(output)
    order = output.O.shape[-3]
    shift = quarters * (order // 4)
    out: Dict[str, np.ndarray] = {}
    for name, value in maps.items():
        turned = np.rot90(value, quarters, axes=(-2, -1))
        if name.startswith("P") or name == "K":
            out[name] = turned
        else:
            group_axis = -4 if name.startswith("layer") else -3
            out[name] = np.roll(turned, shift, axis=group_axis)
    return out


def output_maps(output: ModelOutput) -> Dict[str, np.ndarray]:
    """Every map of a forward pass by name: layer{s}.{l}, P{s}, Q{s}, K and O."""
    maps: Dict[str, np.ndarray] = {}
    for s, outs in enumerate(output.layers):
        for l, h in enumerate(outs):
            maps[f"layer{s}.{l}"] = h
    for s, (p, q) in enumerate(zip(output.P, output.Q)):
        maps[f"P{s}"] = p
        maps[f"Q{s}"] = q
    maps["K"] = output.K
    maps["O"] = output.O
    return maps

