"""The elastic two-FFN transformer sub-layer.

An EVF layer holds a frozen language FFN, a trainable vision FFN and a
router. Multimodal batches are routed, capacity-allocated, processed by the
FFN they were assigned to and scaled by that FFN's routing probability;
tokens the allocation dropped contribute an exact zero row, so a residual
connection around the layer passes them through unchanged.

Language-only batches skip routing entirely and run the language FFN alone,
which makes that path bit-identical to the dense layer it was initialized
from.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .allocator import (
    AllocationPlan,
    AllocationStats,
    CapacityConfig,
    ModalityTags,
    Strategy,
    allocate,
    allocation_stats,
    priority_scores,
    redistribute,
)
from .errors import ShapeError
from .router import LANGUAGE_FFN, VISION_FFN, RouterParams, RoutingDecision, route
from .seeds import RngKey

_HISTOGRAM_BINS = 10


@dataclass(eq=False)
class FfnParams:
    """A two-matrix GELU feedforward block: width -> hidden -> width."""

    w_up: T.Parameter
    b_up: T.Parameter
    w_down: T.Parameter
    b_down: T.Parameter

    def __post_init__(self) -> None:
        d, h = self.w_up.data.shape
        if self.b_up.data.shape != (h,):
            raise ShapeError(f"ffn: b_up shape {self.b_up.data.shape} does not match hidden {h}")
        if self.w_down.data.shape != (h, d):
            raise ShapeError(f"ffn: w_down shape {self.w_down.data.shape} does not match ({h}, {d})")
        if self.b_down.data.shape != (d,):
            raise ShapeError(f"ffn: b_down shape {self.b_down.data.shape} does not match width {d}")

    @property
    def width(self) -> int:
        return self.w_up.data.shape[0]

    @property
    def hidden(self) -> int:
        return self.w_up.data.shape[1]

    @property
    def trainable(self) -> bool:
        return self.w_up.trainable

    def set_trainable(self, flag: bool) -> None:
        for p in (self.w_up, self.b_up, self.w_down, self.b_down):
            p.set_trainable(flag)

    def parameters(self) -> list[tuple[str, T.Parameter]]:
        return [("w_up", self.w_up), ("b_up", self.b_up), ("w_down", self.w_down), ("b_down", self.b_down)]

    def copy(self, trainable: bool | None = None) -> "FfnParams":
        """Bit-exact duplicate; optionally with a different freeze flag."""
        def dup(p: T.Parameter) -> T.Parameter:
            return T.Parameter(p.data.copy(), trainable=p.trainable if trainable is None else trainable)

        return FfnParams(dup(self.w_up), dup(self.b_up), dup(self.w_down), dup(self.b_down))

    @classmethod
    def init(cls, width: int, hidden: int, key: RngKey, scale: float = 0.02, trainable: bool = True) -> "FfnParams":
        gen = key.generator()
        return cls(
            T.Parameter(gen.normal(0.0, scale, size=(width, hidden)), trainable=trainable),
            T.Parameter(np.zeros(hidden), trainable=trainable),
            T.Parameter(gen.normal(0.0, scale, size=(hidden, width)), trainable=trainable),
            T.Parameter(np.zeros(width), trainable=trainable),
        )


def ffn_forward(p: FfnParams, x: T.Tensor) -> T.Tensor:
    """gelu(x @ w_up + b_up) @ w_down + b_down."""
    if x.data.ndim != 2 or x.data.shape[1] != p.width:
        raise ShapeError(f"ffn_forward: input shape {x.data.shape} does not match width {p.width}")
    h = T.gelu(T.add_bias(T.matmul(x, p.w_up), p.b_up))
    return T.add_bias(T.matmul(h, p.w_down), p.b_down)


@dataclass(eq=False)
class EvfLayerParams:
    """Router plus the language/vision FFN pair and allocation settings.

    ``redistribution`` of None defers to the strategy default (on only for
    img_gbpr).
    """

    router: RouterParams
    language_ffn: FfnParams
    vision_ffn: FfnParams
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    strategy: Strategy = Strategy.IMG_GBPR
    redistribution: bool | None = None

    def __post_init__(self) -> None:
        if self.language_ffn.width != self.vision_ffn.width:
            raise ShapeError(
                f"evf layer: FFN widths differ ({self.language_ffn.width} vs {self.vision_ffn.width})"
            )
        if self.router.width != self.language_ffn.width:
            raise ShapeError(
                f"evf layer: router width {self.router.width} does not match FFN width {self.language_ffn.width}"
            )

    @property
    def width(self) -> int:
        return self.language_ffn.width

    def parameters(self) -> list[tuple[str, T.Parameter]]:
        named = [("router.weight", self.router.weight)]
        named += [(f"language_ffn.{k}", p) for k, p in self.language_ffn.parameters()]
        named += [(f"vision_ffn.{k}", p) for k, p in self.vision_ffn.parameters()]
        return named


@dataclass
class LayerTelemetry:
    """One JSON-serializable record per layer per step."""

    layer_index: int
    strategy: str
    stats: AllocationStats
    vision_probability_histogram: list[int]

    def to_json_dict(self) -> dict:
        return {
            "layer": self.layer_index,
            "strategy": self.strategy,
            "vision_probability_histogram": self.vision_probability_histogram,
            **self.stats.to_json_dict(),
        }


def init_stage3_from_dense(
    dense: FfnParams,
    capacity: CapacityConfig | None = None,
    strategy: Strategy = Strategy.IMG_GBPR,
    *,
    train_vision: bool = True,
    train_language: bool = False,
) -> EvfLayerParams:
    """Duplicate a dense FFN into an EVF layer.

    Both FFNs start as bit-exact copies of the dense block; the router is
    zero-initialized, so the first forward routes every token at (0.5, 0.5).
    By default the language copy is frozen and the vision copy and router
    train.
    """
    return EvfLayerParams(
        router=RouterParams.zeros(dense.width, trainable=True),
        language_ffn=dense.copy(trainable=train_language),
        vision_ffn=dense.copy(trainable=train_vision),
        capacity=capacity if capacity is not None else CapacityConfig(),
        strategy=strategy,
    )


def forward_multimodal(
    layer: EvfLayerParams,
    tokens: T.Tensor,
    tags: ModalityTags,
    rng: RngKey,
    layer_index: int = -1,
) -> tuple[T.Tensor, LayerTelemetry, RoutingDecision, AllocationPlan]:
    """Route, allocate and apply the FFN pair to one flattened batch.

    Accepted tokens emit ``P(assigned FFN) * ffn(token)``; the probability
    factor keeps the router differentiable even though the assignment
    itself is discrete. Dropped tokens emit a zero row.
    """
    if tokens.data.ndim != 2 or tokens.data.shape[1] != layer.width:
        raise ShapeError(f"forward_multimodal: input shape {tokens.data.shape} does not match width {layer.width}")
    n = tokens.data.shape[0]
    decision = route(layer.router, tokens)
    scores = priority_scores(decision, tags, layer.strategy)
    plan = allocate(
        decision,
        scores,
        tags,
        layer.capacity,
        layer.strategy,
        rng=rng,
        redistribution=layer.redistribution,
    )
    if plan.pending_rejects is not None:
        plan = redistribute(plan, decision, scores, layer.capacity, rng=rng)

    out = T.Tensor(np.zeros((n, layer.width)))
    for ffn_index, ffn in ((LANGUAGE_FFN, layer.language_ffn), (VISION_FFN, layer.vision_ffn)):
        idx = plan.accepted[ffn_index]
        if idx.size == 0:
            continue
        x_e = T.take_rows(tokens, idx)
        y_e = ffn_forward(ffn, x_e)
        gate = T.take_rows(T.slice_cols(decision.probabilities, ffn_index, ffn_index + 1), idx)
        out = out + T.scatter_rows(T.scale_rows(y_e, gate), idx, n)

    stats = allocation_stats(plan, tags)
    hist, _ = np.histogram(decision.probabilities.data[:, VISION_FFN], bins=_HISTOGRAM_BINS, range=(0.0, 1.0))
    telemetry = LayerTelemetry(
        layer_index=layer_index,
        strategy=layer.strategy.value,
        stats=stats,
        vision_probability_histogram=[int(c) for c in hist],
    )
    return out, telemetry, decision, plan


def forward_language_only(layer: EvfLayerParams, tokens: T.Tensor) -> T.Tensor:
    """Dense language path: no routing, no allocation, no gating."""
    return ffn_forward(layer.language_ffn, tokens)
