"""Losses, optimizer, stage freezing and gradient verification.

The training objective is ``L_total = L_regressive + aux_weight * L_aux``.
L_regressive is mean next-token cross-entropy. L_aux is the balance term
``F_lang * G_lang + F_vis * G_vis`` per elastic layer, averaged across those
layers, where F is the discrete fraction of tokens each FFN accepted and G
is the mean routing probability column over all tokens. Only G carries
gradient; F is a constant of the (non-differentiable) allocation.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .allocator import AllocationPlan
from .errors import ConfigError, ContractError, NumericError, UnstableInstanceError
from .router import LANGUAGE_FFN, VISION_FFN, RoutingDecision


@dataclass(frozen=True)
class LayerLoadStats:
    """Per-layer balance terms feeding the auxiliary loss."""

    f_vision: float
    f_language: float
    g_vision: float
    g_language: float
    aux: float

    def to_json_dict(self) -> dict:
        return {
            "f_vision": self.f_vision,
            "f_language": self.f_language,
            "g_vision": self.g_vision,
            "g_language": self.g_language,
            "aux": self.aux,
        }


@dataclass(frozen=True)
class LossBreakdown:
    regressive: float
    aux: float
    aux_weight: float
    total: float
    per_layer: tuple[LayerLoadStats, ...] = ()


def regressive_loss(logits: T.Tensor, targets) -> T.Tensor:
    """Mean negative log-likelihood of the target ids (scalar tensor)."""
    return T.cross_entropy(logits, targets)


def aux_loss(
    plans: Sequence[AllocationPlan],
    decisions: Sequence[RoutingDecision],
) -> tuple[T.Tensor, tuple[LayerLoadStats, ...]]:
    """Balance loss averaged over the elastic layers of one forward pass.

    Returns the differentiable scalar plus per-layer F/G snapshots.
    """
    if not plans:
        raise ContractError("aux_loss: at least one layer is required")
    if len(plans) != len(decisions):
        raise ContractError(f"aux_loss: {len(plans)} plans for {len(decisions)} decisions")
    acc: T.Tensor | None = None
    per_layer: list[LayerLoadStats] = []
    for plan, decision in zip(plans, decisions):
        if not plan.is_final:
            raise ContractError("aux_loss: plan still has pending rejects")
        if plan.n_tokens != decision.n:
            raise ContractError(f"aux_loss: plan covers {plan.n_tokens} tokens, decision {decision.n}")
        n = plan.n_tokens
        f_lang = plan.loads[LANGUAGE_FFN] / n
        f_vis = plan.loads[VISION_FFN] / n
        g = T.col_mean(decision.probabilities)
        layer_term = T.sum_all(T.mul(g, T.Tensor(np.array([f_lang, f_vis]))))
        acc = layer_term if acc is None else acc + layer_term
        per_layer.append(
            LayerLoadStats(
                f_vision=f_vis,
                f_language=f_lang,
                g_vision=float(g.data[VISION_FFN]),
                g_language=float(g.data[LANGUAGE_FFN]),
                aux=layer_term.item(),
            )
        )
    total = T.scale(acc, 1.0 / len(plans))
    return total, tuple(per_layer)


def total_loss(
    regressive: float,
    aux: float,
    aux_weight: float = 0.001,
    per_layer: Sequence[LayerLoadStats] = (),
) -> LossBreakdown:
    """Combine the loss terms into a breakdown record.

    Pure bookkeeping over floats; the differentiable composition lives in
    the training step, and the two must agree to rounding.
    """
    values = (regressive, aux, aux_weight)
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"total_loss: non-finite inputs {values}")
    return LossBreakdown(
        regressive=regressive,
        aux=aux,
        aux_weight=aux_weight,
        total=regressive + aux_weight * aux,
        per_layer=tuple(per_layer),
    )


@dataclass(frozen=True)
class OptimizerConfig:
    learning_rate: float = 3e-3
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.0
    warmup_ratio: float = 0.03
    epsilon: float = 1e-8

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be positive, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be non-negative, got {self.weight_decay}")
        if not (0.0 <= self.warmup_ratio < 1.0):
            raise ConfigError(f"warmup_ratio must lie in [0, 1), got {self.warmup_ratio}")


def learning_rate_at(cfg: OptimizerConfig, step: int, total_steps: int) -> float:
    """Linear warmup to the peak rate, then cosine decay to zero.

    Steps are 0-based; step 0 of a non-trivial warmup runs at rate 0.
    """
    if total_steps <= 0:
        raise ContractError(f"learning_rate_at: total_steps must be positive, got {total_steps}")
    warmup = max(1, int(round(cfg.warmup_ratio * total_steps)))
    if step < warmup:
        return cfg.learning_rate * step / warmup
    span = max(1, total_steps - warmup)
    progress = min(1.0, (step - warmup) / span)
    return cfg.learning_rate * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay Adam over a fixed parameter list.

    Frozen parameters are skipped entirely, so their values stay
    bit-identical through any number of steps.
    """

    def __init__(self, params: Iterable[T.Parameter], cfg: OptimizerConfig, total_steps: int):
        if total_steps <= 0:
            raise ContractError(f"AdamW: total_steps must be positive, got {total_steps}")
        self.params = list(params)
        self.cfg = cfg
        self.total_steps = total_steps
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}

    def step(self, step_index: int) -> float:
        """Apply one update from the gradients currently stored; returns the rate used."""
        lr = learning_rate_at(self.cfg, step_index, self.total_steps)
        t = step_index + 1
        b1, b2 = self.cfg.beta1, self.cfg.beta2
        for p in self.params:
            if not p.trainable:
                continue
            g = p.grad
            m = self._m.get(id(p))
            if m is None:
                m = np.zeros_like(p.data)
                v = np.zeros_like(p.data)
            else:
                v = self._v[id(p)]
            m = b1 * m + (1.0 - b1) * g
            v = b2 * v + (1.0 - b2) * g * g
            self._m[id(p)] = m
            self._v[id(p)] = v
            m_hat = m / (1.0 - b1**t)
            v_hat = v / (1.0 - b2**t)
            update = m_hat / (np.sqrt(v_hat) + self.cfg.epsilon) + self.cfg.weight_decay * p.data
            p.assign(p.data - lr * update)
        return lr


@dataclass(frozen=True)
class StageSchedule:
    """Which parameter groups train at each curriculum stage.

    Stage 1 tunes only the vision adapter, stage 2 adds the backbone, and
    stage 3 restricts training to the vision FFNs and routers while
    everything else stays bit-frozen.
    """

    stage: int

    _GROUPS = {
        1: frozenset({"adapter"}),
        2: frozenset({"adapter", "backbone"}),
        3: frozenset({"vision_ffn", "router"}),
    }

    def __post_init__(self) -> None:
        if self.stage not in self._GROUPS:
            raise ConfigError(f"stage must be 1, 2 or 3, got {self.stage}")

    def trainable_groups(self) -> frozenset[str]:
        return self._GROUPS[self.stage]


def tensor_digest(arr: np.ndarray) -> str:
    """SHA-256 over the row-major float64 bytes of one array."""
    return hashlib.sha256(np.ascontiguousarray(arr, dtype=np.float64).tobytes()).hexdigest()


def parameter_digests(named_params: Iterable[tuple[str, T.Parameter]]) -> dict[str, str]:
    return {name: tensor_digest(p.data) for name, p in named_params}


def combined_digest(named_params: Iterable[tuple[str, T.Parameter]]) -> str:
    """One SHA-256 over all tensors, walked in sorted-name order."""
    h = hashlib.sha256()
    for name, p in sorted(named_params, key=lambda item: item[0]):
        h.update(name.encode())
        h.update(np.ascontiguousarray(p.data, dtype=np.float64).tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class GradCheckReport:
    checked: int
    max_rel_err: float
    worst: str
    per_param: dict[str, float]

    def to_json_dict(self) -> dict:
        return {
            "checked": self.checked,
            "max_rel_err": self.max_rel_err,
            "worst": self.worst,
            "per_param": self.per_param,
        }


def grad_check(
    loss_fn: Callable[[], tuple[T.Tensor, tuple]],
    named_params: Sequence[tuple[str, T.Parameter]],
    *,
    epsilon: float = 1e-5,
    rel_floor: float = 1e-5,
    subset: tuple[int, int] | None = None,
    _corrupt_first_gradient: float = 0.0,
) -> GradCheckReport:
    """Compare analytic gradients with central finite differences.

    ``loss_fn`` must rebuild the loss from scratch on every call and return
    (loss tensor, allocation signature). If a perturbation changes the
    signature, the instance sits too close to a capacity or preference
    boundary and :class:`UnstableInstanceError` is raised so the caller can
    resample. Relative error is |analytic - fd| / max(|analytic|, |fd|,
    rel_floor).

    ``subset`` restricts the check to scalars whose global flat index is
    congruent to ``offset`` modulo ``stride``; callers that run several
    instances can partition full coverage across them.

    ``_corrupt_first_gradient`` is a negative-control hook for the harness:
    a nonzero value is added to one analytic gradient entry before
    comparison and must make the check fail.
    """
    if subset is not None:
        offset, stride = subset
        if stride < 1 or not 0 <= offset < stride:
            raise ContractError(f"grad_check subset must satisfy 0 <= offset < stride, got {subset}")
    trainable = [(name, p) for name, p in named_params if p.trainable]
    if not trainable:
        return GradCheckReport(checked=0, max_rel_err=0.0, worst="", per_param={})

    base_loss, base_signature = loss_fn()
    T.zero_grads([p for _, p in trainable])
    T.backward(base_loss)
    analytic = {name: p.grad.copy() for name, p in trainable}

    selected: dict[str, np.ndarray] = {}
    global_index = 0
    for name, p in trainable:
        indices = np.arange(p.data.size)
        if subset is not None:
            offset, stride = subset
            indices = indices[(global_index + indices) % stride == offset]
        selected[name] = indices
        global_index += p.data.size
    if _corrupt_first_gradient:
        for name, p in trainable:
            if selected[name].size:
                analytic[name].reshape(-1)[int(selected[name][0])] += _corrupt_first_gradient
                break

    checked = 0
    max_rel = 0.0
    worst = ""
    per_param: dict[str, float] = {}

    def loss_value_at(p: T.Parameter, flat_index: int, delta: float, original: np.ndarray) -> float:
        perturbed = original.copy()
        perturbed.reshape(-1)[flat_index] += delta
        p.assign(perturbed)
        try:
            loss, signature = loss_fn()
        finally:
            p.assign(original)
        if signature != base_signature:
            raise UnstableInstanceError("allocation flipped under finite-difference perturbation")
        return loss.item()

    for name, p in trainable:
        if not selected[name].size:
            continue
        original = p.data
        flat_analytic = analytic[name].reshape(-1)
        param_max = 0.0
        for i in (int(j) for j in selected[name]):
            up = loss_value_at(p, i, epsilon, original)
            down = loss_value_at(p, i, -epsilon, original)
            fd = (up - down) / (2.0 * epsilon)
            a = float(flat_analytic[i])
            rel = abs(a - fd) / max(abs(a), abs(fd), rel_floor)
            checked += 1
            param_max = max(param_max, rel)
            if rel > max_rel:
                max_rel = rel
                worst = f"{name}[{i}]"
        per_param[name] = param_max

    return GradCheckReport(checked=checked, max_rel_err=max_rel, worst=worst, per_param=per_param)
