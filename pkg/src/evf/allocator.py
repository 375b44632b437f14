"""Capacity-constrained token allocation for a two-FFN layer.

Given a routing decision over n tokens, each FFN may accept at most
``capacity = ceil(capacity_factor * n / num_ffns)`` of them. Three selection
strategies decide which candidates survive when a side is over capacity:

* ``random``   - a seeded uniform subset of the candidates;
* ``gbpr``     - keep the highest routing scores (global batch priority);
* ``img_gbpr`` - gbpr over modality-biased scores. Image tokens get a fixed
  (0, 1) prior and text tokens (1, 0), so each modality is steered to its own
  FFN, and rejected tokens may be redistributed to the other FFN's free slots.

Candidate grouping follows the priority scores where they exist: under
``img_gbpr`` the prior dominates the routing probability, so image tokens
are candidates for the vision FFN and text tokens for the language FFN.
Under ``gbpr`` the scores are the routing probabilities themselves, so the
grouping coincides with the router argmax, which is also what ``random``
uses directly.

Determinism contract (relied on by trace tooling and reference oracles):
all draws descend from ``CapacityConfig.seed`` via ``RngKey`` children,
``child(0, ffn_index)`` for the random-selection subset of each FFN and
``child(1)`` for the redistribution draw over the combined reject pool.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError
from .router import FFN_NAMES, LANGUAGE_FFN, VISION_FFN, RoutingDecision
from .seeds import RngKey

_SELECTION_DOMAIN = 0
_REDISTRIBUTION_DOMAIN = 1

# Additive modality priors, fixed. Image rows push toward the vision column.
IMAGE_PRIOR = (0.0, 1.0)
TEXT_PRIOR = (1.0, 0.0)

# Instrumentation: counts plans ever constructed (see router.DECISIONS_CREATED).
PLANS_CREATED = 0


class Strategy(str, Enum):
    RANDOM = "random"
    GBPR = "gbpr"
    IMG_GBPR = "img_gbpr"


@dataclass(frozen=True)
class CapacityConfig:
    """Static allocation settings for one layer or run."""

    capacity_factor: float = 1.5
    num_ffns: int = 2
    redistribution_fraction: float = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if not (self.capacity_factor > 0.0 and math.isfinite(self.capacity_factor)):
            raise ConfigError(f"capacity_factor must be positive and finite, got {self.capacity_factor}")
        if self.num_ffns != 2:
            raise ConfigError(f"num_ffns must be 2, got {self.num_ffns}")
        if not (0.0 <= self.redistribution_fraction <= 1.0):
            raise ConfigError(
                f"redistribution_fraction must lie in [0, 1], got {self.redistribution_fraction}"
            )


@dataclass(frozen=True, eq=False)
class ModalityTags:
    """Per-token modality labels for one flattened batch."""

    is_image: np.ndarray

    def __post_init__(self) -> None:
        arr = np.asarray(self.is_image, dtype=bool)
        if arr.ndim != 1:
            raise ContractError(f"modality tags must be 1-d, got shape {arr.shape}")
        object.__setattr__(self, "is_image", arr)

    @classmethod
    def from_labels(cls, labels) -> "ModalityTags":
        flags = []
        for i, label in enumerate(labels):
            if label not in ("image", "text"):
                raise ContractError(f"modality label {label!r} at position {i} (expected 'image' or 'text')")
            flags.append(label == "image")
        return cls(np.asarray(flags, dtype=bool))

    @property
    def n(self) -> int:
        return int(self.is_image.shape[0])

    @property
    def image_count(self) -> int:
        return int(self.is_image.sum())

    @property
    def text_count(self) -> int:
        return self.n - self.image_count


@dataclass(frozen=True, eq=False)
class PriorityScores:
    """Per-token, per-FFN selection scores; float64 array of shape (n, 2)."""

    values: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.values, dtype=np.float64)
        if arr.ndim != 2 or arr.shape[1] != 2:
            raise ContractError(f"priority scores must have shape (n, 2), got {arr.shape}")
        object.__setattr__(self, "values", arr)


@dataclass(eq=False)
class AllocationPlan:
    """Final or intermediate token-to-FFN assignment for one batch.

    Token index lists are ascending. ``pending_rejects`` is None once the
    plan is final; it holds per-FFN reject lists awaiting redistribution
    when the allocation ran with the redistribution switch on.
    """

    strategy: Strategy
    n_tokens: int
    capacity: int
    accepted: tuple[np.ndarray, np.ndarray]
    dropped: np.ndarray
    redistributed: tuple[tuple[int, int, int], ...] = ()
    pending_rejects: tuple[np.ndarray, np.ndarray] | None = None

    def __post_init__(self) -> None:
        global PLANS_CREATED
        PLANS_CREATED += 1

    @property
    def loads(self) -> tuple[int, int]:
        return (int(self.accepted[0].size), int(self.accepted[1].size))

    @property
    def accepted_total(self) -> int:
        return sum(self.loads)

    @property
    def is_final(self) -> bool:
        return self.pending_rejects is None

    def accepted_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_tokens, dtype=bool)
        mask[self.accepted[0]] = True
        mask[self.accepted[1]] = True
        return mask

    def signature(self) -> tuple:
        """Hashable assignment identity, used to detect allocation flips."""
        return (
            self.strategy.value,
            self.capacity,
            tuple(int(i) for i in self.accepted[0]),
            tuple(int(i) for i in self.accepted[1]),
            tuple(int(i) for i in self.dropped),
            self.redistributed,
        )

    def to_json_dict(self) -> dict:
        out = {
            "strategy": self.strategy.value,
            "n_tokens": int(self.n_tokens),
            "capacity": int(self.capacity),
            "accepted": {
                "language": [int(i) for i in self.accepted[LANGUAGE_FFN]],
                "vision": [int(i) for i in self.accepted[VISION_FFN]],
            },
            "dropped": [int(i) for i in self.dropped],
            "redistributed": [
                {"token": t, "from": FFN_NAMES[src], "to": FFN_NAMES[dst]}
                for t, src, dst in self.redistributed
            ],
            "loads": {"language": self.loads[0], "vision": self.loads[1]},
        }
        if self.pending_rejects is not None:
            out["pending_rejects"] = {
                "language": [int(i) for i in self.pending_rejects[LANGUAGE_FFN]],
                "vision": [int(i) for i in self.pending_rejects[VISION_FFN]],
            }
        return out


@dataclass(frozen=True)
class AllocationStats:
    """Aggregate accounting for one final plan."""

    n_tokens: int
    capacity: int
    loads: tuple[int, int]
    dropped: int
    redistributed: int
    success_rate: float
    drop_rate: float
    image_acceptance: float | None
    text_acceptance: float | None

    def to_json_dict(self) -> dict:
        return {
            "n_tokens": self.n_tokens,
            "capacity": self.capacity,
            "accepted_language": self.loads[0],
            "accepted_vision": self.loads[1],
            "dropped": self.dropped,
            "redistributed": self.redistributed,
            "success_rate": self.success_rate,
            "drop_rate": self.drop_rate,
            "image_acceptance": self.image_acceptance,
            "text_acceptance": self.text_acceptance,
        }


def compute_capacity(n: int, cfg: CapacityConfig) -> int:
    """Per-FFN token budget: ceil(capacity_factor * n / num_ffns), at least 1.

    A tiny epsilon guards the ceil against float dust pushing an exact
    integer product upward.
    """
    if n <= 0:
        raise ContractError(f"compute_capacity: batch must contain at least one token, got n={n}")
    raw = cfg.capacity_factor * n / cfg.num_ffns
    return max(1, int(math.ceil(raw - 1e-9)))


def priority_scores(decision: RoutingDecision, tags: ModalityTags, strategy: Strategy) -> PriorityScores:
    """Selection scores per token and FFN.

    gbpr ranks by the routing probabilities unchanged. img_gbpr adds the
    fixed modality prior, which lifts every image token above every text
    token in the vision column and vice versa. For random the scores are
    never consulted; the routing probabilities are returned for uniformity.
    """
    if tags.n != decision.n:
        raise ContractError(f"priority_scores: {tags.n} tags for {decision.n} tokens")
    p = decision.probabilities.data
    if strategy is Strategy.IMG_GBPR:
        prior = np.where(
            tags.is_image[:, None],
            np.asarray(IMAGE_PRIOR, dtype=np.float64),
            np.asarray(TEXT_PRIOR, dtype=np.float64),
        )
        values = p + prior
    else:
        values = p.copy()
    return PriorityScores(values)


def _candidate_ffn(decision: RoutingDecision, scores: PriorityScores, strategy: Strategy) -> np.ndarray:
    if strategy is Strategy.RANDOM:
        return decision.preferred_ffn
    s = scores.values
    return np.where(s[:, VISION_FFN] > s[:, LANGUAGE_FFN], VISION_FFN, LANGUAGE_FFN).astype(np.int64)


def _rank_by_score(candidates: np.ndarray, column_scores: np.ndarray) -> np.ndarray:
    """Candidates ordered by descending score, ties broken by lower index."""
    order = np.lexsort((candidates, -column_scores))
    return candidates[order]


def allocate(
    decision: RoutingDecision,
    scores: PriorityScores,
    tags: ModalityTags,
    cfg: CapacityConfig,
    strategy: Strategy,
    *,
    rng: RngKey | None = None,
    redistribution: bool | None = None,
) -> AllocationPlan:
    """Assign each token to one FFN's accepted list, or reject it.

    With ``redistribution`` left at None, rejects go straight to ``dropped``
    except under img_gbpr, where they are parked in ``pending_rejects`` for
    a subsequent :func:`redistribute` pass. Passing an explicit boolean
    overrides that per-strategy default.
    """
    n = decision.n
    if tags.n != n:
        raise ContractError(f"allocate: {tags.n} tags for {n} tokens")
    if scores.values.shape[0] != n:
        raise ContractError(f"allocate: {scores.values.shape[0]} score rows for {n} tokens")
    capacity = compute_capacity(n, cfg)
    if rng is None:
        rng = RngKey(cfg.seed)
    if redistribution is None:
        redistribution = strategy is Strategy.IMG_GBPR

    candidates = _candidate_ffn(decision, scores, strategy)
    accepted: list[np.ndarray] = []
    rejected: list[np.ndarray] = []
    for ffn in (LANGUAGE_FFN, VISION_FFN):
        pool = np.flatnonzero(candidates == ffn)
        if pool.size <= capacity:
            accepted.append(pool)
            rejected.append(np.empty(0, dtype=np.int64))
            continue
        if strategy is Strategy.RANDOM:
            gen = rng.child(_SELECTION_DOMAIN, ffn).generator()
            keep = np.sort(gen.choice(pool, size=capacity, replace=False))
        else:
            ranked = _rank_by_score(pool, scores.values[pool, ffn])
            keep = np.sort(ranked[:capacity])
        accepted.append(keep)
        rejected.append(np.setdiff1d(pool, keep))

    if redistribution:
        return AllocationPlan(
            strategy=strategy,
            n_tokens=n,
            capacity=capacity,
            accepted=(accepted[0], accepted[1]),
            dropped=np.empty(0, dtype=np.int64),
            pending_rejects=(rejected[0], rejected[1]),
        )
    return AllocationPlan(
        strategy=strategy,
        n_tokens=n,
        capacity=capacity,
        accepted=(accepted[0], accepted[1]),
        dropped=np.sort(np.concatenate(rejected)).astype(np.int64),
        pending_rejects=None,
    )


def redistribute(
    plan: AllocationPlan,
    decision: RoutingDecision,
    scores: PriorityScores,
    cfg: CapacityConfig,
    *,
    rng: RngKey | None = None,
) -> AllocationPlan:
    """Offer a seeded fraction of the rejects to the opposite FFN.

    The combined pool lists the language-side rejects then the vision-side
    rejects, each in ascending token order; the seeded draw picks positions
    in that pool. Offers are accepted by the opposite FFN in descending
    score for the receiving column (ties toward lower token index) until
    its remaining capacity is used. Everything not placed is dropped. The
    input plan must still carry pending rejects.
    """
    if plan.pending_rejects is None:
        raise ContractError("redistribute: plan has no pending rejects (was allocation run with redistribution?)")
    if decision.n != plan.n_tokens:
        raise ContractError(f"redistribute: decision covers {decision.n} tokens, plan covers {plan.n_tokens}")
    if rng is None:
        rng = RngKey(cfg.seed)

    pool_tokens = np.concatenate(plan.pending_rejects).astype(np.int64)
    pool_sources = np.concatenate(
        [np.full(plan.pending_rejects[ffn].size, ffn, dtype=np.int64) for ffn in (LANGUAGE_FFN, VISION_FFN)]
    )
    offered_count = int(math.floor(cfg.redistribution_fraction * pool_tokens.size + 0.5))
    if offered_count >= pool_tokens.size:
        offered_positions = np.arange(pool_tokens.size)
    elif offered_count == 0:
        offered_positions = np.empty(0, dtype=np.int64)
    else:
        gen = rng.child(_REDISTRIBUTION_DOMAIN).generator()
        offered_positions = np.sort(gen.choice(pool_tokens.size, size=offered_count, replace=False))

    offered_mask = np.zeros(pool_tokens.size, dtype=bool)
    offered_mask[offered_positions] = True

    new_accepted = [plan.accepted[0].copy(), plan.accepted[1].copy()]
    moved: list[tuple[int, int, int]] = []
    dropped = [int(t) for t in plan.dropped]
    for receiver in (LANGUAGE_FFN, VISION_FFN):
        source = 1 - receiver
        offers = pool_tokens[offered_mask & (pool_sources == source)]
        slots = plan.capacity - new_accepted[receiver].size
        if offers.size and slots > 0:
            ranked = _rank_by_score(offers, scores.values[offers, receiver])
            placed = ranked[:slots]
            new_accepted[receiver] = np.sort(np.concatenate([new_accepted[receiver], placed]))
            moved.extend((int(t), source, receiver) for t in placed)
            dropped.extend(int(t) for t in ranked[slots:])
        else:
            dropped.extend(int(t) for t in offers)
    dropped.extend(int(t) for t in pool_tokens[~offered_mask])

    return AllocationPlan(
        strategy=plan.strategy,
        n_tokens=plan.n_tokens,
        capacity=plan.capacity,
        accepted=(new_accepted[0], new_accepted[1]),
        dropped=np.sort(np.asarray(dropped, dtype=np.int64)),
        redistributed=tuple(sorted(moved)),
        pending_rejects=None,
    )


def allocation_stats(plan: AllocationPlan, tags: ModalityTags) -> AllocationStats:
    """Success/drop accounting for a final plan."""
    if not plan.is_final:
        raise ContractError("allocation_stats: plan still has pending rejects")
    if tags.n != plan.n_tokens:
        raise ContractError(f"allocation_stats: {tags.n} tags for {plan.n_tokens} tokens")
    mask = plan.accepted_mask()
    n = plan.n_tokens
    accepted = int(mask.sum())
    image_total = tags.image_count
    text_total = tags.text_count
    image_rate = float(mask[tags.is_image].sum() / image_total) if image_total else None
    text_rate = float(mask[~tags.is_image].sum() / text_total) if text_total else None
    return AllocationStats(
        n_tokens=n,
        capacity=plan.capacity,
        loads=plan.loads,
        dropped=int(plan.dropped.size),
        redistributed=len(plan.redistributed),
        success_rate=accepted / n,
        drop_rate=1.0 - accepted / n,
        image_acceptance=image_rate,
        text_acceptance=text_rate,
    )
