"""A desk-scale decoder transformer with elastic FFN layers.

Sequences are packed into one flattened token matrix (batch and sequence
dimensions collapse) with a block-diagonal causal attention mask, so the
elastic layers see the whole batch at once, which is the scope capacity is
defined over. Each sequence is laid out image tokens first, then text.

The synthetic multimodal task: a hidden key, recoverable only from the
image tokens, selects one of several fixed vocabulary permutations, and the
token following text token t is defined to be permutation[t]. Text alone
cannot identify the permutation, so loss improvements beyond chance require
the image pathway.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from . import tensor as T
from .allocator import AllocationPlan, CapacityConfig, ModalityTags, Strategy
from .errors import ConfigError, ContractError
from .layer import EvfLayerParams, FfnParams, LayerTelemetry, ffn_forward, forward_language_only, forward_multimodal, init_stage3_from_dense
from .router import RoutingDecision
from .seeds import RngKey
from .training import (
    AdamW,
    LayerLoadStats,
    LossBreakdown,
    OptimizerConfig,
    StageSchedule,
    aux_loss,
    learning_rate_at,
    regressive_loss,
    total_loss,
)

MULTIMODAL = "multimodal"
LANGUAGE_ONLY = "language_only"

_MASKED = -1e30

# RngKey domains under a model's seed.
_INIT_DOMAIN = 0
_TASK_DOMAIN = 1
_DATA_DOMAIN = 2
_ALLOC_DOMAIN = 3
_EVAL_DOMAIN = 4


def _default_evf_indices(depth: int) -> tuple[int, ...]:
    return tuple(range(0, depth, 2))


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions, allocation settings and task settings for one model."""

    depth: int = 4
    width: int = 32
    heads: int = 2
    hidden: int = 64
    vocab: int = 64
    evf_layer_indices: tuple[int, ...] | None = None
    capacity: CapacityConfig = field(default_factory=CapacityConfig)
    strategy: Strategy = Strategy.IMG_GBPR
    seed: int = 0
    image_feature_dim: int = 16
    image_tokens: int = 2
    image_noise: float = 0.1
    num_keys: int = 4
    text_len: int = 8
    batch_sequences: int = 2
    max_seq_len: int = 64

    def __post_init__(self) -> None:
        for name in ("depth", "width", "heads", "hidden", "vocab", "image_feature_dim", "num_keys", "text_len", "batch_sequences", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1, got {getattr(self, name)}")
        if self.image_tokens < 0:
            raise ConfigError(f"image_tokens must be non-negative, got {self.image_tokens}")
        if self.width % self.heads != 0:
            raise ConfigError(f"width {self.width} is not divisible by heads {self.heads}")
        if self.image_tokens + self.text_len > self.max_seq_len:
            raise ConfigError(
                f"max_seq_len {self.max_seq_len} cannot hold {self.image_tokens} image + {self.text_len} text tokens"
            )
        if self.evf_layer_indices is None:
            object.__setattr__(self, "evf_layer_indices", _default_evf_indices(self.depth))
        else:
            indices = tuple(sorted(int(i) for i in self.evf_layer_indices))
            if len(set(indices)) != len(indices):
                raise ConfigError(f"evf_layer_indices contains duplicates: {indices}")
            for i in indices:
                if not (0 <= i < self.depth):
                    raise ConfigError(f"evf_layer_indices entry {i} outside [0, {self.depth})")
            object.__setattr__(self, "evf_layer_indices", indices)
        if not isinstance(self.strategy, Strategy):
            object.__setattr__(self, "strategy", Strategy(self.strategy))

    def to_json_dict(self) -> dict:
        return {
            "depth": self.depth,
            "width": self.width,
            "heads": self.heads,
            "hidden": self.hidden,
            "vocab": self.vocab,
            "evf_layer_indices": list(self.evf_layer_indices),
            "capacity": {
                "capacity_factor": self.capacity.capacity_factor,
                "num_ffns": self.capacity.num_ffns,
                "redistribution_fraction": self.capacity.redistribution_fraction,
                "seed": self.capacity.seed,
            },
            "strategy": self.strategy.value,
            "seed": self.seed,
            "image_feature_dim": self.image_feature_dim,
            "image_tokens": self.image_tokens,
            "image_noise": self.image_noise,
            "num_keys": self.num_keys,
            "text_len": self.text_len,
            "batch_sequences": self.batch_sequences,
            "max_seq_len": self.max_seq_len,
        }

    @classmethod
    def from_json_dict(cls, doc: dict) -> "ModelConfig":
        if not isinstance(doc, dict):
            raise ConfigError(f"model config must be an object, got {type(doc).__name__}")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown model config field(s): {sorted(unknown)}")
        kwargs = dict(doc)
        if "capacity" in kwargs and isinstance(kwargs["capacity"], dict):
            kwargs["capacity"] = CapacityConfig(**kwargs["capacity"])
        if "evf_layer_indices" in kwargs and kwargs["evf_layer_indices"] is not None:
            kwargs["evf_layer_indices"] = tuple(kwargs["evf_layer_indices"])
        if "strategy" in kwargs:
            try:
                kwargs["strategy"] = Strategy(kwargs["strategy"])
            except ValueError as exc:
                raise ConfigError(f"unknown strategy {kwargs['strategy']!r}") from exc
        return cls(**kwargs)


@dataclass(eq=False)
class SequenceSample:
    """One sequence: optional image feature rows, then text token ids."""

    text_ids: np.ndarray
    image_features: np.ndarray | None = None
    targets: np.ndarray | None = None

    def __post_init__(self) -> None:
        ids = np.asarray(self.text_ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size < 1:
            raise ContractError(f"sequence needs a 1-d, non-empty text_ids array, got shape {ids.shape}")
        self.text_ids = ids
        if self.image_features is not None:
            feats = np.ascontiguousarray(self.image_features, dtype=np.float64)
            if feats.ndim != 2:
                raise ContractError(f"image_features must be 2-d, got shape {feats.shape}")
            self.image_features = feats if feats.shape[0] > 0 else None
        if self.targets is not None:
            tgt = np.asarray(self.targets, dtype=np.int64)
            if tgt.shape != self.text_ids.shape:
                raise ContractError(f"targets shape {tgt.shape} does not match text_ids {self.text_ids.shape}")
            self.targets = tgt

    @property
    def image_count(self) -> int:
        return 0 if self.image_features is None else int(self.image_features.shape[0])

    @property
    def length(self) -> int:
        return self.image_count + int(self.text_ids.size)


@dataclass(eq=False)
class TokenBatch:
    sequences: list[SequenceSample]

    def __post_init__(self) -> None:
        if not self.sequences:
            raise ContractError("batch must contain at least one sequence")

    @property
    def has_images(self) -> bool:
        return any(s.image_count > 0 for s in self.sequences)

    @property
    def total_tokens(self) -> int:
        return sum(s.length for s in self.sequences)

    def tags(self) -> ModalityTags:
        flags: list[bool] = []
        for seq in self.sequences:
            flags.extend([True] * seq.image_count)
            flags.extend([False] * int(seq.text_ids.size))
        return ModalityTags(np.asarray(flags, dtype=bool))


@dataclass(eq=False)
class VisionAdapter:
    """Linear projection from image feature space into the model width."""

    weight: T.Parameter
    bias: T.Parameter

    @property
    def feature_dim(self) -> int:
        return self.weight.data.shape[0]

    def project(self, features: T.Tensor) -> T.Tensor:
        return T.add_bias(T.matmul(features, self.weight), self.bias)


@dataclass(eq=False)
class LayerNormParams:
    gain: T.Parameter
    bias: T.Parameter


@dataclass(eq=False)
class AttentionParams:
    wq: T.Parameter
    bq: T.Parameter
    wk: T.Parameter
    bk: T.Parameter
    wv: T.Parameter
    bv: T.Parameter
    wo: T.Parameter
    bo: T.Parameter
    heads: int


@dataclass(eq=False)
class Block:
    index: int
    ln_attn: LayerNormParams
    attn: AttentionParams
    ln_ffn: LayerNormParams
    ffn: FfnParams | None = None
    evf: EvfLayerParams | None = None


class MicroModel:
    """Parameter container plus stage bookkeeping; logic lives in functions."""

    def __init__(
        self,
        cfg: ModelConfig,
        embed_tokens: T.Parameter,
        embed_positions: T.Parameter,
        adapter: VisionAdapter,
        blocks: list[Block],
        ln_final: LayerNormParams,
        head_weight: T.Parameter,
        head_bias: T.Parameter,
    ):
        self.cfg = cfg
        self.stage = 2
        self.embed_tokens = embed_tokens
        self.embed_positions = embed_positions
        self.adapter = adapter
        self.blocks = blocks
        self.ln_final = ln_final
        self.head_weight = head_weight
        self.head_bias = head_bias

    def named_parameters(self) -> Iterator[tuple[str, T.Parameter, str]]:
        """Yields (name, parameter, stage group) in a fixed order."""
        yield "embed.tokens", self.embed_tokens, "backbone"
        yield "embed.positions", self.embed_positions, "backbone"
        yield "adapter.weight", self.adapter.weight, "adapter"
        yield "adapter.bias", self.adapter.bias, "adapter"
        for block in self.blocks:
            prefix = f"blocks.{block.index}"
            yield f"{prefix}.ln_attn.gain", block.ln_attn.gain, "backbone"
            yield f"{prefix}.ln_attn.bias", block.ln_attn.bias, "backbone"
            attn = block.attn
            for key, p in (("wq", attn.wq), ("bq", attn.bq), ("wk", attn.wk), ("bk", attn.bk),
                           ("wv", attn.wv), ("bv", attn.bv), ("wo", attn.wo), ("bo", attn.bo)):
                yield f"{prefix}.attn.{key}", p, "backbone"
            yield f"{prefix}.ln_ffn.gain", block.ln_ffn.gain, "backbone"
            yield f"{prefix}.ln_ffn.bias", block.ln_ffn.bias, "backbone"
            if block.ffn is not None:
                for key, p in block.ffn.parameters():
                    yield f"{prefix}.ffn.{key}", p, "backbone"
            if block.evf is not None:
                yield f"{prefix}.evf.router.weight", block.evf.router.weight, "router"
                for key, p in block.evf.language_ffn.parameters():
                    yield f"{prefix}.evf.language_ffn.{key}", p, "backbone"
                for key, p in block.evf.vision_ffn.parameters():
                    yield f"{prefix}.evf.vision_ffn.{key}", p, "vision_ffn"
        yield "ln_final.gain", self.ln_final.gain, "backbone"
        yield "ln_final.bias", self.ln_final.bias, "backbone"
        yield "head.weight", self.head_weight, "backbone"
        yield "head.bias", self.head_bias, "backbone"

    def parameters(self) -> list[T.Parameter]:
        return [p for _, p, _ in self.named_parameters()]

    def trainable_parameters(self) -> list[tuple[str, T.Parameter]]:
        return [(name, p) for name, p, _ in self.named_parameters() if p.trainable]


def build_model(cfg: ModelConfig) -> MicroModel:
    """Deterministic initialization from cfg.seed; starts as a dense stage-2 model."""
    key = RngKey(cfg.seed).child(_INIT_DOMAIN)
    counter = 0

    def next_gen() -> np.random.Generator:
        nonlocal counter
        gen = key.child(counter).generator()
        counter += 1
        return gen

    def normal(shape: tuple[int, ...], scale: float = 0.02) -> T.Parameter:
        return T.Parameter(next_gen().normal(0.0, scale, size=shape))

    def zeros(shape: tuple[int, ...]) -> T.Parameter:
        return T.Parameter(np.zeros(shape))

    d, h = cfg.width, cfg.hidden
    embed_tokens = normal((cfg.vocab, d))
    embed_positions = normal((cfg.max_seq_len, d))
    adapter = VisionAdapter(normal((cfg.image_feature_dim, d)), zeros((d,)))
    blocks: list[Block] = []
    for i in range(cfg.depth):
        ln_attn = LayerNormParams(T.Parameter(np.ones(d)), zeros((d,)))
        attn = AttentionParams(
            wq=normal((d, d)), bq=zeros((d,)),
            wk=normal((d, d)), bk=zeros((d,)),
            wv=normal((d, d)), bv=zeros((d,)),
            wo=normal((d, d)), bo=zeros((d,)),
            heads=cfg.heads,
        )
        ln_ffn = LayerNormParams(T.Parameter(np.ones(d)), zeros((d,)))
        ffn = FfnParams(
            w_up=normal((d, h)), b_up=zeros((h,)),
            w_down=normal((h, d)), b_down=zeros((d,)),
        )
        blocks.append(Block(index=i, ln_attn=ln_attn, attn=attn, ln_ffn=ln_ffn, ffn=ffn))
    ln_final = LayerNormParams(T.Parameter(np.ones(d)), zeros((d,)))
    head_weight = normal((d, cfg.vocab))
    head_bias = zeros((cfg.vocab,))
    model = MicroModel(cfg, embed_tokens, embed_positions, adapter, blocks, ln_final, head_weight, head_bias)
    apply_stage(model, 2)
    return model


def apply_stage(model: MicroModel, stage: int) -> None:
    """Set per-parameter freeze flags for the given curriculum stage."""
    groups = StageSchedule(stage).trainable_groups()
    for _, p, group in model.named_parameters():
        p.set_trainable(group in groups)
    model.stage = stage


def enter_stage3(model: MicroModel) -> MicroModel:
    """Convert dense FFNs at the configured indices into elastic layers.

    Each dense block is duplicated bit-exactly into the language and vision
    FFNs; routers start at zero. Stage-3 freeze flags are applied.
    """
    if model.stage == 3:
        raise ContractError("model is already in stage 3")
    for i in model.cfg.evf_layer_indices:
        block = model.blocks[i]
        block.evf = init_stage3_from_dense(block.ffn, model.cfg.capacity, model.cfg.strategy)
        block.ffn = None
    apply_stage(model, 3)
    return model


@dataclass(eq=False)
class ForwardResult:
    logits: T.Tensor
    telemetry: list[LayerTelemetry]
    plans: list[AllocationPlan]
    decisions: list[RoutingDecision]
    tags: ModalityTags
    text_rows: np.ndarray
    targets: np.ndarray | None

    def allocation_signature(self) -> tuple:
        return tuple(plan.signature() for plan in self.plans)


def _packed_mask(seq_ids: np.ndarray) -> np.ndarray:
    """Block-diagonal causal mask: attend within your sequence, backwards only."""
    same = seq_ids[:, None] == seq_ids[None, :]
    causal = np.arange(seq_ids.size)[None, :] <= np.arange(seq_ids.size)[:, None]
    return np.where(same & causal, 0.0, _MASKED)


def _attention(attn: AttentionParams, x: T.Tensor, mask: np.ndarray) -> T.Tensor:
    d = x.data.shape[1]
    head_dim = d // attn.heads
    q = T.add_bias(T.matmul(x, attn.wq), attn.bq)
    k = T.add_bias(T.matmul(x, attn.wk), attn.bk)
    v = T.add_bias(T.matmul(x, attn.wv), attn.bv)
    outs = []
    for hd in range(attn.heads):
        lo, hi = hd * head_dim, (hd + 1) * head_dim
        qh = T.slice_cols(q, lo, hi)
        kh = T.slice_cols(k, lo, hi)
        vh = T.slice_cols(v, lo, hi)
        scores = T.scale(T.matmul(qh, T.transpose(kh)), 1.0 / np.sqrt(head_dim))
        weights = T.softmax_rows(T.add_constant(scores, mask))
        outs.append(T.matmul(weights, vh))
    return T.add_bias(T.matmul(T.concat_cols(outs), attn.wo), attn.bo)


def forward(
    model: MicroModel,
    batch: TokenBatch,
    mode: str = MULTIMODAL,
    rng: RngKey | None = None,
) -> ForwardResult:
    """Run the packed batch through the transformer.

    multimodal mode exercises routing and allocation at every elastic
    layer; language_only mode rejects batches containing image features and
    runs the dense language path (no routing objects are ever built).
    """
    if mode not in (MULTIMODAL, LANGUAGE_ONLY):
        raise ContractError(f"unknown mode {mode!r}")
    if mode == LANGUAGE_ONLY and batch.has_images:
        raise ContractError("language_only forward received image features")
    if rng is None:
        rng = RngKey(model.cfg.seed).child(_EVAL_DOMAIN)

    cfg = model.cfg
    parts: list[T.Tensor] = []
    positions: list[int] = []
    seq_ids: list[int] = []
    text_rows: list[int] = []
    targets: list[int] = []
    have_targets = True
    offset = 0
    for si, seq in enumerate(batch.sequences):
        if seq.length > cfg.max_seq_len:
            raise ContractError(f"sequence {si} has {seq.length} tokens, max_seq_len is {cfg.max_seq_len}")
        if int(seq.text_ids.max()) >= cfg.vocab or int(seq.text_ids.min()) < 0:
            raise ContractError(f"sequence {si} has token ids outside [0, {cfg.vocab})")
        if seq.image_count:
            if seq.image_features.shape[1] != model.adapter.feature_dim:
                raise ContractError(
                    f"sequence {si} image feature dim {seq.image_features.shape[1]} "
                    f"does not match adapter dim {model.adapter.feature_dim}"
                )
            parts.append(model.adapter.project(T.Tensor(seq.image_features)))
        parts.append(T.take_rows(model.embed_tokens, seq.text_ids))
        length = seq.length
        positions.extend(range(length))
        seq_ids.extend([si] * length)
        text_rows.extend(range(offset + seq.image_count, offset + length))
        if seq.targets is None:
            have_targets = False
        else:
            targets.extend(int(t) for t in seq.targets)
        offset += length

    x = T.concat_rows(parts)
    x = x + T.take_rows(model.embed_positions, np.asarray(positions, dtype=np.int64))
    mask = _packed_mask(np.asarray(seq_ids, dtype=np.int64))
    tags = batch.tags()

    telemetry: list[LayerTelemetry] = []
    plans: list[AllocationPlan] = []
    decisions: list[RoutingDecision] = []
    for block in model.blocks:
        normed = T.layer_norm(x, block.ln_attn.gain, block.ln_attn.bias)
        x = x + _attention(block.attn, normed, mask)
        pre_ffn = T.layer_norm(x, block.ln_ffn.gain, block.ln_ffn.bias)
        if block.evf is not None:
            if mode == LANGUAGE_ONLY:
                ffn_out = forward_language_only(block.evf, pre_ffn)
            else:
                ffn_out, tele, decision, plan = forward_multimodal(
                    block.evf, pre_ffn, tags, rng.child(block.index), layer_index=block.index
                )
                telemetry.append(tele)
                decisions.append(decision)
                plans.append(plan)
        else:
            ffn_out = ffn_forward(block.ffn, pre_ffn)
        x = x + ffn_out

    final = T.layer_norm(x, model.ln_final.gain, model.ln_final.bias)
    logits = T.add_bias(T.matmul(final, model.head_weight), model.head_bias)
    return ForwardResult(
        logits=logits,
        telemetry=telemetry,
        plans=plans,
        decisions=decisions,
        tags=tags,
        text_rows=np.asarray(text_rows, dtype=np.int64),
        targets=np.asarray(targets, dtype=np.int64) if have_targets else None,
    )


@dataclass(eq=False)
class LossResult:
    total: T.Tensor
    breakdown: LossBreakdown
    forward: ForwardResult


def compute_loss(
    model: MicroModel,
    batch: TokenBatch,
    rng: RngKey | None = None,
    aux_weight: float = 0.001,
) -> LossResult:
    """Forward pass plus the composed training loss on the text positions."""
    fwd = forward(model, batch, MULTIMODAL, rng)
    if fwd.targets is None:
        raise ContractError("compute_loss requires targets on every sequence")
    text_logits = T.take_rows(fwd.logits, fwd.text_rows)
    reg = regressive_loss(text_logits, fwd.targets)
    if fwd.plans:
        aux, per_layer = aux_loss(fwd.plans, fwd.decisions)
        total = reg + T.scale(aux, aux_weight)
        breakdown = total_loss(reg.item(), aux.item(), aux_weight, per_layer)
    else:
        total = reg
        breakdown = total_loss(reg.item(), 0.0, aux_weight)
    return LossResult(total=total, breakdown=breakdown, forward=fwd)


class SyntheticTask:
    """Seeded generator for the key-permutation task."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        gen = RngKey(cfg.seed).child(_TASK_DOMAIN).generator()
        self.permutations = np.stack([gen.permutation(cfg.vocab) for _ in range(cfg.num_keys)])
        self.key_vectors = gen.normal(0.0, 1.0, size=(cfg.num_keys, cfg.image_feature_dim))

    def sample_batch(
        self,
        key: RngKey,
        sequences: int | None = None,
        text_len: int | None = None,
    ) -> TokenBatch:
        cfg = self.cfg
        n_seq = cfg.batch_sequences if sequences is None else sequences
        length = cfg.text_len if text_len is None else text_len
        gen = key.generator()
        out = []
        for _ in range(n_seq):
            k = int(gen.integers(cfg.num_keys))
            feats = np.tile(self.key_vectors[k], (cfg.image_tokens, 1))
            feats = feats + cfg.image_noise * gen.normal(size=feats.shape)
            ids = gen.integers(cfg.vocab, size=length)
            out.append(
                SequenceSample(
                    text_ids=ids,
                    image_features=feats,
                    targets=self.permutations[k][ids],
                )
            )
        return TokenBatch(out)

    def sample_text_batch(
        self,
        key: RngKey,
        sequences: int | None = None,
        text_len: int | None = None,
    ) -> TokenBatch:
        """Text-only batch (no image rows, no targets) for language-only eval."""
        cfg = self.cfg
        n_seq = cfg.batch_sequences if sequences is None else sequences
        length = cfg.text_len if text_len is None else text_len
        gen = key.generator()
        return TokenBatch(
            [SequenceSample(text_ids=gen.integers(cfg.vocab, size=length)) for _ in range(n_seq)]
        )


@dataclass(frozen=True)
class TrainConfig:
    stage: int = 3
    steps: int = 500
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    aux_weight: float = 0.001

    def __post_init__(self) -> None:
        if self.steps < 0:
            raise ConfigError(f"steps must be non-negative, got {self.steps}")
        StageSchedule(self.stage)


@dataclass(eq=False)
class TrainResult:
    metrics: list[dict]
    model: MicroModel
    checkpoint_path: Path | None


def _metrics_row(step: int, lr: float, result: LossResult) -> dict:
    layers = []
    for tele, loads in zip(result.forward.telemetry, result.breakdown.per_layer):
        layers.append({**tele.to_json_dict(), **loads.to_json_dict()})
    return {
        "step": step,
        "lr": lr,
        "loss_regressive": result.breakdown.regressive,
        "loss_aux": result.breakdown.aux,
        "loss_total": result.breakdown.total,
        "layers": layers,
    }


def train(
    model: MicroModel,
    task: SyntheticTask,
    tcfg: TrainConfig,
    out_dir: Path | str | None = None,
) -> TrainResult:
    """Run one curriculum stage for tcfg.steps updates.

    Emits one metrics row per step (loss measured before the update) plus a
    final evaluation row at index tcfg.steps. When out_dir is given, writes
    metrics.jsonl, telemetry.jsonl (one line per elastic layer per step)
    and a final checkpoint.
    """
    from . import checkpoint as ckpt

    if tcfg.stage == 3:
        if model.stage != 3:
            enter_stage3(model)
        else:
            apply_stage(model, 3)
    else:
        if model.stage == 3:
            raise ContractError("cannot return to a dense stage after entering stage 3")
        apply_stage(model, tcfg.stage)

    base = RngKey(model.cfg.seed)
    params = model.parameters()
    optimizer = AdamW(params, tcfg.optimizer, max(1, tcfg.steps))
    rows: list[dict] = []
    for step in range(tcfg.steps):
        batch = task.sample_batch(base.child(_DATA_DOMAIN, step))
        result = compute_loss(model, batch, base.child(_ALLOC_DOMAIN, step), tcfg.aux_weight)
        T.zero_grads(params)
        T.backward(result.total)
        lr = optimizer.step(step)
        rows.append(_metrics_row(step, lr, result))

    final_batch = task.sample_batch(base.child(_DATA_DOMAIN, tcfg.steps))
    final = compute_loss(model, final_batch, base.child(_ALLOC_DOMAIN, tcfg.steps), tcfg.aux_weight)
    rows.append(_metrics_row(tcfg.steps, learning_rate_at(tcfg.optimizer, tcfg.steps, max(1, tcfg.steps)), final))

    checkpoint_path: Path | None = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        _write_jsonl(out / "metrics.jsonl", rows)
        _write_jsonl(
            out / "telemetry.jsonl",
            [{"step": row["step"], **layer} for row in rows for layer in row["layers"]],
        )
        checkpoint_path = out / "model_final.ckpt"
        ckpt.save_model(model, checkpoint_path)
    return TrainResult(metrics=rows, model=model, checkpoint_path=checkpoint_path)


def _write_jsonl(path: Path, rows: Sequence[dict]) -> None:
    import json

    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
