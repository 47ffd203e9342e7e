"""Multi-task training loop, Adam with warmup, and back translation."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import PairPool, Record, VocabularyMismatchError, check_records
from .decode import DecodeConfig, Model, NoFinishError, decode
from .seeding import derive_seed
from .seq2seq import (ModelConfig, Params, load_checkpoint, make_batch, save_checkpoint,
                      sequence_loss_value)
from .tokencore import Modality, Vocabulary, all_directions, direction_name


class ConfigError(ValueError):
    pass


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    total_steps: int = 5000
    per_task_batch: int = 16
    peak_lr: float = 1e-4
    warmup_steps: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float = 1.0
    seed: int = 0
    log_every: int = 100
    ckpt_every: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if self.total_steps and self.warmup_steps >= self.total_steps:
            raise ConfigError(f"warmup_steps={self.warmup_steps} must be below total_steps={self.total_steps}")
        if self.peak_lr <= 0 or self.per_task_batch < 1 or self.warmup_steps < 1:
            raise ConfigError("learning rate, batch size and warmup must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``peak_lr``, then inverse square-root decay."""
    if step < 1:
        raise ValueError("steps are counted from 1")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    return cfg.peak_lr * math.sqrt(cfg.warmup_steps / step)


@dataclass
class AdamState:
    m: dict[str, torch.Tensor] = field(default_factory=dict)
    v: dict[str, torch.Tensor] = field(default_factory=dict)
    t: int = 0


def clip_grads(grads: dict[str, torch.Tensor], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= ``max_norm``; returns the original norm."""
    for name, g in grads.items():
        if not bool(torch.isfinite(g).all()):
            raise NonFiniteGradientError(f"non-finite gradient in tensor {name!r}")
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g.mul_(scale)
    return norm


def adam_step(params: Params, grads: dict[str, torch.Tensor], state: AdamState, lr: float,
              cfg: TrainConfig) -> tuple[Params, AdamState]:
    """One bias-corrected Adam update after global-norm clipping (in place)."""
    clip_grads(grads, cfg.grad_clip)
    state.t += 1
    c1 = 1 - cfg.beta1 ** state.t
    c2 = 1 - cfg.beta2 ** state.t
    with torch.no_grad():
        for name, p in params.items():
            g = grads[name]
            m = state.m.setdefault(name, torch.zeros_like(p))
            v = state.v.setdefault(name, torch.zeros_like(p))
            m.mul_(cfg.beta1).add_(g, alpha=1 - cfg.beta1)
            v.mul_(cfg.beta2).addcmul_(g, g, value=1 - cfg.beta2)
            p.sub_(lr * (m / c1) / (torch.sqrt(v / c2) + cfg.eps))
    return params, state


class BatchSampler:
    """Independent seeded stream of minibatches for each direction."""

    def __init__(self, pool: PairPool, batch: int, seed: int):
        self.pool = pool
        self.batch = batch
        self.rngs = {d: np.random.default_rng(derive_seed(seed, f"batch:{direction_name(*d)}"))
                     for d in all_directions()}

    def sample(self, direction):
        pairs = self.pool.pairs[direction]
        if not pairs:
            raise ValueError(f"no training pairs for direction {direction_name(*direction)}")
        idx = self.rngs[direction].integers(len(pairs), size=self.batch)
        return make_batch([(pairs[i][1], pairs[i][2]) for i in idx])


@dataclass
class TrainResult:
    params: Params
    log: list[str]
    checkpoints: list[Path]
    losses: list[dict[str, float]]


def _leaves(params: Params, dtype) -> Params:
    return {k: v.detach().to(dtype).clone().requires_grad_(True) for k, v in params.items()}


def step_losses(params: Params, cfg: ModelConfig, batches: dict, active) -> tuple[torch.Tensor, dict]:
    """Summed loss over ``active`` directions (fixed order) and the per-direction values."""
    parts = {d: sequence_loss_value(params, cfg, batches[d]) for d in active}
    total = None
    for d in active:
        total = parts[d] if total is None else total + parts[d]
    return total, parts


def train(params: Params, model_cfg: ModelConfig, pool: PairPool, cfg: TrainConfig,
          out_dir: str | Path | None = None, directions=None, resume: str | Path | None = None,
          progress=None) -> TrainResult:
    """Run ``cfg.total_steps`` updates; each step draws one batch per direction.

    ``directions`` defaults to all six ordered pairs; passing a single pair
    gives the single-task baseline with an identical loop.
    """
    directions = list(directions or all_directions())
    for k, m in directions:
        if k == m:
            raise ValueError(f"direction {direction_name(k, m)} maps a modality onto itself")
    if len(pool) == 0:
        raise ValueError("training corpus is empty")
    if resume is not None:
        ck_cfg, params, _ = load_checkpoint(resume)
        if ck_cfg != model_cfg:
            raise ConfigError(f"checkpoint {resume} was trained with a different model config")
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    dtype = cfg.torch_dtype
    p = _leaves(params, dtype)
    state = AdamState()
    sampler = BatchSampler(pool, cfg.per_task_batch, cfg.seed)
    log: list[str] = []
    losses: list[dict[str, float]] = []
    ckpts: list[Path] = []
    if cfg.total_steps == 0 and out is not None:
        ckpts.append(out / "ckpt_0.tmt")
        save_checkpoint(ckpts[-1], model_cfg, params)
    for step in range(1, cfg.total_steps + 1):
        batches = {d: sampler.sample(d) for d in directions}
        total, parts = step_losses(p, model_cfg, batches, directions)
        grads = dict(zip(p, torch.autograd.grad(total, list(p.values()), allow_unused=True)))
        grads = {k: (g if g is not None else torch.zeros_like(p[k])) for k, g in grads.items()}
        lr = lr_at(step, cfg)
        with torch.no_grad():
            adam_step(p, grads, state, lr, cfg)
        values = {direction_name(*d): float(parts[d].detach()) for d in directions}
        losses.append(values)
        if step == 1 or step % cfg.log_every == 0 or step == cfg.total_steps:
            for name, val in values.items():
                log.append(f"step={step} dir={name} loss={val:.6f} lr={lr:.6e}")
            if progress:
                progress(step, values)
        if out is not None and ((cfg.ckpt_every and step % cfg.ckpt_every == 0) or step == cfg.total_steps):
            ckpts.append(out / f"ckpt_{step}.tmt")
            save_checkpoint(ckpts[-1], model_cfg, p, {"step": step})
    if out is not None:
        (out / "metrics.log").write_text("".join(line + "\n" for line in log), encoding="ascii")
    if cfg.total_steps == 0:
        return TrainResult({k: v.detach().clone() for k, v in params.items()}, log, ckpts, losses)
    final = {k: v.detach().to(torch.float64) for k, v in p.items()}
    return TrainResult(final, log, ckpts, losses)


def single_task_train(params: Params, model_cfg: ModelConfig, pool: PairPool, direction,
                      cfg: TrainConfig, out_dir=None, progress=None) -> TrainResult:
    k, m = direction
    if k == m:
        raise ValueError(f"direction {direction_name(k, m)} maps a modality onto itself")
    return train(params, model_cfg, pool, cfg, out_dir, directions=[direction], progress=progress)


# ---------------------------------------------------------------- back translation

@dataclass(frozen=True)
class BtConfig:
    source_modalities: tuple[Modality, ...] = (Modality.IMAGE, Modality.SPEECH)
    decode_mode: str = "greedy"
    continue_peak_lr: float = 5e-5

    def __post_init__(self):
        if self.decode_mode not in ("greedy", "beam"):
            raise ConfigError(f"decode_mode must be greedy or beam, got {self.decode_mode}")


@dataclass
class BtResult:
    records: list[Record]
    attempted: int
    skipped: int

    @property
    def emitted(self) -> int:
        return len(self.records) // 2

    def summary(self) -> str:
        return f"attempted={self.attempted} emitted={self.emitted} skipped={self.skipped}"


def back_translate(model: Model, targets: Sequence[Record], bt_cfg: BtConfig,
                   dcfg: DecodeConfig | None = None) -> BtResult:
    """Translate real target-only sequences into pseudo sources.

    Each emitted example is two records sharing an id ``bt-<id>-<k>``: the
    pseudo source first, then the real target.
    """
    dcfg = dcfg or DecodeConfig()
    records: list[Record] = []
    attempted = skipped = 0
    for ex_id, tgt_seq in targets:
        for k in bt_cfg.source_modalities:
            if k == tgt_seq.modality:
                raise ValueError(f"pseudo source {k.name} equals target modality")
            attempted += 1
            try:
                hyp = decode(model, tgt_seq, k, dcfg, bt_cfg.decode_mode)
            except NoFinishError:
                skipped += 1
                continue
            pseudo = hyp.to_sequence(k)
            if not pseudo.tokens:
                skipped += 1
                continue
            bt_id = f"bt-{ex_id}-{k.letter}"
            records.append((bt_id, pseudo))
            records.append((bt_id, tgt_seq))
    return BtResult(records, attempted, skipped)


def continue_training(params: Params, model_cfg: ModelConfig, vocab: Vocabulary,
                      real: Sequence[Record], pseudo: Sequence[Record], cfg: TrainConfig,
                      bt_cfg: BtConfig = BtConfig(), out_dir=None, progress=None) -> TrainResult:
    """Further training on real plus pseudo pairs at the reduced peak rate."""
    if model_cfg.vocab_total != vocab.total:
        raise ConfigError("model and corpus vocabularies differ")
    try:
        check_records(real, vocab)
        check_records(pseudo, vocab)
    except VocabularyMismatchError as exc:
        raise ConfigError(str(exc)) from None
    pool = PairPool.from_records(list(real) + list(pseudo))
    return train(params, model_cfg, pool, replace(cfg, peak_lr=bt_cfg.continue_peak_lr), out_dir,
                 progress=progress)


def heldout_loss(params: Params, model_cfg: ModelConfig, pool: PairPool, direction,
                 batch: int = 64) -> float:
    """Token-weighted mean NLL of all pairs of one direction."""
    from .seq2seq import token_nll
    pairs = pool.pairs[direction]
    total, count = 0.0, 0
    with torch.no_grad():
        for lo in range(0, len(pairs), batch):
            b = make_batch([(s, t) for _, s, t in pairs[lo:lo + batch]])
            nll, mask = token_nll(params, model_cfg, b)
            total += float(nll.sum())
            count += int(mask.sum())
    return total / max(count, 1)


# ---------------------------------------------------------------- key=value configs

def parse_kv(text: str, allowed: set[str]) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in allowed:
            raise ConfigError(f"line {lineno}: unknown key {k!r}")
        out[k] = v
    return out


def train_config_from_kv(kv: dict[str, str], base: TrainConfig = TrainConfig()) -> TrainConfig:
    types = {f.name: type(getattr(base, f.name)) for f in fields(TrainConfig)}
    unknown = set(kv) - set(types)
    if unknown:
        raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
    return replace(base, **{k: types[k](v) for k, v in kv.items()})
