"""Shared encoder-decoder over the unified vocabulary.

Parameters live in a flat ``dict[str, Tensor]`` so that checkpoints, the
optimizer and gradient checks all address tensors by name.  Every row of a
batch carries its own source and target modality; the matching modal-type
embedding is added to the encoder inputs (source) and decoder inputs (target).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Sequence

import torch
import torch.nn.functional as F

from .tokencore import BOS, EOS, PAD, Modality, TokenSequence, all_directions

NEG_INF = float("-inf")


class LengthError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_total: int
    d_model: int = 64
    n_heads: int = 4
    ffn_dim: int = 256
    enc_layers: int = 2
    dec_layers: int = 2
    max_len: int = 400
    dropout: float = 0.0
    tie_embeddings: bool = True

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if min(self.vocab_total, self.d_model, self.ffn_dim, self.max_len) < 1:
            raise ValueError("model dimensions must be positive")

    def to_lines(self) -> list[str]:
        return [f"{f.name}={getattr(self, f.name)}" for f in fields(self)]

    @classmethod
    def from_dict(cls, kv: dict[str, str]) -> "ModelConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(known)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        out = {}
        for k, v in kv.items():
            if k == "tie_embeddings":
                out[k] = v.lower() in ("1", "true", "yes")
            elif k == "dropout":
                out[k] = float(v)
            else:
                out[k] = int(v)
        return cls(**out)


def _attn_shapes(prefix: str, d: int) -> list[tuple[str, tuple[int, ...]]]:
    return [(f"{prefix}.{w}", (d, d)) for w in ("wq", "wk", "wv", "wo")] + \
           [(f"{prefix}.{b}", (d,)) for b in ("bq", "bk", "bv", "bo")]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, f = cfg.d_model, cfg.ffn_dim
    shapes = [("tok_emb", (cfg.vocab_total, d)), ("pos_emb", (cfg.max_len, d)), ("type_emb", (3, d))]

    def norm(name):
        return [(f"{name}.g", (d,)), (f"{name}.b", (d,))]

    def ffn(name):
        return [(f"{name}.w1", (d, f)), (f"{name}.b1", (f,)), (f"{name}.w2", (f, d)), (f"{name}.b2", (d,))]

    for i in range(cfg.enc_layers):
        p = f"enc.{i}"
        shapes += norm(f"{p}.ln1") + _attn_shapes(f"{p}.self", d) + norm(f"{p}.ln2") + ffn(f"{p}.ffn")
    shapes += norm("enc.ln")
    for i in range(cfg.dec_layers):
        p = f"dec.{i}"
        shapes += norm(f"{p}.ln1") + _attn_shapes(f"{p}.self", d) + norm(f"{p}.ln2") + \
            _attn_shapes(f"{p}.cross", d) + norm(f"{p}.ln3") + ffn(f"{p}.ffn")
    shapes += norm("dec.ln")
    if not cfg.tie_embeddings:
        shapes.append(("out_proj", (d, cfg.vocab_total)))
    return shapes


Params = dict[str, torch.Tensor]


def init_params(cfg: ModelConfig, seed: int = 0) -> Params:
    gen = torch.Generator().manual_seed(int(seed))
    params = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            t = torch.ones(shape, dtype=torch.float64)
        elif len(shape) == 1:
            t = torch.zeros(shape, dtype=torch.float64)
        else:
            fan_in = shape[0] if name not in ("tok_emb", "pos_emb", "type_emb") else shape[1]
            t = torch.randn(shape, generator=gen, dtype=torch.float64) / math.sqrt(fan_in)
        params[name] = t
    return params


def param_count(params: Params) -> int:
    return sum(t.numel() for t in params.values())


# ---------------------------------------------------------------- forward

def _layer_norm(x, p, name, eps=1e-5):
    return F.layer_norm(x, (x.shape[-1],), p[f"{name}.g"], p[f"{name}.b"], eps)


def _attention(q_in, kv_in, p, name, n_heads, mask, want_weights=False):
    """Multi-head attention; ``mask`` is bool (B, Lq, Lk), True where attending is allowed."""
    b, lq, d = q_in.shape
    lk = kv_in.shape[1]
    hd = d // n_heads
    q = torch.addmm(p[f"{name}.bq"], q_in.reshape(-1, d), p[f"{name}.wq"]).view(b, lq, n_heads, hd).transpose(1, 2)
    k = torch.addmm(p[f"{name}.bk"], kv_in.reshape(-1, d), p[f"{name}.wk"]).view(b, lk, n_heads, hd).transpose(1, 2)
    v = torch.addmm(p[f"{name}.bv"], kv_in.reshape(-1, d), p[f"{name}.wv"]).view(b, lk, n_heads, hd).transpose(1, 2)
    # rows with no admissible key (pad queries) attend uniformly instead of producing NaN
    mask = mask | ~mask.any(-1, keepdim=True)
    weights = None
    if want_weights:
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        weights = torch.softmax(scores.masked_fill(~mask[:, None], NEG_INF), dim=-1)
        out = weights @ v
    else:
        out = F.scaled_dot_product_attention(q, k, v, attn_mask=mask[:, None])
    out = torch.addmm(p[f"{name}.bo"], out.transpose(1, 2).reshape(b * lq, d), p[f"{name}.wo"])
    return out.view(b, lq, d), weights


def _ffn(x, p, name):
    shape = x.shape
    h = torch.relu(torch.addmm(p[f"{name}.b1"], x.reshape(-1, shape[-1]), p[f"{name}.w1"]))
    return torch.addmm(p[f"{name}.b2"], h, p[f"{name}.w2"]).view(shape)


def _embed(p, tokens, modality):
    length = tokens.shape[1]
    return p["tok_emb"][tokens] + p["pos_emb"][:length][None] + p["type_emb"][modality][:, None, :]


def _as_modality_tensor(modality, batch: int) -> torch.Tensor:
    if isinstance(modality, torch.Tensor):
        return modality.long()
    if isinstance(modality, (int, Modality)):
        return torch.full((batch,), int(modality), dtype=torch.long)
    return torch.tensor([int(m) for m in modality], dtype=torch.long)


def encode(p: Params, cfg: ModelConfig, src: torch.Tensor, src_modality,
           attn_out: list | None = None) -> torch.Tensor:
    """Context vectors for a (B, L) padded source batch; pad keys are masked out.

    When ``attn_out`` is a list, each layer's attention weights are appended.
    """
    if src.dim() == 1:
        src = src[None]
    b, length = src.shape
    if length > cfg.max_len:
        raise LengthError(f"source length {length} exceeds max_len {cfg.max_len}")
    keep = src != PAD
    x = _embed(p, src, _as_modality_tensor(src_modality, b))
    mask = keep[:, None, :].expand(b, length, length)
    for i in range(cfg.enc_layers):
        h = _layer_norm(x, p, f"enc.{i}.ln1")
        h, w = _attention(h, h, p, f"enc.{i}.self", cfg.n_heads, mask, attn_out is not None)
        if attn_out is not None:
            attn_out.append(w)
        x = x + h
        x = x + _ffn(_layer_norm(x, p, f"enc.{i}.ln2"), p, f"enc.{i}.ffn")
    return _layer_norm(x, p, "enc.ln")


def decode_logits(p: Params, cfg: ModelConfig, context: torch.Tensor, src_keep: torch.Tensor,
                  tgt_in: torch.Tensor, tgt_modality) -> torch.Tensor:
    """Logits (B, T, V) for every position of a teacher-forced decoder input."""
    b, t = tgt_in.shape
    if t > cfg.max_len:
        raise LengthError(f"target prefix length {t} exceeds max_len {cfg.max_len}")
    x = _embed(p, tgt_in, _as_modality_tensor(tgt_modality, b))
    causal = torch.ones(t, t, dtype=torch.bool).tril()
    self_mask = causal[None] & (tgt_in != PAD)[:, None, :]
    cross_mask = src_keep[:, None, :].expand(b, t, src_keep.shape[1])
    for i in range(cfg.dec_layers):
        h = _layer_norm(x, p, f"dec.{i}.ln1")
        x = x + _attention(h, h, p, f"dec.{i}.self", cfg.n_heads, self_mask)[0]
        h = _layer_norm(x, p, f"dec.{i}.ln2")
        x = x + _attention(h, context, p, f"dec.{i}.cross", cfg.n_heads, cross_mask)[0]
        x = x + _ffn(_layer_norm(x, p, f"dec.{i}.ln3"), p, f"dec.{i}.ffn")
    x = _layer_norm(x, p, "dec.ln")
    out = p["tok_emb"].T if cfg.tie_embeddings else p["out_proj"]
    return x @ out


def decode_step(p: Params, cfg: ModelConfig, context: torch.Tensor, src_keep: torch.Tensor,
                prefix: torch.Tensor, tgt_modality) -> torch.Tensor:
    """Next-token logits (B, V) given prefixes that start with BOS."""
    if prefix.dim() == 1:
        prefix = prefix[None]
    if not bool((prefix[:, 0] == BOS).all()):
        raise ValueError("decoder prefix must start with BOS")
    return decode_logits(p, cfg, context, src_keep, prefix, tgt_modality)[:, -1]


# ---------------------------------------------------------------- batches and losses

@dataclass
class Batch:
    src: torch.Tensor        # (B, S) source ids, PAD=0
    src_modality: torch.Tensor
    tgt: torch.Tensor        # (B, T) BOS ... EOS PAD...
    tgt_modality: torch.Tensor

    @property
    def size(self) -> int:
        return self.src.shape[0]


def _pad(rows: Sequence[Sequence[int]]) -> torch.Tensor:
    width = max(len(r) for r in rows)
    out = torch.full((len(rows), width), PAD, dtype=torch.long)
    for i, r in enumerate(rows):
        out[i, :len(r)] = torch.tensor(list(r), dtype=torch.long)
    return out


def make_batch(pairs: Sequence[tuple[TokenSequence, TokenSequence]]) -> Batch:
    """Collate (source, target) sequence pairs; targets get BOS/EOS framing."""
    if not pairs:
        raise ValueError("empty batch")
    src = _pad([s.tokens for s, _ in pairs])
    tgt = _pad([(BOS, *t.tokens, EOS) for _, t in pairs])
    return Batch(src, torch.tensor([int(s.modality) for s, _ in pairs]),
                 tgt, torch.tensor([int(t.modality) for _, t in pairs]))


def token_nll(p: Params, cfg: ModelConfig, batch: Batch) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-position negative log-likelihood (B, T-1) and the non-pad mask."""
    context = encode(p, cfg, batch.src, batch.src_modality)
    tgt_in, gold = batch.tgt[:, :-1], batch.tgt[:, 1:]
    logits = decode_logits(p, cfg, context, batch.src != PAD, tgt_in, batch.tgt_modality)
    nll = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), gold.reshape(-1),
                          ignore_index=PAD, reduction="none").view(gold.shape)
    return nll, gold != PAD


def sequence_loss_value(p: Params, cfg: ModelConfig, batch: Batch) -> torch.Tensor:
    """Mean gold-token negative log-likelihood over non-pad target positions."""
    nll, mask = token_nll(p, cfg, batch)
    return nll.sum() / mask.sum()


def _with_grads(p: Params, fn) -> tuple[float, dict[str, torch.Tensor]]:
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in p.items()}
    loss = fn(leaves)
    grads = torch.autograd.grad(loss, list(leaves.values()), allow_unused=True)
    out = {k: (g if g is not None else torch.zeros_like(leaves[k])) for k, g in zip(leaves, grads)}
    return float(loss.detach()), out


def sequence_loss(p: Params, cfg: ModelConfig, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(p, lambda q: sequence_loss_value(q, cfg, batch))


def check_six(batches: dict) -> None:
    want = set(all_directions())
    got = list(batches)
    if len(got) != 6 or set(got) != want:
        missing = sorted(want - set(got))
        raise ValueError(f"need one batch per ordered modality pair; missing {missing}, got {len(got)}")


def tmt_loss_value(p: Params, cfg: ModelConfig, batches: dict) -> tuple[torch.Tensor, dict]:
    """Sum of the six per-direction losses, in fixed direction order."""
    check_six(batches)
    parts = {d: sequence_loss_value(p, cfg, batches[d]) for d in all_directions()}
    total = parts[all_directions()[0]]
    for d in all_directions()[1:]:
        total = total + parts[d]
    return total, parts


def tmt_loss(p: Params, cfg: ModelConfig, batches: dict) -> tuple[float, dict[str, torch.Tensor]]:
    return _with_grads(p, lambda q: tmt_loss_value(q, cfg, batches)[0])


# ---------------------------------------------------------------- checkpoints

CKPT_VERSION = 1


def save_checkpoint(path: str | Path, cfg: ModelConfig, params: Params, extra: dict | None = None) -> None:
    chunks = [f"TMTCKPT {CKPT_VERSION}\n".encode("ascii")]
    for line in cfg.to_lines():
        chunks.append(f"{line}\n".encode("ascii"))
    for k, v in (extra or {}).items():
        chunks.append(f"meta.{k}={v}\n".encode("ascii"))
    chunks.append(b"tensors\n")
    for name, _ in param_shapes(cfg):
        t = params[name].detach().to(torch.float64).contiguous()
        dims = " ".join(str(s) for s in t.shape)
        chunks.append(f"{name} {t.dim()} {dims}\n".encode("ascii"))
        chunks.append(t.numpy().astype("<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[ModelConfig, Params, dict[str, str]]:
    data = Path(path).read_bytes()
    pos = 0

    def line():
        nonlocal pos
        nl = data.index(b"\n", pos)
        out = data[pos:nl].decode("ascii")
        pos = nl + 1
        return out

    head = line().split()
    if head[:1] != ["TMTCKPT"] or int(head[1]) != CKPT_VERSION:
        raise ValueError(f"{path}: not a version-{CKPT_VERSION} checkpoint")
    kv, meta = {}, {}
    while (ln := line()) != "tensors":
        k, v = ln.split("=", 1)
        if k.startswith("meta."):
            meta[k[5:]] = v
        else:
            kv[k] = v
    cfg = ModelConfig.from_dict(kv)
    params = {}
    for name, shape in param_shapes(cfg):
        fields_ = line().split()
        if fields_[0] != name:
            raise ValueError(f"{path}: expected tensor {name}, found {fields_[0]}")
        dims = tuple(int(x) for x in fields_[2:])
        if dims != shape:
            raise ValueError(f"{path}: tensor {name} has shape {dims}, config implies {shape}")
        n = math.prod(dims) * 8
        arr = torch.frombuffer(bytearray(data[pos:pos + n]), dtype=torch.float64).reshape(dims)
        pos += n
        params[name] = arr.clone()
    return cfg, params, meta
