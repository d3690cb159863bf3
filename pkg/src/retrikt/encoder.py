"""Bidirectional text encoder shared by the teacher classifier and the students."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoints import load_tensors, save_tensors
from .tiny_lm import Block, _init_weights
from .vocab import PAD_ID, Vocab


@dataclass(frozen=True)
class EncoderConfig:
    num_layers: int
    hidden_dim: int
    num_heads: int
    vocab_size: int
    max_seq_len: int = 64
    num_classes: int = 0  # 0 means no classifier head

    def __post_init__(self):
        if min(self.num_layers, self.hidden_dim, self.num_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all encoder dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.num_classes < 0:
            raise ValueError("num_classes must be >= 0")


class TextEncoder(nn.Module):
    """Token+position embeddings, pre-norm blocks with full attention, mean pooling."""

    def __init__(self, cfg: EncoderConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.num_classes) if cfg.num_classes else None
        self.apply(_init_weights)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def num_params(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def forward(self, tokens: torch.Tensor, pad_mask: torch.Tensor | None = None):
        """Returns (pooled [B, d], logits [B, C] or None)."""
        b, t = tokens.shape
        if t > self.cfg.max_seq_len:
            raise ValueError(f"sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}")
        if pad_mask is None:
            pad_mask = torch.ones(b, t, dtype=torch.bool)
        pos = torch.arange(t)
        x = self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :]
        neg = torch.finfo(self.dtype).min
        bias = torch.zeros(b, 1, t, t, dtype=self.dtype).masked_fill(~pad_mask[:, None, None, :], neg)
        for block in self.blocks:
            x = block(x, bias)
        x = self.ln_f(x)
        denom = pad_mask.sum(dim=1, keepdim=True).clamp(min=1).to(x.dtype)
        pooled = (x * pad_mask[:, :, None].to(x.dtype)).sum(dim=1) / denom
        logits = self.head(pooled) if self.head is not None else None
        return pooled, logits


def encode_batch(vocab: Vocab, texts: list[str], max_len: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Tokenize, truncate and right-pad a batch of texts."""
    ids = [vocab.encode(t)[:max_len] or [PAD_ID] for t in texts]
    width = max(len(r) for r in ids)
    tokens = torch.full((len(ids), width), PAD_ID, dtype=torch.long)
    mask = torch.zeros(len(ids), width, dtype=torch.bool)
    for i, row in enumerate(ids):
        tokens[i, : len(row)] = torch.tensor(row, dtype=torch.long)
        mask[i, : len(row)] = True
    return tokens, mask


def embed_text(model: TextEncoder, vocab: Vocab, text: str) -> np.ndarray:
    """Single-text embedding; a fixed path so repeated calls are bit-identical."""
    with torch.no_grad():
        tokens, mask = encode_batch(vocab, [text], model.cfg.max_seq_len)
        pooled, _ = model(tokens, mask)
    return pooled[0].float().numpy()


def embed_texts(model: TextEncoder, vocab: Vocab, texts: list[str], batch_size: int = 64) -> np.ndarray:
    out = []
    with torch.no_grad():
        for start in range(0, len(texts), batch_size):
            tokens, mask = encode_batch(vocab, texts[start : start + batch_size], model.cfg.max_seq_len)
            pooled, _ = model(tokens, mask)
            out.append(pooled.float().numpy())
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.cfg.hidden_dim), dtype=np.float32)


def logits_for_text(model: TextEncoder, vocab: Vocab, text: str) -> np.ndarray:
    if model.head is None:
        raise ValueError("encoder has no classifier head")
    with torch.no_grad():
        tokens, mask = encode_batch(vocab, [text], model.cfg.max_seq_len)
        _, logits = model(tokens, mask)
    return logits[0].float().numpy()


def save_encoder(model: TextEncoder, path, kind: str, extra_meta: dict | None = None) -> None:
    meta = {
        "num_layers": model.cfg.num_layers,
        "hidden_dim": model.cfg.hidden_dim,
        "num_heads": model.cfg.num_heads,
        "vocab_size": model.cfg.vocab_size,
        "max_seq_len": model.cfg.max_seq_len,
        "num_classes": model.cfg.num_classes,
    }
    if extra_meta:
        meta.update(extra_meta)
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_tensors(path, kind, meta, tensors)


def load_encoder(path, kind: str) -> tuple[TextEncoder, dict]:
    meta, tensors = load_tensors(path, expect_kind=kind)
    cfg = EncoderConfig(
        num_layers=meta["num_layers"],
        hidden_dim=meta["hidden_dim"],
        num_heads=meta["num_heads"],
        vocab_size=meta["vocab_size"],
        max_seq_len=meta["max_seq_len"],
        num_classes=meta["num_classes"],
    )
    model = TextEncoder(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    for p in model.parameters():
        p.requires_grad_(False)
    return model, meta
