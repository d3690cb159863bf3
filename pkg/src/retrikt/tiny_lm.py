"""Decoder-only generator with per-layer soft-prompt injection and nucleus sampling.

The base transformer is pretrained once on in-domain text and then frozen; the only
trainable generator parameters afterwards are the per-layer prompt vectors, which
replace the hidden states of the first `prompt_length` positions at the input of
every block.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .checkpoints import load_tensors, save_tensors
from .vocab import EOS_ID, PAD_ID

VIEW_TAGS = ("input_view", "output_view")


class SequenceOverflowError(ValueError):
    pass


@dataclass(frozen=True)
class LmConfig:
    num_layers: int = 4
    hidden_dim: int = 128
    num_heads: int = 4
    vocab_size: int = 1024
    max_seq_len: int = 128

    def __post_init__(self):
        if min(self.num_layers, self.hidden_dim, self.num_heads, self.vocab_size, self.max_seq_len) < 1:
            raise ValueError("all LmConfig dimensions must be positive")
        if self.hidden_dim % self.num_heads != 0:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")


class SoftPrompt(nn.Module):
    """Trainable per-layer prompt block of shape [num_layers, prompt_length, hidden_dim]."""

    def __init__(
        self,
        num_layers: int,
        prompt_length: int,
        hidden_dim: int,
        view_tag: str,
        init_std: float = 0.02,
        seed: int = 0,
        dtype: torch.dtype = torch.float32,
    ):
        super().__init__()
        if view_tag not in VIEW_TAGS:
            raise ValueError(f"view_tag must be one of {VIEW_TAGS}, got {view_tag!r}")
        if prompt_length < 1:
            raise ValueError("prompt_length must be positive")
        self.view_tag = view_tag
        gen = torch.Generator().manual_seed(seed)
        vecs = torch.empty(num_layers, prompt_length, hidden_dim).normal_(0.0, init_std, generator=gen)
        self.vectors = nn.Parameter(vecs.to(dtype))

    @property
    def num_layers(self) -> int:
        return self.vectors.shape[0]

    @property
    def prompt_length(self) -> int:
        return self.vectors.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.vectors.shape[2]

    def clone(self) -> "SoftPrompt":
        dup = SoftPrompt(self.num_layers, self.prompt_length, self.hidden_dim, self.view_tag, dtype=self.vectors.dtype)
        with torch.no_grad():
            dup.vectors.copy_(self.vectors)
        return dup


class Block(nn.Module):
    """Pre-norm transformer block; the additive attention bias decides causal/padding."""

    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.ln1 = nn.LayerNorm(dim)
        self.attn_qkv = nn.Linear(dim, 3 * dim)
        self.attn_proj = nn.Linear(dim, dim)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp_fc1 = nn.Linear(dim, 4 * dim)
        self.mlp_fc2 = nn.Linear(4 * dim, dim)
        self.act = nn.GELU()

    def forward(self, x: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        h = self.ln1(x)
        qkv = self.attn_qkv(h).view(b, s, 3, self.num_heads, self.head_dim).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim) + bias
        att = torch.softmax(scores, dim=-1)
        ctx = (att @ v).transpose(1, 2).reshape(b, s, d)
        x = x + self.attn_proj(ctx)
        x = x + self.mlp_fc2(self.act(self.mlp_fc1(self.ln2(x))))
        return x


def _init_weights(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Embedding):
        nn.init.normal_(module.weight, mean=0.0, std=0.02)


@dataclass
class LmForward:
    logits: torch.Tensor  # [B, T, vocab] at token positions only
    final: torch.Tensor  # [B, T, hidden] post final layer norm, token positions only
    hiddens: list[torch.Tensor] | None = None  # per-layer block inputs (prompt replaced) + raw final


class PromptedLm(nn.Module):
    def __init__(self, cfg: LmConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.cfg = cfg
        self.tok_emb = nn.Embedding(cfg.vocab_size, cfg.hidden_dim)
        self.pos_emb = nn.Embedding(cfg.max_seq_len, cfg.hidden_dim)
        self.blocks = nn.ModuleList(Block(cfg.hidden_dim, cfg.num_heads) for _ in range(cfg.num_layers))
        self.ln_f = nn.LayerNorm(cfg.hidden_dim)
        self.head = nn.Linear(cfg.hidden_dim, cfg.vocab_size, bias=False)
        self.apply(_init_weights)
        self.to(dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.tok_emb.weight.dtype

    def embed(self, tokens: torch.Tensor) -> torch.Tensor:
        """Input embedding of a token: word embedding plus learned position embedding.

        Token positions are indexed from 0 whether or not a prompt is prepended, so
        the frozen base sees the same geometry it was pretrained with."""
        t = tokens.shape[1]
        pos = torch.arange(t, device=tokens.device)
        return self.tok_emb(tokens) + self.pos_emb(pos)[None, :, :]

    def _attn_bias(self, batch: int, k: int, t: int, pad_mask: torch.Tensor | None) -> torch.Tensor:
        s = k + t
        neg = torch.finfo(self.dtype).min
        causal = torch.ones(s, s, dtype=torch.bool).tril()
        bias = torch.zeros(1, 1, s, s, dtype=self.dtype).masked_fill(~causal, neg)
        if pad_mask is not None:
            key_ok = torch.cat([torch.ones(batch, k, dtype=torch.bool), pad_mask.bool()], dim=1)
            bias = bias.expand(batch, 1, s, s).clone()
            bias.masked_fill_(~key_ok[:, None, None, :], neg)
        return bias

    def forward(
        self,
        tokens: torch.Tensor,
        prompt: SoftPrompt | None = None,
        pad_mask: torch.Tensor | None = None,
        return_hiddens: bool = False,
    ) -> LmForward:
        if tokens.ndim != 2 or tokens.shape[1] < 1:
            raise ValueError("tokens must be a non-empty [batch, length] tensor")
        b, t = tokens.shape
        k = prompt.prompt_length if prompt is not None else 0
        if k + t > self.cfg.max_seq_len:
            raise SequenceOverflowError(
                f"prompt length {k} + sequence length {t} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if prompt is not None and prompt.num_layers != self.cfg.num_layers:
            raise ValueError("prompt layer count does not match the model")

        bias = self._attn_bias(b, k, t, pad_mask)
        token_states = self.embed(tokens)
        hiddens: list[torch.Tensor] | None = [] if return_hiddens else None
        out = token_states
        for j, block in enumerate(self.blocks):
            if prompt is not None:
                x_in = torch.cat([prompt.vectors[j].unsqueeze(0).expand(b, -1, -1), token_states if j == 0 else out[:, k:]], dim=1)
            else:
                x_in = token_states if j == 0 else out
            if hiddens is not None:
                hiddens.append(x_in)
            out = block(x_in, bias)
        if hiddens is not None:
            hiddens.append(out)
        final = self.ln_f(out[:, k:] if prompt is not None else out)
        logits = self.head(final)
        return LmForward(logits=logits, final=final, hiddens=hiddens)


class ValueHead(nn.Module):
    """Per-position scalar value estimate, zero-initialized."""

    def __init__(self, hidden_dim: int, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.proj = nn.Linear(hidden_dim, 1)
        nn.init.zeros_(self.proj.weight)
        nn.init.zeros_(self.proj.bias)
        self.to(dtype)

    def forward(self, final_states: torch.Tensor) -> torch.Tensor:
        return self.proj(final_states).squeeze(-1)


def freeze_base(model: PromptedLm) -> PromptedLm:
    for p in model.parameters():
        p.requires_grad_(False)
    return model


def base_state_digest(model: PromptedLm) -> str:
    """Fingerprint of all base weights; used to assert bit-stability under tuning."""
    import hashlib

    h = hashlib.sha256()
    for name, tensor in sorted(model.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().numpy().tobytes())
    return h.hexdigest()


def top_p_filter(probs, p: float) -> np.ndarray:
    """Indices of the smallest probability-descending prefix whose cumulative mass
    strictly exceeds p; ties broken by ascending token index. Zero-probability tokens
    are never returned, and if no prefix exceeds p the full support is returned."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must be in (0, 1], got {p}")
    if probs.ndim != 1 or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-6:
        raise ValueError("probs must be a 1-d probability distribution")
    support = np.flatnonzero(probs > 0)
    order = support[np.argsort(-probs[support], kind="stable")]
    csum = np.cumsum(probs[order])
    above = np.flatnonzero(csum > p)
    cut = above[0] if above.size else len(order) - 1
    return order[: cut + 1]


def top_p_mask(probs: torch.Tensor, p: float) -> torch.Tensor:
    """Batched boolean retention mask with the same semantics as top_p_filter."""
    sorted_probs, idx = torch.sort(probs, dim=-1, descending=True, stable=True)
    csum = torch.cumsum(sorted_probs, dim=-1)
    keep = torch.cat([torch.ones_like(csum[:, :1], dtype=torch.bool), csum[:, :-1] <= p], dim=-1)
    keep &= sorted_probs > 0
    mask = torch.zeros_like(keep)
    mask.scatter_(-1, idx, keep)
    return mask


def top_p_sample_step(probs, p: float, generator: torch.Generator) -> int:
    """One nucleus-sampling draw from a distribution (filter, renormalize, sample)."""
    probs_t = torch.as_tensor(np.asarray(probs, dtype=np.float64))
    mask = top_p_mask(probs_t.unsqueeze(0), p)[0]
    filtered = torch.where(mask, probs_t, torch.zeros_like(probs_t))
    filtered = filtered / filtered.sum()
    return int(torch.multinomial(filtered, 1, generator=generator).item())


@dataclass
class GenerationResult:
    tokens: list[int]  # generated ids; trailing EOS included when emitted
    logprobs: np.ndarray  # log p(token) under the full softmax at sampling time
    values: np.ndarray | None = None  # value-head output at each generation step

    @property
    def text_ids(self) -> list[int]:
        return [t for t in self.tokens if t != EOS_ID]


def generate_batch(
    model: PromptedLm,
    prompt: SoftPrompt | None,
    conditions: list[list[int]],
    p: float,
    max_new: int,
    generator: torch.Generator,
    value_head: ValueHead | None = None,
) -> list[GenerationResult]:
    """Nucleus-sample continuations for a batch of equal-length conditions.

    Rows that emit EOS keep stepping with the rest of the batch but are trimmed at
    their first EOS afterwards, so per-row outputs are unaffected by co-batched rows.
    """
    if not conditions:
        return []
    lc = len(conditions[0])
    if lc < 1 or any(len(c) != lc for c in conditions):
        raise ValueError("conditions must be non-empty and equal-length within a batch")
    b = len(conditions)
    tokens = torch.tensor(conditions, dtype=torch.long)
    all_logprobs: list[torch.Tensor] = []
    all_values: list[torch.Tensor] = []
    finished = torch.zeros(b, dtype=torch.bool)

    with torch.no_grad():
        for _ in range(max_new):
            fwd = model(tokens, prompt)
            step_logits = fwd.logits[:, -1].float()
            log_probs = torch.log_softmax(step_logits, dim=-1)
            probs = torch.softmax(step_logits, dim=-1)
            mask = top_p_mask(probs, p)
            filtered = torch.where(mask, probs, torch.zeros_like(probs))
            filtered = filtered / filtered.sum(dim=-1, keepdim=True)
            nxt = torch.multinomial(filtered, 1, generator=generator).squeeze(1)
            all_logprobs.append(log_probs.gather(1, nxt[:, None]).squeeze(1))
            if value_head is not None:
                all_values.append(value_head(fwd.final[:, -1]).float())
            tokens = torch.cat([tokens, nxt[:, None]], dim=1)
            finished |= nxt == EOS_ID
            if bool(finished.all()):
                break

    gen_tokens = tokens[:, lc:].tolist()
    logprob_mat = torch.stack(all_logprobs, dim=1).numpy()
    value_mat = torch.stack(all_values, dim=1).numpy() if all_values else None
    results = []
    for i in range(b):
        row = gen_tokens[i]
        stop = row.index(EOS_ID) + 1 if EOS_ID in row else len(row)
        results.append(
            GenerationResult(
                tokens=row[:stop],
                logprobs=logprob_mat[i, :stop].astype(np.float32),
                values=value_mat[i, :stop].astype(np.float32) if value_mat is not None else None,
            )
        )
    return results


def sample_top_p(
    model: PromptedLm,
    prompt: SoftPrompt | None,
    condition: list[int],
    p: float,
    max_new: int,
    rng_seed: int,
) -> list[int]:
    gen = torch.Generator().manual_seed(rng_seed)
    return generate_batch(model, prompt, [condition], p, max_new, gen)[0].tokens


def sequence_nll(
    model: PromptedLm,
    prompt: SoftPrompt | None,
    condition: list[int],
    target: list[int],
) -> torch.Tensor:
    """Teacher-forced negative log-likelihood summed over all target tokens.

    Gradients reach whatever parameters require them; with a frozen base that is
    exactly the prompt vectors."""
    if not target:
        raise ValueError("target must be non-empty")
    if not condition:
        raise ValueError("condition must be non-empty")
    vocab = model.cfg.vocab_size
    for tok in list(condition) + list(target):
        if not 0 <= tok < vocab:
            raise ValueError(f"token id {tok} outside vocabulary of size {vocab}")
    tokens = torch.tensor([list(condition) + list(target)], dtype=torch.long)
    fwd = model(tokens, prompt)
    lc = len(condition)
    log_probs = torch.log_softmax(fwd.logits[0], dim=-1)
    tgt = torch.tensor(target, dtype=torch.long)
    picked = log_probs[lc - 1 : lc - 1 + len(target)].gather(1, tgt[:, None]).squeeze(1)
    return -picked.sum()


def batched_target_nll(
    model: PromptedLm,
    prompt: SoftPrompt | None,
    conditions: list[list[int]],
    targets: list[list[int]],
) -> torch.Tensor:
    """Per-sample summed target NLL for ragged batches (right-padded internally)."""
    if len(conditions) != len(targets) or not conditions:
        raise ValueError("need matching non-empty condition/target lists")
    b = len(conditions)
    lens_c = [len(c) for c in conditions]
    lens_t = [len(t) for t in targets]
    if min(lens_c) < 1 or min(lens_t) < 1:
        raise ValueError("conditions and targets must be non-empty")
    total = [lc + lt for lc, lt in zip(lens_c, lens_t)]
    width = max(total)
    tokens = torch.full((b, width), PAD_ID, dtype=torch.long)
    for i, (c, t) in enumerate(zip(conditions, targets)):
        tokens[i, : total[i]] = torch.tensor(list(c) + list(t), dtype=torch.long)
    pad_mask = torch.arange(width)[None, :] < torch.tensor(total)[:, None]

    fwd = model(tokens, prompt, pad_mask=pad_mask)
    log_probs = torch.log_softmax(fwd.logits, dim=-1)
    nll = torch.zeros(b, dtype=log_probs.dtype)
    rows = []
    for i in range(b):
        pos = torch.arange(lens_c[i] - 1, lens_c[i] - 1 + lens_t[i])
        tgt = torch.tensor(targets[i], dtype=torch.long)
        rows.append(-log_probs[i, pos].gather(1, tgt[:, None]).sum())
    return torch.stack(rows) if rows else nll


def teacher_forced_stats(
    model: PromptedLm,
    prompt: SoftPrompt | None,
    value_head: ValueHead | None,
    conditions: list[list[int]],
    generated: list[list[int]],
) -> tuple[torch.Tensor, torch.Tensor | None, torch.Tensor]:
    """Recompute per-generated-token log-probs (and values) under current parameters.

    Returns (logprobs [B, Tmax], values [B, Tmax] or None, valid mask [B, Tmax])."""
    b = len(conditions)
    lens_c = [len(c) for c in conditions]
    lens_g = [len(g) for g in generated]
    width = max(lc + lg for lc, lg in zip(lens_c, lens_g))
    tmax = max(lens_g)
    tokens = torch.full((b, width), PAD_ID, dtype=torch.long)
    for i, (c, g) in enumerate(zip(conditions, generated)):
        tokens[i, : lens_c[i] + lens_g[i]] = torch.tensor(list(c) + list(g), dtype=torch.long)
    pad_mask = torch.arange(width)[None, :] < torch.tensor([lc + lg for lc, lg in zip(lens_c, lens_g)])[:, None]

    fwd = model(tokens, prompt, pad_mask=pad_mask)
    log_probs = torch.log_softmax(fwd.logits, dim=-1)
    out_lp = torch.zeros(b, tmax, dtype=log_probs.dtype)
    out_v = torch.zeros(b, tmax, dtype=log_probs.dtype) if value_head is not None else None
    mask = torch.zeros(b, tmax, dtype=torch.bool)
    values_all = value_head(fwd.final) if value_head is not None else None
    for i in range(b):
        pos = torch.arange(lens_c[i] - 1, lens_c[i] - 1 + lens_g[i])
        tgt = torch.tensor(generated[i], dtype=torch.long)
        out_lp[i, : lens_g[i]] = log_probs[i, pos].gather(1, tgt[:, None]).squeeze(1)
        if values_all is not None:
            out_v[i, : lens_g[i]] = values_all[i, pos]
        mask[i, : lens_g[i]] = True
    return out_lp, out_v, mask


def pretrain_base_lm(
    cfg: LmConfig,
    sequences: list[list[int]],
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
) -> PromptedLm:
    """Train a fresh generator on raw in-domain token sequences (next-token objective).

    The caller appends EOS to each sequence beforehand; the returned model is NOT
    frozen yet."""
    if not sequences:
        raise ValueError("need at least one pretraining sequence")
    torch.manual_seed(seed)
    model = PromptedLm(cfg)
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(model.parameters(), lr=lr)
    n = len(sequences)
    for _ in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=n < batch_size)
        batch = [sequences[i] for i in idx]
        width = max(len(s) for s in batch)
        tokens = torch.full((len(batch), width), PAD_ID, dtype=torch.long)
        for i, s in enumerate(batch):
            tokens[i, : len(s)] = torch.tensor(s, dtype=torch.long)
        pad_mask = torch.arange(width)[None, :] < torch.tensor([len(s) for s in batch])[:, None]
        fwd = model(tokens, pad_mask=pad_mask)
        log_probs = torch.log_softmax(fwd.logits[:, :-1], dim=-1)
        tgt = tokens[:, 1:]
        loss_mask = pad_mask[:, 1:]
        nll = -log_probs.gather(2, tgt.unsqueeze(-1)).squeeze(-1)
        loss = (nll * loss_mask).sum() / loss_mask.sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not torch.isfinite(loss):
            raise RuntimeError("pretraining loss became non-finite")
    return model


def save_lm(model: PromptedLm, path) -> None:
    cfg = model.cfg
    meta = {
        "num_layers": cfg.num_layers,
        "hidden_dim": cfg.hidden_dim,
        "num_heads": cfg.num_heads,
        "vocab_size": cfg.vocab_size,
        "max_seq_len": cfg.max_seq_len,
    }
    tensors = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_tensors(path, "lm", meta, tensors)


def load_lm(path) -> PromptedLm:
    """Load a generator checkpoint; the result comes back frozen."""
    meta, tensors = load_tensors(path, expect_kind="lm")
    cfg = LmConfig(**meta)
    model = PromptedLm(cfg)
    model.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    return freeze_base(model)


def save_prompt(prompt: SoftPrompt, path) -> None:
    meta = {
        "num_layers": prompt.num_layers,
        "prompt_length": prompt.prompt_length,
        "hidden_dim": prompt.hidden_dim,
        "view_tag": prompt.view_tag,
    }
    save_tensors(path, "soft_prompt", meta, {"vectors": prompt.vectors.detach().cpu().numpy()})


def load_prompt(path) -> SoftPrompt:
    meta, tensors = load_tensors(path, expect_kind="soft_prompt")
    prompt = SoftPrompt(meta["num_layers"], meta["prompt_length"], meta["hidden_dim"], meta["view_tag"])
    with torch.no_grad():
        prompt.vectors.copy_(torch.from_numpy(tensors["vectors"]))
    return prompt
