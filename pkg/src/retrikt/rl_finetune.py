"""Composite reward (accuracy + diversity + length penalty) and PPO prompt tuning.

Rollouts are generated with nucleus sampling under the current prompt policy, scored
once at the terminal token with the composite reward, shaped per token by an
adaptively-weighted KL penalty against the frozen supervised prompt, and optimized
with the clipped surrogate plus a value head and a supervised-loss anchor.
"""

from __future__ import annotations

import math
from collections import Counter
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .data_core import LabeledSample, TaskSpec
from .knowledge_store import generate_for_conditions, parse_generated
from .prompt_tuning import (
    build_generation_samples,
    input_condition_string,
    output_condition_string,
    supervised_loss,
)
from .seeding import derive_seed
from .tiny_lm import PromptedLm, SoftPrompt, ValueHead, teacher_forced_stats
from .vocab import Vocab, tokenize

BLEU_EPS = 1e-9
KL_HORIZON = 2000.0


def length_penalty(length: int, l_min: int) -> float:
    """1 at or above the threshold, exp(1 - l_min/length) below it."""
    if length < 1:
        raise ValueError("length must be >= 1")
    if l_min < 1:
        raise ValueError("l_min must be >= 1")
    if length >= l_min:
        return 1.0
    return math.exp(1.0 - l_min / length)


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def closest_reference_length(candidate_len: int, ref_lens: Sequence[int]) -> int:
    """Standard effective reference length: closest to the candidate, ties -> shorter."""
    return min(ref_lens, key=lambda r: (abs(r - candidate_len), r))


def self_bleu3(sample: Sequence, references: Sequence[Sequence]) -> float:
    """BLEU-3 of one token sequence against co-generated references.

    Geometric mean of modified 1..3-gram precisions times the standard brevity
    penalty. Zero match counts are floored at eps; n-gram orders the sample is too
    short to produce are skipped (effective-order convention)."""
    sample = list(sample)
    if not sample:
        return 0.0
    references = [list(r) for r in references]
    if not references:
        raise ValueError("references must be non-empty")

    log_precisions = []
    for n in (1, 2, 3):
        total = len(sample) - n + 1
        if total <= 0:
            continue
        cand = _ngrams(sample, n)
        max_ref: Counter = Counter()
        for ref in references:
            for gram, count in _ngrams(ref, n).items():
                if count > max_ref[gram]:
                    max_ref[gram] = count
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand.items())
        p = clipped / total if clipped > 0 else BLEU_EPS / total
        log_precisions.append(math.log(p))

    c = len(sample)
    r = closest_reference_length(c, [len(ref) for ref in references])
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * math.exp(sum(log_precisions) / len(log_precisions))


def mean_self_bleu3(token_lists: Sequence[Sequence], cap: int = 1000, seed: int = 0) -> float:
    """Mean of self_bleu3 of each sequence against all the others.

    For tractability at most cap sequences are scored (fixed-seed subsample); the
    reference side then also uses only the sampled set. Uses max/second-max n-gram
    tables so the corpus pass is linear instead of quadratic, and matches a direct
    per-sample loop exactly."""
    if len(token_lists) < 2:
        raise ValueError("need at least two sequences for self-BLEU")
    token_lists = [list(t) for t in token_lists]
    if len(token_lists) > cap:
        rng = np.random.default_rng(seed)
        idx = np.sort(rng.choice(len(token_lists), size=cap, replace=False))
        token_lists = [token_lists[i] for i in idx]

    per_text_counts = []
    best: list[dict] = []
    for n in (1, 2, 3):
        counts = [_ngrams(t, n) for t in token_lists]
        per_text_counts.append(counts)
        table: dict = {}
        for i, cnt in enumerate(counts):
            for gram, c in cnt.items():
                top, top_owner, top_ties, second = table.get(gram, (0, -1, 0, 0))
                if c > top:
                    table[gram] = (c, i, 1, top)
                elif c == top:
                    table[gram] = (top, top_owner, top_ties + 1, top)
                elif c > second:
                    table[gram] = (top, top_owner, top_ties, c)
        best.append(table)

    lens = [len(t) for t in token_lists]
    len_counter = Counter(lens)
    sorted_unique = sorted(len_counter)

    def closest_excluding(i: int) -> int:
        c = lens[i]
        if len_counter[c] >= 2:
            return c
        candidates = [v for v in sorted_unique if v != c]
        return min(candidates, key=lambda r: (abs(r - c), r))

    scores = []
    for i, sample in enumerate(token_lists):
        if not sample:
            scores.append(0.0)
            continue
        log_precisions = []
        for order_idx, n in enumerate((1, 2, 3)):
            total = len(sample) - n + 1
            if total <= 0:
                continue
            clipped = 0
            for gram, count in per_text_counts[order_idx][i].items():
                top, top_owner, top_ties, second = best[order_idx][gram]
                other_max = top if (top_owner != i or top_ties > 1) else second
                clipped += min(count, other_max)
            p = clipped / total if clipped > 0 else BLEU_EPS / total
            log_precisions.append(math.log(p))
        c = len(sample)
        r = closest_excluding(i)
        bp = 1.0 if c >= r else math.exp(1.0 - r / c)
        scores.append(bp * math.exp(sum(log_precisions) / len(log_precisions)))
    return float(np.mean(scores))


@dataclass(frozen=True)
class RewardBreakdown:
    r_accuracy: float
    r_diversity: float
    brevity: float
    total: float
    parse_failed: bool = False

    def check_identity(self, alpha: float, atol: float = 1e-9) -> bool:
        return abs(self.total - (self.r_accuracy + alpha * self.r_diversity) * self.brevity) <= atol


def compute_reward(
    generated: Sequence[int],
    other_texts: Sequence[Sequence[str]],
    rm,
    vocab: Vocab,
    spec: TaskSpec,
    alpha: float,
    l_min: int,
    use_accuracy: bool = True,
    use_diversity: bool = True,
    use_bp: bool = True,
) -> RewardBreakdown:
    """Composite reward for one generated (label, text) sequence.

    other_texts are the token lists of the co-generated batch (the sample itself
    excluded). Unparseable generations earn total 0 with the parse flag set. The
    use_* switches implement the ablations: a disabled term is logged as its
    neutral value so the composition identity still holds."""
    parsed = parse_generated(generated, vocab, spec)
    if parsed is None:
        return RewardBreakdown(0.0, 0.0, 1.0, 0.0, parse_failed=True)
    label_text, text = parsed
    text_tokens = tokenize(text)

    r_acc = 0.0
    if use_accuracy:
        r_acc = float(rm.predict_dist(text)[spec.class_of(label_text)])
    r_div = 0.0
    if use_diversity:
        b3 = self_bleu3(text_tokens, other_texts) if other_texts else 0.0
        r_div = 1.0 - b3
    bp = length_penalty(len(text_tokens), l_min) if use_bp else 1.0
    total = (r_acc + alpha * r_div) * bp
    return RewardBreakdown(r_acc, r_div, bp, total)


def gae_advantages(
    rewards: np.ndarray, values: np.ndarray, discount: float, lam: float
) -> tuple[np.ndarray, np.ndarray]:
    """Generalized advantage estimates. values carries one bootstrap entry more than
    rewards; returns (advantages, returns) with returns = advantages + values[:-1]."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != rewards.shape[0] + 1:
        raise ValueError(f"values must have len(rewards)+1 entries, got {values.shape[0]} vs {rewards.shape[0]}")
    t = rewards.shape[0]
    advantages = np.zeros(t, dtype=np.float64)
    last = 0.0
    for i in reversed(range(t)):
        delta = rewards[i] + discount * values[i + 1] - values[i]
        last = delta + discount * lam * last
        advantages[i] = last
    return advantages, advantages + values[:-1]


class AdaptiveKlController:
    """Multiplicative controller steering the measured per-sequence KL toward a target."""

    def __init__(self, init_coeff: float, target: float, horizon: float = KL_HORIZON):
        if init_coeff < 0 or target <= 0 or horizon <= 0:
            raise ValueError("need init_coeff >= 0, target > 0, horizon > 0")
        self.coeff = init_coeff
        self.target = target
        self.horizon = horizon

    def update(self, measured_kl: float, n_steps: int) -> None:
        error = float(np.clip(measured_kl / self.target - 1.0, -0.2, 0.2))
        self.coeff *= 1.0 + error * n_steps / self.horizon


@dataclass(frozen=True)
class PpoConfig:
    lr: float = 2e-3
    batch_size: int = 32
    mini_batch_size: int = 8
    epochs: int = 20
    ppo_epochs: int = 4
    samples_per_prompt: int = 4
    init_kl_coeff: float = 0.001
    target_kl: float = 6.0
    vf_coeff: float = 0.5
    clip_ratio: float = 0.2
    discount: float = 0.99
    gae_lambda: float = 0.95
    beta: float = 1.0
    alpha: float = 0.2
    l_min: int = 8

    def __post_init__(self):
        if not 0.0 < self.clip_ratio < 1.0:
            raise ValueError("clip_ratio must be in (0, 1)")
        if not 0.0 < self.discount <= 1.0 or not 0.0 < self.gae_lambda <= 1.0:
            raise ValueError("discount and gae_lambda must be in (0, 1]")
        positive = (
            self.lr, self.batch_size, self.mini_batch_size, self.ppo_epochs,
            self.samples_per_prompt, self.init_kl_coeff, self.target_kl, self.vf_coeff,
            self.beta, self.alpha, self.l_min,
        )
        if any(v <= 0 for v in positive):
            raise ValueError("all PPO hyperparameters must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size % self.samples_per_prompt != 0:
            raise ValueError("batch_size must be a multiple of samples_per_prompt")
        if self.mini_batch_size > self.batch_size:
            raise ValueError("mini_batch_size cannot exceed batch_size")


@dataclass
class Rollout:
    condition: list[int]
    tokens: list[int]
    logprobs: np.ndarray  # behavior-policy log-probs, one per generated token
    values: np.ndarray  # value estimates, one per generated token
    reward: RewardBreakdown
    kl_to_ref: float = 0.0
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __post_init__(self):
        if len(self.logprobs) != len(self.tokens) or len(self.values) != len(self.tokens):
            raise ValueError("log-prob and value arrays must match the generated length")


@dataclass
class PpoLosses:
    policy: torch.Tensor
    value: torch.Tensor
    combined: torch.Tensor


def ppo_losses(
    new_logprobs: torch.Tensor,
    old_logprobs: torch.Tensor,
    advantages: torch.Tensor,
    new_values: torch.Tensor,
    returns: torch.Tensor,
    config: PpoConfig,
    sft_loss: torch.Tensor | None = None,
) -> PpoLosses:
    """Clipped surrogate + value MSE + supervised anchor, all over flat token tensors."""
    ratio = torch.exp(new_logprobs - old_logprobs)
    if not torch.isfinite(ratio).all():
        bad = (~torch.isfinite(ratio)).nonzero()[:4].flatten().tolist()
        raise RuntimeError(f"non-finite PPO ratio at token indices {bad}")
    unclipped = ratio * advantages
    clipped = torch.clamp(ratio, 1.0 - config.clip_ratio, 1.0 + config.clip_ratio) * advantages
    policy = -torch.minimum(unclipped, clipped).mean()
    value = torch.mean((new_values - returns) ** 2)
    combined = policy + config.vf_coeff * value
    if sft_loss is not None:
        combined = combined + config.beta * sft_loss
    return PpoLosses(policy=policy, value=value, combined=combined)


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    mean_r_accuracy: float
    mean_r_diversity: float
    mean_bp: float
    mean_total: float
    mean_kl: float


def save_rl_log(rows: Sequence[EpochLog], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_r_accuracy,mean_r_diversity,mean_bp,mean_total,mean_kl\n")
        for r in rows:
            fh.write(
                f"{r.epoch},{r.mean_r_accuracy:.6f},{r.mean_r_diversity:.6f},"
                f"{r.mean_bp:.6f},{r.mean_total:.6f},{r.mean_kl:.6f}\n"
            )


def rl_finetune_prompts(
    model: PromptedLm,
    prompt: SoftPrompt,
    dataset: Sequence[LabeledSample],
    rm,
    config: PpoConfig,
    seed: int,
    vocab: Vocab,
    spec: TaskSpec,
    max_new: int = 32,
    top_p: float = 0.9,
    use_accuracy: bool = True,
    use_diversity: bool = True,
    use_bp: bool = True,
) -> tuple[SoftPrompt, list[EpochLog]]:
    """PPO over the prompt vectors and a fresh value head; the base stays frozen.

    The incoming prompt doubles as the initial policy and (via a frozen clone) the
    KL reference. Conditions come from the dataset: keywords for the input view,
    verbalized labels for the output view."""
    if any(p.requires_grad for p in model.parameters()):
        raise ValueError("base model must be frozen before RL tuning")
    view = prompt.view_tag
    ref_prompt = prompt.clone()
    ref_prompt.vectors.requires_grad_(False)
    value_head = ValueHead(model.cfg.hidden_dim)
    opt = torch.optim.Adam(list(prompt.parameters()) + list(value_head.parameters()), lr=config.lr)
    kl_ctl = AdaptiveKlController(config.init_kl_coeff, config.target_kl)
    sft_pool = build_generation_samples(dataset, view, vocab, spec)
    rng = np.random.default_rng(derive_seed(seed, "ppo", view))
    n_conditions = config.batch_size // config.samples_per_prompt
    logs: list[EpochLog] = []

    for epoch in range(config.epochs):
        # ---- collect rollouts under the current policy ----
        chosen = rng.choice(len(dataset), size=n_conditions, replace=len(dataset) < n_conditions)
        conditions = []
        for ci in chosen:
            s = dataset[int(ci)]
            cond_str = (
                input_condition_string(s.keywords) if view == "input_view" else output_condition_string(s.label_text)
            )
            conditions.append(vocab.encode(cond_str))
        gen = torch.Generator().manual_seed(derive_seed(seed, "rollout", view, epoch))
        with torch.no_grad():
            results = generate_for_conditions(
                model, prompt, conditions, config.samples_per_prompt, top_p, max_new, gen, value_head
            )
        roll_conditions = [conditions[i // config.samples_per_prompt] for i in range(len(results))]

        parsed_texts: list[list[str] | None] = []
        for res in results:
            parsed = parse_generated(res.tokens, vocab, spec)
            parsed_texts.append(tokenize(parsed[1]) if parsed else None)

        rollouts: list[Rollout] = []
        for i, res in enumerate(results):
            others = [t for j, t in enumerate(parsed_texts) if j != i and t is not None]
            breakdown = compute_reward(
                res.tokens, others, rm, vocab, spec, config.alpha, config.l_min,
                use_accuracy=use_accuracy, use_diversity=use_diversity, use_bp=use_bp,
            )
            if not math.isfinite(breakdown.total):
                raise RuntimeError(f"reward became non-finite at epoch {epoch}")
            rollouts.append(
                Rollout(
                    condition=roll_conditions[i],
                    tokens=res.tokens,
                    logprobs=res.logprobs.astype(np.float64),
                    values=res.values.astype(np.float64),
                    reward=breakdown,
                )
            )

        # ---- KL penalty against the frozen reference prompt ----
        with torch.no_grad():
            ref_lp, _, mask = teacher_forced_stats(
                model, ref_prompt, None, [r.condition for r in rollouts], [r.tokens for r in rollouts]
            )
        for i, r in enumerate(rollouts):
            t = len(r.tokens)
            kl_steps = r.logprobs - ref_lp[i, :t].numpy().astype(np.float64)
            r.kl_to_ref = float(kl_steps.sum())
            rewards = -kl_ctl.coeff * kl_steps
            rewards[-1] += r.reward.total
            values_plus = np.concatenate([r.values, [0.0]])
            r.advantages, r.returns = gae_advantages(rewards, values_plus, config.discount, config.gae_lambda)

        flat_adv = np.concatenate([r.advantages for r in rollouts])
        mean, std = float(flat_adv.mean()), float(flat_adv.std())
        for r in rollouts:
            r.advantages = (r.advantages - mean) / (std + 1e-8)

        # ---- clipped-surrogate updates with the supervised anchor mixed in ----
        for _ in range(config.ppo_epochs):
            perm = rng.permutation(len(rollouts))
            for start in range(0, len(perm), config.mini_batch_size):
                mb = perm[start : start + config.mini_batch_size].tolist()
                batch = [rollouts[i] for i in mb]
                new_lp, new_v, mask = teacher_forced_stats(
                    model, prompt, value_head, [r.condition for r in batch], [r.tokens for r in batch]
                )
                flat = mask.flatten()
                new_lp_f = new_lp.flatten()[flat]
                new_v_f = new_v.flatten()[flat]
                width = mask.shape[1]

                def padded(rows: list[np.ndarray]) -> torch.Tensor:
                    out = torch.zeros(len(rows), width, dtype=torch.float32)
                    for i, row in enumerate(rows):
                        out[i, : len(row)] = torch.tensor(row, dtype=torch.float32)
                    return out.flatten()[flat]

                old_lp_f = padded([r.logprobs for r in batch])
                adv_f = padded([r.advantages for r in batch])
                ret_f = padded([r.returns for r in batch])

                sft_idx = rng.choice(len(sft_pool), size=min(config.mini_batch_size, len(sft_pool)), replace=False)
                sft_batch = [sft_pool[i] for i in sft_idx]
                # per-token scale so beta trades off against the O(1) surrogate terms
                sft_tokens = sum(len(s.target) for s in sft_batch) / len(sft_batch)
                sft = supervised_loss(model, sft_batch, prompt) / sft_tokens
                losses = ppo_losses(new_lp_f, old_lp_f.detach(), adv_f, new_v_f, ret_f, config, sft_loss=sft)
                if not torch.isfinite(losses.combined):
                    raise RuntimeError(f"PPO loss became non-finite at epoch {epoch}")
                opt.zero_grad()
                losses.combined.backward()
                opt.step()

        mean_kl = float(np.mean([r.kl_to_ref for r in rollouts]))
        kl_ctl.update(mean_kl, config.batch_size)
        logs.append(
            EpochLog(
                epoch=epoch,
                mean_r_accuracy=float(np.mean([r.reward.r_accuracy for r in rollouts])),
                mean_r_diversity=float(np.mean([r.reward.r_diversity for r in rollouts])),
                mean_bp=float(np.mean([r.reward.brevity for r in rollouts])),
                mean_total=float(np.mean([r.reward.total for r in rollouts])),
                mean_kl=mean_kl,
            )
        )
    return prompt, logs
