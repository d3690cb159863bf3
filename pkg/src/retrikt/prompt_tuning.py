"""Supervised tuning of the input-view and output-view soft prompts.

A generation sample pairs a condition (serialized keywords, or the verbalized label)
with a target of the form "label: <Y> | text: <X>" terminated by EOS. Both views
share the target; only the condition differs.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .data_core import LabeledSample, TaskSpec
from .tiny_lm import VIEW_TAGS, PromptedLm, SoftPrompt, batched_target_nll
from .vocab import EOS_ID, KEYWORDS_WORD, LABEL_WORD, SEP_TOKEN, TEXT_WORD, Vocab


class ViewMismatchError(ValueError):
    pass


def target_string(label_text: str, text: str) -> str:
    return f"{LABEL_WORD}: {label_text} {SEP_TOKEN} {TEXT_WORD}: {text}"


def input_condition_string(keywords: Sequence[str]) -> str:
    return f"{KEYWORDS_WORD}: " + ", ".join(keywords)


def output_condition_string(label_text: str) -> str:
    return f"{LABEL_WORD}: {label_text}"


@dataclass(frozen=True)
class GenerationSample:
    condition: tuple[int, ...]
    target: tuple[int, ...]  # label segment, separator, text segment, EOS
    view_tag: str

    def __post_init__(self):
        if self.view_tag not in VIEW_TAGS:
            raise ValueError(f"bad view_tag {self.view_tag!r}")
        if not self.target or self.target[-1] != EOS_ID:
            raise ValueError("target must end with EOS")


def build_generation_samples(
    dataset: Sequence[LabeledSample],
    view: str,
    vocab: Vocab,
    spec: TaskSpec,
) -> list[GenerationSample]:
    if view not in VIEW_TAGS:
        raise ValueError(f"bad view {view!r}")
    out = []
    for s in dataset:
        if view == "input_view":
            cond = input_condition_string(s.keywords)
        else:
            cond = output_condition_string(s.label_text)
        target = vocab.encode(target_string(s.label_text, s.text)) + [EOS_ID]
        out.append(GenerationSample(tuple(vocab.encode(cond)), tuple(target), view))
    return out


def supervised_loss(model: PromptedLm, batch: Sequence[GenerationSample], prompt: SoftPrompt) -> torch.Tensor:
    """Mean over the batch of the per-sample summed target NLL."""
    if not batch:
        raise ValueError("empty batch")
    views = {s.view_tag for s in batch}
    if views != {prompt.view_tag}:
        raise ViewMismatchError(f"prompt is {prompt.view_tag!r} but batch views are {sorted(views)}")
    nll = batched_target_nll(model, prompt, [list(s.condition) for s in batch], [list(s.target) for s in batch])
    return nll.mean()


def tune_prompts(
    model: PromptedLm,
    dataset: Sequence[LabeledSample],
    view: str,
    vocab: Vocab,
    spec: TaskSpec,
    steps: int,
    lr: float,
    batch_size: int,
    seed: int,
    prompt_length: int = 8,
    init_std: float = 0.02,
) -> tuple[SoftPrompt, list[tuple[int, float]]]:
    """Adam with cosine decay on a fresh soft prompt; the base model must be frozen.

    Returns the tuned prompt and the (step, loss) curve; curve losses are per-token
    nats for readability."""
    if any(p.requires_grad for p in model.parameters()):
        raise ValueError("base model must be frozen before prompt tuning")
    samples = build_generation_samples(dataset, view, vocab, spec)
    prompt = SoftPrompt(model.cfg.num_layers, prompt_length, model.cfg.hidden_dim, view, init_std=init_std, seed=seed)
    if steps == 0:
        return prompt, []

    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(prompt.parameters(), lr=lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=steps)
    curve: list[tuple[int, float]] = []
    n = len(samples)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=n < batch_size)
        loss = supervised_loss(model, [samples[i] for i in idx], prompt)
        if not torch.isfinite(loss):
            raise RuntimeError(f"supervised prompt tuning diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        mean_len = sum(len(samples[i].target) for i in idx) / len(idx)
        curve.append((step, loss.item() / mean_len))
    return prompt, curve


def pretraining_sequences(
    texts: Sequence[str],
    labels: Sequence[str],
    spec: TaskSpec,
    vocab: Vocab,
    stopwords,
    max_keywords: int = 5,
) -> list[list[int]]:
    """Full condition+target layouts for base-LM pretraining.

    The base has to carry the generic conditional machinery (label copying, keyword
    inclusion, label-consistent continuation) for prompt tuning to steer later, the
    same way a web-pretrained model latently carries its task couplings. Callers
    control how cleanly the corpus labels follow the task law. Layouts alternate
    between the two views."""
    from .data_core import sample_keywords

    if len(texts) != len(labels):
        raise ValueError("need one label per text")
    sequences = []
    for i, (text, label) in enumerate(zip(texts, labels)):
        target = vocab.encode(target_string(label, text)) + [EOS_ID]
        if i % 2 == 0:
            cond = vocab.encode(input_condition_string(sample_keywords(text, stopwords, max_keywords)))
        else:
            cond = vocab.encode(output_condition_string(label))
        sequences.append(cond + target)
    return sequences


def save_loss_curve(curve: list[tuple[int, float]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("step,loss\n")
        for step, loss in curve:
            fh.write(f"{step},{loss:.6f}\n")


def mean_nll_per_token(model: PromptedLm, samples: Sequence[GenerationSample], prompt: SoftPrompt) -> float:
    """Evaluation helper: total NLL over all samples divided by total target tokens."""
    with torch.no_grad():
        total = 0.0
        tokens = 0
        for start in range(0, len(samples), 64):
            chunk = samples[start : start + 64]
            nll = batched_target_nll(model, prompt, [list(s.condition) for s in chunk], [list(s.target) for s in chunk])
            total += float(nll.sum())
            tokens += sum(len(s.target) for s in chunk)
    return total / max(tokens, 1)
