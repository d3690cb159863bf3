"""Task classifier reused as PPO reward scorer, store value producer and teacher embedder."""

from __future__ import annotations

import copy
from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .data_core import LabeledSample
from .encoder import EncoderConfig, TextEncoder, embed_text, embed_texts, encode_batch, load_encoder, save_encoder
from .vocab import Vocab


@dataclass(frozen=True)
class SentenceEmbedding:
    vector: np.ndarray
    source_tag: str  # "teacher" | "student"

    def __post_init__(self):
        if self.source_tag not in ("teacher", "student"):
            raise ValueError(f"bad source_tag {self.source_tag!r}")
        if not np.all(np.isfinite(self.vector)):
            raise ValueError("embedding has non-finite entries")


@dataclass(frozen=True)
class ClassifierTrainConfig:
    num_layers: int = 4
    hidden_dim: int = 256
    num_heads: int = 4
    max_seq_len: int = 64
    steps: int = 400
    batch_size: int = 32
    lr: float = 1e-3
    eval_every: int = 50


class RewardModel:
    """Frozen wrapper around a trained classifier encoder."""

    def __init__(self, encoder: TextEncoder, vocab: Vocab):
        if encoder.head is None:
            raise ValueError("reward model needs a classifier head")
        encoder.eval()
        for p in encoder.parameters():
            p.requires_grad_(False)
        self.encoder = encoder
        self.vocab = vocab

    @property
    def num_classes(self) -> int:
        return self.encoder.cfg.num_classes

    @property
    def embed_dim(self) -> int:
        return self.encoder.cfg.hidden_dim

    def num_params(self) -> int:
        return self.encoder.num_params()

    def predict_dist(self, text: str) -> np.ndarray:
        """Softmax class distribution; a pure function of the text."""
        with torch.no_grad():
            tokens, mask = encode_batch(self.vocab, [text], self.encoder.cfg.max_seq_len)
            _, logits = self.encoder(tokens, mask)
            probs = torch.softmax(logits[0].float(), dim=-1)
        return probs.numpy().astype(np.float32)

    def predict_dist_batch(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        out = []
        with torch.no_grad():
            for start in range(0, len(texts), batch_size):
                tokens, mask = encode_batch(self.vocab, list(texts[start : start + batch_size]), self.encoder.cfg.max_seq_len)
                _, logits = self.encoder(tokens, mask)
                out.append(torch.softmax(logits.float(), dim=-1).numpy().astype(np.float32))
        return np.concatenate(out, axis=0) if out else np.zeros((0, self.num_classes), dtype=np.float32)

    def embed_sentence(self, text: str) -> SentenceEmbedding:
        return SentenceEmbedding(embed_text(self.encoder, self.vocab, text), "teacher")

    def embed_batch(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        return embed_texts(self.encoder, self.vocab, list(texts), batch_size)

    def save(self, path) -> None:
        save_encoder(self.encoder, path, kind="classifier")

    @classmethod
    def load(cls, path, vocab: Vocab) -> "RewardModel":
        encoder, _ = load_encoder(path, kind="classifier")
        return cls(encoder, vocab)


def accuracy_of(model: TextEncoder, vocab: Vocab, dataset: Sequence[LabeledSample]) -> float:
    correct = 0
    with torch.no_grad():
        for start in range(0, len(dataset), 64):
            chunk = dataset[start : start + 64]
            tokens, mask = encode_batch(vocab, [s.text for s in chunk], model.cfg.max_seq_len)
            _, logits = model(tokens, mask)
            preds = logits.argmax(dim=-1).tolist()
            correct += sum(int(p == s.label_id) for p, s in zip(preds, chunk))
    return correct / len(dataset)


def train_classifier(
    train: Sequence[LabeledSample],
    dev: Sequence[LabeledSample],
    vocab: Vocab,
    num_classes: int,
    config: ClassifierTrainConfig,
    seed: int,
) -> tuple[RewardModel, list[tuple[int, float, float]]]:
    """Cross-entropy training on the original dataset; keeps the best-dev checkpoint.

    Returns the frozen reward model and a (step, train_loss, dev_accuracy) history."""
    seen = {s.label_id for s in train}
    if len(seen) < 2:
        raise ValueError(f"training data covers only classes {sorted(seen)}; need at least 2")

    torch.manual_seed(seed)
    enc_cfg = EncoderConfig(
        num_layers=config.num_layers,
        hidden_dim=config.hidden_dim,
        num_heads=config.num_heads,
        vocab_size=len(vocab),
        max_seq_len=config.max_seq_len,
        num_classes=num_classes,
    )
    model = TextEncoder(enc_cfg)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    rng = np.random.default_rng(seed)
    n = len(train)
    history: list[tuple[int, float, float]] = []
    best_acc = -1.0
    best_state = copy.deepcopy(model.state_dict())

    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        chunk = [train[i] for i in idx]
        tokens, mask = encode_batch(vocab, [s.text for s in chunk], config.max_seq_len)
        labels = torch.tensor([s.label_id for s in chunk], dtype=torch.long)
        _, logits = model(tokens, mask)
        loss = torch.nn.functional.cross_entropy(logits, labels)
        if not torch.isfinite(loss):
            raise RuntimeError(f"classifier training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if (step + 1) % config.eval_every == 0 or step == config.steps - 1:
            model.eval()
            acc = accuracy_of(model, vocab, dev) if dev else float("nan")
            model.train()
            history.append((step, float(loss.item()), acc))
            if dev and acc > best_acc:
                best_acc = acc
                best_state = copy.deepcopy(model.state_dict())

    if dev:
        model.load_state_dict(best_state)
    model.eval()
    return RewardModel(model, vocab), history
