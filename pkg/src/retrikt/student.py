"""The extremely small encoder: relevance-distribution training, the response-KD
baseline, retrieval-weighted inference and task metrics."""

from __future__ import annotations

import copy
from collections.abc import Callable, Sequence
from dataclasses import dataclass

import numpy as np
import torch

from .data_core import LabeledSample, TaskSpec
from .encoder import EncoderConfig, TextEncoder, embed_text, embed_texts, encode_batch, load_encoder, save_encoder
from .knowledge_store import KnowledgeStore, query
from .reward_model import SentenceEmbedding
from .vocab import Vocab

KL_FLOOR = 1e-12


@dataclass(frozen=True)
class StudentConfig:
    num_layers: int = 2
    hidden_dim: int = 128
    num_heads: int = 4
    max_seq_len: int = 64
    has_classifier_head: bool = False

    def encoder_config(self, vocab_size: int, num_classes: int) -> EncoderConfig:
        return EncoderConfig(
            num_layers=self.num_layers,
            hidden_dim=self.hidden_dim,
            num_heads=self.num_heads,
            vocab_size=vocab_size,
            max_seq_len=self.max_seq_len,
            num_classes=num_classes if self.has_classifier_head else 0,
        )


class Student:
    """Wrapper pairing a student encoder with the shared vocabulary."""

    def __init__(self, encoder: TextEncoder, vocab: Vocab):
        self.encoder = encoder
        self.vocab = vocab

    @classmethod
    def fresh(cls, config: StudentConfig, vocab: Vocab, num_classes: int, seed: int) -> "Student":
        torch.manual_seed(seed)
        return cls(TextEncoder(config.encoder_config(len(vocab), num_classes)), vocab)

    @property
    def embed_dim(self) -> int:
        return self.encoder.cfg.hidden_dim

    def num_params(self) -> int:
        return self.encoder.num_params()

    def embed(self, text: str) -> np.ndarray:
        return embed_text(self.encoder, self.vocab, text)

    def embed_batch(self, texts: Sequence[str], batch_size: int = 64) -> np.ndarray:
        return embed_texts(self.encoder, self.vocab, list(texts), batch_size)

    def predict_dist(self, text: str) -> np.ndarray:
        if self.encoder.head is None:
            raise ValueError("student has no classifier head")
        with torch.no_grad():
            tokens, mask = encode_batch(self.vocab, [text], self.encoder.cfg.max_seq_len)
            _, logits = self.encoder(tokens, mask)
        return torch.softmax(logits[0].float(), dim=-1).numpy().astype(np.float32)

    def save(self, path) -> None:
        save_encoder(self.encoder, path, kind="student")

    @classmethod
    def load(cls, path, vocab: Vocab) -> "Student":
        encoder, _ = load_encoder(path, kind="student")
        return cls(encoder, vocab)


def student_embed(student: Student, text: str) -> SentenceEmbedding:
    return SentenceEmbedding(student.embed(text), "student")


def relevance_distribution(similarities, tau: float) -> np.ndarray:
    """Temperature softmax over a peer-similarity list (self excluded upstream)."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.ndim != 1 or sims.size < 1:
        raise ValueError("similarities must be a non-empty 1-d array")
    z = sims / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def listwise_kl(student_dists, teacher_dists) -> float:
    """Sum over anchors of KL(student row || teacher row); teacher side floored."""
    s = np.atleast_2d(np.asarray(student_dists, dtype=np.float64))
    t = np.atleast_2d(np.asarray(teacher_dists, dtype=np.float64))
    if s.shape != t.shape:
        raise ValueError(f"shape mismatch {s.shape} vs {t.shape}")
    logs = np.log(np.maximum(s, KL_FLOOR))
    logt = np.log(np.maximum(t, KL_FLOOR))
    terms = np.where(s > 0, s * (logs - logt), 0.0)
    return float(terms.sum())


def pairwise_cosine(x: torch.Tensor) -> torch.Tensor:
    normed = x / x.norm(dim=1, keepdim=True).clamp(min=1e-12)
    return normed @ normed.T


def _off_diagonal(mat: torch.Tensor) -> torch.Tensor:
    n = mat.shape[0]
    mask = ~torch.eye(n, dtype=torch.bool)
    return mat[mask].reshape(n, n - 1)


def listwise_kl_from_embeddings(
    student_emb: torch.Tensor,
    teacher_emb: torch.Tensor,
    tau_teacher: float,
    tau_student: float,
) -> torch.Tensor:
    """Differentiable path: cosine rows -> temperature softmax -> student-side KL.

    The teacher side is detached; gradients only reach the student embeddings."""
    if student_emb.shape[0] != teacher_emb.shape[0] or student_emb.shape[0] < 2:
        raise ValueError("need matching batches with at least two rows")
    if tau_teacher <= 0 or tau_student <= 0:
        raise ValueError("temperatures must be positive")
    s_sims = _off_diagonal(pairwise_cosine(student_emb)) / tau_student
    with torch.no_grad():
        t_sims = _off_diagonal(pairwise_cosine(teacher_emb.detach())) / tau_teacher
    log_s = torch.log_softmax(s_sims, dim=1)
    log_t = torch.log_softmax(t_sims, dim=1)
    p_s = torch.exp(log_s)
    return (p_s * (log_s - log_t)).sum()


def kd_loss(teacher_probs: torch.Tensor, student_logits: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Mean over the batch of KL(teacher distribution || student softmax).

    Temperature smooths both sides (teacher via a power transform since only its
    probabilities are stored); the usual temperature-squared factor keeps gradient
    scale comparable across temperatures."""
    if teacher_probs.shape != student_logits.shape:
        raise ValueError(f"class-count mismatch: {tuple(teacher_probs.shape)} vs {tuple(student_logits.shape)}")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if temperature != 1.0:
        t = teacher_probs.clamp(min=KL_FLOOR) ** (1.0 / temperature)
        teacher_probs = t / t.sum(dim=-1, keepdim=True)
    log_student = torch.log_softmax(student_logits / temperature, dim=-1)
    log_teacher = torch.log(teacher_probs.clamp(min=KL_FLOOR))
    terms = torch.where(teacher_probs > 0, teacher_probs * (log_teacher - log_student), torch.zeros_like(teacher_probs))
    return terms.sum(dim=-1).mean() * temperature**2


def train_retrieval_student(
    store_texts: Sequence[str],
    teacher,
    student: Student,
    tau_teacher: float,
    tau_student: float,
    batch_size: int,
    steps: int,
    lr: float,
    seed: int,
) -> tuple[Student, list[tuple[int, float]]]:
    """Match the teacher's in-batch relevance distributions over store texts.

    Teacher embeddings are precomputed once (the teacher is frozen); the loss per
    step is the anchor-summed KL divided by the batch size."""
    if len(store_texts) < 2:
        raise ValueError("need at least two texts")
    if batch_size < 2:
        raise ValueError("batch size must be at least 2 for in-batch relevance")
    texts = list(store_texts)
    teacher_mat = torch.from_numpy(teacher.embed_batch(texts)).float()
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(student.encoder.parameters(), lr=lr)
    curve: list[tuple[int, float]] = []
    n = len(texts)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=False)
        batch_texts = [texts[i] for i in idx]
        tokens, mask = encode_batch(student.vocab, batch_texts, student.encoder.cfg.max_seq_len)
        pooled, _ = student.encoder(tokens, mask)
        loss = listwise_kl_from_embeddings(pooled, teacher_mat[idx], tau_teacher, tau_student) / len(idx)
        if not torch.isfinite(loss):
            raise RuntimeError(f"retrieval training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        curve.append((step, float(loss.item())))
    student.encoder.eval()
    return student, curve


def mean_holdout_listwise_kl(
    texts: Sequence[str], teacher, student: Student, tau_teacher: float, tau_student: float, batch_size: int, seed: int
) -> float:
    """Held-out relevance KL (per anchor) on fixed batches; lower is better."""
    texts = list(texts)
    teacher_mat = torch.from_numpy(teacher.embed_batch(texts)).float()
    rng = np.random.default_rng(seed)
    losses = []
    with torch.no_grad():
        for _ in range(8):
            idx = rng.choice(len(texts), size=min(batch_size, len(texts)), replace=False)
            tokens, mask = encode_batch(student.vocab, [texts[i] for i in idx], student.encoder.cfg.max_seq_len)
            pooled, _ = student.encoder(tokens, mask)
            loss = listwise_kl_from_embeddings(pooled, teacher_mat[idx], tau_teacher, tau_student) / len(idx)
            losses.append(float(loss))
    return float(np.mean(losses))


def _train_with_targets(
    texts: Sequence[str],
    target_dists: np.ndarray,
    student: Student,
    temperature: float,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    dev: Sequence[LabeledSample] | None = None,
    eval_every: int = 50,
) -> tuple[Student, list[tuple[int, float, float]]]:
    if student.encoder.head is None:
        raise ValueError("this training mode needs a student with a classifier head")
    if np.asarray(target_dists).shape[1] != student.encoder.cfg.num_classes:
        raise ValueError("class-count mismatch between targets and student head")
    texts = list(texts)
    targets = torch.from_numpy(np.asarray(target_dists, dtype=np.float32))
    rng = np.random.default_rng(seed)
    opt = torch.optim.Adam(student.encoder.parameters(), lr=lr)
    history: list[tuple[int, float, float]] = []
    best_acc, best_state = -1.0, None
    n = len(texts)
    for step in range(steps):
        idx = rng.choice(n, size=min(batch_size, n), replace=n < batch_size)
        tokens, mask = encode_batch(student.vocab, [texts[i] for i in idx], student.encoder.cfg.max_seq_len)
        _, logits = student.encoder(tokens, mask)
        loss = kd_loss(targets[idx], logits, temperature)
        if not torch.isfinite(loss):
            raise RuntimeError(f"student training diverged at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        if dev is not None and ((step + 1) % eval_every == 0 or step == steps - 1):
            student.encoder.eval()
            acc = evaluate(dev, lambda t: int(np.argmax(student.predict_dist(t))), "accuracy")
            student.encoder.train()
            history.append((step, float(loss.item()), acc))
            if acc > best_acc:
                best_acc = acc
                best_state = copy.deepcopy(student.encoder.state_dict())
    if best_state is not None:
        student.encoder.load_state_dict(best_state)
    student.encoder.eval()
    return student, history


def train_kd_baseline(
    store_texts: Sequence[str],
    teacher_values: np.ndarray,
    student: Student,
    temperature: float,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    dev: Sequence[LabeledSample] | None = None,
) -> tuple[Student, list[tuple[int, float, float]]]:
    """Response-based distillation on store records (teacher class distributions)."""
    return _train_with_targets(store_texts, teacher_values, student, temperature, steps, batch_size, lr, seed, dev)


def train_finetune_baseline(
    dataset: Sequence[LabeledSample],
    student: Student,
    steps: int,
    batch_size: int,
    lr: float,
    seed: int,
    dev: Sequence[LabeledSample] | None = None,
) -> tuple[Student, list[tuple[int, float, float]]]:
    """Plain fine-tuning on gold labels (one-hot targets through the same KD loop)."""
    n_classes = student.encoder.cfg.num_classes
    onehot = np.zeros((len(dataset), n_classes), dtype=np.float32)
    for i, s in enumerate(dataset):
        onehot[i, s.label_id] = 1.0
    return _train_with_targets([s.text for s in dataset], onehot, student, 1.0, steps, batch_size, lr, seed, dev)


@dataclass(frozen=True)
class PredictionResult:
    class_scores: np.ndarray
    predicted_class: int
    retrieved: tuple[tuple[int, float, float], ...]  # (record index, similarity, weight)

    def __post_init__(self):
        if int(np.argmax(self.class_scores)) != self.predicted_class:
            raise ValueError("predicted_class must be the argmax of class_scores")


def retrieval_weights(similarities: np.ndarray) -> np.ndarray:
    """Similarity-proportional weights; negatives clamp to zero, all-zero -> uniform."""
    sims = np.maximum(np.asarray(similarities, dtype=np.float64), 0.0)
    total = sims.sum()
    if total <= 0:
        return np.full(len(sims), 1.0 / len(sims))
    return sims / total


def predict_retrieval(text: str, student: Student, store: KnowledgeStore, k: int) -> PredictionResult:
    """Weighted mixture of the top-k retrieved records' teacher distributions."""
    if k < 1:
        raise ValueError("k must be >= 1")
    emb = student.embed(text)
    hits = query(store, emb, k)
    index_of = {id(rec): i for i, rec in enumerate(store.records)}
    sims = np.array([sim for _, sim in hits], dtype=np.float64)
    weights = retrieval_weights(sims)
    scores = np.zeros(store.num_classes, dtype=np.float64)
    for (rec, _), w in zip(hits, weights):
        scores += w * np.asarray(rec.value, dtype=np.float64)
    retrieved = tuple(
        (index_of[id(rec)], float(sim), float(w)) for (rec, sim), w in zip(hits, weights)
    )
    return PredictionResult(class_scores=scores, predicted_class=int(np.argmax(scores)), retrieved=retrieved)


def accuracy_score(golds: Sequence[int], preds: Sequence[int]) -> float:
    if len(golds) != len(preds) or not golds:
        raise ValueError("need matching non-empty gold/prediction lists")
    return sum(int(g == p) for g, p in zip(golds, preds)) / len(golds)


def matthews_corrcoef(golds: Sequence[int], preds: Sequence[int]) -> float:
    """Multiclass MCC from the confusion matrix; 0 when a denominator factor is 0."""
    if len(golds) != len(preds) or not golds:
        raise ValueError("need matching non-empty gold/prediction lists")
    classes = sorted(set(golds) | set(preds))
    n = len(classes)
    remap = {c: i for i, c in enumerate(classes)}
    conf = np.zeros((n, n), dtype=np.float64)
    for g, p in zip(golds, preds):
        conf[remap[g], remap[p]] += 1
    s = conf.sum()
    c = np.trace(conf)
    t = conf.sum(axis=1)  # per-class true counts
    p = conf.sum(axis=0)  # per-class predicted counts
    cov = c * s - float(t @ p)
    denom_t = s * s - float(t @ t)
    denom_p = s * s - float(p @ p)
    if denom_t <= 0 or denom_p <= 0:
        return 0.0
    return cov / np.sqrt(denom_t * denom_p)


def evaluate(dataset: Sequence[LabeledSample], predictor: Callable[[str], int], metric: str) -> float:
    if not dataset:
        raise ValueError("cannot evaluate on an empty dataset")
    golds = [s.label_id for s in dataset]
    preds = [int(predictor(s.text)) for s in dataset]
    if metric == "accuracy":
        return accuracy_score(golds, preds)
    if metric == "matthews_correlation":
        return matthews_corrcoef(golds, preds)
    raise ValueError(f"unknown metric {metric!r}")
