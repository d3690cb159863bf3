"""Build, persist and query the store of generated labeled knowledge.

Records come from the original dataset plus four generated families: keyword
conditioned (D_I), label conditioned (D_O), labels of D_I fed back (D_IO) and
keywords re-extracted from D_O texts fed back (D_OI). Each record's value is the
reward model's class distribution for its text; keys are student embeddings filled
in after the student has been trained.
"""

from __future__ import annotations

import hashlib
import json
import struct
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np
import torch

from .data_core import LabeledSample, TaskSpec, sample_keywords
from .prompt_tuning import input_condition_string, output_condition_string
from .seeding import derive_seed
from .tiny_lm import PromptedLm, SoftPrompt, generate_batch
from .vocab import EOS_ID, SEP_TOKEN, SPECIAL_TOKENS, TEXT_WORD, LABEL_WORD, Vocab, detokenize

PROVENANCES = ("D", "D_I", "D_O", "D_IO", "D_OI")
GENERATED_PROVENANCES = PROVENANCES[1:]

STORE_MAGIC = b"RKST"
STORE_VERSION = 1


class StoreError(IOError):
    pass


def theoretical_store_size(m: int, n: int, dataset_size: int) -> int:
    """Pre-dedup attempt count: originals once plus four generated families."""
    return (1 + 4 * m * n) * dataset_size


def parse_generated(tokens: Sequence[int], vocab: Vocab, spec: TaskSpec) -> tuple[str, str] | None:
    """Split a generated sequence into (label_text, input_text), or None on failure.

    Expected shape: 'label : <Y> | text : <X>' with a trailing EOS allowed. The label
    must verbalize a known class."""
    ids = list(tokens)
    while ids and ids[-1] == EOS_ID:
        ids.pop()
    if any(i < len(SPECIAL_TOKENS) for i in ids):
        return None
    toks = [vocab.token(i) for i in ids]
    if len(toks) < 6 or toks[0] != LABEL_WORD or toks[1] != ":":
        return None
    try:
        sep = toks.index(SEP_TOKEN)
    except ValueError:
        return None
    label_toks = toks[2:sep]
    rest = toks[sep + 1 :]
    if not label_toks or len(rest) < 3 or rest[0] != TEXT_WORD or rest[1] != ":":
        return None
    label_text = detokenize(label_toks)
    if spec.class_of(label_text) is None:
        return None
    text = detokenize(rest[2:])
    if not text:
        return None
    return label_text, text


@dataclass(frozen=True)
class GeneratedSample:
    text: str
    label_text: str
    provenance: str
    rep: int


def normalized_text(text: str) -> str:
    return " ".join(text.casefold().split())


def dedup(items, key=None) -> list:
    """Stable first-occurrence dedup under casefold + whitespace collapse."""
    if key is None:
        key = lambda item: item if isinstance(item, str) else item.text
    seen: set[str] = set()
    out = []
    for item in items:
        norm = normalized_text(key(item))
        if norm not in seen:
            seen.add(norm)
            out.append(item)
    return out


def generate_for_conditions(
    model: PromptedLm,
    prompt: SoftPrompt,
    conditions: list[list[int]],
    n_per: int,
    p: float,
    max_new: int,
    generator: torch.Generator,
    value_head=None,
    max_rows: int = 64,
):
    """Generate n_per continuations per condition, batching equal-length conditions.

    Results come back in (condition index, repeat index) order regardless of the
    internal grouping."""
    jobs: list[tuple[int, list[int]]] = []
    for ci, cond in enumerate(conditions):
        for r in range(n_per):
            jobs.append((ci * n_per + r, cond))

    groups: dict[int, list[tuple[int, list[int]]]] = {}
    group_order: list[int] = []
    for slot, cond in jobs:
        length = len(cond)
        if length not in groups:
            groups[length] = []
            group_order.append(length)
        groups[length].append((slot, cond))

    results = [None] * len(jobs)
    for length in group_order:
        batch = groups[length]
        for start in range(0, len(batch), max_rows):
            chunk = batch[start : start + max_rows]
            outs = generate_batch(model, prompt, [c for _, c in chunk], p, max_new, generator, value_head)
            for (slot, _), res in zip(chunk, outs):
                results[slot] = res
    return results


def generate_sets(
    D: Sequence[LabeledSample],
    model: PromptedLm,
    prompt_input: SoftPrompt,
    prompt_output: SoftPrompt,
    m: int,
    n: int,
    p: float,
    seed: int,
    vocab: Vocab,
    spec: TaskSpec,
    max_new: int = 64,
    stopwords=None,
    max_keywords: int = 5,
) -> tuple[dict[str, list[GeneratedSample]], dict[str, dict[str, int]]]:
    """Produce D_I, D_O, D_IO and D_OI with per-repetition provenance.

    Every original sample is used m times with n samples per call for D_I and D_O;
    each kept D_I element spawns one label-conditioned D_IO generation and each kept
    D_O element one keyword-conditioned D_OI generation (keywords re-extracted from
    the generated text). Unparseable generations are dropped and counted."""
    if m < 1 or n < 1:
        raise ValueError("m and n must be >= 1")
    if stopwords is None:
        from .data_core import load_stopwords

        stopwords = load_stopwords()

    sets: dict[str, list[GeneratedSample]] = {name: [] for name in GENERATED_PROVENANCES}
    counts = {name: {"attempts": 0, "kept": 0, "dropped": 0} for name in GENERATED_PROVENANCES}

    def run(name: str, rep: int, conditions: list[list[int]], n_per: int, prompt: SoftPrompt):
        gen = torch.Generator().manual_seed(derive_seed(seed, name, rep))
        results = generate_for_conditions(model, prompt, conditions, n_per, p, max_new, gen)
        kept = []
        for res in results:
            counts[name]["attempts"] += 1
            parsed = parse_generated(res.tokens, vocab, spec)
            if parsed is None:
                counts[name]["dropped"] += 1
                continue
            counts[name]["kept"] += 1
            label_text, text = parsed
            sample = GeneratedSample(text=text, label_text=label_text, provenance=name, rep=rep)
            sets[name].append(sample)
            kept.append(sample)
        return kept

    for rep in range(m):
        kept_i = run(
            "D_I", rep, [vocab.encode(input_condition_string(s.keywords)) for s in D], n, prompt_input
        )
        kept_o = run(
            "D_O", rep, [vocab.encode(output_condition_string(s.label_text)) for s in D], n, prompt_output
        )
        if kept_i:
            run("D_IO", rep, [vocab.encode(output_condition_string(s.label_text)) for s in kept_i], 1, prompt_output)
        if kept_o:
            run(
                "D_OI",
                rep,
                [
                    vocab.encode(input_condition_string(sample_keywords(s.text, stopwords, max_keywords)))
                    for s in kept_o
                ],
                1,
                prompt_input,
            )
    return sets, counts


@dataclass
class KnowledgeRecord:
    text: str
    label_text: str
    value: np.ndarray  # reward-model class distribution, float32
    provenance: str
    key: np.ndarray | None = None  # student embedding, float32

    def __post_init__(self):
        if self.provenance not in PROVENANCES:
            raise ValueError(f"bad provenance {self.provenance!r}")
        if abs(float(np.sum(self.value)) - 1.0) > 1e-5:
            raise ValueError("record value must be a probability distribution")


@dataclass
class KnowledgeStore:
    records: list[KnowledgeRecord]
    num_classes: int
    task: str
    manifest: dict
    embed_dim: int = 0
    _key_matrix: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.records)

    def key_matrix(self) -> np.ndarray:
        if self.embed_dim == 0:
            raise StoreError("store keys have not been built yet")
        if self._key_matrix is None or self._key_matrix.shape[0] != len(self.records):
            self._key_matrix = np.stack([r.key for r in self.records]).astype(np.float32)
        return self._key_matrix

    def generated_records(self) -> list[KnowledgeRecord]:
        return [r for r in self.records if r.provenance != "D"]


def assemble_store(
    D: Sequence[LabeledSample],
    sets: dict[str, list[GeneratedSample]],
    rm,
    spec: TaskSpec,
    manifest: dict,
    max_rep: int | None = None,
) -> KnowledgeStore:
    """Union in D, D_I, D_O, D_IO, D_OI order, dedup, then score every record.

    Values are computed one text at a time so re-scoring a stored record reproduces
    its value bit for bit. max_rep keeps only generations with rep < max_rep, which
    gives the store an effective sample-time of max_rep repetitions."""
    entries: list[tuple[str, str, str]] = [(s.text, s.label_text, "D") for s in D]
    for name in GENERATED_PROVENANCES:
        for g in sets.get(name, []):
            if max_rep is None or g.rep < max_rep:
                entries.append((g.text, g.label_text, name))
    unique = dedup(entries, key=lambda e: e[0])
    records = [
        KnowledgeRecord(text=text, label_text=label, value=rm.predict_dist(text), provenance=prov)
        for text, label, prov in unique
    ]
    return KnowledgeStore(
        records=records,
        num_classes=rm.num_classes,
        task=spec.name,
        manifest=dict(manifest),
    )


def rebuild_keys(store: KnowledgeStore, student_encoder) -> KnowledgeStore:
    """Set every record's key to the student embedding of its text."""
    texts = [r.text for r in store.records]
    keys = student_encoder.embed_batch(texts).astype(np.float32)
    for rec, key in zip(store.records, keys):
        rec.key = key
    store.embed_dim = int(keys.shape[1]) if len(texts) else store.embed_dim
    store._key_matrix = None
    return store


def cosine_similarities(keys: np.ndarray, query: np.ndarray) -> np.ndarray:
    query = np.asarray(query, dtype=np.float32)
    key_norms = np.linalg.norm(keys, axis=1)
    q_norm = float(np.linalg.norm(query))
    denom = key_norms * q_norm
    sims = np.zeros(len(keys), dtype=np.float64)
    ok = denom > 0
    sims[ok] = (keys[ok] @ query) / denom[ok]
    return sims


def query(store: KnowledgeStore, query_vector: np.ndarray, k: int) -> list[tuple[KnowledgeRecord, float]]:
    """Exact top-k by cosine similarity; ties broken by record insertion order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not store.records:
        raise StoreError("cannot query an empty store")
    sims = cosine_similarities(store.key_matrix(), query_vector)
    order = np.argsort(-sims, kind="stable")[: min(k, len(store.records))]
    return [(store.records[i], float(sims[i])) for i in order]


def _manifest_hash(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode("utf-8")).hexdigest()


def save_store(store: KnowledgeStore, path) -> None:
    header = {
        "task": store.task,
        "num_records": len(store.records),
        "embed_dim": store.embed_dim,
        "num_classes": store.num_classes,
        "manifest": store.manifest,
        "manifest_hash": _manifest_hash(store.manifest),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    body = bytearray()
    body += STORE_MAGIC
    body += struct.pack("<I", STORE_VERSION)
    body += struct.pack("<I", len(header_bytes))
    body += header_bytes
    prov_byte = {name: i for i, name in enumerate(PROVENANCES)}
    for rec in store.records:
        text_bytes = rec.text.encode("utf-8")
        label_bytes = rec.label_text.encode("utf-8")
        body += struct.pack("<I", len(text_bytes))
        body += text_bytes
        body += struct.pack("<H", len(label_bytes))
        body += label_bytes
        body += struct.pack("<B", prov_byte[rec.provenance])
        if store.embed_dim:
            body += np.ascontiguousarray(rec.key, dtype="<f4").tobytes()
        body += np.ascontiguousarray(rec.value, dtype="<f4").tobytes()
    digest = hashlib.sha256(bytes(body)).digest()
    with open(path, "wb") as fh:
        fh.write(body)
        fh.write(digest)


def load_store(path) -> KnowledgeStore:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise StoreError(f"{path}: truncated at offset {len(raw)} (no header)")
    if raw[:4] != STORE_MAGIC:
        raise StoreError(f"{path}: bad magic {raw[:4]!r}")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != STORE_VERSION:
        raise StoreError(f"{path}: unsupported version {version}")
    (header_len,) = struct.unpack_from("<I", raw, 8)
    offset = 12 + header_len
    if len(raw) < offset:
        raise StoreError(f"{path}: truncated at offset {len(raw)} (header needs {offset})")
    header = json.loads(raw[12:offset].decode("utf-8"))
    if _manifest_hash(header["manifest"]) != header["manifest_hash"]:
        raise StoreError(f"{path}: manifest hash mismatch")

    embed_dim = header["embed_dim"]
    num_classes = header["num_classes"]
    records: list[KnowledgeRecord] = []

    def take(n: int, what: str) -> int:
        nonlocal offset
        if len(raw) < offset + n:
            raise StoreError(f"{path}: truncated at offset {len(raw)} while reading {what} at {offset}")
        offset += n
        return offset - n

    for _ in range(header["num_records"]):
        at = take(4, "text length")
        (tlen,) = struct.unpack_from("<I", raw, at)
        at = take(tlen, "text")
        text = raw[at : at + tlen].decode("utf-8")
        at = take(2, "label length")
        (llen,) = struct.unpack_from("<H", raw, at)
        at = take(llen, "label")
        label = raw[at : at + llen].decode("utf-8")
        at = take(1, "provenance")
        prov = PROVENANCES[raw[at]]
        key = None
        if embed_dim:
            at = take(4 * embed_dim, "key")
            key = np.frombuffer(raw, dtype="<f4", count=embed_dim, offset=at).copy()
        at = take(4 * num_classes, "value")
        value = np.frombuffer(raw, dtype="<f4", count=num_classes, offset=at).copy()
        records.append(KnowledgeRecord(text=text, label_text=label, value=value, provenance=prov, key=key))

    at = take(32, "checksum")
    if hashlib.sha256(raw[:at]).digest() != raw[at : at + 32]:
        raise StoreError(f"{path}: checksum mismatch")
    return KnowledgeStore(
        records=records,
        num_classes=num_classes,
        task=header["task"],
        manifest=header["manifest"],
        embed_dim=embed_dim,
    )
