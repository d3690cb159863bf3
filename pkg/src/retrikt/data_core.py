"""Dataset records, single-sentence preprocessing, RAKE keyword scoring and synthetic tasks."""

from __future__ import annotations

import hashlib
import re
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .vocab import KEYWORDS_WORD, LABEL_WORD, SEP_TOKEN, TEXT_WORD, Vocab, tokenize

VALID_METRICS = ("accuracy", "matthews_correlation")

# Marker families get one onset consonant per class; fillers use the rest.
_MARKER_ONSETS = ("z", "q", "j", "x", "k", "v")
_FILLER_ONSETS = ("b", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "c")
_VOWELS = ("a", "e", "i", "o", "u")
_CODAS = ("m", "r", "n", "l", "p", "t", "g", "s", "d", "k")
_STOPWORD_FILLERS = ("the", "of", "and", "to", "in", "with", "for", "on", "at", "was")
_VERBALIZERS = ("alpha", "beta", "gamma", "delta", "epsilon", "zeta")


class DataError(ValueError):
    """Raised for malformed records, labels or dataset files."""


@dataclass(frozen=True)
class KeywordSet:
    """Scored keyword phrases, sorted by score descending."""

    phrases: tuple[tuple[str, float], ...]

    def __post_init__(self):
        scores = [s for _, s in self.phrases]
        if any(s < 0 for s in scores):
            raise DataError("keyword scores must be non-negative")
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise DataError("keyword phrases must be sorted by score descending")

    @property
    def texts(self) -> tuple[str, ...]:
        return tuple(p for p, _ in self.phrases)

    def __len__(self) -> int:
        return len(self.phrases)


@dataclass(frozen=True)
class LabeledSample:
    id: str
    text: str
    label_id: int
    label_text: str
    keywords: tuple[str, ...]

    def __post_init__(self):
        if not self.text:
            raise DataError("sample text must be non-empty")
        if self.label_id < 0:
            raise DataError(f"label_id must be non-negative, got {self.label_id}")


@dataclass(frozen=True)
class TaskSpec:
    name: str
    label_verbalizers: Mapping[int, str]
    metric: str
    template: tuple[str, ...]

    def __post_init__(self):
        n = len(self.label_verbalizers)
        if sorted(self.label_verbalizers) != list(range(n)):
            raise DataError("label verbalizers must cover class indices 0..n-1")
        if len({v.casefold() for v in self.label_verbalizers.values()}) != n:
            raise DataError("label verbalizers must be distinct")
        if self.metric not in VALID_METRICS:
            raise DataError(f"unknown metric {self.metric!r}")
        if self.metric == "matthews_correlation" and n != 2:
            raise DataError("matthews_correlation is only defined here for binary tasks")
        if not all(p.endswith(":") for p in self.template):
            raise DataError("template prefixes must end with ':'")

    @property
    def num_classes(self) -> int:
        return len(self.label_verbalizers)

    def class_of(self, label_text: str) -> int | None:
        wanted = label_text.strip().casefold()
        for idx, verb in self.label_verbalizers.items():
            if verb.casefold() == wanted:
                return idx
        return None

    def verbalize(self, label_id: int) -> str:
        return self.label_verbalizers[label_id]


def load_stopwords(path=None) -> frozenset[str]:
    """Stopword set from a one-token-per-line file (packaged default if path is None)."""
    if path is None:
        text = resources.files("retrikt").joinpath("data/stopwords_en.txt").read_text("utf-8")
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    return frozenset(w.strip() for w in text.splitlines() if w.strip())


def stopwords_digest(path=None) -> str:
    if path is None:
        raw = resources.files("retrikt").joinpath("data/stopwords_en.txt").read_bytes()
    else:
        with open(path, "rb") as fh:
            raw = fh.read()
    return hashlib.sha256(raw).hexdigest()


_WORD_RE = re.compile(r"[\w']+")
_PHRASE_SPLIT_RE = re.compile(r"[^\w\s']+")


def extract_keywords(text: str, stopwords: frozenset[str] | set[str], max_phrases: int = 5) -> KeywordSet:
    """RAKE scoring: phrases are maximal stopword/punctuation-free runs, word score
    is degree/frequency (degree counts the word itself) and a phrase scores the sum
    of its word scores."""
    if max_phrases < 1:
        raise DataError("max_phrases must be positive")
    if not text.strip():
        raise DataError("cannot extract keywords from empty text")

    candidates: list[tuple[str, ...]] = []
    for fragment in _PHRASE_SPLIT_RE.split(text.lower()):
        run: list[str] = []
        for word in _WORD_RE.findall(fragment):
            if word in stopwords:
                if run:
                    candidates.append(tuple(run))
                    run = []
            else:
                run.append(word)
        if run:
            candidates.append(tuple(run))

    freq: dict[str, int] = {}
    degree: dict[str, int] = {}
    for phrase in candidates:
        for word in phrase:
            freq[word] = freq.get(word, 0) + 1
            degree[word] = degree.get(word, 0) + len(phrase)

    scored: dict[tuple[str, ...], float] = {}
    order: list[tuple[str, ...]] = []
    for phrase in candidates:
        if phrase not in scored:
            scored[phrase] = sum(degree[w] / freq[w] for w in phrase)
            order.append(phrase)

    ranked = sorted(order, key=lambda p: -scored[p])  # stable: ties keep first-seen order
    top = ranked[:max_phrases]
    return KeywordSet(tuple((" ".join(p), scored[p]) for p in top))


def keyword_fallback(text: str, stopwords: frozenset[str] | set[str]) -> str:
    """First non-stopword word token, or the literal token 'text'."""
    for tok in tokenize(text):
        if tok not in stopwords and _WORD_RE.fullmatch(tok):
            return tok
    return "text"


def sample_keywords(text: str, stopwords: frozenset[str] | set[str], max_phrases: int = 5) -> tuple[str, ...]:
    phrases = extract_keywords(text, stopwords, max_phrases).texts
    if not phrases:
        return (keyword_fallback(text, stopwords),)
    return phrases


def preprocess_record(
    raw_fields: Mapping[str, str],
    spec: TaskSpec,
    *,
    stopwords: frozenset[str] | set[str] | None = None,
    max_keywords: int = 5,
    sample_id: str | None = None,
) -> LabeledSample:
    """Concatenate template fields into the single-sentence form 'prefix: value ...',
    map the label through the verbalizers and attach extracted keywords."""
    if stopwords is None:
        stopwords = load_stopwords()

    parts = []
    for prefix in spec.template:
        key = prefix[:-1]
        if key not in raw_fields:
            raise DataError(f"missing field {key!r} required by template of task {spec.name!r}")
        parts.append(f"{prefix} {str(raw_fields[key]).strip()}")
    text = " ".join(parts)

    raw_label = str(raw_fields.get("label", "")).strip()
    label_id = spec.class_of(raw_label)
    if label_id is None:
        if raw_label.isdigit() and int(raw_label) in spec.label_verbalizers:
            label_id = int(raw_label)
        else:
            raise DataError(f"unknown label {raw_label!r} for task {spec.name!r}")

    if sample_id is None:
        sample_id = str(raw_fields.get("id", "")).strip()
    if not sample_id:
        sample_id = "rec-" + hashlib.sha256(text.encode("utf-8")).hexdigest()[:10]

    return LabeledSample(
        id=sample_id,
        text=text,
        label_id=label_id,
        label_text=spec.verbalize(label_id),
        keywords=sample_keywords(text, stopwords, max_keywords),
    )


@dataclass(frozen=True)
class SyntheticTaskConfig:
    """Generator settings for the desk-scale low-resource tasks.

    rule 'order': each sentence carries one marker from two distinct families and the
    label is the family of the earlier marker. rule 'presence': one marker from the
    label's family (bag-of-words separable)."""

    num_classes: int = 2
    rule: str = "order"
    train_size: int = 200
    dev_size: int = 100
    test_size: int = 200
    filler_vocab: int = 40
    markers_per_class: int = 4
    min_words: int = 8
    max_words: int = 14
    stopword_rate: float = 0.35
    metric: str = "accuracy"

    def __post_init__(self):
        if self.num_classes < 2:
            raise DataError("synthetic task needs at least 2 classes")
        if self.num_classes > len(_MARKER_ONSETS):
            raise DataError(f"at most {len(_MARKER_ONSETS)} classes supported")
        if self.train_size < 1 or self.train_size > 500:
            raise DataError("train_size must be in [1, 500] (low-resource regime)")
        if self.rule not in ("order", "presence"):
            raise DataError(f"unknown rule {self.rule!r}")
        if not 0.0 <= self.stopword_rate <= 0.9:
            raise DataError("stopword_rate must be in [0, 0.9]")
        if self.min_words < 2 or self.max_words < self.min_words:
            raise DataError("need 2 <= min_words <= max_words")
        if self.filler_vocab < 4:
            raise DataError("filler_vocab must be at least 4")


def synthetic_word_inventory(config: SyntheticTaskConfig) -> dict:
    """Deterministic marker/filler word lists for a generator config."""
    markers: list[tuple[str, ...]] = []
    for c in range(config.num_classes):
        onset = _MARKER_ONSETS[c]
        words = [onset + v + coda for v in _VOWELS for coda in _CODAS]
        markers.append(tuple(words[: config.markers_per_class]))

    fillers: list[str] = []
    taken = {w for fam in markers for w in fam} | set(_STOPWORD_FILLERS)
    for onset in _FILLER_ONSETS:
        for v in _VOWELS:
            for coda in _CODAS:
                w = onset + v + coda
                if w not in taken:
                    fillers.append(w)
                    taken.add(w)
                if len(fillers) >= config.filler_vocab:
                    break
            if len(fillers) >= config.filler_vocab:
                break
        if len(fillers) >= config.filler_vocab:
            break

    return {
        "markers": tuple(markers),
        "fillers": tuple(fillers),
        "stopword_fillers": _STOPWORD_FILLERS,
        "verbalizers": _VERBALIZERS[: config.num_classes],
    }


def synthetic_task_spec(config: SyntheticTaskConfig, seed: int) -> TaskSpec:
    inv = synthetic_word_inventory(config)
    return TaskSpec(
        name=f"synth-{config.rule}-c{config.num_classes}-s{seed}",
        label_verbalizers={i: v for i, v in enumerate(inv["verbalizers"])},
        metric=config.metric,
        template=("sentence:",),
    )


def synthetic_rule_oracle(config: SyntheticTaskConfig):
    """Ground-truth labeling function implied by the generator: family of the first
    marker token in the text."""
    inv = synthetic_word_inventory(config)
    family = {w: c for c, fam in enumerate(inv["markers"]) for w in fam}

    def oracle(text: str) -> int | None:
        for tok in tokenize(text):
            if tok in family:
                return family[tok]
        return None

    return oracle


def _synthetic_sentence(rng: np.random.Generator, config: SyntheticTaskConfig, inv: dict, label: int) -> str:
    n_words = int(rng.integers(config.min_words, config.max_words + 1))
    fillers = inv["fillers"]
    stop_fillers = inv["stopword_fillers"]
    words = []
    for _ in range(n_words):
        if rng.random() < config.stopword_rate:
            words.append(stop_fillers[int(rng.integers(len(stop_fillers)))])
        else:
            words.append(fillers[int(rng.integers(len(fillers)))])

    def pick(family: int) -> str:
        fam = inv["markers"][family]
        return fam[int(rng.integers(len(fam)))]

    if config.rule == "presence":
        pos = int(rng.integers(n_words))
        words[pos] = pick(label)
    else:
        other_choices = [c for c in range(config.num_classes) if c != label]
        other = other_choices[int(rng.integers(len(other_choices)))]
        i, j = sorted(rng.choice(n_words, size=2, replace=False).tolist())
        words[i] = pick(label)
        words[j] = pick(other)
    return " ".join(words)


def _synthetic_split(
    seed: int, config: SyntheticTaskConfig, spec: TaskSpec, inv: dict, split: str, size: int, stopwords
) -> list[LabeledSample]:
    rng = np.random.default_rng([seed, {"train": 1, "dev": 2, "test": 3, "corpus": 4}[split]])
    samples = []
    for i in range(size):
        label = int(rng.integers(config.num_classes))
        sentence = _synthetic_sentence(rng, config, inv, label)
        samples.append(
            preprocess_record(
                {"sentence": sentence, "label": spec.verbalize(label), "id": f"{split}-{i:05d}"},
                spec,
                stopwords=stopwords,
            )
        )
    return samples


def make_synthetic_task(
    seed: int, config: SyntheticTaskConfig, stopwords: frozenset[str] | None = None
) -> tuple[TaskSpec, list[LabeledSample], list[LabeledSample], list[LabeledSample]]:
    """Deterministic (TaskSpec, train, dev, test) for a seed and generator config."""
    if stopwords is None:
        stopwords = load_stopwords()
    spec = synthetic_task_spec(config, seed)
    inv = synthetic_word_inventory(config)
    return (
        spec,
        _synthetic_split(seed, config, spec, inv, "train", config.train_size, stopwords),
        _synthetic_split(seed, config, spec, inv, "dev", config.dev_size, stopwords),
        _synthetic_split(seed, config, spec, inv, "test", config.test_size, stopwords),
    )


def make_pretraining_corpus(seed: int, config: SyntheticTaskConfig, size: int) -> list[str]:
    """Unlabeled in-domain processed texts for generator pretraining."""
    inv = synthetic_word_inventory(config)
    rng = np.random.default_rng([seed, 4])
    texts = []
    for _ in range(size):
        label = int(rng.integers(config.num_classes))
        texts.append("sentence: " + _synthetic_sentence(rng, config, inv, label))
    return texts


def build_vocab_for_task(config: SyntheticTaskConfig, spec: TaskSpec) -> Vocab:
    """Closed vocabulary covering the generator inventory plus all template tokens."""
    inv = synthetic_word_inventory(config)
    toks: list[str] = []
    for prefix in spec.template:
        toks.extend(tokenize(prefix))
    toks += [LABEL_WORD, TEXT_WORD, KEYWORDS_WORD, SEP_TOKEN, ":", ","]
    toks += list(inv["verbalizers"])
    for fam in inv["markers"]:
        toks.extend(fam)
    toks += list(inv["fillers"]) + list(inv["stopword_fillers"])
    return Vocab(sorted(set(toks)))


def save_dataset(samples: Sequence[LabeledSample], path) -> None:
    """One record per line: id, label_text, processed text (tab-separated)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            for fieldval in (s.id, s.label_text, s.text):
                if "\t" in fieldval or "\n" in fieldval:
                    raise DataError(f"record {s.id!r} contains a tab or newline")
            fh.write(f"{s.id}\t{s.label_text}\t{s.text}\n")


def load_dataset(
    path,
    spec: TaskSpec,
    *,
    stopwords: frozenset[str] | set[str] | None = None,
    max_keywords: int = 5,
) -> list[LabeledSample]:
    """Inverse of save_dataset. Keywords are re-extracted, so a save/load round trip
    is field-identical. Blank lines are ignored."""
    if stopwords is None:
        stopwords = load_stopwords()
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 3:
                raise DataError(f"{path}: line {lineno}: expected 3 tab-separated columns, got {len(cols)}")
            rec_id, label_text, text = cols
            label_id = spec.class_of(label_text)
            if label_id is None:
                raise DataError(f"{path}: line {lineno}: unknown label {label_text!r}")
            samples.append(
                LabeledSample(
                    id=rec_id,
                    text=text,
                    label_id=label_id,
                    label_text=spec.verbalize(label_id),
                    keywords=sample_keywords(text, stopwords, max_keywords),
                )
            )
    return samples
