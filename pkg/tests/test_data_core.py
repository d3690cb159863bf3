import collections

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retrikt.data_core import (
    DataError,
    SyntheticTaskConfig,
    TaskSpec,
    extract_keywords,
    load_dataset,
    load_stopwords,
    make_pretraining_corpus,
    make_synthetic_task,
    preprocess_record,
    sample_keywords,
    save_dataset,
    synthetic_rule_oracle,
    synthetic_word_inventory,
)
from retrikt.vocab import Vocab, detokenize, tokenize


COLA = TaskSpec(
    name="cola",
    label_verbalizers={0: "unacceptable", 1: "acceptable"},
    metric="matthews_correlation",
    template=("sentence:",),
)

COPA = TaskSpec(
    name="copa",
    label_verbalizers={0: "choice1", 1: "choice2"},
    metric="accuracy",
    template=("premise:", "choice1:", "choice2:", "question:"),
)


def test_preprocess_cola_record(stopwords):
    rec = preprocess_record(
        {"sentence": "John made Bill master of himself.", "label": "acceptable"},
        COLA,
        stopwords=stopwords,
    )
    assert rec.text == "sentence: John made Bill master of himself."
    assert rec.label_id == 1
    assert rec.label_text == "acceptable"
    assert rec.keywords


def test_preprocess_copa_record(stopwords):
    rec = preprocess_record(
        {
            "premise": "Political violence broke out in the nation.",
            "choice1": "Many citizens relocated to the capitol.",
            "choice2": "Many citizens took refuge in other territories.",
            "question": "effect",
            "label": "choice2",
        },
        COPA,
        stopwords=stopwords,
    )
    assert rec.text == (
        "premise: Political violence broke out in the nation. "
        "choice1: Many citizens relocated to the capitol. "
        "choice2: Many citizens took refuge in other territories. "
        "question: effect"
    )
    assert rec.label_id == 1


def test_preprocess_single_field_identity(stopwords):
    rec = preprocess_record({"sentence": "plain value", "label": "0"}, COLA, stopwords=stopwords)
    assert rec.text == "sentence: plain value"
    assert rec.label_id == 0


def test_preprocess_missing_field_names_it(stopwords):
    with pytest.raises(DataError, match="choice2"):
        preprocess_record({"premise": "a", "choice1": "b", "question": "c", "label": "choice1"}, COPA)


def test_preprocess_unknown_label_rejected(stopwords):
    with pytest.raises(DataError, match="label"):
        preprocess_record({"sentence": "x", "label": "maybe"}, COLA, stopwords=stopwords)


def test_rake_hand_scored_example():
    ks = extract_keywords("keyword extraction is not that hard", {"is", "not", "that"}, 5)
    assert ks.phrases == (("keyword extraction", 4.0), ("hard", 1.0))


def test_rake_single_word():
    ks = extract_keywords("ziggurat", frozenset(), 5)
    assert ks.phrases == (("ziggurat", 1.0),)


def test_rake_all_stopwords_empty():
    ks = extract_keywords("the of and", {"the", "of", "and"}, 5)
    assert len(ks) == 0


def test_rake_punctuation_splits_phrases():
    ks = extract_keywords("alpha beta, gamma", frozenset(), 5)
    assert ks.texts == ("alpha beta", "gamma")


def test_keyword_fallback(stopwords):
    assert sample_keywords("the of and", stopwords) == ("text",)
    assert sample_keywords("the riddle of it", stopwords) == ("riddle",)


@settings(max_examples=60)
@given(
    st.lists(
        st.text(alphabet="abcdefg hij", min_size=1, max_size=30).filter(lambda s: s.strip()),
        min_size=1,
        max_size=6,
    ),
    st.sets(st.sampled_from(["a", "hij", "abc", "be"]), max_size=3),
)
def test_rake_scores_sorted_and_stopword_free(words, stops):
    text = " ".join(words)
    if not text.strip():
        return
    ks = extract_keywords(text, frozenset(stops), 10)
    scores = [s for _, s in ks.phrases]
    assert all(a >= b for a, b in zip(scores, scores[1:]))
    assert all(s >= 0 for s in scores)
    for phrase, _ in ks.phrases:
        assert not any(w in stops for w in phrase.split())


def test_synthetic_determinism(stopwords):
    cfg = SyntheticTaskConfig(train_size=30, dev_size=10, test_size=10)
    a = make_synthetic_task(7, cfg, stopwords)
    b = make_synthetic_task(7, cfg, stopwords)
    assert a[0] == b[0]
    assert a[1] == b[1] and a[2] == b[2] and a[3] == b[3]
    c = make_synthetic_task(8, cfg, stopwords)
    assert c[1] != a[1]


def test_synthetic_rule_oracle_full_agreement(tiny_task):
    cfg, spec, train, dev, test = tiny_task
    oracle = synthetic_rule_oracle(cfg)
    for s in train + dev + test:
        assert oracle(s.text) == s.label_id


def test_synthetic_class_balance(stopwords):
    cfg = SyntheticTaskConfig(train_size=500, dev_size=10, test_size=10, num_classes=2)
    # 10k samples via 20 seeds of 500 to stay in the low-resource regime per call
    counts = collections.Counter()
    for seed in range(20):
        _, train, _, _ = make_synthetic_task(seed, cfg, stopwords)
        counts.update(s.label_id for s in train)
    total = sum(counts.values())
    assert total == 10_000
    for c in range(cfg.num_classes):
        assert abs(counts[c] / total - 0.5) < 0.05


def test_synthetic_rejects_degenerate_config():
    with pytest.raises(DataError):
        SyntheticTaskConfig(num_classes=0)
    with pytest.raises(DataError):
        SyntheticTaskConfig(train_size=501)


def test_dataset_round_trip(tmp_path, tiny_task, stopwords):
    cfg, spec, train, dev, test = tiny_task
    path = tmp_path / "train.tsv"
    save_dataset(train, path)
    again = load_dataset(path, spec, stopwords=stopwords)
    assert again == train


def test_dataset_blank_lines_ignored(tmp_path, tiny_task, stopwords):
    cfg, spec, train, _, _ = tiny_task
    path = tmp_path / "d.tsv"
    save_dataset(train[:3], path)
    with open(path, "a") as fh:
        fh.write("\n   \n")
    assert load_dataset(path, spec, stopwords=stopwords) == train[:3]


def test_dataset_missing_column_names_line(tmp_path, tiny_task):
    cfg, spec, _, _, _ = tiny_task
    path = tmp_path / "bad.tsv"
    path.write_text("id-1\talpha\tsentence: ok\nid-2\tonly two cols\n")
    with pytest.raises(DataError, match="line 2"):
        load_dataset(path, spec)


def test_dataset_unknown_label_names_line(tmp_path, tiny_task):
    cfg, spec, _, _, _ = tiny_task
    path = tmp_path / "bad.tsv"
    path.write_text("id-1\tnotalabel\tsentence: ok\n")
    with pytest.raises(DataError, match="line 1"):
        load_dataset(path, spec)


@settings(max_examples=40)
@given(st.lists(st.sampled_from("bam dar fol gus hep lim".split()), min_size=1, max_size=8, unique=True))
def test_preprocess_injective_on_distinct_values(words):
    # distinct single-field values map to distinct texts under a fixed template
    texts = set()
    for w in words:
        rec = preprocess_record({"sentence": w, "label": "acceptable"}, COLA, stopwords=frozenset())
        texts.add(rec.text)
    assert len(texts) == len(words)


def test_corpus_generation_deterministic():
    cfg = SyntheticTaskConfig(train_size=10, dev_size=5, test_size=5)
    assert make_pretraining_corpus(3, cfg, 20) == make_pretraining_corpus(3, cfg, 20)
    assert all(t.startswith("sentence: ") for t in make_pretraining_corpus(3, cfg, 5))


def test_word_inventory_disjoint():
    cfg = SyntheticTaskConfig(num_classes=3, train_size=10, dev_size=5, test_size=5)
    inv = synthetic_word_inventory(cfg)
    all_markers = [w for fam in inv["markers"] for w in fam]
    assert len(set(all_markers)) == len(all_markers)
    assert not set(all_markers) & set(inv["fillers"])
    assert not set(inv["fillers"]) & set(inv["stopword_fillers"])


def test_tokenize_detokenize_round_trip_on_templates():
    s = "label: acceptable | text: sentence: the cat, sat."
    assert detokenize(tokenize(s)) == s


def test_vocab_encode_decode(tiny_vocab):
    ids = tiny_vocab.encode("sentence: the zam of bam")
    assert tiny_vocab.decode(ids) == "sentence: the zam of bam"


def test_vocab_save_load(tmp_path, tiny_vocab):
    path = tmp_path / "vocab.txt"
    tiny_vocab.save(path)
    again = Vocab.load(path)
    assert len(again) == len(tiny_vocab)
    assert again.encode("sentence: the") == tiny_vocab.encode("sentence: the")
