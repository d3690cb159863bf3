import math

import numpy as np
import pytest
import torch

from retrikt.data_core import SyntheticTaskConfig, make_synthetic_task
from retrikt.encoder import EncoderConfig, TextEncoder, embed_text, load_encoder, save_encoder
from retrikt.reward_model import ClassifierTrainConfig, RewardModel, SentenceEmbedding, train_classifier

SMALL_CFG = ClassifierTrainConfig(num_layers=2, hidden_dim=32, num_heads=2, steps=120, batch_size=16, eval_every=40)


@pytest.fixture(scope="module")
def separable_task(stopwords):
    cfg = SyntheticTaskConfig(
        rule="presence",
        train_size=200,
        dev_size=60,
        test_size=60,
        filler_vocab=16,
        markers_per_class=3,
        min_words=5,
        max_words=8,
    )
    return make_synthetic_task(3, cfg, stopwords), cfg


@pytest.fixture(scope="module")
def trained(separable_task, tiny_vocab, stopwords):
    (spec, train, dev, test), cfg = separable_task
    from retrikt.data_core import build_vocab_for_task

    vocab = build_vocab_for_task(cfg, spec)
    rm, history = train_classifier(train, dev, vocab, spec.num_classes, SMALL_CFG, seed=0)
    return rm, history, (spec, train, dev, test), vocab


def test_separable_task_learns(trained):
    rm, history, (spec, train, dev, test), vocab = trained
    from retrikt.reward_model import accuracy_of

    assert accuracy_of(rm.encoder, vocab, dev) >= 0.95


def test_train_accuracy_at_least_dev(trained):
    rm, history, (spec, train, dev, test), vocab = trained
    from retrikt.reward_model import accuracy_of

    assert accuracy_of(rm.encoder, vocab, train) >= accuracy_of(rm.encoder, vocab, dev) - 0.02


def test_training_deterministic(separable_task):
    (spec, train, dev, _), cfg = separable_task
    from retrikt.data_core import build_vocab_for_task

    vocab = build_vocab_for_task(cfg, spec)
    small = ClassifierTrainConfig(num_layers=2, hidden_dim=16, num_heads=2, steps=30, batch_size=8, eval_every=10)
    _, h1 = train_classifier(train[:40], dev[:20], vocab, spec.num_classes, small, seed=4)
    _, h2 = train_classifier(train[:40], dev[:20], vocab, spec.num_classes, small, seed=4)
    assert h1 == h2


def test_label_shuffled_training_is_chance_level(separable_task, stopwords):
    (spec, train, dev, _), cfg = separable_task
    from dataclasses import replace

    from retrikt.data_core import build_vocab_for_task
    from retrikt.reward_model import accuracy_of

    vocab = build_vocab_for_task(cfg, spec)
    rng = np.random.default_rng(0)
    shuffled_ids = rng.permutation([s.label_id for s in train]).tolist()
    shuffled = [
        replace(s, label_id=lid, label_text=spec.verbalize(lid)) for s, lid in zip(train, shuffled_ids)
    ]
    rm, _ = train_classifier(shuffled, dev, vocab, spec.num_classes, SMALL_CFG, seed=1)
    acc = accuracy_of(rm.encoder, vocab, dev)
    assert abs(acc - 1 / spec.num_classes) <= 0.1 + 0.05  # chance level within tolerance


def test_single_class_rejected(separable_task):
    (spec, train, dev, _), cfg = separable_task
    from retrikt.data_core import build_vocab_for_task

    vocab = build_vocab_for_task(cfg, spec)
    only_zero = [s for s in train if s.label_id == 0]
    with pytest.raises(ValueError, match="class"):
        train_classifier(only_zero, dev, vocab, spec.num_classes, SMALL_CFG, seed=0)


def test_predict_dist_properties(trained):
    rm, _, (spec, train, _, _), _ = trained
    d1 = rm.predict_dist(train[0].text)
    d2 = rm.predict_dist(train[0].text)
    assert d1.shape == (spec.num_classes,)
    assert abs(float(d1.sum()) - 1.0) < 1e-6
    assert np.array_equal(d1, d2)
    batch = rm.predict_dist_batch([s.text for s in train[:5]])
    assert batch.shape == (5, spec.num_classes)
    assert np.allclose(batch.sum(axis=1), 1.0, atol=1e-6)


def test_softmax_closed_form():
    # logits [2, 0] -> [e^2/(e^2+1), 1/(e^2+1)]
    probs = torch.softmax(torch.tensor([2.0, 0.0]), dim=-1).numpy()
    expected = np.array([math.exp(2) / (math.exp(2) + 1), 1 / (math.exp(2) + 1)])
    assert np.allclose(probs, expected, atol=1e-9)
    assert abs(probs[0] - 0.8808) < 1e-4 and abs(probs[1] - 0.1192) < 1e-4


def test_embed_sentence_properties(trained):
    rm, _, (spec, train, _, _), _ = trained
    e1 = rm.embed_sentence(train[0].text)
    e2 = rm.embed_sentence(train[0].text)
    assert isinstance(e1, SentenceEmbedding)
    assert e1.source_tag == "teacher"
    assert np.array_equal(e1.vector, e2.vector)
    v = e1.vector
    cos = float(v @ v / (np.linalg.norm(v) ** 2))
    assert abs(cos - 1.0) < 1e-6


def test_single_token_embedding_is_final_state(trained):
    rm, _, _, vocab = trained
    from retrikt.encoder import encode_batch

    text = "zam"
    emb = embed_text(rm.encoder, vocab, text)
    with torch.no_grad():
        tokens, mask = encode_batch(vocab, [text], rm.encoder.cfg.max_seq_len)
        assert tokens.shape == (1, 1)
        pooled, _ = rm.encoder(tokens, mask)
    assert np.allclose(emb, pooled[0].numpy())


def test_encoder_checkpoint_round_trip(tmp_path, trained):
    rm, _, _, vocab = trained
    path = tmp_path / "rm.ckpt"
    rm.save(path)
    again = RewardModel.load(path, vocab)
    text = "sentence: the zam of bam"
    assert np.array_equal(rm.predict_dist(text), again.predict_dist(text))
    assert np.array_equal(rm.embed_sentence(text).vector, again.embed_sentence(text).vector)
