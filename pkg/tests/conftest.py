import pytest
import torch

from retrikt.data_core import SyntheticTaskConfig, build_vocab_for_task, load_stopwords, make_synthetic_task
from retrikt.vocab import Vocab

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def stopwords():
    return load_stopwords()


@pytest.fixture(scope="session")
def tiny_task(stopwords):
    cfg = SyntheticTaskConfig(
        num_classes=2,
        rule="order",
        train_size=48,
        dev_size=24,
        test_size=24,
        filler_vocab=20,
        markers_per_class=3,
        min_words=5,
        max_words=9,
    )
    spec, train, dev, test = make_synthetic_task(11, cfg, stopwords)
    return cfg, spec, train, dev, test


@pytest.fixture(scope="session")
def tiny_vocab(tiny_task) -> Vocab:
    cfg, spec, train, dev, test = tiny_task
    return build_vocab_for_task(cfg, spec)
