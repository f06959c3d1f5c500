import numpy as np
import pytest

import minidpg as m


@pytest.fixture(scope="session")
def tiny_vocab():
    return m.Vocab.tiny()


@pytest.fixture(scope="session")
def tiny_dataset(tiny_vocab):
    # six unique programs exist at two statements over {x, =, 0, ;}
    cfg = m.GenConfig(seed=7, max_stmts=2, max_depth=0, l_max=10,
                      more_terms=0.0, more_factors=0.0,
                      factor_weights=(0.6, 0.4, 0.0))
    return m.build_dataset(tiny_vocab, cfg, n_train=4, n_test=2)


@pytest.fixture(scope="session")
def tiny_base(tiny_vocab, tiny_dataset):
    """Tabular 2-gram base model pretrained on the tiny corpus."""
    mle = m.MleConfig(kind="tabular", order=1, lr=0.05, batch_size=2,
                      epochs=40, seed=0)
    policy, _ = m.train_base(tiny_dataset, mle, tiny_vocab)
    return policy


@pytest.fixture(scope="session")
def tiny_ebm(tiny_base):
    return m.Ebm(tiny_base, l_max=6)
