import numpy as np
import pytest

from moldapt import encoder as enc
from moldapt import toydata
from moldapt.tokenizer import train_wordpiece


@pytest.fixture(scope="session")
def corpus():
    return toydata.generate_corpus(48, seed=17)


@pytest.fixture(scope="session")
def vocab(corpus):
    return train_wordpiece(corpus, 160)


@pytest.fixture(scope="session")
def tiny_cfg(vocab):
    return enc.EncoderConfig(layers=2, heads=2, hidden_dim=32, ff_dim=64,
                             max_len=24, vocab_size=len(vocab), seed=0)


@pytest.fixture(scope="session")
def tiny_params(tiny_cfg):
    return enc.init_params(tiny_cfg, dtype=np.float64)


def fd_check(params, grads, loss_fn, rng, n_per_tensor=4, eps=1e-6):
    """Max relative error between analytic grads and central differences on
    sampled coordinates. Mutates and restores params in place."""
    worst = 0.0
    for name, g in grads.items():
        flat = params[name].reshape(-1)
        gf = np.asarray(g).reshape(-1)
        idxs = rng.choice(flat.size, size=min(n_per_tensor, flat.size),
                          replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            lp = loss_fn()
            flat[i] = orig - eps
            lm = loss_fn()
            flat[i] = orig
            fd = (lp - lm) / (2 * eps)
            rel = abs(fd - gf[i]) / max(1.0, abs(fd), abs(gf[i]))
            worst = max(worst, rel)
    return worst
