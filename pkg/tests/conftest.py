"""Shared corpus builders for the experiment-style tests."""

import numpy as np

# rough English letter frequencies, used to give synthetic words a natural skew
LETTER_WEIGHTS = np.array([
    8.2, 1.5, 2.8, 4.3, 12.7, 2.2, 2.0, 6.1, 7.0, 0.15, 0.77, 4.0, 2.4,
    6.7, 7.5, 1.9, 0.095, 6.0, 6.3, 9.1, 2.8, 0.98, 2.4, 0.15, 2.0, 0.074,
])


def periodic_corpus(n_chars=10_000):
    """Pangram repeated to size: 27 distinct characters, period 45."""
    return ("the quick brown fox jumps over the lazy dog " * (n_chars // 45 + 1))[:n_chars]


def words_corpus(n_chars, seed, n_words=4000, min_len=4, max_len=13, zipf_exp=0.9):
    """Deterministic word-salad text over {a-z, space}.

    Words are random letter strings with an English-like letter skew, drawn
    with Zipf-weighted frequencies, so the text has sharp within-word
    structure that rewards input-dependent hidden-state transitions.
    """
    rng = np.random.default_rng(seed)
    letters = list("abcdefghijklmnopqrstuvwxyz")
    p = LETTER_WEIGHTS / LETTER_WEIGHTS.sum()
    lengths = rng.integers(min_len, max_len, size=n_words)
    words = ["".join(rng.choice(letters, size=n, p=p)) for n in lengths]
    ranks = 1.0 / np.arange(1, n_words + 1) ** zipf_exp
    ranks /= ranks.sum()
    draws = rng.choice(n_words, size=n_chars // 3, p=ranks)
    return " ".join(words[i] for i in draws)[:n_chars]
