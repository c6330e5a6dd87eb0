"""Synthetic corpora used by the language-model tests."""

import numpy as np

SYLLABLES = ("ba", "ko", "ri", "tem", "sa", "lo", "ne", "mi", "dor", "fu", "ga", "pel",
             "ti", "ven", "ash", "qu", "or", "es", "lin", "yo")


def uniform_tokens(n, vocab=10, seed=0):
    """Whitespace-separated i.i.d. uniform symbols ``s0 .. s{vocab-1}``."""
    rng = np.random.default_rng(seed)
    return " ".join(f"s{i}" for i in rng.integers(0, vocab, size=n))


def markov_text(n_chars, seed=0, lexicon=300):
    """English-like text: Zipfian words from a word-bigram chain, with sentences."""
    rng = np.random.default_rng(seed)
    words = []
    while len(words) < lexicon:
        w = "".join(rng.choice(SYLLABLES, size=rng.integers(1, 4)))
        if w not in words:
            words.append(w)
    zipf = 1.0 / np.arange(1, lexicon + 1)
    zipf /= zipf.sum()
    # each word prefers a small set of successors
    successors = [rng.choice(lexicon, size=8, p=zipf) for _ in range(lexicon)]
    out, size, prev, start = [], 0, int(rng.choice(lexicon, p=zipf)), True
    while size < n_chars:
        w = words[prev]
        if start:
            w = w.capitalize()
        end = rng.random() < 0.12
        piece = w + (". " if end else (", " if rng.random() < 0.05 else " "))
        out.append(piece)
        size += len(piece)
        start = end
        nxt = successors[prev][rng.integers(0, 8)] if rng.random() < 0.8 else rng.choice(lexicon, p=zipf)
        prev = int(nxt)
    return "".join(out)[:n_chars]
