"""Deterministic desk-scale datasets.

This sandbox has no dataset downloads, so the experiment harness builds its
own inputs:

* :func:`text_corpus` -- seeded English-like prose (~1 MB) from a syllable
  vocabulary with Zipf word frequencies, bigram successor structure, topic
  drift, proper names, numbers, and sentence/paragraph punctuation.  Rich
  enough for a character LM to learn real structure, random enough that a
  desk-scale model generalizes imperfectly and regularization matters.
* :func:`digits_csv` -- the pixel-sequence CSV (label,p0..p783) built from
  scikit-learn's bundled 8x8 handwritten-digit scans (real handwriting),
  bilinearly upscaled to the declared 28x28 grid.

Run ``python -m rnnreg.synth OUTDIR`` to materialize both.
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

_ONSETS = [
    "b", "bl", "br", "c", "ch", "cl", "cr", "d", "dr", "f", "fl", "fr", "g", "gl",
    "gr", "h", "j", "k", "l", "m", "n", "p", "pl", "pr", "qu", "r", "s", "sc",
    "sh", "sk", "sl", "sm", "sn", "sp", "st", "str", "sw", "t", "th", "tr", "v",
    "w", "wh", "z",
]
_NUCLEI = ["a", "ai", "au", "e", "ea", "ee", "i", "ia", "ie", "o", "oa", "oo", "ou", "u"]
_CODAS = ["", "b", "ck", "d", "ft", "g", "l", "ld", "ll", "m", "n", "nd", "ng",
          "nt", "p", "r", "rd", "rn", "s", "ss", "st", "t", "th", "x"]

_FUNCTION = ["the", "of", "and", "a", "to", "in", "is", "was", "it", "for",
             "with", "as", "on", "be", "at", "by", "had", "not", "but", "from",
             "or", "have", "an", "they", "which", "one", "were", "her", "all",
             "their", "when", "who", "will", "more", "no", "if", "out", "so",
             "said", "what", "up", "its", "about", "into", "than", "then",
             "them", "these", "some", "would", "other", "over", "such", "only",
             "very", "after", "most", "before", "under", "between"]

_SUFFIXES = ["", "", "", "s", "ed", "ing", "er", "ly", "tion", "ness"]


def _make_word(rng: np.random.Generator, syllables: int) -> str:
    parts = []
    for _ in range(syllables):
        parts.append(_ONSETS[rng.integers(len(_ONSETS))])
        parts.append(_NUCLEI[rng.integers(len(_NUCLEI))])
        if rng.random() < 0.6:
            parts.append(_CODAS[rng.integers(len(_CODAS))])
    return "".join(parts)


def _zipf_weights(n: int, alpha: float) -> np.ndarray:
    w = 1.0 / np.arange(1, n + 1) ** alpha
    return w / w.sum()


def text_corpus(
    n_chars: int = 1_000_000,
    seed: int = 0,
    vocab_size: int = 2000,
    successors: int = 240,
    n_names: int = 400,
    n_topics: int = 12,
) -> str:
    """Generate deterministic English-like prose of roughly n_chars characters."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0xC0))))

    lemmas = []
    seen = set()
    while len(lemmas) < vocab_size:
        w = _make_word(rng, int(rng.integers(1, 4))) + _SUFFIXES[rng.integers(len(_SUFFIXES))]
        if 3 <= len(w) <= 14 and w not in seen:
            seen.add(w)
            lemmas.append(w)
    names = []
    while len(names) < n_names:
        w = _make_word(rng, int(rng.integers(2, 4))).capitalize()
        if w.lower() not in seen and w not in names:
            names.append(w)

    base_weights = _zipf_weights(vocab_size, 1.05)
    order = rng.permutation(vocab_size)
    unigram = np.empty(vocab_size)
    unigram[order] = base_weights

    succ_idx = np.empty((vocab_size, successors), dtype=np.int64)
    succ_w = _zipf_weights(successors, 0.55)
    for w in range(vocab_size):
        succ_idx[w] = rng.choice(vocab_size, size=successors, replace=False, p=unigram)

    # topics bias word choice: each topic prefers a random slice of the vocab
    topic_boost = np.ones((n_topics, vocab_size))
    for t in range(n_topics):
        members = rng.choice(vocab_size, size=vocab_size // 4, replace=False)
        topic_boost[t, members] = 8.0
    topic_unigrams = topic_boost * unigram
    topic_unigrams /= topic_unigrams.sum(axis=1, keepdims=True)

    name_weights = _zipf_weights(n_names, 1.1)
    func_weights = _zipf_weights(len(_FUNCTION), 1.0)

    out: list[str] = []
    total = 0
    topic = int(rng.integers(n_topics))
    word = int(rng.integers(vocab_size))
    while total < n_chars:
        n_sentences = int(rng.integers(4, 10))
        paragraph: list[str] = []
        if rng.random() < 0.35:
            topic = int(rng.integers(n_topics))
        for _ in range(n_sentences):
            length = 4 + int(rng.geometric(0.18))
            tokens: list[str] = []
            for k in range(length):
                r = rng.random()
                if r < 0.33:
                    tokens.append(_FUNCTION[rng.choice(len(_FUNCTION), p=func_weights)])
                    continue
                if r < 0.38:
                    tokens.append(names[rng.choice(n_names, p=name_weights)])
                    continue
                if r < 0.40:
                    tokens.append(str(int(rng.integers(2, 1900 if rng.random() < 0.3 else 40))))
                    continue
                if rng.random() < 0.40:
                    word = int(rng.choice(vocab_size, p=topic_unigrams[topic]))
                else:
                    word = int(succ_idx[word, rng.choice(successors, p=succ_w)])
                tokens.append(lemmas[word])
                if k < length - 1 and rng.random() < 0.07:
                    tokens[-1] += ","
            sentence = " ".join(tokens)
            sentence = sentence[0].upper() + sentence[1:]
            end = rng.random()
            sentence += "?" if end < 0.08 else ("!" if end < 0.13 else ".")
            paragraph.append(sentence)
        chunk = " ".join(paragraph) + "\n\n"
        out.append(chunk)
        total += len(chunk)
    return "".join(out)[:n_chars]


def _resize_bilinear(img: np.ndarray, out_side: int) -> np.ndarray:
    src = img.shape[0]
    coords = (np.arange(out_side) + 0.5) * src / out_side - 0.5
    lo = np.clip(np.floor(coords).astype(int), 0, src - 1)
    hi = np.clip(lo + 1, 0, src - 1)
    frac = np.clip(coords - lo, 0.0, 1.0)
    rows = img[lo, :] * (1 - frac)[:, None] + img[hi, :] * frac[:, None]
    return rows[:, lo] * (1 - frac)[None, :] + rows[:, hi] * frac[None, :]


def digits_csv(path: str, seed: int = 0) -> int:
    """Write the 28x28 digit-sequence CSV from the bundled 8x8 digit scans.

    Rows are shuffled once (seeded) so contiguous train/valid/test splits
    are unbiased.  Returns the number of rows written.
    """
    from sklearn.datasets import load_digits

    digits = load_digits()
    images = digits.images / 16.0  # source scans are 0..16
    labels = digits.target
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 0xD1))))
    order = rng.permutation(len(labels))
    with open(path, "w", encoding="utf-8") as fh:
        for idx in order:
            big = np.clip(np.rint(_resize_bilinear(images[idx], 28) * 255.0), 0, 255)
            row = [str(int(labels[idx]))] + [str(int(v)) for v in big.reshape(-1)]
            fh.write(",".join(row) + "\n")
    return len(labels)


def main(argv=None) -> int:
    args = sys.argv[1:] if argv is None else argv
    if not args:
        print("usage: python -m rnnreg.synth OUTDIR [n_chars] [seed]", file=sys.stderr)
        return 1
    out = Path(args[0])
    out.mkdir(parents=True, exist_ok=True)
    n_chars = int(args[1]) if len(args) > 1 else 1_000_000
    seed = int(args[2]) if len(args) > 2 else 0
    corpus_path = out / "corpus.txt"
    corpus_path.write_text(text_corpus(n_chars, seed), encoding="utf-8")
    rows = digits_csv(str(out / "digits.csv"), seed)
    print(f"wrote {corpus_path} ({n_chars} chars) and {out / 'digits.csv'} ({rows} rows)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
