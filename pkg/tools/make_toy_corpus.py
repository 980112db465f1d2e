"""Regenerate the bundled character-level toy corpus (src/ess/data/toychar).

Sentences come from a small probabilistic grammar; output follows the
PTB character format: one sentence per line, characters separated by
spaces and ``_`` marking word boundaries.
"""

import os
import random

DETS = ["the", "a", "every", "some", "no", "this", "that"]
ADJS = ["small", "old", "red", "quiet", "busy", "bright", "cold", "green", "heavy", "strange"]
NOUNS = ["cat", "dog", "market", "river", "teacher", "engine", "garden", "letter", "city",
         "farmer", "window", "song", "report", "bank", "train", "child", "storm", "price"]
VERBS = ["sees", "likes", "builds", "moves", "finds", "opens", "watches", "sells", "holds", "follows"]
IVERBS = ["sleeps", "falls", "rises", "waits", "returns", "grows", "ends", "stops"]
ADVS = ["slowly", "again", "today", "quickly", "often", "never", "later"]
PREPS = ["near", "behind", "under", "with", "across", "before"]


def noun_phrase(rng):
    words = [rng.choice(DETS)]
    if rng.random() < 0.45:
        words.append(rng.choice(ADJS))
    words.append(rng.choice(NOUNS))
    if rng.random() < 0.2:
        words += [rng.choice(PREPS)] + noun_phrase(rng)
    return words


def sentence(rng):
    words = noun_phrase(rng)
    if rng.random() < 0.6:
        words += [rng.choice(VERBS)] + noun_phrase(rng)
    else:
        words.append(rng.choice(IVERBS))
    if rng.random() < 0.35:
        words.append(rng.choice(ADVS))
    if rng.random() < 0.15:
        words += ["and"] + sentence(rng)
    return words


def as_chars(words):
    return " ".join("_".join(words))


def main(out_dir, total_bytes=100_000, seed=1234):
    rng = random.Random(seed)
    lines, size = [], 0
    while size < total_bytes:
        line = as_chars(sentence(rng))
        lines.append(line)
        size += len(line) + 1
    n = len(lines)
    cut1, cut2 = int(n * 0.8), int(n * 0.9)
    os.makedirs(out_dir, exist_ok=True)
    for name, chunk in (("train", lines[:cut1]), ("valid", lines[cut1:cut2]), ("test", lines[cut2:])):
        with open(os.path.join(out_dir, f"{name}.txt"), "w", encoding="utf-8") as fh:
            fh.write("\n".join(chunk) + "\n")


if __name__ == "__main__":
    here = os.path.dirname(os.path.abspath(__file__))
    main(os.path.join(here, "..", "src", "ess", "data", "toychar"))
