#!/usr/bin/env python3
"""Regenerate data/sample_corpus.txt: deterministic synthetic English-like text.

The shipped corpus is generated, not scraped, so it carries no license
baggage. Sentences mix high-frequency function words with a long tail of
content words, which gives a byte-level model realistic punctuation,
whitespace, and word-shape statistics to learn from.
"""

import argparse
from pathlib import Path

import numpy as np

FUNCTION_WORDS = (
    "the of and to a in that it is was he for on are as with his they at be "
    "this have from or had by hot word but what some we can out other were "
    "all there when up use your how said an each she which do their time if "
    "will way about many then them would write like so these her long make "
    "thing see him two has look more day could go come did my no most who "
    "over know than call first people may down been now find any new part"
).split()

CONTENT_WORDS = (
    "river mountain harvest lantern whisper garden thunder village machine "
    "journey library winter spider blossom copper anchor meadow compass "
    "granite chimney sparrow harbor pattern engine mirror walnut pepper "
    "signal fortune cricket timber canvas saddle marble ribbon farmer "
    "bridge castle valley forest stream window basket candle feather "
    "hammer needle orchard pebble quarry russet shelter tunnel humble "
    "velvet wonder yonder zephyr bramble clover drizzle ember foxglove "
    "gossamer heather ivory juniper kestrel lilac mulberry nettle otter "
    "plum quince rosemary saffron thistle umber violet willow yarrow "
    "procrastination chronicle melancholy labyrinth kaleidoscope "
    "serendipity quintessential ephemeral luminous resilience"
).split()

ENDINGS = [".", ".", ".", ".", "?", "!"]


def sentence(rng, rotation):
    words = []
    length = int(rng.integers(5, 15))
    for i in range(length):
        if rng.random() < 0.55:
            words.append(FUNCTION_WORDS[int(rng.integers(len(FUNCTION_WORDS)))])
        else:
            # zipf-ish tail over content words, rotated so popularity moves around
            idx = (min(int(rng.zipf(1.4)) - 1, len(CONTENT_WORDS) - 1) + rotation)
            words.append(CONTENT_WORDS[idx % len(CONTENT_WORDS)])
        if 2 <= i <= length - 3 and rng.random() < 0.08:
            words[-1] += ","
    text = " ".join(words)
    return text[0].upper() + text[1:] + ENDINGS[int(rng.integers(len(ENDINGS)))]


def main():
    parser = argparse.ArgumentParser()
    parser.add_argument("--out", default="data/sample_corpus.txt")
    parser.add_argument("--seed", type=int, default=20240901)
    parser.add_argument("--bytes", type=int, default=400_000)
    args = parser.parse_args()
    rng = np.random.default_rng(args.seed)
    parts = []
    total = 0
    while total < args.bytes:
        rotation = int(rng.integers(len(CONTENT_WORDS)))
        paragraph = " ".join(sentence(rng, rotation)
                             for _ in range(int(rng.integers(3, 7))))
        parts.append(paragraph)
        total += len(paragraph) + 2
    text = "\n\n".join(parts) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    print(f"wrote {out} ({len(text)} bytes)")


if __name__ == "__main__":
    main()
