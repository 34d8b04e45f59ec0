"""Train the contrastive text-music model on a small synthetic corpus.

Thirty-two token snippets, each paired with a unique caption word, learned
from scratch in a few seconds. Prints the loss curve, writes a checkpoint
and the history CSV, then shows retrieval working.
"""

from pathlib import Path

import numpy as np

from textmuse.align import AlignConfig, AlignModel, encode_music, encode_text, train, write_history_csv
from textmuse.dataset import PairExample, SplitSet
from textmuse.remi import from_text

OUT = Path(__file__).parent / "out"

WORDS = (
    "calm bright dark stormy gentle driving sparse lush brisk mellow airy tense "
    "warm icy bold shy grand plain vivid muted rapid slow dense light deep thin "
    "crisp soft loud quiet rough smooth"
).split()


def corpus():
    examples = []
    for i, word in enumerate(WORDS):
        music = "\n".join([f"Note_Pitch_{30 + i}"] * 4)
        examples.append(PairExample(music, word, "positive", f"s{i}"))
    return SplitSet(tuple(examples[:28]), tuple(examples[28:]), (), seed=0)


def main():
    config = AlignConfig(embed_dim=64, batch_size=8, epochs=120, seed=0)
    model, history = train(corpus(), config)

    for rec in history[:: max(1, len(history) // 8)]:
        print(f"epoch {rec.epoch:3d}  train {rec.train_loss:.4f}  val {rec.val_loss:.4f}")
    print(f"final temperature: {model.temperature:.4f}")

    OUT.mkdir(exist_ok=True)
    model.save(OUT / "align.npz")
    write_history_csv(history, OUT / "history.csv")
    print(f"wrote {OUT / 'align.npz'} and {OUT / 'history.csv'}")

    # retrieval: every caption should pick out its own snippet
    music_vecs = np.stack(
        [encode_music(from_text("\n".join([f"Note_Pitch_{30 + i}"] * 4)), model) for i in range(32)]
    )
    hits = 0
    for i, word in enumerate(WORDS):
        sims = music_vecs @ encode_text(word, model)
        hits += int(np.argmax(sims) == i)
    print(f"caption->snippet retrieval: {hits}/32")


if __name__ == "__main__":
    main()
