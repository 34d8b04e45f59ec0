"""Text-conditioned symbolic music toolkit.

Pipeline stages, each in its own module:

- ``midi_io``     Standard MIDI File parsing/writing and 16th-note quantization
- ``remi``        event vocabulary, tokenizer/detokenizer, chord detection, repair
- ``attributes``  per-bar rhythmic-intensity and polyphony scores with octile classes
- ``metrics``     objective evaluation metrics over quantized pieces
- ``dataset``     segmentation, caption pairing, and split construction
- ``align``       contrastive text-music embedding model (pure numpy, hand-rolled grads)
- ``generate``    autoregressive token decoder with nucleus sampling and
                  alignment-guided tuning
- ``cli``         command-line front end over all of the above
"""

__version__ = "0.1.0"

__all__ = [
    "midi_io",
    "remi",
    "attributes",
    "metrics",
    "dataset",
    "align",
    "generate",
    "cli",
]
