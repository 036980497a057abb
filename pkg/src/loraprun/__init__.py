"""LoRA and structured layer pruning on a small numpy encoder-decoder Transformer."""

__version__ = "0.1.0"
