"""revocab: swap a language model's vocabulary without retraining its body.

Train a subword vocabulary, initialize a learnable adapter between the new
vocabulary and a frozen base model's embeddings, train the adapter with an
LM-plus-auxiliary loss, merge into a standalone checkpoint, and measure the
fragmentation and quality effects.
"""

__version__ = "0.1.0"
