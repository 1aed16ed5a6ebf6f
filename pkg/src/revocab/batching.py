"""Deterministic token packing: documents -> fixed-length windows -> batches."""

from __future__ import annotations

from typing import Iterable, Iterator

import numpy as np

from .corpus import Document
from .errors import ValidationError


def pack_windows(
    documents: Iterable[Document | str],
    tokenizer,
    seq_len: int,
    append_eos: bool = True,
) -> np.ndarray:
    """Tokenize documents into one flat stream and cut it into full windows.

    An EOS token separates documents so the model sees boundaries. The tail
    that does not fill a window is dropped. Returns an (n_windows, seq_len)
    int64 array.
    """
    eos = tokenizer.vocabulary.eos_id if append_eos else None
    ids: list[int] = []
    for doc in documents:
        text = doc.text if isinstance(doc, Document) else doc
        ids.extend(tokenizer.encode(text))
        if eos is not None:
            ids.append(eos)
    n_windows = len(ids) // seq_len
    if n_windows == 0:
        raise ValidationError(
            f"corpus too small: {len(ids)} tokens cannot fill one window of {seq_len}"
        )
    flat = np.array(ids[: n_windows * seq_len], dtype=np.int64)
    return flat.reshape(n_windows, seq_len)


def batch_cycle(windows: np.ndarray, batch_size: int, seed: int) -> Iterator[np.ndarray]:
    """Yield (batch_size, seq_len) batches forever, reshuffling every epoch."""
    if windows.ndim != 2 or len(windows) == 0:
        raise ValidationError("windows must be a non-empty 2-D array")
    rng = np.random.default_rng(seed)
    while True:
        order = rng.permutation(len(windows))
        for start in range(0, len(order) - batch_size + 1, batch_size):
            yield windows[order[start : start + batch_size]]
        if len(windows) < batch_size:
            raise ValidationError(
                f"{len(windows)} windows cannot fill a batch of {batch_size}"
            )
