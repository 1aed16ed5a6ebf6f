"""Byte-level BPE tokenizer with guaranteed byte fallback.

Every vocabulary carries the 256 single-byte tokens plus three specials, so
encoding is total on valid UTF-8 and never produces <unk>. Pretokenization
splits text into chunks of "optional ASCII space + non-whitespace run", with
any other whitespace character standing alone; a word-initial token therefore
carries its leading space inside its byte string and decoding is plain
concatenation. Merges never cross pretoken boundaries.

Training is classic pair-count BPE, deterministic by construction: ties in
pair frequency break toward the lexicographically smaller byte pair.
"""

from __future__ import annotations

import base64
import heapq
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ConfigError, ValidationError

UNK, BOS, EOS = b"<unk>", b"<s>", b"</s>"
_SPECIAL_STRINGS = (UNK, BOS, EOS)
N_SPECIALS = 3
N_BYTES = 256
MIN_VOCAB = N_SPECIALS + N_BYTES  # 259

_PRETOKEN_RE = re.compile(r" ?\S+|\s")
VOCAB_FILE_VERSION = 1


@dataclass(frozen=True)
class Vocabulary:
    """Ordered token set: ids are dense, tokens[i] has id i.

    Layout: specials (unk=0, bos=1, eos=2), the 256 byte tokens (3..258),
    then merged tokens in creation order.
    """

    tokens: tuple[bytes, ...]
    specials: dict[str, int] = field(default_factory=lambda: {"unk": 0, "bos": 1, "eos": 2})

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(self.tokens))
        if len(set(self.tokens)) != len(self.tokens):
            dupes = [t for t, c in Counter(self.tokens).items() if c > 1]
            raise ValidationError(f"duplicate tokens in vocabulary: {dupes[:3]!r}")
        if self.tokens[:N_SPECIALS] != _SPECIAL_STRINGS:
            raise ValidationError("vocabulary must start with the three special tokens")
        expected_bytes = tuple(bytes([b]) for b in range(N_BYTES))
        if self.tokens[N_SPECIALS:MIN_VOCAB] != expected_bytes:
            raise ValidationError("vocabulary must contain all 256 byte tokens after specials")
        if sorted(self.specials.values()) != [0, 1, 2] or set(self.specials) != {"unk", "bos", "eos"}:
            raise ValidationError(f"bad specials map: {self.specials!r}")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    def index_of(self, token: bytes) -> int:
        return self._index[token]

    def get_index(self, token: bytes) -> int | None:
        return self._index.get(token)

    @property
    def unk_id(self) -> int:
        return self.specials["unk"]

    @property
    def bos_id(self) -> int:
        return self.specials["bos"]

    @property
    def eos_id(self) -> int:
        return self.specials["eos"]

    def is_special(self, token_id: int) -> bool:
        return token_id < N_SPECIALS

    def is_byte(self, token_id: int) -> bool:
        return N_SPECIALS <= token_id < MIN_VOCAB


def _base_tokens() -> tuple[bytes, ...]:
    return _SPECIAL_STRINGS + tuple(bytes([b]) for b in range(N_BYTES))


@dataclass(frozen=True)
class TokenizerModel:
    """A vocabulary plus its ordered merge rules."""

    merges: tuple[tuple[bytes, bytes], ...]
    vocabulary: Vocabulary

    def __post_init__(self) -> None:
        object.__setattr__(self, "merges", tuple((l, r) for l, r in self.merges))
        derived = _base_tokens() + tuple(l + r for l, r in self.merges)
        if derived != self.vocabulary.tokens:
            raise ValidationError("merge list does not reconstruct the vocabulary")
        object.__setattr__(
            self, "_ranks", {pair: rank for rank, pair in enumerate(self.merges)}
        )
        object.__setattr__(self, "_cache", {})

    @property
    def vocab_size(self) -> int:
        return len(self.vocabulary)

    def _apply_merges(self, data: bytes) -> list[bytes]:
        symbols = [data[i : i + 1] for i in range(len(data))]
        ranks = self._ranks
        while len(symbols) > 1:
            best_rank = None
            for i in range(len(symbols) - 1):
                rank = ranks.get((symbols[i], symbols[i + 1]))
                if rank is not None and (best_rank is None or rank < best_rank):
                    best_rank = rank
            if best_rank is None:
                break
            left, right = self.merges[best_rank]
            merged = left + right
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == left and symbols[i + 1] == right:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            symbols = out
        return symbols

    def _encode_chunk(self, data: bytes) -> list[int]:
        cached = self._cache.get(data)
        if cached is None:
            index = self.vocabulary.index_of
            cached = [index(s) for s in self._apply_merges(data)]
            if len(self._cache) < 200_000:
                self._cache[data] = cached
        return cached

    def encode(self, text: str) -> list[int]:
        """Tokenize valid UTF-8 text; total, never emits specials."""
        ids: list[int] = []
        for chunk in _PRETOKEN_RE.findall(text):
            ids.extend(self._encode_chunk(chunk.encode("utf-8")))
        return ids

    def encode_token_bytes(self, data: bytes) -> list[int]:
        """Tokenize a raw byte string, e.g. another vocabulary's token.

        Valid UTF-8 goes through normal pretokenization; anything else is
        treated as a single chunk so classification still gets an answer.
        """
        try:
            return self.encode(data.decode("utf-8"))
        except UnicodeDecodeError:
            index = self.vocabulary.index_of
            return [index(s) for s in self._apply_merges(data)]

    def decode(self, ids: Iterable[int]) -> str:
        """Concatenate token byte strings; exact inverse of encode."""
        tokens = self.vocabulary.tokens
        parts = []
        for i in ids:
            if not 0 <= i < len(tokens):
                raise ValidationError(f"token id out of range: {i} (vocab {len(tokens)})")
            parts.append(tokens[i])
        return b"".join(parts).decode("utf-8", errors="replace")


def _pretoken_counts(corpus, per_language_token_cap: int) -> Counter:
    """Accumulate pretoken frequencies, capping whitespace tokens per language."""
    counts: Counter = Counter()
    used: dict[str, int] = {}
    saw_any = False
    for doc in corpus:
        lang, text = doc.language_id, doc.text
        spent = used.get(lang, 0)
        if spent >= per_language_token_cap:
            continue
        words = text.split()
        if spent + len(words) > per_language_token_cap:
            text = " ".join(words[: per_language_token_cap - spent])
        used[lang] = spent + min(len(words), per_language_token_cap - spent)
        saw_any = saw_any or bool(text)
        for chunk in _PRETOKEN_RE.findall(text):
            counts[chunk.encode("utf-8")] += 1
    if not saw_any:
        raise ValidationError("cannot train a vocabulary on an empty document stream")
    return counts


def train_vocab(corpus, target_size: int, per_language_token_cap: int = 2_000_000) -> TokenizerModel:
    """Learn BPE merges until the vocabulary reaches target_size.

    Stops early when no adjacent pair occurs at least twice. A merge whose
    result collides with an existing token or a special string is skipped, so
    every merge introduces exactly one new token.
    """
    if target_size < MIN_VOCAB:
        raise ConfigError(f"target_size must be at least {MIN_VOCAB}, got {target_size}")
    if per_language_token_cap <= 0:
        raise ConfigError("per_language_token_cap must be positive")
    pretokens = _pretoken_counts(corpus, per_language_token_cap)

    words: list[list[bytes]] = []
    word_counts: list[int] = []
    for data, count in pretokens.items():
        if len(data) > 1:
            words.append([data[i : i + 1] for i in range(len(data))])
            word_counts.append(count)

    pair_counts: dict[tuple[bytes, bytes], int] = {}
    pair_words: dict[tuple[bytes, bytes], set[int]] = {}

    def add_word(wid: int, sign: int) -> None:
        symbols = words[wid]
        count = word_counts[wid] * sign
        for i in range(len(symbols) - 1):
            pair = (symbols[i], symbols[i + 1])
            pair_counts[pair] = pair_counts.get(pair, 0) + count
            if sign > 0:
                pair_words.setdefault(pair, set()).add(wid)

    for wid in range(len(words)):
        add_word(wid, +1)

    heap: list[tuple[int, tuple[bytes, bytes]]] = [
        (-count, pair) for pair, count in pair_counts.items()
    ]
    heapq.heapify(heap)

    existing = set(_base_tokens())
    merges: list[tuple[bytes, bytes]] = []
    n_merges_wanted = target_size - MIN_VOCAB
    banned: set[tuple[bytes, bytes]] = set()

    while len(merges) < n_merges_wanted and heap:
        neg_count, pair = heapq.heappop(heap)
        count = pair_counts.get(pair, 0)
        if count != -neg_count or count < 2:
            continue  # stale heap entry, or pair no longer frequent enough
        if pair in banned:
            continue
        merged = pair[0] + pair[1]
        if merged in existing:
            banned.add(pair)
            continue

        merges.append(pair)
        existing.add(merged)
        changed: set[tuple[bytes, bytes]] = set()
        for wid in sorted(pair_words.get(pair, ())):
            symbols = words[wid]
            changed.update((symbols[i], symbols[i + 1]) for i in range(len(symbols) - 1))
            add_word(wid, -1)
            out = []
            i = 0
            while i < len(symbols):
                if i + 1 < len(symbols) and symbols[i] == pair[0] and symbols[i + 1] == pair[1]:
                    out.append(merged)
                    i += 2
                else:
                    out.append(symbols[i])
                    i += 1
            words[wid] = out
            add_word(wid, +1)
            changed.update((out[i], out[i + 1]) for i in range(len(out) - 1))
        pair_counts.pop(pair, None)
        pair_words.pop(pair, None)
        changed.discard(pair)
        # Every pair whose count moved needs a fresh heap entry, or it would
        # be dropped as stale the next time it surfaces.
        for p in changed:
            if pair_counts.get(p, 0) >= 2:
                heapq.heappush(heap, (-pair_counts[p], p))

    tokens = _base_tokens() + tuple(l + r for l, r in merges)
    return TokenizerModel(merges=tuple(merges), vocabulary=Vocabulary(tokens=tokens))


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def save_vocab(model: TokenizerModel, path: str | Path) -> None:
    payload = {
        "version": VOCAB_FILE_VERSION,
        "merges": [[_b64(l), _b64(r)] for l, r in model.merges],
        "tokens": [_b64(t) for t in model.vocabulary.tokens],
        "specials": model.vocabulary.specials,
    }
    Path(path).write_text(json.dumps(payload), encoding="utf-8")


def load_vocab(path: str | Path) -> TokenizerModel:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ValidationError(f"vocabulary file not found: {path}")
    except json.JSONDecodeError as exc:
        raise ValidationError(f"malformed vocabulary file {path}: {exc}")
    if not isinstance(payload, dict) or payload.get("version") != VOCAB_FILE_VERSION:
        raise ValidationError(
            f"unsupported vocabulary file version in {path}: {payload.get('version')!r}"
        )
    try:
        merges = tuple(
            (base64.b64decode(l, validate=True), base64.b64decode(r, validate=True))
            for l, r in payload["merges"]
        )
        tokens = tuple(base64.b64decode(t, validate=True) for t in payload["tokens"])
        specials = {k: int(v) for k, v in payload["specials"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise ValidationError(f"malformed vocabulary file {path}: {exc}")
    vocab = Vocabulary(tokens=tokens, specials=specials)
    return TokenizerModel(merges=merges, vocabulary=vocab)
