"""Corpus ingestion and ratio-controlled multilingual mixing.

A corpus manifest lists one entry per language with the text files backing
it. Mixing anchors English at 1/n of the stream and splits the remaining
(n-1)/n across the other languages by temperature-flattened byte share.
Document sampling is seeded and byte-reproducible.
"""

from __future__ import annotations

import json
import logging
import re
import unicodedata
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator

import numpy as np

from .errors import ConfigError, ValidationError

log = logging.getLogger(__name__)

ANCHOR_LANG = "en"

# Probability that a scanned document is emitted rather than skipped while
# cycling a source file; keeps successive passes from replaying the file in
# lockstep without buffering anything.
_PASS_KEEP_PROB = 0.5


@dataclass(frozen=True)
class CorpusSpec:
    """One language's raw text sources."""

    language_id: str
    sources: tuple[Path, ...]
    byte_count: int

    def __post_init__(self) -> None:
        if not self.language_id:
            raise ConfigError("language_id must be non-empty")
        if self.byte_count < 0:
            raise ConfigError(f"negative byte_count for {self.language_id!r}")


@dataclass(frozen=True)
class MixtureWeights:
    """Per-language sampling probabilities; sums to 1."""

    weights: dict[str, float]

    def __post_init__(self) -> None:
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ValidationError(f"mixture weights sum to {total!r}, expected 1")
        for lang, w in self.weights.items():
            if not (0.0 <= w <= 1.0):
                raise ValidationError(f"weight for {lang!r} out of [0,1]: {w}")


@dataclass(frozen=True)
class Document:
    language_id: str
    text: str


def load_manifest(path: str | Path) -> list[CorpusSpec]:
    """Read a corpus manifest: [{"lang", "paths", "bytes"?}, ...].

    "bytes" is computed from file sizes when absent.
    """
    path = Path(path)
    try:
        entries = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"manifest not found: {path}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"manifest is not valid JSON: {path}: {exc}")
    if not isinstance(entries, list) or not entries:
        raise ConfigError(f"manifest must be a non-empty JSON list: {path}")

    specs = []
    seen = set()
    for entry in entries:
        lang = entry.get("lang")
        paths = entry.get("paths")
        if not lang or not isinstance(paths, list) or not paths:
            raise ConfigError(f"manifest entry needs 'lang' and non-empty 'paths': {entry!r}")
        if lang in seen:
            raise ConfigError(f"duplicate language in manifest: {lang!r}")
        seen.add(lang)
        sources = tuple((path.parent / p).resolve() if not Path(p).is_absolute() else Path(p) for p in paths)
        for src in sources:
            if not src.is_file():
                raise ConfigError(f"corpus file missing for {lang!r}: {src}")
        byte_count = entry.get("bytes")
        if byte_count is None:
            byte_count = sum(src.stat().st_size for src in sources)
        specs.append(CorpusSpec(language_id=lang, sources=sources, byte_count=int(byte_count)))
    return specs


def normalize_text(raw: str) -> str:
    """Canonicalize a document: NFC, CRLF -> LF, strip trailing whitespace per line.

    Returns "" for documents that are empty after cleanup; callers drop those.
    """
    text = unicodedata.normalize("NFC", raw)
    text = text.replace("\r\n", "\n")
    lines = [line.rstrip() for line in text.split("\n")]
    text = "\n".join(lines).strip("\n")
    if not text.strip():
        return ""
    return text


def compute_mixture(specs: list[CorpusSpec], temperature: float) -> MixtureWeights:
    """Anchor English at 1/n, split the rest by temperature-flattened byte share.

    For non-English language l with byte share q_l among non-English bytes:
    p_l = ((n-1)/n) * q_l^(1/T) / sum_k q_k^(1/T).
    """
    if not specs:
        raise ConfigError("compute_mixture needs at least one corpus spec")
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    langs = [s.language_id for s in specs]
    if len(set(langs)) != len(langs):
        raise ConfigError("duplicate language ids in specs")

    n = len(specs)
    if n == 1:
        return MixtureWeights(weights={specs[0].language_id: 1.0})

    anchors = [s for s in specs if s.language_id == ANCHOR_LANG]
    if len(anchors) != 1:
        raise ConfigError(f"mixing {n} languages requires exactly one {ANCHOR_LANG!r} entry")

    rest = [s for s in specs if s.language_id != ANCHOR_LANG]
    total_rest = sum(s.byte_count for s in rest)
    if total_rest <= 0:
        raise ConfigError("non-English languages have zero total bytes")

    shares = np.array([s.byte_count / total_rest for s in rest], dtype=np.float64)
    flattened = shares ** (1.0 / temperature)
    flattened /= flattened.sum()

    weights = {ANCHOR_LANG: 1.0 / n}
    budget = (n - 1) / n
    for spec, w in zip(rest, flattened):
        weights[spec.language_id] = budget * float(w)
    # Absorb float residue into the anchor so the sum is exact enough for the
    # MixtureWeights invariant.
    weights[ANCHOR_LANG] += 1.0 - sum(weights.values())
    return MixtureWeights(weights=weights)


def _iter_documents(source: Path, doc_unit: str) -> Iterator[bytes]:
    """Split one file into raw documents: per line, or per blank-line block.

    Splitting happens at the byte level so a single bad document cannot take
    down the whole file; decoding is the caller's job.
    """
    try:
        data = source.read_bytes()
    except OSError as exc:
        raise ValidationError(f"unreadable corpus file: {source}: {exc}")
    if doc_unit == "line":
        yield from data.split(b"\n")
    elif doc_unit == "para":
        yield from re.split(rb"\n[ \t\r]*\n", data)
    else:
        raise ConfigError(f"unknown doc unit {doc_unit!r} (expected 'line' or 'para')")


class _LanguageScanner:
    """Cycles over one language's documents, emitting each scanned document
    with fixed probability so successive passes differ. Skips documents that
    are empty after normalization or fail to decode; counts the skips."""

    def __init__(self, spec: CorpusSpec, doc_unit: str, rng: np.random.Generator):
        self.spec = spec
        self.doc_unit = doc_unit
        self.rng = rng
        self.skipped = 0
        self._iter = self._cycle()

    def _cycle(self) -> Iterator[str]:
        while True:
            produced = False
            for source in self.spec.sources:
                for raw in _iter_documents(source, self.doc_unit):
                    try:
                        doc = normalize_text(raw.decode("utf-8"))
                    except UnicodeDecodeError:
                        self.skipped += 1
                        continue
                    if not doc:
                        self.skipped += 1
                        continue
                    produced = True
                    if self.rng.random() < _PASS_KEEP_PROB:
                        yield doc
            if not produced:
                raise ValidationError(
                    f"no usable documents for language {self.spec.language_id!r}"
                )

    def next_document(self) -> str:
        return next(self._iter)


def _whitespace_token_count(text: str) -> int:
    return len(text.split())


def _token_counter(tokenizer_handle) -> Callable[[str], int]:
    if tokenizer_handle is None:
        return _whitespace_token_count
    if hasattr(tokenizer_handle, "encode"):
        return lambda text: len(tokenizer_handle.encode(text))
    if callable(tokenizer_handle):
        return lambda text: len(tokenizer_handle(text))
    raise ConfigError("tokenizer_handle must be None, have .encode, or be callable")


def sample_documents(
    specs: list[CorpusSpec],
    weights: MixtureWeights,
    seed: int,
    token_budget: int,
    tokenizer_handle=None,
    doc_unit: str = "para",
) -> Iterator[Document]:
    """Yield a seeded, ratio-controlled document stream until the budget is met.

    Languages are drawn per document from `weights`; each language cycles its
    files sequentially with replacement. Stops once the cumulative token count
    reaches `token_budget` (whitespace tokens when no tokenizer is given).
    """
    if token_budget <= 0:
        raise ConfigError(f"token_budget must be positive, got {token_budget}")
    by_lang = {s.language_id: s for s in specs}
    for lang in weights.weights:
        if lang not in by_lang:
            raise ConfigError(f"mixture language {lang!r} missing from specs")
    count_tokens = _token_counter(tokenizer_handle)

    rng = np.random.default_rng(seed)
    langs = sorted(weights.weights)
    probs = np.array([weights.weights[l] for l in langs], dtype=np.float64)
    probs /= probs.sum()
    scanners = {
        lang: _LanguageScanner(by_lang[lang], doc_unit, np.random.default_rng(rng.integers(2**63)))
        for lang in langs
    }

    emitted_tokens = 0
    while emitted_tokens < token_budget:
        lang = langs[int(rng.choice(len(langs), p=probs))]
        doc = scanners[lang].next_document()
        emitted_tokens += count_tokens(doc)
        yield Document(language_id=lang, text=doc)

    total_skipped = sum(s.skipped for s in scanners.values())
    if total_skipped:
        log.info("sample_documents skipped %d empty/invalid documents", total_skipped)
