"""Synthetic paired-language corpora for desk-scale experiments.

Two languages share a hidden first-order Markov chain over "concepts"; each
language renders concepts as its own words, with a configurable fraction of
the lexicon shared verbatim (loanwords). The shared grammar means a model
pretrained on one language carries structure the other can reuse, which is
exactly the situation vocabulary adaptation targets.

The module also bundles a tiny real parallel snippet set (Universal
Declaration of Human Rights, article 1) across scripts, used by the
fragmentation evaluation alongside the synthetic renditions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

LATIN_ALPHABET = "abcdefghijklmnopqrstuvwxyz"
GLYPH_ALPHABET = "αβγδεζηθικλμνξoπρστυφχψω"

# Article 1 of the UDHR, a public-domain parallel text.
PARALLEL_SNIPPETS: dict[str, str] = {
    "latin-en": (
        "All human beings are born free and equal in dignity and rights. "
        "They are endowed with reason and conscience and should act towards "
        "one another in a spirit of brotherhood."
    ),
    "latin-sw": (
        "Watu wote wamezaliwa huru, hadhi na haki zao ni sawa. "
        "Wote wamejaliwa akili na dhamiri, hivyo yapasa watendeane kindugu."
    ),
    "greek": (
        "Όλοι οι άνθρωποι γεννιούνται ελεύθεροι και ίσοι στην αξιοπρέπεια και τα "
        "δικαιώματα. Είναι προικισμένοι με λογική και συνείδηση, και οφείλουν να "
        "συμπεριφέρονται μεταξύ τους με πνεύμα αδελφοσύνης."
    ),
    "cyrillic": (
        "Все люди рождаются свободными и равными в своем достоинстве и правах. "
        "Они наделены разумом и совестью и должны поступать в отношении друг "
        "друга в духе братства."
    ),
}


@dataclass(frozen=True)
class ConceptModel:
    """Zipf-ish unigram over concepts plus sparse Markov transitions."""

    start_probs: np.ndarray  # (n,)
    successor_ids: np.ndarray  # (n, branching)
    successor_probs: np.ndarray  # (n, branching)

    def __post_init__(self) -> None:
        object.__setattr__(self, "start_cdf", np.cumsum(self.start_probs))
        object.__setattr__(self, "successor_cdfs", np.cumsum(self.successor_probs, axis=1))

    @property
    def n_concepts(self) -> int:
        return len(self.start_probs)


@dataclass(frozen=True)
class LanguagePair:
    concepts: ConceptModel
    lexicons: dict[str, list[str]]  # language id -> concept id -> word


def _make_concepts(rng: np.random.Generator, n_concepts: int, branching: int) -> ConceptModel:
    ranks = np.arange(1, n_concepts + 1, dtype=np.float64)
    start = 1.0 / (ranks + 2.7)
    start /= start.sum()
    ids = np.empty((n_concepts, branching), dtype=np.int64)
    probs = np.empty((n_concepts, branching), dtype=np.float64)
    for c in range(n_concepts):
        ids[c] = rng.choice(n_concepts, size=branching, replace=False)
        w = rng.dirichlet(np.full(branching, 0.3))
        probs[c] = w
    return ConceptModel(start_probs=start, successor_ids=ids, successor_probs=probs)


def _make_lexicon(
    rng: np.random.Generator, n_concepts: int, alphabet: str, taken: set[str]
) -> list[str]:
    letters = list(alphabet)
    words: list[str] = []
    while len(words) < n_concepts:
        length = int(rng.integers(2, 8))
        word = "".join(rng.choice(letters, size=length))
        if word not in taken:
            taken.add(word)
            words.append(word)
    return words


def make_language_pair(
    seed: int,
    languages: tuple[str, str] = ("en", "xx"),
    n_concepts: int = 1500,
    branching: int = 8,
    shared_fraction: float = 0.2,
    target_script: str = "latin",
) -> LanguagePair:
    """Two lexicalizations of one concept chain, sharing part of the lexicon.

    Sharing is frequency-weighted: the most frequent concepts keep the source
    word in the target language, the way loanwords and names behave. Concept
    ids are frequency-ranked (id 0 most frequent), so the shared set is a
    prefix.
    """
    rng = np.random.default_rng(seed)
    concepts = _make_concepts(rng, n_concepts, branching)
    taken: set[str] = set()
    src_lex = _make_lexicon(rng, n_concepts, LATIN_ALPHABET, taken)
    tgt_alpha = LATIN_ALPHABET if target_script == "latin" else GLYPH_ALPHABET
    tgt_lex = _make_lexicon(rng, n_concepts, tgt_alpha, taken)
    n_shared = int(round(shared_fraction * n_concepts))
    for c in range(n_shared):
        tgt_lex[c] = src_lex[c]
    return LanguagePair(concepts=concepts, lexicons={languages[0]: src_lex, languages[1]: tgt_lex})


def _sample_concepts(rng: np.random.Generator, model: ConceptModel, n_words: int) -> list[int]:
    # inverse-CDF draws; per-call rng.choice overhead is too slow at corpus scale
    start_cdf = model.start_cdf
    succ_cdfs = model.successor_cdfs
    succ_ids = model.successor_ids
    u = rng.random(n_words)
    c = int(np.searchsorted(start_cdf, u[0], side="right").clip(0, model.n_concepts - 1))
    out = [c]
    for t in range(1, n_words):
        k = int(np.searchsorted(succ_cdfs[c], u[t], side="right"))
        c = int(succ_ids[c, min(k, succ_ids.shape[1] - 1)])
        out.append(c)
    return out


def _render(concept_ids: list[int], lexicon: list[str], rng: np.random.Generator) -> str:
    commas = rng.random(len(concept_ids)) < 0.08
    parts = []
    for i, c in enumerate(concept_ids):
        word = lexicon[c]
        if commas[i] and i + 1 < len(concept_ids):
            word += ","
        parts.append(word)
    return " ".join(parts) + "."


def sample_parallel_documents(
    pair: LanguagePair, seed: int, n_docs: int, sentences_per_doc: tuple[int, int] = (2, 4)
) -> dict[str, list[str]]:
    """Content-matched documents in every language of the pair."""
    rng = np.random.default_rng(seed)
    docs: dict[str, list[str]] = {lang: [] for lang in pair.lexicons}
    for doc_idx in range(n_docs):
        n_sent = int(rng.integers(sentences_per_doc[0], sentences_per_doc[1] + 1))
        sentences = [
            _sample_concepts(rng, pair.concepts, int(rng.integers(4, 15)))
            for _ in range(n_sent)
        ]
        for lang, lexicon in pair.lexicons.items():
            # same punctuation stream for every rendition of this document
            render_rng = np.random.default_rng((seed, doc_idx))
            rendered = [_render(s, lexicon, render_rng) for s in sentences]
            docs[lang].append(" ".join(rendered))
    return docs


def sample_documents_for(
    pair: LanguagePair, lang: str, seed: int, n_words: int
) -> list[str]:
    """Independent monolingual documents totalling roughly n_words words."""
    rng = np.random.default_rng(seed)
    lexicon = pair.lexicons[lang]
    docs: list[str] = []
    produced = 0
    while produced < n_words:
        n_sent = int(rng.integers(2, 5))
        sentences = []
        for _ in range(n_sent):
            k = int(rng.integers(4, 15))
            sentences.append(_render(_sample_concepts(rng, pair.concepts, k), lexicon, rng))
            produced += k
        docs.append(" ".join(sentences))
    return docs


def write_corpus(
    out_dir: str | Path,
    seed: int,
    languages: tuple[str, str] = ("en", "xx"),
    train_words: int = 150_000,
    heldout_words: int = 10_000,
    n_concepts: int = 1500,
    shared_fraction: float = 0.2,
    target_script: str = "latin",
) -> dict:
    """Materialize train/heldout files plus manifests; returns a summary dict.

    Layout: <out_dir>/train/<lang>.txt, <out_dir>/heldout/<lang>.txt,
    <out_dir>/manifest.json, <out_dir>/heldout_manifest.json. Documents are
    blank-line separated (the "para" unit).
    """
    out = Path(out_dir)
    pair = make_language_pair(
        seed,
        languages=languages,
        n_concepts=n_concepts,
        shared_fraction=shared_fraction,
        target_script=target_script,
    )
    summary = {"seed": seed, "languages": list(languages), "files": {}}
    for split, words, offset in (("train", train_words, 1), ("heldout", heldout_words, 2)):
        split_dir = out / split
        split_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for j, lang in enumerate(languages):
            docs = sample_documents_for(pair, lang, seed * 1_000_003 + offset * 101 + j, words)
            path = split_dir / f"{lang}.txt"
            path.write_text("\n\n".join(docs) + "\n", encoding="utf-8")
            entries.append({"lang": lang, "paths": [f"{split}/{lang}.txt"]})
            summary["files"][f"{split}/{lang}"] = str(path)
        manifest_name = "manifest.json" if split == "train" else "heldout_manifest.json"
        (out / manifest_name).write_text(json.dumps(entries, indent=2), encoding="utf-8")
    summary["manifest"] = str(out / "manifest.json")
    summary["heldout_manifest"] = str(out / "heldout_manifest.json")
    return summary
