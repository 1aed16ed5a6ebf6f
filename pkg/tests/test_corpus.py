import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from revocab import corpus
from revocab.corpus import CorpusSpec, MixtureWeights, compute_mixture, normalize_text, sample_documents
from revocab.errors import ConfigError


def spec(lang, byte_count=100):
    return CorpusSpec(language_id=lang, sources=(), byte_count=byte_count)


# ---------------------------------------------------------------- mixture


def test_mixture_equal_bytes_uniform():
    specs = [spec("en"), spec("a"), spec("b"), spec("c"), spec("d")]
    w = compute_mixture(specs, temperature=1.0)
    for lang in ("en", "a", "b", "c", "d"):
        assert w.weights[lang] == pytest.approx(0.2, abs=1e-12)


def test_mixture_hand_arithmetic():
    # q_a = 100/400, q_b = 300/400; at T=1 shares stay proportional to bytes
    specs = [spec("en", 999), spec("a", 100), spec("b", 300)]
    w = compute_mixture(specs, temperature=1.0)
    assert w.weights["en"] == pytest.approx(1 / 3, abs=1e-12)
    assert w.weights["a"] == pytest.approx(1 / 6, abs=1e-12)
    assert w.weights["b"] == pytest.approx(1 / 2, abs=1e-12)


def test_mixture_high_temperature_flattens():
    specs = [spec("en", 1), spec("a", 100), spec("b", 300)]
    w = compute_mixture(specs, temperature=1e9)
    for lang in ("en", "a", "b"):
        assert w.weights[lang] == pytest.approx(1 / 3, abs=1e-6)


def test_mixture_single_language_is_one():
    assert compute_mixture([spec("en")], 2.0).weights == {"en": 1.0}
    assert compute_mixture([spec("xx")], 2.0).weights == {"xx": 1.0}


def test_mixture_errors():
    with pytest.raises(ConfigError):
        compute_mixture([], 1.0)
    with pytest.raises(ConfigError):
        compute_mixture([spec("en"), spec("a")], 0.0)
    with pytest.raises(ConfigError):
        compute_mixture([spec("a"), spec("b")], 1.0)  # no anchor
    with pytest.raises(ConfigError):
        compute_mixture([spec("en"), spec("a", 0)], 1.0)  # zero non-English bytes


@settings(max_examples=200, deadline=None)
@given(
    byte_counts=st.lists(st.integers(min_value=1, max_value=10**9), min_size=1, max_size=12),
    temperature=st.floats(min_value=0.05, max_value=50, allow_nan=False),
)
def test_mixture_sums_to_one(byte_counts, temperature):
    specs = [spec("en", 1000)] + [spec(f"l{i}", b) for i, b in enumerate(byte_counts)]
    w = compute_mixture(specs, temperature)
    assert abs(sum(w.weights.values()) - 1.0) <= 1e-9
    assert all(v >= 0 for v in w.weights.values())


@settings(max_examples=100, deadline=None)
@given(
    byte_counts=st.lists(st.integers(min_value=1, max_value=10**6), min_size=2, max_size=8),
    scale=st.integers(min_value=1, max_value=1000),
    temperature=st.floats(min_value=0.1, max_value=10, allow_nan=False),
)
def test_mixture_scale_invariant(byte_counts, scale, temperature):
    base = [spec("en", 77)] + [spec(f"l{i}", b) for i, b in enumerate(byte_counts)]
    scaled = [spec("en", 77)] + [
        spec(f"l{i}", b * scale) for i, b in enumerate(byte_counts)
    ]
    w1 = compute_mixture(base, temperature)
    w2 = compute_mixture(scaled, temperature)
    for lang in w1.weights:
        assert w1.weights[lang] == pytest.approx(w2.weights[lang], abs=1e-12)


def test_mixture_weights_validation():
    with pytest.raises(Exception):
        MixtureWeights(weights={"en": 0.5, "a": 0.4})


# ---------------------------------------------------------- normalize_text


def test_normalize_stated_rules():
    assert normalize_text("a\r\nb ") == "a\nb"


def test_normalize_idempotent_examples():
    for text in ("a\r\nb ", "x  y\n\nz\t", "καλημέρα  ", "a\n \nb"):
        once = normalize_text(text)
        assert normalize_text(once) == once


def test_normalize_nfc():
    composed = "café"
    decomposed = "café"
    assert normalize_text(composed) == normalize_text(decomposed)


def test_normalize_drops_empty():
    assert normalize_text("   \n  \t\n") == ""


@settings(max_examples=200, deadline=None)
@given(st.text(max_size=200))
def test_normalize_idempotent_property(text):
    once = normalize_text(text)
    assert normalize_text(once) == once


# -------------------------------------------------------- sample_documents


@pytest.fixture
def two_lang_corpus(tmp_path):
    rng = np.random.default_rng(42)
    entries = []
    for lang, word in (("en", "alpha"), ("xx", "omega")):
        docs = []
        for i in range(200):
            n = int(rng.integers(8, 14))
            docs.append(" ".join(f"{word}{int(rng.integers(50))}" for _ in range(n)))
        path = tmp_path / f"{lang}.txt"
        path.write_text("\n\n".join(docs), encoding="utf-8")
        entries.append({"lang": lang, "paths": [path.name]})
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps(entries), encoding="utf-8")
    return corpus.load_manifest(manifest)


def test_sample_documents_deterministic(two_lang_corpus):
    w = compute_mixture(two_lang_corpus, 2.0)
    a = list(sample_documents(two_lang_corpus, w, seed=7, token_budget=2000))
    b = list(sample_documents(two_lang_corpus, w, seed=7, token_budget=2000))
    assert [(d.language_id, d.text) for d in a] == [(d.language_id, d.text) for d in b]
    c = list(sample_documents(two_lang_corpus, w, seed=8, token_budget=2000))
    assert [(d.language_id, d.text) for d in a] != [(d.language_id, d.text) for d in c]


def test_sample_documents_degenerate_weights(two_lang_corpus):
    w = MixtureWeights(weights={"en": 1.0, "xx": 0.0})
    docs = list(sample_documents(two_lang_corpus, w, seed=1, token_budget=100))
    assert docs and all(d.language_id == "en" for d in docs)


def test_sample_documents_share_converges(two_lang_corpus):
    w = MixtureWeights(weights={"en": 0.5, "xx": 0.5})
    counts = {"en": 0, "xx": 0}
    for doc in sample_documents(two_lang_corpus, w, seed=3, token_budget=100_000):
        counts[doc.language_id] += len(doc.text.split())
    total = counts["en"] + counts["xx"]
    assert abs(counts["en"] / total - 0.5) <= 0.03


def test_sample_documents_respects_budget(two_lang_corpus):
    w = compute_mixture(two_lang_corpus, 2.0)
    docs = list(sample_documents(two_lang_corpus, w, seed=1, token_budget=500))
    tokens = sum(len(d.text.split()) for d in docs)
    assert tokens >= 500
    # the stream stops at the first document crossing the budget
    assert tokens - len(docs[-1].text.split()) < 500


def test_sample_documents_skips_invalid_utf8(tmp_path, caplog):
    good = "good doc here"
    f = tmp_path / "en.txt"
    f.write_bytes(good.encode() + b"\n\n\xff\xfe broken \xff\n\n" + good.encode())
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps([{"lang": "en", "paths": ["en.txt"]}]))
    specs = corpus.load_manifest(manifest)
    docs = list(
        sample_documents(specs, MixtureWeights(weights={"en": 1.0}), seed=2, token_budget=50)
    )
    assert all(d.text == good for d in docs)


def test_manifest_missing_file(tmp_path):
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps([{"lang": "en", "paths": ["absent.txt"]}]))
    with pytest.raises(ConfigError):
        corpus.load_manifest(manifest)


def test_manifest_computes_bytes(tmp_path):
    f = tmp_path / "en.txt"
    f.write_text("hello world", encoding="utf-8")
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps([{"lang": "en", "paths": ["en.txt"]}]))
    (loaded,) = corpus.load_manifest(manifest)
    assert loaded.byte_count == 11
