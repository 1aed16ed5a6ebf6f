"""Fragmentation, modeling-quality, and cost metrics with report emission.

Cross-tokenizer model comparisons use bits per byte (total NLL in bits over
the UTF-8 byte count of the raw text); token-level perplexity is reported
too but flagged, since it is meaningless across different vocabularies.
"""

from __future__ import annotations

import csv
import json
import math
import subprocess
from collections import defaultdict
from pathlib import Path

import numpy as np

from . import __version__, tinylm
from .errors import ConfigError
from .tinylm import Model, ModelConfig

REPORT_VERSION = 1

FLOPS_FORMULA = (
    "flops_per_token = 2*(12*h^2*n_layers + h*vocab_size) + 4*n_layers*context_len*h; "
    "matmul weights count twice (multiply+add), the embedding gather counts as zero, "
    "and the attention term covers the score and value products at full context"
)


def count_tokens(tokenizer, eval_docs: dict[str, list[str]]) -> dict[str, int]:
    """Exact token counts per language over a language-keyed document map."""
    if not eval_docs or all(not docs for docs in eval_docs.values()):
        raise ConfigError("empty evaluation set")
    return {
        lang: sum(len(tokenizer.encode(doc)) for doc in docs)
        for lang, docs in eval_docs.items()
    }


def fragmentation_report(
    tokenizers: dict[str, object], eval_docs: dict[str, list[str]], baseline: str
) -> dict:
    """Token counts, tokens-per-byte, and reduction rate vs the named baseline."""
    if baseline not in tokenizers:
        raise ConfigError(f"baseline tokenizer {baseline!r} not among {sorted(tokenizers)}")
    counts = {name: count_tokens(tok, eval_docs) for name, tok in tokenizers.items()}
    byte_totals = {
        lang: sum(len(d.encode("utf-8")) for d in docs) for lang, docs in eval_docs.items()
    }
    languages: dict[str, dict] = {}
    for lang in eval_docs:
        row: dict = {"byte_count": byte_totals[lang], "tokenizers": {}}
        base_count = counts[baseline][lang]
        for name in tokenizers:
            c = counts[name][lang]
            row["tokenizers"][name] = {
                "token_count": c,
                "tokens_per_byte": c / byte_totals[lang] if byte_totals[lang] else None,
                "reduction_rate": increase_rate(c, base_count) if base_count else None,
            }
        languages[lang] = row
    return {"baseline": baseline, "languages": languages}


def bits_per_byte(
    model: Model,
    tokenizer,
    documents: list[str],
    bos_id: int | None = None,
    max_rows: int = 64,
) -> float:
    """Teacher-forced NLL in bits over the raw UTF-8 byte count.

    Each document is tokenized, prefixed with BOS, and scored in consecutive
    context-length windows whose target tiles cover every real token exactly
    once. Byte counts come from the raw text, so the value is comparable
    across models with different tokenizers.
    """
    if not documents:
        raise ConfigError("bits_per_byte needs at least one document")
    ctx = model.config.context_len
    if bos_id is None:
        vocab = getattr(tokenizer, "vocabulary", None)
        bos_id = vocab.bos_id if vocab is not None else 0

    windows: list[tuple[list[int], list[int]]] = []
    total_bytes = 0
    for doc in documents:
        ids = list(tokenizer.encode(doc))
        if not ids:
            continue
        total_bytes += len(doc.encode("utf-8"))
        seq = [bos_id] + ids
        for k in range(0, len(ids), ctx):
            targets = seq[k + 1 : k + 1 + ctx]
            inputs = seq[k : k + len(targets)]
            windows.append((inputs, targets))
    if total_bytes == 0:
        raise ConfigError("documents contain no text")

    total_nats = 0.0
    by_len: dict[int, list[tuple[list[int], list[int]]]] = defaultdict(list)
    for w in windows:
        by_len[len(w[0])].append(w)
    for length in sorted(by_len):
        group = by_len[length]
        for start in range(0, len(group), max_rows):
            chunk = group[start : start + max_rows]
            inputs = np.array([c[0] for c in chunk], dtype=np.int64)
            targets = np.array([c[1] for c in chunk], dtype=np.int64)
            total_nats += float(tinylm.sequence_nll(model, inputs, targets).sum())
    return total_nats / math.log(2.0) / total_bytes


def token_perplexity(model: Model, tokenizer, documents: list[str], bos_id: int | None = None) -> float:
    """exp(mean NLL per token). Not comparable across different tokenizers."""
    if not documents:
        raise ConfigError("token_perplexity needs at least one document")
    ctx = model.config.context_len
    if bos_id is None:
        vocab = getattr(tokenizer, "vocabulary", None)
        bos_id = vocab.bos_id if vocab is not None else 0
    total_nats = 0.0
    total_tokens = 0
    for doc in documents:
        ids = list(tokenizer.encode(doc))
        if not ids:
            continue
        seq = [bos_id] + ids
        for k in range(0, len(ids), ctx):
            targets = seq[k + 1 : k + 1 + ctx]
            inputs = seq[k : k + len(targets)]
            nll = tinylm.sequence_nll(
                model,
                np.array([inputs], dtype=np.int64),
                np.array([targets], dtype=np.int64),
            )
            total_nats += float(nll.sum())
            total_tokens += len(targets)
    if total_tokens == 0:
        raise ConfigError("documents contain no tokens")
    return math.exp(total_nats / total_tokens)


def quality_report(
    models: dict[str, tuple[Model, object]], eval_docs: dict[str, list[str]]
) -> dict:
    """Per-language bits-per-byte (and flagged token perplexity) per model."""
    languages: dict[str, dict] = {}
    for lang, docs in eval_docs.items():
        row = {}
        for name, (model, tokenizer) in models.items():
            row[name] = {
                "bits_per_byte": bits_per_byte(model, tokenizer, docs),
                "token_perplexity": token_perplexity(model, tokenizer, docs),
                "token_perplexity_comparable_across_tokenizers": False,
            }
        languages[lang] = row
    return {"languages": languages}


def increase_rate(score_new: float, score_base: float) -> float:
    """Signed relative change (new - base) / base."""
    if score_base == 0:
        raise ConfigError("increase_rate is undefined for a zero baseline")
    return (score_new - score_base) / score_base


def estimate_flops_per_token(config: ModelConfig) -> float:
    """Closed-form forward-pass FLOPs per token; see FLOPS_FORMULA."""
    body_params = 12 * config.h * config.h * config.n_layers
    head = config.h * config.vocab_size
    attention = 4 * config.n_layers * config.context_len * config.h
    return float(2 * (body_params + head) + attention)


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True,
            text=True,
            timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"revocab-{__version__}"


def _flatten(prefix: str, value, rows: list[tuple[str, str]]) -> None:
    if isinstance(value, dict):
        for key in sorted(value):
            _flatten(f"{prefix}.{key}" if prefix else str(key), value[key], rows)
    elif isinstance(value, (list, tuple)):
        for i, item in enumerate(value):
            _flatten(f"{prefix}[{i}]", item, rows)
    else:
        rows.append((prefix, "" if value is None else str(value)))


def emit_report(report: dict, path: str | Path, fmt: str = "both") -> list[Path]:
    """Write the report as canonical JSON and/or flattened CSV.

    The CSV has two columns (key, value) with keys sorted, so the layout is
    stable across runs; missing values render as empty cells.
    """
    if fmt not in ("json", "csv", "both"):
        raise ConfigError(f"unknown report format {fmt!r}")
    base = Path(path)
    payload = dict(report)
    payload.setdefault("report_version", REPORT_VERSION)
    payload.setdefault("build_id", _build_id())

    written: list[Path] = []
    if fmt in ("json", "both"):
        json_path = base.with_suffix(".json")
        json_path.write_text(
            json.dumps(payload, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
        written.append(json_path)
    if fmt in ("csv", "both"):
        rows: list[tuple[str, str]] = []
        _flatten("", payload, rows)
        csv_path = base.with_suffix(".csv")
        with csv_path.open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["key", "value"])
            writer.writerows(rows)
        written.append(csv_path)
    return written
