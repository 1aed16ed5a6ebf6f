"""Classify new-vocabulary tokens against an original vocabulary and build
the initialized adapter matrix.

Every new token gets exactly one class, checked in this order:

* Overlap: the byte string already exists in the old vocabulary (specials
  match by role, not by bytes). The adapter row is one-hot on the old id.
* Partition: the old tokenizer splits the token into m > 1 pieces. The row
  averages the piece one-hots, i.e. multiplicity/m per old id, which makes
  the merged embedding the mean of the piece embeddings.
* Random: neither of the above. The row is a normalized uniform draw.

All three constructions are row-stochastic, so the initial adapter maps
old embeddings into their convex hull.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from collections import Counter

import numpy as np

from .errors import ValidationError
from .tokenizer import MIN_VOCAB, N_SPECIALS, TokenizerModel, Vocabulary

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Overlap:
    orig_id: int


@dataclass(frozen=True)
class Partition:
    orig_ids: tuple[int, ...]  # the old tokenizer's pieces, in order, repeats kept


@dataclass(frozen=True)
class Random:
    pass


TokenClass = Overlap | Partition | Random


@dataclass(frozen=True)
class InitPlan:
    """Per-new-token classification; index in `classes` is the new-token id."""

    classes: tuple[TokenClass, ...]
    n_old: int

    def __post_init__(self) -> None:
        object.__setattr__(self, "classes", tuple(self.classes))
        for i, cls in enumerate(self.classes):
            if isinstance(cls, Overlap):
                if not 0 <= cls.orig_id < self.n_old:
                    raise ValidationError(f"overlap id out of range at token {i}")
            elif isinstance(cls, Partition):
                if len(cls.orig_ids) < 2:
                    raise ValidationError(f"partition needs m > 1 pieces at token {i}")
                if any(not 0 <= j < self.n_old for j in cls.orig_ids):
                    raise ValidationError(f"partition piece id out of range at token {i}")
            elif not isinstance(cls, Random):
                raise ValidationError(f"unknown token class at {i}: {cls!r}")

    def __len__(self) -> int:
        return len(self.classes)

    @property
    def overlap_ids(self) -> np.ndarray:
        return np.array(
            [i for i, c in enumerate(self.classes) if isinstance(c, Overlap)], dtype=np.int64
        )


@dataclass
class AdapterMatrix:
    """Dense new-by-old adapter, its overlap rows' snapshot, and their ids.

    Freshly initialized matrices are row-stochastic; training is free to
    leave that manifold, only the snapshot stays fixed.
    """

    values: np.ndarray
    overlap_ids: np.ndarray
    init_overlap_rows: np.ndarray

    @property
    def n_new(self) -> int:
        return self.values.shape[0]

    @property
    def n_old(self) -> int:
        return self.values.shape[1]

    def check_initialization(self) -> None:
        if self.values.ndim != 2:
            raise ValidationError("adapter must be a matrix")
        if np.any(self.values < 0):
            raise ValidationError("initialized adapter has negative entries")
        row_sums = self.values.sum(axis=1, dtype=np.float64)
        worst = float(np.abs(row_sums - 1.0).max()) if len(row_sums) else 0.0
        if worst > 1e-6:
            raise ValidationError(f"initialized adapter rows deviate from sum 1 by {worst}")
        rows = self.values[self.overlap_ids]
        if rows.shape != self.init_overlap_rows.shape or not np.array_equal(
            rows, self.init_overlap_rows
        ):
            raise ValidationError("overlap rows do not match their snapshot")
        ones = (rows == 1).sum(axis=1)
        zeros = (rows == 0).sum(axis=1)
        if np.any(ones != 1) or np.any(zeros != self.n_old - 1):
            raise ValidationError("overlap rows are not exactly one-hot")

    def copy(self) -> "AdapterMatrix":
        return AdapterMatrix(
            values=self.values.copy(),
            overlap_ids=self.overlap_ids.copy(),
            init_overlap_rows=self.init_overlap_rows.copy(),
        )


def classify_tokens(
    v_new: Vocabulary, v_old: Vocabulary, old_tokenizer: TokenizerModel
) -> InitPlan:
    """Assign each new token its initialization class.

    Overlap takes precedence over Partition: a token present in both
    vocabularies is never decomposed even when it could be.
    """
    if old_tokenizer.vocabulary != v_old:
        raise ValidationError("old_tokenizer does not carry v_old")

    # Lexical overlap never matches an old special: those ids are functional,
    # reserved for role-to-role mapping below.
    lexical = {tok: i for i, tok in enumerate(v_old.tokens) if i >= N_SPECIALS}

    classes: list[TokenClass] = []
    for new_id, token in enumerate(v_new.tokens):
        if new_id < N_SPECIALS:
            role = next(r for r, i in v_new.specials.items() if i == new_id)
            classes.append(Overlap(orig_id=v_old.specials[role]))
            continue
        old_id = lexical.get(token)
        if old_id is not None:
            classes.append(Overlap(orig_id=old_id))
            continue
        pieces = old_tokenizer.encode_token_bytes(token)
        if len(pieces) > 1:
            classes.append(Partition(orig_ids=tuple(pieces)))
        else:
            classes.append(Random())
    return InitPlan(classes=tuple(classes), n_old=len(v_old))


def all_random_plan(n_new: int, n_old: int) -> InitPlan:
    """A plan that forces every row through the random-initialization case."""
    return InitPlan(classes=tuple(Random() for _ in range(n_new)), n_old=n_old)


def init_adapter(
    plan: InitPlan, v_old_size: int, seed: int, dtype=np.float32
) -> AdapterMatrix:
    """Build the initial adapter matrix from a classification plan.

    Rows are computed in float64 and cast, so a partition piece id occurring
    c times contributes exactly dtype(c/m).
    """
    if v_old_size != plan.n_old:
        raise ValidationError(f"plan was built for {plan.n_old} old tokens, got {v_old_size}")
    n_new = len(plan)
    rng = np.random.default_rng(seed)
    values = np.zeros((n_new, v_old_size), dtype=dtype)
    one = np.asarray(1.0, dtype=dtype)

    for i, cls in enumerate(plan.classes):
        if isinstance(cls, Overlap):
            values[i, cls.orig_id] = one
        elif isinstance(cls, Partition):
            m = len(cls.orig_ids)
            for piece_id, count in Counter(cls.orig_ids).items():
                values[i, piece_id] = np.asarray(count / m, dtype=dtype)
        else:
            row = rng.uniform(0.0, 1.0, size=v_old_size)
            values[i, :] = (row / row.sum()).astype(dtype)

    overlap_ids = plan.overlap_ids
    adapter = AdapterMatrix(
        values=values,
        overlap_ids=overlap_ids,
        init_overlap_rows=values[overlap_ids].copy(),
    )
    adapter.check_initialization()
    return adapter


def overlap_stats(plan: InitPlan) -> dict:
    """Class counts and fractions, plus how many partitions leaned on byte tokens."""
    counts = {"overlap": 0, "partition": 0, "random": 0}
    byte_backed = 0
    for cls in plan.classes:
        if isinstance(cls, Overlap):
            counts["overlap"] += 1
        elif isinstance(cls, Partition):
            counts["partition"] += 1
            if any(N_SPECIALS <= j < MIN_VOCAB for j in cls.orig_ids):
                byte_backed += 1
        else:
            counts["random"] += 1
    total = len(plan)
    fractions = {k: v / total for k, v in counts.items()}
    return {
        "total": total,
        "counts": counts,
        "fractions": fractions,
        "byte_fallback_partition_fraction": (
            byte_backed / counts["partition"] if counts["partition"] else 0.0
        ),
    }


def init_report(plan: InitPlan, v_new: Vocabulary, max_examples: int = 5) -> dict:
    """JSON-ready report: stats plus a few example tokens per class."""
    stats = overlap_stats(plan)
    examples: dict[str, list[str]] = {"overlap": [], "partition": [], "random": []}
    for i, cls in enumerate(plan.classes):
        key = (
            "overlap"
            if isinstance(cls, Overlap)
            else "partition" if isinstance(cls, Partition) else "random"
        )
        if len(examples[key]) < max_examples:
            examples[key].append(v_new.tokens[i].decode("utf-8", errors="backslashreplace"))
    stats["examples"] = examples
    return stats
