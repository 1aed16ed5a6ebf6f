"""Shared test utilities: micro models, vocab builders, FD harnesses."""

from __future__ import annotations

import numpy as np

from revocab import adapter, tinylm, vocabmap
from revocab import tokenizer as T
from revocab.corpus import Document


def micro_model(
    vocab_size=50, h=8, n_layers=2, n_heads=2, context_len=16, dtype="f64",
    weight_scale=0.3, seed=1,
) -> tinylm.Model:
    """A tiny model with healthy-magnitude weights so FD checks are well
    conditioned (the 0.02-std pretraining init leaves gradients near zero)."""
    cfg = tinylm.ModelConfig(
        vocab_size=vocab_size, h=h, n_layers=n_layers, n_heads=n_heads,
        context_len=context_len, dtype=dtype,
    )
    model = tinylm.init_params(cfg, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, p in model.params.items():
        if not name.endswith(".norm"):
            model.params[name] = (rng.standard_normal(p.shape) * weight_scale).astype(
                cfg.np_dtype
            )
    return model


def sample_coords(grads: np.ndarray, n: int, rng, magnitude_quantile=0.6):
    """Indices of n sampled coordinates, drawn among the larger-|g| ones."""
    flat = np.abs(grads).ravel()
    nonzero = flat[flat > 0]
    if len(nonzero) == 0:
        return []
    cand = np.flatnonzero(flat >= np.quantile(nonzero, magnitude_quantile))
    picks = rng.choice(cand, size=min(n, len(cand)), replace=False)
    return [np.unravel_index(int(i), grads.shape) for i in picks]


def central_difference(fn, arr: np.ndarray, idx, step: float) -> float:
    orig = arr[idx]
    arr[idx] = orig + step
    plus = fn()
    arr[idx] = orig - step
    minus = fn()
    arr[idx] = orig
    return (plus - minus) / (2.0 * step)


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def fd_check_model(model: tinylm.Model, batch, step_rel, n_coords=6, seed=3):
    """Max relative error of analytic vs central-difference gradients."""
    loss_fn = lambda: tinylm.forward_loss(model, batch)[1]
    grads = tinylm.backward(model, batch)
    rng = np.random.default_rng(seed)
    worst = 0.0
    per_tensor: dict[str, float] = {}
    for name, g in grads.items():
        local = 0.0
        for idx in sample_coords(g, n_coords, rng):
            step = step_rel * max(1.0, abs(float(model.params[name][idx])))
            est = central_difference(loss_fn, model.params[name], idx, step)
            local = max(local, rel_err(est, float(g[idx])))
        per_tensor[name] = local
        worst = max(worst, local)
    return worst, per_tensor


def toy_tokenizer(extra_merges: int = 0, corpus_text: str = "hello world hello there") -> T.TokenizerModel:
    docs = [Document("en", corpus_text)] * 4
    return T.train_vocab(iter(docs), T.MIN_VOCAB + extra_merges)


def hand_plan(n_new: int, n_old: int, pattern: str = "mix") -> vocabmap.InitPlan:
    """Deterministic plan cycling overlap/partition/random classes."""
    classes: list = []
    for i in range(n_new):
        kind = i % 3 if pattern == "mix" else {"overlap": 0, "partition": 1, "random": 2}[pattern]
        if kind == 0:
            classes.append(vocabmap.Overlap(orig_id=i % n_old))
        elif kind == 1:
            classes.append(
                vocabmap.Partition(orig_ids=(i % n_old, (3 * i + 1) % n_old, (7 * i + 2) % n_old))
            )
        else:
            classes.append(vocabmap.Random())
    return vocabmap.InitPlan(classes=tuple(classes), n_old=n_old)


def adapted_micro(
    n_old=40, n_new=60, dtype="f64", seed=1, perturb=0.05
) -> adapter.AdaptedModel:
    """Base micro model plus perturbed adapters (aux loss differentiable)."""
    base = micro_model(vocab_size=n_old, dtype=dtype, seed=seed)
    plan = hand_plan(n_new, n_old)
    dt = base.config.np_dtype
    a_in = vocabmap.init_adapter(plan, n_old, seed=11, dtype=dt)
    a_out = vocabmap.init_adapter(plan, n_old, seed=12, dtype=dt)
    if perturb:
        rng = np.random.default_rng(5)
        a_in.values += (rng.standard_normal(a_in.values.shape) * perturb).astype(dt)
        a_out.values += (rng.standard_normal(a_out.values.shape) * perturb).astype(dt)
    return adapter.AdaptedModel(base=base, a_in=a_in, a_out=a_out)


def random_vocab_pair(rng: np.random.Generator, n_old: int, n_new: int):
    """Two random-merge tokenizers over the byte alphabet, loosely related."""

    def build(size: int, sub_rng: np.random.Generator) -> T.TokenizerModel:
        tokens = list(T._base_tokens())
        merges: list[tuple[bytes, bytes]] = []
        existing = set(tokens)
        pool = [t for t in tokens[T.N_SPECIALS:]]
        while len(tokens) < size:
            left = pool[int(sub_rng.integers(len(pool)))]
            right = pool[int(sub_rng.integers(len(pool)))]
            merged = left + right
            if merged in existing or len(merged) > 24:
                continue
            merges.append((left, right))
            tokens.append(merged)
            existing.add(merged)
            pool.append(merged)
        return T.TokenizerModel(
            merges=tuple(merges), vocabulary=T.Vocabulary(tokens=tuple(tokens))
        )

    old = build(n_old, np.random.default_rng(rng.integers(2**63)))
    new = build(n_new, np.random.default_rng(rng.integers(2**63)))
    return old, new
