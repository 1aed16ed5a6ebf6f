"""Vocabulary adapter training against a frozen base model.

Input and output adapters are separate matrices mapping the new vocabulary
onto the base model's embedding rows. Training updates only the adapters
with loss  lm + alpha * aux,  where aux pulls overlap rows back toward
their one-hot initialization: the mean Euclidean distance between current
and initial overlap rows, averaged over the two adapters. Merging bakes
adapter @ embedding into a standalone checkpoint with the new vocab size.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterator

import numpy as np

from . import tinylm
from .errors import ConfigError, NumericalError, ValidationError
from .tinylm import AdamW, Model, OptimizerConfig, lr_at
from .tokenizer import Vocabulary
from .vocabmap import AdapterMatrix

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    alpha: float
    steps: int
    batch_size: int
    seq_len: int
    seed: int
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def __post_init__(self) -> None:
        if self.alpha < 0:
            raise ConfigError(f"alpha must be non-negative, got {self.alpha}")
        if self.steps < 0 or self.batch_size <= 0 or self.seq_len <= 0:
            raise ConfigError("steps must be >= 0, batch_size and seq_len positive")


@dataclass(frozen=True)
class TrainStepReport:
    step: int
    l_lm: float
    l_aux: float
    l_tot: float
    aux_in: float
    aux_out: float
    grad_norm_in: float
    grad_norm_out: float
    lr: float

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "l_lm": self.l_lm,
            "l_aux": self.l_aux,
            "l_tot": self.l_tot,
            "aux_in": self.aux_in,
            "aux_out": self.aux_out,
            "grad_norm_in": self.grad_norm_in,
            "grad_norm_out": self.grad_norm_out,
            "lr": self.lr,
        }


@dataclass
class AdaptedModel:
    """Frozen base model plus trainable input/output vocabulary adapters."""

    base: Model
    a_in: AdapterMatrix
    a_out: AdapterMatrix
    new_vocab: Vocabulary | None = None

    def __post_init__(self) -> None:
        v_old = self.base.config.vocab_size
        if self.a_in.n_old != v_old or self.a_out.n_old != v_old:
            raise ValidationError("adapter column count must equal the base vocab size")
        if self.a_in.n_new != self.a_out.n_new:
            raise ValidationError("input and output adapters disagree on the new vocab size")
        if self.new_vocab is not None and len(self.new_vocab) != self.a_in.n_new:
            raise ValidationError("new_vocab size does not match the adapters")

    @property
    def n_new(self) -> int:
        return self.a_in.n_new

    def adapted_config(self) -> tinylm.ModelConfig:
        return replace(self.base.config, vocab_size=self.n_new)


def effective_embeddings(a: AdapterMatrix, e_old: np.ndarray) -> np.ndarray:
    """The merged embedding rows: adapter @ original embedding matrix."""
    if a.values.shape[1] != e_old.shape[0]:
        raise ValidationError(
            f"adapter columns {a.values.shape[1]} != embedding rows {e_old.shape[0]}"
        )
    return a.values @ e_old


def adapted_forward_loss(
    model: AdaptedModel, batch: np.ndarray, gather: bool = False
) -> tuple[np.ndarray, float]:
    """Language-model loss with the adapters in place of the embeddings.

    The default path materializes both effective embedding matrices, which is
    arithmetic-for-arithmetic what a merged checkpoint computes. gather=True
    uses the cheaper row-gather order employed during training.
    """
    cfg = model.adapted_config()
    batch = tinylm._check_batch(cfg, batch)
    params = model.base.params
    if gather:
        x0 = model.a_in.values[batch] @ params["emb.in"] + params["emb.pos"][: batch.shape[1]]
    else:
        x0 = tinylm.embed_inputs(params, effective_embeddings(model.a_in, params["emb.in"]), batch)
    w_out = effective_embeddings(model.a_out, params["emb.out"])
    logits, _ = tinylm.body_forward(model.base.config, params, x0, w_out)
    nll = tinylm._nll_terms(logits[:, :-1, :], batch[:, 1:])
    return logits, float(nll.mean())


def aux_loss(a: AdapterMatrix) -> float:
    """Mean Euclidean distance of overlap rows from their initialization."""
    value, _ = _aux_value_and_grad(a, want_grad=False)
    return value


def _aux_value_and_grad(
    a: AdapterMatrix, want_grad: bool = True
) -> tuple[float, np.ndarray | None]:
    k = len(a.overlap_ids)
    if k == 0:
        log.warning("aux loss requested with an empty overlap set; returning 0")
        return 0.0, None
    diff = a.values[a.overlap_ids].astype(np.float64) - a.init_overlap_rows.astype(np.float64)
    norms = np.sqrt(np.sum(diff * diff, axis=1))
    value = float(norms.mean())
    if not want_grad:
        return value, None
    safe = np.where(norms > 0, norms, 1.0)
    grad = (diff / safe[:, None]) / k
    grad[norms == 0] = 0.0
    return value, grad.astype(a.values.dtype)


def _adapter_grads(
    model: AdaptedModel, batch: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Loss and gradients of the LM loss w.r.t. both adapters (base frozen)."""
    base_cfg = model.base.config
    params = model.base.params
    h = base_cfg.h

    rows = model.a_in.values[batch]  # (B, T, n_old)
    x0 = rows @ params["emb.in"] + params["emb.pos"][: batch.shape[1]]
    w_out = model.a_out.values @ params["emb.out"]
    logits, cache = tinylm.body_forward(base_cfg, params, x0, w_out)

    b, t = batch.shape
    loss, d_pred = tinylm._ce_loss_and_dlogits(
        logits[:, :-1, :], batch[:, 1:], b * (t - 1), 1.0
    )
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = d_pred
    _, dx0, d_w_out = tinylm.body_backward(
        base_cfg, params, cache, dlogits, w_out, want=lambda n: False
    )

    da_out = d_w_out @ params["emb.out"].T
    per_row = dx0.reshape(-1, h) @ params["emb.in"].T  # (B*T, n_old)
    da_in = np.zeros_like(model.a_in.values)
    tinylm.scatter_rows(da_in, batch.reshape(-1), per_row)
    return loss, da_in, da_out


def train_adapter(
    base: Model,
    a_in: AdapterMatrix,
    a_out: AdapterMatrix,
    batches: Iterator[np.ndarray],
    cfg: TrainConfig,
) -> tuple[AdaptedModel, list[TrainStepReport]]:
    """Optimize the adapters with AdamW while the base model stays untouched.

    Weight decay is disabled for adapter cells: the auxiliary loss already
    shrinks overlap rows toward their snapshot, and decay toward zero would
    fight it. Reports one TrainStepReport per step.
    """
    model = AdaptedModel(base=base, a_in=a_in.copy(), a_out=a_out.copy())
    opt_cfg = replace(cfg.optimizer, weight_decay=0.0)
    tensors = {"a_in": model.a_in.values, "a_out": model.a_out.values}
    optimizer = AdamW(tensors.keys(), tensors, opt_cfg)

    reports: list[TrainStepReport] = []
    for step in range(cfg.steps):
        try:
            batch = next(batches)
        except StopIteration:
            raise ValidationError(f"adapter batch stream exhausted at step {step}/{cfg.steps}")
        batch = tinylm._check_batch(model.adapted_config(), batch)

        l_lm, da_in, da_out = _adapter_grads(model, batch)
        aux_in, g_aux_in = _aux_value_and_grad(model.a_in)
        aux_out, g_aux_out = _aux_value_and_grad(model.a_out)
        l_aux = 0.5 * (aux_in + aux_out)
        l_tot = l_lm + cfg.alpha * l_aux

        if cfg.alpha != 0.0:
            if g_aux_in is not None:
                da_in[model.a_in.overlap_ids] += np.asarray(
                    cfg.alpha * 0.5, dtype=da_in.dtype
                ) * g_aux_in
            if g_aux_out is not None:
                da_out[model.a_out.overlap_ids] += np.asarray(
                    cfg.alpha * 0.5, dtype=da_out.dtype
                ) * g_aux_out

        if not (math.isfinite(l_tot) and np.isfinite(da_in).all() and np.isfinite(da_out).all()):
            raise NumericalError(f"non-finite adapter loss or gradient at step {step}")

        lr = lr_at(opt_cfg, step, cfg.steps)
        grads = {"a_in": da_in, "a_out": da_out}
        optimizer.step(tensors, grads, lr)
        reports.append(
            TrainStepReport(
                step=step,
                l_lm=l_lm,
                l_aux=l_aux,
                l_tot=l_tot,
                aux_in=aux_in,
                aux_out=aux_out,
                grad_norm_in=float(np.linalg.norm(da_in.astype(np.float64))),
                grad_norm_out=float(np.linalg.norm(da_out.astype(np.float64))),
                lr=lr,
            )
        )
    return model, reports


def merge(model: AdaptedModel) -> Model:
    """Bake the adapters into a standalone checkpoint with the new vocab size."""
    params = model.base.params
    merged = {k: v.copy() for k, v in params.items()}
    merged["emb.in"] = effective_embeddings(model.a_in, params["emb.in"])
    merged["emb.out"] = effective_embeddings(model.a_out, params["emb.out"])
    return Model(model.adapted_config(), merged)


def finetune_full(
    model: Model,
    batches: Iterator[np.ndarray],
    n_steps: int,
    opt_cfg: OptimizerConfig | None = None,
) -> tuple[Model, list[dict]]:
    """Continued training of every parameter, typically on a merged checkpoint."""
    return tinylm.train_steps(
        model, batches, opt_cfg or OptimizerConfig(), n_steps, trainable=None
    )
