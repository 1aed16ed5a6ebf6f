"""A small decoder-only transformer with hand-written reverse-mode gradients.

Pre-norm blocks with RMS normalization, learned positional embeddings,
tanh-approximated GELU, untied input/output embeddings. Everything runs on
plain numpy arrays in a flat name -> array parameter dict, which keeps
freezing, checkpointing, and finite-difference checks trivial.

The forward/backward engine is factored around the residual stream: callers
supply the initial embedded inputs and the output projection matrix, so the
same code serves both the plain model and the adapter-wrapped model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Iterator

import numpy as np

from .errors import ConfigError, NumericalError, ValidationError

RMS_EPS = 1e-6
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715

_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    h: int = 64
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 128
    dtype: str = "f32"

    def __post_init__(self) -> None:
        for name in ("vocab_size", "h", "n_layers", "n_heads", "context_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.h % self.n_heads != 0:
            raise ConfigError(f"h={self.h} not divisible by n_heads={self.n_heads}")
        if self.dtype not in _DTYPES:
            raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return _DTYPES[self.dtype]

    @property
    def head_dim(self) -> int:
        return self.h // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size,
            "h": self.h,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "context_len": self.context_len,
            "dtype": self.dtype,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        return ModelConfig(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter layout; dict order is the checkpoint tensor order."""
    shapes: dict[str, tuple[int, ...]] = {
        "emb.in": (cfg.vocab_size, cfg.h),
        "emb.pos": (cfg.context_len, cfg.h),
        "emb.out": (cfg.vocab_size, cfg.h),
    }
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        shapes[f"{p}.attn.norm"] = (cfg.h,)
        shapes[f"{p}.attn.wq"] = (cfg.h, cfg.h)
        shapes[f"{p}.attn.wk"] = (cfg.h, cfg.h)
        shapes[f"{p}.attn.wv"] = (cfg.h, cfg.h)
        shapes[f"{p}.attn.wo"] = (cfg.h, cfg.h)
        shapes[f"{p}.ffn.norm"] = (cfg.h,)
        shapes[f"{p}.ffn.w1"] = (cfg.h, 4 * cfg.h)
        shapes[f"{p}.ffn.b1"] = (4 * cfg.h,)
        shapes[f"{p}.ffn.w2"] = (4 * cfg.h, cfg.h)
        shapes[f"{p}.ffn.b2"] = (cfg.h,)
    shapes["final.norm"] = (cfg.h,)
    return shapes


@dataclass
class Model:
    """A config plus its parameter arrays. Treat as immutable outside training."""

    config: ModelConfig
    params: dict[str, np.ndarray]

    def __post_init__(self) -> None:
        expected = param_shapes(self.config)
        if set(self.params) != set(expected):
            missing = set(expected) - set(self.params)
            extra = set(self.params) - set(expected)
            raise ValidationError(f"parameter set mismatch: missing={missing}, extra={extra}")
        for name, shape in expected.items():
            if self.params[name].shape != shape:
                raise ValidationError(
                    f"shape mismatch for {name}: {self.params[name].shape} != {shape}"
                )
            if not np.all(np.isfinite(self.params[name])):
                raise ValidationError(f"non-finite values in parameter {name}")

    def copy(self) -> "Model":
        return Model(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype: str) -> "Model":
        cfg = replace(self.config, dtype=dtype)
        return Model(cfg, {k: v.astype(cfg.np_dtype) for k, v in self.params.items()})


GradientSet = dict[str, np.ndarray]


def _truncated_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std, the usual embedding init."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out.astype(dtype)


def init_params(cfg: ModelConfig, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    dt = cfg.np_dtype
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.endswith(".norm") or name == "final.norm":
            params[name] = np.ones(shape, dtype=dt)
        elif name.endswith((".b1", ".b2")):
            params[name] = np.zeros(shape, dtype=dt)
        else:
            params[name] = _truncated_normal(rng, shape, 0.02, dt)
    return Model(cfg, params)


# ---------------------------------------------------------------------------
# forward / backward engine


def _rms_forward(x: np.ndarray, gain: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    inv = 1.0 / np.sqrt(np.mean(np.square(x), axis=-1, keepdims=True) + RMS_EPS)
    inv = inv.astype(x.dtype)
    return x * inv * gain, inv


def _rms_backward(
    x: np.ndarray, inv: np.ndarray, gain: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    h = x.shape[-1]
    dgain = np.sum(dy * x * inv, axis=tuple(range(x.ndim - 1)))
    proj = np.sum(dy * gain * x, axis=-1, keepdims=True)
    dx = dy * gain * inv - x * (inv * inv * inv / h) * proj
    return dx.astype(x.dtype), dgain.astype(x.dtype)


def _gelu(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """tanh-form GELU; returns (value, tanh term) so backward can reuse it."""
    t = np.tanh(_GELU_C * (u + _GELU_K * (u * u * u)))
    return 0.5 * u * (1.0 + t), t


def _gelu_prime(u: np.ndarray, t: np.ndarray) -> np.ndarray:
    u2 = u * u
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_K * u2)


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, h = x.shape
    return x.reshape(b, t, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def _softmax(scores: np.ndarray) -> np.ndarray:
    shifted = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def embed_inputs(params: dict[str, np.ndarray], e_in: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Token rows from `e_in` plus learned positions."""
    t = ids.shape[1]
    return e_in[ids] + params["emb.pos"][:t]


def body_forward(
    cfg: ModelConfig, params: dict[str, np.ndarray], x0: np.ndarray, w_out: np.ndarray
) -> tuple[np.ndarray, dict]:
    """Run the transformer body on embedded inputs; returns (logits, cache)."""
    b, t, _ = x0.shape
    scale = np.asarray(1.0 / math.sqrt(cfg.head_dim), dtype=x0.dtype)
    mask = np.triu(np.full((t, t), -np.inf, dtype=x0.dtype), k=1)

    cache: dict = {"x0": x0, "layers": []}
    x = x0
    for i in range(cfg.n_layers):
        p = f"layers.{i}"
        lc: dict = {"x_in": x}
        a, inv1 = _rms_forward(x, params[f"{p}.attn.norm"])
        lc["a"], lc["inv1"] = a, inv1
        qh = _split_heads(a @ params[f"{p}.attn.wq"], cfg.n_heads)
        kh = _split_heads(a @ params[f"{p}.attn.wk"], cfg.n_heads)
        vh = _split_heads(a @ params[f"{p}.attn.wv"], cfg.n_heads)
        lc["qh"], lc["kh"], lc["vh"] = qh, kh, vh
        scores = qh @ kh.swapaxes(-1, -2) * scale + mask
        probs = _softmax(scores)
        lc["probs"] = probs
        oc = _merge_heads(probs @ vh)
        lc["oc"] = oc
        x = x + oc @ params[f"{p}.attn.wo"]
        lc["x_mid"] = x

        f, inv2 = _rms_forward(x, params[f"{p}.ffn.norm"])
        lc["f"], lc["inv2"] = f, inv2
        u = f @ params[f"{p}.ffn.w1"] + params[f"{p}.ffn.b1"]
        g, gelu_t = _gelu(u)
        lc["u"], lc["g"], lc["gelu_t"] = u, g, gelu_t
        x = x + g @ params[f"{p}.ffn.w2"] + params[f"{p}.ffn.b2"]
        cache["layers"].append(lc)

    hfin, inv_f = _rms_forward(x, params["final.norm"])
    cache["x_body"], cache["inv_f"], cache["hfin"] = x, inv_f, hfin
    logits = hfin @ w_out.T
    return logits, cache


def body_backward(
    cfg: ModelConfig,
    params: dict[str, np.ndarray],
    cache: dict,
    dlogits: np.ndarray,
    w_out: np.ndarray,
    want: Callable[[str], bool],
) -> tuple[GradientSet, np.ndarray, np.ndarray]:
    """Backpropagate from dlogits; returns (body grads, d_x0, d_w_out).

    `want(name)` gates which body-parameter gradients are accumulated;
    the flow through the network is computed regardless.
    """
    scale = np.asarray(1.0 / math.sqrt(cfg.head_dim), dtype=dlogits.dtype)
    grads: GradientSet = {}
    flat = lambda arr: arr.reshape(-1, arr.shape[-1])

    hfin = cache["hfin"]
    d_w_out = flat(dlogits).T @ flat(hfin)
    dhfin = dlogits @ w_out

    dx, dgain = _rms_backward(cache["x_body"], cache["inv_f"], params["final.norm"], dhfin)
    if want("final.norm"):
        grads["final.norm"] = dgain

    for i in reversed(range(cfg.n_layers)):
        p = f"layers.{i}"
        lc = cache["layers"][i]

        # feed-forward branch: x_out = x_mid + gelu(f@w1+b1)@w2 + b2
        dy = dx
        if want(f"{p}.ffn.w2"):
            grads[f"{p}.ffn.w2"] = flat(lc["g"]).T @ flat(dy)
        if want(f"{p}.ffn.b2"):
            grads[f"{p}.ffn.b2"] = dy.sum(axis=(0, 1))
        dg = dy @ params[f"{p}.ffn.w2"].T
        du = dg * _gelu_prime(lc["u"], lc["gelu_t"])
        if want(f"{p}.ffn.w1"):
            grads[f"{p}.ffn.w1"] = flat(lc["f"]).T @ flat(du)
        if want(f"{p}.ffn.b1"):
            grads[f"{p}.ffn.b1"] = du.sum(axis=(0, 1))
        df = du @ params[f"{p}.ffn.w1"].T
        dx_mid_norm, dgain2 = _rms_backward(lc["x_mid"], lc["inv2"], params[f"{p}.ffn.norm"], df)
        if want(f"{p}.ffn.norm"):
            grads[f"{p}.ffn.norm"] = dgain2
        dx_mid = dx + dx_mid_norm

        # attention branch: x_mid = x_in + merge(softmax(qk^T)v) @ wo
        datt = dx_mid
        if want(f"{p}.attn.wo"):
            grads[f"{p}.attn.wo"] = flat(lc["oc"]).T @ flat(datt)
        doc = datt @ params[f"{p}.attn.wo"].T
        do = _split_heads(doc, cfg.n_heads)
        dprobs = do @ lc["vh"].swapaxes(-1, -2)
        dvh = lc["probs"].swapaxes(-1, -2) @ do
        probs = lc["probs"]
        dscores = probs * (dprobs - np.sum(dprobs * probs, axis=-1, keepdims=True))
        dscores = dscores * scale
        dqh = dscores @ lc["kh"]
        dkh = dscores.swapaxes(-1, -2) @ lc["qh"]
        dq, dk, dv = (_merge_heads(z) for z in (dqh, dkh, dvh))
        a = lc["a"]
        da = (
            dq @ params[f"{p}.attn.wq"].T
            + dk @ params[f"{p}.attn.wk"].T
            + dv @ params[f"{p}.attn.wv"].T
        )
        for wname, dz in (("wq", dq), ("wk", dk), ("wv", dv)):
            if want(f"{p}.attn.{wname}"):
                grads[f"{p}.attn.{wname}"] = flat(a).T @ flat(dz)
        dx_in_norm, dgain1 = _rms_backward(lc["x_in"], lc["inv1"], params[f"{p}.attn.norm"], da)
        if want(f"{p}.attn.norm"):
            grads[f"{p}.attn.norm"] = dgain1
        dx = dx_mid + dx_in_norm

    return grads, dx, d_w_out


def _check_batch(cfg: ModelConfig, batch: np.ndarray, min_len: int = 2) -> np.ndarray:
    batch = np.asarray(batch)
    if batch.ndim != 2 or batch.size == 0:
        raise ValidationError(f"token batch must be non-empty and 2-D, got shape {batch.shape}")
    b, t = batch.shape
    if t < min_len:
        raise ValidationError(f"sequences of length {t} have no predicted positions")
    if t > cfg.context_len:
        raise ValidationError(f"sequence length {t} exceeds context_len {cfg.context_len}")
    if batch.min() < 0 or batch.max() >= cfg.vocab_size:
        raise ValidationError("token id out of range for vocab")
    return batch.astype(np.int64, copy=False)


def _nll_terms(logits: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-position negative log-likelihood in nats, computed in float64."""
    lg = logits.astype(np.float64)
    m = lg.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(lg - m).sum(axis=-1)) + m[..., 0]
    picked = np.take_along_axis(lg, targets[..., None], axis=-1)[..., 0]
    return lse - picked


def _ce_loss_and_dlogits(
    logits: np.ndarray, targets: np.ndarray, denom: int, loss_scale: float
) -> tuple[float, np.ndarray]:
    """Mean NLL over predicted positions and its gradient, one softmax."""
    m = logits.max(axis=-1, keepdims=True)
    shifted = logits - m
    e = np.exp(shifted)
    z = e.sum(axis=-1, keepdims=True)
    i0, i1 = np.indices(targets.shape, sparse=True)
    nll = np.log(z[..., 0]) - shifted[i0, i1, targets]
    loss = float(nll.mean(dtype=np.float64))
    probs = e / z
    probs[i0, i1, targets] -= 1.0
    dlogits = probs * np.asarray(loss_scale / denom, dtype=logits.dtype)
    return loss, dlogits


def scatter_rows(out: np.ndarray, ids: np.ndarray, rows: np.ndarray) -> None:
    """out[ids[k]] += rows[k] with duplicate ids accumulated (fast add.at)."""
    order = np.argsort(ids, kind="stable")
    sorted_ids = ids[order]
    boundaries = np.flatnonzero(np.r_[True, np.diff(sorted_ids) != 0])
    sums = np.add.reduceat(rows[order], boundaries, axis=0)
    out[sorted_ids[boundaries]] += sums


def forward_details(
    model: Model, batch: np.ndarray
) -> tuple[np.ndarray, float, dict]:
    """Forward pass exposing the layer cache (attention probs etc.) for tests."""
    batch = _check_batch(model.config, batch)
    x0 = embed_inputs(model.params, model.params["emb.in"], batch)
    logits, cache = body_forward(model.config, model.params, x0, model.params["emb.out"])
    nll = _nll_terms(logits[:, :-1, :], batch[:, 1:])
    return logits, float(nll.mean()), cache


def forward_loss(model: Model, batch: np.ndarray) -> tuple[np.ndarray, float]:
    """Causal next-token cross-entropy, averaged over the B*(T-1) predictions."""
    logits, loss, _ = forward_details(model, batch)
    return logits, loss


def loss_and_backward(
    model: Model,
    batch: np.ndarray,
    loss_scale: float = 1.0,
    wrt: set[str] | None = None,
) -> tuple[float, GradientSet]:
    """One fused forward/backward pass; gradients are of loss_scale * loss.

    `wrt` limits which parameter gradients are materialized; omitted names
    still participate in the chain rule, they just are not accumulated.
    """
    cfg = model.config
    params = model.params
    batch = _check_batch(cfg, batch)
    want = (lambda n: True) if wrt is None else (lambda n: n in wrt)

    x0 = embed_inputs(params, params["emb.in"], batch)
    logits, cache = body_forward(cfg, params, x0, params["emb.out"])

    b, t = batch.shape
    denom = b * (t - 1)
    loss, d_pred = _ce_loss_and_dlogits(logits[:, :-1, :], batch[:, 1:], denom, loss_scale)
    dlogits = np.zeros_like(logits)
    dlogits[:, :-1, :] = d_pred

    grads, dx0, d_w_out = body_backward(
        cfg, params, cache, dlogits, params["emb.out"], want
    )
    if want("emb.out"):
        grads["emb.out"] = d_w_out
    if want("emb.in"):
        d_e_in = np.zeros_like(params["emb.in"])
        scatter_rows(d_e_in, batch.reshape(-1), dx0.reshape(-1, cfg.h))
        grads["emb.in"] = d_e_in
    if want("emb.pos"):
        d_pos = np.zeros_like(params["emb.pos"])
        d_pos[:t] = dx0.sum(axis=0)
        grads["emb.pos"] = d_pos
    return loss, grads


def backward(
    model: Model,
    batch: np.ndarray,
    loss_scale: float = 1.0,
    wrt: set[str] | None = None,
) -> GradientSet:
    """Exact gradients of (loss_scale * language-model loss)."""
    return loss_and_backward(model, batch, loss_scale, wrt)[1]


def sequence_nll(model: Model, inputs: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-token NLL (nats, float64) of `targets[t]` given `inputs[: t]`.

    Unlike the training loss, targets are supplied explicitly so windows can
    chain across a longer sequence.
    """
    cfg = model.config
    inputs = _check_batch(cfg, inputs, min_len=1)
    targets = np.asarray(targets, dtype=np.int64)
    if targets.shape != inputs.shape:
        raise ValidationError("inputs and targets must have the same shape")
    if targets.min() < 0 or targets.max() >= cfg.vocab_size:
        raise ValidationError("target id out of range for vocab")
    x0 = embed_inputs(model.params, model.params["emb.in"], inputs)
    logits, _ = body_forward(cfg, model.params, x0, model.params["emb.out"])
    return _nll_terms(logits, targets)


# ---------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class OptimizerConfig:
    """AdamW with linear warmup into a cosine decay."""

    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_ratio: float = 0.01


def lr_at(opt: OptimizerConfig, step: int, total_steps: int) -> float:
    """Learning rate for 0-based `step` of `total_steps`."""
    warmup = max(1, math.ceil(opt.warmup_ratio * total_steps))
    if step < warmup:
        return opt.lr * (step + 1) / warmup
    if total_steps <= warmup:
        return opt.lr
    progress = (step - warmup) / (total_steps - warmup)
    return opt.lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled weight decay Adam over a name -> array dict."""

    def __init__(self, names: Iterable[str], params: dict[str, np.ndarray], opt: OptimizerConfig):
        self.opt = opt
        self.names = sorted(names)
        self.m = {n: np.zeros_like(params[n]) for n in self.names}
        self.v = {n: np.zeros_like(params[n]) for n in self.names}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: GradientSet, lr: float) -> None:
        o = self.opt
        self.t += 1
        bc1 = 1.0 - o.beta1**self.t
        bc2 = 1.0 - o.beta2**self.t
        for n in self.names:
            g = grads[n]
            m = self.m[n]
            v = self.v[n]
            m += (1.0 - o.beta1) * (g - m)
            v += (1.0 - o.beta2) * (np.square(g) - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + o.eps)
            if o.weight_decay:
                update = update + o.weight_decay * params[n]
            params[n] -= np.asarray(lr, dtype=params[n].dtype) * update.astype(params[n].dtype)


def grad_global_norm(grads: GradientSet) -> float:
    total = 0.0
    for g in grads.values():
        total += float(np.sum(np.square(g, dtype=np.float64)))
    return math.sqrt(total)


def train_steps(
    model: Model,
    batches: Iterator[np.ndarray],
    opt_cfg: OptimizerConfig,
    n_steps: int,
    trainable: set[str] | None,
) -> tuple[Model, list[dict]]:
    """Run AdamW on the selected parameter arrays; everything else is frozen.

    Returns a new Model; the input model's arrays are never touched. An empty
    trainable set turns this into a no-op that still validates the stream.
    """
    out = model.copy()
    names = set(param_shapes(model.config)) if trainable is None else set(trainable)
    unknown = names - set(out.params)
    if unknown:
        raise ConfigError(f"unknown trainable parameter names: {sorted(unknown)}")

    logs: list[dict] = []
    optimizer = AdamW(names, out.params, opt_cfg) if names else None
    tmp = Model(out.config, out.params)  # shares the arrays being updated
    for step in range(n_steps):
        try:
            batch = next(batches)
        except StopIteration:
            raise ValidationError(f"batch stream exhausted at step {step}/{n_steps}")
        if not names:
            logs.append({"step": step, "loss": None, "lr": 0.0, "grad_norm": 0.0})
            continue
        loss, grads = loss_and_backward(tmp, batch, wrt=names)
        if not math.isfinite(loss):
            raise NumericalError(f"non-finite loss {loss} at step {step}")
        gnorm = grad_global_norm(grads)
        if not math.isfinite(gnorm):
            raise NumericalError(f"non-finite gradient norm at step {step}")
        lr = lr_at(opt_cfg, step, n_steps)
        optimizer.step(out.params, grads, lr)
        logs.append({"step": step, "loss": loss, "lr": lr, "grad_norm": gnorm})
    return out, logs


def pretrain(
    cfg: ModelConfig,
    batches: Iterator[np.ndarray],
    n_steps: int,
    seed: int,
    opt_cfg: OptimizerConfig | None = None,
) -> tuple[Model, list[dict]]:
    """Initialize and train all parameters; the usual way to get a base model."""
    model = init_params(cfg, seed)
    return train_steps(model, batches, opt_cfg or OptimizerConfig(), n_steps, trainable=None)
