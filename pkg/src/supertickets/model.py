"""Maskable post-norm Transformer encoder with per-task linear heads.

Every attention head output is scaled by a mask variable ``xi[layer, head]``
and every FFN block output by ``nu[layer]`` before the residual add.  The
mask variables can be bound as tape variables, which is how importance
scores are obtained.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 8
    d_model: int = 32
    d_ff: int = 64
    max_len: int = 32
    vocab: int = 32
    activation: str = "gelu"
    ln_eps: float = 1e-5
    heads: dict[str, int] = field(default_factory=dict)  # task name -> output width

    def __post_init__(self) -> None:
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "max_len", "vocab"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")
        if self.activation not in ("relu", "gelu"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        self.heads = dict(self.heads)

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers, "n_heads": self.n_heads, "d_model": self.d_model,
            "d_ff": self.d_ff, "max_len": self.max_len, "vocab": self.vocab,
            "activation": self.activation, "ln_eps": self.ln_eps, "heads": dict(self.heads),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class MaskSet:
    """Binary structure masks: ``xi`` has shape (L, H), ``nu`` shape (L,)."""

    def __init__(self, xi, nu) -> None:
        xi = np.asarray(xi, dtype=np.int8)
        nu = np.asarray(nu, dtype=np.int8)
        if xi.ndim != 2 or nu.shape != (xi.shape[0],):
            raise ValueError(f"bad mask shapes xi={xi.shape} nu={nu.shape}")
        if not (np.isin(xi, (0, 1)).all() and np.isin(nu, (0, 1)).all()):
            raise ValueError("mask entries must be 0 or 1")
        self.xi = xi
        self.nu = nu

    @classmethod
    def ones(cls, cfg: ModelConfig) -> "MaskSet":
        return cls(np.ones((cfg.n_layers, cfg.n_heads)), np.ones(cfg.n_layers))

    @classmethod
    def zeros(cls, cfg: ModelConfig) -> "MaskSet":
        return cls(np.zeros((cfg.n_layers, cfg.n_heads)), np.zeros(cfg.n_layers))

    @property
    def n_layers(self) -> int:
        return self.xi.shape[0]

    @property
    def n_heads(self) -> int:
        return self.xi.shape[1]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, MaskSet)
            and np.array_equal(self.xi, other.xi)
            and np.array_equal(self.nu, other.nu)
        )

    def __repr__(self) -> str:
        return f"MaskSet(heads kept {int(self.xi.sum())}/{self.xi.size}, ffn kept {int(self.nu.sum())}/{self.nu.size})"

    def union(self, other: "MaskSet") -> "MaskSet":
        return MaskSet(self.xi | other.xi, self.nu | other.nu)

    def to_dict(self) -> dict:
        return {"xi": self.xi.tolist(), "nu": self.nu.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "MaskSet":
        return cls(d["xi"], d["nu"])


class ModelParams:
    """Named parameter arrays plus the config that shapes them."""

    def __init__(self, cfg: ModelConfig, tensors: dict[str, np.ndarray]) -> None:
        self.cfg = cfg
        self.tensors = tensors

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    @property
    def dtype(self):
        return self.tensors["embed"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.copy() for k, v in self.tensors.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(self.cfg, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def encoder_names(self) -> list[str]:
        return [k for k in self.tensors if not k.startswith("head.")]

    def head_names(self, task: str) -> list[str]:
        return [f"head.{task}.w", f"head.{task}.b"]

    def equal(self, other: "ModelParams") -> bool:
        return self.tensors.keys() == other.tensors.keys() and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items()
        )


def _layer_shapes(cfg: ModelConfig, layer: int) -> dict[str, tuple[int, ...]]:
    H, d, dh, dff = cfg.n_heads, cfg.d_model, cfg.d_head, cfg.d_ff
    p = f"layer{layer}."
    return {
        p + "wq": (H, d, dh), p + "wk": (H, d, dh), p + "wv": (H, d, dh), p + "wo": (H, dh, d),
        p + "ffn.w1": (d, dff), p + "ffn.b1": (dff,), p + "ffn.w2": (dff, d), p + "ffn.b2": (d,),
        p + "ln1.g": (d,), p + "ln1.b": (d,), p + "ln2.g": (d,), p + "ln2.b": (d,),
    }


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab, cfg.d_model)}
    for layer in range(cfg.n_layers):
        shapes.update(_layer_shapes(cfg, layer))
    for task, n_out in cfg.heads.items():
        shapes[f"head.{task}.w"] = (cfg.d_model, n_out)
        shapes[f"head.{task}.b"] = (n_out,)
    return shapes


def init_head(cfg: ModelConfig, task: str, seed: int, dtype=np.float32) -> dict[str, np.ndarray]:
    # keyed by task name so a head's init does not depend on which other tasks exist
    rng = np.random.default_rng([seed, 1, zlib.crc32(task.encode())])
    n_out = cfg.heads[task]
    return {
        f"head.{task}.w": (rng.standard_normal((cfg.d_model, n_out)) / np.sqrt(cfg.d_model)).astype(dtype),
        f"head.{task}.b": np.zeros(n_out, dtype=dtype),
    }


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    rng = np.random.default_rng([seed, 0])
    d = cfg.d_model
    tensors: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(cfg).items():
        if name.startswith("head."):
            continue
        leaf = name.rsplit(".", 1)[-1]
        if name == "embed":
            arr = rng.standard_normal(shape)
        elif leaf in ("wq", "wk", "wv", "wo", "w1"):
            arr = rng.standard_normal(shape) / np.sqrt(d)
        elif leaf == "w2":
            arr = rng.standard_normal(shape) / np.sqrt(cfg.d_ff)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = np.zeros(shape)
        tensors[name] = arr.astype(dtype)
    for task in cfg.heads:
        tensors.update(init_head(cfg, task, seed, dtype))
    return ModelParams(cfg, tensors)


def positional_table(max_len: int, d: int) -> np.ndarray:
    pos = np.arange(max_len)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


# ---------------------------------------------------------------- mask variables


class MaskVars(NamedTuple):
    """Mask values as tensors: ``xi[l]`` is (H,) or (b, H), ``nu[l]`` is (1,) or (b,)."""

    xi: list[Tensor]
    nu: list[Tensor]


def mask_variables(mask: MaskSet, tape: Tape | None, dtype=np.float32, batch: int | None = None) -> MaskVars:
    """Bind a MaskSet as tensors, optionally replicated per example.

    With ``batch`` set, every example gets its own copy of each mask variable;
    under a summed loss the gradient of copy ``i`` is example ``i``'s own
    mask gradient.
    """
    xi, nu = [], []
    for layer in range(mask.n_layers):
        x = mask.xi[layer].astype(dtype)
        n = mask.nu[layer : layer + 1].astype(dtype)
        if batch is not None:
            x = np.tile(x, (batch, 1))
            n = np.tile(n, batch)
        if tape is None:
            xi.append(Tensor(x))
            nu.append(Tensor(n))
        else:
            xi.append(tape.variable(x))
            nu.append(tape.variable(n))
    return MaskVars(xi, nu)


def bind(params: ModelParams, tape: Tape | None, names=None) -> dict[str, Tensor]:
    names = params.names() if names is None else names
    if tape is None:
        return {k: Tensor(params[k]) for k in names}
    return {k: tape.variable(params[k]) for k in names}


# ---------------------------------------------------------------- blocks


def attention(Q: Tensor, K: Tensor, V: Tensor, d_model: int) -> Tensor:
    """Softmax(Q K^T / sqrt(d_model)) V over the last two axes."""
    logits = ad.scale(ad.matmul(Q, ad.swap_last(K)), 1.0 / np.sqrt(d_model))
    return ad.matmul(ad.softmax_rows(logits), V)


def attention_head(q: Tensor, x: Tensor, wq: Tensor, wk: Tensor, wv: Tensor, d_model: int) -> Tensor:
    """One head, Att(q Wq, x Wk, x Wv), for q, x of shape (l, d) and weights (d, d_h)."""
    return attention(ad.matmul(q, wq), ad.matmul(x, wk), ad.matmul(x, wv), d_model)


def _project(x2: Tensor, w: Tensor, b: int, l: int, H: int, dh: int) -> Tensor:
    # (b*l, d) @ (d, H*dh) -> (b, H, l, dh); stacked (H, d, dh) weights fused into one matmul
    d = w.shape[1]
    wf = ad.reshape(ad.transpose(w, (1, 0, 2)), (d, H * dh))
    y = ad.reshape(ad.matmul(x2, wf), (b, l, H, dh))
    return ad.transpose(y, (0, 2, 1, 3))


def masked_mha(q: Tensor, x: Tensor, w: dict[str, Tensor], layer: int, xi, cfg: ModelConfig) -> Tensor:
    """Sum over heads of xi_h * head_h(q, x) @ Wo_h, for q, x of shape (b, l, d).

    ``xi`` may be None (no masking), a Tensor of shape (H,) or (b, H), or an array.
    """
    b, l, d = q.shape
    H, dh = cfg.n_heads, cfg.d_head
    p = f"layer{layer}."
    q2 = ad.reshape(q, (b * l, d))
    x2 = q2 if x is q else ad.reshape(x, (b * l, d))
    heads = attention(
        _project(q2, w[p + "wq"], b, l, H, dh),
        _project(x2, w[p + "wk"], b, l, H, dh),
        _project(x2, w[p + "wv"], b, l, H, dh),
        cfg.d_model,
    )  # b, H, l, dh
    if xi is not None:
        xi = xi if isinstance(xi, Tensor) else Tensor(np.asarray(xi, dtype=q.dtype))
        heads = ad.mul(heads, ad.reshape(xi, (-1, H, 1, 1)))
    # masking before W^O gives the same sum by linearity with one matmul
    cat = ad.reshape(ad.transpose(heads, (0, 2, 1, 3)), (b * l, H * dh))
    wo = ad.reshape(w[p + "wo"], (H * dh, d))
    return ad.reshape(ad.matmul(cat, wo), (b, l, d))


def ffn(z: Tensor, w: dict[str, Tensor], layer: int, activation: str) -> Tensor:
    p = f"layer{layer}.ffn."
    h = ad.add(ad.matmul(z, w[p + "w1"]), w[p + "b1"])
    h = ad.relu(h) if activation == "relu" else ad.gelu(h)
    return ad.add(ad.matmul(h, w[p + "w2"]), w[p + "b2"])


def masked_ffn(z: Tensor, w: dict[str, Tensor], layer: int, nu, activation: str = "gelu") -> Tensor:
    """Residual FFN sublayer ``z + nu * FFN(z)`` (before the layer norm)."""
    out = ffn(z, w, layer, activation)
    if nu is not None:
        nu = nu if isinstance(nu, Tensor) else Tensor(np.asarray(nu, dtype=z.dtype).reshape(-1))
        out = ad.mul(out, ad.reshape(nu, (-1, 1, 1)))
    return ad.add(z, out)


def encoder_layer(x: Tensor, w: dict[str, Tensor], layer: int, xi, nu, cfg: ModelConfig) -> Tensor:
    p = f"layer{layer}."
    a = ad.layer_norm(ad.add(x, masked_mha(x, x, w, layer, xi, cfg)), w[p + "ln1.g"], w[p + "ln1.b"], cfg.ln_eps)
    z = masked_ffn(a, w, layer, nu, cfg.activation)
    return ad.layer_norm(z, w[p + "ln2.g"], w[p + "ln2.b"], cfg.ln_eps)


def _mask_vars(mask, dtype) -> MaskVars | None:
    if mask is None or isinstance(mask, MaskVars):
        return mask
    return mask_variables(mask, None, dtype)


def encode(
    w: dict[str, Tensor],
    tokens: np.ndarray,
    mask: MaskSet | MaskVars | None,
    cfg: ModelConfig,
) -> Tensor:
    """Token ids (b, l) to mean-pooled representation (b, d)."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ad.ShapeError(f"tokens must be (batch, length), got {tokens.shape}")
    b, l = tokens.shape
    if l > cfg.max_len:
        raise ad.InputError(f"sequence length {l} exceeds max_len {cfg.max_len}")
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cfg.vocab):
        raise ad.InputError(f"token id out of range [0, {cfg.vocab})")
    dtype = w["embed"].dtype
    mv = _mask_vars(mask, dtype)
    pos = positional_table(cfg.max_len, cfg.d_model)[:l].astype(dtype)
    x = ad.add(ad.gather_rows(w["embed"], tokens), pos)
    for layer in range(cfg.n_layers):
        xi = mv.xi[layer] if mv is not None else None
        nu = mv.nu[layer] if mv is not None else None
        x = encoder_layer(x, w, layer, xi, nu, cfg)
    return ad.mean(x, axis=1)


def forward(
    params: ModelParams,
    tokens: np.ndarray,
    mask: MaskSet | MaskVars | None,
    task: str,
    *,
    bound: dict[str, Tensor] | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits (b, n_out) for ``task``; ``mask=None`` skips masking entirely."""
    if task not in params.cfg.heads:
        raise KeyError(f"no head for task {task!r}")
    w = bound if bound is not None else bind(params, None)
    pooled = encode(w, tokens, mask, params.cfg)
    if dropout > 0.0:
        if rng is None:
            raise ValueError("dropout requires an rng")
        keep = (rng.random(pooled.shape) >= dropout).astype(pooled.dtype) / pooled.dtype.type(1.0 - dropout)
        pooled = ad.mul(pooled, keep)
    return ad.add(ad.matmul(pooled, w[f"head.{task}.w"]), w[f"head.{task}.b"])


def predict(params: ModelParams, tokens: np.ndarray, mask: MaskSet | None, task: str, batch_size: int = 512) -> np.ndarray:
    outs = [
        forward(params, tokens[i : i + batch_size], mask, task).data
        for i in range(0, len(tokens), batch_size)
    ]
    return np.concatenate(outs, axis=0)


class LossGrads(NamedTuple):
    loss: float
    grads: dict[str, np.ndarray]
    xi_grad: np.ndarray | None  # (L, H) or (b, L, H)
    nu_grad: np.ndarray | None  # (L,) or (b, L)


def loss_and_grads(
    params: ModelParams,
    tokens: np.ndarray,
    targets: np.ndarray,
    mask: MaskSet,
    task: str,
    loss_kind: str,
    *,
    names: list[str] | None = None,
    mask_grads: str | None = None,
    reduction: str = "mean",
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> LossGrads:
    """One forward/backward pass.

    ``names`` restricts which parameters are tape variables (others are
    constants).  ``mask_grads`` is None, "shared" or "per_example".
    """
    tape = Tape()
    if names is None:
        names = params.encoder_names() + params.head_names(task)
    w = bind(params, tape, names)
    for k in params.encoder_names() + params.head_names(task):
        if k not in w:
            w[k] = Tensor(params[k])
    if mask_grads is None:
        mv = mask_variables(mask, None, params.dtype)
    elif mask_grads == "shared":
        mv = mask_variables(mask, tape, params.dtype)
    elif mask_grads == "per_example":
        mv = mask_variables(mask, tape, params.dtype, batch=len(tokens))
    else:
        raise ValueError(f"unknown mask_grads mode {mask_grads!r}")
    logits = forward(params, tokens, mv, task, bound=w, dropout=dropout, rng=rng)
    root = ad.loss(logits, targets, loss_kind, reduction)
    g = ad.backward(root)
    grads = {k: g.of(w[k]) for k in names}
    xi_grad = nu_grad = None
    if mask_grads is not None:
        xi_grad = np.stack([g.of(t) for t in mv.xi], axis=-2)
        nu_grad = np.stack([g.of(t) for t in mv.nu], axis=-1)
        if mask_grads == "shared":
            nu_grad = nu_grad.reshape(-1)
    return LossGrads(root.item(), grads, xi_grad, nu_grad)


# ---------------------------------------------------------------- accounting


def head_param_count(cfg: ModelConfig) -> int:
    return 4 * cfg.d_model * cfg.d_head


def ffn_param_count(cfg: ModelConfig) -> int:
    return 2 * cfg.d_model * cfg.d_ff + cfg.d_ff + cfg.d_model


def layernorm_param_count(cfg: ModelConfig) -> int:
    return 4 * cfg.d_model


def remaining_fraction(mask: MaskSet, cfg: ModelConfig) -> float:
    """Share of encoder parameters (embeddings and heads excluded) kept by ``mask``."""
    fixed = cfg.n_layers * layernorm_param_count(cfg)
    total = fixed + cfg.n_layers * (cfg.n_heads * head_param_count(cfg) + ffn_param_count(cfg))
    kept = fixed + int(mask.xi.sum()) * head_param_count(cfg) + int(mask.nu.sum()) * ffn_param_count(cfg)
    return kept / total


def update_masks(params: ModelParams, mask: MaskSet, task: str | None = None) -> dict[str, np.ndarray]:
    """Per-parameter 0/1 arrays (broadcastable) marking entries a step may touch.

    Head weights follow ``mask.xi``, FFN weights ``mask.nu``; embeddings and
    layer norms are always live.  Heads of tasks other than ``task`` are
    frozen when ``task`` is given.
    """
    out: dict[str, np.ndarray] = {}
    for name in params.names():
        if name.startswith("head."):
            live = task is None or name.split(".")[1] == task
            out[name] = np.array(1.0 if live else 0.0)
            continue
        if not name.startswith("layer"):
            out[name] = np.array(1.0)
            continue
        layer_s, rest = name.split(".", 1)
        layer = int(layer_s[5:])
        if rest in ("wq", "wk", "wv", "wo"):
            out[name] = mask.xi[layer].astype(np.float64).reshape(-1, 1, 1)
        elif rest.startswith("ffn."):
            out[name] = np.array(float(mask.nu[layer]))
        else:
            out[name] = np.array(1.0)
    return out
