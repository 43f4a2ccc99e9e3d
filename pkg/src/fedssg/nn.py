"""Small numpy MLP classifier with an explicit trunk/head split.

Parameters live in one flat float64 vector so that federated exchange,
aggregation and optimizer updates are plain vector arithmetic. The trunk
occupies the leading slice of the vector and the head the trailing slice.

Layer layout::

    trunk:  [Linear -> act] * len(trunk_layers)          -> features
    head:   [Linear -> standardize -> act -> dropout] * len(head_layers)
            Linear -> logits
"""
from __future__ import annotations

import functools
import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import ConfigError, Dataset, Sample

NORM_EPS = 1e-5
COS_EPS = 1e-12


@dataclass(frozen=True)
class MlpTopology:
    input_dim: int
    trunk_layers: tuple = (32, 32)
    head_layers: tuple = (16,)
    output_dim: int = 5
    activation: str = "relu"
    dropout: float = 0.3
    head_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trunk_layers", tuple(int(w) for w in self.trunk_layers))
        object.__setattr__(self, "head_layers", tuple(int(w) for w in self.head_layers))
        widths = (self.input_dim, self.output_dim) + self.trunk_layers + self.head_layers
        if min(widths) < 1:
            raise ConfigError("all layer widths must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.activation not in _ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}")

    @property
    def feature_dim(self) -> int:
        return self.trunk_layers[-1] if self.trunk_layers else self.input_dim

    def layers(self) -> tuple["_Layer", ...]:
        return _layout(self)

    def _build_layers(self) -> tuple["_Layer", ...]:
        out, offset, prev = [], 0, self.input_dim
        for w in self.trunk_layers:
            out.append(_Layer("trunk", prev, w, offset, norm=False))
            offset += out[-1].size
            prev = w
        for w in self.head_layers:
            out.append(_Layer("head", prev, w, offset, norm=self.head_norm))
            offset += out[-1].size
            prev = w
        out.append(_Layer("out", prev, self.output_dim, offset, norm=False))
        return tuple(out)

    @property
    def n_params(self) -> int:
        last = self.layers()[-1]
        return last.offset + last.size

    @property
    def trunk_span(self) -> tuple[int, int]:
        trunk = [l for l in self.layers() if l.group == "trunk"]
        return (0, trunk[-1].offset + trunk[-1].size) if trunk else (0, 0)

    @property
    def head_span(self) -> tuple[int, int]:
        return (self.trunk_span[1], self.n_params)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_layers"] = list(self.trunk_layers)
        d["head_layers"] = list(self.head_layers)
        return d


@functools.lru_cache(maxsize=None)
def _layout(topology: MlpTopology) -> tuple["_Layer", ...]:
    return topology._build_layers()


@dataclass(frozen=True)
class _Layer:
    group: str
    fan_in: int
    fan_out: int
    offset: int
    norm: bool

    @property
    def size(self) -> int:
        return self.fan_out * self.fan_in + self.fan_out + (2 * self.fan_out if self.norm else 0)

    def views(self, values: np.ndarray):
        o, i, n = self.offset, self.fan_in, self.fan_out
        W = values[o:o + n * i].reshape(n, i)
        o += n * i
        b = values[o:o + n]
        o += n
        if not self.norm:
            return W, b, None, None
        return W, b, values[o:o + n], values[o + n:o + 2 * n]


@dataclass(frozen=True, eq=False)
class ParamVector:
    values: np.ndarray
    topology: MlpTopology

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True).reshape(-1)
        if v.size != self.topology.n_params:
            raise ConfigError(f"expected {self.topology.n_params} parameters, got {v.size}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def trunk_span(self) -> tuple[int, int]:
        return self.topology.trunk_span

    @property
    def head_span(self) -> tuple[int, int]:
        return self.topology.head_span

    def with_values(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.topology)


# -- activations --------------------------------------------------------------

def _relu(x):
    return np.maximum(x, 0.0)


def _relu_grad(x, y):
    return (x > 0).astype(np.float64)


def _tanh_grad(x, y):
    return 1.0 - y * y


def _silu(x):
    return x / (1.0 + np.exp(-x))


def _silu_grad(x, y):
    s = 1.0 / (1.0 + np.exp(-x))
    return s * (1.0 + x * (1.0 - s))


_ACTIVATIONS = {
    "relu": (_relu, _relu_grad),
    "tanh": (np.tanh, _tanh_grad),
    "silu": (_silu, _silu_grad),
}


# -- init -------------------------------------------------------------------

def init_params(topology: MlpTopology, rng: np.random.Generator) -> ParamVector:
    """He-uniform weights, zero biases, unit scale / zero shift for normalizers."""
    values = np.zeros(topology.n_params)
    for layer in topology.layers():
        W, b, g, _ = layer.views(values)
        bound = np.sqrt(6.0 / layer.fan_in) if layer.group != "out" else np.sqrt(3.0 / layer.fan_in)
        W[...] = rng.uniform(-bound, bound, size=W.shape)
        if g is not None:
            g[...] = 1.0
    return ParamVector(values, topology)


def zero_params(topology: MlpTopology) -> ParamVector:
    return ParamVector(np.zeros(topology.n_params), topology)


# -- forward / backward -------------------------------------------------------

def as_matrix(batch) -> np.ndarray:
    if isinstance(batch, Dataset):
        return batch.features
    if isinstance(batch, np.ndarray):
        return np.atleast_2d(np.asarray(batch, dtype=np.float64))
    if batch and isinstance(batch[0], Sample):
        return np.stack([s.features for s in batch]).astype(np.float64)
    return np.atleast_2d(np.asarray(batch, dtype=np.float64))


@dataclass
class ForwardCache:
    inputs: np.ndarray
    records: list = field(default_factory=list)
    features: np.ndarray | None = None


def forward(params: ParamVector, batch, mode: str = "eval", rng: np.random.Generator | None = None,
            return_cache: bool = False):
    """Return ``(logits, features)``; features are the last trunk activation.

    ``mode="train"`` enables dropout and needs ``rng``; eval is deterministic.
    """
    X = as_matrix(batch)
    topo = params.topology
    if X.ndim != 2 or X.shape[1] != topo.input_dim or X.shape[0] == 0:
        raise ConfigError(f"batch must be a non-empty (B, {topo.input_dim}) matrix, got {X.shape}")
    train = mode == "train"
    if train and topo.dropout > 0 and rng is None:
        raise ConfigError("train-mode forward with dropout needs an rng")
    act, _ = _ACTIVATIONS[topo.activation]
    cache = ForwardCache(X)
    h = X
    features = X
    for layer in topo.layers():
        W, b, g, beta = layer.views(params.values)
        a = h @ W.T + b
        rec = {"layer": layer, "input": h}
        if layer.group == "out":
            h = a
        else:
            if layer.norm:
                mu = a.mean(axis=1, keepdims=True)
                sd = np.sqrt(a.var(axis=1, keepdims=True) + NORM_EPS)
                xhat = (a - mu) / sd
                rec.update(xhat=xhat, sd=sd)
                a = g * xhat + beta
            z = act(a)
            rec.update(pre=a, post=z)
            if layer.group == "head" and train and topo.dropout > 0:
                keep = rng.random(z.shape) >= topo.dropout
                mask = keep / (1.0 - topo.dropout)
                rec["mask"] = mask
                z = z * mask
            h = z
            if layer.group == "trunk":
                features = h
        cache.records.append(rec)
    cache.features = features
    if return_cache:
        return h, features, cache
    return h, features


def backward(params: ParamVector, cache: ForwardCache, grad_logits: np.ndarray,
             grad_features: np.ndarray | None = None, want_input_grad: bool = False):
    """Reverse-mode gradient of a scalar loss given dL/dlogits (and dL/dfeatures)."""
    topo = params.topology
    _, act_grad = _ACTIVATIONS[topo.activation]
    grad = np.zeros(topo.n_params)
    delta = grad_logits
    n_trunk = len(topo.trunk_layers)
    for idx in range(len(cache.records) - 1, -1, -1):
        rec = cache.records[idx]
        layer = rec["layer"]
        W, _, g, _ = layer.views(params.values)
        dW, db, dg, dbeta = layer.views(grad)
        if layer.group != "out":
            if grad_features is not None and idx == n_trunk - 1:
                delta = delta + grad_features
            if "mask" in rec:
                delta = delta * rec["mask"]
            delta = delta * act_grad(rec["pre"], rec["post"])
            if layer.norm:
                xhat, sd = rec["xhat"], rec["sd"]
                dg += np.sum(delta * xhat, axis=0)
                dbeta += np.sum(delta, axis=0)
                dxhat = delta * g
                delta = (dxhat - dxhat.mean(axis=1, keepdims=True)
                         - xhat * np.mean(dxhat * xhat, axis=1, keepdims=True)) / sd
        dW += delta.T @ rec["input"]
        db += delta.sum(axis=0)
        delta = delta @ W
    if grad_features is not None and n_trunk == 0:
        delta = delta + grad_features
    if want_input_grad:
        return grad, delta
    return grad


# -- losses -------------------------------------------------------------------

def log_softmax(logits: np.ndarray) -> np.ndarray:
    m = logits.max(axis=1, keepdims=True)
    s = logits - m
    return s - np.log(np.exp(s).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its exact gradient w.r.t. logits."""
    labels = np.asarray(labels, dtype=np.int64)
    B = logits.shape[0]
    lsm = log_softmax(logits)
    loss = -lsm[np.arange(B), labels].mean()
    grad = np.exp(lsm)
    grad[np.arange(B), labels] -= 1.0
    return float(loss), grad / B


def proximal_term(values: np.ndarray, anchor: np.ndarray, mu: float) -> tuple[float, np.ndarray]:
    diff = values - anchor
    return 0.5 * mu * float(diff @ diff), mu * diff


def _cosine(z, w):
    nz = np.sqrt(np.sum(z * z, axis=1) + COS_EPS)
    nw = np.sqrt(np.sum(w * w, axis=1) + COS_EPS)
    dot = np.sum(z * w, axis=1)
    sim = dot / (nz * nw)
    # d sim / d z
    dsim = w / (nz * nw)[:, None] - (dot / (nz ** 3 * nw))[:, None] * z
    return sim, dsim


def contrastive_term(z: np.ndarray, z_glob: np.ndarray, z_prev: np.ndarray, tau: float) -> tuple[float, np.ndarray]:
    """Model-contrastive loss, batch-mean, and its gradient w.r.t. ``z``.

    ``-log(exp(s_g/tau) / (exp(s_g/tau) + exp(s_p/tau)))`` with cosine
    similarities to the global and previous-local representations.
    """
    sg, dsg = _cosine(z, z_glob)
    sp, dsp = _cosine(z, z_prev)
    a, b = sg / tau, sp / tau
    # -log softmax over the pair, first entry
    loss = np.logaddexp(a, b) - a
    p_prev = np.exp(b - np.logaddexp(a, b))
    B = z.shape[0]
    grad = (-(p_prev)[:, None] * dsg + p_prev[:, None] * dsp) / tau / B
    return float(loss.mean()), grad


@dataclass(frozen=True)
class ProxTerm:
    anchor: np.ndarray
    mu: float


@dataclass(frozen=True)
class ContrastiveTerm:
    global_params: ParamVector
    prev_params: ParamVector
    mu: float
    tau: float


def composite_loss(params: ParamVector, X: np.ndarray, labels, *, mode: str = "train",
                   rng: np.random.Generator | None = None, prox: ProxTerm | None = None,
                   contrastive: ContrastiveTerm | None = None) -> tuple[float, np.ndarray]:
    """Classification loss plus optional proximal and contrastive terms."""
    logits, feats, cache = forward(params, X, mode=mode, rng=rng, return_cache=True)
    loss, dlogits = cross_entropy_loss(logits, labels)
    dfeats = None
    if contrastive is not None and contrastive.mu != 0.0:
        _, zg = forward(contrastive.global_params, X, mode="eval")
        _, zp = forward(contrastive.prev_params, X, mode="eval")
        lc, dz = contrastive_term(feats, zg, zp, contrastive.tau)
        loss += contrastive.mu * lc
        dfeats = contrastive.mu * dz
    grad = backward(params, cache, dlogits, dfeats)
    if prox is not None and prox.mu != 0.0:
        lp, gp = proximal_term(params.values, prox.anchor, prox.mu)
        loss += lp
        grad += gp
    return loss, grad


def predict(params: ParamVector, X) -> np.ndarray:
    logits, _ = forward(params, X, mode="eval")
    return np.argmax(logits, axis=1)


# -- optimizer ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class OptimizerState:
    """Per-group learning rates over index spans of a flat parameter vector."""

    kind: str
    groups: dict
    lrs: dict
    weight_decay: float = 0.0
    clip_norm: float | None = None
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ConfigError(f"unknown optimizer {self.kind!r}")
        if set(self.groups) != set(self.lrs):
            raise ConfigError("every parameter group needs a learning rate")
        if any(lr < 0 for lr in self.lrs.values()):
            raise ConfigError("learning rates must be non-negative")
        if self.weight_decay < 0:
            raise ConfigError("weight decay must be non-negative")


def make_optimizer(kind: str, n_params: int, groups: dict, lrs: dict, weight_decay: float = 0.0,
                   clip_norm: float | None = None) -> OptimizerState:
    m = v = None
    if kind == "adamw":
        m, v = np.zeros(n_params), np.zeros(n_params)
    return OptimizerState(kind, dict(groups), dict(lrs), weight_decay, clip_norm, m=m, v=v)


def classifier_optimizer(params: ParamVector, trunk_lr: float, head_lr: float, weight_decay: float = 0.0,
                         kind: str = "adamw", clip_norm: float | None = None) -> OptimizerState:
    return make_optimizer(kind, params.topology.n_params,
                          {"trunk": params.trunk_span, "head": params.head_span},
                          {"trunk": trunk_lr, "head": head_lr}, weight_decay, clip_norm)


def clip_gradient(grad: np.ndarray, max_norm: float | None) -> np.ndarray:
    if max_norm is None:
        return grad
    norm = float(np.sqrt(grad @ grad))
    if norm > max_norm:
        return grad * (max_norm / norm)
    return grad


def optimizer_step(state: OptimizerState, params, grad: np.ndarray):
    """One update; accepts a ParamVector or a raw array and returns the same kind."""
    values = params.values if isinstance(params, ParamVector) else np.asarray(params, dtype=np.float64)
    if grad.shape != values.shape:
        raise ConfigError("gradient and parameters differ in shape")
    grad = clip_gradient(grad, state.clip_norm)
    lr = np.zeros_like(values)
    for name, (a, b) in state.groups.items():
        lr[a:b] = state.lrs[name]
    new = values * (1.0 - lr * state.weight_decay) if state.weight_decay else values.copy()
    step = state.step + 1
    if state.kind == "sgd":
        new -= lr * grad
        state = replace(state, step=step)
    else:
        b1, b2 = state.betas
        m = b1 * state.m + (1.0 - b1) * grad
        v = b2 * state.v + (1.0 - b2) * grad * grad
        mhat = m / (1.0 - b1 ** step)
        vhat = v / (1.0 - b2 ** step)
        new -= lr * mhat / (np.sqrt(vhat) + state.eps)
        state = replace(state, step=step, m=m, v=v)
    if isinstance(params, ParamVector):
        return params.with_values(new), state
    return new, state


@dataclass(frozen=True)
class PlateauState:
    lrs: dict
    factor: float = 0.5
    patience: int = 3
    min_delta: float = 1e-4
    best: float = float("inf")
    bad_epochs: int = 0


def reduce_lr_on_plateau(state: PlateauState, validation_loss: float) -> PlateauState:
    """Scale every rate by ``factor`` after ``patience`` epochs without a
    strict improvement larger than ``min_delta``."""
    if validation_loss < state.best - state.min_delta:
        return replace(state, best=validation_loss, bad_epochs=0)
    bad = state.bad_epochs + 1
    if bad >= state.patience:
        lrs = {k: v * state.factor for k, v in state.lrs.items()}
        return replace(state, lrs=lrs, bad_epochs=0)
    return replace(state, bad_epochs=bad)


# -- checkpoints ------------------------------------------------------------------

def dump_vector(values: np.ndarray) -> str:
    return "\n".join(repr(float(v)) for v in values)


def parse_vector(text: str) -> np.ndarray:
    return np.array([float(t) for t in text.split()], dtype=np.float64)


def save_params(params: ParamVector, path: str | Path, extra: dict | None = None) -> None:
    header = {"topology": params.topology.to_dict(), "n_params": int(params.values.size)}
    if extra:
        header.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(header, sort_keys=True) + "\n" + dump_vector(params.values) + "\n")
    tmp.replace(path)


def load_params(path: str | Path) -> tuple[ParamVector, dict]:
    text = Path(path).read_text()
    first, _, rest = text.partition("\n")
    header = json.loads(first)
    topo = MlpTopology(**header["topology"])
    return ParamVector(parse_vector(rest), topo), header
