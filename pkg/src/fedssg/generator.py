"""Class-conditional generators over feature vectors.

The main model is a DDPM whose noise predictor is an MLP over
``[x_t, sinusoidal(t), class_embedding(y)]``. Row ``C`` of the embedding
table is the null class used for conditioning dropout and for the
unconditional branch of classifier-free guidance.

Training runs in standardized coordinates (per-feature mean/std of the
public data); samples are mapped back before they are returned.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .core import ConfigError, Dataset, RngStream


# -- schedule -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    T: int
    alpha_bar: np.ndarray  # length T + 1, alpha_bar[0] == 1
    betas: np.ndarray      # length T + 1, betas[0] == 0

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas


def cosine_schedule(T: int, s: float = 0.008, max_beta: float = 0.999) -> NoiseSchedule:
    """Cosine schedule; ``alpha_bar`` is the running product of the clipped betas,
    so it equals ``f(t)/f(0)`` wherever the clip is inactive."""
    if T < 2:
        raise ConfigError("T must be >= 2")
    t = np.arange(T + 1, dtype=np.float64)
    f = np.cos((t / T + s) / (1 + s) * np.pi / 2) ** 2
    ratio = f / f[0]
    betas = np.zeros(T + 1)
    betas[1:] = np.minimum(1.0 - ratio[1:] / ratio[:-1], max_beta)
    alpha_bar = np.cumprod(1.0 - betas)
    alpha_bar[0] = 1.0
    alpha_bar.setflags(write=False)
    betas.setflags(write=False)
    return NoiseSchedule(T, alpha_bar, betas)


def timestep_embedding(t: np.ndarray, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


# -- model ----------------------------------------------------------------------

@dataclass(frozen=True)
class GeneratorConfig:
    T: int = 512
    epochs: int = 50
    batch_size: int = 128
    lr: float = 1e-3
    clip_norm: float = 1.0
    cond_drop: float = 0.1
    guidance: float = 5.0
    hidden: tuple = (128, 128, 128)
    time_embed_dim: int = 32  # 16 sin/cos frequency pairs
    class_embed_dim: int = 8
    activation: str = "silu"
    ema_decay: float = 0.999
    clip_x0: bool = True
    kind: str = "ddpm"
    gmm_components: int = 2

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("ddpm", "gmm"):
            raise ConfigError(f"unknown generator kind {self.kind!r}")
        if not 0 <= self.cond_drop < 1:
            raise ConfigError("cond_drop must lie in [0, 1)")
        if self.time_embed_dim % 2:
            raise ConfigError("time_embed_dim must be even")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass(frozen=True, eq=False)
class DenoiserModel:
    mlp: nn.ParamVector
    class_embeddings: np.ndarray  # (C + 1, e); last row is the null class
    time_embed_dim: int
    dim: int

    @property
    def n_classes(self) -> int:
        return self.class_embeddings.shape[0] - 1

    @property
    def null_class(self) -> int:
        return self.n_classes

    def flat(self) -> np.ndarray:
        return np.concatenate([self.mlp.values, self.class_embeddings.ravel()])

    def with_flat(self, flat: np.ndarray) -> "DenoiserModel":
        n = self.mlp.values.size
        emb = np.array(flat[n:]).reshape(self.class_embeddings.shape)
        emb.setflags(write=False)
        return DenoiserModel(self.mlp.with_values(flat[:n]), emb, self.time_embed_dim, self.dim)

    def inputs(self, x_t: np.ndarray, t: np.ndarray, labels: np.ndarray) -> np.ndarray:
        return np.concatenate([x_t, timestep_embedding(t, self.time_embed_dim), self.class_embeddings[labels]], axis=1)

    def predict(self, x_t: np.ndarray, t, labels) -> np.ndarray:
        t = np.broadcast_to(np.asarray(t), (len(x_t),))
        labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (len(x_t),))
        out, _ = nn.forward(self.mlp, self.inputs(x_t, t, labels), mode="eval")
        return out


def init_denoiser(dim: int, n_classes: int, cfg: GeneratorConfig, gen: np.random.Generator) -> DenoiserModel:
    topo = nn.MlpTopology(input_dim=dim + cfg.time_embed_dim + cfg.class_embed_dim, trunk_layers=cfg.hidden,
                          head_layers=(), output_dim=dim, activation=cfg.activation, dropout=0.0, head_norm=False)
    mlp = nn.init_params(topo, gen)
    emb = gen.normal(size=(n_classes + 1, cfg.class_embed_dim))
    emb.setflags(write=False)
    return DenoiserModel(mlp, emb, cfg.time_embed_dim, dim)


def diffusion_loss(model: DenoiserModel, x_t: np.ndarray, t: np.ndarray, labels: np.ndarray,
                   eps: np.ndarray) -> tuple[float, np.ndarray]:
    """``MSE(eps_hat, eps) + L1(eps_hat, eps)`` and its gradient w.r.t. ``model.flat()``."""
    X = model.inputs(x_t, t, labels)
    pred, _, cache = nn.forward(model.mlp, X, mode="eval", return_cache=True)
    r = pred - eps
    n = r.size
    loss = float(np.mean(r * r) + np.mean(np.abs(r)))
    dpred = (2.0 * r + np.sign(r)) / n
    g_mlp, g_in = nn.backward(model.mlp, cache, dpred, want_input_grad=True)
    g_emb = np.zeros_like(model.class_embeddings)
    np.add.at(g_emb, labels, g_in[:, model.dim + model.time_embed_dim:])
    return loss, np.concatenate([g_mlp, g_emb.ravel()])


def q_sample(schedule: NoiseSchedule, x0: np.ndarray, t: np.ndarray, eps: np.ndarray) -> np.ndarray:
    ab = schedule.alpha_bar[t][:, None]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True, eq=False)
class GeneratorModel:
    denoiser: DenoiserModel
    schedule: NoiseSchedule
    guidance: float
    data_mean: np.ndarray
    data_std: np.ndarray
    x0_bounds: tuple | None = None  # standardized per-feature (lo, hi) of the training data
    frozen: bool = True

    @property
    def n_classes(self) -> int:
        return self.denoiser.n_classes

    @property
    def dim(self) -> int:
        return self.denoiser.dim

    def checksum(self) -> str:
        h = hashlib.sha256()
        arrays = [self.denoiser.flat(), self.schedule.alpha_bar, self.data_mean, self.data_std]
        arrays += list(self.x0_bounds or ())
        for a in arrays:
            h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        h.update(repr(self.guidance).encode())
        return h.hexdigest()

    def generate(self, labels, gen: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        z = ddpm_sample(self, labels, gen)
        return z * self.data_std + self.data_mean


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)
    n_examples: int = 0
    n_dropped: int = 0

    @property
    def drop_rate(self) -> float:
        return self.n_dropped / max(self.n_examples, 1)


def _ro(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


def _standardize_stats(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return mean, std


def train_generator(public: Dataset, cfg: GeneratorConfig, rng: RngStream,
                    log: TrainLog | None = None) -> "GeneratorModel | GmmSampler":
    """Fit a class-conditional generator on ``public`` and return it frozen."""
    if len(public) == 0:
        raise ConfigError("public data is empty")
    missing = [c for c in range(public.n_classes) if public.class_counts[c] == 0]
    if missing:
        raise ConfigError(f"public data lacks classes {missing}")
    if cfg.kind == "gmm":
        return fit_gmm_baseline(public, cfg.gmm_components, rng)
    log = log if log is not None else TrainLog()
    mean, std = _standardize_stats(public.features)
    x_all = (public.features - mean) / std
    y_all = public.labels
    gen = rng.child("generator-train").generator()
    model = init_denoiser(public.dim, public.n_classes, cfg, rng.child("generator-init").generator())
    schedule = cosine_schedule(cfg.T)
    flat = model.flat()
    ema = flat.copy()
    opt = nn.make_optimizer("adamw", flat.size, {"all": (0, flat.size)}, {"all": cfg.lr}, 0.0, cfg.clip_norm)
    n = len(x_all)
    for _ in range(cfg.epochs):
        for idx in np.array_split(gen.permutation(n), max(1, math.ceil(n / cfg.batch_size))):
            x0, y = x_all[idx], y_all[idx].copy()
            t = gen.integers(1, cfg.T + 1, size=len(idx))
            eps = gen.normal(size=x0.shape)
            drop = gen.random(len(idx)) < cfg.cond_drop
            y[drop] = model.null_class
            log.n_examples += len(idx)
            log.n_dropped += int(drop.sum())
            loss, grad = diffusion_loss(model, q_sample(schedule, x0, t, eps), t, y, eps)
            log.losses.append(loss)
            flat, opt = nn.optimizer_step(opt, flat, grad)
            model = model.with_flat(flat)
            if cfg.ema_decay:
                decay = min(cfg.ema_decay, (1.0 + opt.step) / (10.0 + opt.step))
                ema = decay * ema + (1.0 - decay) * flat
    if cfg.ema_decay:
        model = model.with_flat(ema)
    bounds = (x_all.min(axis=0), x_all.max(axis=0)) if cfg.clip_x0 else None
    return GeneratorModel(model, schedule, cfg.guidance, _ro(mean), _ro(std), x0_bounds=bounds)


# -- sampling -------------------------------------------------------------------

def cfg_predict(model: GeneratorModel, x_t: np.ndarray, t, labels, guidance: float | None = None) -> np.ndarray:
    """Guided noise estimate ``(1 - g) * eps_uncond + g * eps_cond``.

    Written in this form so that g=0 and g=1 return the two branches bit-exactly.
    """
    g = model.guidance if guidance is None else guidance
    x_t = np.atleast_2d(x_t)
    B = len(x_t)
    labels = np.broadcast_to(np.asarray(labels, dtype=np.int64), (B,))
    t = np.broadcast_to(np.asarray(t), (B,))
    both = model.denoiser.predict(np.concatenate([x_t, x_t]), np.concatenate([t, t]),
                                  np.concatenate([labels, np.full(B, model.denoiser.null_class)]))
    cond, uncond = both[:B], both[B:]
    return (1.0 - g) * uncond + g * cond


def ddpm_sample(model: GeneratorModel, labels: np.ndarray, gen: np.random.Generator,
                guidance: float | None = None) -> np.ndarray:
    """Ancestral sampling with reverse variance ``beta_t``; standardized output.

    The step goes through the predicted clean sample, clipped to the training
    data's range when the model carries bounds. Without bounds this is the
    usual ``(x - beta / sqrt(1 - abar) * eps) / sqrt(alpha)`` update.
    """
    if not model.frozen:
        raise ConfigError("sampling requires a frozen generator")
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return np.zeros((0, model.dim))
    sch = model.schedule
    x = gen.normal(size=(len(labels), model.dim))
    for t in range(sch.T, 0, -1):
        eps = cfg_predict(model, x, t, labels, guidance)
        beta, ab, ab_prev = sch.betas[t], sch.alpha_bar[t], sch.alpha_bar[t - 1]
        x0 = (x - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
        if model.x0_bounds is not None:
            x0 = np.clip(x0, model.x0_bounds[0], model.x0_bounds[1])
        x = (np.sqrt(ab_prev) * beta / (1.0 - ab)) * x0 + (np.sqrt(1.0 - beta) * (1.0 - ab_prev) / (1.0 - ab)) * x
        if t > 1:
            x = x + np.sqrt(beta) * gen.normal(size=x.shape)
    return x


def sample(model, class_id: int, n_samples: int, rng: RngStream, domain: int = 0,
           n_domains: int = 1) -> Dataset:
    """``n_samples`` labelled draws of ``class_id``, tagged with ``domain``."""
    labels = np.full(n_samples, class_id, dtype=np.int64)
    return sample_labels(model, labels, rng, domain, n_domains)


def sample_labels(model, labels, rng: RngStream, domain: int = 0, n_domains: int = 1) -> Dataset:
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) == 0:
        return Dataset.empty(model.dim, model.n_classes, n_domains)
    x = model.generate(labels, rng.generator())
    return Dataset(x, labels, np.full(len(labels), domain), model.n_classes, n_domains)


# -- Gaussian-mixture baseline ------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GmmSampler:
    """Per-class Gaussian mixtures; same ``generate`` contract as the DDPM."""

    weights: tuple      # per class: (k,)
    means: tuple        # per class: (k, d)
    covariances: tuple  # per class: (k, d, d)
    dim: int
    frozen: bool = True

    @property
    def n_classes(self) -> int:
        return len(self.weights)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for group in (self.weights, self.means, self.covariances):
            for a in group:
                h.update(np.ascontiguousarray(a, dtype=np.float64).tobytes())
        return h.hexdigest()

    def generate(self, labels, gen: np.random.Generator) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        out = np.zeros((len(labels), self.dim))
        for c in range(self.n_classes):
            sel = np.flatnonzero(labels == c)
            if not len(sel):
                continue
            comp = gen.choice(len(self.weights[c]), size=len(sel), p=self.weights[c])
            for k in range(len(self.weights[c])):
                rows = sel[comp == k]
                if len(rows):
                    out[rows] = gen.multivariate_normal(self.means[c][k], self.covariances[c][k],
                                                        size=len(rows), method="cholesky")
        return out


def fit_gmm_baseline(public: Dataset, components_per_class: int, rng: RngStream) -> GmmSampler:
    """EM fit per class (scikit-learn); classes with fewer than
    ``components_per_class * (d + 1)`` samples get one full-covariance Gaussian."""
    from sklearn.mixture import GaussianMixture

    d = public.dim
    weights, means, covs = [], [], []
    for c in range(public.n_classes):
        x = public.features[public.labels == c]
        if len(x) == 0:
            raise ConfigError(f"class {c} has no samples")
        k = components_per_class if len(x) >= components_per_class * (d + 1) else 1
        if k == 1:
            mu = x.mean(axis=0)
            cov = np.cov(x, rowvar=False, bias=True).reshape(d, d) + 1e-6 * np.eye(d)
            weights.append(np.ones(1))
            means.append(mu[None, :])
            covs.append(cov[None, :, :])
            continue
        seed = int(rng.child("gmm", c).generator().integers(0, 2**31 - 1))
        gm = GaussianMixture(k, covariance_type="full", random_state=seed, n_init=3, reg_covar=1e-6).fit(x)
        weights.append(gm.weights_ / gm.weights_.sum())
        means.append(gm.means_)
        covs.append(gm.covariances_)
    return GmmSampler(tuple(weights), tuple(means), tuple(covs), d)


# -- checkpoints --------------------------------------------------------------------

def save_generator(model, path: str | Path) -> None:
    path = Path(path)
    if isinstance(model, GmmSampler):
        payload = {"kind": "gmm", "dim": model.dim,
                   "weights": [w.tolist() for w in model.weights],
                   "means": [m.tolist() for m in model.means],
                   "covariances": [c.tolist() for c in model.covariances]}
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload) + "\n")
        return
    extra = {
        "kind": "ddpm",
        "T": model.schedule.T,
        "alpha_bar": model.schedule.alpha_bar.tolist(),
        "betas": model.schedule.betas.tolist(),
        "guidance": model.guidance,
        "data_mean": model.data_mean.tolist(),
        "data_std": model.data_std.tolist(),
        "x0_bounds": [b.tolist() for b in model.x0_bounds] if model.x0_bounds is not None else None,
        "class_embeddings": model.denoiser.class_embeddings.tolist(),
        "time_embed_dim": model.denoiser.time_embed_dim,
        "dim": model.dim,
    }
    nn.save_params(model.denoiser.mlp, path, extra)


def load_generator(path: str | Path):
    text = Path(path).read_text()
    header = json.loads(text.partition("\n")[0])
    if header.get("kind") == "gmm":
        return GmmSampler(tuple(np.array(w) for w in header["weights"]),
                          tuple(np.array(m) for m in header["means"]),
                          tuple(np.array(c) for c in header["covariances"]), header["dim"])
    mlp, header = nn.load_params(path)
    emb = np.array(header["class_embeddings"], dtype=np.float64)
    emb.setflags(write=False)
    ab = np.array(header["alpha_bar"])
    betas = np.array(header["betas"])
    ab.setflags(write=False)
    betas.setflags(write=False)
    den = DenoiserModel(mlp, emb, header["time_embed_dim"], header["dim"])
    bounds = header.get("x0_bounds")
    bounds = tuple(_ro(b) for b in bounds) if bounds is not None else None
    return GeneratorModel(den, NoiseSchedule(header["T"], ab, betas), header["guidance"],
                          _ro(header["data_mean"]), _ro(header["data_std"]), x0_bounds=bounds)
