"""Federated orchestration: public pretraining, client selection, local
training under FedAvg / FedProx / MOON objectives, weighted aggregation.

Every random choice is drawn from a stream named by its role, round and
client id, so results do not depend on the order clients are trained in.
"""
from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import nn
from .allocator import AllocationInput, AllocationPlan, AllocatorConfig, synthetic_budget, validate_domain_scales
from .core import ClientDataset, ConfigError, Dataset, ProtocolError, RngStream, checksum
from .datasynth import FederatedSplit, class_balanced_sampler, stratified_holdout, uniform_batches
from .generator import sample_labels
from .metrics import evaluate, per_domain_report

log = logging.getLogger(__name__)

STRATEGIES = ("fedavg", "fedprox", "moon")


@dataclass(frozen=True)
class ModelConfig:
    trunk_layers: tuple = (32, 32)
    head_layers: tuple = (16,)
    activation: str = "relu"
    dropout: float = 0.3
    head_norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "trunk_layers", tuple(int(w) for w in self.trunk_layers))
        object.__setattr__(self, "head_layers", tuple(int(w) for w in self.head_layers))

    def topology(self, input_dim: int, n_classes: int) -> nn.MlpTopology:
        return nn.MlpTopology(input_dim, self.trunk_layers, self.head_layers, n_classes,
                              self.activation, self.dropout, self.head_norm)


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 30
    batch_size: int = 32
    head_lr: float = 1e-3
    trunk_lr: float = 1e-4
    weight_decay: float = 1e-4
    early_stopping_patience: int = 5
    val_fraction: float = 0.1
    plateau_factor: float = 0.5
    plateau_patience: int = 3
    plateau_min_delta: float = 1e-4


@dataclass(frozen=True)
class FederationConfig:
    K: int = 85
    active_per_round: int = 6
    rounds: int = 150
    local_epochs: int = 5
    batch_size: int = 32
    local_lr: float = 1e-4
    local_weight_decay: float = 0.0
    strategy: str = "fedavg"
    prox_mu: float = 0.01
    moon_mu: float = 1.0
    moon_tau: float = 0.5
    use_synthetic: bool = False
    use_pretraining: bool = True
    aggregation_weighting: str = "augmented"
    local_balanced_sampling: bool = False
    regenerate_each_round: bool = False
    eval_interval: int = 5
    dirichlet_alpha: float = 0.5
    clients_per_domain: tuple | None = None
    min_client_size: int = 2

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"strategy must be one of {STRATEGIES}, got {self.strategy!r}")
        if self.aggregation_weighting not in ("real", "augmented"):
            raise ConfigError("aggregation_weighting must be 'real' or 'augmented'")
        if self.K < 1 or not 1 <= self.active_per_round <= self.K:
            raise ConfigError(f"need 1 <= active_per_round ({self.active_per_round}) <= K ({self.K})")
        if self.rounds < 1:
            raise ConfigError("rounds must be >= 1")
        if self.local_epochs < 0 or self.batch_size < 1:
            raise ConfigError("local_epochs must be >= 0 and batch_size >= 1")
        if self.prox_mu < 0 or self.moon_mu < 0 or self.moon_tau <= 0:
            raise ConfigError("prox_mu, moon_mu must be >= 0 and moon_tau > 0")
        if self.clients_per_domain is not None:
            object.__setattr__(self, "clients_per_domain", tuple(int(n) for n in self.clients_per_domain))

    @property
    def label(self) -> str:
        name = "fedssg" if self.use_synthetic else self.strategy
        if self.use_synthetic and self.strategy != "fedavg":
            name += f"+{self.strategy}"
        return name + ("" if self.use_pretraining else "-scratch")


# -- pretraining ------------------------------------------------------------------

def mean_ce(params: nn.ParamVector, data: Dataset) -> float:
    logits, _ = nn.forward(params, data.features, mode="eval")
    return nn.cross_entropy_loss(logits, data.labels)[0]


@dataclass
class PretrainResult:
    params: nn.ParamVector
    val_losses: list = field(default_factory=list)
    best_epoch: int = -1


def init_model(topology: nn.MlpTopology, rng: RngStream) -> nn.ParamVector:
    return nn.init_params(topology, rng.child("init").generator())


def pretrain(public: Dataset, topology: nn.MlpTopology, cfg: PretrainConfig, rng: RngStream,
             enabled: bool = True) -> PretrainResult:
    """Class-balanced supervised training on public data with early stopping
    on a held-out public split; returns the best-validation parameters."""
    theta = init_model(topology, rng)
    if not enabled:
        return PretrainResult(theta)
    missing = [c for c in range(public.n_classes) if public.class_counts[c] == 0]
    if missing:
        raise ConfigError(f"public data lacks classes {missing}")
    train, val = stratified_holdout(public, cfg.val_fraction, rng.child("pretrain-val"))
    if len(val) == 0:
        val = train
    gen = rng.child("pretrain").generator()
    opt = nn.classifier_optimizer(theta, cfg.trunk_lr, cfg.head_lr, cfg.weight_decay)
    sched = nn.PlateauState(dict(opt.lrs), cfg.plateau_factor, cfg.plateau_patience, cfg.plateau_min_delta)
    sampler = class_balanced_sampler(train.labels, cfg.batch_size, gen, train.n_classes)
    steps = max(1, math.ceil(len(train) / cfg.batch_size))
    best, best_loss, bad = theta, float("inf"), 0
    result = PretrainResult(theta)
    for epoch in range(cfg.epochs):
        for _ in range(steps):
            idx = next(sampler)
            _, grad = nn.composite_loss(theta, train.features[idx], train.labels[idx], mode="train", rng=gen)
            theta, opt = nn.optimizer_step(opt, theta, grad)
        vl = mean_ce(theta, val)
        result.val_losses.append(vl)
        sched = nn.reduce_lr_on_plateau(sched, vl)
        opt = replace(opt, lrs=dict(sched.lrs))
        if vl < best_loss:
            best, best_loss, bad, result.best_epoch = theta, vl, 0, epoch
        else:
            bad += 1
            if bad >= cfg.early_stopping_patience:
                break
    result.params = best
    return result


# -- client side ---------------------------------------------------------------------

def select_clients(K: int, active_per_round: int, round_index: int, rng: RngStream) -> list[int]:
    if active_per_round > K:
        raise ConfigError("active_per_round exceeds K")
    gen = rng.child("select", round_index).generator()
    return sorted(int(k) for k in gen.choice(K, size=active_per_round, replace=False))


@dataclass(frozen=True, eq=False)
class ClientUpdate:
    client_id: int
    params: nn.ParamVector
    weight: float
    steps: int = 0
    last_loss: float = float("nan")


def local_train(client: ClientDataset, global_params: nn.ParamVector, cfg: FederationConfig, rng: RngStream,
                prev_params: nn.ParamVector | None = None) -> ClientUpdate:
    """Run ``cfg.local_epochs`` over the client's (augmented) data."""
    data = client.augmented if cfg.use_synthetic else client.real
    if len(data) == 0:
        raise ConfigError(f"client {client.client_id} has no training data")
    weight = float(len(data) if cfg.aggregation_weighting == "augmented" else len(client.real))
    gen = rng.generator()
    theta = global_params
    opt = nn.classifier_optimizer(theta, cfg.local_lr, cfg.local_lr, cfg.local_weight_decay)
    prox = nn.ProxTerm(global_params.values, cfg.prox_mu) if cfg.strategy == "fedprox" and cfg.prox_mu else None
    contrastive = None
    if cfg.strategy == "moon" and cfg.moon_mu:
        contrastive = nn.ContrastiveTerm(global_params, prev_params or global_params, cfg.moon_mu, cfg.moon_tau)
    steps_per_epoch = max(1, math.ceil(len(data) / cfg.batch_size))
    sampler = (class_balanced_sampler(data.labels, cfg.batch_size, gen, data.n_classes)
               if cfg.local_balanced_sampling else None)
    steps, loss = 0, float("nan")
    for _ in range(cfg.local_epochs):
        batches = ([next(sampler) for _ in range(steps_per_epoch)] if sampler is not None
                   else uniform_batches(len(data), cfg.batch_size, gen))
        for idx in batches:
            loss, grad = nn.composite_loss(theta, data.features[idx], data.labels[idx], mode="train", rng=gen,
                                           prox=prox, contrastive=contrastive)
            theta, opt = nn.optimizer_step(opt, theta, grad)
            steps += 1
    return ClientUpdate(client.client_id, theta, weight, steps, loss)


def aggregate(updates) -> nn.ParamVector:
    """Weighted mean of client parameters, reduced in ascending client-id order.

    Accepts :class:`ClientUpdate` objects or ``(params, weight)`` pairs (taken
    in the order given).
    """
    updates = list(updates)
    if not updates:
        raise ProtocolError("nothing to aggregate")
    if isinstance(updates[0], ClientUpdate):
        pairs = [(u.params, u.weight) for u in sorted(updates, key=lambda u: u.client_id)]
    else:
        pairs = [(p, float(w)) for p, w in updates]
    topo = pairs[0][0].topology
    if any(p.topology != topo for p, _ in pairs):
        raise ProtocolError("client updates have mismatched topologies")
    total = sum(w for _, w in pairs)
    if not total > 0 or any(w < 0 for _, w in pairs):
        raise ProtocolError("aggregation weights must be non-negative with a positive sum")
    acc = np.zeros(topo.n_params)
    for p, w in pairs:
        acc += (w / total) * p.values
    return nn.ParamVector(acc, topo)


# -- synthetic augmentation ------------------------------------------------------------

def allocation_for(client: ClientDataset, alloc: AllocatorConfig) -> tuple[AllocationInput, AllocationPlan]:
    inp = AllocationInput(tuple(client.real.class_counts.tolist()), client.domain, alloc.epsilon,
                          alloc.domain_scales[client.domain])
    return inp, synthetic_budget(inp)


def synthesize_for(client: ClientDataset, plan: AllocationPlan, generator, rng: RngStream) -> Dataset:
    labels = np.repeat(np.arange(len(plan.per_class_synthetic)), plan.per_class_synthetic)
    return sample_labels(generator, labels, rng, client.domain, client.real.n_domains)


# -- the round loop ----------------------------------------------------------------------

@dataclass
class RoundRecord:
    round_index: int
    selected: list
    update_norms: list
    checksum: str
    wall_time: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FederationResult:
    params: nn.ParamVector
    rounds: list
    history: list
    plans: dict
    clients: list
    generator_checksum: tuple | None = None


def _train_task(args):
    return local_train(*args)


def default_workers() -> int:
    return max(1, int(os.environ.get("FEDSSG_WORKERS", "1")))


def run_federation(split: FederatedSplit, theta0: nn.ParamVector, cfg: FederationConfig, rng: RngStream,
                   generator=None, alloc: AllocatorConfig | None = None, domain_names=None,
                   workers: int | None = None, on_round=None) -> FederationResult:
    """Initialize every client from ``theta0``, optionally augment with frozen
    generator samples, then loop select -> local train -> aggregate."""
    K = len(split.clients)
    if K != cfg.K:
        raise ConfigError(f"split has {K} clients but config K={cfg.K}")
    n_domains = split.test_set.n_domains
    domain_names = domain_names or [str(j) for j in range(n_domains)]
    alloc = alloc or AllocatorConfig()
    if cfg.use_synthetic:
        if generator is None:
            raise ConfigError("synthetic augmentation is on but no generator was supplied")
        if len(alloc.domain_scales) != n_domains:
            raise ConfigError("domain_scales needs one entry per domain")
        sizes = [sum(len(c.real) for c in split.clients if c.domain == j) for j in range(n_domains)]
        bad = validate_domain_scales(sizes, alloc.domain_scales)
        if bad and not alloc.allow_scale_override:
            raise ConfigError(f"domain scales {alloc.domain_scales} fail validate_domain_scales (size anti-monotonicity) at {bad}; "
                              "set allocator.allow_scale_override to run this ablation")
    gen_sum_before = generator.checksum() if generator is not None else None

    clients = list(split.clients)
    plans = {}
    if cfg.use_synthetic:
        for i, cl in enumerate(clients):
            inp, plan = allocation_for(cl, alloc)
            plans[cl.client_id] = (inp, plan)
            clients[i] = cl.with_synthetic(synthesize_for(cl, plan, generator, rng.child("synth", cl.client_id)))

    theta = theta0
    prev_local: dict[int, nn.ParamVector] = {}
    records, history = [], []
    workers = default_workers() if workers is None else workers
    pool = ProcessPoolExecutor(workers) if workers > 1 else None
    try:
        for r in range(cfg.rounds):
            t0 = time.perf_counter()
            chosen = select_clients(K, cfg.active_per_round, r, rng)
            if cfg.use_synthetic and cfg.regenerate_each_round and r > 0:
                for k in chosen:
                    _, plan = plans[k]
                    clients[k] = clients[k].with_synthetic(
                        synthesize_for(clients[k], plan, generator, rng.child("synth", k, r)))
            tasks = [(clients[k], theta, cfg, rng.child("local", r, k), prev_local.get(k)) for k in chosen]
            if pool is not None:
                updates = list(pool.map(_train_task, tasks))
            else:
                updates = [_train_task(t) for t in tasks]
            if cfg.strategy == "moon":
                for u in updates:
                    prev_local[u.client_id] = u.params
            new_theta = aggregate(updates)
            norms = [float(np.linalg.norm(u.params.values - theta.values)) for u in updates]
            theta = new_theta
            records.append(RoundRecord(r, chosen, norms, checksum(theta.values), time.perf_counter() - t0))
            if (r + 1) % cfg.eval_interval == 0 or r == cfg.rounds - 1:
                row = {"round": r + 1}
                row.update(per_domain_report(evaluate(theta, split.test_set, n_domains), domain_names))
                history.append(row)
                log.debug("round %d avg acc %.4f", r + 1, row["acc_Avg"])
            if on_round is not None:
                on_round(records[-1])
    finally:
        if pool is not None:
            pool.shutdown()

    gen_sums = None
    if generator is not None:
        gen_sums = (gen_sum_before, generator.checksum())
        if gen_sums[0] != gen_sums[1]:
            raise ProtocolError("generator parameters changed during federation")
    return FederationResult(theta, records, history, plans, clients, gen_sums)
