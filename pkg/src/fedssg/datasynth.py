"""Synthetic multi-domain, class-imbalanced benchmarks and federated splits.

Samples are Gaussian class clusters in a shared latent space, pushed through
one affine map per acquisition domain. Public data is drawn from mildly
perturbed copies of those maps and carries the reserved untyped domain id
(``n_domains`` of the private data).
"""
from __future__ import annotations

import json
import math
from fractions import Fraction
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy.linalg import expm

from .core import ClientDataset, ConfigError, Dataset, RngStream

DOMAIN_NAMES = ("CP", "CNP", "NCP")
CLASS_NAMES = ("actinic_keratosis", "basal_cell_carcinoma", "melanoma", "nevus", "seborrheic_keratosis")

# rows: contact polarized, contact non-polarized, non-contact polarized
FULL_PRIVATE_COUNTS = (
    (133, 469, 609, 8227, 177),
    (222, 549, 591, 1564, 438),
    (54, 208, 194, 270, 64),
)
FULL_PUBLIC_COUNTS = (1119, 2593, 2732, 5380, 847)


def largest_remainder_round(real: Sequence[float], total: int) -> list[int]:
    real = np.asarray(real, dtype=np.float64)
    base = np.floor(real).astype(np.int64)
    short = int(total - base.sum())
    order = np.argsort(-(real - base), kind="stable")
    base[order[:short]] += 1
    return base.tolist()


def scale_counts(row: Sequence[int], factor: float) -> list[int]:
    """Scale a count row by ``factor`` keeping its total at ``round(sum * factor)``.

    Exact rational arithmetic, so remainder ties break by class index and not
    by float noise.
    """
    f = Fraction(str(factor))
    real = [c * f for c in row]
    base = [int(math.floor(r)) for r in real]
    total = int(math.floor(sum(real) + Fraction(1, 2)))
    order = sorted(range(len(row)), key=lambda i: (-(real[i] - base[i]), i))
    for i in order[: total - sum(base)]:
        base[i] += 1
    return base


def scaled_reference_counts(factor: float = 0.1) -> tuple[list[list[int]], list[int]]:
    return [scale_counts(r, factor) for r in FULL_PRIVATE_COUNTS], scale_counts(FULL_PUBLIC_COUNTS, factor)


@dataclass(frozen=True)
class BenchmarkSpec:
    n_classes: int = 5
    n_domains: int = 3
    dim: int = 16
    class_counts_per_domain: tuple = field(default_factory=lambda: tuple(map(tuple, scaled_reference_counts(0.1)[0])))
    public_class_counts: tuple = field(default_factory=lambda: tuple(scaled_reference_counts(0.1)[1]))
    class_separation: float = 2.0
    noise_scale: float = 1.0
    shift_scale: float = 1.5
    rotation_scale: float = 0.5
    stretch: float = 0.35
    public_perturbation: float = 0.1
    test_fraction: float = 0.15
    val_fraction: float = 0.10
    domain_names: tuple = DOMAIN_NAMES
    identity_domains: bool = False

    def __post_init__(self):
        object.__setattr__(self, "class_counts_per_domain",
                           tuple(tuple(int(c) for c in row) for row in self.class_counts_per_domain))
        object.__setattr__(self, "public_class_counts", tuple(int(c) for c in self.public_class_counts))
        object.__setattr__(self, "domain_names", tuple(self.domain_names))
        counts = np.asarray(self.class_counts_per_domain)
        if counts.shape != (self.n_domains, self.n_classes):
            raise ConfigError(f"class_counts_per_domain must be {self.n_domains}x{self.n_classes}")
        if len(self.public_class_counts) != self.n_classes:
            raise ConfigError("public_class_counts must have one entry per class")
        if counts.min() < 0 or min(self.public_class_counts) < 0:
            raise ConfigError("counts must be non-negative")
        if not (0 < self.test_fraction < 1 and 0 < self.val_fraction < 1
                and self.test_fraction + self.val_fraction < 1):
            raise ConfigError("test_fraction and val_fraction must lie in (0,1) and sum below 1")
        if self.class_separation < 0 or self.noise_scale < 0:
            raise ConfigError("class_separation and noise_scale must be non-negative")
        # cond(A) = exp(2 * stretch) must stay <= 3
        if not 0 <= self.stretch <= np.log(3.0) / 2:
            raise ConfigError("stretch must lie in [0, ln(3)/2]")
        if len(self.domain_names) != self.n_domains:
            raise ConfigError("domain_names must name every domain")

    @property
    def untyped_domain(self) -> int:
        return self.n_domains

    @property
    def domain_sizes(self) -> list[int]:
        return [sum(r) for r in self.class_counts_per_domain]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_counts_per_domain"] = [list(r) for r in self.class_counts_per_domain]
        d["public_class_counts"] = list(self.public_class_counts)
        d["domain_names"] = list(self.domain_names)
        return d


@dataclass(frozen=True, eq=False)
class DomainTransform:
    matrix: np.ndarray
    offset: np.ndarray

    def apply(self, z: np.ndarray) -> np.ndarray:
        return z @ self.matrix.T + self.offset


@dataclass(frozen=True, eq=False)
class BenchmarkWorld:
    """The latent generative structure behind a benchmark draw."""

    class_means: np.ndarray
    transforms: tuple
    public_transforms: tuple


def _random_transform(dim: int, spec: BenchmarkSpec, gen: np.random.Generator) -> DomainTransform:
    skew = gen.normal(size=(dim, dim))
    skew = (skew - skew.T) / np.sqrt(2 * dim)
    rot = expm(spec.rotation_scale * skew)
    stretch = np.exp(gen.uniform(-spec.stretch, spec.stretch, size=dim))
    direction = gen.normal(size=dim)
    offset = spec.shift_scale * direction / np.linalg.norm(direction)
    return DomainTransform(rot * stretch[None, :], offset)


def make_world(spec: BenchmarkSpec, rng: RngStream) -> BenchmarkWorld:
    gen = rng.child("means").generator()
    means = gen.normal(size=(spec.n_classes, spec.dim))
    means = spec.class_separation * means / np.linalg.norm(means, axis=1, keepdims=True)
    transforms, public = [], []
    for j in range(spec.n_domains):
        if spec.identity_domains:
            t = DomainTransform(np.eye(spec.dim), np.zeros(spec.dim))
        else:
            t = _random_transform(spec.dim, spec, rng.child("domain", j).generator())
        transforms.append(t)
        pg = rng.child("public-domain", j).generator()
        jitter = spec.public_perturbation * pg.normal(size=(spec.dim, spec.dim)) / np.sqrt(spec.dim)
        public.append(DomainTransform(t.matrix + jitter,
                                      t.offset + spec.public_perturbation * pg.normal(size=spec.dim)))
    return BenchmarkWorld(means, tuple(transforms), tuple(public))


def _cluster(spec, world, label, n, transform, gen):
    z = world.class_means[label] + spec.noise_scale * gen.normal(size=(n, spec.dim))
    return transform.apply(z)


def generate_benchmark(spec: BenchmarkSpec, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Return ``(private_typed, public_untyped)``.

    Every (domain, class) cell of the private set holds exactly the requested
    count. Public samples are spread over the domains' perturbed maps
    uniformly at random and tagged with the untyped id.
    """
    world = make_world(spec, rng.child("world"))
    feats, labels, domains = [], [], []
    for j in range(spec.n_domains):
        for c in range(spec.n_classes):
            n = spec.class_counts_per_domain[j][c]
            if n == 0:
                continue
            gen = rng.child("private", j, c).generator()
            feats.append(_cluster(spec, world, c, n, world.transforms[j], gen))
            labels.append(np.full(n, c))
            domains.append(np.full(n, j))
    private = Dataset(np.concatenate(feats).reshape(-1, spec.dim) if feats else np.zeros((0, spec.dim)),
                      np.concatenate(labels) if labels else [], np.concatenate(domains) if domains else [],
                      spec.n_classes, spec.n_domains)

    pf, pl = [], []
    for c in range(spec.n_classes):
        n = spec.public_class_counts[c]
        if n == 0:
            continue
        gen = rng.child("public", c).generator()
        which = gen.integers(0, spec.n_domains, size=n)
        z = world.class_means[c] + spec.noise_scale * gen.normal(size=(n, spec.dim))
        x = np.empty_like(z)
        for j in range(spec.n_domains):
            sel = which == j
            x[sel] = world.public_transforms[j].apply(z[sel])
        pf.append(x)
        pl.append(np.full(n, c))
    public = Dataset(np.concatenate(pf).reshape(-1, spec.dim) if pf else np.zeros((0, spec.dim)),
                     np.concatenate(pl) if pl else [], np.full(sum(len(l) for l in pl), spec.untyped_domain),
                     spec.n_classes, spec.n_domains + 1)
    return private, public


# -- client layout ----------------------------------------------------------

def assign_clients_to_domains(K: int, domain_sizes: Sequence[int]) -> list[int]:
    """Clients per domain proportional to size, largest remainder, at least one each."""
    sizes = np.asarray(domain_sizes, dtype=np.float64)
    J = len(sizes)
    if K < J:
        raise ConfigError(f"need at least one client per domain: K={K} < J={J}")
    if sizes.sum() <= 0:
        raise ConfigError("domain sizes must not all be zero")
    quota = K * sizes / sizes.sum()
    alloc = np.maximum(np.floor(quota).astype(np.int64), 1)
    short = K - int(alloc.sum())
    if short > 0:
        # ties go to the lower index
        order = np.argsort(-(quota - np.floor(quota)), kind="stable")
        alloc[order[:short]] += 1
    while alloc.sum() > K:
        # the >=1 floor overshot: take from the domain furthest above its quota
        over = np.where(alloc > 1, alloc - quota, -np.inf)
        alloc[int(np.argmax(over))] -= 1
    return alloc.tolist()


def dirichlet_partition(domain_data: Dataset, n_clients: int, alpha: float, rng: RngStream,
                        first_client_id: int = 0, domain: int | None = None,
                        min_size: int = 1, max_attempts: int = 50) -> list[ClientDataset]:
    """Split each class over ``n_clients`` by Dirichlet(alpha) proportions.

    Proportions are redrawn (from the same stream) until every client holds at
    least ``min_size`` samples. If ``max_attempts`` draws all fail, the last
    draw is repaired by moving samples from the largest client to the short ones.
    """
    if n_clients < 1:
        raise ConfigError("n_clients must be >= 1")
    if not alpha > 0:
        raise ConfigError("alpha must be positive")
    if domain is None:
        uniq = np.unique(domain_data.domains)
        if len(uniq) > 1:
            raise ConfigError("dirichlet_partition expects single-domain data")
        domain = int(uniq[0]) if len(uniq) else 0
    if min_size * n_clients > len(domain_data):
        min_size = 0
    gen = rng.generator()
    by_class = [gen.permutation(np.flatnonzero(domain_data.labels == c)) for c in range(domain_data.n_classes)]
    for _ in range(max(1, max_attempts)):
        parts: list[list[int]] = [[] for _ in range(n_clients)]
        for idx in by_class:
            if n_clients == 1:
                share = [len(idx)]
            else:
                p = gen.dirichlet(np.full(n_clients, alpha))
                share = largest_remainder_round(p * len(idx), len(idx))
            start = 0
            for k, s in enumerate(share):
                parts[k].extend(idx[start:start + s].tolist())
                start += s
        if min(len(p) for p in parts) >= min_size:
            break
    else:
        _repair_min_size(parts, domain_data.labels, min_size)
    clients = []
    empty = Dataset.empty(domain_data.dim, domain_data.n_classes, domain_data.n_domains)
    for k, p in enumerate(parts):
        index = np.sort(np.asarray(p, dtype=np.int64))
        clients.append(ClientDataset(first_client_id + k, domain, domain_data.subset(index), empty))
    return clients


def _repair_min_size(parts: list[list[int]], labels: np.ndarray, min_size: int) -> None:
    """Move one sample at a time from the largest client (lowest id on ties),
    taken from its most frequent class, to the smallest one."""
    while True:
        sizes = [len(p) for p in parts]
        short = int(np.argmin(sizes))
        if sizes[short] >= min_size:
            return
        donor = int(np.argmax(sizes))
        donor_labels = labels[np.asarray(parts[donor], dtype=np.int64)]
        top = int(np.argmax(np.bincount(donor_labels)))
        pos = max(i for i, lab in enumerate(donor_labels) if lab == top)
        parts[short].append(parts[donor].pop(pos))


def stratified_holdout(data: Dataset, fraction: float, rng: RngStream) -> tuple[Dataset, Dataset]:
    """Hold out ``round(fraction * n)`` samples of every (domain, class) cell."""
    gen = rng.generator()
    keep, held = [], []
    for j in range(data.n_domains):
        for c in range(data.n_classes):
            idx = np.flatnonzero((data.domains == j) & (data.labels == c))
            if not len(idx):
                continue
            idx = gen.permutation(idx)
            n_out = int(np.floor(fraction * len(idx) + 0.5))
            held.append(idx[:n_out])
            keep.append(idx[n_out:])
    cat = lambda parts: np.sort(np.concatenate(parts)) if parts else np.zeros(0, np.int64)
    return data.subset(cat(keep)), data.subset(cat(held))


@dataclass(frozen=True, eq=False)
class FederatedSplit:
    clients: tuple
    clients_per_domain: tuple
    dirichlet_alpha: float
    test_set: Dataset
    val_sets: tuple

    @property
    def K(self) -> int:
        return len(self.clients)

    def client(self, client_id: int) -> ClientDataset:
        return self.clients[client_id]


def make_federated_split(private: Dataset, K: int, alpha: float, rng: RngStream,
                         test_fraction: float = 0.15, val_fraction: float = 0.10,
                         clients_per_domain: Sequence[int] | None = None,
                         min_client_size: int = 2) -> FederatedSplit:
    """Centralized test hold-out, then per-domain Dirichlet partition, then a
    client-local validation split."""
    train_pool, test = stratified_holdout(private, test_fraction, rng.child("test"))
    sizes = private.domain_counts[: private.n_domains].tolist()
    if clients_per_domain is None:
        clients_per_domain = assign_clients_to_domains(K, sizes)
    clients_per_domain = [int(n) for n in clients_per_domain]
    if sum(clients_per_domain) != K or len(clients_per_domain) != private.n_domains:
        raise ConfigError(f"clients_per_domain {clients_per_domain} must have one entry per domain summing to K={K}")
    clients, vals = [], []
    next_id = 0
    for j, n_j in enumerate(clients_per_domain):
        part = dirichlet_partition(train_pool.where_domain(j), n_j, alpha, rng.child("dirichlet", j),
                                   first_client_id=next_id, domain=j, min_size=min_client_size)
        for cl in part:
            gen = rng.child("val", cl.client_id).generator()
            order = gen.permutation(len(cl.real))
            n_val = int(np.floor(val_fraction * len(order) + 0.5)) if len(order) > 1 else 0
            val_idx, tr_idx = np.sort(order[:n_val]), np.sort(order[n_val:])
            clients.append(ClientDataset(cl.client_id, j, cl.real.subset(tr_idx), cl.synthetic))
            vals.append(cl.real.subset(val_idx))
        next_id += n_j
    return FederatedSplit(tuple(clients), tuple(clients_per_domain), alpha, test, tuple(vals))


# -- class-balanced sampling --------------------------------------------------

def class_balanced_probabilities(class_counts) -> np.ndarray:
    """``p_i proportional to 1 / n_i`` over the classes present."""
    n = np.asarray(class_counts, dtype=np.float64)
    if not np.any(n > 0):
        raise ConfigError("class-balanced sampling needs at least one non-empty class")
    inv = np.zeros_like(n)
    inv[n > 0] = 1.0 / n[n > 0]
    return inv / inv.sum()


def class_balanced_sampler(labels, batch_size: int, gen: np.random.Generator,
                           n_classes: int | None = None) -> Iterator[np.ndarray]:
    """Endless stream of index batches: class by ``p_i``, then a uniform member."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=n_classes or 0)
    p = class_balanced_probabilities(counts)
    order = np.argsort(labels, kind="stable")
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    while True:
        cls = gen.choice(len(p), size=batch_size, p=p)
        offs = gen.integers(0, counts[cls])
        yield order[starts[cls] + offs]


def uniform_batches(n: int, batch_size: int, gen: np.random.Generator) -> list[np.ndarray]:
    perm = gen.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


# -- manifest -----------------------------------------------------------------

def write_manifest(spec: BenchmarkSpec, seed: int, private: Dataset, public: Dataset, path: str | Path) -> None:
    counts = {}
    for j in range(spec.n_domains):
        sub = private.where_domain(j)
        counts[spec.domain_names[j]] = sub.class_counts.tolist()
    manifest = {
        "seed": seed,
        "spec": spec.to_dict(),
        "private_counts": counts,
        "public_counts": public.class_counts.tolist(),
        "private_hash": private.content_hash(),
        "public_hash": public.content_hash(),
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
