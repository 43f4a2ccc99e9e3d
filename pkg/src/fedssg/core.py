"""Shared data model, seeded random streams and dataset serialization."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ConfigError(ValueError):
    """Raised when a configuration or a call's arguments are inconsistent."""


class ProtocolError(RuntimeError):
    """Raised when federated peers exchange incompatible payloads."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    label: int
    domain: int


@dataclass(frozen=True, eq=False)
class Dataset:
    """Column-stored samples: features (n, d), labels (n,), domains (n,).

    ``n_domains`` includes the reserved untyped id when public data is held,
    so the domain histogram always sums to ``len(self)``.
    """

    features: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    n_classes: int
    n_domains: int
    class_counts: np.ndarray = field(init=False)
    domain_counts: np.ndarray = field(init=False)

    def __post_init__(self):
        feats = np.array(self.features, dtype=np.float64, copy=True)
        if feats.ndim == 1 and feats.size == 0:
            feats = feats.reshape(0, 0)
        labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
        domains = np.array(self.domains, dtype=np.int64, copy=True).reshape(-1)
        if feats.ndim != 2 or len(feats) != len(labels) or len(labels) != len(domains):
            raise ConfigError("features, labels and domains must have matching lengths")
        if len(labels) and (labels.min() < 0 or labels.max() >= self.n_classes):
            raise ConfigError(f"labels must lie in [0, {self.n_classes})")
        if len(domains) and (domains.min() < 0 or domains.max() >= self.n_domains):
            raise ConfigError(f"domains must lie in [0, {self.n_domains})")
        object.__setattr__(self, "features", _frozen(feats))
        object.__setattr__(self, "labels", _frozen(labels))
        object.__setattr__(self, "domains", _frozen(domains))
        cc, dc = histogram(self)
        object.__setattr__(self, "class_counts", _frozen(cc))
        object.__setattr__(self, "domain_counts", _frozen(dc))

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.features[i], int(self.labels[i]), int(self.domains[i])) for i in range(len(self))]

    @classmethod
    def empty(cls, dim: int, n_classes: int, n_domains: int) -> "Dataset":
        return cls(np.zeros((0, dim)), np.zeros(0, np.int64), np.zeros(0, np.int64), n_classes, n_domains)

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], dim: int, n_classes: int, n_domains: int) -> "Dataset":
        if not samples:
            return cls.empty(dim, n_classes, n_domains)
        feats = np.stack([np.asarray(s.features, dtype=np.float64) for s in samples])
        if feats.shape[1] != dim:
            raise ConfigError(f"sample dimension {feats.shape[1]} != {dim}")
        return cls(feats, [s.label for s in samples], [s.domain for s in samples], n_classes, n_domains)

    def subset(self, index) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.features[index], self.labels[index], self.domains[index],
                       self.n_classes, self.n_domains)

    def with_domain(self, domain: int) -> "Dataset":
        """Copy with every sample retagged to ``domain``."""
        return Dataset(self.features, self.labels, np.full(len(self), domain), self.n_classes, self.n_domains)

    def where_domain(self, domain: int) -> "Dataset":
        return self.subset(np.flatnonzero(self.domains == domain))

    def content_hash(self) -> str:
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.domains):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(f"{self.n_classes}:{self.n_domains}:{self.dim}".encode())
        return h.hexdigest()


def concat(parts: Iterable[Dataset]) -> Dataset:
    parts = list(parts)
    if not parts:
        raise ConfigError("concat needs at least one dataset")
    head = parts[0]
    for p in parts[1:]:
        if (p.n_classes, p.n_domains) != (head.n_classes, head.n_domains) or (len(p) and p.dim != head.dim):
            raise ConfigError("cannot concatenate datasets with different shapes")
    nonempty = [p for p in parts if len(p)] or [head]
    return Dataset(
        np.concatenate([p.features for p in nonempty]).reshape(-1, head.dim),
        np.concatenate([p.labels for p in nonempty]),
        np.concatenate([p.domains for p in nonempty]),
        head.n_classes,
        head.n_domains,
    )


def histogram(dataset: Dataset) -> tuple[np.ndarray, np.ndarray]:
    """Class and domain multiplicities of ``dataset``."""
    cc = np.bincount(dataset.labels, minlength=dataset.n_classes).astype(np.int64)
    dc = np.bincount(dataset.domains, minlength=dataset.n_domains).astype(np.int64)
    return cc, dc


@dataclass(frozen=True, eq=False)
class ClientDataset:
    client_id: int
    domain: int
    real: Dataset
    synthetic: Dataset

    def __post_init__(self):
        if len(self.real) and np.any(self.real.domains != self.domain):
            raise ConfigError(f"client {self.client_id} holds samples outside domain {self.domain}")
        if len(self.synthetic) and np.any(self.synthetic.domains != self.domain):
            raise ConfigError(f"client {self.client_id} synthetic samples must carry domain {self.domain}")

    @property
    def augmented(self) -> Dataset:
        if not len(self.synthetic):
            return self.real
        return concat([self.real, self.synthetic])

    def with_synthetic(self, synthetic: Dataset) -> "ClientDataset":
        return ClientDataset(self.client_id, self.domain, self.real, synthetic)


# -- random streams ---------------------------------------------------------

def _encode_label(label) -> int:
    # ints and strings live in disjoint halves of the key space
    if isinstance(label, (bool, np.bool_)):
        raise TypeError("stream labels must be str or non-negative int")
    if isinstance(label, (int, np.integer)):
        if label < 0:
            raise ValueError("integer stream labels must be non-negative")
        return 2 * int(label)
    if isinstance(label, str):
        digest = hashlib.blake2b(label.encode("utf-8"), digest_size=8).digest()
        return 2 * int.from_bytes(digest, "little") + 1
    raise TypeError(f"unsupported stream label {label!r}")


@dataclass(frozen=True)
class RngStream:
    """A named, reproducible random stream.

    The stream is identified by ``(seed, path)``; ``generator()`` always starts
    the same PCG64 sequence for the same identity, on any platform.
    """

    seed: int
    path: tuple = ()

    def child(self, *labels) -> "RngStream":
        for lab in labels:
            _encode_label(lab)
        return RngStream(self.seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=tuple(_encode_label(x) for x in self.path))
        return np.random.Generator(np.random.PCG64(ss))


def derive_stream(parent: RngStream, label) -> RngStream:
    return parent.child(label)


def derive_path(parent: RngStream, labels: Sequence) -> RngStream:
    return parent.child(*labels)


def checksum(values: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(values, dtype=np.float64).tobytes()).hexdigest()


# -- line-delimited dataset export ------------------------------------------

def dataset_to_lines(dataset: Dataset) -> list[str]:
    lines = []
    for x, y, j in zip(dataset.features, dataset.labels, dataset.domains):
        feats = ",".join(repr(float(v)) for v in x)
        lines.append(json.dumps({"label": int(y), "domain": int(j), "features": feats}))
    return lines


def save_dataset(dataset: Dataset, path: str | Path) -> None:
    header = {"n_classes": dataset.n_classes, "n_domains": dataset.n_domains, "dim": dataset.dim}
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        fh.write(json.dumps({"header": header}) + "\n")
        for line in dataset_to_lines(dataset):
            fh.write(line + "\n")
    tmp.replace(path)


def load_dataset(path: str | Path) -> Dataset:
    with open(path) as fh:
        header = json.loads(fh.readline())["header"]
        feats, labels, domains = [], [], []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            labels.append(rec["label"])
            domains.append(rec["domain"])
            feats.append([float(v) for v in rec["features"].split(",")] if rec["features"] else [])
    dim = header["dim"]
    arr = np.array(feats, dtype=np.float64).reshape(-1, dim)
    return Dataset(arr, labels, domains, header["n_classes"], header["n_domains"])
