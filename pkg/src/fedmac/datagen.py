"""Federated dataset construction.

Synthetic(alpha_bar, beta_bar) generator, label-shard and Dirichlet
partitioners over a pooled dataset, and an IDX (MNIST-format) reader.
Every client ends up with a 75/25 train/test split, stratified by label.
"""

from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .models import Batch

TEST_FRACTION = 0.25
SIZE_LOG_SIGMA = 0.5
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    """Base class for malformed IDX input."""


class BadMagicError(IdxFormatError):
    pass


class TruncatedFileError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


class PartitionError(ValueError):
    """The requested partition cannot be built from the given data."""


@dataclass
class ClientData:
    train: Batch
    test: Batch
    # row indices into the pooled source (None for generated data)
    train_idx: np.ndarray | None = None
    test_idx: np.ndarray | None = None

    def __post_init__(self):
        if len(self.train) == 0 or len(self.test) == 0:
            raise ValueError("every client needs nonempty train and test data")


@dataclass
class FederatedDataset:
    clients: list[ClientData]
    num_classes: int
    provenance: str = ""

    def __post_init__(self):
        if not self.clients:
            raise ValueError("dataset has no clients")
        for i, c in enumerate(self.clients):
            for part in (c.train, c.test):
                if part.labels.min() < 0 or part.labels.max() >= self.num_classes:
                    raise ValueError(f"client {i} has labels outside [0, {self.num_classes})")

    @property
    def n_clients(self) -> int:
        return len(self.clients)

    @property
    def input_dim(self) -> int:
        return self.clients[0].train.inputs.shape[1]


@dataclass(frozen=True)
class SyntheticConfig:
    n_clients: int
    alpha_bar: float
    beta_bar: float
    input_dim: int = 60
    num_classes: int = 10
    samples_per_client: tuple[int, int] = (50, 500)
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if self.alpha_bar < 0 or self.beta_bar < 0:
            raise ValueError("alpha_bar and beta_bar must be nonnegative")
        if self.input_dim < 1 or self.num_classes < 2:
            raise ValueError("input_dim must be >= 1 and num_classes >= 2")
        lo, hi = self.samples_per_client
        if not 2 <= lo <= hi:
            raise ValueError("samples_per_client must satisfy 2 <= low <= high")


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=key))


def stratified_split(labels: np.ndarray, rng: np.random.Generator,
                     test_fraction: float = TEST_FRACTION) -> tuple[np.ndarray, np.ndarray]:
    """Positions (train, test) splitting ``labels`` per class; both parts nonempty."""
    n = labels.shape[0]
    if n < 2:
        raise PartitionError(f"cannot split {n} example(s) into train and test")
    train, test = [], []
    for c in np.unique(labels):
        pos = np.flatnonzero(labels == c)
        rng.shuffle(pos)
        k = int(round(test_fraction * pos.size))
        test.append(pos[:k])
        train.append(pos[k:])
    train, test = np.concatenate(train), np.concatenate(test)
    if test.size == 0:
        test, train = train[:1], train[1:]
    elif train.size == 0:
        train, test = test[:1], test[1:]
    return np.sort(train), np.sort(test)


def _client_sizes(n: int, lo: int, hi: int, rng: np.random.Generator) -> np.ndarray:
    centre = np.sqrt(lo * hi)
    sizes = np.exp(rng.normal(np.log(centre), SIZE_LOG_SIGMA, size=n))
    return np.clip(np.rint(sizes), lo, hi).astype(np.int64)


def gen_synthetic(cfg: SyntheticConfig) -> FederatedDataset:
    """Synthetic(alpha_bar, beta_bar) federated classification data.

    Client k labels its inputs with ``argmax(x W_k + b_k)`` where
    ``W_k = W_0 + U_k``, ``b_k = b_0 + u_k``; ``W_0, b_0 ~ N(0, 1)`` are shared
    and ``U_k, u_k ~ N(0, alpha_bar^2)`` are client offsets. Inputs are drawn
    as ``x ~ N(v_k, Sigma)`` with ``v_k = V_0 + B_k``, ``V_0 ~ N(0, 1)`` shared,
    ``B_k ~ N(0, beta_bar^2)`` and ``Sigma_jj = j^-1.2``. Each client's marginal
    generator is N(offset, 1) around a client-specific offset, so
    ``alpha_bar = beta_bar = 0`` gives identical clients and heterogeneity
    grows with both knobs.
    """
    d, C = cfg.input_dim, cfg.num_classes
    base = _stream(cfg.seed, 0)
    w0 = base.standard_normal((d, C))
    b0 = base.standard_normal(C)
    v0 = base.standard_normal(d)
    sizes = _client_sizes(cfg.n_clients, *cfg.samples_per_client, base)
    sd = np.arange(1, d + 1, dtype=np.float64) ** -0.6

    clients = []
    for k in range(cfg.n_clients):
        rng = _stream(cfg.seed, 1, k)
        w = w0 + cfg.alpha_bar * rng.standard_normal((d, C))
        b = b0 + cfg.alpha_bar * rng.standard_normal(C)
        v = v0 + cfg.beta_bar * rng.standard_normal(d)
        x = v + sd * rng.standard_normal((int(sizes[k]), d))
        y = np.argmax(x @ w + b, axis=1)
        tr, te = stratified_split(y, rng)
        clients.append(ClientData(Batch(x[tr], y[tr]), Batch(x[te], y[te])))
    prov = (
        f"synthetic(alpha_bar={cfg.alpha_bar}, beta_bar={cfg.beta_bar}, n_clients={cfg.n_clients}, "
        f"input_dim={d}, num_classes={C}, samples={cfg.samples_per_client}, seed={cfg.seed}; "
        "shared-base N(0,1) generators plus client offsets, Sigma_jj=j^-1.2)"
    )
    return FederatedDataset(clients, C, prov)


def _from_assignment(data: Batch, parts: list[np.ndarray], num_classes: int,
                     rng: np.random.Generator, provenance: str) -> FederatedDataset:
    clients = []
    for idx in parts:
        idx = np.sort(idx)
        tr, te = stratified_split(data.labels[idx], rng)
        clients.append(ClientData(data.take(idx[tr]), data.take(idx[te]), idx[tr], idx[te]))
    return FederatedDataset(clients, num_classes, provenance)


def _num_classes(data: Batch) -> int:
    return int(data.labels.max()) + 1


def shard_partition(data: Batch, n_clients: int, labels_per_client: int, seed: int,
                    num_classes: int | None = None) -> FederatedDataset:
    """Give client ``i`` the labels ``(i*L + j) mod C`` for ``j < L``.

    Each label's examples are shuffled and split among the clients holding it
    with log-normal weights (at least 2 examples per holder), so client sizes
    differ. Every example goes to exactly one client.
    """
    if len(data) == 0:
        raise PartitionError("cannot partition empty data")
    C = num_classes or _num_classes(data)
    L = labels_per_client
    if n_clients < 1 or L < 1:
        raise PartitionError("n_clients and labels_per_client must be >= 1")
    if L > C:
        raise PartitionError(f"labels_per_client={L} exceeds the {C} available labels")
    if n_clients * L < C:
        raise PartitionError(f"{n_clients} clients x {L} labels cannot cover {C} labels")
    rng = _stream(seed, 0)
    holders: dict[int, list[int]] = {c: [] for c in range(C)}
    for i in range(n_clients):
        for j in range(L):
            holders[(i * L + j) % C].append(i)
    pieces: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
    for c in range(C):
        pos = np.flatnonzero(data.labels == c)
        m = len(holders[c])
        if pos.size < 2 * m:
            raise PartitionError(f"label {c} has {pos.size} examples, need at least {2 * m} for {m} shards")
        rng.shuffle(pos)
        weights = np.exp(rng.normal(0.0, SIZE_LOG_SIGMA, size=m))
        extra = pos.size - 2 * m
        raw = weights / weights.sum() * extra
        counts = np.floor(raw).astype(np.int64)
        short = extra - int(counts.sum())
        counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
        cuts = np.cumsum(counts + 2)[:-1]
        for client, chunk in zip(holders[c], np.split(pos, cuts)):
            pieces[client].append(chunk)
    parts = [np.concatenate(p) for p in pieces]
    prov = f"shards(n_clients={n_clients}, labels_per_client={L}, num_classes={C}, seed={seed})"
    return _from_assignment(data, parts, C, _stream(seed, 1), prov)


def dirichlet_partition(data: Batch, n_clients: int, alpha: float, seed: int,
                        num_classes: int | None = None, max_tries: int = 100) -> FederatedDataset:
    """Split each class across clients with proportions ~ Dirichlet(alpha * 1).

    Draws are repeated (same stream) until every client holds at least two
    examples; gives up after ``max_tries``.
    """
    if not alpha > 0:
        raise PartitionError("alpha must be positive")
    if len(data) < 2 * n_clients:
        raise PartitionError(f"{len(data)} examples are too few for {n_clients} clients")
    C = num_classes or _num_classes(data)
    rng = _stream(seed, 0)
    by_class = [np.flatnonzero(data.labels == c) for c in range(C)]
    for _ in range(max_tries):
        pieces: list[list[np.ndarray]] = [[] for _ in range(n_clients)]
        for pos in by_class:
            pos = rng.permutation(pos)
            p = rng.dirichlet(np.full(n_clients, float(alpha)))
            cuts = np.rint(np.cumsum(p)[:-1] * pos.size).astype(np.int64)
            for i, chunk in enumerate(np.split(pos, cuts)):
                pieces[i].append(chunk)
        parts = [np.concatenate(p) for p in pieces]
        if min(p.size for p in parts) >= 2:
            prov = f"dirichlet(n_clients={n_clients}, alpha={alpha}, num_classes={C}, seed={seed})"
            return _from_assignment(data, parts, C, _stream(seed, 1), prov)
    raise PartitionError(f"could not give every client 2+ examples in {max_tries} Dirichlet draws")


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_idx(images_path, labels_path) -> Batch:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    img = _read_bytes(images_path)
    lab = _read_bytes(labels_path)
    if len(img) < 16:
        raise TruncatedFileError(f"truncated image header in {images_path}")
    if len(lab) < 8:
        raise TruncatedFileError(f"truncated label header in {labels_path}")
    magic, n_img, rows, cols = struct.unpack(">IIII", img[:16])
    if magic != IDX_IMAGES_MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x} in {images_path} (expected 0x{IDX_IMAGES_MAGIC:08x})")
    magic, n_lab = struct.unpack(">II", lab[:8])
    if magic != IDX_LABELS_MAGIC:
        raise BadMagicError(f"bad magic 0x{magic:08x} in {labels_path} (expected 0x{IDX_LABELS_MAGIC:08x})")
    if n_img != n_lab:
        raise CountMismatchError(f"count mismatch: {n_img} images vs {n_lab} labels")
    dim = rows * cols
    if len(img) < 16 + n_img * dim:
        raise TruncatedFileError(f"truncated image data in {images_path}")
    if len(lab) < 8 + n_lab:
        raise TruncatedFileError(f"truncated label data in {labels_path}")
    pixels = np.frombuffer(img, dtype=np.uint8, count=n_img * dim, offset=16)
    labels = np.frombuffer(lab, dtype=np.uint8, count=n_lab, offset=8)
    return Batch(pixels.reshape(n_img, dim).astype(np.float64) / 255.0, labels.astype(np.int64))


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path):
    """Write uint8 images (n, rows, cols) and labels (n,) in IDX format."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        fh.write(images.tobytes())
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def export_csv(dataset: FederatedDataset, path):
    """Columns: client_id, split, label, x_0 .. x_{d-1}; floats in shortest round-trip form."""
    d = dataset.input_dim
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["client_id", "split", "label"] + [f"x_{j}" for j in range(d)])
        for cid, client in enumerate(dataset.clients):
            for split, part in (("train", client.train), ("test", client.test)):
                for x, y in zip(part.inputs, part.labels):
                    out.writerow([cid, split, int(y)] + [repr(float(v)) for v in x])


def label_histograms(dataset: FederatedDataset, split: str = "train") -> np.ndarray:
    """Row-normalized label histograms, one row per client."""
    h = np.stack([
        np.bincount(getattr(c, split).labels, minlength=dataset.num_classes) for c in dataset.clients
    ]).astype(np.float64)
    return h / h.sum(axis=1, keepdims=True)
