"""Synthetic multi-domain data generation and flat-file loading.

Each client owns one domain. Domains share a set of Gaussian class
prototypes but view them through a private orthogonal rotation plus bias,
with per-domain noise scaling, so clients solve the same label space under
a real feature shift. Generation is fully determined by the spec's seed.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import DataError, ParseError
from .tensor import Tensor


@dataclass(frozen=True)
class DomainSpec:
    """A client domain: orthogonal input transform, bias and noise scale."""

    domain_id: int
    transform: np.ndarray
    bias: np.ndarray
    noise_sigma: float
    difficulty: float = 1.0

    def __post_init__(self):
        n = self.transform.shape[0]
        if self.transform.shape != (n, n):
            raise DataError("domain transform must be square")
        if not np.allclose(self.transform @ self.transform.T, np.eye(n), atol=1e-9):
            raise DataError("domain transform must be orthogonal within 1e-9")
        if self.bias.shape != (n,):
            raise DataError("domain bias must match transform dimension")
        if self.noise_sigma < 0.0 or self.difficulty < 0.0:
            raise DataError("noise_sigma and difficulty must be nonnegative")

    @property
    def sigma(self) -> float:
        return self.noise_sigma * self.difficulty


@dataclass(frozen=True)
class SyntheticSpec:
    """Full description of one synthetic multi-domain benchmark."""

    num_domains: int = 4
    num_classes: int = 7
    input_dim: int = 64
    train_per_client: int = 490
    test_per_client: int = 350
    prototype_sigma: float = 1.0
    noise_sigma: float = 1.8
    domain_shift: float = 0.08
    difficulty_spread: float = 0.8
    identity_transforms: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.num_domains < 1 or self.num_classes < 2 or self.input_dim < 1:
            raise DataError("num_domains >= 1, num_classes >= 2, input_dim >= 1")
        if self.train_per_client < self.num_classes:
            raise DataError("train_per_client must be >= num_classes")
        if self.train_per_client % self.num_classes != 0:
            raise DataError(
                f"train_per_client ({self.train_per_client}) must be divisible "
                f"by num_classes ({self.num_classes}) for exact class balance")
        if self.test_per_client % self.num_classes != 0:
            raise DataError(
                f"test_per_client ({self.test_per_client}) must be divisible "
                f"by num_classes ({self.num_classes}) for exact class balance")
        if self.prototype_sigma <= 0.0 or self.noise_sigma < 0.0:
            raise DataError("prototype_sigma must be > 0 and noise_sigma >= 0")
        if self.domain_shift < 0.0:
            raise DataError("domain_shift must be >= 0")
        if not 0.0 <= self.difficulty_spread < 2.0:
            raise DataError("difficulty_spread must be in [0, 2)")

    def difficulties(self) -> np.ndarray:
        if self.num_domains == 1:
            return np.ones(1)
        half = self.difficulty_spread / 2.0
        return np.linspace(1.0 - half, 1.0 + half, self.num_domains)


@dataclass
class Dataset:
    """Feature matrix plus integer labels for one client split."""

    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise DataError("features must be 2-D and labels 1-D")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DataError("features and labels disagree on sample count")
        if len(self.labels) and (self.labels.min() < 0
                                 or self.labels.max() >= self.num_classes):
            raise DataError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def input_dim(self) -> int:
        return self.features.shape[1]

    def one_hot(self) -> np.ndarray:
        out = np.zeros((len(self), self.num_classes))
        out[np.arange(len(self)), self.labels] = 1.0
        return out

    def subset(self, indices: np.ndarray) -> "Dataset":
        return Dataset(self.features[indices].copy(),
                       self.labels[indices].copy(), self.num_classes)


@dataclass
class LabeledBatch:
    """One training batch: inputs, one-hot labels and source indices."""

    x: Tensor
    y: Tensor
    indices: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.y.data, axis=1)


@dataclass
class ClientData:
    domain: DomainSpec
    train: Dataset
    test: Dataset


def _orthogonal(rng: np.random.Generator, n: int, shift: float) -> np.ndarray:
    """QR-derived orthogonal transform `shift` away from the identity.

    shift=0 gives the identity; large shifts approach a uniformly random
    rotation. Keeping domains related-but-rotated mirrors multi-domain
    image sets, where domains share most structure.
    """
    q, r = np.linalg.qr(np.eye(n) + shift * rng.normal(size=(n, n)))
    # fix the sign ambiguity of QR so the draw is canonical
    return q * np.sign(np.diag(r))


def make_domain_specs(spec: SyntheticSpec) -> list[DomainSpec]:
    rng = np.random.default_rng([spec.seed, 7919])
    diffs = spec.difficulties()
    out = []
    for m in range(spec.num_domains):
        if spec.identity_transforms:
            transform = np.eye(spec.input_dim)
            bias = np.zeros(spec.input_dim)
        else:
            transform = _orthogonal(rng, spec.input_dim, spec.domain_shift)
            bias = rng.normal(scale=spec.prototype_sigma, size=spec.input_dim)
        out.append(DomainSpec(domain_id=m, transform=transform, bias=bias,
                              noise_sigma=spec.noise_sigma,
                              difficulty=float(diffs[m])))
    return out


def class_prototypes(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 104729])
    return rng.normal(scale=spec.prototype_sigma,
                      size=(spec.num_classes, spec.input_dim))


def _sample_domain(rng: np.random.Generator, prototypes: np.ndarray,
                   domain: DomainSpec, per_class: int) -> Dataset:
    c, n = prototypes.shape
    labels = np.repeat(np.arange(c), per_class)
    noise = rng.normal(scale=domain.sigma, size=(c * per_class, n)) \
        if domain.sigma > 0 else np.zeros((c * per_class, n))
    base = prototypes[labels] + noise
    features = base @ domain.transform.T + domain.bias
    return Dataset(features, labels, num_classes=c)


def generate_synthetic(spec: SyntheticSpec) -> list[ClientData]:
    """Per-client train/test datasets, balanced and seed-determined.

    Train and test are disjoint by construction: both splits are carved out
    of one per-domain draw by index partition.
    """
    prototypes = class_prototypes(spec)
    domains = make_domain_specs(spec)
    train_pc = spec.train_per_client // spec.num_classes
    test_pc = spec.test_per_client // spec.num_classes
    clients = []
    for domain in domains:
        rng = np.random.default_rng([spec.seed, 15485863, domain.domain_id])
        full = _sample_domain(rng, prototypes, domain, train_pc + test_pc)
        per_class = train_pc + test_pc
        idx = np.arange(len(full)).reshape(spec.num_classes, per_class)
        train_idx = idx[:, :train_pc].reshape(-1)
        test_idx = idx[:, train_pc:].reshape(-1)
        clients.append(ClientData(domain=domain,
                                  train=full.subset(train_idx),
                                  test=full.subset(test_idx)))
    return clients


def batch_iterator(dataset: Dataset, batch_size: int, rng: np.random.Generator):
    """One epoch of shuffled batches; a trailing singleton batch is dropped.

    Batch-norm needs at least two rows, so batches of size 1 cannot be
    trained on.
    """
    if batch_size < 2:
        raise DataError(f"batch_size must be >= 2, got {batch_size}")
    if len(dataset) == 0:
        raise DataError("cannot iterate an empty dataset")
    order = rng.permutation(len(dataset))
    one_hot = dataset.one_hot()
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        if len(idx) < 2:
            continue
        yield LabeledBatch(x=Tensor(dataset.features[idx]),
                           y=Tensor(one_hot[idx]),
                           indices=idx)


def batches_per_epoch(n: int, batch_size: int) -> int:
    """How many batches one epoch yields under the drop-singleton rule."""
    full, rem = divmod(n, batch_size)
    return full + (1 if rem >= 2 else 0)


# -- flat files ------------------------------------------------------------

def _expected_header(n: int) -> list[str]:
    return ["label"] + [f"f{i}" for i in range(n)]


def save_flatfile(dataset: Dataset, path: str) -> None:
    """Write `label,f0,...,f{n-1}` rows; floats use shortest round-trip text."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(_expected_header(dataset.input_dim))
        for label, row in zip(dataset.labels, dataset.features):
            writer.writerow([int(label)] + [repr(float(v)) for v in row])


def load_flatfile(path: str, num_classes: int | None = None) -> Dataset:
    """Parse a flat CSV file into a Dataset.

    Labels must be integers in [0, num_classes); when num_classes is not
    given it is inferred as max(label) + 1.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        if len(header) < 2 or header[0] != "label":
            raise ParseError(f"{path}: header must be label,f0,...,f{{n-1}}")
        n = len(header) - 1
        if header != _expected_header(n):
            raise ParseError(f"{path}: header must be label,f0,...,f{{n-1}}")
        labels, rows = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != n + 1:
                raise ParseError(
                    f"{path}: row {row_no} has {len(row)} cells, expected {n + 1}")
            try:
                label = int(row[0])
            except ValueError:
                raise ParseError(
                    f"{path}: row {row_no}, column label: not an integer: {row[0]!r}"
                ) from None
            if label < 0:
                raise ParseError(f"{path}: row {row_no}: negative label {label}")
            values = np.empty(n)
            for j, cell in enumerate(row[1:]):
                try:
                    values[j] = float(cell)
                except ValueError:
                    raise ParseError(
                        f"{path}: row {row_no}, column f{j}: not a number: {cell!r}"
                    ) from None
            labels.append(label)
            rows.append(values)
    if not rows:
        raise ParseError(f"{path}: no data rows")
    labels_arr = np.asarray(labels, dtype=np.int64)
    inferred = int(labels_arr.max()) + 1
    if num_classes is None:
        num_classes = inferred
    elif inferred > num_classes:
        raise ParseError(
            f"{path}: label {labels_arr.max()} out of range [0, {num_classes})")
    return Dataset(np.vstack(rows), labels_arr, num_classes=num_classes)
