"""Dataset ingestion, normalization, splitting, and synthetic generators.

The split protocol carves one seeded permutation into [test | recalibration
| train] index blocks.  Input whitening and target normalization (for
regression) are computed from the training block only and stored on the
Dataset so they can be replayed on new inputs.  Metrics downstream are in
normalized target units.

Synthetic generators return unsplit Datasets (identity normalization, all
rows in the training block); pass them through prepare() to get the split
and whitened form used by the fitting code.
"""

from __future__ import annotations

import csv
import warnings

import numpy as np
import scipy.linalg

from .errors import DataError, DomainError, NumericError

TEST_N_DEFAULT = 1000
RECAL_N_DEFAULT = 1000
MANIFOLD_LATENT_JITTER_SD = 0.1
TORUS_MAJOR_RADIUS = 2.0
TORUS_MINOR_RADIUS = 0.5


class RawTable:
    """Parsed but unnormalized data: feature matrix plus targets."""

    def __init__(self, X, targets, task, label_map=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.task = task
        if task == "classification":
            self.targets = np.asarray(targets, dtype=np.int64)
        else:
            self.targets = np.asarray(targets, dtype=np.float64)
        self.label_map = label_map


class Dataset:
    """Whitened, split dataset with its normalization statistics.

    Parameters
    ----------
    X : ndarray, shape (n, d)
        Whitened feature matrix.
    targets : ndarray, shape (n,)
        Normalized regression targets, or integer class indices.
    split : dict
        Disjoint index arrays under keys "train", "test", "recalibration".
    feature_means, feature_stds : ndarray, shape (d,)
        Whitening statistics from the training block.
    target_mean, target_std : float
        Target normalization (regression; identity for classification).
    """

    def __init__(self, X, targets, split, feature_means, feature_stds,
                 target_mean=0.0, target_std=1.0, task="regression",
                 label_map=None, latents=None):
        self.X = np.asarray(X, dtype=np.float64)
        self.targets = np.asarray(targets)
        self.split = {k: np.asarray(v, dtype=np.int64) for k, v in split.items()}
        self.feature_means = np.asarray(feature_means, dtype=np.float64)
        self.feature_stds = np.asarray(feature_stds, dtype=np.float64)
        self.target_mean = float(target_mean)
        self.target_std = float(target_std)
        self.task = task
        self.label_map = label_map
        self.latents = latents

    def stats_dict(self):
        """Normalization metadata for persistence alongside a model."""
        return {
            "feature_means": self.feature_means.tolist(),
            "feature_stds": self.feature_stds.tolist(),
            "target_mean": self.target_mean,
            "target_std": self.target_std,
        }

    def apply_input_normalization(self, X_raw):
        """Whiten new raw inputs with the stored training statistics."""
        X_raw = np.asarray(X_raw, dtype=np.float64)
        return (X_raw - self.feature_means) / self.feature_stds

    def normalize_targets(self, y_raw):
        return (np.asarray(y_raw, dtype=np.float64) - self.target_mean) / self.target_std

    def denormalize_targets(self, y_norm):
        return np.asarray(y_norm, dtype=np.float64) * self.target_std + self.target_mean

    def subset_arrays(self, name):
        """(X, targets) restricted to one split block."""
        idx = self.split[name]
        return self.X[idx], self.targets[idx]


def _parse_cell(text, path, row, col):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}: non-numeric value {text!r} at row {row}, "
                        f"column {col}") from None


def load_csv(path, task="regression"):
    """Parse a CSV file into a RawTable; final column is the target.

    A single header row is auto-detected: if any cell of the first row
    fails to parse as a number, the row is treated as a header.
    Classification labels are remapped to contiguous 0..C-1 in sorted
    order of the distinct raw values, with the mapping recorded.
    """
    if task not in ("regression", "classification"):
        raise DomainError(f"unknown task {task!r}")
    try:
        with open(path, encoding="utf-8") as fh:
            rows = [row for row in csv.reader(fh) if row]
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    if not rows:
        raise DataError(f"{path}: file is empty")
    start = 0
    try:
        [float(cell) for cell in rows[0]]
    except ValueError:
        start = 1
    if start == len(rows):
        raise DataError(f"{path}: no data rows after header")
    width = len(rows[start])
    if width < 2:
        raise DataError(f"{path}: need at least 2 columns, got {width}")
    values = np.empty((len(rows) - start, width))
    for i, row in enumerate(rows[start:], start=start):
        if len(row) != width:
            raise DataError(f"{path}: row {i + 1} has {len(row)} cells, "
                            f"expected {width}")
        for j, cell in enumerate(row):
            values[i - start, j] = _parse_cell(cell, path, i + 1, j + 1)
    X = values[:, :-1]
    raw_targets = values[:, -1]
    if task == "classification":
        distinct = np.unique(raw_targets)
        label_map = {float(v): i for i, v in enumerate(distinct)}
        targets = np.searchsorted(distinct, raw_targets)
        return RawTable(X, targets, task, label_map=label_map)
    return RawTable(X, raw_targets, task)


def _split_sizes(n, test_n, recal_n):
    """Held-out block sizes, shrunk proportionally when data is scarce."""
    if n > test_n + recal_n:
        return test_n, recal_n
    budget = n // 2
    total = test_n + recal_n
    test_shrunk = max(1, int(round(budget * test_n / total)))
    recal_shrunk = max(1, budget - test_shrunk)
    warnings.warn(f"only {n} rows; shrinking held-out blocks to "
                  f"test={test_shrunk}, recalibration={recal_shrunk}")
    return test_shrunk, recal_shrunk


def prepare(raw, seed=0, test_n=TEST_N_DEFAULT, recal_n=RECAL_N_DEFAULT):
    """Shuffle, split, and whiten a raw table into a Dataset.

    One seeded permutation is cut into [test | recalibration | train]
    blocks.  Whitening statistics come from the training block only;
    constant columns get std 1 and a warning.  Regression targets are
    normalized by train mean and std.
    """
    X = np.asarray(raw.X, dtype=np.float64)
    targets = np.asarray(raw.targets)
    n = X.shape[0]
    if n < 3:
        raise DomainError(f"need at least 3 rows to split, got {n}")
    if targets.shape[0] != n:
        raise DataError("feature rows and targets differ in length")
    test_n, recal_n = _split_sizes(n, test_n, recal_n)
    perm = np.random.default_rng(seed).permutation(n)
    split = {
        "test": perm[:test_n],
        "recalibration": perm[test_n:test_n + recal_n],
        "train": perm[test_n + recal_n:],
    }
    train = X[split["train"]]
    means = train.mean(axis=0)
    stds = train.std(axis=0)
    constant = stds == 0
    if np.any(constant):
        warnings.warn(f"{int(constant.sum())} constant feature column(s); "
                      "using std 1")
        stds = np.where(constant, 1.0, stds)
    X_white = (X - means) / stds

    task = getattr(raw, "task", "regression")
    target_mean, target_std = 0.0, 1.0
    if task == "regression":
        y_train = targets[split["train"]].astype(np.float64)
        target_mean = float(y_train.mean())
        target_std = float(y_train.std())
        if target_std == 0:
            warnings.warn("constant training targets; using target std 1")
            target_std = 1.0
        targets = (targets.astype(np.float64) - target_mean) / target_std
    return Dataset(X_white, targets, split, means, stds, target_mean, target_std,
                   task=task, label_map=getattr(raw, "label_map", None),
                   latents=getattr(raw, "latents", None))


def _unsplit(X, targets, task="regression", label_map=None, latents=None):
    """Dataset wrapper with identity normalization and all rows in train."""
    n, d = X.shape
    split = {"train": np.arange(n), "test": np.empty(0, dtype=np.int64),
             "recalibration": np.empty(0, dtype=np.int64)}
    ds = Dataset(X, targets, split, np.zeros(d), np.ones(d), task=task,
                 label_map=label_map, latents=latents)
    return ds


def sample_gp_path(gram, rng, jitter=1e-8, max_jitter=1e-4):
    """Draw f ~ N(0, gram) via Cholesky with an escalating jitter ladder."""
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    z = rng.standard_normal(n)
    while jitter <= max_jitter:
        try:
            chol = scipy.linalg.cholesky(gram + jitter * np.eye(n), lower=True)
            return chol @ z
        except scipy.linalg.LinAlgError:
            jitter *= 10.0
    raise NumericError(f"Cholesky failed up to jitter {max_jitter}")


def synth_gp_sample(kernel_spec, n, d, noise_sd, seed=0):
    """Unsplit Dataset whose targets are one noisy GP sample path.

    Inputs are uniform on [0, 1]^d; the latent function is drawn from
    N(0, K) for the Gram matrix of kernel_spec on those inputs.
    """
    from . import spectral
    if n < 1:
        raise DomainError(f"need at least one sample, got {n}")
    rng = np.random.default_rng(seed)
    X = rng.uniform(size=(n, d))
    gram = spectral.build_gram(kernel_spec, X)
    f = sample_gp_path(gram, rng)
    y = f + noise_sd * rng.standard_normal(n)
    return _unsplit(X, y)


def _circle_latents(n, rng):
    angles = rng.uniform(0.0, 2.0 * np.pi, size=n)
    z = np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return z, angles[:, None]


def _torus_latents(n, rng):
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    ring = TORUS_MAJOR_RADIUS + TORUS_MINOR_RADIUS * np.cos(phi)
    z = np.stack([ring * np.cos(theta), ring * np.sin(theta),
                  TORUS_MINOR_RADIUS * np.sin(phi)], axis=1)
    return z, np.stack([theta, phi], axis=1)


def synth_manifold(n, latent_kind="circle", d_ambient=16, eps=0.1, noise_sd=0.1,
                   seed=0):
    """Unsplit regression Dataset embedding a noisy low-dim manifold.

    Latent points live on the unit circle (2-d latent space) or a torus
    surface (3-d latent space), jittered with N(0, 0.1) per coordinate,
    then warped into d_ambient dimensions by

        g(z) = z P + eps * (sin(z Ps) cos(z Pc) + sin(z Ps) + 2 cos(z Pc))

    with P, Ps, Pc having i.i.d. standard normal entries.  The target is
    a smooth periodic function of the latent angles plus observation
    noise; the clean latents are stored on the Dataset for evaluation.
    """
    rng = np.random.default_rng(seed)
    if latent_kind == "circle":
        z, angles = _circle_latents(n, rng)
    elif latent_kind == "torus":
        z, angles = _torus_latents(n, rng)
    else:
        raise DomainError(f"unknown latent kind {latent_kind!r}")
    q = z.shape[1]
    if d_ambient < q:
        raise DomainError(f"ambient dimension {d_ambient} below latent "
                          f"dimension {q}")
    z_noisy = z + MANIFOLD_LATENT_JITTER_SD * rng.standard_normal(z.shape)
    p_lin = rng.standard_normal((q, d_ambient))
    p_sin = rng.standard_normal((q, d_ambient))
    p_cos = rng.standard_normal((q, d_ambient))
    linear = z_noisy @ p_lin
    s = np.sin(z_noisy @ p_sin)
    c = np.cos(z_noisy @ p_cos)
    X = linear + eps * (s * c + s + 2.0 * c)
    # smooth periodic target of the latent angles
    y = np.sin(2.0 * angles[:, 0]) + np.cos(3.0 * angles[:, -1])
    y = y + noise_sd * rng.standard_normal(n)
    return _unsplit(X, y, latents=z_noisy)


def synth_blobs(n, num_classes=3, d=2, separation=4.0, seed=0):
    """Unsplit classification Dataset of unit-variance Gaussian blobs.

    Class centers sit at the origin and at separation-scaled axis
    points, so every pair of centers is at least `separation` apart in
    units of the within-blob standard deviation (which is 1).
    """
    if num_classes < 2:
        raise DomainError("need at least two classes")
    if num_classes > 2 * d + 1:
        raise DomainError(f"cannot place {num_classes} centers {separation} "
                          f"apart on {d} axes")
    rng = np.random.default_rng(seed)
    centers = np.zeros((num_classes, d))
    for c in range(1, num_classes):
        axis = (c - 1) % d
        sign = 1.0 if (c - 1) < d else -1.0
        centers[c, axis] = sign * separation
    labels = rng.integers(num_classes, size=n)
    X = centers[labels] + rng.standard_normal((n, d))
    return _unsplit(X, labels, task="classification")
