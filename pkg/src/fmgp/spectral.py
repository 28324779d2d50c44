"""Kernel zoo and empirical spectral analysis of Gram matrices.

Kernel specs are small declarative dataclasses; build_gram turns a spec
plus an input matrix into a dense PSD Gram matrix.  The random-feature
kernel uses a freshly initialized feature map, so its Gram has rank at
most the output dimension.  spectrum() and decay_experiment() extract
descending eigenvalue profiles for studying how fast different kernels'
spectra decay.

Also provides Hadamard (entrywise) product spectral bounds: partial sums
of the product spectrum are bounded by eigenvalue/diagonal products of
the factors, and for unit-diagonal factors the tail sums are bounded
below correspondingly.  The slack helpers return (bound - sum) style
quantities that should be nonnegative up to eigensolver noise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.spatial.distance

from . import features as ft
from .errors import DomainError, NumericError, ShapeError

NUMERIC_RANK_RTOL = 1e-10
DEFAULT_SPECTRUM_N = 512
DEFAULT_SPECTRUM_D = 2


def _check_lengthscale(value):
    if not value > 0:
        raise DomainError(f"lengthscale must be positive, got {value}")


@dataclass(frozen=True)
class RbfKernel:
    lengthscale: float = 1.0

    @property
    def label(self):
        return f"rbf(l={self.lengthscale:g})"


@dataclass(frozen=True)
class ExpKernel:
    lengthscale: float = 1.0

    @property
    def label(self):
        return f"exp(l={self.lengthscale:g})"


@dataclass(frozen=True)
class Matern32Kernel:
    lengthscale: float = 1.0

    @property
    def label(self):
        return f"matern32(l={self.lengthscale:g})"


@dataclass(frozen=True)
class PeriodicKernel:
    period: float = 1.0
    lengthscale: float = 1.0

    @property
    def label(self):
        return f"periodic(p={self.period:g},l={self.lengthscale:g})"


@dataclass(frozen=True)
class MlpKernel:
    """Gram of a randomly initialized feature map (no training)."""

    hidden_widths: tuple = (64,)
    output_dim: int = 16
    seed: int = 0
    normalization: str = "layer_norm"
    rescale_to_unit: bool = True

    @property
    def label(self):
        widths = "x".join(str(w) for w in self.hidden_widths)
        return f"mlp(h={widths},p={self.output_dim},seed={self.seed})"


@dataclass(frozen=True)
class NystromKernel:
    """Landmark low-rank approximation C W^+ C^T of a base kernel."""

    base: object = field(default_factory=ExpKernel)
    num_landmarks: int = 64
    seed: int = 0

    @property
    def label(self):
        return f"nystrom({self.base.label},m={self.num_landmarks})"


@dataclass(frozen=True)
class ProductKernel:
    left: object = field(default_factory=RbfKernel)
    right: object = field(default_factory=ExpKernel)

    @property
    def label(self):
        return f"product({self.left.label},{self.right.label})"


def _pairwise_dist(X, Z):
    return scipy.spatial.distance.cdist(X, Z)


def _base_gram(spec, X, Z):
    """Cross-Gram k(X, Z) for the closed-form kernels."""
    if isinstance(spec, RbfKernel):
        _check_lengthscale(spec.lengthscale)
        r2 = scipy.spatial.distance.cdist(X, Z, "sqeuclidean")
        return np.exp(-r2 / (2.0 * spec.lengthscale ** 2))
    if isinstance(spec, ExpKernel):
        _check_lengthscale(spec.lengthscale)
        return np.exp(-_pairwise_dist(X, Z) / spec.lengthscale)
    if isinstance(spec, Matern32Kernel):
        _check_lengthscale(spec.lengthscale)
        a = np.sqrt(3.0) * _pairwise_dist(X, Z) / spec.lengthscale
        return (1.0 + a) * np.exp(-a)
    if isinstance(spec, PeriodicKernel):
        _check_lengthscale(spec.lengthscale)
        if not spec.period > 0:
            raise DomainError(f"period must be positive, got {spec.period}")
        s = np.sin(np.pi * _pairwise_dist(X, Z) / spec.period)
        return np.exp(-2.0 * s * s / spec.lengthscale ** 2)
    raise DomainError(f"unknown kernel spec {type(spec).__name__}")


def build_gram(spec, X):
    """Dense n x n Gram matrix of the kernel spec on the input rows."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ShapeError(f"inputs must be 2-d, got shape {X.shape}")
    if isinstance(spec, MlpKernel):
        widths = [X.shape[1], *spec.hidden_widths, spec.output_dim]
        fmap = ft.init_params(widths, spec.seed,
                              normalization=spec.normalization,
                              rescale_to_unit=spec.rescale_to_unit)
        phi = ft.forward(fmap, X)
        gram = phi @ phi.T
    elif isinstance(spec, NystromKernel):
        if spec.num_landmarks < 1:
            raise DomainError("need at least one landmark")
        m = min(spec.num_landmarks, X.shape[0])
        idx = np.random.default_rng(spec.seed).choice(X.shape[0], size=m,
                                                      replace=False)
        landmarks = X[idx]
        cross = _base_gram(spec.base, X, landmarks)
        core = _base_gram(spec.base, landmarks, landmarks)
        # eigen pseudo-inverse keeps the approximation PSD when the
        # landmark block is rank deficient
        lam, u = scipy.linalg.eigh((core + core.T) / 2.0)
        keep = lam > NUMERIC_RANK_RTOL * max(lam.max(), 1e-300)
        inv = np.where(keep, 1.0 / np.where(keep, lam, 1.0), 0.0)
        half = cross @ (u * np.sqrt(inv))
        gram = half @ half.T
    elif isinstance(spec, ProductKernel):
        gram = build_gram(spec.left, X) * build_gram(spec.right, X)
    else:
        gram = _base_gram(spec, X, X)
    if not np.all(np.isfinite(gram)):
        raise NumericError(f"non-finite Gram entries for {spec.label}")
    return gram


class SpectrumReport:
    """Descending clamped eigenvalues of one Gram matrix."""

    def __init__(self, eigenvalues, kernel_label, n, d, seed):
        self.eigenvalues = np.asarray(eigenvalues, dtype=np.float64)
        self.kernel_label = kernel_label
        self.n = int(n)
        self.d = int(d)
        self.seed = seed

    @property
    def numeric_rank(self):
        top = self.eigenvalues[0] if self.eigenvalues.size else 0.0
        if top <= 0:
            return 0
        return int(np.sum(self.eigenvalues > NUMERIC_RANK_RTOL * top))

    def tail_mass(self, after_index):
        """Fraction of the trace beyond the given 1-based eigen index."""
        total = self.eigenvalues.sum()
        if total <= 0:
            return 0.0
        return float(self.eigenvalues[after_index:].sum() / total)


def spectrum(gram, kernel_label="", d=0, seed=None):
    """Eigen-decompose a symmetric PSD Gram into a SpectrumReport."""
    gram = np.asarray(gram, dtype=np.float64)
    if gram.ndim != 2 or gram.shape[0] != gram.shape[1]:
        raise ShapeError(f"gram must be square, got {gram.shape}")
    try:
        lam = scipy.linalg.eigvalsh((gram + gram.T) / 2.0)
    except scipy.linalg.LinAlgError as exc:
        raise NumericError(f"eigendecomposition failed: {exc}") from exc
    lam = np.maximum(lam[::-1], 0.0)
    return SpectrumReport(lam, kernel_label, gram.shape[0], d, seed)


@dataclass
class DecayConfig:
    specs: tuple = ()
    n: int = DEFAULT_SPECTRUM_N
    d: int = DEFAULT_SPECTRUM_D
    seeds: tuple = (0,)


def decay_experiment(config):
    """Spectra of every kernel spec over shared random inputs per seed.

    For each seed, one matrix of n inputs uniform on [0,1]^d is drawn and
    shared by all specs, so per-seed comparisons across kernels see the
    same data.  Returns a list of SpectrumReports.
    """
    if not config.specs:
        raise DomainError("no kernel specs given")
    reports = []
    for seed in config.seeds:
        X = np.random.default_rng(seed).uniform(size=(config.n, config.d))
        for spec in config.specs:
            gram = build_gram(spec, X)
            reports.append(spectrum(gram, spec.label, config.d, seed))
    return reports


def write_spectra_csv(reports, path):
    """One row per eigenvalue: kernel_label, seed, eigen_index, eigenvalue."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["kernel_label", "seed", "eigen_index", "eigenvalue"])
        for report in reports:
            for i, lam in enumerate(report.eigenvalues, start=1):
                writer.writerow([report.kernel_label, report.seed, i,
                                 repr(float(lam))])


def _descending_eigs(gram):
    gram = np.asarray(gram, dtype=np.float64)
    return np.linalg.eigvalsh((gram + gram.T) / 2.0)[::-1]


def hadamard_partial_sum_slack(gram1, gram2):
    """Slack of the Hadamard-product partial-sum spectral bound.

    For each k in 1..n-1, the sum of the k largest eigenvalues of
    gram1 * gram2 (entrywise product) is at most the sum over i <= k of
    lambda_i(gram1) (descending) times the i-th largest diagonal entry
    of gram2.  Returns bound minus achieved partial sums, length n-1;
    nonnegative up to eigensolver noise when the bound holds.
    """
    gram1 = np.asarray(gram1, dtype=np.float64)
    gram2 = np.asarray(gram2, dtype=np.float64)
    if gram1.shape != gram2.shape:
        raise ShapeError("factor Grams must have equal shapes")
    n = gram1.shape[0]
    lam_prod = _descending_eigs(gram1 * gram2)
    lam1 = _descending_eigs(gram1)
    diag2 = np.sort(np.diag(gram2))[::-1]
    bound = np.cumsum(lam1 * diag2)
    achieved = np.cumsum(lam_prod)
    return (bound - achieved)[: n - 1]


def hadamard_tail_sum_slack(gram1, gram2):
    """Slack of the Hadamard-product tail-sum lower bound.

    For unit-diagonal factors the trace of the product equals the common
    trace, and the partial-sum bound flips into a lower bound on tails:
    for each k in 1..n-1, the sum of the k smallest eigenvalues of
    gram1 * gram2 is at least the sum of lambda_i(gram1) (descending)
    times the i-th smallest diagonal of gram2 over the last k positions.
    Returns achieved minus bound for k = 1..n-1.
    """
    gram1 = np.asarray(gram1, dtype=np.float64)
    gram2 = np.asarray(gram2, dtype=np.float64)
    if gram1.shape != gram2.shape:
        raise ShapeError("factor Grams must have equal shapes")
    n = gram1.shape[0]
    lam_prod = _descending_eigs(gram1 * gram2)
    lam1 = _descending_eigs(gram1)
    diag2 = np.sort(np.diag(gram2))
    x = lam1 * diag2
    achieved = np.cumsum(lam_prod[::-1])
    bound = np.cumsum(x[::-1])
    return (achieved - bound)[: n - 1]
