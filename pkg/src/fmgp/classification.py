"""Dirichlet-based Gaussian process classification on shared features.

Class labels are turned into per-class log-normal surrogate regression
targets: with concentration alpha_{i,c} = alpha_eps + 1{label_i = c},

    sigma_tilde_sq_{i,c} = log(1 / alpha_{i,c} + 1)
    y_tilde_{i,c}        = log alpha_{i,c} - sigma_tilde_sq_{i,c} / 2

Each class is then an independent GP regression on one shared feature
map, with per-point noise sigma_tilde_sq_{i,c} plus a learned per-class
noise variance.  The per-point noise breaks the single-noise Woodbury
form, so rows of the feature matrix and targets are divided by the
per-point noise standard deviation, which restores a unit-noise low-rank
problem; this whitening is checked against a dense heteroscedastic
oracle in the tests.

Class probabilities come from Monte-Carlo sampling of the per-class
latent posteriors pushed through a temperature-scaled softmax; the
temperature is fitted on held-out data by multinomial log-likelihood.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np
import scipy.optimize

from . import features as ft
from . import lowrank as lr
from . import regression as reg
from .errors import DataError, DomainError, NumericError, ShapeError, TrainingError

DEFAULT_ALPHA_EPS = 0.01
DEFAULT_NUM_SAMPLES = 1024
DEFAULT_ECE_BINS = 15


def dirichlet_transform(labels, alpha_eps, num_classes=None):
    """Surrogate regression targets and noise variances from class labels.

    Returns (y_tilde, sigma_tilde_sq), both (n, C).
    """
    if not alpha_eps > 0:
        raise DomainError(f"alpha_eps must be positive, got {alpha_eps}")
    labels = np.asarray(labels)
    if labels.ndim != 1:
        raise ShapeError("labels must be a vector of class indices")
    labels = labels.astype(np.int64)
    c = int(labels.max()) + 1 if num_classes is None else int(num_classes)
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise DomainError(f"labels must lie in [0, {c})")
    alpha = np.full((labels.size, c), float(alpha_eps))
    alpha[np.arange(labels.size), labels] += 1.0
    sigma_tilde_sq = np.log(1.0 / alpha + 1.0)
    y_tilde = np.log(alpha) - sigma_tilde_sq / 2.0
    return y_tilde, sigma_tilde_sq


class DirichletClassifier:
    """Fitted classifier: shared feature map plus per-class regressions.

    caches[c] is a FeatureDecomposition of the class's noise-whitened
    feature Gram, with proj_targets = U^T Phi_w^T y_w.  Immutable after
    fit; use with_temperature to derive a re-tempered copy.
    """

    def __init__(self, feature_map, sigma_f_sq, sigma_xi_sq, caches, num_classes,
                 alpha_eps, temperature=1.0, train_inputs_stats=None,
                 surrogate_noise=None, training_trace=None, label_map=None):
        self.feature_map = feature_map
        self.sigma_f_sq = np.asarray(sigma_f_sq, dtype=np.float64)
        self.sigma_xi_sq = np.asarray(sigma_xi_sq, dtype=np.float64)
        if np.any(self.sigma_f_sq <= 0) or np.any(self.sigma_xi_sq <= 0):
            raise DomainError("per-class variances must be positive")
        if not temperature > 0:
            raise DomainError(f"temperature must be positive, got {temperature}")
        self.caches = list(caches)
        self.num_classes = int(num_classes)
        if self.num_classes < 2:
            raise DomainError("need at least two classes")
        self.alpha_eps = float(alpha_eps)
        self.temperature = float(temperature)
        self.train_inputs_stats = train_inputs_stats
        self.surrogate_noise = surrogate_noise
        self.training_trace = training_trace
        self.label_map = label_map

    def with_temperature(self, temperature):
        return DirichletClassifier(self.feature_map, self.sigma_f_sq,
                                   self.sigma_xi_sq, self.caches,
                                   self.num_classes, self.alpha_eps,
                                   temperature=temperature,
                                   train_inputs_stats=self.train_inputs_stats,
                                   surrogate_noise=self.surrogate_noise,
                                   training_trace=self.training_trace,
                                   label_map=self.label_map)


@dataclass
class ClassifierConfig:
    hidden_widths: tuple = (512, 512)
    output_dim: int = 64
    normalization: str = "layer_norm"
    rescale_to_unit: bool = True
    iterations: int = 200
    num_subsets: int = 4
    subset_size: int = 20000
    # matches the regression default; see FitConfig
    learning_rate: float = 0.03
    seed: int = 0
    init_sigma_f_sq: float = 1.0
    init_sigma_xi_sq: float = 0.1
    alpha_eps: float = DEFAULT_ALPHA_EPS
    decomp_batch_rows: int = 8192


def fit_classifier(dataset, config=None, feature_map=None):
    """Train the shared feature map against the sum of per-class MLLs.

    Each class contributes a heteroscedastic MLL with its surrogate noise
    plus its learned noise variance; gradients through the shared feature
    matrix sum over classes.  After training, one shared feature pass
    builds all per-class whitened decomposition caches.
    """
    config = config or ClassifierConfig()
    train_idx = np.asarray(dataset.split["train"])
    if train_idx.size < 1:
        raise DataError("training split is empty")
    X = np.asarray(dataset.X, dtype=np.float64)[train_idx]
    labels = np.asarray(dataset.targets)[train_idx].astype(np.int64)
    classes = np.unique(labels)
    if classes.size < 2:
        raise DomainError("training data contains a single class")
    num_classes = int(labels.max()) + 1
    n, d = X.shape

    y_tilde, s_tilde_sq = dirichlet_transform(labels, config.alpha_eps, num_classes)

    if feature_map is None:
        widths = [d, *config.hidden_widths, config.output_dim]
        feature_map = ft.init_params(widths, config.seed,
                                     normalization=config.normalization,
                                     rescale_to_unit=config.rescale_to_unit)
    elif feature_map.input_dim != d:
        raise ShapeError(f"feature map expects {feature_map.input_dim} inputs, data has {d}")

    rng = np.random.default_rng(config.seed)
    subsets = reg.make_subsets(n, config.num_subsets, config.subset_size, rng)

    log_sf2 = np.full(num_classes, np.log(config.init_sigma_f_sq))
    log_sxi2 = np.full(num_classes, np.log(config.init_sigma_xi_sq))
    params = feature_map.param_list() + [log_sf2, log_sxi2]
    state = ft.AdamState.create(params, config.learning_rate)
    trace = []
    for t in range(config.iterations):
        fmap_t = feature_map.replace_params(params[:-2])
        idx = subsets[t % config.num_subsets]
        n_sub = idx.size
        try:
            phi = ft.forward(fmap_t, X[idx])
            total = 0.0
            d_phi = np.zeros_like(phi)
            d_sf = np.zeros(num_classes)
            d_sx = np.zeros(num_classes)
            for c in range(num_classes):
                value, dp, dsf_c, dsx_c = reg.gaussian_mll_parts(
                    phi, y_tilde[idx, c], params[-2][c], params[-1][c],
                    extra_noise=s_tilde_sq[idx, c])
                total += value
                d_phi += dp
                d_sf[c] = dsf_c
                d_sx[c] = dsx_c
            map_grads = ft.backward(fmap_t, X[idx], d_phi)
        except NumericError as exc:
            raise TrainingError(f"training diverged at iteration {t}: {exc}",
                                iteration=t) from exc
        scale = n_sub * num_classes
        loss = -total / scale
        if not np.isfinite(loss):
            raise TrainingError(f"training diverged at iteration {t}", iteration=t)
        trace.append(loss)
        grads = [-g / scale for g in map_grads]
        grads.append(-d_sf / scale)
        grads.append(-d_sx / scale)
        params, state = ft.adam_step(state, params, grads)

    feature_map = feature_map.replace_params(params[:-2])
    sigma_f_sq = np.exp(params[-2])
    sigma_xi_sq = np.exp(params[-1])

    caches = _build_class_caches(feature_map, X, y_tilde, s_tilde_sq, sigma_xi_sq,
                                 config.decomp_batch_rows)
    return DirichletClassifier(feature_map, sigma_f_sq, sigma_xi_sq, caches,
                               num_classes, config.alpha_eps,
                               train_inputs_stats=getattr(dataset, "stats_dict",
                                                          lambda: None)(),
                               surrogate_noise=s_tilde_sq,
                               training_trace=trace,
                               label_map=getattr(dataset, "label_map", None))


def _build_class_caches(feature_map, X, y_tilde, s_tilde_sq, sigma_xi_sq, batch_rows):
    """One shared feature pass; per-class whitened Gram accumulators."""
    n = X.shape[0]
    num_classes = y_tilde.shape[1]
    p = feature_map.output_dim
    accs = [lr.GramAccumulator(p) for _ in range(num_classes)]
    for start in range(0, n, batch_rows):
        stop = min(start + batch_rows, n)
        phi_b = ft.forward(feature_map, X[start:stop])
        for c in range(num_classes):
            s = np.sqrt(s_tilde_sq[start:stop, c] + sigma_xi_sq[c])
            accs[c].add(phi_b / s[:, None], y_tilde[start:stop, c] / s)
    return [lr.decompose(accs[c].gram, accs[c].phi_t_y, n) for c in range(num_classes)]


def class_posteriors(clf, X_star):
    """Per-class latent posterior means and variances at new inputs.

    Returns (means, variances), both (n*, C).  For class c with whitened
    eigenpairs (U, lam) and scale v = sigma_f_sq_c:

        mean = v * psi U (v lam + 1)^{-1} U^T Phi_w^T y_w
        var  = v * |psi|^2 - v^2 * psi U diag(lam / (v lam + 1)) U^T psi^T
    """
    psi = ft.forward(clf.feature_map, X_star)
    n_star = psi.shape[0]
    means = np.empty((n_star, clf.num_classes))
    variances = np.empty((n_star, clf.num_classes))
    prior = np.sum(psi * psi, axis=1)
    for c in range(clf.num_classes):
        cache = clf.caches[c]
        v = clf.sigma_f_sq[c]
        au = psi @ cache.u
        denom = v * cache.lam + 1.0
        means[:, c] = v * (au @ (cache.proj_targets / denom))
        core = v * prior - v * v * np.sum(au * au * (cache.lam / denom), axis=1)
        variances[:, c] = reg._clamp_variance(core, v * prior)
    return means, variances


def _softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _sample_probs(means, variances, num_samples, temperature, rng, block=256):
    """Average softmax(mu + sd * eps, scaled by 1/T) over posterior draws."""
    n, c = means.shape
    sd = np.sqrt(variances)
    probs = np.empty((n, c))
    for start in range(0, n, block):
        stop = min(start + block, n)
        eps = rng.standard_normal((num_samples, stop - start, c))
        f = means[start:stop] + sd[start:stop] * eps
        probs[start:stop] = _softmax(f / temperature).mean(axis=0)
    return probs


def predict_proba(clf, X_star, num_samples=DEFAULT_NUM_SAMPLES, seed=None,
                  temperature=None):
    """Monte-Carlo class probabilities; rows sum to 1.

    Draws num_samples independent latent samples per class from the
    posterior, pushes them through the temperature-scaled softmax and
    averages.  A fresh generator is created per call from the seed.
    """
    if num_samples < 1:
        raise DomainError("need at least one sample")
    t = clf.temperature if temperature is None else float(temperature)
    if not t > 0:
        raise DomainError(f"temperature must be positive, got {t}")
    means, variances = class_posteriors(clf, X_star)
    rng = np.random.default_rng(seed)
    return _sample_probs(means, variances, num_samples, t, rng)


def multinomial_nll(probs, labels):
    """Mean negative log-likelihood of the observed classes."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.shape[0] != labels.shape[0]:
        raise ShapeError("probability rows and labels differ in length")
    picked = probs[np.arange(labels.size), labels]
    return float(-np.mean(np.log(np.maximum(picked, 1e-300))))


def fit_temperature(clf, X_hold, y_hold, num_samples=DEFAULT_NUM_SAMPLES, seed=0,
                    grid=None):
    """Temperature minimizing the holdout multinomial NLL; returns T.

    The latent draws are taken once and reused for every candidate T, so
    the objective is a deterministic 1-d function of T; it is minimized
    over a log-spaced grid containing T = 1 and refined by golden-section
    search around the best grid point.  The returned T never has higher
    NLL than T = 1 on the holdout.  Argmax class predictions are
    unaffected by any positive T for each individual latent sample.
    """
    y_hold = np.asarray(y_hold).astype(np.int64)
    if y_hold.size < 1:
        raise DomainError("holdout is empty")
    if np.unique(y_hold).size < 2:
        warnings.warn("holdout contains a single class; temperature unchanged")
        return clf.temperature
    means, variances = class_posteriors(clf, X_hold)
    rng = np.random.default_rng(seed)
    sd = np.sqrt(variances)
    eps = rng.standard_normal((num_samples, *means.shape))
    f = means + sd * eps

    def nll_at(log_t):
        probs = _softmax(f / np.exp(log_t)).mean(axis=0)
        return multinomial_nll(probs, y_hold)

    if grid is None:
        grid = np.unique(np.concatenate([np.linspace(np.log(0.05), np.log(20.0), 41),
                                         [0.0]]))
    else:
        grid = np.unique(np.concatenate([np.log(np.asarray(grid, dtype=np.float64)),
                                         [0.0]]))
    values = np.array([nll_at(g) for g in grid])
    best = int(np.argmin(values))
    candidates = [(values[best], grid[best])]
    if 0 < best < grid.size - 1:
        try:
            refined = scipy.optimize.minimize_scalar(
                nll_at, bracket=(grid[best - 1], grid[best], grid[best + 1]),
                method="golden", options={"xtol": 1e-6})
            if np.isfinite(refined.fun):
                candidates.append((refined.fun, refined.x))
        except ValueError:
            pass
    candidates.append((nll_at(0.0), 0.0))
    _, log_t = min(candidates, key=lambda pair: pair[0])
    return float(np.exp(log_t))


class CalibrationReport:
    """Binned calibration summary over top-label confidences."""

    def __init__(self, ece, bin_confidences, bin_accuracies, bin_counts, num_bins):
        self.ece = float(ece)
        self.bin_confidences = bin_confidences
        self.bin_accuracies = bin_accuracies
        self.bin_counts = bin_counts
        self.num_bins = int(num_bins)


def compute_ece(probs, labels, num_bins=DEFAULT_ECE_BINS):
    """Expected calibration error with equal-width bins over (0, 1].

    Confidence is the top predicted probability; bin b collects
    confidences in (b/B, (b+1)/B].  ECE is the count-weighted mean of
    |accuracy - mean confidence| over the bins.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64)
    if probs.ndim != 2 or probs.shape[0] != labels.shape[0]:
        raise ShapeError("need one probability row per label")
    if probs.shape[0] == 0:
        raise DomainError("cannot compute calibration of an empty set")
    if num_bins < 1:
        raise DomainError("need at least one bin")
    confidence = probs.max(axis=1)
    predicted = probs.argmax(axis=1)
    correct = (predicted == labels).astype(np.float64)
    idx = np.clip(np.ceil(confidence * num_bins).astype(np.int64) - 1, 0, num_bins - 1)
    counts = np.zeros(num_bins)
    conf_sum = np.zeros(num_bins)
    acc_sum = np.zeros(num_bins)
    np.add.at(counts, idx, 1.0)
    np.add.at(conf_sum, idx, confidence)
    np.add.at(acc_sum, idx, correct)
    filled = counts > 0
    bin_conf = np.where(filled, conf_sum / np.maximum(counts, 1.0), 0.0)
    bin_acc = np.where(filled, acc_sum / np.maximum(counts, 1.0), 0.0)
    total = float(counts.sum())
    ece = float(np.sum(counts / total * np.abs(bin_acc - bin_conf)))
    return CalibrationReport(ece, bin_conf, bin_acc, counts.astype(np.int64), num_bins)


def classifier_to_json_dict(clf):
    return {
        "schema": reg.MODEL_SCHEMA,
        "task": "classification",
        "feature_map": clf.feature_map.to_json_dict(),
        "num_classes": clf.num_classes,
        "temperature": clf.temperature,
        "surrogate_noise_policy": {
            "kind": "dirichlet-lognormal",
            "alpha_eps": clf.alpha_eps,
            "composition": "added-to-learned-noise",
        },
        "per_class": [
            {
                "sigma_f_sq": float(clf.sigma_f_sq[c]),
                "sigma_xi_sq": float(clf.sigma_xi_sq[c]),
                "cache": {
                    "u": clf.caches[c].u.tolist(),
                    "eigenvalues": clf.caches[c].lam.tolist(),
                    "proj_targets": clf.caches[c].proj_targets.tolist(),
                    "n": clf.caches[c].n,
                    "trace_phi_sq": clf.caches[c].trace_phi_sq,
                },
            }
            for c in range(clf.num_classes)
        ],
        "normalization": clf.train_inputs_stats,
        "label_map": ({str(k): int(v) for k, v in clf.label_map.items()}
                      if clf.label_map else None),
    }


def classifier_from_json_dict(doc):
    if doc.get("schema") != reg.MODEL_SCHEMA:
        raise DataError(f"unrecognized model schema {doc.get('schema')!r}")
    if doc.get("task") != "classification":
        raise DataError(f"expected a classification model, got {doc.get('task')!r}")
    per_class = doc["per_class"]
    caches = []
    for entry in per_class:
        cache = entry["cache"]
        caches.append(lr.FeatureDecomposition(
            np.asarray(cache["u"], dtype=np.float64),
            np.asarray(cache["eigenvalues"], dtype=np.float64),
            np.asarray(cache["proj_targets"], dtype=np.float64),
            cache["n"], cache["trace_phi_sq"]))
    label_map = doc.get("label_map")
    if label_map is not None:
        label_map = {float(k): int(v) for k, v in label_map.items()}
    return DirichletClassifier(
        ft.feature_map_from_json_dict(doc["feature_map"]),
        np.array([entry["sigma_f_sq"] for entry in per_class]),
        np.array([entry["sigma_xi_sq"] for entry in per_class]),
        caches, doc["num_classes"],
        doc["surrogate_noise_policy"]["alpha_eps"],
        temperature=doc["temperature"],
        train_inputs_stats=doc.get("normalization"),
        label_map=label_map)


def save_classifier(clf, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(classifier_to_json_dict(clf), fh)


def load_classifier(path):
    with open(path, encoding="utf-8") as fh:
        return classifier_from_json_dict(json.load(fh))
