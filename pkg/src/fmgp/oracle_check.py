"""Randomized equivalence batteries against dense linear-algebra oracles.

Every low-rank shortcut in the package has a brute-force dense
counterpart that is too slow for real data but exact at small sizes.
Each battery here draws random instances, computes both sides, and
reports the worst deviation against its tolerance.  The perturbation
hook multiplies the top cached eigenvalue by (1 + x) before the low-rank
side runs, which must trip the affected batteries; it exists to prove
the batteries can detect real errors.
"""

from __future__ import annotations

import numpy as np

from . import features as ft
from . import lowrank as lr
from . import regression as reg
from . import spectral as sp

WOODBURY_TOL = 1e-9
LOGDET_TOL = 1e-9
PREDICTION_MEAN_TOL = 1e-8
PREDICTION_VAR_TOL = 1e-8
PRODUCT_TOL = 1e-12
ADDITIVE_TOL = 1e-9
MAJORIZATION_TOL = 1e-9


def _report(name, instances, max_err, tol):
    return {"name": name, "instances": int(instances),
            "max_err": float(max_err), "tol": float(tol),
            "passed": bool(max_err <= tol)}


def _rel(a, b):
    scale = np.max(np.abs(b))
    return float(np.max(np.abs(a - b)) / max(scale, 1e-300))


def _perturbed(decomp, perturb):
    if perturb == 0.0:
        return decomp
    lam = decomp.lam.copy()
    if lam.size:
        lam[0] *= 1.0 + perturb
    return lr.FeatureDecomposition(decomp.u, lam, decomp.proj_targets,
                                   decomp.n, decomp.trace_phi_sq)


def _random_instance(rng, max_n, max_p, force_wide=False):
    p = int(rng.integers(1, max_p + 1))
    if force_wide:
        n = int(rng.integers(1, max(2, p)))
    else:
        n = int(rng.integers(2, max_n + 1))
    phi = rng.standard_normal((n, p))
    y = rng.standard_normal(n)
    sigma_xi_sq = float(np.exp(rng.uniform(np.log(1e-4), np.log(10.0))))
    return phi, y, sigma_xi_sq


def check_woodbury(num_instances=100, seed=0, perturb=0.0):
    """woodbury_solve and quad_form against dense solves."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(num_instances):
        # every fifth instance has fewer rows than features
        phi, y, s2 = _random_instance(rng, 200, 16, force_wide=trial % 5 == 4)
        n = phi.shape[0]
        decomp = _perturbed(lr.decompose(phi.T @ phi, phi.T @ y, n), perturb)
        dense = phi @ phi.T + s2 * np.eye(n)
        x_dense = np.linalg.solve(dense, y)
        x_low = lr.woodbury_solve(decomp, phi, s2, y)
        worst = max(worst, _rel(x_low, x_dense))
        q_dense = float(y @ x_dense)
        q_low = lr.quad_form(decomp, phi, s2, y)
        worst = max(worst, abs(q_low - q_dense) / max(abs(q_dense), 1e-300))
    return _report("woodbury", num_instances, worst, WOODBURY_TOL)


def check_logdet(num_instances=100, seed=0, perturb=0.0):
    """Low-rank log-determinant against dense slogdet, absolute error."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(num_instances):
        phi, y, s2 = _random_instance(rng, 200, 16, force_wide=trial % 5 == 4)
        n = phi.shape[0]
        decomp = _perturbed(lr.decompose(phi.T @ phi, phi.T @ y, n), perturb)
        dense = phi @ phi.T + s2 * np.eye(n)
        sign, dense_ld = np.linalg.slogdet(dense)
        low = lr.logdet_kxi(decomp, s2, n)
        worst = max(worst, abs(low - sign * dense_ld))
    return _report("logdet", num_instances, worst, LOGDET_TOL)


def check_prediction(num_instances=100, seed=0, perturb=0.0):
    """Cached low-rank predictions against the dense exact-GP oracle."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(num_instances):
        d = int(rng.integers(1, 9))
        p = int(rng.integers(1, 33))
        n = int(rng.integers(1, 33)) if trial % 7 == 6 else int(rng.integers(8, 501))
        hidden = int(rng.integers(2, 17))
        # unit-rescaled maps are the model family's kernel; raw maps
        # inflate Gram norms and with them the attainable accuracy
        fmap = ft.init_params([d, hidden, p], seed=int(rng.integers(1 << 31)),
                              normalization="layer_norm", rescale_to_unit=True)
        X = rng.standard_normal((n, d))
        X_star = rng.standard_normal((int(rng.integers(1, 33)), d))
        y = rng.standard_normal(n)
        sigma_f_sq = float(np.exp(rng.uniform(np.log(0.25), np.log(4.0))))
        sigma_xi_sq = float(np.exp(rng.uniform(np.log(1e-4), np.log(10.0))))

        phi = ft.forward(fmap, X)
        decomp = _perturbed(lr.decompose(phi.T @ phi, phi.T @ y, n), perturb)
        model = reg.GpModel(fmap, sigma_f_sq, sigma_xi_sq, decomp)
        pred = reg.predict(model, X_star)

        def kernel(a, b, fmap=fmap, s=sigma_f_sq):
            return s * (ft.forward(fmap, a) @ ft.forward(fmap, b).T)

        oracle = reg.exact_gp_oracle(kernel, X, y, sigma_xi_sq, X_star)
        worst = max(worst, _rel(pred.mean, oracle.mean))
        worst = max(worst, float(np.max(np.abs(pred.variance - oracle.variance))))
        worst = max(worst, float(np.max(np.abs(
            pred.observation_variance - oracle.observation_variance))))
    return _report("prediction", num_instances, worst, PREDICTION_MEAN_TOL)


def check_product(num_instances=50, seed=0):
    """Columnwise-product features reproduce the Hadamard Gram exactly."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_instances):
        n = int(rng.integers(2, 40))
        p1 = int(rng.integers(1, 9))
        p2 = int(rng.integers(1, 9))
        phi1 = rng.standard_normal((n, p1))
        phi2 = rng.standard_normal((n, p2))
        xi = lr.product_features(phi1, phi2)
        hadamard = (phi1 @ phi1.T) * (phi2 @ phi2.T)
        worst = max(worst, float(np.max(np.abs(xi @ xi.T - hadamard))))
        plan = lr.ProductFeaturePlan(p1, p2)
        i = int(rng.integers(1, p1 + 1))
        j = int(rng.integers(1, p2 + 1))
        column = xi[:, plan.column_index(i, j) - 1]
        worst = max(worst, float(np.max(np.abs(
            column - phi1[:, i - 1] * phi2[:, j - 1]))))
    return _report("product", num_instances, worst, PRODUCT_TOL)


def check_additive(num_instances=50, seed=0):
    """Two-term additive low-rank solve against the dense solve."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(num_instances):
        n = int(rng.integers(2, 60))
        p1 = int(rng.integers(1, 9))
        p2 = int(rng.integers(1, 9))
        phi1 = rng.standard_normal((n, p1))
        phi2 = rng.standard_normal((n, p2))
        v = rng.standard_normal(n)
        s2 = float(np.exp(rng.uniform(np.log(1e-4), np.log(10.0))))
        dense = phi1 @ phi1.T + phi2 @ phi2.T + s2 * np.eye(n)
        x_dense = np.linalg.solve(dense, v)
        x_low = lr.additive_solve(phi1, phi2, s2, v)
        worst = max(worst, _rel(x_low, x_dense))
    return _report("additive", num_instances, worst, ADDITIVE_TOL)


def _random_unit_diag_psd(rng, n):
    a = rng.standard_normal((n, n + 2))
    k = a @ a.T
    d = np.sqrt(np.diag(k))
    return k / np.outer(d, d)


def check_majorization(num_pairs=100, seed=0):
    """Partial-sum and tail-sum Hadamard spectral bounds on random pairs."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for trial in range(num_pairs):
        n = int(rng.integers(2, 33))
        if trial % 2 == 0:
            k1 = _random_unit_diag_psd(rng, n)
            k2 = _random_unit_diag_psd(rng, n)
        else:
            X = rng.uniform(size=(n, int(rng.integers(1, 4))))
            ell1 = float(np.exp(rng.uniform(np.log(0.3), np.log(3.0))))
            ell2 = float(np.exp(rng.uniform(np.log(0.3), np.log(3.0))))
            k1 = sp.build_gram(sp.ExpKernel(ell1), X)
            k2 = sp.build_gram(sp.RbfKernel(ell2), X)
        violation = -min(np.min(sp.hadamard_partial_sum_slack(k1, k2)),
                         np.min(sp.hadamard_tail_sum_slack(k1, k2)))
        worst = max(worst, float(violation))
    return _report("majorization", num_pairs, worst, MAJORIZATION_TOL)


def run_all(seed=0, perturb_top_eigenvalue=0.0):
    """All batteries in a fixed order; returns their report dicts."""
    return [
        check_woodbury(seed=seed, perturb=perturb_top_eigenvalue),
        check_logdet(seed=seed, perturb=perturb_top_eigenvalue),
        check_prediction(seed=seed, perturb=perturb_top_eigenvalue),
        check_product(seed=seed),
        check_additive(seed=seed),
        check_majorization(seed=seed),
    ]
