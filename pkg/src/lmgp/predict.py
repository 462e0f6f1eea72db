"""Closed-form posterior prediction for any registered source.

A fitted model predicts through the usual kriging identities

    mean = f beta + r' R^-1 (y - F beta)
    cov  = sigma2 [ r(a,b) - r_a' R^-1 r_b + h_a h_b / (F' R^-1 F) ]

with every solve routed through the cached Cholesky factor of the
nugget-augmented training correlation matrix.  The reported variance is
for the noise-free latent function; observation-level intervals add the
estimated noise variance back via a flag.
"""

from __future__ import annotations

import json

import numpy as np
from scipy.linalg import cholesky, solve_triangular

from .data import FusionDataset, Scaler
from .kernels import map_latent, pairwise_sqdist_per_dim
from .train import FitResult, LikelihoodProblem, LmgpHyperParams

__all__ = ["LmgpModel"]


class LmgpModel:
    """Frozen fit result bound to its training data, ready for prediction."""

    def __init__(self, dataset: FusionDataset, fit: FitResult):
        self.dataset = dataset
        self.fit = fit
        self._build_cache()

    # -- cache -------------------------------------------------------------

    def _build_cache(self):
        ds = self.dataset
        p = self.fit.params
        problem = LikelihoodProblem(ds)
        vec = problem.pack(p)
        R_delta, Z, theta_filled, _ = problem._correlation(vec)
        self._L = cholesky(R_delta, lower=True)
        self._F = np.ones((ds.n, 1))
        self._Lf = solve_triangular(self._L, self._F, lower=True)
        Ly = solve_triangular(self._L, ds.y, lower=True)
        beta = np.asarray(p.beta_hat, dtype=float).ravel()
        w = Ly - self._Lf @ beta
        self._alpha = solve_triangular(self._L.T, w, lower=False)
        self._G = float(self._Lf[:, 0] @ self._Lf[:, 0])
        self._Z = Z if Z is not None else np.zeros((ds.n, 2))
        self._theta_filled = theta_filled
        self._beta = beta
        self._sigma2 = float(p.sigma2_hat)

    # -- query preparation ---------------------------------------------------

    def _query(self, x, source_label, theta):
        ds = self.dataset
        combo = ds.combo_of(source_label)  # raises KeyError for unknown sources
        x_scaled = ds.scaler.scale_x(np.atleast_2d(np.asarray(x, dtype=float)),
                                     warn_out_of_bounds=False)
        m = x_scaled.shape[0]
        if self.fit.params.latent_map is not None:
            z = map_latent(combo, self.fit.params.latent_map, ds.level_counts)
        else:
            z = np.zeros(2)
        theta_scaled = None
        if ds.has_calibration:
            is_high = source_label == ds.labels[0]
            if theta is None:
                if not is_high:
                    raise ValueError(
                        f"source {source_label!r} takes calibration inputs; pass theta"
                    )
                theta_scaled = np.tile(self.fit.params.theta_hat, (m, 1))
            else:
                theta = np.atleast_2d(np.asarray(theta, dtype=float))
                if theta.shape[0] == 1 and m > 1:
                    theta = np.tile(theta, (m, 1))
                theta_scaled = ds.scaler.scale_theta(theta, warn_out_of_bounds=False)
                nan_rows = np.isnan(theta_scaled).any(axis=1)
                if nan_rows.any():
                    theta_scaled[nan_rows] = self.fit.params.theta_hat
        elif theta is not None:
            raise ValueError("model was fitted without calibration inputs")
        return x_scaled, z, theta_scaled

    def _cross_correlation(self, x_scaled, z, theta_scaled):
        """Correlations between m query points and the n training rows, (n, m)."""
        ds = self.dataset
        p = self.fit.params
        expo = np.tensordot(10.0 ** p.omega, pairwise_sqdist_per_dim(ds.x, x_scaled), axes=1)
        dz = self._Z - z[None, :]
        expo += np.einsum("ij,ij->i", dz, dz)[:, None]
        if ds.has_calibration:
            dth2 = pairwise_sqdist_per_dim(self._theta_filled, theta_scaled)
            expo += np.tensordot(10.0 ** p.omega_theta, dth2, axes=1)
        return np.exp(-expo)

    def _query_correlation(self, qa, qb):
        """Correlations between two query batches, (ma, mb)."""
        p = self.fit.params
        xa, za, tha = qa
        xb, zb, thb = qb
        expo = np.tensordot(10.0 ** p.omega, pairwise_sqdist_per_dim(xa, xb), axes=1)
        expo += float(np.sum((za - zb) ** 2))
        if tha is not None:
            expo += np.tensordot(10.0 ** p.omega_theta, pairwise_sqdist_per_dim(tha, thb), axes=1)
        return np.exp(-expo)

    # -- prediction ----------------------------------------------------------

    def predict_mean(self, x, source_label, theta=None):
        """Posterior mean at query inputs, in natural output units.

        ``theta`` is required when querying a low-fidelity source of a
        calibration model; high-fidelity queries substitute the fitted
        calibration estimate.
        """
        q = self._query(x, source_label, theta)
        r = self._cross_correlation(*q)
        mean_scaled = self._beta[0] + r.T @ self._alpha
        out = self.dataset.scaler.unscale_y(mean_scaled)
        return float(out[0]) if out.shape[0] == 1 else out

    def predict_cov(self, x_a, source_a, x_b, source_b, theta_a=None, theta_b=None,
                    include_noise=False):
        """Posterior covariance between the responses at two query points.

        Symmetric in its arguments, in squared output units.  The noise
        flag adds the estimated observation noise to the matching-query
        variance.
        """
        qa = self._query(x_a, source_a, theta_a)
        qb = self._query(x_b, source_b, theta_b)
        ra = self._cross_correlation(*qa)
        rb = self._cross_correlation(*qb)
        va = solve_triangular(self._L, ra, lower=True)
        vb = solve_triangular(self._L, rb, lower=True)
        prior = self._query_correlation(qa, qb)
        ha = 1.0 - self._Lf.T @ va  # (1, ma)
        hb = 1.0 - self._Lf.T @ vb
        cov_scaled = self._sigma2 * (prior - va.T @ vb + ha.T @ hb / self._G)
        same = (
            cov_scaled.shape == (1, 1)
            and source_a == source_b
            and np.array_equal(qa[0], qb[0])
            and (qa[2] is None or np.array_equal(qa[2], qb[2]))
        )
        if same:
            val = float(cov_scaled[0, 0])
            if val < 0.0:
                if val < -1e-10 * self._sigma2:
                    raise FloatingPointError(
                        f"variance {val:.3e} below the round-off tolerance"
                    )
                val = 0.0
            if include_noise:
                val += self.fit.params.nugget * self._sigma2
            cov_scaled = np.array([[val]])
        cov = cov_scaled * self.dataset.scaler.y_std ** 2
        return float(cov[0, 0]) if cov.shape == (1, 1) else cov

    def predict_var(self, x, source_label, theta=None, include_noise=False):
        """Posterior variance at a batch of query points (vectorized)."""
        q = self._query(x, source_label, theta)
        r = self._cross_correlation(*q)
        v = solve_triangular(self._L, r, lower=True)
        h = 1.0 - (self._Lf.T @ v).ravel()
        var_scaled = self._sigma2 * (1.0 - np.einsum("ij,ij->j", v, v) + h * h / self._G)
        bad = var_scaled < -1e-10 * self._sigma2
        if bad.any():
            worst = float(var_scaled.min())
            raise FloatingPointError(f"variance {worst:.3e} below the round-off tolerance")
        var_scaled = np.maximum(var_scaled, 0.0)
        if include_noise:
            var_scaled = var_scaled + self.fit.params.nugget * self._sigma2
        out = var_scaled * self.dataset.scaler.y_std ** 2
        return float(out[0]) if out.shape[0] == 1 else out

    def noise_variance(self) -> float:
        """Estimated stationary observation-noise variance, in natural units."""
        return float(self.fit.params.nugget * self._sigma2 * self.dataset.scaler.y_std ** 2)

    def latent_distance(self, label_a, label_b) -> float:
        """Distance between two sources in the canonical latent space."""
        labels = list(self.dataset.labels)
        pa = self.fit.canonical_positions[labels.index(label_a)]
        pb = self.fit.canonical_positions[labels.index(label_b)]
        return float(np.hypot(*(pa - pb)))

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        ds = self.dataset
        return {
            "format": "lmgp-model",
            "version": 1,
            "params": self.fit.params.to_dict(),
            "objective": self.fit.objective,
            "n_starts_converged": self.fit.n_starts_converged,
            "canonical_positions": self.fit.canonical_positions.tolist(),
            "scaler": ds.scaler.to_dict(),
            "source_registry": [[label, list(combo)] for label, combo in ds.source_registry],
            "level_counts": list(ds.level_counts),
            "train_x": ds.x.tolist(),
            "train_t": ds.t.tolist(),
            "train_theta": None if ds.theta is None else _nan_to_none(ds.theta),
            "train_y": ds.y.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LmgpModel":
        if d.get("format") != "lmgp-model":
            raise ValueError("not a model document")
        theta = d["train_theta"]
        dataset = FusionDataset(
            x=np.asarray(d["train_x"], dtype=float),
            t=np.asarray(d["train_t"], dtype=int),
            y=np.asarray(d["train_y"], dtype=float),
            scaler=Scaler.from_dict(d["scaler"]),
            source_registry=tuple((label, tuple(combo)) for label, combo in d["source_registry"]),
            level_counts=tuple(d["level_counts"]),
            theta=None if theta is None else _none_to_nan(theta),
        )
        fit = FitResult(
            params=LmgpHyperParams.from_dict(d["params"]),
            objective=float(d["objective"]),
            n_starts_converged=int(d["n_starts_converged"]),
            canonical_positions=np.asarray(d["canonical_positions"], dtype=float),
        )
        return cls(dataset, fit)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "LmgpModel":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _nan_to_none(arr):
    return [[None if np.isnan(v) else v for v in row] for row in np.asarray(arr, dtype=float)]


def _none_to_nan(rows):
    return np.asarray(
        [[np.nan if v is None else float(v) for v in row] for row in rows], dtype=float
    )
