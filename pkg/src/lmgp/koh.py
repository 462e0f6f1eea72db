"""Modular two-source calibration baseline in the Kennedy-O'Hagan style.

The high-fidelity response is modeled as the low-fidelity simulator at the
(unknown) best calibration setting plus an additive discrepancy and noise:

    y_h(x) = y_l(x, theta*) + d(x) + eps,   eps ~ N(0, lambda)

Fitting is modular and point-estimate based.  Stage one fits a standard GP
to the low-fidelity data alone.  Stage two freezes those hyperparameters
and maximizes the marginal posterior of (theta*, discrepancy GP, lambda)
over the joint data vector, with the two constant means profiled out in
closed form.  No MCMC is involved anywhere.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from threadpoolctl import threadpool_limits

from .data import FusionDataset, Scaler, SourceDataset
from .kernels import OMEGA_BOUNDS
from .train import TrainConfig, fit_lmgp, space_filling_starts

__all__ = [
    "GpParams",
    "DiscrepancyParams",
    "KohData",
    "KohModel",
    "koh_assemble_joint",
    "koh_profile_beta",
    "koh_objective",
    "koh_fit",
]

LOG10_SIGMA2_BOUNDS = (-8.0, 1.0)
LOG10_LAMBDA_BOUNDS = (-10.0, 1.0)


@dataclass(frozen=True)
class GpParams:
    """Low-fidelity GP hyperparameters over the joint (x, theta) inputs."""

    omega: np.ndarray
    nugget: float
    sigma2: float

    def to_dict(self):
        return {"omega": self.omega.tolist(), "nugget": self.nugget, "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["omega"], dtype=float), float(d["nugget"]), float(d["sigma2"]))


@dataclass(frozen=True)
class DiscrepancyParams:
    """Discrepancy GP hyperparameters over x only."""

    omega: np.ndarray
    sigma2: float

    def to_dict(self):
        return {"omega": self.omega.tolist(), "sigma2": self.sigma2}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["omega"], dtype=float), float(d["sigma2"]))


def _gauss_cross(a, b, omega):
    """Gaussian correlation matrix between row sets a (n,d) and b (m,d)."""
    w = 10.0 ** np.asarray(omega, dtype=float)
    d2 = (a[:, None, :] - b[None, :, :]) ** 2
    return np.exp(-np.tensordot(d2, w, axes=([2], [0])))


class KohData:
    """Two-source data in a shared scaled coordinate system.

    Inputs are scaled to [0, 1] with pooled min/max over both sources,
    calibration columns with the sampling bounds, and the stacked output
    vector d = [y_l; y_h] is standardized with its pooled moments.
    """

    def __init__(self, low: SourceDataset, high: SourceDataset, theta_bounds=None):
        if low.calib_inputs is None:
            raise ValueError("the low-fidelity source must carry calibration columns")
        if high.calib_inputs is not None:
            raise ValueError("the high-fidelity source must not carry calibration columns")
        if low.d_x != high.d_x:
            raise ValueError("sources disagree on the input dimension")
        x_all = np.vstack([low.inputs, high.inputs])
        y_all = np.concatenate([low.outputs, high.outputs])
        y_std = float(np.std(y_all))
        if y_std <= 0.0:
            raise ValueError("degenerate output variance")
        if theta_bounds is None:
            th_min = low.calib_inputs.min(axis=0)
            th_max = low.calib_inputs.max(axis=0)
        else:
            th_min = np.asarray(theta_bounds[0], dtype=float)
            th_max = np.asarray(theta_bounds[1], dtype=float)
        self.scaler = Scaler(
            x_min=x_all.min(axis=0), x_max=x_all.max(axis=0),
            y_mean=float(np.mean(y_all)), y_std=y_std,
            theta_min=th_min, theta_max=th_max,
        )
        self.low_label = low.label
        self.high_label = high.label
        self.d_x = low.d_x
        self.d_theta = low.d_theta
        self.Xl = self.scaler.scale_x(low.inputs)
        self.Tl = self.scaler.scale_theta(low.calib_inputs)
        self.Ul = np.hstack([self.Xl, self.Tl])
        self.Xh = self.scaler.scale_x(high.inputs)
        self.p = low.n
        self.q = high.n
        self.d = self.scaler.scale_y(y_all)
        self.H = np.zeros((self.p + self.q, 2))
        self.H[:, 0] = 1.0
        self.H[self.p:, 1] = 1.0


def _joint_covariance(data: KohData, theta_star, psi1: GpParams,
                      psi2: DiscrepancyParams, lam: float) -> np.ndarray:
    """Covariance of d = [y_l; y_h] at a calibration setting (scaled units).

    The low-fidelity block carries the stage-one nugget (its observation
    noise); the high-fidelity block adds the discrepancy GP and lambda.
    """
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    Uh = np.hstack([data.Xh, np.tile(theta_star, (data.q, 1))])
    V = np.empty((data.p + data.q, data.p + data.q))
    Vll = psi1.sigma2 * _gauss_cross(data.Ul, data.Ul, psi1.omega)
    Vll[np.diag_indices(data.p)] += psi1.sigma2 * psi1.nugget
    V[: data.p, : data.p] = Vll
    if data.q:
        C = psi1.sigma2 * _gauss_cross(data.Ul, Uh, psi1.omega)
        Vhh = psi1.sigma2 * _gauss_cross(Uh, Uh, psi1.omega)
        Vhh += psi2.sigma2 * _gauss_cross(data.Xh, data.Xh, psi2.omega)
        Vhh[np.diag_indices(data.q)] += lam
        V[: data.p, data.p:] = C
        V[data.p:, : data.p] = C.T
        V[data.p:, data.p:] = Vhh
    return V


def koh_assemble_joint(low, high, theta_star, psi1, psi2, lam, theta_bounds=None):
    """Mean design H and joint covariance V_d for the stacked data vector.

    Accepts natural-unit sources; scaling is rebuilt from them (plus the
    optional explicit calibration bounds) and ``theta_star`` is given in
    natural units.  Returns (H, V_d); the stacked standardized outputs are
    available as ``KohData(low, high).d``.
    """
    data = KohData(low, high, theta_bounds)
    th = data.scaler.scale_theta(np.atleast_2d(theta_star), warn_out_of_bounds=False)[0]
    V = _joint_covariance(data, th, psi1, psi2, lam)
    return data.H, V


def koh_profile_beta(V_d, H, d):
    """Profiled constant means: beta = W H' V^-1 d with W = (H' V^-1 H)^-1."""
    L = cholesky(np.asarray(V_d, dtype=float), lower=True)
    return _profile_beta_chol(L, np.asarray(H, dtype=float), np.asarray(d, dtype=float))[:2]


def _profile_beta_chol(L, H, d):
    Lh = solve_triangular(L, H, lower=True)
    Ld = solve_triangular(L, d, lower=True)
    Winv = Lh.T @ Lh
    det = Winv[0, 0] * Winv[1, 1] - Winv[0, 1] * Winv[1, 0]
    if det <= 0.0 or not np.isfinite(det):
        raise np.linalg.LinAlgError("singular profiled-mean system (no high-fidelity rows?)")
    W = np.array([[Winv[1, 1], -Winv[0, 1]], [-Winv[1, 0], Winv[0, 0]]]) / det
    beta = W @ (Lh.T @ Ld)
    return beta, W, Lh, Ld


def _negative_log_posterior(data: KohData, theta_star, psi1, psi2, lam) -> float:
    """Negative log marginal posterior with the means integrated out.

    Up to constants: 0.5 [ log|V_d| + log|H' V^-1 H| + res' V^-1 res ].
    The calibration prior is uniform over the sampling range, so points
    outside the scaled unit box are infeasible.
    """
    theta_star = np.asarray(theta_star, dtype=float).ravel()
    if np.any(theta_star < 0.0) or np.any(theta_star > 1.0):
        return np.inf
    V = _joint_covariance(data, theta_star, psi1, psi2, lam)
    try:
        L = cholesky(V, lower=True)
        beta, _, Lh, Ld = _profile_beta_chol(L, data.H, data.d)
    except np.linalg.LinAlgError:
        return np.inf
    res = Ld - Lh @ beta
    logdet_V = 2.0 * float(np.sum(np.log(np.diag(L))))
    sign, logdet_W = np.linalg.slogdet(Lh.T @ Lh)
    if sign <= 0:
        return np.inf
    return 0.5 * (logdet_V + logdet_W + float(res @ res))


def koh_objective(low, high, theta_star, psi1, psi2, lam, theta_bounds=None) -> float:
    """Stage-two objective at a natural-unit calibration setting."""
    data = KohData(low, high, theta_bounds)
    th = data.scaler.scale_theta(np.atleast_2d(theta_star), warn_out_of_bounds=False)[0]
    return _negative_log_posterior(data, th, psi1, psi2, lam)


class KohModel:
    """Fitted two-source calibration model."""

    def __init__(self, data: KohData, psi1: GpParams, psi2: DiscrepancyParams,
                 lam: float, theta_star: np.ndarray, objective: float):
        self.data = data
        self.psi1 = psi1
        self.psi2 = psi2
        self.lam = lam
        self.theta_star = np.asarray(theta_star, dtype=float)  # scaled units
        self.objective = float(objective)
        self._build_cache()

    def _build_cache(self):
        V = _joint_covariance(self.data, self.theta_star, self.psi1, self.psi2, self.lam)
        self._L = cholesky(V, lower=True)
        beta, W, Lh, Ld = _profile_beta_chol(self._L, self.data.H, self.data.d)
        self.beta = beta
        self._W = W
        res = self.data.d - self.data.H @ beta
        self._alpha = cho_solve((self._L, True), res)
        self._Vinv_H = cho_solve((self._L, True), self.data.H)

    @property
    def beta1(self) -> float:
        return float(self.beta[0])

    @property
    def beta2(self) -> float:
        return float(self.beta[1])

    @property
    def theta_star_hat(self) -> np.ndarray:
        """Calibration estimate in natural units."""
        return self.data.scaler.unscale_theta(self.theta_star[None, :])[0]

    def noise_variance(self) -> float:
        """Estimated high-fidelity observation noise, natural units."""
        return float(self.lam * self.data.scaler.y_std ** 2)

    def predict_high(self, x, include_noise=False):
        """Mean and variance of the calibrated-plus-discrepancy response.

        Conditions the joint Gaussian of the training vector and the query
        value y_l(x, theta_hat) + d(x) on the observed data, with the
        profiled-mean correction included.  Natural output units.
        """
        data = self.data
        xq = data.scaler.scale_x(np.atleast_2d(np.asarray(x, dtype=float)),
                                 warn_out_of_bounds=False)
        m = xq.shape[0]
        Uq = np.hstack([xq, np.tile(self.theta_star, (m, 1))])
        c = np.empty((data.p + data.q, m))
        c[: data.p] = self.psi1.sigma2 * _gauss_cross(data.Ul, Uq, self.psi1.omega)
        if data.q:
            Uh = np.hstack([data.Xh, np.tile(self.theta_star, (data.q, 1))])
            c[data.p:] = self.psi1.sigma2 * _gauss_cross(Uh, Uq, self.psi1.omega)
            c[data.p:] += self.psi2.sigma2 * _gauss_cross(data.Xh, xq, self.psi2.omega)
        hq = np.ones((m, 2))
        mean_scaled = hq @ self.beta + c.T @ self._alpha
        v = solve_triangular(self._L, c, lower=True)
        prior = self.psi1.sigma2 + self.psi2.sigma2
        u = hq.T - self.data.H.T @ cho_solve((self._L, True), c)  # (2, m)
        var_scaled = prior - np.einsum("ij,ij->j", v, v) + np.einsum("ji,jk,ki->i", u, self._W, u)
        var_scaled = np.maximum(var_scaled, 0.0)
        if include_noise:
            var_scaled = var_scaled + self.lam
        mean = data.scaler.unscale_y(mean_scaled)
        var = var_scaled * data.scaler.y_std ** 2
        if m == 1:
            return float(mean[0]), float(var[0])
        return mean, var

    def to_dict(self) -> dict:
        return {
            "format": "koh-model",
            "version": 1,
            "psi1": self.psi1.to_dict(),
            "psi2": self.psi2.to_dict(),
            "lambda": self.lam,
            "theta_star": self.theta_star.tolist(),
            "objective": self.objective,
            "beta": self.beta.tolist(),
        }


def koh_fit(low: SourceDataset, high: SourceDataset, config: TrainConfig | None = None,
            theta_bounds=None) -> KohModel:
    """Two-stage point-estimate fit.

    Stage one runs a standard GP maximum-likelihood fit on the low-fidelity
    data alone (inputs and calibration columns jointly).  Stage two freezes
    those hyperparameters and minimizes the marginal posterior over the
    calibration setting, the discrepancy GP, and the noise variance, with
    multistart L-BFGS-B and numerical gradients.
    """
    if config is None:
        config = TrainConfig()
    data = KohData(low, high, theta_bounds)

    # stage one: GP on the low-fidelity data in the shared scaled coordinates
    lofi = FusionDataset(
        x=data.Ul,
        t=np.zeros((data.p, 1), dtype=int),
        y=data.d[: data.p],
        scaler=data.scaler,
        source_registry=((low.label, (0,)),),
        level_counts=(1,),
        theta=None,
    )
    stage1 = fit_lmgp(lofi, config)
    psi1 = GpParams(
        omega=stage1.params.omega,
        nugget=stage1.params.nugget,
        sigma2=float(stage1.params.sigma2_hat),
    )

    # stage two: (theta*, psi2, lambda) against the joint data
    d_theta, d_x = data.d_theta, data.d_x
    bounds = (
        [(0.0, 1.0)] * d_theta
        + [OMEGA_BOUNDS] * d_x
        + [LOG10_SIGMA2_BOUNDS, LOG10_LAMBDA_BOUNDS]
    )

    def unpack(vec):
        theta = vec[:d_theta]
        omega2 = vec[d_theta: d_theta + d_x]
        sigma2 = 10.0 ** vec[d_theta + d_x]
        lam = 10.0 ** vec[d_theta + d_x + 1]
        return theta, DiscrepancyParams(omega=omega2, sigma2=sigma2), lam

    def objective(vec):
        theta, psi2, lam = unpack(vec)
        val = _negative_log_posterior(data, theta, psi1, psi2, lam)
        return min(val, 1e25)

    starts = space_filling_starts(bounds, config.n_starts, config.seed)
    best = None
    with threadpool_limits(limits=1):
        for idx in range(config.n_starts):
            res = minimize(objective, starts[idx], method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": config.max_iterations, "ftol": config.tol})
            if not np.isfinite(res.fun) or res.fun >= 1e25:
                continue
            if best is None or res.fun < best.fun - 1e-12:
                best = res
        if best is None:
            raise RuntimeError("every stage-two restart ended at an infeasible point")
        polished = minimize(objective, best.x, method="L-BFGS-B", bounds=bounds,
                            options={"maxiter": config.max_iterations, "ftol": 1e-14})
        if np.isfinite(polished.fun) and polished.fun <= best.fun:
            best = polished

    theta, psi2, lam = unpack(best.x)
    return KohModel(data, psi1, psi2, lam, theta, best.fun)
