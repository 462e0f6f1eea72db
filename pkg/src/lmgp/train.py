"""Maximum-likelihood fitting of the fused Gaussian process.

The constant-mean coefficients and the process variance have closed-form
optima given the kernel hyperparameters, so the optimization runs over the
reduced objective

    L = n * log(sigma2_hat) + log det(R + delta*I)

with box constraints on the roughness exponents, the latent map entries,
the log-nugget, and (for calibration) the calibration roughness and the
calibration point estimate.  Minimization uses L-BFGS-B restarted from a
seeded space-filling design over the hyperparameter box; gradients are
analytic by default with a central-difference fallback.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.linalg.lapack import dpotrf
from scipy.optimize import minimize
from scipy.stats import qmc
from threadpoolctl import threadpool_limits

from .data import FusionDataset
from .kernels import (
    LATENT_ENTRY_BOUND,
    LOG10_NUGGET_BOUNDS,
    OMEGA_BOUNDS,
    latent_positions,
    pairwise_sqdist_per_dim,
)

__all__ = [
    "LmgpHyperParams",
    "TrainConfig",
    "FitResult",
    "profile_beta",
    "profile_sigma2",
    "objective_L",
    "gradient_L",
    "fit_lmgp",
    "canonicalize_latent",
]

#: Search box for the calibration estimate, in scaled units (the sampling
#: range maps to [0, 1]; the search deliberately extends beyond it).
THETA_HAT_BOUNDS = (-2.0, 3.0)

_LN10 = np.log(10.0)
_BIG = 1e25  # finite stand-in for +inf inside the line search


@dataclass(frozen=True)
class LmgpHyperParams:
    """Point estimates of every hyperparameter of the fused GP.

    ``beta_hat`` and ``sigma2_hat`` are profiled quantities, recomputed
    from the others rather than optimized independently.
    """

    omega: np.ndarray
    nugget: float
    latent_map: np.ndarray | None = None
    omega_theta: np.ndarray | None = None
    theta_hat: np.ndarray | None = None
    beta_hat: np.ndarray | None = None
    sigma2_hat: float | None = None

    def to_dict(self) -> dict:
        out = {"omega": self.omega.tolist(), "nugget": self.nugget}
        if self.latent_map is not None:
            out["latent_map"] = self.latent_map.tolist()
        if self.omega_theta is not None:
            out["omega_theta"] = self.omega_theta.tolist()
        if self.theta_hat is not None:
            out["theta_hat"] = self.theta_hat.tolist()
        if self.beta_hat is not None:
            out["beta_hat"] = self.beta_hat.tolist()
        if self.sigma2_hat is not None:
            out["sigma2_hat"] = self.sigma2_hat
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "LmgpHyperParams":
        arr = lambda k: np.asarray(d[k], dtype=float) if k in d else None
        return cls(
            omega=np.asarray(d["omega"], dtype=float),
            nugget=float(d["nugget"]),
            latent_map=arr("latent_map"),
            omega_theta=arr("omega_theta"),
            theta_hat=arr("theta_hat"),
            beta_hat=arr("beta_hat"),
            sigma2_hat=float(d["sigma2_hat"]) if "sigma2_hat" in d else None,
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimizer settings for one fit."""

    n_starts: int = 24
    max_iterations: int = 200
    gradient_mode: str = "analytic"  # or "central-difference"
    tol: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.n_starts < 1:
            raise ValueError("n_starts must be at least 1")
        if self.tol <= 0:
            raise ValueError("tolerance must be positive")
        if self.gradient_mode not in ("analytic", "central-difference"):
            raise ValueError(f"unknown gradient mode {self.gradient_mode!r}")

    def to_dict(self) -> dict:
        return {
            "n_starts": self.n_starts,
            "max_iterations": self.max_iterations,
            "gradient_mode": self.gradient_mode,
            "tol": self.tol,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class FitResult:
    """Frozen outcome of one multistart fit."""

    params: LmgpHyperParams
    objective: float
    n_starts_converged: int
    canonical_positions: np.ndarray


# ---------------------------------------------------------------------------
# Profiled quantities
# ---------------------------------------------------------------------------

def profile_beta(R_delta, F, y) -> np.ndarray:
    """Generalized least squares coefficients [F'R^-1 F]^-1 [F'R^-1 y].

    Solved through the Cholesky factor; no explicit inverse is formed.
    """
    L = cholesky(np.asarray(R_delta, dtype=float), lower=True)
    return _profile_beta_chol(L, np.atleast_2d(F), np.asarray(y, dtype=float))[0]


def profile_sigma2(R_delta, F, y, beta_hat) -> float:
    """Profiled process variance (1/n) * res' R^-1 res with res = y - F beta."""
    y = np.asarray(y, dtype=float).ravel()
    res = y - np.atleast_2d(F) @ np.asarray(beta_hat, dtype=float).ravel()
    L = cholesky(np.asarray(R_delta, dtype=float), lower=True)
    w = solve_triangular(L, res, lower=True)
    return float(w @ w) / y.shape[0]


def _profile_beta_chol(L, F, y):
    """GLS through an existing Cholesky factor.

    Returns (beta_hat, Lf, Ly) where Lf = L^-1 F and Ly = L^-1 y.
    """
    Lf = solve_triangular(L, F, lower=True, check_finite=False)
    Ly = solve_triangular(L, y, lower=True, check_finite=False)
    G = Lf.T @ Lf
    if F.shape[1] == 1:
        g = float(G[0, 0])
        if g <= 0.0 or not np.isfinite(g):
            raise np.linalg.LinAlgError("rank-deficient basis")
        beta = np.array([float(Lf[:, 0] @ Ly) / g])
    else:
        beta = np.linalg.solve(G, Lf.T @ Ly)
    return beta, Lf, Ly


# ---------------------------------------------------------------------------
# Likelihood workspace: caches everything that does not move during a fit
# ---------------------------------------------------------------------------

class LikelihoodProblem:
    """Reduced-likelihood evaluation for one dataset.

    Free parameters are packed into a flat vector in the order
    [omega, latent map entries (row-major), log10 nugget,
    omega_theta, theta_hat]; the latent block is absent for
    single-source datasets and the calibration blocks are absent
    for plain fusion.
    """

    def __init__(self, dataset: FusionDataset):
        self.dataset = dataset
        n = dataset.n
        self.n = n
        self.dx2 = pairwise_sqdist_per_dim(dataset.x)
        self.y = dataset.y
        self.F = np.ones((n, 1))

        self.latent_active = dataset.n_latent_rows > 1
        self.n_latent_rows = dataset.n_latent_rows
        # row i of the map matrix indexed by sample: one entry per variable
        offsets = np.concatenate([[0], np.cumsum(dataset.level_counts)[:-1]])
        self.map_row_index = dataset.t + offsets[None, :]

        self.calibrated = dataset.has_calibration
        if self.calibrated:
            self.theta_base = dataset.theta
            self.missing = dataset.missing_theta_mask()
            self.d_theta = dataset.d_theta
        else:
            self.theta_base = None
            self.missing = None
            self.d_theta = 0

        # packing layout
        d_x = dataset.d_x
        sizes = [("omega", d_x)]
        if self.latent_active:
            sizes.append(("latent", 2 * self.n_latent_rows))
        sizes.append(("log10_nugget", 1))
        if self.calibrated:
            sizes.append(("omega_theta", self.d_theta))
            sizes.append(("theta_hat", self.d_theta))
        self.slices = {}
        lo = 0
        for name, size in sizes:
            self.slices[name] = slice(lo, lo + size)
            lo += size
        self.n_free = lo

        bounds = [OMEGA_BOUNDS] * d_x
        if self.latent_active:
            bounds += [(-LATENT_ENTRY_BOUND, LATENT_ENTRY_BOUND)] * (2 * self.n_latent_rows)
        bounds += [LOG10_NUGGET_BOUNDS]
        if self.calibrated:
            bounds += [OMEGA_BOUNDS] * self.d_theta
            bounds += [THETA_HAT_BOUNDS] * self.d_theta
        self.bounds = bounds

    # -- packing ---------------------------------------------------------

    def pack(self, params: LmgpHyperParams) -> np.ndarray:
        vec = np.empty(self.n_free)
        vec[self.slices["omega"]] = params.omega
        if self.latent_active:
            vec[self.slices["latent"]] = params.latent_map.ravel()
        vec[self.slices["log10_nugget"]] = np.log10(params.nugget)
        if self.calibrated:
            vec[self.slices["omega_theta"]] = params.omega_theta
            vec[self.slices["theta_hat"]] = params.theta_hat
        return vec

    def unpack(self, vec) -> LmgpHyperParams:
        vec = np.asarray(vec, dtype=float)
        latent = None
        if self.latent_active:
            latent = vec[self.slices["latent"]].reshape(self.n_latent_rows, 2)
        omega_theta = theta_hat = None
        if self.calibrated:
            omega_theta = vec[self.slices["omega_theta"]].copy()
            theta_hat = vec[self.slices["theta_hat"]].copy()
        return LmgpHyperParams(
            omega=vec[self.slices["omega"]].copy(),
            nugget=float(10.0 ** vec[self.slices["log10_nugget"]][0]),
            latent_map=latent,
            omega_theta=omega_theta,
            theta_hat=theta_hat,
        )

    # -- kernel pieces ----------------------------------------------------

    def _correlation(self, vec):
        """R + delta*I plus the intermediates reused by the gradient."""
        omega = vec[self.slices["omega"]]
        expo = np.tensordot(10.0 ** omega, self.dx2, axes=1)
        Z = None
        if self.latent_active:
            A = vec[self.slices["latent"]].reshape(self.n_latent_rows, 2)
            Z = A[self.map_row_index].sum(axis=1)  # (n, 2)
            dz = Z[:, None, :] - Z[None, :, :]
            expo += np.einsum("ijk,ijk->ij", dz, dz)
        theta_filled = None
        if self.calibrated:
            omega_theta = vec[self.slices["omega_theta"]]
            theta_hat = vec[self.slices["theta_hat"]]
            theta_filled = self.theta_base.copy()
            theta_filled[self.missing] = theta_hat
            dth = theta_filled.T[:, :, None] - theta_filled.T[:, None, :]
            expo += np.tensordot(10.0 ** omega_theta, dth ** 2, axes=1)
        R = np.exp(-expo)
        delta = float(10.0 ** vec[self.slices["log10_nugget"]][0])
        R_delta = R.copy()
        R_delta[np.diag_indices(self.n)] += delta
        return R_delta, Z, theta_filled, delta

    def _gls(self, R_delta):
        L, info = dpotrf(R_delta, lower=1)
        if info != 0:
            raise np.linalg.LinAlgError(f"Cholesky factorization failed (info={info})")
        beta, Lf, Ly = _profile_beta_chol(L, self.F, self.y)
        w = Ly - Lf @ beta
        sigma2 = float(w @ w) / self.n
        logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
        return L, beta, w, sigma2, logdet

    # -- objective and gradient --------------------------------------------

    def value(self, vec) -> float:
        try:
            R_delta, _, _, _ = self._correlation(vec)
            _, _, _, sigma2, logdet = self._gls(R_delta)
        except np.linalg.LinAlgError:
            return np.inf
        if sigma2 <= 0.0 or not np.isfinite(sigma2):
            return np.inf
        return self.n * np.log(sigma2) + logdet

    def value_and_grad(self, vec):
        try:
            R_delta, Z, theta_filled, delta = self._correlation(vec)
            L, beta, w, sigma2, logdet = self._gls(R_delta)
        except np.linalg.LinAlgError:
            return np.inf, np.zeros(self.n_free)
        if sigma2 <= 0.0 or not np.isfinite(sigma2):
            return np.inf, np.zeros(self.n_free)
        value = self.n * np.log(sigma2) + logdet

        # dL/dp = sum_ij K_ij dR_ij/dp with K = R^-1 - alpha alpha' / sigma2
        alpha = solve_triangular(L.T, w, lower=False, check_finite=False)
        Rinv = cho_solve((L, True), np.eye(self.n), check_finite=False)
        K = Rinv - np.outer(alpha, alpha) / sigma2
        E = K * R_delta  # diagonals never enter the pairwise contractions

        grad = np.zeros(self.n_free)
        omega = vec[self.slices["omega"]]
        gw = np.empty(len(omega))
        for k in range(len(omega)):
            gw[k] = -_LN10 * (10.0 ** omega[k]) * np.vdot(E, self.dx2[k])
        grad[self.slices["omega"]] = gw

        e_row = E.sum(axis=1)
        if self.latent_active:
            gA = np.zeros((self.n_latent_rows, 2))
            for s in (0, 1):
                v = Z[:, s] * e_row - E @ Z[:, s]
                np.add.at(gA[:, s], self.map_row_index.ravel(),
                          np.repeat(v, self.map_row_index.shape[1]))
            grad[self.slices["latent"]] = (-4.0 * gA).ravel()

        grad[self.slices["log10_nugget"]] = _LN10 * delta * np.trace(K)

        if self.calibrated:
            omega_theta = vec[self.slices["omega_theta"]]
            gothe = np.empty(self.d_theta)
            gth = np.empty(self.d_theta)
            for k in range(self.d_theta):
                col = theta_filled[:, k]
                dthk2 = (col[:, None] - col[None, :]) ** 2
                gothe[k] = -_LN10 * (10.0 ** omega_theta[k]) * np.vdot(E, dthk2)
                t_row = col * e_row - E @ col
                gth[k] = -4.0 * (10.0 ** omega_theta[k]) * float(t_row[self.missing].sum())
            grad[self.slices["omega_theta"]] = gothe
            grad[self.slices["theta_hat"]] = gth

        return value, grad

    def grad_central_difference(self, vec, step=1e-6) -> np.ndarray:
        """Finite-difference gradient on the packed (scaled) parameters."""
        vec = np.asarray(vec, dtype=float)
        grad = np.empty(self.n_free)
        for i in range(self.n_free):
            up = vec.copy()
            dn = vec.copy()
            up[i] += step
            dn[i] -= step
            grad[i] = (self.value(up) - self.value(dn)) / (2.0 * step)
        return grad

    def profiled(self, vec):
        """beta_hat and sigma2_hat at a parameter vector."""
        R_delta, _, _, _ = self._correlation(vec)
        _, beta, _, sigma2, _ = self._gls(R_delta)
        return beta, sigma2


# ---------------------------------------------------------------------------
# Public objective / gradient wrappers
# ---------------------------------------------------------------------------

def _vector_from_parts(problem, omega, latent_map, nugget, theta_hat, omega_theta):
    params = LmgpHyperParams(
        omega=np.asarray(omega, dtype=float),
        nugget=float(nugget),
        latent_map=None if latent_map is None else np.asarray(latent_map, dtype=float),
        omega_theta=None if omega_theta is None else np.asarray(omega_theta, dtype=float),
        theta_hat=None if theta_hat is None else np.asarray(theta_hat, dtype=float),
    )
    return problem.pack(params)


def objective_L(dataset, omega, latent_map=None, nugget=1e-8,
                theta_hat=None, omega_theta=None) -> float:
    """Reduced log-likelihood objective; +inf when the factorization fails."""
    problem = LikelihoodProblem(dataset)
    vec = _vector_from_parts(problem, omega, latent_map, nugget, theta_hat, omega_theta)
    return problem.value(vec)


def gradient_L(dataset, omega, latent_map=None, nugget=1e-8,
               theta_hat=None, omega_theta=None, mode="analytic") -> np.ndarray:
    """Gradient of the objective over the packed free parameters.

    Packing order: omega, latent map entries (row-major), log10 nugget,
    omega_theta, theta_hat.
    """
    problem = LikelihoodProblem(dataset)
    vec = _vector_from_parts(problem, omega, latent_map, nugget, theta_hat, omega_theta)
    if mode == "analytic":
        value, grad = problem.value_and_grad(vec)
        if not np.isfinite(value):
            raise ValueError("objective is not finite at the requested point")
        return grad
    if mode == "central-difference":
        return problem.grad_central_difference(vec)
    raise ValueError(f"unknown gradient mode {mode!r}")


# ---------------------------------------------------------------------------
# Multistart fitting
# ---------------------------------------------------------------------------

def space_filling_starts(bounds, n_starts, seed) -> np.ndarray:
    """Scrambled low-discrepancy start points inside the hyperparameter box."""
    bounds = np.asarray(bounds, dtype=float)
    d = bounds.shape[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # n_starts need not be a power of two
        sampler = qmc.Sobol(d, scramble=True, seed=np.random.default_rng(seed))
        unit = sampler.random(n_starts)
    return bounds[:, 0] + unit * (bounds[:, 1] - bounds[:, 0])


def fit_lmgp(dataset: FusionDataset, config: TrainConfig | None = None) -> FitResult:
    """Multistart maximum-likelihood fit of all hyperparameters.

    The best converged restart wins; ties within 1e-12 go to the lowest
    restart index.  The winner is polished with tight tolerances, the
    profiled coefficients are recomputed at the optimum, and the latent
    positions of the registered sources are canonicalized.
    """
    if config is None:
        config = TrainConfig()
    if not (np.all(np.isfinite(dataset.x)) and np.all(np.isfinite(dataset.y))):
        raise ValueError("non-finite values in the training data")
    problem = LikelihoodProblem(dataset)

    if config.gradient_mode == "analytic":
        fun = problem.value_and_grad
        jac = True
    else:
        fun = problem.value
        jac = None

    def run(x0, maxiter, ftol):
        def wrapped(v):
            out = fun(v)
            if jac:
                val, g = out
                return (min(val, _BIG), g)
            return min(out, _BIG)
        return minimize(
            wrapped, x0, method="L-BFGS-B", jac=jac, bounds=problem.bounds,
            options={"maxiter": maxiter, "ftol": ftol},
        )

    starts = space_filling_starts(problem.bounds, config.n_starts, config.seed)
    best = None
    n_converged = 0
    # matrices this small run faster single-threaded; parallelism, when
    # wanted, belongs at the repetition level
    with threadpool_limits(limits=1):
        for idx in range(config.n_starts):
            res = run(starts[idx], config.max_iterations, config.tol)
            if res.success:
                n_converged += 1
            if not np.isfinite(res.fun) or res.fun >= _BIG:
                continue
            if best is None or res.fun < best.fun - 1e-12:
                best = res
        if best is None:
            raise RuntimeError("every restart ended at an infeasible point")

        polished = run(best.x, config.max_iterations, 1e-14)
        if np.isfinite(polished.fun) and polished.fun <= best.fun:
            best = polished

    params = problem.unpack(best.x)
    beta, sigma2 = problem.profiled(best.x)
    params = LmgpHyperParams(
        omega=params.omega,
        nugget=params.nugget,
        latent_map=params.latent_map,
        omega_theta=params.omega_theta,
        theta_hat=params.theta_hat,
        beta_hat=beta,
        sigma2_hat=sigma2,
    )

    combos = [combo for _, combo in dataset.source_registry]
    if params.latent_map is not None:
        raw = latent_positions(combos, params.latent_map, dataset.level_counts)
    else:
        raw = np.zeros((len(combos), 2))
    canonical = canonicalize_latent(raw)

    objective = problem.value(best.x)
    return FitResult(
        params=params,
        objective=float(objective),
        n_starts_converged=n_converged,
        canonical_positions=canonical,
    )


# ---------------------------------------------------------------------------
# Latent-space canonicalization
# ---------------------------------------------------------------------------

def canonicalize_latent(positions, anchor_order=(0, 1, 2)) -> np.ndarray:
    """Fix the rigid-motion gauge freedom of a 2-D latent configuration.

    Applies a translation, rotation, and optional reflection so that the
    first anchor sits at the origin, the second on the nonnegative first
    axis, and the third in the upper half-plane.  Pairwise distances are
    preserved exactly; anchors beyond the available points are ignored,
    and coincident or collinear anchors skip the now-vacuous steps.
    """
    P = np.array(positions, dtype=float, copy=True)
    if P.ndim != 2 or P.shape[1] != 2:
        raise ValueError("positions must be a k x 2 array")
    k = P.shape[0]
    anchors = [a for a in anchor_order if a < k]
    if len(set(anchors)) != len(anchors):
        raise ValueError("anchor indices must be distinct")
    if not anchors:
        return P

    P -= P[anchors[0]]
    if len(anchors) >= 2:
        ax, ay = P[anchors[1]]
        norm = np.hypot(ax, ay)
        if norm > 1e-12:
            c, s = ax / norm, ay / norm
            rot = np.array([[c, -s], [s, c]])  # columns rotate anchor 2 onto +x
            P = P @ rot
    if len(anchors) >= 3 and P[anchors[2], 1] < 0.0:
        P[:, 1] = -P[:, 1]
    return P
