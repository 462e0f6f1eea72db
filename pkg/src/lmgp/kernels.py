"""Correlation functions over mixed quantitative/categorical/calibration inputs.

The quantitative part is a Gaussian (squared-exponential) correlation with
per-dimension roughness 10**omega.  Categorical source tags are one-hot
encoded and mapped through a learned matrix into a 2-D latent space; the
squared latent distance enters the exponent with unit weight, so a latent
gap of dz multiplies the correlation by exp(-dz**2).  Calibration inputs
contribute a third Gaussian factor; rows lacking calibration values use
the current point estimate instead.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import cholesky

__all__ = [
    "encode_prior",
    "map_latent",
    "latent_positions",
    "gaussian_correlation",
    "mixed_correlation",
    "calibration_correlation",
    "build_correlation_matrix",
]

#: Box constraint applied to every entry of the latent map matrix.
LATENT_ENTRY_BOUND = 3.0

#: Roughness exponents are confined to this open interval for stability.
OMEGA_BOUNDS = (-10.0, 6.0)

#: The nugget is trained on a base-10 log scale over this interval.
LOG10_NUGGET_BOUNDS = (-8.0, 0.0)


def encode_prior(t, level_counts) -> np.ndarray:
    """One-hot encode a combination of categorical levels.

    Concatenates one block per variable; block i has length
    ``level_counts[i]`` with a single 1 at position ``t[i]``.

    >>> encode_prior([1, 1], (2, 3))
    array([0., 1., 0., 1., 0.])
    """
    t = np.asarray(t, dtype=int).ravel()
    level_counts = tuple(int(m) for m in level_counts)
    if t.shape[0] != len(level_counts):
        raise ValueError(f"expected {len(level_counts)} level indices, got {t.shape[0]}")
    out = np.zeros(sum(level_counts))
    offset = 0
    for ti, mi in zip(t, level_counts):
        if not 0 <= ti < mi:
            raise ValueError(f"level index {ti} out of range for {mi} levels")
        out[offset + ti] = 1.0
        offset += mi
    return out


def map_latent(t, latent_map, level_counts) -> np.ndarray:
    """Latent position of a categorical combination: one-hot(t) @ A.

    Equivalently the sum of the selected rows of the map matrix, one row
    per categorical variable.
    """
    zeta = encode_prior(t, level_counts)
    latent_map = np.asarray(latent_map, dtype=float)
    if latent_map.shape[0] != zeta.shape[0]:
        raise ValueError(
            f"latent map has {latent_map.shape[0]} rows, encoding has length {zeta.shape[0]}"
        )
    return zeta @ latent_map


def latent_positions(combos, latent_map, level_counts) -> np.ndarray:
    """Stack of latent positions for a list of level combinations."""
    return np.vstack([map_latent(c, latent_map, level_counts) for c in combos])


def gaussian_correlation(x, x2, omega) -> float:
    """exp(-sum_i 10**omega_i * (x_i - x2_i)**2); equals 1 iff x == x2."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    omega = np.asarray(omega, dtype=float).ravel()
    if not x.shape == x2.shape == omega.shape:
        raise ValueError("x, x2 and omega must have equal lengths")
    return float(np.exp(-np.sum(10.0 ** omega * (x - x2) ** 2)))


def mixed_correlation(x, t, x2, t2, omega, latent_map, level_counts) -> float:
    """Product of the latent factor exp(-||z - z2||^2) and the Gaussian part."""
    z = map_latent(t, latent_map, level_counts)
    z2 = map_latent(t2, latent_map, level_counts)
    dz2 = float(np.sum((z - z2) ** 2))
    return float(np.exp(-dz2)) * gaussian_correlation(x, x2, omega)


def calibration_correlation(x, t, theta, x2, t2, theta2, omega, omega_theta,
                            latent_map, level_counts, theta_hat=None) -> float:
    """Mixed correlation with a third factor over calibration inputs.

    NaN entries in ``theta``/``theta2`` (high-fidelity rows) are replaced
    by the point estimate ``theta_hat``.  When both rows are replaced the
    factor is exactly 1 and is skipped.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    theta2 = np.asarray(theta2, dtype=float).ravel()
    omega_theta = np.asarray(omega_theta, dtype=float).ravel()
    miss1 = bool(np.isnan(theta).any())
    miss2 = bool(np.isnan(theta2).any())
    base = mixed_correlation(x, t, x2, t2, omega, latent_map, level_counts)
    if miss1 and miss2:
        return base
    if miss1 or miss2:
        if theta_hat is None:
            raise ValueError("theta_hat is required when a row has missing calibration values")
        theta_hat = np.asarray(theta_hat, dtype=float).ravel()
        if miss1:
            theta = theta_hat
        if miss2:
            theta2 = theta_hat
    dth = theta - theta2
    return base * float(np.exp(-np.sum(10.0 ** omega_theta * dth ** 2)))


def pairwise_sqdist_per_dim(a, b=None) -> np.ndarray:
    """Per-dimension squared differences, shape (d, n, m).

    Constant across hyperparameter values, so callers cache the result.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = a if b is None else np.atleast_2d(np.asarray(b, dtype=float))
    diff = a.T[:, :, None] - b.T[:, None, :]
    return diff ** 2


def correlation_matrix_parts(dx2, omega, z_rows=None, dtheta2=None, omega_theta=None):
    """Correlation matrix from cached squared-difference tensors.

    Parameters
    ----------
    dx2 : ndarray (d_x, n, m)
        Squared input differences per dimension.
    omega : ndarray (d_x,)
    z_rows : tuple (za, zb) of latent positions, optional
    dtheta2 : ndarray (d_theta, n, m), optional
        Squared calibration differences (missing entries already filled).
    omega_theta : ndarray (d_theta,), optional
    """
    expo = np.tensordot(10.0 ** np.asarray(omega, dtype=float), dx2, axes=1)
    if z_rows is not None:
        za, zb = z_rows
        dz = za[:, None, :] - zb[None, :, :]
        expo = expo + np.einsum("ijk,ijk->ij", dz, dz)
    if dtheta2 is not None:
        expo = expo + np.tensordot(10.0 ** np.asarray(omega_theta, dtype=float), dtheta2, axes=1)
    return np.exp(-expo)


def build_correlation_matrix(dataset, omega, latent_map=None, nugget=0.0,
                             omega_theta=None, theta_hat=None,
                             check_positive_definite=False) -> np.ndarray:
    """Nugget-regularized training correlation matrix R + delta*I.

    Parameters mirror the kernel: roughness exponents for the inputs, the
    latent map for the source tags, and for calibration problems the
    calibration roughness and point estimate used to fill missing rows.

    With ``check_positive_definite`` a Cholesky factorization is attempted
    and failure raises ``np.linalg.LinAlgError``; callers reacting to the
    failure should raise the nugget or reject the hyperparameters.
    """
    n = dataset.n
    dx2 = pairwise_sqdist_per_dim(dataset.x)
    z_rows = None
    if latent_map is not None and dataset.n_latent_rows > 1:
        latent_map = np.asarray(latent_map, dtype=float)
        z = np.vstack([map_latent(row, latent_map, dataset.level_counts) for row in dataset.t])
        z_rows = (z, z)
    dtheta2 = None
    if dataset.has_calibration:
        if omega_theta is None:
            raise ValueError("omega_theta is required for calibration datasets")
        theta = dataset.theta.copy()
        mask = dataset.missing_theta_mask()
        if mask.any():
            if theta_hat is None:
                raise ValueError("theta_hat is required when rows have missing calibration values")
            theta[mask] = np.asarray(theta_hat, dtype=float)
        dtheta2 = pairwise_sqdist_per_dim(theta)
    R = correlation_matrix_parts(dx2, omega, z_rows, dtheta2, omega_theta)
    R[np.diag_indices(n)] += float(nugget)
    if check_positive_definite:
        cholesky(R, lower=True)  # raises LinAlgError when ill-conditioned
    return R
