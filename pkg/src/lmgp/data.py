"""Assembly of multi-source training data into a single mixed-variable table.

Each data source contributes quantitative inputs, an optional block of
calibration inputs (low-fidelity simulators only), and scalar outputs.
Sources are merged into one table whose rows carry a categorical source
tag; high-fidelity rows receive missing markers (NaN) in the calibration
columns.  Inputs are scaled to the unit interval and outputs are
standardized before model fitting.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

__all__ = [
    "SourceDataset",
    "EncodingStrategy",
    "Scaler",
    "FusionDataset",
    "assemble_fusion",
    "single_source_dataset",
    "read_source_csv",
    "write_source_csv",
]

#: Dimension of the learned latent space for source tags.
LATENT_DIM = 2


class EncodingStrategy(str, Enum):
    """How source identity is encoded as categorical variables.

    SINGLE uses one categorical variable with one level per source.
    PER_SOURCE uses one categorical variable per source, each with as
    many levels as there are sources; only the "diagonal" combinations
    are assigned to actual sources.
    """

    SINGLE = "single"
    PER_SOURCE = "per-source"


@dataclass(frozen=True)
class SourceDataset:
    """Raw samples from one data source, in natural units.

    Parameters
    ----------
    label : str
        Unique identifier for the source.
    inputs : ndarray, shape (n, d_x)
        Quantitative inputs shared by all sources.
    outputs : ndarray, shape (n,)
        Scalar responses.
    calib_inputs : ndarray, shape (n, d_theta), optional
        Calibration inputs.  Present only for low-fidelity sources in
        calibration problems.
    """

    label: str
    inputs: np.ndarray
    outputs: np.ndarray
    calib_inputs: np.ndarray | None = None

    def __post_init__(self):
        inputs = np.atleast_2d(np.asarray(self.inputs, dtype=float))
        outputs = np.asarray(self.outputs, dtype=float).ravel()
        object.__setattr__(self, "inputs", inputs)
        object.__setattr__(self, "outputs", outputs)
        if self.calib_inputs is not None:
            calib = np.atleast_2d(np.asarray(self.calib_inputs, dtype=float))
            object.__setattr__(self, "calib_inputs", calib)
            if calib.shape[0] != inputs.shape[0]:
                raise ValueError(
                    f"source {self.label!r}: calib_inputs has {calib.shape[0]} rows, "
                    f"inputs has {inputs.shape[0]}"
                )
        if outputs.shape[0] != inputs.shape[0]:
            raise ValueError(
                f"source {self.label!r}: outputs has {outputs.shape[0]} rows, "
                f"inputs has {inputs.shape[0]}"
            )
        if not np.all(np.isfinite(inputs)) or not np.all(np.isfinite(outputs)):
            raise ValueError(f"source {self.label!r}: non-finite inputs or outputs")
        if self.calib_inputs is not None and not np.all(np.isfinite(self.calib_inputs)):
            raise ValueError(f"source {self.label!r}: non-finite calibration inputs")

    @property
    def n(self) -> int:
        return self.inputs.shape[0]

    @property
    def d_x(self) -> int:
        return self.inputs.shape[1]

    @property
    def d_theta(self) -> int:
        return 0 if self.calib_inputs is None else self.calib_inputs.shape[1]


@dataclass(frozen=True)
class Scaler:
    """Affine maps taking inputs to [0, 1] and outputs to zero mean, unit sd.

    Round trips are exact inverses up to floating-point roundoff.
    """

    x_min: np.ndarray
    x_max: np.ndarray
    y_mean: float
    y_std: float
    theta_min: np.ndarray | None = None
    theta_max: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "x_min", np.asarray(self.x_min, dtype=float))
        object.__setattr__(self, "x_max", np.asarray(self.x_max, dtype=float))
        if np.any(self.x_max <= self.x_min):
            raise ValueError("degenerate input column: x_max must exceed x_min")
        if self.y_std <= 0.0:
            raise ValueError("degenerate output variance")
        if self.theta_min is not None:
            object.__setattr__(self, "theta_min", np.asarray(self.theta_min, dtype=float))
            object.__setattr__(self, "theta_max", np.asarray(self.theta_max, dtype=float))
            if np.any(self.theta_max <= self.theta_min):
                raise ValueError("degenerate calibration column: theta_max must exceed theta_min")

    # -- inputs ---------------------------------------------------------

    def scale_x(self, values, warn_out_of_bounds=True) -> np.ndarray:
        """Map input columns onto [0, 1].  Out-of-bounds values are allowed
        (test points may extrapolate) but trigger a warning."""
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != self.x_min.shape[0]:
            raise ValueError(
                f"expected {self.x_min.shape[0]} input columns, got {values.shape[1]}"
            )
        scaled = (values - self.x_min) / (self.x_max - self.x_min)
        if warn_out_of_bounds and (scaled.min() < -1e-12 or scaled.max() > 1 + 1e-12):
            warnings.warn("input values outside the fitted bounds; extrapolating",
                          RuntimeWarning, stacklevel=2)
        return scaled

    def unscale_x(self, scaled) -> np.ndarray:
        scaled = np.atleast_2d(np.asarray(scaled, dtype=float))
        return scaled * (self.x_max - self.x_min) + self.x_min

    # -- calibration inputs ----------------------------------------------

    def scale_theta(self, values, warn_out_of_bounds=True) -> np.ndarray:
        if self.theta_min is None:
            raise ValueError("scaler was fitted without calibration columns")
        values = np.atleast_2d(np.asarray(values, dtype=float))
        if values.shape[1] != self.theta_min.shape[0]:
            raise ValueError(
                f"expected {self.theta_min.shape[0]} calibration columns, got {values.shape[1]}"
            )
        scaled = (values - self.theta_min) / (self.theta_max - self.theta_min)
        finite = scaled[np.isfinite(scaled)]
        if warn_out_of_bounds and finite.size and (finite.min() < -1e-12 or finite.max() > 1 + 1e-12):
            warnings.warn("calibration values outside the fitted bounds",
                          RuntimeWarning, stacklevel=2)
        return scaled

    def unscale_theta(self, scaled) -> np.ndarray:
        if self.theta_min is None:
            raise ValueError("scaler was fitted without calibration columns")
        scaled = np.atleast_2d(np.asarray(scaled, dtype=float))
        return scaled * (self.theta_max - self.theta_min) + self.theta_min

    # -- outputs ----------------------------------------------------------

    def scale_y(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.y_mean) / self.y_std

    def unscale_y(self, y_scaled) -> np.ndarray:
        return np.asarray(y_scaled, dtype=float) * self.y_std + self.y_mean

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        out = {
            "x_min": self.x_min.tolist(),
            "x_max": self.x_max.tolist(),
            "y_mean": self.y_mean,
            "y_std": self.y_std,
        }
        if self.theta_min is not None:
            out["theta_min"] = self.theta_min.tolist()
            out["theta_max"] = self.theta_max.tolist()
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            x_min=np.asarray(d["x_min"], dtype=float),
            x_max=np.asarray(d["x_max"], dtype=float),
            y_mean=float(d["y_mean"]),
            y_std=float(d["y_std"]),
            theta_min=np.asarray(d["theta_min"], dtype=float) if "theta_min" in d else None,
            theta_max=np.asarray(d["theta_max"], dtype=float) if "theta_max" in d else None,
        )


@dataclass(frozen=True)
class FusionDataset:
    """Single training table holding all sources, in scaled units.

    Attributes
    ----------
    x : ndarray, shape (n, d_x)
        Inputs scaled to [0, 1] per column.
    t : ndarray, shape (n, d_t)
        Categorical level indices (integers >= 0) tagging the source.
    theta : ndarray, shape (n, d_theta) or None
        Scaled calibration inputs; NaN marks the missing entries of
        high-fidelity rows.
    y : ndarray, shape (n,)
        Standardized outputs.
    scaler : Scaler
        Fitted scaling transforms for round trips.
    source_registry : tuple of (label, level-combination) pairs
        Ordered mapping from source label to its categorical combination;
        the high-fidelity source is always first.
    level_counts : tuple of int
        Number of levels of each categorical variable.
    """

    x: np.ndarray
    t: np.ndarray
    y: np.ndarray
    scaler: Scaler
    source_registry: tuple
    level_counts: tuple
    theta: np.ndarray | None = None
    d_z: int = LATENT_DIM

    def __post_init__(self):
        object.__setattr__(self, "x", np.asarray(self.x, dtype=float))
        object.__setattr__(self, "t", np.asarray(self.t, dtype=int))
        object.__setattr__(self, "y", np.asarray(self.y, dtype=float).ravel())
        if self.theta is not None:
            object.__setattr__(self, "theta", np.asarray(self.theta, dtype=float))
        object.__setattr__(self, "source_registry", tuple(
            (label, tuple(int(v) for v in combo)) for label, combo in self.source_registry
        ))
        object.__setattr__(self, "level_counts", tuple(int(m) for m in self.level_counts))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def d_x(self) -> int:
        return self.x.shape[1]

    @property
    def d_t(self) -> int:
        return self.t.shape[1]

    @property
    def d_theta(self) -> int:
        return 0 if self.theta is None else self.theta.shape[1]

    @property
    def has_calibration(self) -> bool:
        return self.theta is not None

    @property
    def labels(self) -> tuple:
        return tuple(label for label, _ in self.source_registry)

    @property
    def n_latent_rows(self) -> int:
        """Number of rows of the latent map matrix (sum of level counts)."""
        return int(sum(self.level_counts))

    def combo_of(self, label: str) -> tuple:
        for lbl, combo in self.source_registry:
            if lbl == label:
                return combo
        raise KeyError(f"unknown source label {label!r}")

    def missing_theta_mask(self) -> np.ndarray:
        """Boolean mask of rows whose calibration entries are missing."""
        if self.theta is None:
            return np.zeros(self.n, dtype=bool)
        return np.isnan(self.theta).any(axis=1)


def _source_combos(n_sources: int, strategy: EncodingStrategy):
    """Level combination of each source plus per-variable level counts.

    SINGLE: one variable, source i is level i.  PER_SOURCE: one variable
    per source, each with n_sources levels; source i takes the diagonal
    combination (i, i, ..., i) so that every prior vector is distinct.
    """
    if strategy == EncodingStrategy.SINGLE:
        return [(i,) for i in range(n_sources)], (n_sources,)
    combos = [tuple([i] * n_sources) for i in range(n_sources)]
    return combos, tuple([n_sources] * n_sources)


def assemble_fusion(sources, high_fidelity_label, strategy=EncodingStrategy.SINGLE,
                    theta_bounds=None) -> FusionDataset:
    """Combine per-source datasets into one scaled training table.

    Rows are concatenated in source order with the high-fidelity source
    first.  High-fidelity rows receive NaN markers in the calibration
    columns.  Inputs are scaled to [0, 1] using pooled min/max; outputs
    are standardized with the pooled mean and standard deviation.

    Parameters
    ----------
    sources : list of SourceDataset
        At least two sources with matching input dimension.
    high_fidelity_label : str
        Label of the (single) source treated as highest fidelity.
    strategy : EncodingStrategy
        Categorical encoding of source identity.
    theta_bounds : tuple (lo, hi) of arrays, optional
        Explicit calibration scaling bounds.  Defaults to the min/max of
        the provided calibration samples.

    Raises
    ------
    ValueError
        On duplicate labels, unknown high-fidelity label, fewer than two
        sources, or inconsistent dimensions.
    """
    strategy = EncodingStrategy(strategy)
    sources = list(sources)
    if len(sources) < 2:
        raise ValueError("data fusion needs at least two sources")
    labels = [s.label for s in sources]
    if len(set(labels)) != len(labels):
        raise ValueError(f"duplicate source labels: {labels}")
    if high_fidelity_label not in labels:
        raise ValueError(f"unknown high-fidelity label {high_fidelity_label!r}")

    # high-fidelity source always occupies the first (anchor) position
    ordered = [s for s in sources if s.label == high_fidelity_label]
    ordered += [s for s in sources if s.label != high_fidelity_label]

    d_x = ordered[0].d_x
    for s in ordered:
        if s.d_x != d_x:
            raise ValueError(f"source {s.label!r}: expected {d_x} input columns, got {s.d_x}")

    hf = ordered[0]
    if hf.calib_inputs is not None:
        raise ValueError("high-fidelity source must not carry calibration columns")
    low = ordered[1:]
    d_thetas = {s.d_theta for s in low}
    if len(d_thetas) > 1:
        raise ValueError("low-fidelity sources disagree on calibration dimension")
    d_theta = d_thetas.pop()
    if d_theta > 0 and any(s.calib_inputs is None for s in low):
        # unreachable given the set above; kept for clarity of the contract
        raise ValueError("all low-fidelity sources must share the calibration columns")

    x_all = np.vstack([s.inputs for s in ordered])
    y_all = np.concatenate([s.outputs for s in ordered])

    y_std = float(np.std(y_all))
    if y_std <= 0.0:
        raise ValueError("degenerate output variance")

    if d_theta > 0:
        theta_samples = np.vstack([s.calib_inputs for s in low])
        if theta_bounds is None:
            th_min = theta_samples.min(axis=0)
            th_max = theta_samples.max(axis=0)
        else:
            th_min = np.asarray(theta_bounds[0], dtype=float)
            th_max = np.asarray(theta_bounds[1], dtype=float)
    else:
        th_min = th_max = None

    scaler = Scaler(
        x_min=x_all.min(axis=0), x_max=x_all.max(axis=0),
        y_mean=float(np.mean(y_all)), y_std=y_std,
        theta_min=th_min, theta_max=th_max,
    )

    combos, level_counts = _source_combos(len(ordered), strategy)
    registry = tuple((s.label, combos[i]) for i, s in enumerate(ordered))
    t_rows = np.vstack([
        np.tile(np.asarray(combos[i], dtype=int), (s.n, 1)) for i, s in enumerate(ordered)
    ])

    theta = None
    if d_theta > 0:
        blocks = [np.full((hf.n, d_theta), np.nan)]
        blocks += [scaler.scale_theta(s.calib_inputs) for s in low]
        theta = np.vstack(blocks)

    return FusionDataset(
        x=scaler.scale_x(x_all),
        t=t_rows,
        y=scaler.scale_y(y_all),
        scaler=scaler,
        source_registry=registry,
        level_counts=level_counts,
        theta=theta,
    )


def single_source_dataset(source: SourceDataset) -> FusionDataset:
    """Degenerate one-source table for fitting a plain GP.

    The categorical variable has a single level, so the latent part of
    the kernel is inert.  Calibration columns, if present, are treated
    as ordinary inputs by appending them to x.
    """
    inputs = source.inputs
    if source.calib_inputs is not None:
        inputs = np.hstack([inputs, source.calib_inputs])
    y_std = float(np.std(source.outputs))
    if y_std <= 0.0:
        raise ValueError("degenerate output variance")
    scaler = Scaler(
        x_min=inputs.min(axis=0), x_max=inputs.max(axis=0),
        y_mean=float(np.mean(source.outputs)), y_std=y_std,
    )
    return FusionDataset(
        x=scaler.scale_x(inputs),
        t=np.zeros((source.n, 1), dtype=int),
        y=scaler.scale_y(source.outputs),
        scaler=scaler,
        source_registry=((source.label, (0,)),),
        level_counts=(1,),
        theta=None,
    )


# ---------------------------------------------------------------------------
# CSV ingestion: one file per source, header x1..xd[,th1..thk],y; missing
# calibration cells are written as the literal token NaN.
# ---------------------------------------------------------------------------

def read_source_csv(path, label=None) -> SourceDataset:
    """Load one source from a CSV file with header ``x1,..,xd[,th1,..,thk],y``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [row for row in reader if row]
    header = [h.strip() for h in header]
    x_cols = [i for i, h in enumerate(header) if h.startswith("x")]
    th_cols = [i for i, h in enumerate(header) if h.startswith("th")]
    y_cols = [i for i, h in enumerate(header) if h == "y"]
    if len(y_cols) != 1 or not x_cols:
        raise ValueError(f"{path}: header must be x1..xd[,th1..thk],y (got {header})")
    data = np.asarray([[float(v) for v in row] for row in rows], dtype=float)
    if data.size == 0:
        raise ValueError(f"{path}: no data rows")
    theta = data[:, th_cols] if th_cols else None
    if theta is not None and np.isnan(theta).all():
        theta = None
    return SourceDataset(
        label=label if label is not None else str(path),
        inputs=data[:, x_cols],
        outputs=data[:, y_cols[0]],
        calib_inputs=theta,
    )


def write_source_csv(path, source: SourceDataset) -> None:
    """Write one source to CSV; missing calibration cells render as ``NaN``."""
    d_x, d_th = source.d_x, source.d_theta
    header = [f"x{i + 1}" for i in range(d_x)]
    header += [f"th{i + 1}" for i in range(d_th)]
    header.append("y")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for i in range(source.n):
            row = [repr(v) for v in source.inputs[i]]
            if d_th:
                row += ["NaN" if np.isnan(v) else repr(v) for v in source.calib_inputs[i]]
            row.append(repr(float(source.outputs[i])))
            writer.writerow(row)
