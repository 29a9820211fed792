"""Panel containers, model specification and subpanel selection."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError


class Family(str, enum.Enum):
    LINEAR = "linear"
    QUANTILE = "quantile"
    LOGIT = "logit"
    BINARY = "binary"  # binary choice with a user-selected CDF tag
    RCLOGIT = "rclogit"


SINGLE_INDEX = (Family.LINEAR, Family.QUANTILE, Family.LOGIT, Family.BINARY)
BINARY_OUTCOME = (Family.LOGIT, Family.BINARY, Family.RCLOGIT)
BINARY_CDFS = ("normal", "logistic")


@dataclass(frozen=True)
class ModelSpec:
    """Loss family plus the hyperparameters that family needs.

    ``tau``/``bandwidth`` belong to the smoothed quantile loss, ``cdf`` to the
    generic binary family and ``draws`` to the random-coefficient logit.
    A quantile spec with ``bandwidth=None`` uses ``min(N, T) ** (-1/5)``.
    """

    family: Family
    tau: float | None = None
    bandwidth: float | None = None
    cdf: str | None = None
    draws: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "family", Family(self.family))
        fam = self.family
        if fam is Family.QUANTILE:
            if self.tau is None or not 0.0 < self.tau < 1.0:
                raise ValidationError("quantile family needs tau in (0, 1)")
            if self.bandwidth is not None and not self.bandwidth > 0:
                raise ValidationError("bandwidth must be positive")
        elif self.tau is not None or self.bandwidth is not None:
            raise ValidationError(f"tau/bandwidth only apply to the quantile family, not {fam.value}")
        if fam is Family.BINARY:
            if self.cdf not in BINARY_CDFS:
                raise ValidationError(f"binary family needs cdf in {BINARY_CDFS}")
        elif self.cdf is not None:
            raise ValidationError("cdf tag only applies to the binary family")
        if fam is Family.RCLOGIT:
            if self.draws is None or int(self.draws) < 1:
                raise ValidationError("random-coefficient logit needs draws >= 1")
        elif self.draws is not None:
            raise ValidationError("draws only apply to the random-coefficient logit")

    @property
    def single_index(self) -> bool:
        return self.family in SINGLE_INDEX

    def with_bandwidth(self, N: int, T: int) -> "ModelSpec":
        if self.family is Family.QUANTILE and self.bandwidth is None:
            return ModelSpec(self.family, tau=self.tau, bandwidth=min(N, T) ** (-0.2))
        return self

    @classmethod
    def linear(cls):
        return cls(Family.LINEAR)

    @classmethod
    def logit(cls):
        return cls(Family.LOGIT)

    @classmethod
    def quantile(cls, tau, bandwidth=None):
        return cls(Family.QUANTILE, tau=tau, bandwidth=bandwidth)

    @classmethod
    def binary(cls, cdf="normal"):
        return cls(Family.BINARY, cdf=cdf)

    @classmethod
    def rclogit(cls, draws=200):
        return cls(Family.RCLOGIT, draws=int(draws))


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class PanelData:
    """Balanced N x T grid with an observed-cell mask.

    ``X`` is stored as a (p, N, T) stack, one slice per regressor. Unobserved
    cells hold 0 in ``Y`` and ``X``; every sum in the package runs over
    ``mask`` only. Arrays are read-only after construction.
    """

    Y: np.ndarray
    X: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim != 2:
            raise ValidationError(f"Y must be a matrix, got shape {Y.shape}")
        X = np.asarray(self.X, dtype=float)
        if X.size == 0:
            X = np.zeros((0,) + Y.shape)
        if X.ndim == 2:
            X = X[None]
        if X.ndim != 3 or X.shape[1:] != Y.shape:
            raise ValidationError(f"X slices must match Y {Y.shape}, got {X.shape}")
        if self.mask is None:
            mask = np.isfinite(Y)
        else:
            mask = np.asarray(self.mask, dtype=bool)
            if mask.shape != Y.shape:
                raise ValidationError(f"mask shape {mask.shape} != Y shape {Y.shape}")
        Y = np.where(mask, Y, 0.0)
        X = np.where(mask[None], X, 0.0)
        object.__setattr__(self, "Y", _frozen(Y))
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "mask", _frozen(mask, bool))

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @property
    def p(self) -> int:
        return self.X.shape[0]

    @property
    def n_obs(self) -> int:
        return int(self.mask.sum())

    @property
    def balanced(self) -> bool:
        return bool(self.mask.all())

    def cell_weights(self) -> np.ndarray:
        """Per-cell weights w such that sum(w * l) / (N T) is the mean loss over observed cells."""
        return self.mask * (self.N * self.T / max(self.n_obs, 1))

    def index(self, theta) -> np.ndarray:
        """X'theta as an N x T matrix."""
        theta = np.asarray(theta, dtype=float)
        if self.p == 0:
            return np.zeros((self.N, self.T))
        return np.tensordot(theta, self.X, axes=1)

    def __eq__(self, other):
        if not isinstance(other, PanelData):
            return NotImplemented
        return (
            self.Y.shape == other.Y.shape
            and self.p == other.p
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.Y, other.Y)
            and np.array_equal(self.X, other.X)
        )

    __hash__ = None


@dataclass(frozen=True)
class SubpanelSelector:
    """Half-open row and column ranges, e.g. ``rows=(0, N // 2)``."""

    rows: tuple[int, int]
    cols: tuple[int, int]

    def check(self, N: int, T: int):
        for name, (lo, hi), n in (("row", self.rows, N), ("col", self.cols, T)):
            if not (0 <= lo < hi <= n):
                raise IndexError(f"{name} range [{lo}, {hi}) outside [0, {n}) or empty")

    def compose(self, inner: "SubpanelSelector") -> "SubpanelSelector":
        """Selector equivalent to applying ``self`` and then ``inner``."""
        r0, c0 = self.rows[0], self.cols[0]
        return SubpanelSelector(
            (r0 + inner.rows[0], r0 + inner.rows[1]), (c0 + inner.cols[0], c0 + inner.cols[1])
        )

    @classmethod
    def full(cls, panel: PanelData):
        return cls((0, panel.N), (0, panel.T))


def subpanel(panel: PanelData, sel: SubpanelSelector) -> PanelData:
    sel.check(panel.N, panel.T)
    rs = slice(*sel.rows)
    cs = slice(*sel.cols)
    return PanelData(panel.Y[rs, cs], panel.X[:, rs, cs], panel.mask[rs, cs])


def validate(panel: PanelData, spec: ModelSpec | None = None) -> list[str]:
    """Return human-readable violations; an empty list means the panel is usable."""
    problems = []
    if panel.N < 2:
        problems.append(f"N = {panel.N} < 2")
    if panel.T < 2:
        problems.append(f"T = {panel.T} < 2")
    for i in np.flatnonzero(~panel.mask.any(axis=1)):
        problems.append(f"row {i} has no observed cells")
    for t in np.flatnonzero(~panel.mask.any(axis=0)):
        problems.append(f"column {t} has no observed cells")
    obs = panel.mask
    if not np.isfinite(panel.Y[obs]).all():
        problems.append("non-finite observed outcome")
    for j in range(panel.p):
        if not np.isfinite(panel.X[j][obs]).all():
            problems.append(f"non-finite values in covariate x{j + 1}")
    if spec is not None and spec.family in BINARY_OUTCOME:
        bad = obs & (panel.Y != 0.0) & (panel.Y != 1.0)
        for i, t in zip(*np.nonzero(bad)):
            problems.append(f"cell ({i},{t}) has non-binary outcome {float(panel.Y[i, t])!r}")
    if spec is not None and spec.family is Family.RCLOGIT and panel.p == 0:
        problems.append("random-coefficient logit needs at least one covariate")
    return problems
