"""Finite-dimensional feature maps for the primal and dual function classes.

Three families are supported:

``histogram``
    indicator functions of bins between quantile breakpoints; in one
    dimension they partition unity, so constants are spanned without a
    separate intercept.
``linear_spline``
    intercept, identity and hinge terms ``max(0, x - t)`` at interior knots.
``polynomial``
    intercept and monomials ``x**1 .. x**degree``.

For ``d > 1`` the per-dimension blocks are concatenated (no tensor products).
Inputs outside ``bounds`` are clamped to the boundary before evaluation.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

KINDS = ("histogram", "linear_spline", "polynomial")


class DimensionMismatch(ValueError):
    pass


class DegenerateDimension(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class FeatureBasis:
    kind: str
    knots: tuple
    bounds: tuple
    degree: int = 1
    degenerate: tuple = field(default=())

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown basis kind {self.kind!r}")
        knots = tuple(np.asarray(k, dtype=np.float64) for k in self.knots)
        for k in knots:
            k.setflags(write=False)
        bounds = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if len(knots) != len(bounds):
            raise ValueError("need one knot vector and one bound pair per dimension")
        degenerate = tuple(bool(v) for v in self.degenerate) or (False,) * len(bounds)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "bounds", bounds)
        object.__setattr__(self, "degenerate", degenerate)

    @property
    def d(self) -> int:
        return len(self.bounds)

    def _block_sizes(self):
        sizes = []
        for j, t in enumerate(self.knots):
            if self.degenerate[j]:
                sizes.append(0)
            elif self.kind == "histogram":
                nbins = len(t) + 1
                sizes.append(nbins if not sizes or all(s == 0 for s in sizes) else nbins - 1)
            elif self.kind == "linear_spline":
                sizes.append(1 + len(t))
            else:
                sizes.append(self.degree)
        return sizes

    @property
    def has_intercept(self) -> bool:
        """Whether a separate constant column leads the feature vector."""
        if self.kind == "histogram":
            return sum(self._block_sizes()) == 0
        return True

    @property
    def p(self) -> int:
        return int(self.has_intercept) + sum(self._block_sizes())

    def transform(self, x) -> np.ndarray:
        """Feature matrix for an ``(n, d)`` array (or ``(n,)`` when ``d == 1``)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None] if self.d == 1 else x[None, :]
        if x.ndim != 2 or x.shape[1] != self.d:
            raise DimensionMismatch(f"expected treatment dimension {self.d}, got {x.shape[-1]}")
        cols = []
        if self.has_intercept:
            cols.append(np.ones((len(x), 1)))
        first_hist = True
        for j, (t, (lo, hi)) in enumerate(zip(self.knots, self.bounds)):
            if self.degenerate[j]:
                continue
            xj = np.clip(x[:, j], lo, hi)
            if self.kind == "histogram":
                b = np.searchsorted(t, xj, side="right")
                block = np.zeros((len(x), len(t) + 1))
                block[np.arange(len(x)), b] = 1.0
                cols.append(block if first_hist else block[:, 1:])
                first_hist = False
            elif self.kind == "linear_spline":
                cols.append(xj[:, None])
                cols.append(np.maximum(0.0, xj[:, None] - t[None, :]))
            else:
                cols.append(xj[:, None] ** np.arange(1, self.degree + 1)[None, :])
        return np.hstack(cols)

    def bin_index(self, x) -> np.ndarray:
        """Column index of the active indicator; one-dimensional histograms only."""
        if self.kind != "histogram" or self.d != 1 or self.degenerate[0]:
            raise ValueError("bin_index needs a non-degenerate 1-d histogram basis")
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        lo, hi = self.bounds[0]
        return np.searchsorted(self.knots[0], np.clip(x, lo, hi), side="right")

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "knots": [k.tolist() for k in self.knots],
            "bounds": [list(b) for b in self.bounds],
            "degree": self.degree,
            "degenerate": list(self.degenerate),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, data: dict) -> FeatureBasis:
        return cls(data["kind"], tuple(data["knots"]), tuple(tuple(b) for b in data["bounds"]),
                   int(data.get("degree", 1)), tuple(data.get("degenerate", ())))

    @classmethod
    def histogram_from_edges(cls, edges) -> FeatureBasis:
        """One-dimensional histogram with explicit edges ``lo < t_1 < ... < hi``."""
        edges = np.asarray(edges, dtype=np.float64)
        return cls("histogram", (edges[1:-1],), ((edges[0], edges[-1]),))


def evaluate(basis: FeatureBasis, x) -> np.ndarray:
    """Feature vector of a single treatment point."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.ndim != 1 or len(x) != basis.d:
        raise DimensionMismatch(f"expected a length-{basis.d} treatment vector, got shape {x.shape}")
    return basis.transform(x[None, :])[0]


def make_basis(kind: str, config: int, sample) -> FeatureBasis:
    """Place knots at empirical quantiles of the pooled treatments.

    ``config`` is the bin count for ``histogram``, the number of interior
    knots for ``linear_spline`` and the degree for ``polynomial``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown basis kind {kind!r}")
    if int(config) < 1:
        raise ValueError("knot count / degree must be at least 1")
    x = sample.x if hasattr(sample, "x") else np.asarray(sample, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) == 0:
        raise ValueError("sample is empty")
    knots, bounds, degenerate = [], [], []
    for j in range(x.shape[1]):
        xj = x[:, j]
        lo, hi = float(xj.min()), float(xj.max())
        bounds.append((lo, hi))
        if hi <= lo:
            warnings.warn(f"treatment coordinate {j + 1} is constant; using intercept only",
                          DegenerateDimension, stacklevel=2)
            knots.append(np.array([]))
            degenerate.append(True)
            continue
        degenerate.append(False)
        if kind == "histogram":
            q = np.quantile(xj, np.linspace(0.0, 1.0, int(config) + 1))
            interior = np.unique(q[1:-1])
            interior = interior[(interior > lo) & (interior < hi)]
            knots.append(interior)
        elif kind == "linear_spline":
            q = np.quantile(xj, np.arange(1, int(config) + 1) / (int(config) + 1))
            interior = np.unique(q)
            knots.append(interior[(interior > lo) & (interior < hi)])
        else:
            knots.append(np.array([]))
    return FeatureBasis(kind, tuple(knots), tuple(bounds), degree=int(config) if kind == "polynomial" else 1,
                        degenerate=tuple(degenerate))


def gram_matrix(F: np.ndarray) -> np.ndarray:
    """Empirical Gram matrix ``F.T @ F / N`` (symmetrized)."""
    G = F.T @ F / F.shape[0]
    return 0.5 * (G + G.T)
