"""Stochastic arrival models for cohort counts.

A model gives, for every slot and menu item, an integer distribution on
{0, ..., cap}. Four families are supported:

* ``deterministic``: point mass at the rounded mean.
* ``truncated_poisson``: Poisson with the tail mass folded onto the cap.
* ``truncated_gaussian``: a normal draw clipped to [0, cap] and rounded to
  the nearest integer, so mass below zero lands on 0 and mass above the
  cap lands on the cap.
* ``empirical``: explicit probability vectors.

Caps must be zero wherever a cohort could not finish inside the horizon
(slot + window - 1 past the end); the constructor enforces this so sampled
paths never contain undeliverable demand.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.special import gammaln, ndtr

from .errors import EvschedError
from .model import BlockLayout

FAMILIES = ("deterministic", "truncated_poisson", "truncated_gaussian", "empirical")


@dataclass(frozen=True)
class ParameterBox:
    """Compact box of admissible perturbation parameters."""

    mean_scale: tuple[float, float] = (0.1, 10.0)
    variance: tuple[float, float] = (0.0, 100.0)


@dataclass(frozen=True)
class ArrivalModel:
    """Per-slot, per-item arrival distributions.

    Attributes:
        family: one of :data:`FAMILIES`.
        horizon: number of slots.
        item_windows: window length per menu item (layout item order).
        means: (horizon, n_items) expected counts (ignored for empirical).
        caps: (horizon, n_items) integer support caps.
        variance: Gaussian variance (``truncated_gaussian`` only).
        pmfs: (horizon, n_items, cap_max + 1) table (``empirical`` only).
        box: admissible perturbation parameters.
    """

    family: str
    horizon: int
    item_windows: tuple[int, ...]
    means: np.ndarray
    caps: np.ndarray
    variance: float | None = None
    pmfs: np.ndarray | None = None
    box: ParameterBox = ParameterBox()

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise EvschedError(f"unknown arrival family {self.family!r}")
        means = np.asarray(self.means, dtype=float)
        caps = np.asarray(self.caps, dtype=np.int64)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "caps", caps)
        shape = (self.horizon, len(self.item_windows))
        if means.shape != shape or caps.shape != shape:
            raise EvschedError(f"means/caps must have shape {shape}")
        if (means < 0).any() or (caps < 0).any():
            raise EvschedError("negative arrival mean or cap")
        for j, n in enumerate(self.item_windows):
            bad = [t for t in range(1, self.horizon + 1) if t + n - 1 > self.horizon]
            for t in bad:
                if caps[t - 1, j] != 0 or means[t - 1, j] != 0:
                    raise EvschedError(
                        f"item with window {n} cannot become active at slot {t} "
                        f"of a {self.horizon}-slot horizon; zero its mean and cap"
                    )
        if self.family == "truncated_gaussian":
            if self.variance is None or self.variance < 0:
                raise EvschedError("truncated_gaussian needs variance >= 0")
        if self.family == "empirical":
            if self.pmfs is None:
                raise EvschedError("empirical family needs pmf table")
            pmfs = np.asarray(self.pmfs, dtype=float)
            object.__setattr__(self, "pmfs", pmfs)
            if pmfs.shape[:2] != shape or pmfs.shape[2] < caps.max() + 1:
                raise EvschedError("pmf table shape does not cover caps")
            if (pmfs < -1e-12).any():
                raise EvschedError("negative pmf entry")
            for t in range(self.horizon):
                for j in range(len(self.item_windows)):
                    row = pmfs[t, j, : caps[t, j] + 1]
                    if abs(row.sum() - 1.0) > 1e-9:
                        raise EvschedError(f"pmf at slot {t + 1}, item {j} does not sum to 1")
                    if pmfs[t, j, caps[t, j] + 1 :].any():
                        raise EvschedError("pmf mass beyond cap")
            pmfs.setflags(write=False)
        means.setflags(write=False)
        caps.setflags(write=False)

    @property
    def n_items(self) -> int:
        return len(self.item_windows)

    def pmf(self, slot: int, item: int) -> np.ndarray:
        """Probability vector on {0, ..., cap} for one slot and item."""
        self._check_slot(slot)
        cap = int(self.caps[slot - 1, item])
        mu = float(self.means[slot - 1, item])
        if self.family == "empirical":
            return self.pmfs[slot - 1, item, : cap + 1].copy()
        if cap == 0:
            return np.array([1.0])
        if self.family == "deterministic":
            p = np.zeros(cap + 1)
            p[min(int(round(mu)), cap)] = 1.0
            return p
        if self.family == "truncated_poisson":
            k = np.arange(cap + 1)
            with np.errstate(divide="ignore"):
                logs = k * np.log(mu) - mu - gammaln(k + 1) if mu > 0 else None
            p = np.exp(logs) if mu > 0 else np.eye(cap + 1)[0]
            p[cap] = max(0.0, 1.0 - p[:cap].sum())
            return p
        # truncated_gaussian: clip to [0, cap], round to nearest integer
        sigma = float(np.sqrt(self.variance))
        if sigma < 1e-12:
            p = np.zeros(cap + 1)
            p[int(np.clip(round(mu), 0, cap))] = 1.0
            return p
        edges = (np.arange(cap) + 0.5 - mu) / sigma
        cdf = ndtr(edges)
        p = np.empty(cap + 1)
        p[0] = cdf[0]
        p[1:cap] = np.diff(cdf)
        p[cap] = 1.0 - cdf[-1]
        return p

    def mean_vector(self, slot: int) -> np.ndarray:
        """Exact expected counts at ``slot`` (computed from the pmfs)."""
        return np.array(
            [float(np.dot(np.arange(len(p)), p)) for p in (self.pmf(slot, j) for j in range(self.n_items))]
        )

    def sample(self, slot: int, rng: np.random.Generator) -> np.ndarray:
        """One arrival count vector, via inverse CDF (one uniform per item)."""
        self._check_slot(slot)
        out = np.zeros(self.n_items, dtype=np.int64)
        draws = rng.random(self.n_items)
        for j in range(self.n_items):
            cdf = np.cumsum(self.pmf(slot, j))
            out[j] = int(np.searchsorted(cdf, draws[j], side="right"))
            out[j] = min(out[j], int(self.caps[slot - 1, j]))
        return out

    def sample_many(self, slot: int, k: int, rng: np.random.Generator) -> np.ndarray:
        """(k, n_items) arrival samples for one slot."""
        draws = rng.random((k, self.n_items))
        out = np.zeros((k, self.n_items), dtype=np.int64)
        for j in range(self.n_items):
            cdf = np.cumsum(self.pmf(slot, j))
            out[:, j] = np.minimum(
                np.searchsorted(cdf, draws[:, j], side="right"),
                int(self.caps[slot - 1, j]),
            )
        return out

    def perturb(self, mean_scale: float | None = None, variance: float | None = None) -> "ArrivalModel":
        """New model with scaled means and/or a Gaussian variance swap.

        Setting ``variance`` re-expresses the model as ``truncated_gaussian``
        around the (scaled) means; that is how variance sweeps against a
        Poisson-trained baseline are produced. Parameters must lie in the
        model's :class:`ParameterBox`.
        """
        if self.family == "empirical":
            raise EvschedError("empirical models do not support perturbation")
        scale = 1.0 if mean_scale is None else float(mean_scale)
        lo, hi = self.box.mean_scale
        if not lo <= scale <= hi:
            raise EvschedError(f"mean_scale {scale} outside box [{lo}, {hi}]")
        new_means = self.means * scale
        if variance is None:
            return replace(self, means=new_means)
        vlo, vhi = self.box.variance
        if not vlo <= variance <= vhi:
            raise EvschedError(f"variance {variance} outside box [{vlo}, {vhi}]")
        return replace(
            self, family="truncated_gaussian", means=new_means, variance=float(variance)
        )

    def _check_slot(self, slot: int):
        if not 1 <= slot <= self.horizon:
            raise EvschedError(f"slot {slot} outside horizon 1..{self.horizon}")


def model_for_layout(
    layout: BlockLayout,
    horizon: int,
    family: str,
    means,
    cap,
    variance: float | None = None,
    pmfs=None,
    box: ParameterBox | None = None,
) -> ArrivalModel:
    """Build a model in layout item order, zeroing mass past the horizon.

    ``means`` may be a scalar, a per-item vector, or a (horizon, n_items)
    matrix; ``cap`` likewise. Entries whose cohorts could not finish by the
    last slot are zeroed automatically.
    """
    nj = layout.n_items
    windows = tuple(int(n) for n in layout.item_n)
    means = np.broadcast_to(np.asarray(means, dtype=float), (horizon, nj)).copy()
    caps = np.broadcast_to(np.asarray(cap, dtype=np.int64), (horizon, nj)).copy()
    for j, n in enumerate(windows):
        first_bad = horizon - n + 2
        if first_bad <= horizon:
            means[first_bad - 1 :, j] = 0.0
            caps[first_bad - 1 :, j] = 0
    kwargs = {}
    if box is not None:
        kwargs["box"] = box
    return ArrivalModel(
        family=family,
        horizon=horizon,
        item_windows=windows,
        means=means,
        caps=caps,
        variance=variance,
        pmfs=pmfs,
        **kwargs,
    )
