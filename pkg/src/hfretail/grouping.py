"""Pooled percentile cutoffs and the six-group partition of standardized returns."""

from __future__ import annotations

import dataclasses

import numpy as np

GROUP_LABELS = ("G1", "G2", "G3", "G4", "G5", "G6")
GROUP_DESCRIPTIONS = ("<5%", "[5%,25%)", "[25%,0)", "[0,75%)", "[75%,95%)", ">=95%")
CUTOFF_PERCENTILES = (5.0, 25.0, 75.0, 95.0)


@dataclasses.dataclass(frozen=True)
class GroupCutoffs:
    q5: float
    q25: float
    q75: float
    q95: float
    zero_cutoff: float = 0.0

    def __post_init__(self):
        if self.zero_cutoff != 0.0:
            raise ValueError("the middle cutoff is fixed at zero")
        if not (self.q5 <= self.q25 and self.q75 <= self.q95):
            raise ValueError("percentile cutoffs must be non-decreasing")

    @property
    def edges(self) -> np.ndarray:
        """Interior breakpoints in increasing order (five of them)."""
        return np.array([self.q5, self.q25, 0.0, self.q75, self.q95])

    @property
    def median_is_zero_consistent(self) -> bool:
        """True when ``q5 <= q25 <= 0 <= q75 <= q95`` (the usual empirical shape)."""
        return self.q25 <= 0.0 <= self.q75

    def to_dict(self) -> dict[str, float]:
        return {"q5": self.q5, "q25": self.q25, "q75": self.q75, "q95": self.q95}


def compute_cutoffs(std_returns) -> GroupCutoffs:
    """Linear-interpolation 5/25/75/95 percentiles over the pooled sample."""
    values = np.asarray(std_returns, dtype=np.float64)
    values = values[np.isfinite(values)]
    if values.size == 0:
        raise ValueError("cannot compute cutoffs on an empty sample")
    q = np.percentile(values, CUTOFF_PERCENTILES, method="linear")
    return GroupCutoffs(*(float(x) for x in q))


def assign_groups(std_returns, cutoffs: GroupCutoffs) -> np.ndarray:
    """Group index 0..5 (G1..G6) for each return; intervals are left-closed.

    The five breakpoints need not be sorted on arbitrary data (e.g. q25 > 0);
    each observation takes the group of the highest breakpoint it reaches,
    which keeps the map monotone.
    """
    r = np.asarray(std_returns, dtype=np.float64)
    if not np.isfinite(r).all():
        raise ValueError("standardized returns must be finite")
    # cumulative max makes the breakpoints non-decreasing without changing sorted inputs
    edges = np.maximum.accumulate(cutoffs.edges)
    return np.searchsorted(edges, r, side="right").astype(np.int8)


def assign_group(r: float, cutoffs: GroupCutoffs) -> str:
    """Label (``"G1"``..``"G6"``) of a single return."""
    return GROUP_LABELS[int(assign_groups(np.array([r]), cutoffs)[0])]
