"""Incomplete multivariate datasets: values, response indicators, patterns."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .gaussian import ObservedPattern


@dataclass(frozen=True, eq=False)
class IncompleteDataset:
    """n records of p numeric items; ``NaN`` marks a missing cell.

    ``category`` optionally carries one fully observed categorical covariate
    (as strings); it only enters the conditional mixture.
    """

    values: np.ndarray
    columns: tuple = ()
    ids: tuple | None = None
    category: np.ndarray | None = None
    category_name: str | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2:
            raise ValueError("values must be a 2-d array")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        cols = tuple(self.columns) or tuple(f"y{j + 1}" for j in range(v.shape[1]))
        if len(cols) != v.shape[1]:
            raise ValueError("column names do not match the number of items")
        object.__setattr__(self, "columns", cols)
        if self.ids is not None:
            ids = tuple(str(i) for i in self.ids)
            if len(ids) != v.shape[0]:
                raise ValueError("ids do not match the number of records")
            if len(set(ids)) != len(ids):
                raise ValueError("duplicate record ids")
            object.__setattr__(self, "ids", ids)
        if self.category is not None:
            cat = np.asarray(self.category).astype(str)
            if cat.shape != (v.shape[0],):
                raise ValueError("category column must have one entry per record")
            object.__setattr__(self, "category", cat)

    @property
    def n(self):
        return self.values.shape[0]

    @property
    def p(self):
        return self.values.shape[1]

    @cached_property
    def observed(self):
        """Boolean response matrix R (True = observed)."""
        r = ~np.isnan(self.values)
        r.setflags(write=False)
        return r

    @property
    def response(self):
        return self.observed.astype(np.int8)

    @cached_property
    def fully_observed(self):
        return self.observed.all(axis=1)

    @cached_property
    def fully_missing(self):
        return ~self.observed.any(axis=1)

    @cached_property
    def pattern_groups(self):
        """List of ``(ObservedPattern, row indices)`` in first-seen order."""
        keys = np.packbits(self.observed, axis=1)
        _, first, inverse = np.unique(keys, axis=0, return_index=True, return_inverse=True)
        inverse = inverse.ravel()
        groups = []
        for u in np.argsort(first):
            rows = np.flatnonzero(inverse == u)
            groups.append((ObservedPattern(self.observed[rows[0]]), rows))
        return groups

    @cached_property
    def levels(self):
        """Sorted distinct category levels and the per-record level codes."""
        if self.category is None:
            return ("",), np.zeros(self.n, dtype=np.intp)
        lv, codes = np.unique(self.category, return_inverse=True)
        return tuple(lv.tolist()), codes.astype(np.intp)

    def subset(self, rows):
        rows = np.asarray(rows)
        return IncompleteDataset(
            self.values[rows],
            self.columns,
            None if self.ids is None else tuple(np.asarray(self.ids)[rows]),
            None if self.category is None else self.category[rows],
            self.category_name,
        )

    def complete_cases(self):
        return self.subset(np.flatnonzero(self.fully_observed))

    def record_ids(self):
        return self.ids if self.ids is not None else tuple(str(i + 1) for i in range(self.n))

    def with_values(self, values):
        return IncompleteDataset(values, self.columns, self.ids, self.category, self.category_name)
