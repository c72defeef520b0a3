"""
The 0/1 aggregation map A and zero-margin dimension reduction.

Tables are flattened column-major ("stacking the columns"): cell (i, j) of an
I x J table sits at index ``i + I*j``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np

from .models import BernoulliVectorModel, MultinomialModel


class InfeasibleObservation(ValueError):
    """The observed margins have probability zero under every parameter."""


@dataclass(frozen=True, eq=False)
class MarginsMap:
    """
    Sparse 0/1 matrix A of shape (d_Y, d_X), one index set per row.

    ``implied`` lists margins that were dropped as redundant given the total
    count: each entry ``(cols, row_ids)`` states that, for a multinomial X with
    n trials, ``sum(x[cols]) == n - sum(y[row_ids])``.  It is only used to
    detect forced-empty cells; ``apply`` ignores it.
    """

    d_X: int
    rows: tuple
    implied: tuple = ()
    labels: tuple | None = field(default=None, repr=False)

    def __post_init__(self):
        rows = tuple(tuple(sorted(int(j) for j in r)) for r in self.rows)
        for r in rows:
            if len(set(r)) != len(r):
                raise ValueError("repeated column inside a row")
            if r and (r[0] < 0 or r[-1] >= self.d_X):
                raise ValueError("row index out of range")
        if len(set(rows)) != len(rows):
            raise ValueError("duplicate rows in aggregation map")
        if len(rows) > self.d_X:
            raise ValueError("d_Y must not exceed d_X")
        implied = tuple(
            (tuple(sorted(int(j) for j in cols)), tuple(int(r) for r in rids))
            for cols, rids in self.implied
        )
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "implied", implied)

    @property
    def d_Y(self):
        return len(self.rows)

    @cached_property
    def dense(self):
        m = np.zeros((self.d_Y, self.d_X))
        for r, cols in enumerate(self.rows):
            m[r, list(cols)] = 1.0
        m.setflags(write=False)
        return m

    @cached_property
    def _row_index(self):
        """(d_Y, width) column indices per row, padded with d_X."""
        width = max((len(r) for r in self.rows), default=0)
        idx = np.full((self.d_Y, width), self.d_X, dtype=np.intp)
        for r, cols in enumerate(self.rows):
            idx[r, :len(cols)] = cols
        return idx

    @cached_property
    def _col_index(self):
        """(d_X, width) row indices per column, padded with d_Y."""
        members = [[] for _ in range(self.d_X)]
        for r, cols in enumerate(self.rows):
            for j in cols:
                members[j].append(r)
        width = max((len(m) for m in members), default=0)
        idx = np.full((self.d_X, width), self.d_Y, dtype=np.intp)
        for j, m in enumerate(members):
            idx[j, :len(m)] = m
        return idx

    @staticmethod
    def _gather_sum(v, idx):
        pad = np.zeros(v.shape[:-1] + (1,), dtype=v.dtype)
        return np.concatenate([v, pad], axis=-1)[..., idx].sum(axis=-1)

    def apply(self, x):
        """y_r = sum of x over row r, along the last axis."""
        x = np.asarray(x)
        if x.shape[-1] != self.d_X:
            raise ValueError(f"expected last dimension {self.d_X}, got {x.shape[-1]}")
        return self._gather_sum(x, self._row_index)

    def transpose_apply(self, z):
        """(A^T z)_j = sum of z_r over the rows r containing j, along the last axis."""
        z = np.asarray(z, dtype=float)
        if z.shape[-1] != self.d_Y:
            raise ValueError(f"expected last dimension {self.d_Y}, got {z.shape[-1]}")
        if self._col_index.shape[1] <= 2:
            # At most two nonzero 0/1 terms per output: the BLAS product is
            # exact, hence independent of blocking and batch size.
            return z @ self.dense
        return self._gather_sum(z, self._col_index)

    @cached_property
    def _pair_index(self):
        """(d_Y, d_Y, width) shared columns of each pair of rows, padded with d_X."""
        sets = [set(r) for r in self.rows]
        shared = [[sorted(a & b) for b in sets] for a in sets]
        width = max((len(c) for row in shared for c in row), default=0)
        idx = np.full((self.d_Y, self.d_Y, width), self.d_X, dtype=np.intp)
        for r, row in enumerate(shared):
            for s, cols in enumerate(row):
                idx[r, s, :len(cols)] = cols
        return idx

    def gram(self, v):
        """A diag(v) A^T for v along the last axis; shape (..., d_Y, d_Y)."""
        return self._gather_sum(np.asarray(v, dtype=float), self._pair_index)

    def sandwich(self, H):
        """A H A^T over the last two axes."""
        T = self.apply(np.swapaxes(np.asarray(H, dtype=float), -1, -2))
        return self.apply(np.swapaxes(T, -1, -2))

    @cached_property
    def _redundancy_free(self):
        """Whether the rows, together with the all-ones row, are independent."""
        with_total = np.vstack([np.ones(self.d_X), self.dense])
        return (
            np.linalg.matrix_rank(self.dense) == self.d_Y,
            np.linalg.matrix_rank(with_total) == self.d_Y + 1,
        )


def margins_matrix(I: int, J: int, drop_last: bool = True) -> MarginsMap:
    """
    Row and column sums of an I x J table flattened column-major.

    With ``drop_last`` (the default) the last row sum and last column sum are
    omitted, giving d_Y = I + J - 2; they are recorded as implied margins.
    """
    if I < 2 or J < 2:
        raise ValueError("margins_matrix needs I >= 2 and J >= 2")
    row_sets = [[i + I * j for j in range(J)] for i in range(I)]
    col_sets = [[i + I * j for i in range(I)] for j in range(J)]
    if not drop_last:
        return MarginsMap(I * J, tuple(row_sets + col_sets),
                          labels=(I, J, False))
    rows = tuple(row_sets[:-1] + col_sets[:-1])
    implied = (
        (row_sets[-1], tuple(range(I - 1))),
        (col_sets[-1], tuple(range(I - 1, I + J - 2))),
    )
    return MarginsMap(I * J, rows, implied=implied, labels=(I, J, True))


def single_row(d: int) -> MarginsMap:
    return MarginsMap(d, (tuple(range(d)),))


def identity_map(d: int) -> MarginsMap:
    return MarginsMap(d, tuple((j,) for j in range(d)))


# ---------------------------------------------------------------------------
# Zero-margin reduction
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Reduction:
    """A reduced problem with f_{AX}(y) = exp(log_correction) * f_{A'X'}(y').

    ``model`` is None when no coordinates survive; when ``A.d_Y == 0`` the
    reduced probability is exactly 1.
    """

    A: MarginsMap
    model: MultinomialModel | BernoulliVectorModel | None
    y: np.ndarray
    kept: np.ndarray
    log_correction: float

    @property
    def trivial(self):
        return self.A.d_Y == 0


def _as_int_vector(y, d_Y):
    y = np.asarray(y)
    if y.shape != (d_Y,):
        raise ValueError(f"y must have shape ({d_Y},), got {y.shape}")
    yi = np.rint(y).astype(np.int64)
    if not np.all(yi == y):
        raise ValueError("y must hold integer counts")
    return yi


def _independent_rows(rows, y, d, total):
    """Greedily drop rows that are linear combinations of earlier ones.

    ``total`` is the multinomial trial count (the all-ones row is treated as a
    known constraint) or None.  A dependent row whose value disagrees with the
    combination of the retained ones makes the observation infeasible.
    """
    basis, values = [], []
    if total is not None:
        basis.append(np.ones(d))
        values.append(float(total))
    keep = []
    for r, cols in enumerate(rows):
        v = np.zeros(d)
        v[list(cols)] = 1.0
        if basis:
            B = np.array(basis)
            coef, *_ = np.linalg.lstsq(B.T, v, rcond=None)
            if np.allclose(B.T @ coef, v, atol=1e-9):
                if abs(coef @ np.array(values) - y[r]) > 1e-6:
                    raise InfeasibleObservation("margins are mutually inconsistent")
                continue
        basis.append(v)
        values.append(float(y[r]))
        keep.append(r)
    return keep


def _restrict(rows, y, kept, keep_rows):
    pos = {j: i for i, j in enumerate(kept)}
    new_rows = tuple(tuple(pos[j] for j in rows[r] if j in pos) for r in keep_rows)
    return new_rows, np.asarray([y[r] for r in keep_rows], dtype=np.int64)


def reduce_multinomial(A: MarginsMap, p, n: int, y) -> Reduction:
    """Reduction on raw arrays; ``p`` may contain zeros in forced-empty cells."""
    p = np.asarray(p, dtype=float)
    y = _as_int_vector(y, A.d_Y)
    if np.any(y < 0):
        raise InfeasibleObservation("negative margin")
    if np.any(y > n):
        raise InfeasibleObservation("a margin exceeds the number of trials")
    zero = np.zeros(A.d_X, dtype=bool)
    zero |= p <= 0
    for r, cols in enumerate(A.rows):
        if y[r] == 0:
            zero[list(cols)] = True
        elif y[r] == n:
            mask = np.ones(A.d_X, dtype=bool)
            mask[list(cols)] = False
            zero |= mask
    for cols, rids in A.implied:
        v = n - int(sum(y[r] for r in rids))
        if v < 0:
            raise InfeasibleObservation("margins sum beyond the number of trials")
        if v == 0:
            zero[list(cols)] = True

    if not zero.any():
        indep, indep_total = A._redundancy_free
        if indep_total:
            return Reduction(A, MultinomialModel(n, p / p.sum()), y,
                             np.arange(A.d_X), 0.0)

    kept = np.flatnonzero(~zero)
    for r, cols in enumerate(A.rows):
        if y[r] > 0 and not any(not zero[j] for j in cols):
            raise InfeasibleObservation(f"margin {r} is positive but all its cells are forced empty")
    if kept.size == 0:
        raise InfeasibleObservation("every cell is forced empty")
    mass = p[kept].sum()
    log_corr = n * np.log(mass)

    live = [r for r in range(A.d_Y) if y[r] > 0]
    kept_set = set(kept.tolist())
    sub_rows = [tuple(j for j in A.rows[r] if j in kept_set) for r in live]
    pos = {j: i for i, j in enumerate(kept)}
    local_rows = [tuple(pos[j] for j in cols) for cols in sub_rows]
    local_y = [y[r] for r in live]
    keep = _independent_rows(local_rows, local_y, kept.size, n)
    rows = tuple(local_rows[i] for i in keep)
    y_new = np.asarray([local_y[i] for i in keep], dtype=np.int64)
    model = MultinomialModel(n, p[kept] / mass)
    return Reduction(MarginsMap(kept.size, rows), model, y_new, kept, float(log_corr))


def reduce_bernoulli(A: MarginsMap, q, y) -> Reduction:
    q = np.asarray(q, dtype=float)
    y = _as_int_vector(y, A.d_Y)
    sizes = np.array([len(r) for r in A.rows])
    if np.any(y < 0) or np.any(y > sizes):
        raise InfeasibleObservation("margin outside [0, row size]")
    fixed = np.full(A.d_X, -1, dtype=np.int64)
    changed = True
    while changed:
        changed = False
        for r, cols in enumerate(A.rows):
            free = [j for j in cols if fixed[j] < 0]
            ones = sum(1 for j in cols if fixed[j] == 1)
            rest = y[r] - ones
            if rest < 0 or rest > len(free):
                raise InfeasibleObservation("margins are mutually inconsistent")
            if free and rest == 0:
                fixed[free] = 0
                changed = True
            elif free and rest == len(free):
                fixed[free] = 1
                changed = True
    if not np.any(fixed >= 0) and A._redundancy_free[0]:
        return Reduction(A, BernoulliVectorModel(q), y, np.arange(A.d_X), 0.0)

    log_corr = float(np.sum(np.log1p(-q[fixed == 0])) + np.sum(np.log(q[fixed == 1])))
    kept = np.flatnonzero(fixed < 0)
    pos = {j: i for i, j in enumerate(kept)}
    local_rows, local_y = [], []
    for r, cols in enumerate(A.rows):
        free = tuple(pos[j] for j in cols if fixed[j] < 0)
        if free:
            local_rows.append(free)
            local_y.append(int(y[r] - sum(1 for j in cols if fixed[j] == 1)))
    keep = _independent_rows(local_rows, local_y, kept.size, None)
    rows = tuple(local_rows[i] for i in keep)
    y_new = np.asarray([local_y[i] for i in keep], dtype=np.int64)
    model = BernoulliVectorModel(q[kept]) if kept.size else None
    return Reduction(MarginsMap(kept.size, rows), model, y_new, kept, log_corr)


def reduce_zero_margins(A: MarginsMap, model, y) -> Reduction:
    """
    Remove coordinates that the observation forces to a fixed value.

    For a multinomial, a zero margin empties every cell it covers (as does a
    margin equal to n for the cells outside it, and a zero implied margin).
    The reduced law is the multinomial conditioned on those cells being
    empty, and ``log_correction = n * log(1 - sum of their probabilities)``.
    For a Bernoulli vector, margins equal to 0 or to their row size fix the
    covered components, and the correction is their log-probability.
    Redundant rows are dropped after the reduction.

    Raises
    ------
    InfeasibleObservation
        If no table can produce ``y``.
    """
    if isinstance(model, MultinomialModel):
        return reduce_multinomial(A, model.p, model.n, y)
    if isinstance(model, BernoulliVectorModel):
        return reduce_bernoulli(A, model.q, y)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def independent_rows(rows: Sequence[Sequence[int]], y, d_X: int) -> tuple[tuple, np.ndarray]:
    """
    Drop rows that are linear combinations of earlier ones.

    Raises ``InfeasibleObservation`` when a dropped row's value disagrees
    with the retained rows.
    """
    y = _as_int_vector(y, len(rows))
    keep = _independent_rows([tuple(r) for r in rows], y, d_X, None)
    return tuple(tuple(rows[i]) for i in keep), y[keep]


def dedupe_rows(rows: Sequence[Sequence[int]], y) -> tuple[tuple, np.ndarray]:
    """Merge identical rows, checking that their observed values agree."""
    seen: dict[tuple, int] = {}
    out_rows, out_y = [], []
    for cols, v in zip(rows, np.asarray(y)):
        key = tuple(sorted(cols))
        if key in seen:
            if out_y[seen[key]] != v:
                raise InfeasibleObservation("identical margins with different values")
            continue
        seen[key] = len(out_rows)
        out_rows.append(key)
        out_y.append(int(v))
    return tuple(out_rows), np.asarray(out_y, dtype=np.int64)
