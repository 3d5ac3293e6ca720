"""Exact solver for the constrained binary feature-assignment program.

The program selects ``k`` of ``Q`` features and assigns exactly ``n`` of the
selected features to each of ``C`` classes.  It maximizes the summed
class/feature score of assigned entries, minus a redundancy penalty over
selected feature pairs, plus a locality bonus on selected features:

    max  sum_cq psi[c,q] w[c,q] s[q]
         - lambda_redundancy * sum_{q<q'} R[q,q'] s[q] s[q']
         + lambda_bias * sum_q b[q] s[q]

subject to sum(s) = k, per-class row sums of n, pairwise-distinct rows, and,
for every class pair in ``pair_set``, rows sharing exactly n - 1 selected
features.

``solve`` runs depth-first branch and bound over the feature selection with
an exact assignment search at every surviving leaf.  Distinct-row
prohibition is enforced lazily: duplicate rows found in a solution become
no-good cuts on that exact row pair and the instance is re-solved until no
duplicates remain.  ``brute_force`` is an independently written exhaustive
oracle for small instances.  ``relax_hierarchy`` re-solves with the
selection frozen, trading the hard pair constraints for "at least |K| of
the pairs that ever shared n - 1 features must still share them".

Ties on the objective resolve to the lexicographically smallest selection
vector, then the lexicographically smallest row-major assignment, so equal
instances always yield identical results.
"""

from __future__ import annotations

import heapq
import itertools
import json
import math
import sys
from collections import defaultdict, deque
from dataclasses import dataclass

import numpy as np

from .exceptions import InfeasibleError, IterationCapError, ValidationError
from .validation import as_binary_matrix, as_selection, require

__all__ = [
    "QpInstance",
    "Assignment",
    "RelaxationState",
    "build_instance",
    "objective_value",
    "pair_set_of",
    "solve",
    "brute_force",
    "relax_hierarchy",
    "check_assignment",
    "save_assignment",
    "load_assignment",
]

_TOL = 1e-9
_DUPLICATE_CAP = 100
_EAGER_ROW_LIMIT = 4096
_ORACLE_GUARD = 10**7


@dataclass
class QpInstance:
    """One fully specified optimization problem."""

    psi: np.ndarray
    redundancy: np.ndarray
    bias: np.ndarray
    k: int
    n: int
    pair_set: frozenset
    lambda_redundancy: float = 0.1
    lambda_bias: float = 0.1
    mip_gap: float = 0.01

    def __post_init__(self):
        self.psi = np.asarray(self.psi, dtype=np.float64)
        self.redundancy = np.asarray(self.redundancy, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        require(self.psi.ndim == 2, "psi must be C x Q")
        c, q = self.psi.shape
        require(self.redundancy.shape == (q, q), "redundancy must be Q x Q")
        require(self.bias.shape == (q,), "bias must have length Q")
        if not np.allclose(self.redundancy, self.redundancy.T):
            raise ValidationError("redundancy must be symmetric")
        require(1 <= self.n <= self.k <= q, "need 1 <= n <= k <= Q")
        require(self.mip_gap >= 0, "mip_gap must be >= 0")
        if math.comb(self.k, self.n) < c:
            raise InfeasibleError(
                f"{c} classes cannot receive distinct rows: "
                f"C({self.k}, {self.n}) = {math.comb(self.k, self.n)} < {c}"
            )
        self.pair_set = frozenset(
            (int(i), int(j)) for i, j in self.pair_set
        )
        for i, j in self.pair_set:
            require(0 <= i < j < c, f"pair ({i}, {j}) out of order or range")

    @property
    def n_classes(self):
        return self.psi.shape[0]

    @property
    def n_features(self):
        return self.psi.shape[1]


@dataclass
class Assignment:
    """A feasible solution: selection vector plus per-class rows.

    ``assignment`` columns follow the selected features in ascending raw
    index order.  ``pairs_shared`` records every class pair whose rows share
    exactly n - 1 features (computed when not given).
    """

    selection: np.ndarray
    assignment: np.ndarray
    objective: float
    gap: float
    n_per_class: int
    pairs_shared: frozenset | None = None

    def __post_init__(self):
        self.selection = as_selection(self.selection)
        self.assignment = as_binary_matrix(self.assignment, "assignment")
        k = int(self.selection.sum())
        require(
            self.assignment.shape[1] == k,
            f"assignment has {self.assignment.shape[1]} columns for {k} "
            "selected features",
        )
        sums = self.assignment.sum(axis=1)
        if not np.all(sums == self.n_per_class):
            raise ValidationError("every assignment row must sum to n_per_class")
        rows = [tuple(r) for r in self.assignment]
        if len(set(rows)) != len(rows):
            raise ValidationError("assignment rows must be pairwise distinct")
        if self.pairs_shared is None:
            self.pairs_shared = _shared_pairs(self.assignment, self.n_per_class)
        else:
            self.pairs_shared = frozenset(
                (int(i), int(j)) for i, j in self.pairs_shared
            )

    @property
    def selected_indices(self):
        return np.flatnonzero(self.selection)

    @property
    def n_classes(self):
        return self.assignment.shape[0]

    @property
    def assignment_selected(self):
        return self.assignment

    @property
    def pairs(self):
        return self.pairs_shared

    def assignment_full(self):
        """Rows scattered back over all raw features (zeros off selection)."""
        full = np.zeros(
            (self.assignment.shape[0], self.selection.shape[0]), dtype=np.int8
        )
        full[:, self.selected_indices] = self.assignment
        return full


@dataclass
class RelaxationState:
    """Outcome of the pair-constraint relaxation.

    ``pairs`` lists every class pair that ever shared n - 1 features across
    the iterates (plus the original constrained pairs), sorted; ``choice``
    is the aligned 0/1 vector of pairs still sharing in the final solution.
    """

    pairs: tuple
    choice: tuple
    converged: bool
    iterations: int

    @property
    def ever_paired(self):
        return frozenset(self.pairs)

    @property
    def n_enforced(self):
        return int(sum(self.choice))


def build_instance(
    bundle,
    k,
    n,
    *,
    lambda_redundancy=0.1,
    lambda_bias=0.1,
    mip_gap=0.01,
    pair_set=None,
):
    """Assemble a QpInstance from a SimilarityBundle.

    ``pair_set`` defaults to the bundle's thresholded pairs; pass an empty
    set to drop the pair constraints entirely.
    """
    if pair_set is None:
        pair_set = bundle.pair_set
    return QpInstance(
        psi=bundle.class_feature,
        redundancy=bundle.feature_feature,
        bias=bundle.locality,
        k=int(k),
        n=int(n),
        pair_set=frozenset(pair_set),
        lambda_redundancy=float(lambda_redundancy),
        lambda_bias=float(lambda_bias),
        mip_gap=float(mip_gap),
    )


def objective_value(inst, selection, assignment):
    """Canonical objective of a (selection, rows) pair.

    Both the solver and the oracle report objectives through this one code
    path so equal solutions produce bit-equal values.
    """
    sel_idx = np.flatnonzero(np.asarray(selection))
    main = float((inst.psi[:, sel_idx] * np.asarray(assignment)).sum())
    return main + _selection_terms(inst, sel_idx)


def _selection_terms(inst, sel_idx):
    red = inst.redundancy[np.ix_(sel_idx, sel_idx)]
    pair = float(np.triu(red, 1).sum())
    bias = float(inst.bias[sel_idx].sum())
    return inst.lambda_bias * bias - inst.lambda_redundancy * pair


def pair_set_of(assignment, n_per_class=None):
    """Class pairs whose rows share exactly n - 1 features.

    Accepts an Assignment, or a raw binary row matrix together with
    ``n_per_class``.  Duplicate rows are rejected either way.
    """
    if n_per_class is None:
        rows_matrix = assignment.assignment
        n_per_class = assignment.n_per_class
    else:
        rows_matrix = as_binary_matrix(assignment, "assignment")
        rows = [tuple(r) for r in rows_matrix]
        if len(set(rows)) != len(rows):
            raise ValidationError("assignment rows must be pairwise distinct")
    return _shared_pairs(rows_matrix, n_per_class)


def _shared_pairs(rows_matrix, n):
    rows = [frozenset(np.flatnonzero(r)) for r in np.asarray(rows_matrix)]
    out = set()
    for i in range(len(rows)):
        for j in range(i + 1, len(rows)):
            if len(rows[i] & rows[j]) == n - 1:
                out.add((i, j))
    return frozenset(out)


def check_assignment(inst, asg):
    """Verify every constraint; raises ValidationError with the first failure."""
    require(int(asg.selection.sum()) == inst.k, "selection must pick exactly k")
    require(asg.selection.shape[0] == inst.n_features, "selection length mismatch")
    require(asg.assignment.shape[0] == inst.n_classes, "class count mismatch")
    require(asg.n_per_class == inst.n, "row sum mismatch with the instance")
    shared = _shared_pairs(asg.assignment, inst.n)
    missing = [p for p in sorted(inst.pair_set) if p not in shared]
    if missing:
        raise ValidationError(f"pair constraints not satisfied: {missing}")
    return True


def _better(obj, key, best_obj, best_key, tol=_TOL):
    """Replacement rule shared by solver and oracle: higher objective wins,
    ties within tolerance fall back to the smaller lexicographic key."""
    if best_key is None:
        return True
    if obj > best_obj + tol:
        return True
    if obj >= best_obj - tol and key < best_key:
        return True
    return False


class _RowGen:
    """n-subsets of k columns for one class, by nonincreasing summed value.

    Small spaces are enumerated eagerly; larger ones lazily through a heap
    over position tuples into the value-sorted column order.  ``get(i)``
    returns the i-th candidate as (sum, row) with the row a sorted tuple of
    column indices, or None past the end.
    """

    def __init__(self, values, n):
        self._n = n
        self._k = len(values)
        self._emitted = []
        if math.comb(self._k, n) <= _EAGER_ROW_LIMIT:
            for combo in itertools.combinations(range(self._k), n):
                s = 0.0
                for j in combo:
                    s += values[j]
                self._emitted.append((s, combo))
            self._emitted.sort(key=lambda t: (-t[0], t[1]))
            self._heap = None
            return
        order = sorted(range(self._k), key=lambda j: (-values[j], j))
        self._cols = order
        self._vals = [values[j] for j in order]
        self._heap = []
        self._seen = set()
        self._push(tuple(range(n)))

    def _push(self, pos):
        if pos in self._seen:
            return
        self._seen.add(pos)
        s = 0.0
        for p in pos:
            s += self._vals[p]
        row = tuple(sorted(self._cols[p] for p in pos))
        heapq.heappush(self._heap, (-s, row, pos))

    def get(self, i):
        if self._heap is None:
            return self._emitted[i] if i < len(self._emitted) else None
        while len(self._emitted) <= i and self._heap:
            negs, row, pos = heapq.heappop(self._heap)
            self._emitted.append((-negs, row))
            n = self._n
            for t in range(n):
                nxt = pos[t] + 1
                if nxt >= self._k:
                    continue
                if t + 1 < n and nxt >= pos[t + 1]:
                    continue
                self._push(pos[:t] + (nxt,) + pos[t + 1 :])
        return self._emitted[i] if i < len(self._emitted) else None


def _greedy_row(values, n):
    """Best single row: top-n values, ties preferring higher column index,
    which yields the lexicographically smallest binary row."""
    order = sorted(range(len(values)), key=lambda j: (-values[j], -j))
    row = tuple(sorted(order[:n]))
    s = 0.0
    for j in row:
        s += values[j]
    return s, row


def _search(psi_sel, n, hard_pairs, count_pairs, need, cuts, floor):
    """Exact assignment of one row per class over a fixed selection.

    hard_pairs must share exactly n - 1 columns; of count_pairs, at least
    ``need`` must.  ``cuts`` are (c1, c2, row) combos that may not hold
    simultaneously.  Solutions with main term strictly below ``floor`` are
    discarded.  Returns (main, rows, key) or None; ties resolve to the
    smallest flat binary key.  Distinct rows are NOT enforced here.
    """
    C, k = psi_sel.shape
    vals = [list(map(float, psi_sel[c])) for c in range(C)]
    best = [_greedy_row(vals[c], n) for c in range(C)]
    best_sum = [b[0] for b in best]
    best_row = [b[1] for b in best]

    hard_pairs = [tuple(sorted(p)) for p in hard_pairs]
    count_pairs = [tuple(sorted(p)) for p in count_pairs]
    cut_classes = {c for c1, c2, _ in cuts for c in (c1, c2)}
    bound = sorted(
        {c for p in hard_pairs for c in p}
        | {c for p in count_pairs for c in p}
        | cut_classes
    )
    adj = defaultdict(set)
    for a, b in hard_pairs + count_pairs:
        adj[a].add(b)
        adj[b].add(a)
    order = []
    seen = set()
    for c in bound:
        if c in seen:
            continue
        queue = deque([c])
        seen.add(c)
        while queue:
            u = queue.popleft()
            order.append(u)
            for v in sorted(adj[u]):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
    pos_of = {c: i for i, c in enumerate(order)}
    L = len(order)

    free_main = 0.0
    for c in range(C):
        if c not in pos_of:
            free_main += best_sum[c]

    suffix = [0.0] * (L + 1)
    for i in range(L - 1, -1, -1):
        suffix[i] = suffix[i + 1] + best_sum[order[i]]

    hard_earlier = [[] for _ in range(L)]
    for a, b in hard_pairs:
        lo, hi = sorted((pos_of[a], pos_of[b]), key=lambda p: p)
        hard_earlier[hi].append(order[lo])
    count_earlier = [[] for _ in range(L)]
    closed_upto = [0] * (L + 1)
    for a, b in count_pairs:
        lo, hi = sorted((pos_of[a], pos_of[b]))
        count_earlier[hi].append(order[lo])
    for i in range(L):
        closed_upto[i + 1] = closed_upto[i] + len(count_earlier[i])
    total_count = len(count_pairs)

    cuts_by_class = defaultdict(list)
    for c1, c2, row in cuts:
        cuts_by_class[c1].append((row, c2))
        cuts_by_class[c2].append((row, c1))

    gens = {}

    def gen_for(c):
        if c not in gens:
            gens[c] = _RowGen(vals[c], n)
        return gens[c]

    binkeys = {}

    def binkey(row):
        bk = binkeys.get(row)
        if bk is None:
            rs = set(row)
            bk = tuple(1 if j in rs else 0 for j in range(k))
            binkeys[row] = bk
        return bk

    chosen = {}
    state = {"main": None, "key": None, "rows": None}

    def record():
        rows = [chosen.get(c, best_row[c]) for c in range(C)]
        main = 0.0
        for c in range(C):
            s = 0.0
            for j in rows[c]:
                s += vals[c][j]
            main += s
        if main < floor:
            return
        key = tuple(binkey(r) for r in rows)
        if _better(main, key, state["main"], state["key"]):
            state["main"] = main
            state["key"] = key
            state["rows"] = rows

    def swap_candidates(c, partners):
        base = chosen[partners[0]]
        base_set = set(base)
        others = [set(chosen[p]) for p in partners[1:]]
        cands = []
        for a in base:
            rest = base_set - {a}
            for bcol in range(k):
                if bcol in base_set:
                    continue
                row_set = rest | {bcol}
                if any(len(row_set & o) != n - 1 for o in others):
                    continue
                row = tuple(sorted(row_set))
                s = 0.0
                for j in row:
                    s += vals[c][j]
                cands.append((s, row))
        cands.sort(key=lambda t: (-t[0], t[1]))
        return cands

    def cut_ok(c, row):
        for crow, other in cuts_by_class.get(c, ()):
            if crow == row and chosen.get(other) == crow:
                return False
        return True

    def rec(pos, partial, satisfied):
        if pos == L:
            if satisfied >= need:
                record()
            return
        c = order[pos]
        future = suffix[pos + 1]
        partners = hard_earlier[pos]
        if partners:
            cands = swap_candidates(c, partners)
            source = cands.__getitem__
            limit = len(cands)
        else:
            gen = gen_for(c)
            source = gen.get
            limit = None
        i = 0
        while limit is None or i < limit:
            item = source(i)
            if item is None:
                break
            i += 1
            s, row = item
            thr = floor if state["key"] is None else max(floor, state["main"] - _TOL)
            if partial + s + future < thr:
                break
            if not cut_ok(c, row):
                continue
            add = 0
            if count_earlier[pos]:
                row_set = set(row)
                for p in count_earlier[pos]:
                    if len(row_set & set(chosen[p])) == n - 1:
                        add += 1
            if satisfied + add + (total_count - closed_upto[pos + 1]) < need:
                continue
            chosen[c] = row
            rec(pos + 1, partial + s, satisfied + add)
            del chosen[c]

    if L == 0:
        if need <= 0:
            record()
    else:
        rec(0, free_main, 0)
    if state["key"] is None:
        return None
    return state["main"], state["rows"], state["key"]


def _duplicate_cuts(rows):
    """No-good cuts for every duplicated row pair in a solution."""
    by_row = defaultdict(list)
    for c, row in enumerate(rows):
        by_row[row].append(c)
    cuts = []
    for row, classes in by_row.items():
        for a, b in itertools.combinations(classes, 2):
            cuts.append((a, b, row))
    return cuts


def _rows_to_matrix(rows, k):
    mat = np.zeros((len(rows), k), dtype=np.int8)
    for c, row in enumerate(rows):
        mat[c, list(row)] = 1
    return mat


def _solve_once(inst, cuts_raw):
    """One branch-and-bound pass over selections with the given no-good cuts.

    Returns (sel_idx, rows, objective, gap) or raises InfeasibleError.
    """
    psi = inst.psi
    C, Q = psi.shape
    k, n = inst.k, inst.n
    lam_r, lam_b = inst.lambda_redundancy, inst.lambda_bias
    R, b = inst.redundancy, inst.bias
    gap_cfg = inst.mip_gap

    branch = sorted(range(Q), key=lambda q: (-float(psi[:, q].max()), q))
    neg = np.minimum(R, 0.0)
    neg_suffix = [0.0] * (Q + 1)
    for pos in range(Q - 1, -1, -1):
        tail = branch[pos + 1 :]
        neg_suffix[pos] = neg_suffix[pos + 1] + (
            float(neg[branch[pos], tail].sum()) if tail else 0.0
        )

    best = {"obj": None, "key": None, "sel": None, "rows": None}
    pruned_max = [-math.inf]
    colsum = np.zeros(Q, dtype=np.float64)
    incl_pairsum = [0.0]
    incl_bias = [0.0]

    def prune_threshold():
        if best["key"] is None:
            return None
        if gap_cfg > 0:
            return best["obj"] + gap_cfg * abs(best["obj"])
        return best["obj"] - _TOL

    def leaf(included):
        sel = sorted(included)
        sel_arr = np.asarray(sel, dtype=np.int64)
        const = _selection_terms(inst, sel_arr)
        thr = prune_threshold()
        floor = -math.inf if thr is None else thr - const
        local_index = {q: i for i, q in enumerate(sel)}
        sel_set = set(sel)
        cuts_local = []
        for c1, c2, raw_row in cuts_raw:
            if set(raw_row) <= sel_set:
                cuts_local.append(
                    (c1, c2, tuple(sorted(local_index[q] for q in raw_row)))
                )
        res = _search(
            psi[:, sel_arr], n, inst.pair_set, (), 0, cuts_local, floor
        )
        if res is None:
            return
        _, rows, _ = res
        sel_vec = np.zeros(Q, dtype=np.int8)
        sel_vec[sel_arr] = 1
        mat = _rows_to_matrix(rows, k)
        obj = objective_value(inst, sel_vec, mat)
        key = (tuple(int(v) for v in sel_vec), tuple(int(v) for v in mat.ravel()))
        if _better(obj, key, best["obj"], best["key"]):
            best.update(obj=obj, key=key, sel=sel, rows=rows)

    def rec(pos, included, r):
        nonlocal colsum
        if r == 0:
            leaf(included)
            return
        remaining = Q - pos
        if remaining < r:
            return
        if remaining == r:
            leaf(included + branch[pos:])
            return
        thr = prune_threshold()
        if thr is not None:
            avail = included + branch[pos:]
            psi_av = psi[:, avail]
            if psi_av.shape[1] == n:
                main_bound = float(psi_av.sum())
            else:
                main_bound = float(
                    np.partition(psi_av, psi_av.shape[1] - n, axis=1)[
                        :, psi_av.shape[1] - n :
                    ].sum()
                )
            suffix_b = b[branch[pos:]]
            if r < suffix_b.size:
                top_r = float(np.partition(suffix_b, suffix_b.size - r)[
                    suffix_b.size - r :
                ].sum())
            else:
                top_r = float(suffix_b.sum())
            bias_bound = incl_bias[0] + top_r
            suffix_cols = colsum[branch[pos:]]
            if r < suffix_cols.size:
                small_r = float(np.partition(suffix_cols, r - 1)[:r].sum())
            else:
                small_r = float(suffix_cols.sum())
            pair_lb = incl_pairsum[0] + small_r + neg_suffix[pos]
            bound = main_bound + lam_b * bias_bound - lam_r * pair_lb
            if bound < thr:
                if bound > pruned_max[0]:
                    pruned_max[0] = bound
                return
        q = branch[pos]
        # include branch first: strong incumbents early
        incl_pairsum[0] += float(colsum[q])
        incl_bias[0] += float(b[q])
        colsum += R[q]
        included.append(q)
        rec(pos + 1, included, r - 1)
        included.pop()
        colsum -= R[q]
        incl_bias[0] -= float(b[q])
        incl_pairsum[0] -= float(colsum[q])
        rec(pos + 1, included, r)

    old_limit = sys.getrecursionlimit()
    needed = Q + C + 200
    try:
        if old_limit < needed:
            sys.setrecursionlimit(needed)
        rec(0, [], k)
    finally:
        sys.setrecursionlimit(old_limit)

    if best["key"] is None:
        raise InfeasibleError(
            "no feasible assignment for any feature selection",
            pair_constraints=sorted(inst.pair_set),
        )
    obj = best["obj"]
    gap = 0.0
    if pruned_max[0] > -math.inf and abs(obj) > 0:
        gap = max(0.0, (pruned_max[0] - obj) / abs(obj))
    return best["sel"], best["rows"], obj, gap


def solve(inst):
    """Globally optimal constrained assignment (within mip_gap).

    Duplicate rows are eliminated lazily: each solve pass that produces
    duplicated rows contributes no-good cuts on those exact row pairs and
    the instance is re-solved, up to an iteration cap.
    """
    cuts = []
    for _ in range(_DUPLICATE_CAP):
        sel, rows, obj, gap = _solve_once(inst, cuts)
        dups = _duplicate_cuts(rows)
        if not dups:
            sel_vec = np.zeros(inst.n_features, dtype=np.int8)
            sel_vec[list(sel)] = 1
            return Assignment(
                selection=sel_vec,
                assignment=_rows_to_matrix(rows, inst.k),
                objective=obj,
                gap=gap,
                n_per_class=inst.n,
            )
        for c1, c2, row in dups:
            cuts.append((c1, c2, tuple(sorted(sel[j] for j in row))))
    raise IterationCapError(
        f"duplicate elimination did not converge in {_DUPLICATE_CAP} iterations"
    )


def brute_force(inst):
    """Exhaustive oracle: enumerate every selection and every feasible
    assignment directly (distinct rows enforced in the enumeration, no cuts).

    Only intended for small instances; guarded by a work estimate.  Must
    agree with ``solve`` at mip_gap = 0 on the objective and tie-break.
    """
    C, Q = inst.psi.shape
    k, n = inst.k, inst.n
    work = math.comb(Q, k) * math.comb(k, n) * C
    if work > _ORACLE_GUARD:
        raise ValidationError(
            f"instance too large for exhaustive verification ({work} > {_ORACLE_GUARD})"
        )
    partners_lt = defaultdict(list)
    for i, j in inst.pair_set:
        partners_lt[j].append(i)

    best = {"obj": None, "key": None, "sel": None, "rows": None}

    for sel in itertools.combinations(range(Q), k):
        sel_arr = np.asarray(sel, dtype=np.int64)
        const = _selection_terms(inst, sel_arr)
        vals = [list(map(float, inst.psi[c, sel_arr])) for c in range(C)]
        cands = []
        for c in range(C):
            rows = []
            for combo in itertools.combinations(range(k), n):
                s = 0.0
                for j in combo:
                    s += vals[c][j]
                rows.append((s, combo))
            rows.sort(key=lambda t: (-t[0], t[1]))
            cands.append(rows)
        suffix = [0.0] * (C + 1)
        for c in range(C - 1, -1, -1):
            suffix[c] = suffix[c + 1] + cands[c][0][0]

        sel_vec = np.zeros(Q, dtype=np.int8)
        sel_vec[sel_arr] = 1
        sel_key = tuple(int(v) for v in sel_vec)

        chosen = []
        used = set()

        def emit():
            mat = _rows_to_matrix(chosen, k)
            obj = objective_value(inst, sel_vec, mat)
            key = (sel_key, tuple(int(v) for v in mat.ravel()))
            if _better(obj, key, best["obj"], best["key"]):
                best.update(obj=obj, key=key, sel=list(sel), rows=list(chosen))

        def enum(c, partial):
            if c == C:
                emit()
                return
            floor = None
            if best["key"] is not None:
                floor = best["obj"] - _TOL - const
            for s, row in cands[c]:
                if floor is not None and partial + s + suffix[c + 1] < floor:
                    break
                if row in used:
                    continue
                row_set = set(row)
                bad = False
                for p in partners_lt.get(c, ()):
                    if len(row_set & set(chosen[p])) != n - 1:
                        bad = True
                        break
                if bad:
                    continue
                chosen.append(row)
                used.add(row)
                enum(c + 1, partial + s)
                used.discard(row)
                chosen.pop()

        enum(0, 0.0)

    if best["key"] is None:
        raise InfeasibleError(
            "no feasible assignment for any feature selection",
            pair_constraints=sorted(inst.pair_set),
        )
    sel_vec = np.zeros(Q, dtype=np.int8)
    sel_vec[best["sel"]] = 1
    return Assignment(
        selection=sel_vec,
        assignment=_rows_to_matrix(best["rows"], k),
        objective=best["obj"],
        gap=0.0,
        n_per_class=n,
    )


def _assign_fixed_selection(psi_sel, n, count_pairs, need):
    """Count-constrained assignment over a frozen selection, with the same
    lazy duplicate elimination as the full solve."""
    cuts = []
    for _ in range(_DUPLICATE_CAP):
        res = _search(psi_sel, n, (), count_pairs, need, cuts, -math.inf)
        if res is None:
            raise InfeasibleError(
                f"cannot keep {need} shared pairs over the frozen selection",
                pair_constraints=sorted(count_pairs),
            )
        _, rows, _ = res
        dups = _duplicate_cuts(rows)
        if not dups:
            return rows
        cuts.extend(dups)
    raise IterationCapError(
        f"duplicate elimination did not converge in {_DUPLICATE_CAP} iterations"
    )


def relax_hierarchy(init, inst, cap=50):
    """Post-hoc relaxation: freeze the selection, let pair constraints float.

    Starting from ``init``, repeatedly re-solve the assignment with the
    selection frozen, requiring that at least |pair_set| pairs out of every
    pair that ever shared n - 1 features (initially init's shared pairs plus
    the constrained set) still share n - 1.  Stops when the solution and the
    candidate pair set are unchanged for one iteration.  Hitting ``cap``
    returns the best iterate with converged=False.

    Returns (Assignment, RelaxationState).
    """
    require(cap >= 1, "cap must be >= 1")
    require(
        init.selection.shape[0] == inst.n_features
        and int(init.selection.sum()) == inst.k
        and init.n_per_class == inst.n
        and init.assignment.shape[0] == inst.n_classes,
        "init does not match the instance dimensions",
    )
    sel_idx = init.selected_indices
    psi_sel = inst.psi[:, sel_idx]
    need = len(inst.pair_set)
    T = set(init.pairs_shared) | set(inst.pair_set)
    prev_rows = [
        tuple(int(j) for j in np.flatnonzero(r)) for r in init.assignment
    ]

    rows = prev_rows
    converged = False
    iterations = 0
    for _ in range(cap):
        iterations += 1
        rows = _assign_fixed_selection(psi_sel, inst.n, sorted(T), need)
        new_pairs = _shared_pairs(_rows_to_matrix(rows, inst.k), inst.n)
        t_new = T | set(new_pairs)
        if need == 0:
            T = t_new
            converged = True
            break
        if rows == prev_rows and t_new == T:
            converged = True
            break
        prev_rows = rows
        T = t_new

    mat = _rows_to_matrix(rows, inst.k)
    final_pairs = _shared_pairs(mat, inst.n)
    pairs_sorted = tuple(sorted(T))
    choice = tuple(1 if p in final_pairs else 0 for p in pairs_sorted)
    state = RelaxationState(
        pairs=pairs_sorted,
        choice=choice,
        converged=converged,
        iterations=iterations,
    )
    asg = Assignment(
        selection=init.selection.copy(),
        assignment=mat,
        objective=objective_value(inst, init.selection, mat),
        gap=0.0,
        n_per_class=inst.n,
        pairs_shared=final_pairs,
    )
    return asg, state


def save_assignment(asg, path):
    """Serialize an Assignment to JSON with raw feature ids per class row."""
    sel = [int(q) for q in asg.selected_indices]
    rows = [
        [sel[j] for j in np.flatnonzero(row)] for row in asg.assignment
    ]
    payload = {
        "n_features_raw": int(asg.selection.shape[0]),
        "selection_indices": sel,
        "rows": rows,
        "pairs_shared": sorted(map(list, asg.pairs_shared)),
        "objective": float(asg.objective),
        "gap": float(asg.gap),
        "n_per_class": int(asg.n_per_class),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_assignment(path):
    with open(path) as fh:
        payload = json.load(fh)
    q = int(payload["n_features_raw"])
    sel = payload["selection_indices"]
    sel_vec = np.zeros(q, dtype=np.int8)
    sel_vec[sel] = 1
    local = {raw: i for i, raw in enumerate(sel)}
    mat = np.zeros((len(payload["rows"]), len(sel)), dtype=np.int8)
    for c, row in enumerate(payload["rows"]):
        for raw in row:
            mat[c, local[raw]] = 1
    return Assignment(
        selection=sel_vec,
        assignment=mat,
        objective=float(payload["objective"]),
        gap=float(payload["gap"]),
        n_per_class=int(payload["n_per_class"]),
        pairs_shared=frozenset(tuple(p) for p in payload["pairs_shared"]),
    )
