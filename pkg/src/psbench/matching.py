"""Variable-ratio greedy PS matching with caliper.

Round-robin growth: every still-eligible treated subject claims its k-th
comparator before any treated subject claims a (k+1)-th, which keeps the
variable-ratio design deterministic and order-stable.  Matching is without
replacement; a treated subject with no within-caliper comparator in the
first round is dropped.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import NoOverlapError


@dataclass(frozen=True)
class MatchResult:
    """Matched strata: one treated subject plus 1..max_ratio comparators each."""

    strata: tuple                 # ((treated_id, (comparator_ids...)), ...)
    caliper_width_logit: float    # resolved absolute caliper on the matching scale
    n_matched_treated: int
    n_matched_comparator: int

    def __post_init__(self):
        if not self.strata:
            raise NoOverlapError("a match result must contain at least one stratum")
        seen = set()
        n_comp = 0
        for treated_id, comps in self.strata:
            if len(comps) < 1:
                raise ValueError("every stratum needs at least one comparator")
            for sid in (treated_id, *comps):
                if sid in seen:
                    raise ValueError(f"subject {sid} appears in more than one stratum")
                seen.add(sid)
            n_comp += len(comps)
        if self.n_matched_treated != len(self.strata) or self.n_matched_comparator != n_comp:
            raise ValueError("matched counts inconsistent with strata")

    def subject_strata(self):
        """(subject_ids, stratum_ids, is_treated) arrays over matched subjects."""
        sids, strat, role = [], [], []
        for k, (treated_id, comps) in enumerate(self.strata):
            sids.append(treated_id)
            strat.append(k)
            role.append(1)
            for c in comps:
                sids.append(c)
                strat.append(k)
                role.append(0)
        return (
            np.array(sids, dtype=np.int64),
            np.array(strat, dtype=np.int64),
            np.array(role, dtype=np.int8),
        )

    def save_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stratum_id", "subject_id", "role"])
            for k, (treated_id, comps) in enumerate(self.strata):
                w.writerow([k, int(treated_id), "treated"])
                for c in comps:
                    w.writerow([k, int(c), "comparator"])


@dataclass(frozen=True)
class MatchDiagnostics:
    n_strata: int
    n_matched_treated: int
    n_matched_comparator: int
    mean_ratio: float
    ratio_histogram: dict  # comparators-per-stratum -> stratum count


class _AliveIndex:
    """First-alive lookups over a sorted array with path-compressed skips."""

    def __init__(self, n):
        self.n = n
        # right[i]: candidate for first alive index >= i, with n as "none"
        self.right = list(range(n + 1))
        # left[i + 1]: candidate for first alive index <= i, with -1 as "none"
        self.left = list(range(-1, n))

    def find_right(self, i):
        if i >= self.n:
            return self.n
        path = []
        while self.right[i] != i:
            path.append(i)
            i = self.right[i]
            if i >= self.n:
                i = self.n
                break
        for p in path:
            self.right[p] = i
        return i

    def find_left(self, i):
        if i < 0:
            return -1
        path = []
        while self.left[i + 1] != i:
            path.append(i)
            i = self.left[i + 1]
            if i < 0:
                break
        for p in path:
            self.left[p + 1] = i
        return i

    def kill(self, i):
        self.right[i] = i + 1
        self.left[i + 1] = i - 1


def resolve_caliper(ps, caliper: float, caliper_scale: str = "sd_logit"):
    """(matching scores, absolute caliper width) for the chosen scale.

    sd_logit: distances on logit(PS), caliper = caliper * SD(logit(PS)).
    raw_ps: distances on the raw PS scale with an absolute caliper.
    """
    ps = np.clip(np.asarray(ps, dtype=np.float64), 1e-12, 1 - 1e-12)
    if caliper_scale == "sd_logit":
        scores = np.log(ps / (1 - ps))
        return scores, float(caliper * scores.std())
    if caliper_scale == "raw_ps":
        return ps, float(caliper)
    raise ValueError(f"unknown caliper_scale {caliper_scale!r}")


def match_variable_ratio(
    ps,
    treatment,
    max_ratio: int = 10,
    caliper: float = 0.2,
    caliper_scale: str = "sd_logit",
    subject_ids=None,
) -> MatchResult:
    """Greedy round-robin variable-ratio matching without replacement.

    Treated subjects are visited in PS-descending order (ties toward the
    smaller id); each claims its nearest unmatched within-caliper comparator
    per round, distance ties toward the smaller comparator id.
    """
    ps = np.asarray(ps, dtype=np.float64)
    z = np.asarray(treatment)
    if subject_ids is None:
        subject_ids = np.arange(len(ps), dtype=np.int64)
    else:
        subject_ids = np.asarray(subject_ids, dtype=np.int64)
    if not (np.any(z == 1) and np.any(z == 0)):
        raise NoOverlapError("both treatment arms must be nonempty")
    if max_ratio < 1:
        raise ValueError("max_ratio must be >= 1")

    scores, width = resolve_caliper(ps, caliper, caliper_scale)

    t_rows = np.flatnonzero(z == 1)
    c_rows = np.flatnonzero(z == 0)
    # treated visit order: PS descending, ties by smaller subject id
    t_order = t_rows[np.lexsort((subject_ids[t_rows], -ps[t_rows]))]
    # comparators sorted by (score, id) ascending
    c_order = c_rows[np.lexsort((subject_ids[c_rows], scores[c_rows]))]
    c_scores = scores[c_order]
    c_ids = subject_ids[c_order]
    nc = len(c_order)
    alive = _AliveIndex(nc)

    def claim(tscore):
        """Nearest alive comparator within the caliper; ties to smaller id."""
        i = int(np.searchsorted(c_scores, tscore, side="left"))
        r = alive.find_right(i)
        l = alive.find_left(i - 1)
        dr = abs(c_scores[r] - tscore) if r < nc else np.inf
        dl = abs(tscore - c_scores[l]) if l >= 0 else np.inf
        d = min(dr, dl)
        if d > width:
            return None

        def run_first(c):
            # smallest-id alive comparator sharing c's score (sorted by id within score)
            pos = int(np.searchsorted(c_scores, c_scores[c], side="left"))
            return alive.find_right(pos)

        candidates = []
        if dr == d:
            candidates.append(run_first(r))
        if dl == d:
            candidates.append(run_first(l))
        best = min(candidates, key=lambda c: c_ids[c])
        alive.kill(best)
        return best

    strata_map = {}       # treated row -> list of comparator sorted-positions
    eligible = list(t_order)
    for _round in range(max_ratio):
        still = []
        for trow in eligible:
            got = claim(scores[trow])
            if got is None:
                continue
            strata_map.setdefault(trow, []).append(got)
            still.append(trow)
        eligible = still
        if not eligible:
            break

    strata = []
    n_comp = 0
    for trow in t_order:
        comps = strata_map.get(trow)
        if comps:
            strata.append((int(subject_ids[trow]), tuple(int(c_ids[c]) for c in comps)))
            n_comp += len(comps)
    if not strata:
        raise NoOverlapError("no treated subject found a within-caliper comparator")
    return MatchResult(
        strata=tuple(strata),
        caliper_width_logit=width,
        n_matched_treated=len(strata),
        n_matched_comparator=n_comp,
    )


def match_diagnostics(result: MatchResult) -> MatchDiagnostics:
    """Counts, mean matching ratio, and per-ratio histogram of a match result."""
    hist = {}
    for _, comps in result.strata:
        hist[len(comps)] = hist.get(len(comps), 0) + 1
    n = len(result.strata)
    return MatchDiagnostics(
        n_strata=n,
        n_matched_treated=result.n_matched_treated,
        n_matched_comparator=result.n_matched_comparator,
        mean_ratio=result.n_matched_comparator / n,
        ratio_histogram=dict(sorted(hist.items())),
    )
