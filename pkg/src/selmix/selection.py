"""Deterministic selection procedures with stable outcome fingerprints.

A procedure is a pure function y -> SelectionOutcome; the Monte Carlo
engine re-runs it on every rebuilt response and compares fingerprints, so
purity and determinism are hard contracts here: fixed tie-breaking by term
or candidate index, fixed optimizer settings, no mutable shared state.
Internal caches (REML workspaces) are keyed by the candidate model only and
dropped when a procedure is pickled to a worker.

The backward elimination uses naive Wald z-statistics on the Bayesian
covariance diagonal rather than Satterthwaite-df t-tests: the selective
inference downstream only requires a deterministic, re-runnable rule, so
fidelity to packaged mixed-model t-tests is deliberately sacrificed for
reproducibility.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import stats

from .mmfit import FitError, RemlWorkspace, caic, fit_model, solve_blup
from .modelcore import CovarianceModel, ModelSpec, as_response


@lru_cache(maxsize=16384)
def _fingerprint(fixed_set, ranef_set, winner, flag) -> str:
    # Congruency checking recomputes this for every resampled outcome and
    # the distinct outcomes per draw number only a handful, so the cache
    # hit rate is essentially 1.
    payload = json.dumps(
        {"fixed": sorted(fixed_set), "ranef": sorted(ranef_set),
         "winner": winner, "flag": flag},
        sort_keys=True, separators=(",", ":"),
    )
    return hashlib.sha256(payload.encode()).hexdigest()


@dataclass(frozen=True)
class SelectionOutcome:
    """Selected fixed/random term sets plus the winning candidate id."""

    fixed_set: tuple
    ranef_set: tuple
    winner: str | None = None
    flag: str = "ok"
    fingerprint: str = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "fixed_set", tuple(sorted(self.fixed_set)))
        object.__setattr__(self, "ranef_set", tuple(sorted(self.ranef_set)))
        object.__setattr__(
            self, "fingerprint",
            _fingerprint(self.fixed_set, self.ranef_set, self.winner, self.flag),
        )

    def same_selection(self, other: "SelectionOutcome") -> bool:
        return self.fingerprint == other.fingerprint


class SelectionProcedure:
    """Base for procedures: evaluate(y) must be pure and deterministic."""

    description: str = "abstract"
    candidate_registry: tuple = ()

    def evaluate(self, y) -> SelectionOutcome:
        raise NotImplementedError

    def select_model(self, y):
        """(outcome, selected ModelSpec, FitResult) for reporting callers."""
        raise NotImplementedError

    def __getstate__(self):
        state = dict(self.__dict__)
        state.pop("_ws_cache", None)
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)
        self.__dict__["_ws_cache"] = {}


class BackwardEliminationProcedure(SelectionProcedure):
    """Successive reduction of fixed effects by naive Wald p-values.

    Refits with REML after each drop (cov_policy="reml") or solves with a
    fixed covariance (cov_policy=CovarianceModel).  The term with the
    largest two-sided normal p-value among the droppable single-column
    fixed terms is removed while its p-value exceeds alpha; ties break to
    the earliest term.  Fit failures abort with the current model as the
    outcome, flagged.
    """

    def __init__(self, model_full: ModelSpec, cov_policy="reml",
                 alpha: float = 0.05, protected=("(Intercept)",),
                 structure=None, warm_starts=None, warm_step: float = 0.1):
        if not 0 < alpha < 1:
            raise ValueError("alpha must be in (0, 1)")
        for term in model_full.fixed_terms:
            if term in protected:
                continue
            if model_full.term_columns(term).size != 1:
                raise ValueError(
                    f"backward elimination requires single-column fixed terms, "
                    f"got {term!r}"
                )
        self.model_full = model_full
        self.cov_policy = cov_policy
        self.alpha = float(alpha)
        self.protected = tuple(protected)
        self.structure = structure
        self.warm_starts = dict(warm_starts) if warm_starts else None
        self.warm_step = warm_step
        self.description = (
            f"backward_pvalue(alpha={alpha}, policy="
            f"{cov_policy if isinstance(cov_policy, str) else cov_policy.provenance})"
        )
        self.candidate_registry = (model_full,)
        self._ws_cache: dict = {}

    def _fit(self, model: ModelSpec, y: np.ndarray):
        if isinstance(self.cov_policy, CovarianceModel):
            return solve_blup(model, self.cov_policy, y)
        if model.q == 0:
            return fit_model(model, y)
        key = model.fixed_terms
        ws = self._ws_cache.get(key)
        if ws is None:
            ws = RemlWorkspace(model, structure=self.structure)
            self._ws_cache[key] = ws
        start = None
        step = 0.5
        if self.warm_starts is not None and key in self.warm_starts:
            start = self.warm_starts[key]
            step = self.warm_step
        est = ws.fit(y=y, start=start, step=step)
        return ws.blup(est, y)

    def _run(self, y, record=None):
        y = as_response(y)
        current = self.model_full
        fit = None
        while True:
            try:
                fit = self._fit(current, y)
            except FitError:
                return self._outcome(current, flag="aborted"), current, fit
            if record is not None and fit.reml_theta is not None:
                record[current.fixed_terms] = fit.reml_theta
            droppable = [t for t in current.fixed_terms if t not in self.protected]
            if not droppable:
                break
            pvals = np.empty(len(droppable))
            for i, term in enumerate(droppable):
                j = int(current.term_columns(term)[0])
                z = fit.beta_hat[j] / math.sqrt(fit.k_inv[j, j])
                pvals[i] = 2.0 * stats.norm.sf(abs(z))
            worst = int(np.argmax(pvals))
            if pvals[worst] <= self.alpha:
                break
            current = current.drop_fixed_term(droppable[worst])
        return self._outcome(current), current, fit

    def _outcome(self, model: ModelSpec, flag: str = "ok") -> SelectionOutcome:
        fixed = model.fixed_terms
        return SelectionOutcome(
            fixed_set=fixed, ranef_set=model.ranef_terms,
            winner="+".join(sorted(fixed)), flag=flag,
        )

    def evaluate(self, y) -> SelectionOutcome:
        return self._run(y)[0]

    def select_model(self, y):
        return self._run(y)

    def primed(self, y) -> "BackwardEliminationProcedure":
        """Copy with REML warm starts frozen from this response's path.

        The returned procedure is still a pure function of its input (the
        starts are constants), just cheaper on the observed elimination
        path; selection outcomes may differ from the cold-start procedure
        only through optimizer rounding.
        """
        record: dict = {}
        self._run(y, record=record)
        return BackwardEliminationProcedure(
            self.model_full, cov_policy=self.cov_policy, alpha=self.alpha,
            protected=self.protected, structure=self.structure,
            warm_starts=record, warm_step=self.warm_step,
        )


def backward_pvalue(model_full: ModelSpec, cov_policy="reml",
                    alpha: float = 0.05, **kwargs) -> BackwardEliminationProcedure:
    """Backward p-value elimination of fixed effects (random part fixed)."""
    return BackwardEliminationProcedure(model_full, cov_policy, alpha, **kwargs)


class CaicSelectProcedure(SelectionProcedure):
    """Winner = argmin cAIC over a fixed candidate set on identical rows."""

    def __init__(self, candidates, names=None, structure=None,
                 warm_starts=None, warm_step: float = 0.1):
        candidates = tuple(candidates)
        if len(candidates) < 2:
            raise ValueError("need at least 2 candidates")
        n = candidates[0].n
        if any(c.n != n for c in candidates):
            raise ValueError("candidates must share identical rows")
        self.candidates = candidates
        self.names = tuple(names) if names is not None else tuple(
            f"cand{i}" for i in range(len(candidates))
        )
        if len(self.names) != len(candidates):
            raise ValueError("one name per candidate required")
        self.structure = structure
        self.warm_starts = dict(warm_starts) if warm_starts else None
        self.warm_step = warm_step
        self.description = f"caic_select({', '.join(self.names)})"
        self.candidate_registry = candidates
        self._ws_cache: dict = {}

    def _fit_one(self, idx: int, y: np.ndarray):
        model = self.candidates[idx]
        if model.q == 0:
            return fit_model(model, y)
        ws = self._ws_cache.get(idx)
        if ws is None:
            ws = RemlWorkspace(model, structure=None if self.structure is None
                               else self.structure[idx])
            self._ws_cache[idx] = ws
        start, step = None, 0.5
        if self.warm_starts is not None and idx in self.warm_starts:
            start, step = self.warm_starts[idx], self.warm_step
        est = ws.fit(y=y, start=start, step=step)
        return ws.blup(est, y)

    def _run(self, y, record=None):
        y = as_response(y)
        scores = np.full(len(self.candidates), np.inf)
        fits = [None] * len(self.candidates)
        for i in range(len(self.candidates)):
            try:
                fit = self._fit_one(i, y)
            except FitError:
                continue
            if record is not None and fit.reml_theta is not None:
                record[i] = fit.reml_theta
            fits[i] = fit
            scores[i] = caic(self.candidates[i], fit.cov, y, fit=fit)
        if not np.any(np.isfinite(scores)):
            out = SelectionOutcome(fixed_set=(), ranef_set=(), winner=None,
                                   flag="all-failed")
            return out, None, None
        best = int(np.argmin(scores))
        model = self.candidates[best]
        out = SelectionOutcome(
            fixed_set=model.fixed_terms, ranef_set=model.ranef_terms,
            winner=self.names[best],
        )
        return out, model, fits[best]

    def evaluate(self, y) -> SelectionOutcome:
        return self._run(y)[0]

    def select_model(self, y):
        return self._run(y)

    def primed(self, y) -> "CaicSelectProcedure":
        """Copy with per-candidate REML warm starts frozen from y."""
        record: dict = {}
        self._run(y, record=record)
        return CaicSelectProcedure(
            self.candidates, names=self.names, structure=self.structure,
            warm_starts=record, warm_step=self.warm_step,
        )


def caic_select(candidates, names=None, **kwargs) -> CaicSelectProcedure:
    """cAIC candidate-set selection; failed fits score +inf."""
    return CaicSelectProcedure(candidates, names=names, **kwargs)


class HierarchicalCaicProcedure(SelectionProcedure):
    """Two-stage cAIC selection with per-candidate row subsets.

    Candidates are specified on the full shared rows; the procedure applies
    each candidate's mask at fit time.  Stage 1 picks a winner inside each
    theory set (all members of a set must share the same row mask;
    comparisons on different rows are not meaningful).  Stage 2 compares
    the full-data stage-1 winners jointly, then updates the champion
    through pairwise comparisons against each subset-restricted winner,
    refitting both on that winner's rows.  Fit failures score +inf in
    whichever comparison they occur.
    """

    def __init__(self, theory_sets, subset_masks, names=None,
                 min_rows: int = 10):
        self.theory_sets = tuple(tuple(s) for s in theory_sets)
        flat = [c for s in self.theory_sets for c in s]
        if names is None:
            names = [f"set{i}.cand{j}" for i, s in enumerate(self.theory_sets)
                     for j in range(len(s))]
        self.names = tuple(names)
        if len(self.names) != len(flat):
            raise ValueError("one name per candidate required")
        n = flat[0].n
        if any(c.n != n for c in flat):
            raise ValueError("candidates must be specified on the full rows; "
                             "masks are applied at fit time")
        masks = []
        for m in subset_masks:
            m = np.asarray(m, dtype=bool)
            if m.shape != (n,):
                raise ValueError("masks must be boolean over the shared rows")
            if m.sum() < min_rows:
                raise ValueError(f"mask selects fewer than {min_rows} rows")
            masks.append(m)
        if len(masks) != len(flat):
            raise ValueError("one mask per candidate required")
        self.masks = tuple(masks)
        at = 0
        self._set_slices = []
        for s in self.theory_sets:
            idx = list(range(at, at + len(s)))
            first = self.masks[idx[0]]
            if any(not np.array_equal(self.masks[i], first) for i in idx):
                raise ValueError("within-set candidates must share identical rows")
            self._set_slices.append(idx)
            at += len(s)
        self.description = f"hierarchical_select({len(flat)} candidates)"
        self.candidate_registry = tuple(flat)
        self._ws_cache: dict = {}

    def _caic_on_rows(self, flat_idx: int, mask: np.ndarray, y: np.ndarray) -> float:
        model = self.candidate_registry[flat_idx]
        sub = model.with_rows(mask)
        try:
            fit = fit_model(sub, y[mask])
        except FitError:
            return math.inf
        return caic(sub, fit.cov, y[mask], fit=fit)

    def evaluate(self, y) -> SelectionOutcome:
        return self._run(y)[0]

    def select_model(self, y):
        outcome, idx = self._run_idx(as_response(y))
        if idx is None:
            return outcome, None, None
        model = self.candidate_registry[idx].with_rows(self.masks[idx])
        fit = fit_model(model, as_response(y)[self.masks[idx]])
        return outcome, model, fit

    def _run(self, y):
        outcome, idx = self._run_idx(as_response(y))
        return outcome, None if idx is None else self.candidate_registry[idx], None

    def _run_idx(self, y: np.ndarray):
        # stage 1: per-set winners on each set's common rows
        winners = []
        for idx in self._set_slices:
            scores = [self._caic_on_rows(i, self.masks[i], y) for i in idx]
            best = int(np.argmin(scores))
            if math.isfinite(scores[best]):
                winners.append(idx[best])
        if not winners:
            return SelectionOutcome(fixed_set=(), ranef_set=(), winner=None,
                                    flag="all-failed"), None
        full = [i for i in winners if bool(np.all(self.masks[i]))]
        partial = [i for i in winners if i not in full]
        if full:
            scores = [self._caic_on_rows(i, self.masks[i], y) for i in full]
            champion = full[int(np.argmin(scores))]
        else:
            champion = winners[0]
            partial = winners[1:]
        # stage 2: champion update against each subset winner on its rows
        for i in partial:
            rows = self.masks[i]
            if self._caic_on_rows(i, rows, y) < self._caic_on_rows(champion, rows, y):
                champion = i
        model = self.candidate_registry[champion]
        return SelectionOutcome(
            fixed_set=model.fixed_terms, ranef_set=model.ranef_terms,
            winner=self.names[champion],
        ), champion


def hierarchical_select(theory_sets, subset_masks, **kwargs) -> HierarchicalCaicProcedure:
    """Two-stage cAIC selection over theory sets with row-subset masks."""
    return HierarchicalCaicProcedure(theory_sets, subset_masks, **kwargs)


class CustomProcedure(SelectionProcedure):
    """Opaque user rule: any pure function y -> SelectionOutcome."""

    def __init__(self, fn, description: str = "custom",
                 candidate_registry=()):
        self._fn = fn
        self.description = description
        self.candidate_registry = tuple(candidate_registry)

    def evaluate(self, y) -> SelectionOutcome:
        out = self._fn(as_response(y))
        if not isinstance(out, SelectionOutcome):
            raise TypeError("custom procedure must return a SelectionOutcome")
        return out
