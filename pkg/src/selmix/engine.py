"""Monte Carlo machinery for selective inference by congruency resampling.

The selection event is represented by the observed outcome fingerprint.
Candidate statistics T_b come from an importance proposal q, the response is
rebuilt along the test direction, the selection procedure is re-run, and
only congruent samples (same fingerprint) enter the estimate

    p_hat(rho) = sum_b w_b 1{congruent_b, T_b >= t_obs} / sum_b w_b 1{congruent_b},

with scalar weights w_b = phi(T_b; rho, kappa) / q(T_b).  This equals the
exp(T rho / kappa) tilt of the central Gaussian up to a constant that
cancels in the ratio; everything runs in log space.  Samples are drawn once
per direction: rho enters only through the weights, so confidence bounds
reuse the same draw, as does the Bayesian covariance variant via a kappa
override.

Group statistics ||P_W y|| use sigma * chi_dof weights and a proposal
truncated at zero; only the zero null is available there.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats
from scipy.special import logsumexp

from .direction import TestDirection
from .modelcore import as_response

DEFAULT_SAMPLES = 1000
MIN_CONGRUENT = 50
ESS_WARN = 25.0


class EngineError(RuntimeError):
    pass


class LowCongruencyError(EngineError):
    """Too few congruent samples to report an estimate."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class ProposalSpec:
    """Mixture proposal for the candidate statistics.

    kind "normal-mixture" draws from sum_k weight_k N(mean_k, variance_k);
    "truncated-mixture" truncates every component at zero (group statistics)
    and samples by inverse CDF, which keeps the draw a deterministic
    function of the seed.
    """

    kind: str
    means: tuple
    variances: tuple
    weights: tuple

    def __post_init__(self):
        if self.kind not in ("normal-mixture", "truncated-mixture"):
            raise ValueError(f"unknown proposal kind {self.kind!r}")
        k = len(self.means)
        if k == 0 or len(self.variances) != k or len(self.weights) != k:
            raise ValueError("means, variances, weights must align and be nonempty")
        if any(v <= 0 for v in self.variances):
            raise ValueError("component variances must be positive")
        w = np.asarray(self.weights, dtype=float)
        if np.any(w <= 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("weights must be positive and sum to one")

    @property
    def n_components(self) -> int:
        return len(self.means)

    def component_labels(self) -> tuple:
        tag = "TN" if self.kind == "truncated-mixture" else "N"
        return tuple(
            f"{tag}({m:.4g}, {v:.4g})" for m, v in zip(self.means, self.variances)
        )

    def sample(self, n_samples: int, seed_root: int):
        """(t, component labels) drawn once; Philox keyed by the seed.

        Sampling is stratified: each component gets a proportional share of
        the budget (largest-remainder rounding) and its inverse-CDF uniforms
        are jittered grid points rather than iid draws.  The statistic is
        one-dimensional, so stratifying the uniforms removes most of the
        Monte Carlo noise in tail sums while leaving every importance
        identity intact.
        """
        rng = np.random.Generator(np.random.Philox(key=seed_root))
        counts = _proportional_counts(
            np.asarray(self.weights, dtype=float), n_samples)
        means = np.asarray(self.means, dtype=float)
        sds = np.sqrt(np.asarray(self.variances, dtype=float))
        parts = []
        labels = []
        for k, n_k in enumerate(counts):
            if n_k == 0:
                continue
            u = (np.arange(n_k) + rng.random(n_k)) / n_k
            np.clip(u, 1e-15, None, out=u)
            if self.kind == "normal-mixture":
                parts.append(means[k] + sds[k] * stats.norm.ppf(u))
            else:
                parts.append(stats.truncnorm.ppf(
                    u, a=-means[k] / sds[k], b=np.inf,
                    loc=means[k], scale=sds[k]))
            labels.append(np.full(n_k, k, dtype=np.int64))
        order = rng.permutation(n_samples)
        return np.concatenate(parts)[order], np.concatenate(labels)[order]

    def logpdf(self, t: np.ndarray, weights=None) -> np.ndarray:
        """Mixture log density, optionally under realized component weights."""
        t = np.asarray(t, dtype=float)
        means = np.asarray(self.means, dtype=float)
        sds = np.sqrt(np.asarray(self.variances, dtype=float))
        w = np.asarray(self.weights if weights is None else weights,
                       dtype=float)
        with np.errstate(divide="ignore"):
            logw = np.log(w)
        if self.kind == "normal-mixture":
            comp = stats.norm.logpdf(t[:, None], loc=means, scale=sds)
        else:
            comp = stats.truncnorm.logpdf(t[:, None], a=-means / sds, b=np.inf,
                                          loc=means, scale=sds)
        return logsumexp(comp + logw, axis=1)


def null_centered(kappa: float, rho0: float = 0.0,
                  inflate: float = 1.0) -> ProposalSpec:
    return ProposalSpec(kind="normal-mixture", means=(rho0,),
                        variances=(kappa * inflate,), weights=(1.0,))


def obs_centered(t_obs: float, kappa: float,
                 inflate: float = 1.0) -> ProposalSpec:
    return ProposalSpec(kind="normal-mixture", means=(t_obs,),
                        variances=(kappa * inflate,), weights=(1.0,))


def mixture_preset(t_obs: float, kappa: float) -> ProposalSpec:
    """Four equal components at {0, 1/3, 2/3, 1} of the observed statistic."""
    means = tuple(f * t_obs for f in (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0))
    return ProposalSpec(kind="normal-mixture", means=means,
                        variances=(kappa,) * 4, weights=(0.25,) * 4)


def group_mixture(t_obs: float, sigma_scale: float) -> ProposalSpec:
    """Truncated version of the preset for nonnegative group statistics."""
    means = tuple(f * t_obs for f in (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0))
    return ProposalSpec(kind="truncated-mixture", means=means,
                        variances=(sigma_scale ** 2,) * 4, weights=(0.25,) * 4)


def ci_mixture(t_obs: float, kappa: float) -> ProposalSpec:
    """Preset plus two wide flanks past the usual interval endpoints.

    Interval bounds live near t_obs +/- 2 sd, where the four-component
    preset has little mass and the reweighted estimate gets noisy; the
    flanks keep the effective sample size up through the whole bisection
    range.
    """
    sd = math.sqrt(kappa)
    means = tuple(f * t_obs for f in (0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0)) + (
        t_obs - 2.5 * sd, t_obs + 2.5 * sd)
    variances = (kappa,) * 4 + (2.0 * kappa, 2.0 * kappa)
    return ProposalSpec(kind="normal-mixture", means=means,
                        variances=variances, weights=(1.0 / 6.0,) * 6)


def _proportional_counts(weights: np.ndarray, n_samples: int) -> np.ndarray:
    """Largest-remainder allocation of the sample budget to components."""
    ideal = weights * n_samples
    counts = np.floor(ideal).astype(int)
    short = n_samples - int(counts.sum())
    if short:
        order = np.argsort(counts - ideal)
        counts[order[:short]] += 1
    return counts


def sample_statistics(proposal: ProposalSpec, n_samples: int, seed_root: int):
    """Draw once: (t, component labels, log proposal density).

    The density uses the realized component shares, which differ from the
    nominal weights only by allocation rounding; this keeps the stratified
    importance estimator exactly unbiased.
    """
    t, labels = proposal.sample(n_samples, seed_root)
    realized = np.bincount(labels, minlength=proposal.n_components) / n_samples
    return t, labels, proposal.logpdf(t, weights=realized)


def _eval_chunk(procedure, zeta, carrier, ts, fingerprint):
    flags = np.empty(len(ts), dtype=bool)
    for i, t in enumerate(ts):
        out = procedure.evaluate(zeta + t * carrier)
        flags[i] = out.fingerprint == fingerprint
    return flags


@dataclass(frozen=True)
class CongruencyDraw:
    """One resampling pass for one direction, reusable across rho and kappa."""

    label: str
    kind: str
    t_obs: float
    samples: np.ndarray
    component_ids: np.ndarray
    logq: np.ndarray
    congruent: np.ndarray
    proposal: ProposalSpec
    seed_root: int
    outcome_fingerprint: str
    kappa: float | None = None
    kappa_bayes: float | None = None
    sigma_scale: float | None = None
    dof: int | None = None

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    @property
    def n_congruent(self) -> int:
        return int(np.sum(self.congruent))

    def component_table(self) -> list:
        """Per-component share of the congruent samples, in percent."""
        rows = []
        total = max(self.n_congruent, 1)
        for k, lab in enumerate(self.proposal.component_labels()):
            n_k = int(np.sum(self.congruent & (self.component_ids == k)))
            rows.append((lab, 100.0 * n_k / total))
        return rows


def draw_congruency(procedure, direction: TestDirection, y,
                    proposal: ProposalSpec | None = None,
                    n_samples: int = DEFAULT_SAMPLES, seed_root: int = 0,
                    workers: int = 1) -> CongruencyDraw:
    """Sample statistics, rebuild responses, re-run selection.

    The proposal defaults to the four-component preset centered between the
    null and the observed statistic.  Worker counts only split the
    congruency re-evaluation across processes; sampling happens up front in
    the parent, so results are identical for any worker count.
    """
    y = as_response(y)
    observed = procedure.evaluate(y)
    t_obs, carrier, zeta = direction.decompose(y)
    if proposal is None:
        if direction.kind == "scalar":
            proposal = mixture_preset(t_obs, direction.kappa)
        else:
            proposal = group_mixture(t_obs, direction.sigma_scale)
    if direction.kind == "group" and proposal.kind != "truncated-mixture":
        raise ValueError("group statistics need a proposal truncated at zero")
    t, labels, logq = sample_statistics(proposal, n_samples, seed_root)
    if workers <= 1:
        congruent = _eval_chunk(procedure, zeta, carrier, t,
                                observed.fingerprint)
    else:
        chunks = np.array_split(np.arange(n_samples), workers)
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                _eval_chunk,
                *zip(*((procedure, zeta, carrier, t[ix], observed.fingerprint)
                       for ix in chunks if ix.size)),
            ))
        congruent = np.concatenate(parts)
    return CongruencyDraw(
        label=direction.label, kind=direction.kind, t_obs=t_obs,
        samples=t, component_ids=labels, logq=logq, congruent=congruent,
        proposal=proposal, seed_root=seed_root,
        outcome_fingerprint=observed.fingerprint,
        kappa=direction.kappa, kappa_bayes=direction.kappa_bayes,
        sigma_scale=direction.sigma_scale, dof=direction.dof,
    )


def _log_weights(draw: CongruencyDraw, rho: float, kappa: float | None):
    """log w_b on the congruent subset, plus the congruent t values."""
    t = draw.samples[draw.congruent]
    logq = draw.logq[draw.congruent]
    if draw.kind == "scalar":
        k = draw.kappa if kappa is None else kappa
        logf = stats.norm.logpdf(t, loc=rho, scale=math.sqrt(k))
    else:
        if rho != 0.0:
            raise ValueError("group statistics support the zero null only")
        logf = stats.chi.logpdf(t / draw.sigma_scale, df=draw.dof) \
            - math.log(draw.sigma_scale)
    return logf - logq, t


def _p_greater(draw: CongruencyDraw, rho: float, kappa: float | None) -> float:
    logw, t = _log_weights(draw, rho, kappa)
    den = logsumexp(logw)
    if not np.isfinite(den):
        raise EngineError("importance weights degenerated to zero mass")
    tail = t >= draw.t_obs
    if not np.any(tail):
        return 0.0
    return float(np.exp(logsumexp(logw[tail]) - den))


def pvalue_from_draw(draw: CongruencyDraw, rho: float = 0.0,
                     alternative: str = "two-sided",
                     kappa: float | None = None) -> float:
    """Selective p-value from an existing draw; two-sided doubles the min."""
    if draw.n_congruent == 0:
        raise LowCongruencyError("no congruent samples in the draw")
    p_ge = _p_greater(draw, rho, kappa)
    if alternative == "greater":
        return p_ge
    if alternative == "less":
        return 1.0 - p_ge
    if alternative == "two-sided":
        return min(1.0, 2.0 * min(p_ge, 1.0 - p_ge))
    raise ValueError(f"unknown alternative {alternative!r}")


def ess_from_draw(draw: CongruencyDraw, rho: float = 0.0,
                  kappa: float | None = None) -> float:
    """Effective sample size (sum w)^2 / sum w^2 on the congruent subset."""
    if draw.n_congruent == 0:
        return 0.0
    logw, _ = _log_weights(draw, rho, kappa)
    return float(np.exp(2.0 * logsumexp(logw) - logsumexp(2.0 * logw)))


def ci_from_draw(draw: CongruencyDraw, alpha: float = 0.05,
                 kappa: float | None = None, bracket_scale: float = 10.0,
                 max_expansions: int = 6) -> tuple:
    """Equal-tailed interval by bisection in rho on the reused draw.

    p_greater(rho) is increasing in rho on any fixed sample, so each bound
    is a clean root: lower solves p_greater = alpha/2, upper 1 - alpha/2.
    The initial bracket t_obs +/- bracket_scale * sqrt(kappa) doubles up to
    max_expansions times; bisection stops at width 5e-3 * sqrt(kappa).
    """
    if draw.kind != "scalar":
        raise EngineError("intervals are defined for scalar directions only")
    if draw.n_congruent == 0:
        raise LowCongruencyError("no congruent samples in the draw")
    k = draw.kappa if kappa is None else kappa
    sd = math.sqrt(k)
    width_tol = 5e-3 * sd

    def solve(target: float) -> float:
        lo = draw.t_obs - bracket_scale * sd
        hi = draw.t_obs + bracket_scale * sd
        for _ in range(max_expansions):
            if _p_greater(draw, lo, k) <= target:
                break
            lo = draw.t_obs - 2.0 * (draw.t_obs - lo)
        else:
            raise EngineError("cannot bracket the lower side of the interval")
        for _ in range(max_expansions):
            if _p_greater(draw, hi, k) >= target:
                break
            hi = draw.t_obs + 2.0 * (hi - draw.t_obs)
        else:
            raise EngineError("cannot bracket the upper side of the interval")
        while hi - lo > width_tol:
            mid = 0.5 * (lo + hi)
            if _p_greater(draw, mid, k) < target:
                lo = mid
            else:
                hi = mid
        return 0.5 * (lo + hi)

    return solve(alpha / 2.0), solve(1.0 - alpha / 2.0)


@dataclass(frozen=True)
class InferenceResult:
    """Selective p-value (and optional interval) with draw diagnostics."""

    label: str
    p_value: float
    t_obs: float
    rho: float
    alternative: str
    kappa: float | None
    n_samples: int
    n_congruent: int
    ess: float
    component_shares: tuple
    ci: tuple | None = None
    alpha: float | None = None
    seed_root: int = 0
    warnings: tuple = ()

    def format_table(self) -> str:
        """Per-component congruency shares with Total and p-value rows."""
        width = max(len(lab) for lab, _ in self.component_shares)
        width = max(width, len("component"))
        lines = [f"{'component':<{width}}  % of congruent"]
        for lab, pct in self.component_shares:
            lines.append(f"{lab:<{width}}  {pct:14.1f}")
        total = f"{self.n_congruent}/{self.n_samples}"
        lines.append(f"{'Total':<{width}}  {total:>14}")
        lines.append(f"{'p-value':<{width}}  {self.p_value:14.4g}")
        return "\n".join(lines)


def _guard_congruency(draw: CongruencyDraw, min_congruent: int) -> None:
    if draw.n_congruent < min_congruent:
        raise LowCongruencyError(
            f"only {draw.n_congruent} of {draw.n_samples} samples were "
            f"congruent (minimum {min_congruent}); widen the proposal or "
            "increase n_samples",
            diagnostics={
                "n_samples": draw.n_samples,
                "n_congruent": draw.n_congruent,
                "component_shares": draw.component_table(),
                "label": draw.label,
            },
        )


def _finalize(draw: CongruencyDraw, p: float, rho: float, alternative: str,
              kappa: float | None, ci=None, alpha=None) -> InferenceResult:
    ess = ess_from_draw(draw, rho, kappa)
    warnings = ()
    if ess < ESS_WARN:
        warnings = (f"effective sample size {ess:.1f} below {ESS_WARN:g}",)
    return InferenceResult(
        label=draw.label, p_value=p, t_obs=draw.t_obs, rho=rho,
        alternative=alternative,
        kappa=(draw.kappa if kappa is None else kappa),
        n_samples=draw.n_samples, n_congruent=draw.n_congruent, ess=ess,
        component_shares=tuple(draw.component_table()), ci=ci, alpha=alpha,
        seed_root=draw.seed_root, warnings=warnings,
    )


def selective_pvalue(procedure, direction: TestDirection, y,
                     rho: float | None = None, alternative: str = "two-sided",
                     proposal: ProposalSpec | None = None,
                     n_samples: int = DEFAULT_SAMPLES, seed_root: int = 0,
                     workers: int = 1, bayes: bool = False,
                     min_congruent: int = MIN_CONGRUENT,
                     draw: CongruencyDraw | None = None) -> InferenceResult:
    """Selective p-value for a scalar direction under the working covariance.

    ``bayes`` swaps in the wider Bayesian kappa on the same draw, which is a
    pure reweighting.  Pass a precomputed ``draw`` to reuse samples.
    """
    if direction.kind != "scalar":
        raise ValueError("use group_pvalue for group directions")
    if draw is None:
        draw = draw_congruency(procedure, direction, y, proposal=proposal,
                               n_samples=n_samples, seed_root=seed_root,
                               workers=workers)
    _guard_congruency(draw, min_congruent)
    kappa = None
    if bayes:
        if draw.kappa_bayes is None:
            raise ValueError("direction carries no Bayesian kappa")
        kappa = draw.kappa_bayes
    rho = direction.rho0 if rho is None else rho
    p = pvalue_from_draw(draw, rho=rho, alternative=alternative, kappa=kappa)
    return _finalize(draw, p, rho, alternative, kappa)


def selective_ci(procedure, direction: TestDirection, y, alpha: float = 0.05,
                 proposal: ProposalSpec | None = None,
                 n_samples: int = DEFAULT_SAMPLES, seed_root: int = 0,
                 workers: int = 1, bayes: bool = False,
                 min_congruent: int = MIN_CONGRUENT,
                 draw: CongruencyDraw | None = None) -> InferenceResult:
    """Equal-tailed selective interval plus the p-value at the null."""
    if direction.kind != "scalar":
        raise ValueError("intervals are defined for scalar directions only")
    if draw is None:
        if proposal is None:
            proposal = ci_mixture(direction.t_obs(y), direction.kappa)
        draw = draw_congruency(procedure, direction, y, proposal=proposal,
                               n_samples=n_samples, seed_root=seed_root,
                               workers=workers)
    _guard_congruency(draw, min_congruent)
    kappa = None
    if bayes:
        if draw.kappa_bayes is None:
            raise ValueError("direction carries no Bayesian kappa")
        kappa = draw.kappa_bayes
    ci = ci_from_draw(draw, alpha=alpha, kappa=kappa)
    p = pvalue_from_draw(draw, rho=direction.rho0, alternative="two-sided",
                         kappa=kappa)
    return _finalize(draw, p, direction.rho0, "two-sided", kappa, ci=ci,
                     alpha=alpha)


def truncated_normal_pvalue(t_obs: float, rho: float, kappa: float,
                            region) -> float:
    """Closed-form P(T >= t_obs | T in region) for T ~ N(rho, kappa).

    ``region`` is a list of disjoint (a, b) intervals (use +/-inf for open
    ends).  Reference oracle for the Monte Carlo machinery: any selection
    rule that thresholds the statistic itself truncates T to such a region.
    """
    sd = math.sqrt(kappa)

    def mass(a: float, b: float) -> float:
        if b <= a:
            return 0.0
        return stats.norm.sf((a - rho) / sd) - stats.norm.sf((b - rho) / sd)

    den = sum(mass(a, b) for a, b in region)
    if den <= 0:
        raise ValueError("region has no probability mass")
    num = sum(mass(max(a, t_obs), b) for a, b in region)
    return num / den


def truncated_chi_pvalue(t_obs: float, sigma_scale: float, dof: int,
                         region) -> float:
    """Closed-form P(T >= t_obs | T in region) for T ~ sigma * chi_dof."""

    def mass(a: float, b: float) -> float:
        if b <= a:
            return 0.0
        lo = max(a, 0.0) / sigma_scale
        hi = b / sigma_scale
        return stats.chi.sf(lo, df=dof) - stats.chi.sf(hi, df=dof)

    den = sum(mass(a, b) for a, b in region)
    if den <= 0:
        raise ValueError("region has no probability mass")
    num = sum(mass(max(a, t_obs), b) for a, b in region)
    return num / den


def group_pvalue(procedure, direction: TestDirection, y,
                 proposal: ProposalSpec | None = None,
                 n_samples: int = DEFAULT_SAMPLES, seed_root: int = 0,
                 workers: int = 1, min_congruent: int = MIN_CONGRUENT,
                 draw: CongruencyDraw | None = None) -> InferenceResult:
    """One-sided selective p-value for the zero null of a group direction."""
    if direction.kind != "group":
        raise ValueError("group_pvalue needs a group direction")
    if draw is None:
        draw = draw_congruency(procedure, direction, y, proposal=proposal,
                               n_samples=n_samples, seed_root=seed_root,
                               workers=workers)
    _guard_congruency(draw, min_congruent)
    p = pvalue_from_draw(draw, rho=0.0, alternative="greater")
    return _finalize(draw, p, 0.0, "greater", None)


class ScalarRegionRule:
    """Toy selection procedure: the event is v'y landing in a union of
    closed intervals.  Used by the oracle suite, where the selective
    p-value has a closed form to compare against."""

    def __init__(self, v, intervals):
        self.v = np.asarray(v, dtype=float)
        self.intervals = tuple((float(a), float(b)) for a, b in intervals)

    def evaluate(self, y):
        from .selection import SelectionOutcome
        t = float(self.v @ as_response(y))
        inside = any(a <= t <= b for a, b in self.intervals)
        return SelectionOutcome(fixed_set=("inside",) if inside else (),
                                ranef_set=())


class GroupRegionRule:
    """Toy group procedure: the event is ||Q'y|| exceeding a threshold."""

    def __init__(self, q_basis, threshold):
        self.q_basis = np.asarray(q_basis, dtype=float)
        self.threshold = float(threshold)

    def evaluate(self, y):
        from .selection import SelectionOutcome
        t = float(np.linalg.norm(self.q_basis.T @ as_response(y)))
        return SelectionOutcome(
            fixed_set=("above",) if t > self.threshold else (), ranef_set=())


def _region_proposal(t_obs: float, kappa: float, region) -> ProposalSpec:
    """Observation-anchored preset plus components packed into each region
    branch.  Concentrating proposal mass inside the selection event keeps
    the congruent fraction high, which is what controls the Monte Carlo
    error of the oracle comparison."""
    root = math.sqrt(kappa)
    means = [0.0, t_obs / 3.0, 2.0 * t_obs / 3.0, t_obs]
    variances = [kappa] * 4
    weights = [0.05] * 4
    branch: list[tuple[float, float]] = []
    for a, b in region:
        if math.isinf(a) and math.isinf(b):
            branch.append((t_obs, 2.0 * kappa))
        elif math.isinf(a):
            branch += [(b, kappa), (b - 0.9 * root, kappa)]
        elif math.isinf(b):
            branch += [(a, kappa), (a + 0.9 * root, kappa)]
        else:
            width = b - a
            spread = max(width / 2.5, 0.5 * root) ** 2
            branch += [(a + width / 3.0, spread), (b - width / 3.0, spread)]
    share = 0.8 / len(branch)
    for mu, var in branch:
        means.append(mu)
        variances.append(var)
        weights.append(share)
    return ProposalSpec(
        kind="normal-mixture", means=tuple(means),
        variances=tuple(variances), weights=tuple(weights),
    )


def _chi_region_proposal(t_obs: float, sigma_scale: float,
                         threshold: float) -> ProposalSpec:
    """Truncated mixture spanning the above-threshold branch of a chi rule."""
    lo = max(threshold, 0.0)
    means = (lo, 0.5 * (lo + t_obs), t_obs, t_obs + 0.8 * sigma_scale)
    return ProposalSpec(
        kind="truncated-mixture", means=means,
        variances=(sigma_scale ** 2,) * 4, weights=(0.25,) * 4,
    )


def _ratio_se(draw: CongruencyDraw, rho: float, kappa: float | None) -> float:
    """Delta-method standard error of the one-sided importance ratio."""
    logw, t = _log_weights(draw, rho, kappa)
    w = np.exp(logw - logsumexp(logw))
    g = (t >= draw.t_obs).astype(float)
    r = float(w @ g)
    return float(np.sqrt(np.sum(w ** 2 * (g - r) ** 2)))


def oracle_suite(n_samples: int = 100_000, seed_root: int = 0,
                 configs_per_rule: int = 10,
                 chi_dofs=(2, 3, 5)) -> list:
    """Monte Carlo vs closed-form truncation oracles on random configs.

    Three scalar rule families (one-sided, band, two-branch union) with
    ``configs_per_rule`` random (rho, kappa, limits) draws each, plus the
    chi family for the given group dofs.  Returns one record per config
    with the engine p-value, the analytic value, and their difference.
    """
    rng = np.random.default_rng(seed_root)
    records = []

    def run_scalar(family, rho, kappa, region, t_obs, idx):
        direction = TestDirection(
            kind="scalar", label=f"{family}-{idx}", v=np.array([1.0, 0.0]),
            metric=np.diag([kappa, 1.0]), kappa=kappa)
        y = np.array([t_obs, 0.7])
        rule = ScalarRegionRule(direction.v, region)
        draw = draw_congruency(
            rule, direction, y,
            proposal=_region_proposal(t_obs, kappa, region),
            n_samples=n_samples, seed_root=int(rng.integers(2 ** 63)),
        )
        p = pvalue_from_draw(draw, rho=rho, alternative="greater")
        oracle = truncated_normal_pvalue(t_obs, rho, kappa, region)
        records.append({
            "family": family, "index": idx, "rho": rho, "kappa": kappa,
            "region": [[a, b] for a, b in region], "t_obs": t_obs,
            "p_engine": p, "p_oracle": oracle, "diff": p - oracle,
            "n_congruent": draw.n_congruent,
            "se": _ratio_se(draw, rho, None),
        })

    inf = math.inf
    for idx in range(configs_per_rule):
        rho = rng.uniform(-1.0, 1.0)
        kappa = math.exp(rng.uniform(math.log(0.25), math.log(4.0)))
        root = math.sqrt(kappa)

        c = rho + rng.uniform(-1.0, 1.5) * root
        t = c + rng.uniform(0.05, 2.0) * root
        run_scalar("one-sided", rho, kappa, ((c, inf),), t, idx)

        a = rho + rng.uniform(-2.0, 0.5) * root
        b = a + rng.uniform(0.8, 2.5) * root
        t = a + rng.uniform(0.1, 0.9) * (b - a)
        run_scalar("band", rho, kappa, ((a, b),), t, idx)

        a = rho - rng.uniform(0.4, 1.5) * root
        b = rho + rng.uniform(0.4, 1.5) * root
        if idx % 2 == 0:
            t = b + rng.uniform(0.05, 1.2) * root
        else:
            t = a - rng.uniform(0.05, 1.2) * root
        run_scalar("union", rho, kappa, ((-inf, a), (b, inf)), t, idx)

    for dof in chi_dofs:
        for idx in range(configs_per_rule):
            sigma = math.exp(rng.uniform(math.log(0.5), math.log(2.0)))
            c = sigma * stats.chi.ppf(rng.uniform(0.2, 0.8), df=dof)
            t_obs = c + rng.uniform(0.05, 1.5) * sigma
            n = dof + 1
            q = np.eye(n)[:, :dof]
            y = t_obs * q[:, 0] + 0.7 * np.eye(n)[:, dof]
            direction = TestDirection(
                kind="group", label=f"chi{dof}-{idx}", q_basis=q,
                sigma_scale=sigma, dof=dof)
            rule = GroupRegionRule(q, c)
            draw = draw_congruency(
                rule, direction, y,
                proposal=_chi_region_proposal(t_obs, sigma, c),
                n_samples=n_samples, seed_root=int(rng.integers(2 ** 63)),
            )
            p = pvalue_from_draw(draw, rho=0.0, alternative="greater")
            oracle = truncated_chi_pvalue(t_obs, sigma, dof, ((c, inf),))
            records.append({
                "family": f"chi-{dof}", "index": idx, "rho": 0.0,
                "kappa": None, "sigma_scale": sigma, "dof": dof,
                "region": [[c, inf]], "t_obs": t_obs,
                "p_engine": p, "p_oracle": oracle, "diff": p - oracle,
                "n_congruent": draw.n_congruent,
                "se": _ratio_se(draw, 0.0, None),
            })
    return records
