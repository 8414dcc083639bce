"""Information criteria, class-count selection, and posterior classification.

BIC counts subjects as the sample size (the independent units of a mixture
model); callers that want the survey-count variant can pass n_observations
explicitly. The 2*delta-BIC ladder reads twice the BIC drop between
consecutive class counts as a logged Bayes factor, with > 10 taken as strong
evidence for the richer model.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import likelihood as lk
from .errors import LcgaError
from .estimation import (STATUS_CONVERGED, FitConfig, FitResult,
                         multi_start_fit)
from .types import LongitudinalDataset, ModelSpec

RULE_MIN_BIC = "min_bic"
RULE_LADDER = "bayes_factor_ladder"
STRONG_EVIDENCE = 10.0


def bic(loglik: float, n_params: int, n: int) -> float:
    """-2 log L + p log(n)."""
    if n < 1:
        raise LcgaError(f"n must be >= 1, got {n}")
    if n_params < 0:
        raise LcgaError(f"n_params must be >= 0, got {n_params}")
    return -2.0 * loglik + n_params * math.log(n)


def aic(loglik: float, n_params: int) -> float:
    """-2 log L + 2 p."""
    if n_params < 0:
        raise LcgaError(f"n_params must be >= 0, got {n_params}")
    return -2.0 * loglik + 2.0 * n_params


def bayes_factor_2dbic(bic_simpler: float, bic_richer: float) -> float:
    """2 * (BIC_simpler - BIC_richer); > 10 favors the richer model."""
    return 2.0 * (bic_simpler - bic_richer)


@dataclass(frozen=True)
class SelectionRow:
    n_classes: int
    loglik: float
    n_params: int
    aic: float
    bic: float
    status: str


@dataclass
class SelectionReport:
    rows: tuple  # SelectionRow, sorted by n_classes
    chosen_k: Optional[int]
    selection_rule: str
    excluded_k: tuple  # class counts dropped for non-convergence
    fits: dict  # n_classes -> FitResult

    @property
    def all_failed(self) -> bool:
        return self.chosen_k is None


def _choose(rows, rule):
    converged = [r for r in rows if r.status == STATUS_CONVERGED]
    if not converged:
        return None
    if rule == RULE_MIN_BIC:
        return min(converged, key=lambda r: (r.bic, r.n_classes)).n_classes
    # Ladder: step up while the 2*delta-BIC evidence against the simpler
    # model stays strong; stop at the first failure.
    chosen = converged[0]
    for nxt in converged[1:]:
        if bayes_factor_2dbic(chosen.bic, nxt.bic) > STRONG_EVIDENCE:
            chosen = nxt
        else:
            break
    return chosen.n_classes


def class_search(spec_template: ModelSpec, data: LongitudinalDataset,
                 k_range, config: FitConfig, rule: str = RULE_LADDER,
                 n_workers: int = 1) -> SelectionReport:
    """Fit every class count in a contiguous range and pick one.

    Non-converged class counts are recorded in excluded_k and skipped by both
    selection rules, mirroring how non-converged rows are excluded from
    model-selection tables.
    """
    ks = sorted(int(k) for k in k_range)
    if not ks or ks[0] < 1 or any(b - a != 1 for a, b in zip(ks, ks[1:])):
        raise LcgaError(f"k_range must be contiguous with min >= 1, got {list(k_range)}")
    if rule not in (RULE_MIN_BIC, RULE_LADDER):
        raise LcgaError(f"unknown selection rule {rule!r}")

    from dataclasses import replace
    n = data.n_subjects
    rows, fits = [], {}
    for k in ks:
        fit = multi_start_fit(replace(spec_template, n_classes=k), data, config,
                              n_workers=n_workers)
        fits[k] = fit
        rows.append(SelectionRow(n_classes=k, loglik=fit.loglik,
                                 n_params=fit.n_params,
                                 aic=aic(fit.loglik, fit.n_params),
                                 bic=bic(fit.loglik, fit.n_params, n),
                                 status=fit.status))
    excluded = tuple(r.n_classes for r in rows if r.status != STATUS_CONVERGED)
    return SelectionReport(rows=tuple(rows), chosen_k=_choose(rows, rule),
                           selection_rule=rule, excluded_k=excluded, fits=fits)


# ---------------------------------------------------------------------------
# Posterior classification
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PosteriorMatrix:
    """n x K posterior class probabilities with modal assignments."""

    probs: np.ndarray
    modal: np.ndarray
    mean_entropy: float
    relative_entropy: float

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]


def posterior_probs(fit: FitResult, spec: ModelSpec,
                    data: LongitudinalDataset) -> PosteriorMatrix:
    """Posterior class probabilities under the fitted parameters.

    Row i is proportional to pi_k(z_i) * exp(class log-likelihood), computed
    in log space; modal is the row argmax (ties to the smallest index).
    """
    parts = lk.mixture_parts(spec, fit.params, data, fit.time_scale)
    W = parts.posterior()
    W.flags.writeable = False
    with np.errstate(divide="ignore", invalid="ignore"):
        plogp = np.where(W > 0.0, W * np.log(W), 0.0)
    mean_entropy = float(-plogp.sum(axis=1).mean())
    K = W.shape[1]
    relative = 1.0 if K == 1 else 1.0 - mean_entropy / math.log(K)
    return PosteriorMatrix(probs=W, modal=np.argmax(W, axis=1),
                           mean_entropy=mean_entropy, relative_entropy=relative)


@dataclass(frozen=True)
class ClassificationRates:
    per_class: dict  # true label -> fraction modally assigned correctly
    overall: float
    permutation: tuple  # fitted label k -> aligned label permutation[k]


def correct_classification_rate(posterior: PosteriorMatrix,
                                truth) -> ClassificationRates:
    """Per-true-class and overall modal agreement after label alignment.

    Fitted labels are permuted to maximize total modal agreement (exhaustive
    over K! permutations, K <= 6), so the rates are invariant to arbitrary
    class relabeling in the fit.
    """
    truth = np.asarray(truth)
    K = posterior.n_classes
    if K > 6:
        raise LcgaError(f"exhaustive label alignment supports K <= 6, got {K}")
    if truth.shape[0] != posterior.probs.shape[0]:
        raise LcgaError("truth labels must cover every subject")
    labels = np.unique(truth)
    if labels.size > K:
        raise LcgaError(f"{labels.size} distinct truth labels exceed K = {K}")
    # Map truth labels onto 0..G-1 in sorted order.
    truth_idx = np.searchsorted(labels, truth)
    modal = posterior.modal

    best_perm, best_hits = None, -1
    for perm in itertools.permutations(range(K)):
        hits = int(np.sum(np.asarray(perm)[modal] == truth_idx))
        if hits > best_hits:
            best_perm, best_hits = perm, hits
    aligned = np.asarray(best_perm)[modal]
    per_class = {}
    for g, label in enumerate(labels):
        mask = truth_idx == g
        per_class[int(label)] = float(np.mean(aligned[mask] == g))
    return ClassificationRates(per_class=per_class,
                               overall=best_hits / truth.shape[0],
                               permutation=best_perm)
