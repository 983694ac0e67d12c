"""Numerical checks of the single-head optimum, inference equivalence and
Pinsker-based temperature matching.

Every ``verify_*`` function returns a :class:`TheoremCheckReport`; a report
passes iff its worst observed violation is within tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .model import FeatureExtractor, LinearHead, StudentModel
from .numcore import batch_kl, softmax

LABEL_SMOOTHING = 1e-6
INTERIOR_FLOOR = 1e-12


@dataclass
class SimplexPoint:
    probs: np.ndarray

    @property
    def interior(self) -> bool:
        return bool(np.all(self.probs >= 1e-9))


@dataclass
class TheoremCheckReport:
    theorem: str
    trials: int
    max_violation: float
    tolerance: float
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return bool(self.max_violation <= self.tolerance)

    def as_dict(self) -> dict:
        return {
            "theorem": self.theorem,
            "trials": self.trials,
            "max_violation": self.max_violation,
            "tolerance": self.tolerance,
            "passed": self.passed,
            "details": self.details,
        }


def optimal_mixture(y, p, lam: float) -> np.ndarray:
    """Minimiser of ``lam * CE(., y) + (1 - lam) * KL(p || .)`` over the simplex."""
    if not 0 <= lam <= 1:
        raise ValueError("lam must lie in [0, 1]")
    return lam * np.asarray(y, dtype=np.float64) + (1 - lam) * np.asarray(p, dtype=np.float64)


def smooth_label(y, weight: float = LABEL_SMOOTHING) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    return (1 - weight) * y + weight / y.shape[-1]


def sho_objective(p_hat, y, p, lam: float):
    """``lam * CE(p_hat, y) + (1 - lam) * KL(p || p_hat)`` (row-wise for 2-d ``p_hat``).

    Zero entries of ``p_hat`` where ``y`` or ``p`` is positive give ``inf``.
    """
    p_hat = np.asarray(p_hat, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore"):
        logq = np.log(p_hat)
    ce = -np.sum(np.where(y > 0, y * logq, 0.0), axis=-1)
    logp = np.log(np.where(p > 0, p, 1.0))
    kl = np.sum(np.where(p > 0, p * (logp - logq), 0.0), axis=-1)
    out = lam * ce + (1 - lam) * kl
    return float(out) if np.ndim(out) == 0 else out


def _tangent_perturbations(center: np.ndarray, n: int, scale: float, rng) -> np.ndarray:
    """Sum-zero directions with log-uniform radius up to ``scale``, shrunk to stay interior."""
    C = center.shape[0]
    d = rng.standard_normal((n, C))
    d -= d.mean(axis=1, keepdims=True)
    d /= np.abs(d).sum(axis=1, keepdims=True)
    d *= (scale * 10.0 ** (-4 * rng.random(n)))[:, None]
    neg = d < 0
    room = np.where(neg, (center - INTERIOR_FLOOR) / np.where(neg, -d, 1.0), np.inf).min(axis=1)
    shrink = np.minimum(1.0, 0.999 * room)
    return d * shrink[:, None]


def verify_optimum(
    y,
    p,
    lam: float,
    n_perturbations: int = 10_000,
    perturbation_scale: float = 0.1,
    seed: int = 0,
    tolerance: float = 1e-9,
    mixture: Callable = optimal_mixture,
) -> TheoremCheckReport:
    """No sampled feasible perturbation of ``mixture(y_smoothed, p, lam)`` lowers the objective."""
    rng = np.random.default_rng(seed)
    ys = smooth_label(y)
    p = np.asarray(p, dtype=np.float64)
    star = mixture(ys, p, lam)
    base = sho_objective(star, ys, p, lam)
    cand = star + _tangent_perturbations(star, n_perturbations, perturbation_scale, rng)
    vals = sho_objective(cand, ys, p, lam)
    worst = float(np.max(base - vals))
    return TheoremCheckReport(
        "single_head_optimum", n_perturbations, worst, tolerance, {"objective_at_optimum": base}
    )


def verify_optimum_sweep(
    n_configs: int = 100,
    n_perturbations: int = 10_000,
    max_classes: int = 10,
    seed: int = 0,
    tolerance: float = 1e-9,
    mixture: Callable = optimal_mixture,
) -> TheoremCheckReport:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    for k in range(n_configs):
        C = int(rng.integers(2, max_classes + 1))
        y = np.eye(C)[rng.integers(C)]
        p = rng.dirichlet(np.ones(C))
        lam = float(rng.random())
        r = verify_optimum(y, p, lam, n_perturbations, seed=int(rng.integers(2**31)),
                           tolerance=tolerance, mixture=mixture)
        worst = max(worst, r.max_violation)
    return TheoremCheckReport(
        "single_head_optimum", n_configs * n_perturbations, float(worst), tolerance,
        {"configs": n_configs, "perturbations_per_config": n_perturbations},
    )


def pinsker_check(p, q) -> tuple[float, float]:
    """``(||p - q||_1, sqrt(2 KL(p || q)))``; Pinsker says the first never exceeds the second."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    l1 = np.abs(p - q).sum(axis=-1)
    bound = np.sqrt(2 * np.maximum(batch_kl(p, q), 0.0))
    if np.ndim(l1) == 0:
        return float(l1), float(bound)
    return l1, bound


def pinsker_sweep(n_pairs: int = 10_000, min_classes: int = 2, max_classes: int = 10,
                  seed: int = 0, tolerance: float = 1e-9) -> TheoremCheckReport:
    rng = np.random.default_rng(seed)
    worst = -np.inf
    Cs = rng.integers(min_classes, max_classes + 1, size=n_pairs)
    for C in np.unique(Cs):
        m = int(np.sum(Cs == C))
        p = rng.dirichlet(np.ones(C), size=m)
        q = rng.dirichlet(np.ones(C), size=m)
        l1, bound = pinsker_check(p, q)
        worst = max(worst, float(np.max(l1 - bound)))
    return TheoremCheckReport("pinsker", n_pairs, worst, tolerance)


def perturb_within_l1(targets: np.ndarray, eps: float, rng, fraction=None) -> np.ndarray:
    """Points on segments toward Dirichlet draws, at l1 distance ``<= eps`` from ``targets``.

    Convexity keeps every point on the simplex; ``fraction`` (default
    uniform in (0, 1]) sets the distance as a fraction of ``eps``.
    """
    n, C = targets.shape
    r = rng.dirichlet(np.ones(C), size=n)
    gap = np.abs(r - targets).sum(axis=1)
    if fraction is None:
        fraction = 1.0 - rng.random(n)
    t = np.minimum(1.0, eps * np.asarray(fraction) / np.maximum(gap, 1e-300))
    return targets + t[:, None] * (r - targets)


def verify_inference_equivalence(
    eps: float,
    lam: float,
    n_trials: int = 10_000,
    num_classes: int = 6,
    seed: int = 0,
    tolerance: float = 1e-9,
) -> TheoremCheckReport:
    """Heads within ``eps`` of (y, p) mix, at alpha = lam, to within ``eps`` of lam*y + (1-lam)*p."""
    if eps < 0 or not 0 <= lam <= 1:
        raise ValueError("need eps >= 0 and lam in [0, 1]")
    rng = np.random.default_rng(seed)
    C = num_classes
    y = np.eye(C)[rng.integers(C, size=n_trials)]
    p = rng.dirichlet(np.ones(C), size=n_trials)
    p_ce = perturb_within_l1(y, eps, rng)
    p_kd = perturb_within_l1(p, eps, rng)
    combined = lam * p_ce + (1 - lam) * p_kd
    dist = np.abs(combined - optimal_mixture(y, p, lam)).sum(axis=1)
    return TheoremCheckReport(
        "inference_equivalence", n_trials, float(np.max(dist - eps)), tolerance,
        {"eps": eps, "lam": lam, "num_classes": C, "max_distance": float(dist.max())},
    )


def temperature_matching_sides(teacher_logits, kd_logits, tau: float):
    """Returns ``(l1, pinsker_bound, kl_at_1, kl_at_tau)`` for teacher vs KD head."""
    p1, s1 = softmax(teacher_logits), softmax(kd_logits)
    pt, st = softmax(teacher_logits, tau), softmax(kd_logits, tau)
    l1, bound = pinsker_check(pt, st)
    return l1, bound, batch_kl(p1, s1), batch_kl(pt, st)


def verify_temperature_matching(
    delta: float,
    n_trials: int = 1000,
    num_classes: int = 6,
    tau: float = 2.0,
    seed: int = 0,
    tolerance: float = 1e-9,
    logit_scale: float = 3.0,
) -> TheoremCheckReport:
    """Rejection-sample KD heads with KL at temperature 1 within ``delta`` of the teacher,
    then check Pinsker at temperature ``tau``.

    The KL-at-tau versus ``delta`` gap is reported only.
    """
    if delta <= 0:
        raise ValueError("delta must be positive")
    rng = np.random.default_rng(seed)
    C = num_classes
    T, S = [], []
    accepted, drawn = 0, 0
    while accepted < n_trials:
        m = 4 * n_trials
        t = logit_scale * rng.standard_normal((m, C))
        sigma = np.sqrt(delta) * 10.0 ** (1 - 3 * rng.random(m))
        s = t + sigma[:, None] * rng.standard_normal((m, C))
        ok = batch_kl(softmax(t), softmax(s)) <= delta
        T.append(t[ok])
        S.append(s[ok])
        accepted += int(ok.sum())
        drawn += m
    t = np.concatenate(T)[:n_trials]
    s = np.concatenate(S)[:n_trials]
    l1, bound, kl1, klt = temperature_matching_sides(t, s, tau)
    gap = klt - delta
    return TheoremCheckReport(
        "temperature_matching", n_trials, float(np.max(l1 - bound)), tolerance,
        {
            "delta": delta,
            "tau": tau,
            "acceptance_rate": accepted / drawn,
            "kl_tau_minus_delta_max": float(gap.max()),
            "kl_tau_minus_delta_mean": float(gap.mean()),
            "fraction_kl_tau_within_delta": float(np.mean(gap <= 0)),
            "fraction_l1_within_sqrt_2delta": float(np.mean(l1 <= np.sqrt(2 * delta))),
        },
    )


def build_converged_dual_head(y: np.ndarray, p: np.ndarray, eps: float, seed: int = 0):
    """Dual-head student whose heads sit within ``eps`` (l1) of ``y`` and ``p`` on a probe set.

    Probe point ``i`` is the basis vector ``e_i``; an identity ReLU extractor
    passes it through and head column ``i`` holds the log-probabilities of
    the perturbed targets. Returns ``(model, probe_inputs)``.
    """
    rng = np.random.default_rng(seed)
    n, C = y.shape
    q_ce = perturb_within_l1(y, eps, rng)
    q_kd = perturb_within_l1(p, eps, rng)
    ext = FeatureExtractor([np.eye(n)], [np.zeros(n)])
    ce = LinearHead(np.log(q_ce).T.copy(), np.zeros(C))
    kd = LinearHead(np.log(q_kd).T.copy(), np.zeros(C))
    return StudentModel(ext, ce, kd, "dho"), np.eye(n)


def verify_sho_emulation(
    eps: float = 0.1,
    lams=(0.25, 0.5, 0.75),
    n_points: int = 50,
    num_classes: int = 5,
    seed: int = 0,
    mixture: Callable = optimal_mixture,
) -> TheoremCheckReport:
    """Dual-head inference at (alpha = lam, beta = 1) stays within ``eps`` of lam*y + (1-lam)*p."""
    from .inference import emulate_sho, predict_proba

    rng = np.random.default_rng(seed)
    y = np.eye(num_classes)[rng.integers(num_classes, size=n_points)]
    p = rng.dirichlet(np.ones(num_classes), size=n_points)
    model, probes = build_converged_dual_head(y, p, eps, seed=int(rng.integers(2**31)))
    worst, per_lam = -np.inf, {}
    for lam in lams:
        out = predict_proba(model, probes, emulate_sho(lam))
        dist = np.abs(out - mixture(y, p, lam)).sum(axis=1)
        per_lam[str(lam)] = float(dist.max())
        worst = max(worst, float(dist.max()))
    return TheoremCheckReport("sho_emulation", n_points * len(lams), worst - eps, 0.0,
                              {"eps": eps, "max_distance_per_lambda": per_lam})


def _wrong_mixture(y, p, lam):
    return (1 - lam) * np.asarray(y, dtype=np.float64) + lam * np.asarray(p, dtype=np.float64)


def verify_all(seed: int = 0, tolerance: float = 1e-9, fault: Optional[str] = None, quick: bool = False) -> list:
    """Run every check at its standard size; ``fault='wrong-mixture'`` is a negative control."""
    mixture = _wrong_mixture if fault == "wrong-mixture" else optimal_mixture
    n = 1000 if quick else 10_000
    reports = [
        verify_optimum_sweep(100 if not quick else 20, n, seed=seed, tolerance=tolerance, mixture=mixture),
        pinsker_sweep(n, seed=seed, tolerance=tolerance),
    ]
    worst, combos = None, []
    for eps in (0.01, 0.1, 0.5):
        for lam in (0.0, 0.3, 0.5, 0.7, 1.0):
            r = verify_inference_equivalence(eps, lam, n, seed=seed, tolerance=tolerance)
            combos.append({"eps": eps, "lam": lam, "max_violation": r.max_violation})
            if worst is None or r.max_violation > worst.max_violation:
                worst = r
    reports.append(TheoremCheckReport("inference_equivalence", n * len(combos), worst.max_violation,
                                      tolerance, {"combos": combos}))
    reports.append(verify_temperature_matching(0.01, 1000, tau=2.0, seed=seed, tolerance=tolerance))
    reports.append(verify_sho_emulation(0.1, seed=seed, mixture=mixture))
    return reports
