"""Power-law fits L(N) = alpha * (N0 / N)^p + L_inf over (parameter count, loss) points."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

IDENTIFIABLE_RANGE = 0.01
P_BOUNDS = (0.0, 5.0)


@dataclass(frozen=True)
class ScalingObservation:
    N: float
    loss: float
    family: str = ""
    slice: str = ""

    def __post_init__(self):
        if not self.N > 0 or not self.loss > 0:
            raise ValueError(f"observation needs N > 0 and loss > 0, got N={self.N} loss={self.loss}")


@dataclass
class PowerLawFit:
    alpha: float
    p: float | None
    L_inf: float
    N0: float
    rss: float
    converged: bool
    identified: bool = True
    low_confidence: bool = False
    n_obs: int = 0

    def describe(self):
        p = f"{self.p:.6g}" if self.identified else "not-identified"
        return (f"alpha={self.alpha:.6g} p={p} L_inf={self.L_inf:.6g} N0={self.N0:.6g} "
                f"rss={self.rss:.6g} converged={int(self.converged)} "
                f"low_confidence={int(self.low_confidence)} n={self.n_obs}")


def power_law(N, alpha, p, L_inf, N0):
    return alpha * (N0 / np.asarray(N, dtype=np.float64)) ** p + L_inf


def predict(fit, N):
    if np.any(np.asarray(N) <= 0):
        raise ValueError("N must be positive")
    return power_law(N, fit.alpha, fit.p or 0.0, fit.L_inf, fit.N0)


def _best_alpha(x, y, L_inf):
    """Least-squares alpha >= 0 for fixed (p, L_inf), with x = (N0/N)^p."""
    xx = float(x @ x)
    return max(float(x @ (y - L_inf)) / xx, 0.0) if xx > 0 else 0.0


def fit_power_law(observations, N0, grid=(12, 16), refine=8):
    """Multi-start bounded least squares seeded from a (L_inf, p) grid.

    Each grid point gets its optimal alpha in closed form; the ``refine``
    best seeds are polished with a trust-region solver and the lowest
    residual over seeds and refinements wins (ties go to the earlier seed).
    Inputs are sorted first, so the fit does not depend on observation order.
    """
    obs = sorted(((float(o.N), float(o.loss)) for o in observations))
    if len(obs) < 2:
        raise ValueError("need at least 2 observations")
    N = np.array([o[0] for o in obs])
    y = np.array([o[1] for o in obs])
    low_conf = len(obs) < 4 or N.max() / N.min() < 10
    if y.max() - y.min() < IDENTIFIABLE_RANGE:
        level = float(y.mean())
        return PowerLawFit(0.0, None, level, N0, float(np.sum((y - level) ** 2)), True,
                           identified=False, low_confidence=low_conf, n_obs=len(obs))

    logr = np.log(N0 / N)

    def resid(theta):
        a, p, L = theta
        return a * np.exp(p * logr) + L - y

    def jac(theta):
        a, p, L = theta
        e = np.exp(p * logr)
        return np.stack([e, a * logr * e, np.ones_like(e)], axis=1)

    ymin = float(y.min())
    seeds = []
    for L in np.linspace(0.0, ymin, grid[0]):
        for p in np.linspace(0.01, 1.5, grid[1]):
            x = np.exp(p * logr)
            seeds.append((_best_alpha(x, y, L), p, L))
    scale = max(float(np.abs(y).max()), 1.0)
    lo = [0.0, P_BOUNDS[0], 0.0]
    hi = [np.inf, P_BOUNDS[1], np.inf]
    costs = [float(0.5 * np.sum(resid(s) ** 2)) for s in seeds]
    order = sorted(range(len(seeds)), key=lambda i: (costs[i], i))
    best, best_cost, converged = np.array(seeds[order[0]]), costs[order[0]], False
    for i in order[:refine]:
        s = seeds[i]
        try:
            r = least_squares(resid, np.array(s), jac=jac, bounds=(lo, hi), method="trf",
                              x_scale=[scale, 1.0, scale], xtol=1e-15, ftol=1e-15, gtol=1e-15,
                              max_nfev=2000)
        except ValueError:
            continue
        if r.cost < best_cost:
            best, best_cost, converged = r.x, float(r.cost), bool(r.success)
    a, p, L = (float(v) for v in best)
    return PowerLawFit(a, p, L, N0, 2 * best_cost, converged, True, low_conf, len(obs))


def compare_families(fits):
    """Table of (p, L_inf, rss) per family plus pairwise predicted-loss gaps.

    ``fits`` maps a label to ``(PowerLawFit, observed N values)``. Gaps are
    taken at the smallest and largest N observed across all families.
    """
    if len(fits) < 2:
        raise ValueError("compare_families needs at least 2 fits")
    labels = sorted(fits)
    all_N = [n for lab in labels for n in fits[lab][1]]
    n_lo, n_hi = min(all_N), max(all_N)
    lines = ["family p L_inf alpha rss"]
    for lab in labels:
        f = fits[lab][0]
        p = f"{f.p:.6g}" if f.identified else "not-identified"
        lines.append(f"{lab} {p} {f.L_inf:.6g} {f.alpha:.6g} {f.rss:.6g}")
    gaps = {}
    lines.append(f"pair gap@N={n_lo:.6g} gap@N={n_hi:.6g}")
    for i, a in enumerate(labels):
        for b in labels[i + 1:]:
            g_lo = float(predict(fits[a][0], n_lo) - predict(fits[b][0], n_lo))
            g_hi = float(predict(fits[a][0], n_hi) - predict(fits[b][0], n_hi))
            gaps[(a, b)] = (g_lo, g_hi)
            lines.append(f"{a}-{b} {g_lo:.6g} {g_hi:.6g}")
    return {"gaps": gaps, "N_small": n_lo, "N_large": n_hi, "text": "\n".join(lines) + "\n"}


# --------------------------------------------------------------- CSV


OBS_COLUMNS = ("family", "slice", "N", "loss")


def write_observations(observations, path=None):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(OBS_COLUMNS)
    for o in observations:
        w.writerow([o.family, o.slice, repr(float(o.N)), repr(float(o.loss))])
    if path is not None:
        Path(path).write_text(buf.getvalue())
    return buf.getvalue()


def read_observations(path, include_fitted=False):
    """Read (family, slice, N, loss) rows; extra columns are ignored.

    Rows carrying ``fitted=1`` (curve samples) are skipped unless asked for.
    """
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        if not include_fitted and r.get("fitted", "0") == "1":
            continue
        out.append(ScalingObservation(float(r["N"]), float(r["loss"]), r.get("family", ""),
                                      r.get("slice", "")))
    return out


def group(observations):
    groups = {}
    for o in observations:
        groups.setdefault((o.family, o.slice), []).append(o)
    return groups
