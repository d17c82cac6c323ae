"""Implicit constitutive relations G(S, D) = 0 between the deviatoric stress S
and the strain rate D: power-law (explicit and dual form), Bingham
viscoplasticity, a Newtonian special case, and a non-monotone model resolved
in the strain-from-stress direction.

All tensor arguments are symmetric 2x2 arrays, with arbitrary leading batch
axes; |.| is the Frobenius norm.  ``resolve_stress`` returns the solver-side
single-valued selection (the Bingham kink is epsilon-regularized), while
``residual`` always evaluates the exact defining relation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("newtonian", "power-law-explicit", "power-law-dual", "bingham",
         "non-monotone")


class ResolutionError(Exception):
    """Pointwise stress/strain resolution failed; carries the input tensor."""


@dataclass(frozen=True)
class ConstitutiveLaw:
    """Tagged parameter set; ``p`` is the coercivity power-law index."""

    kind: str
    p: float = 2.0
    K: float = 1.0           # consistency factor (power-law, newtonian)
    Gamma: float = 1.0       # shear-rate scale (power-law)
    nu: float = 1.0          # Bingham viscosity
    tau: float = 0.0         # Bingham yield stress
    a: float = 1.0           # non-monotone parameters
    b: float = 1.0
    c: float = 1.0
    q: float = -1.0
    eps: float = 1e-10       # kink regularization used by resolve_stress

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown constitutive kind {self.kind!r}")
        if self.p <= 1.0:
            raise ValueError("power-law index p must exceed 1")
        if self.kind in ("power-law-explicit", "power-law-dual"):
            if self.K <= 0 or self.Gamma <= 0:
                raise ValueError("power-law needs K > 0 and Gamma > 0")
        if self.kind == "bingham":
            if self.nu <= 0 or self.tau < 0:
                raise ValueError("bingham needs nu > 0 and tau >= 0")
        if self.kind == "non-monotone":
            if min(self.a, self.b, self.c) <= 0:
                raise ValueError("non-monotone needs a, b, c > 0")
        if self.eps < 0:
            raise ValueError("regularization must be nonnegative")

    @property
    def p_prime(self) -> float:
        return self.p / (self.p - 1.0)

    @property
    def monotone_resolvable(self) -> bool:
        return self.kind in ("newtonian", "power-law-explicit",
                             "power-law-dual", "bingham")


def _fro(T: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(T * T, axis=(-2, -1)))


def _check_symmetric(T: np.ndarray, name: str):
    asym = np.max(np.abs(T - np.swapaxes(T, -2, -1))) if T.size else 0.0
    if asym > 1e-12:
        raise ValueError(f"{name} is not symmetric (asymmetry {asym:g})")


def residual(law: ConstitutiveLaw, S: np.ndarray, D: np.ndarray) -> np.ndarray:
    """Evaluate G(S, D) exactly for the selected law."""
    S = np.asarray(S, dtype=float)
    D = np.asarray(D, dtype=float)
    _check_symmetric(S, "S")
    _check_symmetric(D, "D")
    if law.kind == "newtonian":
        return S - law.K * D
    if law.kind == "power-law-explicit":
        t = np.sum(D * D, axis=(-2, -1))
        visc = law.K * (1.0 + law.Gamma * t) ** (0.5 * (law.p - 2.0))
        return S - visc[..., None, None] * D
    if law.kind == "power-law-dual":
        t = np.sum(S * S, axis=(-2, -1))
        fac = law.K * (1.0 + law.Gamma * t) ** (0.5 * (law.p_prime - 2.0))
        return fac[..., None, None] * S - D
    if law.kind == "bingham":
        mS = _fro(S)
        excess = np.maximum(mS - law.tau, 0.0)
        return excess[..., None, None] * S \
            - 2.0 * law.nu * (law.tau + excess)[..., None, None] * D
    # non-monotone
    t = np.sum(S * S, axis=(-2, -1))
    fac = law.a * (1.0 + law.b * t) ** (0.5 * (law.q - 2.0)) + law.c
    return fac[..., None, None] * S - D


def _dual_magnitude(law: ConstitutiveLaw, dmag: np.ndarray) -> np.ndarray:
    """Solve K s (1 + Gamma s^2)^((p'-2)/2) = |D| for s >= 0 (monotone)."""
    e = 0.5 * (law.p_prime - 2.0)

    def f(s):
        return law.K * s * (1.0 + law.Gamma * s * s) ** e - dmag

    lo = np.zeros_like(dmag)
    hi = np.maximum(dmag / law.K, 1.0)
    for _ in range(80):
        bad = f(hi) < 0.0
        if not bad.any():
            break
        hi = np.where(bad, 2.0 * hi, hi)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        neg = f(mid) < 0.0
        lo = np.where(neg, mid, lo)
        hi = np.where(neg, hi, mid)
    s = 0.5 * (lo + hi)
    # Newton polish
    for _ in range(4):
        u = 1.0 + law.Gamma * s * s
        df = law.K * u ** (e - 1.0) * (1.0 + (law.p_prime - 1.0) * law.Gamma * s * s)
        s = np.maximum(s - f(s) / df, 0.0)
    return s


def resolve_stress(law: ConstitutiveLaw, D: np.ndarray) -> np.ndarray:
    """Stress from strain rate for the monotone-resolvable laws."""
    D = np.asarray(D, dtype=float)
    _check_symmetric(D, "D")
    if law.kind == "newtonian":
        return law.K * D
    if law.kind == "power-law-explicit":
        t = np.sum(D * D, axis=(-2, -1))
        visc = law.K * (1.0 + law.Gamma * t) ** (0.5 * (law.p - 2.0))
        return visc[..., None, None] * D
    if law.kind == "power-law-dual":
        dmag = _fro(D)
        s = _dual_magnitude(law, dmag)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(dmag > 0.0, s / np.where(dmag > 0, dmag, 1.0), 0.0)
        return scale[..., None, None] * D
    if law.kind == "bingham":
        if law.eps > 0.0:
            r = np.sqrt(np.sum(D * D, axis=(-2, -1)) + law.eps ** 2)
            return (2.0 * law.nu + law.tau / r)[..., None, None] * D
        dmag = _fro(D)
        with np.errstate(invalid="ignore", divide="ignore"):
            scale = np.where(dmag > 0.0, law.tau / np.where(dmag > 0, dmag, 1.0), 0.0)
        return 2.0 * law.nu * D + scale[..., None, None] * D
    raise ResolutionError(
        "non-monotone law has no single-valued stress resolution; "
        "use resolve_strain or enable the root-scan entry point")


def resolve_strain(law: ConstitutiveLaw, S: np.ndarray) -> np.ndarray:
    """Strain rate from stress, the natural direction for the dual laws."""
    S = np.asarray(S, dtype=float)
    _check_symmetric(S, "S")
    if law.kind == "non-monotone":
        t = np.sum(S * S, axis=(-2, -1))
        fac = law.a * (1.0 + law.b * t) ** (0.5 * (law.q - 2.0)) + law.c
        return fac[..., None, None] * S
    if law.kind == "power-law-dual":
        t = np.sum(S * S, axis=(-2, -1))
        fac = law.K * (1.0 + law.Gamma * t) ** (0.5 * (law.p_prime - 2.0))
        return fac[..., None, None] * S
    if law.kind == "newtonian":
        return S / law.K
    raise ResolutionError(f"no strain-from-stress path for kind {law.kind!r}")


def nonmonotone_stress_roots(law: ConstitutiveLaw, D: np.ndarray,
                             s_max: float = 1e6):
    """All stress magnitudes solving the non-monotone relation for a single D.

    Returns (roots, stresses); the first root is the continuation limit from
    S = 0.  Detected non-uniqueness is simply reported through len(roots).
    """
    from scipy.optimize import brentq
    D = np.asarray(D, dtype=float)
    dmag = float(_fro(D))
    if dmag == 0.0:
        return [0.0], [np.zeros((2, 2))]

    def g(s):
        return (law.a * (1.0 + law.b * s * s) ** (0.5 * (law.q - 2.0)) + law.c) * s - dmag

    grid = np.concatenate([[0.0], np.geomspace(1e-9, s_max, 400)])
    vals = np.array([g(s) for s in grid])
    roots = []
    for i in range(len(grid) - 1):
        if vals[i] == 0.0:
            roots.append(grid[i])
        elif vals[i] * vals[i + 1] < 0.0:
            roots.append(brentq(g, grid[i], grid[i + 1], xtol=1e-15, rtol=1e-15))
    stresses = [r / dmag * D for r in roots]
    return roots, stresses


# -- tangents ------------------------------------------------------------------

# orthonormal (Mandel) basis of symmetric 2x2 matrices
_MANDEL = np.array([
    [[1.0, 0.0], [0.0, 0.0]],
    [[0.0, 0.0], [0.0, 1.0]],
    [[0.0, 2.0 ** -0.5], [2.0 ** -0.5, 0.0]],
])


def to_mandel(T: np.ndarray) -> np.ndarray:
    """Symmetric (..., 2, 2) tensors to (..., 3) Mandel vectors."""
    return np.stack([T[..., 0, 0], T[..., 1, 1], np.sqrt(2.0) * T[..., 0, 1]],
                    axis=-1)


def from_mandel(v: np.ndarray) -> np.ndarray:
    return np.einsum("...i,iab->...ab", v, _MANDEL)


def stress_tangent_mandel(law: ConstitutiveLaw, D: np.ndarray) -> np.ndarray:
    """dS/dD as (..., 3, 3) matrices in the Mandel basis."""
    D = np.asarray(D, dtype=float)
    eye = np.eye(3)
    if law.kind == "newtonian":
        return np.broadcast_to(law.K * eye, D.shape[:-2] + (3, 3)).copy()
    if law.kind == "power-law-explicit":
        t = np.sum(D * D, axis=(-2, -1))
        u = 1.0 + law.Gamma * t
        phi = law.K * u ** (0.5 * (law.p - 2.0))
        dphi = law.K * law.Gamma * 0.5 * (law.p - 2.0) * u ** (0.5 * (law.p - 4.0))
        dm = to_mandel(D)
        return phi[..., None, None] * eye \
            + 2.0 * dphi[..., None, None] * dm[..., :, None] * dm[..., None, :]
    if law.kind == "bingham":
        r = np.sqrt(np.sum(D * D, axis=(-2, -1)) + max(law.eps, 1e-14) ** 2)
        dm = to_mandel(D)
        return (2.0 * law.nu + law.tau / r)[..., None, None] * eye \
            - (law.tau / r ** 3)[..., None, None] * dm[..., :, None] * dm[..., None, :]
    if law.kind == "power-law-dual":
        S = resolve_stress(law, D)
        t = np.sum(S * S, axis=(-2, -1))
        u = 1.0 + law.Gamma * t
        psi = law.K * u ** (0.5 * (law.p_prime - 2.0))
        dpsi = law.K * law.Gamma * 0.5 * (law.p_prime - 2.0) \
            * u ** (0.5 * (law.p_prime - 4.0))
        sm = to_mandel(S)
        H = psi[..., None, None] * eye \
            + 2.0 * dpsi[..., None, None] * sm[..., :, None] * sm[..., None, :]
        return np.linalg.inv(H)
    raise ResolutionError(f"no stress tangent for kind {law.kind!r}")


def stress_tangent(law: ConstitutiveLaw, D: np.ndarray) -> np.ndarray:
    """Fourth-order tangent dS/dD with shape (..., 2, 2, 2, 2)."""
    M = stress_tangent_mandel(law, D)
    return np.einsum("...ij,iab,jcd->...abcd", M, _MANDEL, _MANDEL)


# -- coercivity estimate --------------------------------------------------------

@dataclass(frozen=True)
class CoercivityEstimate:
    c1: float
    c2: float
    active_S: np.ndarray
    active_D: np.ndarray
    n_samples: int


def _random_symmetric(rng: np.random.Generator, n: int) -> np.ndarray:
    return from_mandel(rng.standard_normal((n, 3)))


def coercivity_estimate(law: ConstitutiveLaw, n_samples: int, radius: float,
                        rng: np.random.Generator | None = None) -> CoercivityEstimate:
    """Fit constants of S:D >= c1 (|S|^p' + |D|^p) - c2 over graph samples.

    Two-pass scan: if the inequality holds with c2 = 0, c1 is the exact
    minimum of S:D / (|S|^p' + |D|^p); otherwise c1 is fitted on the
    upper-energy half of the samples and c2 absorbs the rest.
    """
    if n_samples < 1:
        raise ValueError("need at least one sample")
    if radius <= 0:
        raise ValueError("radius must be positive")
    rng = np.random.default_rng(0) if rng is None else rng
    direc = _random_symmetric(rng, n_samples)
    mag = _fro(direc)
    direc /= np.where(mag > 0, mag, 1.0)[..., None, None]
    # half log-spaced magnitudes to probe the small-strain regime
    r_lin = rng.uniform(0.0, radius, n_samples // 2)
    r_log = radius * 10.0 ** rng.uniform(-6, 0, n_samples - n_samples // 2)
    D = direc * np.concatenate([r_lin, r_log])[:, None, None]
    S = resolve_stress(law, D)
    if law.kind == "bingham" and law.tau > 0.0:
        # include the stuck branch: |S| <= tau with D = 0
        nb = max(n_samples // 10, 1)
        sdir = _random_symmetric(rng, nb)
        smag = _fro(sdir)
        sdir /= np.where(smag > 0, smag, 1.0)[..., None, None]
        Sb = sdir * rng.uniform(0.0, law.tau, nb)[:, None, None]
        S = np.concatenate([S, Sb])
        D = np.concatenate([D, np.zeros_like(Sb)])
    P = np.sum(S * D, axis=(-2, -1))
    Phi = _fro(S) ** law.p_prime + _fro(D) ** law.p
    ok = Phi > 0.0
    ratios = P[ok] / Phi[ok]
    if ratios.size and ratios.min() > 1e-12:
        idx = np.flatnonzero(ok)[np.argmin(ratios)]
        return CoercivityEstimate(float(ratios.min()), 0.0, S[idx], D[idx], len(P))
    med = np.median(Phi[ok])
    upper = ok & (Phi >= med)
    c1 = float(max(np.min(P[upper] / Phi[upper]), 0.0))
    slack = c1 * Phi - P
    c2 = float(max(slack.max(), 0.0))
    idx = int(np.argmax(slack))
    return CoercivityEstimate(c1, c2, S[idx], D[idx], len(P))
