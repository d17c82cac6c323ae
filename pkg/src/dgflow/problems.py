"""Named initial conditions and forcing terms usable from config files.

Initial velocities map point arrays (n, 2) to velocities (n, 2); forcings
additionally take the time first and are continuous in time, so evaluation
at the quadrature instants of the time rule is well-defined.
"""

from __future__ import annotations

import numpy as np


def initial_zero(pts):
    return np.zeros((len(pts), 2))


def initial_vortex(pts):
    """Divergence-free vortex with zero boundary trace: the curl of
    sin^2(pi x) sin^2(pi y) / pi."""
    x, y = pts[:, 0], pts[:, 1]
    sx, sy = np.sin(np.pi * x), np.sin(np.pi * y)
    cx, cy = np.cos(np.pi * x), np.cos(np.pi * y)
    return np.stack([2.0 * sx * sx * sy * cy, -2.0 * sx * cx * sy * sy], axis=1)


def forcing_zero(t, pts):
    return np.zeros((len(pts), 2))


def forcing_gentle(t, pts):
    """Smooth, modest-amplitude body force, continuous in time."""
    x, y = pts[:, 0], pts[:, 1]
    amp = 0.5 * np.cos(2.0 * np.pi * t)
    return np.stack([amp * np.sin(np.pi * y) * np.sin(np.pi * x),
                     -amp * np.sin(np.pi * x) * np.sin(np.pi * y)], axis=1)


def forcing_steady(t, pts):
    x, y = pts[:, 0], pts[:, 1]
    return np.stack([np.sin(np.pi * y) * (1.0 - x) * x,
                     np.sin(np.pi * x) * (1.0 - y) * y], axis=1)


def forcing_swirl(t, pts):
    """Steady divergence-free body force (a curl), so it drives the velocity
    rather than the pressure."""
    x, y = pts[:, 0], pts[:, 1]
    return np.pi * np.stack([-np.sin(np.pi * x) * np.cos(np.pi * y),
                             np.cos(np.pi * x) * np.sin(np.pi * y)], axis=1)


INITIAL_PRESETS = {
    "zero": initial_zero,
    "vortex": initial_vortex,
}

FORCING_PRESETS = {
    "zero": forcing_zero,
    "gentle": forcing_gentle,
    "steady": forcing_steady,
    "swirl": forcing_swirl,
}
