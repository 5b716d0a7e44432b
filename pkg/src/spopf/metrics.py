"""Path-shape metrics comparing a corner path with the straight line.

Both curves are parameterized by normalized arclength sigma in [0, 1]. The
integrands are the rates of change along sigma: for the straight line that
rate is the constant vector u1 - u0, for the path it is its length times the
unit tangent of the current segment. Hence

    path_diff = int ||p'(sigma) - L'(sigma)|| / int ||L'(sigma)||
    gap       = (int ||p'|| - int ||L'||) / int ||L'||

and the gap is the relative excess length of the path. Integrals use the
composite midpoint rule on ``n_samples`` equally spaced arclength samples.
"""

from __future__ import annotations

import numpy as np

N_SAMPLES = 1001


def arclength_samples(corners, n_samples=N_SAMPLES):
    """Points of the polyline through ``corners`` at equal arclength steps."""
    C = np.asarray(corners, dtype=float)
    seg = np.linalg.norm(np.diff(C, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0.0:
        raise ValueError("path has zero length")
    keep = np.concatenate([[True], seg > 0])  # drop repeated corners
    s, C = s[keep], C[keep]
    sig = np.linspace(0.0, s[-1], n_samples)
    return np.column_stack([np.interp(sig, s, C[:, j]) for j in range(C.shape[1])])


def path_metrics(corners, u0=None, u1=None, n_samples=N_SAMPLES):
    """(path_diff_pct, obj_fun_gap_pct) of a path given by all its corners.

    ``corners`` includes both endpoints; if ``u0``/``u1`` are given they must
    match the first and last corner.
    """
    C = np.asarray(corners, dtype=float)
    if u0 is not None and not np.allclose(C[0], u0):
        raise ValueError("first corner differs from u0")
    if u1 is not None and not np.allclose(C[-1], u1):
        raise ValueError("last corner differs from u1")
    h = 1.0 / (n_samples - 1)
    vel_p = np.diff(arclength_samples(C, n_samples), axis=0) / h
    vel_L = C[-1] - C[0]
    base = np.linalg.norm(vel_L)
    if base == 0.0:
        raise ValueError("endpoints coincide")
    diff = np.sum(np.linalg.norm(vel_p - vel_L, axis=1)) * h
    length = np.sum(np.linalg.norm(vel_p, axis=1)) * h
    return float(diff / base * 100.0), float((length - base) / base * 100.0)
