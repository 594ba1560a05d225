"""Excitation diagnostics for the online feature stream.

Tracks the cumulative feature Gramian G_t = sum_i z_i z_i' together with
short sliding-window variants.  The spectrum of G_t says whether the latent
features persistently excite every direction the regressor must identify:
lambda_min grows linearly under persistent excitation and stalls when the
features collapse onto a subspace.
"""

from __future__ import annotations

import csv
from collections import deque

import numpy as np

from .validation import ConfigError, as_vector


class GramianTracker:
    """Cumulative and windowed feature Gramians with on-demand spectra.

    Eigen-decompositions only happen inside metrics(), never in track(), so
    the per-step cost of tracking stays O(ell^2).
    """

    def __init__(self, latent_dim: int, windows=(15, 30)):
        if latent_dim < 1:
            raise ConfigError("latent_dim must be >= 1")
        if any(int(w) < 1 for w in windows):
            raise ConfigError("window lengths must be >= 1")
        self.latent_dim = int(latent_dim)
        self.windows = tuple(int(w) for w in windows)
        self.gramian = np.zeros((latent_dim, latent_dim))
        self.count = 0
        self._buffers = {w: deque(maxlen=w) for w in self.windows}

    def track(self, z) -> None:
        z = as_vector(z, n=self.latent_dim, name="z")
        self.gramian += np.outer(z, z)
        for buf in self._buffers.values():
            buf.append(z)
        self.count += 1

    def _window_gramian(self, w: int) -> np.ndarray:
        buf = self._buffers[w]
        G = np.zeros((self.latent_dim, self.latent_dim))
        for z in buf:
            G += np.outer(z, z)
        return G

    def metrics(self, windows=None) -> dict:
        """Spectral summary of the cumulative and windowed Gramians.

        Returns lambda_min, lambda_max, cond, logdet for the cumulative
        Gramian (cond is inf and logdet is -inf while it is singular;
        windowed minima clip at zero instead of erroring).
        """
        windows = self.windows if windows is None else tuple(int(w) for w in windows)
        eig = np.linalg.eigvalsh(0.5 * (self.gramian + self.gramian.T))
        lam_min = max(float(eig[0]), 0.0)
        lam_max = max(float(eig[-1]), 0.0)
        out = {
            "t": self.count,
            "lambda_min": lam_min,
            "lambda_max": lam_max,
            "cond": lam_max / lam_min if lam_min > 0 else np.inf,
        }
        try:
            L = np.linalg.cholesky(self.gramian)
            out["logdet"] = float(2.0 * np.sum(np.log(np.diag(L))))
        except np.linalg.LinAlgError:
            out["logdet"] = -np.inf
        for w in windows:
            if w not in self._buffers:
                raise ConfigError(f"window {w} was not configured at construction")
            eig_w = np.linalg.eigvalsh(self._window_gramian(w))
            out[f"lambda_min_w{w}"] = max(float(eig_w[0]), 0.0)
        return out


def write_metrics_csv(path, rows, windows=(15, 30)) -> None:
    """Persist a metrics time series, one row per tracked step."""
    cols = ["t", "lambda_min", "cond", "logdet"] + [f"lambda_min_w{w}" for w in windows]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in rows:
            writer.writerow([repr(float(row[c])) if c != "t" else int(row[c]) for c in cols])
