"""Covariance spectra and signal vectors used by the experiments.

All generators are seed-deterministic: streams derive from a Philox
counter-based generator keyed by (seed, stream label), so results do not
depend on worker count or call order.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ParameterError

Array = np.ndarray


def _rng(seed: int, *spawn_key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(spawn_key))
    return np.random.Generator(np.random.Philox(ss))


def stream(seed: int, *spawn_key: int) -> np.random.Generator:
    """Independent, reproducible generator for (seed, label...) tuples."""
    return _rng(seed, *spawn_key)


def sample_power_law(d: int, beta: float, seed: int) -> Array:
    """i.i.d. eigenvalues with density (1-beta) * lam^(-beta) on [0, 1].

    Inverse-CDF sampling: lam = U^(1/(1-beta)) for U uniform(0,1).
    """
    if not 0 <= beta < 1:
        raise ParameterError("power-law exponent must satisfy 0 <= beta < 1")
    u = _rng(seed, 0).uniform(size=d)
    return u ** (1.0 / (1.0 - beta))


def sample_marchenko_pastur(
    d: int, sigma: float, seed: int, diagonal_only: bool = True
) -> Array:
    """Wishart sample covariance K = X X^T / d with X_ij ~ N(0, sigma^2).

    With ``diagonal_only`` the eigenvalues are returned as a diagonal
    spectrum (ascending); otherwise the full matrix is returned for the
    non-diagonal SDE experiment.  Aspect ratio is fixed at 1 (square X).
    """
    if d < 2:
        raise ParameterError("Marchenko-Pastur sampling needs d >= 2")
    if sigma <= 0:
        raise ParameterError("sigma must be positive")
    x = _rng(seed, 1).normal(scale=sigma, size=(d, d))
    k = x @ x.T / d
    if diagonal_only:
        return np.linalg.eigvalsh(k)
    return k


def sparse_signal(d: int, k_nonzero: int) -> Array:
    """beta*_i = 1 for the first k_nonzero coordinates, 0 elsewhere."""
    if not 1 <= k_nonzero <= d:
        raise ParameterError("k_nonzero must lie in [1, d]")
    out = np.zeros(d)
    out[:k_nonzero] = 1.0
    return out


@dataclass(frozen=True)
class SpectrumSpec:
    """Serializable description of a covariance spectrum.

    kind: identity | power_law | marchenko_pastur | explicit
    """

    kind: str = "identity"
    beta: float = 0.0
    sigma: float = 1.0
    diagonal_only: bool = True
    values: tuple = ()
    seed: int = 0

    def sample(self, d: int, seed: int | None = None) -> Array:
        seed = self.seed if seed is None else seed
        if self.kind == "identity":
            return np.ones(d)
        if self.kind == "power_law":
            return sample_power_law(d, self.beta, seed)
        if self.kind == "marchenko_pastur":
            return sample_marchenko_pastur(d, self.sigma, seed, self.diagonal_only)
        if self.kind == "explicit":
            vals = np.asarray(self.values, dtype=float)
            if vals.shape != (d,):
                raise ParameterError("explicit spectrum length must equal d")
            return vals
        raise ParameterError(f"unknown spectrum kind {self.kind!r}")

    def to_dict(self) -> dict:
        out = {"kind": self.kind, "seed": self.seed}
        if self.kind == "power_law":
            out["beta"] = self.beta
        elif self.kind == "marchenko_pastur":
            out["sigma"] = self.sigma
            out["diagonal_only"] = self.diagonal_only
        elif self.kind == "explicit":
            out["values"] = list(self.values)
        return out

    @staticmethod
    def from_dict(data: dict) -> "SpectrumSpec":
        data = dict(data)
        values = tuple(data.pop("values", ()))
        return SpectrumSpec(values=values, **data)


def audit_spectrum(entries: Array, kbar: float) -> dict:
    """Covariance-assumption audit: report, never reject.

    Checks entries against the declared bound and the trace-linear-in-d
    window for the mean entry.
    """
    entries = np.asarray(entries, dtype=float)
    mean_entry = float(np.mean(entries))
    return {
        "max_entry": float(np.max(entries)),
        "mean_entry": mean_entry,
        "within_bound": bool(np.max(entries) <= kbar * (1 + 1e-12)),
        "trace_flag": not (0.1 <= mean_entry <= 10.0),
    }
