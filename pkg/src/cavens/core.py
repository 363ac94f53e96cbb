"""Parameter containers, derived rates, and validity checks.

All rates are angular frequencies (rad/s).  Containers are frozen
dataclasses: they validate on construction, are immutable afterwards and
safe to share between concurrent tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .units import HBAR, TWO_PI, hz_to_angular


class ParameterError(ValueError):
    """A parameter bundle violates one of its invariants."""


@dataclass(frozen=True)
class CavityParams:
    """One-sided cavity: total decay ``kappa``, input coupling ``kappa_c``,
    detuning ``delta_c`` and optical carrier ``omega`` (all rad/s).

    ``delta_c`` is the cavity-minus-laser detuning for single-point
    operations; for frequency scans it is interpreted as the cavity
    detuning from the ensemble center (the laser-at-center value) and the
    per-point detuning is tracked by the solvers.
    """

    kappa: float
    kappa_c: float
    delta_c: float = 0.0
    omega: float = hz_to_angular(304500e9)

    def __post_init__(self) -> None:
        if not self.kappa > 0:
            raise ParameterError(f"kappa must be positive, got {self.kappa}")
        if not (0 < self.kappa_c <= self.kappa):
            raise ParameterError(
                f"kappa_c must satisfy 0 < kappa_c <= kappa, got {self.kappa_c}"
            )
        if not self.omega > 0:
            raise ParameterError(f"omega must be positive, got {self.omega}")

    @classmethod
    def from_hz(cls, kappa_hz: float, kappa_c_hz: float, delta_c_hz: float = 0.0,
                omega_hz: float = 304500e9) -> "CavityParams":
        return cls(
            kappa=hz_to_angular(kappa_hz),
            kappa_c=hz_to_angular(kappa_c_hz),
            delta_c=hz_to_angular(delta_c_hz),
            omega=hz_to_angular(omega_hz),
        )

    @property
    def coupling_ratio(self) -> float:
        """kappa_c / kappa."""
        return self.kappa_c / self.kappa


@dataclass(frozen=True)
class DecoherenceParams:
    """Spontaneous decay ``gamma_s`` and excess dephasing ``gamma_d`` (rad/s)."""

    gamma_s: float
    gamma_d: float = 0.0

    def __post_init__(self) -> None:
        if self.gamma_s < 0:
            raise ParameterError(f"gamma_s must be >= 0, got {self.gamma_s}")
        if self.gamma_d < 0:
            raise ParameterError(f"gamma_d must be >= 0, got {self.gamma_d}")

    @classmethod
    def from_hz(cls, gamma_s_hz: float, gamma_d_hz: float = 0.0) -> "DecoherenceParams":
        return cls(hz_to_angular(gamma_s_hz), hz_to_angular(gamma_d_hz))

    @property
    def gamma(self) -> float:
        """Total decoherence rate gamma = gamma_s/2 + gamma_d."""
        return 0.5 * self.gamma_s + self.gamma_d


#: Histogram of coupling strengths: tuple of (g, probability) pairs.
GHistogram = tuple[tuple[float, float], ...]

# Coprime stride used to decorrelate coupling quantiles from detuning
# quantiles in the parametric -> explicit conversion (golden-ratio based).
_DECORRELATION_RATIO = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class EmitterEnsemble:
    """Ensemble of two-level emitters.

    Either an explicit list of ``(detuning, coupling)`` pairs, with
    detunings relative to the ensemble center, or a parametric Lorentzian
    description (``n_ions``, FWHM ``delta_inh``, ``center``) whose coupling
    is a single value ``g`` or a histogram ``g_hist``.
    """

    emitters: Optional[tuple[tuple[float, float], ...]] = None
    n_ions: Optional[int] = None
    delta_inh: Optional[float] = None
    center: float = 0.0
    g: Optional[float] = None
    g_hist: Optional[GHistogram] = None

    def __post_init__(self) -> None:
        if self.emitters is not None:
            object.__setattr__(self, "emitters", tuple((float(d), float(g)) for d, g in self.emitters))
            if len(self.emitters) == 0:
                raise ParameterError("explicit ensemble must contain at least one emitter")
            if any(g <= 0 for _, g in self.emitters):
                raise ParameterError("all couplings g_j must be positive")
            if self.n_ions is not None and self.n_ions != len(self.emitters):
                raise ParameterError("n_ions disagrees with the explicit emitter list")
            object.__setattr__(self, "n_ions", len(self.emitters))
            return
        if self.n_ions is None or self.n_ions < 1:
            raise ParameterError("parametric ensemble needs n_ions >= 1")
        if self.delta_inh is None or not self.delta_inh > 0:
            raise ParameterError("parametric ensemble needs a positive FWHM delta_inh")
        if (self.g is None) == (self.g_hist is None):
            raise ParameterError("give exactly one of g or g_hist")
        if self.g is not None and not self.g > 0:
            raise ParameterError("g must be positive")
        if self.g_hist is not None:
            hist = tuple((float(g), float(p)) for g, p in self.g_hist)
            object.__setattr__(self, "g_hist", hist)
            if any(g <= 0 for g, _ in hist) or any(p < 0 for _, p in hist):
                raise ParameterError("histogram needs positive g and non-negative weights")
            total = math.fsum(p for _, p in hist)
            if abs(total - 1.0) > 1e-12:
                raise ParameterError(f"histogram weights must sum to 1 (got {total!r})")

    @classmethod
    def explicit(cls, emitters: Sequence[tuple[float, float]], center: float = 0.0) -> "EmitterEnsemble":
        return cls(emitters=tuple(emitters), center=center)

    @classmethod
    def lorentzian(cls, n_ions: int, delta_inh: float, g: Optional[float] = None,
                   center: float = 0.0, g_hist: Optional[GHistogram] = None) -> "EmitterEnsemble":
        return cls(n_ions=n_ions, delta_inh=delta_inh, center=center, g=g, g_hist=g_hist)

    @classmethod
    def identical(cls, n_ions: int, g: float, detuning: float = 0.0) -> "EmitterEnsemble":
        """n_ions identical emitters at a common detuning from the center."""
        return cls(emitters=tuple((detuning, g) for _ in range(n_ions)))

    @property
    def is_parametric(self) -> bool:
        return self.emitters is None

    @property
    def n(self) -> int:
        assert self.n_ions is not None
        return self.n_ions

    def g_moments(self) -> tuple[float, float]:
        """Return (<g>, <g^2>) over the ensemble."""
        if self.emitters is not None:
            gs = np.array([g for _, g in self.emitters])
            return float(gs.mean()), float((gs**2).mean())
        if self.g is not None:
            return self.g, self.g**2
        assert self.g_hist is not None
        g = np.array([gv for gv, _ in self.g_hist])
        p = np.array([pv for _, pv in self.g_hist])
        return float(np.sum(p * g)), float(np.sum(p * g**2))

    @property
    def g_rms(self) -> float:
        return math.sqrt(self.g_moments()[1])

    @property
    def total_coupling(self) -> float:
        """Omega = sqrt(N <g^2>)."""
        return math.sqrt(self.n * self.g_moments()[1])

    def detunings(self) -> np.ndarray:
        """Emitter detunings relative to the ensemble center (explicit form)."""
        ens = self if self.emitters is not None else self.to_explicit()
        assert ens.emitters is not None
        return np.array([d for d, _ in ens.emitters])

    def couplings(self) -> np.ndarray:
        ens = self if self.emitters is not None else self.to_explicit()
        assert ens.emitters is not None
        return np.array([g for _, g in ens.emitters])

    def to_explicit(self, n: Optional[int] = None) -> "EmitterEnsemble":
        """Deterministic parametric -> explicit conversion.

        Detunings are Lorentzian quantile medians: emitter i of n sits at the
        median of equal-probability bin i.  A coupling histogram is expanded
        the same way (quantile medians of p(g)) and assigned to the
        detuning-sorted emitters through a fixed low-discrepancy stride so
        that g and detuning stay uncorrelated; a constant g is broadcast.
        """
        if self.emitters is not None:
            return self
        assert self.delta_inh is not None
        nn = self.n if n is None else int(n)
        if nn < 1:
            raise ParameterError("need at least one emitter")
        q = (np.arange(nn) + 0.5) / nn
        deltas = 0.5 * self.delta_inh * np.tan(math.pi * (q - 0.5))
        if self.g is not None:
            gs = np.full(nn, self.g)
        else:
            gs_sorted = _histogram_quantiles(self.g_hist, nn)  # type: ignore[arg-type]
            stride = max(1, round(_DECORRELATION_RATIO * nn))
            while math.gcd(stride, nn) != 1:
                stride += 1
            gs = gs_sorted[(np.arange(nn) * stride) % nn]
        return EmitterEnsemble.explicit(list(zip(deltas, gs)), center=self.center)


def _histogram_quantiles(hist: GHistogram, n: int) -> np.ndarray:
    """n quantile-median samples (sorted) of a discrete (g, p) histogram."""
    pairs = sorted(hist)
    gs = np.array([g for g, _ in pairs])
    cum = np.cumsum([p for _, p in pairs])
    q = (np.arange(n) + 0.5) / n
    idx = np.searchsorted(cum, q, side="left")
    return gs[np.clip(idx, 0, len(gs) - 1)]


@dataclass(frozen=True)
class DriveParams:
    """Drive description: input power (W) and/or bare-cavity photon number mu.

    The two are related by mu = kappa_c P_in / (((kappa/2)^2 + delta_c^2) hbar omega);
    when both are given they must be consistent in the resonant (delta_c = 0)
    convention.
    """

    power_in: Optional[float] = None
    mu: Optional[float] = None
    omega_l: float = 0.0
    pulse_length: Optional[float] = None

    def __post_init__(self) -> None:
        if self.power_in is not None and self.power_in < 0:
            raise ParameterError("power_in must be >= 0")
        if self.mu is not None and self.mu < 0:
            raise ParameterError("mu must be >= 0")
        if self.power_in is None and self.mu is None:
            raise ParameterError("give power_in or mu")

    def resolve_mu(self, cavity: CavityParams, resonant: bool = True) -> float:
        """Return mu, computing it from power_in when needed.

        If both power_in and mu were provided, verify consistency under the
        resonant conversion to 1e-9 relative.
        """
        if self.mu is not None and self.power_in is not None:
            ref = mu_from_power(self.power_in, cavity, resonant=True)
            if not math.isclose(self.mu, ref, rel_tol=1e-9, abs_tol=0.0):
                raise ParameterError(
                    f"mu={self.mu!r} inconsistent with power_in={self.power_in!r} (expected mu={ref!r})"
                )
            return self.mu
        if self.mu is not None:
            return self.mu
        assert self.power_in is not None
        return mu_from_power(self.power_in, cavity, resonant=resonant)


@dataclass(frozen=True)
class SystemModel:
    """Cavity + decoherence + ensemble in one bundle."""

    cavity: CavityParams
    decoherence: DecoherenceParams
    ensemble: EmitterEnsemble


@dataclass(frozen=True)
class DerivedRates:
    """Rates derived from a model: total decoherence gamma, Purcell rate
    Gamma_c = 4<g^2>/kappa, and (parametric ensembles only) the cooperativity
    C = 4N<g^2>/(kappa Delta_inh)."""

    gamma_total: float
    purcell: float
    cooperativity: Optional[float] = None


def mu_from_power(power_in: float, cavity: CavityParams, resonant: bool = False) -> float:
    """Bare-cavity mean photon number for a given input power.

    mu = kappa_c P_in / (((kappa/2)^2 + delta_c^2) hbar omega); the
    ``resonant`` flag drops delta_c.
    """
    if power_in < 0:
        raise ParameterError("power_in must be >= 0")
    dc2 = 0.0 if resonant else cavity.delta_c**2
    return cavity.kappa_c * power_in / (((0.5 * cavity.kappa) ** 2 + dc2) * HBAR * cavity.omega)


def power_from_mu(mu: float, cavity: CavityParams, resonant: bool = False) -> float:
    """Inverse of :func:`mu_from_power`."""
    dc2 = 0.0 if resonant else cavity.delta_c**2
    return mu * ((0.5 * cavity.kappa) ** 2 + dc2) * HBAR * cavity.omega / cavity.kappa_c


def ensemble_cooperativity(cavity: CavityParams, ens: EmitterEnsemble,
                           delta_inh: Optional[float] = None) -> float:
    """C = 4 N <g^2> / (kappa Delta_inh).

    For explicit ensembles ``delta_inh`` must be supplied; parametric
    ensembles carry their own.
    """
    if delta_inh is None:
        delta_inh = ens.delta_inh
    if delta_inh is None:
        raise ParameterError("cooperativity needs delta_inh (parametric ensemble or explicit argument)")
    _, g2 = ens.g_moments()
    return 4.0 * ens.n * g2 / (cavity.kappa * delta_inh)


def derive_rates(cavity: CavityParams, dec: DecoherenceParams, ens: EmitterEnsemble) -> DerivedRates:
    """Gamma, Gamma_c from <g^2>, and C for parametric ensembles (else None)."""
    _, g2 = ens.g_moments()
    purcell = 4.0 * g2 / cavity.kappa
    coop = None
    if ens.is_parametric:
        coop = ensemble_cooperativity(cavity, ens)
    return DerivedRates(gamma_total=dec.gamma, purcell=purcell, cooperativity=coop)


@dataclass(frozen=True)
class AssumptionCheck:
    name: str
    ratio: float
    passed: bool


@dataclass(frozen=True)
class AssumptionReport:
    checks: tuple[AssumptionCheck, ...]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> AssumptionCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def as_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "checks": {c.name: {"ratio": c.ratio, "passed": c.passed} for c in self.checks},
        }


def validate_assumptions(model: SystemModel, drive: DriveParams, ratio: float = 10.0,
                         fsr: Optional[float] = None) -> AssumptionReport:
    """Check the analytic-regime conditions; warn-level reporting, never raises.

    Evaluated with ">>" interpreted as "larger by at least ``ratio``":

    - high_cooperativity: C >> 1
    - power_upper: (Delta_inh/4g)^2 (gamma_s/gamma) >> mu
    - power_lower: mu >> gamma gamma_s / (4 g^2)
    - inhomogeneity: Delta_inh / gamma >> C
    - tavis_cummings (when fsr given): FSR >> |W(omega_0)|

    The rms coupling stands in for g under inhomogeneous coupling.
    """
    cav, dec, ens = model.cavity, model.decoherence, model.ensemble
    mu = drive.resolve_mu(cav)
    gamma = dec.gamma
    _, g2 = ens.g_moments()
    checks = []

    def ratio_of(value: float, bound: float) -> float:
        if bound == 0.0:
            return math.inf if value > 0 else 0.0
        return value / bound

    if ens.delta_inh is not None:
        c = ensemble_cooperativity(cav, ens)
        checks.append(AssumptionCheck("high_cooperativity", c, c >= ratio))
        upper = (ens.delta_inh / (4.0 * math.sqrt(g2))) ** 2 * (dec.gamma_s / gamma if gamma > 0 else 0.0)
        r_up = ratio_of(upper, mu)
        checks.append(AssumptionCheck("power_upper", r_up, r_up >= ratio))
        lower = gamma * dec.gamma_s / (4.0 * g2)
        r_lo = ratio_of(mu, lower)
        checks.append(AssumptionCheck("power_lower", r_lo, r_lo >= ratio))
        r_inh = ratio_of(ens.delta_inh / gamma if gamma > 0 else math.inf, c)
        checks.append(AssumptionCheck("inhomogeneity", r_inh, r_inh >= ratio))
        if fsr is not None:
            w0 = ens.n * g2 / (gamma + 0.5 * ens.delta_inh)
            r_tc = ratio_of(fsr, w0)
            checks.append(AssumptionCheck("tavis_cummings", r_tc, r_tc >= ratio))
    return AssumptionReport(checks=tuple(checks), threshold=ratio)


__all__ = [
    "ParameterError",
    "CavityParams",
    "DecoherenceParams",
    "EmitterEnsemble",
    "DriveParams",
    "SystemModel",
    "DerivedRates",
    "mu_from_power",
    "power_from_mu",
    "ensemble_cooperativity",
    "derive_rates",
    "AssumptionCheck",
    "AssumptionReport",
    "validate_assumptions",
]
