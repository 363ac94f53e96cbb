"""Steady-state cavity reflection under the mean-field factorization.

Covers the weak-excitation reflection formula, the single-emitter closed
form with saturation, the nonlinear self-consistent solve for the ensemble
response x (with the cavity field <a> = -sqrt(mu)/(1+x)), full reflection
spectra, and the analytic transparency width/depth/center expressions.
"""

from __future__ import annotations

import cmath
import math
import warnings
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .core import (
    CavityParams,
    DecoherenceParams,
    EmitterEnsemble,
    ParameterError,
    SystemModel,
    ensemble_cooperativity,
)


class SelfConsistencyError(RuntimeError):
    """The fixed-point solve for the ensemble response did not converge."""

    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (residual {residual:.3e})")
        self.residual = residual


class CitThresholdError(ValueError):
    """Drive power below the transparency threshold of the analytic formula."""


@dataclass(frozen=True)
class Spectrum:
    """Reflection spectrum on a laser-detuning grid (relative to the
    ensemble center).  ``phase`` is the unwrapped argument of the
    intracavity field <a>; ``converged`` flags per-point solver success."""

    freqs: np.ndarray
    r_complex: np.ndarray
    reflectance: np.ndarray
    phase: np.ndarray
    converged: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "freqs", np.asarray(self.freqs, dtype=float))
        object.__setattr__(self, "r_complex", np.asarray(self.r_complex, dtype=complex))
        object.__setattr__(self, "reflectance", np.asarray(self.reflectance, dtype=float))
        object.__setattr__(self, "phase", np.asarray(self.phase, dtype=float))
        object.__setattr__(self, "converged", np.asarray(self.converged, dtype=bool))


def _make_spectrum(freqs: np.ndarray, r: np.ndarray, a_field: np.ndarray,
                   converged: Optional[np.ndarray] = None) -> Spectrum:
    if converged is None:
        converged = np.ones(len(freqs), dtype=bool)
    phase = np.unwrap(np.angle(a_field))
    return Spectrum(freqs=freqs, r_complex=r, reflectance=np.abs(r) ** 2,
                    phase=phase, converged=converged)


@dataclass(frozen=True)
class TransitionLine:
    """Inhomogeneously broadened transition for the weak-excitation formula:
    total coupling Omega, center, homogeneous linewidth gamma, FWHM."""

    total_coupling: float
    center: float
    gamma: float
    fwhm: float

    def __post_init__(self):
        if self.total_coupling < 0 or self.gamma < 0 or self.fwhm < 0:
            raise ParameterError("transition rates must be non-negative")
        if self.gamma + 0.5 * self.fwhm <= 0:
            raise ParameterError("need gamma + fwhm/2 > 0")

    def response(self, omega: np.ndarray | float) -> np.ndarray:
        """W(omega) = Omega^2 / (omega - center + i gamma + i fwhm/2)."""
        return self.total_coupling**2 / (
            np.asarray(omega, dtype=complex) - self.center + 1j * (self.gamma + 0.5 * self.fwhm)
        )


def reflection_weak_excitation(grid: Sequence[float], transitions: Sequence[TransitionLine],
                               cavity: CavityParams) -> Spectrum:
    """Weak-drive reflection R(w) = |1 - i kappa_c / (w - w_c + i kappa/2 - sum W_X)|^2.

    Grid frequencies and transition centers share the ensemble-center frame;
    the cavity sits at ``cavity.delta_c`` in that frame.
    """
    w = np.asarray(grid, dtype=float)
    wsum = np.zeros(len(w), dtype=complex)
    for tr in transitions:
        wsum += tr.response(w)
    denom = w - cavity.delta_c + 0.5j * cavity.kappa - wsum
    r = 1.0 - 1j * cavity.kappa_c / denom
    # <a> recovered from r = 1 + (2 kappa_c / kappa sqrt(mu)) <a>, mu-independent shape
    a_field = (r - 1.0) * cavity.kappa / (2.0 * cavity.kappa_c)
    return _make_spectrum(w, r, a_field)


@dataclass(frozen=True)
class SingleIonSteadyState:
    sigma_z: float
    sigma_minus: complex
    reflectance: float
    r_complex: complex


def single_ion_steady_state(delta: float, g: float, mu: float, cavity: CavityParams,
                            dec: DecoherenceParams) -> SingleIonSteadyState:
    """Closed-form saturation steady state of one emitter after adiabatic
    elimination of the cavity, plus the reflection including the bare-cavity
    interference term."""
    if mu < 0:
        raise ParameterError("mu must be >= 0")
    kappa = cavity.kappa
    gamma_eff = dec.gamma + 2.0 * g**2 / kappa
    gamma_s_eff = dec.gamma_s + 4.0 * g**2 / kappa
    sat = 1.0 + (4.0 * g**2 * mu / gamma_s_eff) * gamma_eff / (delta**2 + gamma_eff**2)
    sigma_z = -1.0 / sat
    sigma_minus = (1j * g * math.sqrt(mu) / (1j * delta + gamma_eff)) / sat
    bare = 1.0 - cavity.kappa_c / (1j * cavity.delta_c + 0.5 * kappa)
    if mu > 0:
        ion = -4j * cavity.kappa_c * g * sigma_minus / (kappa**2 * math.sqrt(mu))
    else:
        # sigma_minus is itself proportional to sqrt(mu); take the limit
        ion = -4j * cavity.kappa_c * g * ((1j * g / (1j * delta + gamma_eff)) / sat) / kappa**2
        sigma_minus = 0.0 + 0.0j
    r = ion + bare
    return SingleIonSteadyState(sigma_z=sigma_z, sigma_minus=sigma_minus,
                                reflectance=abs(r) ** 2, r_complex=r)


# ---------------------------------------------------------------------------
# Self-consistent ensemble response
# ---------------------------------------------------------------------------


def _lorentzian_response_integral(gamma: float, y: float, half_width: float,
                                  laser_offset: float) -> complex:
    """Exact integral over a unit-mass Lorentzian emitter distribution:

    I = \\int rho(w) (gamma - i(w - w_L)) / (gamma^2 + y + (w - w_L)^2) dw

    with rho a Lorentzian of HWHM ``half_width`` centred at 0 and
    ``laser_offset`` = w_L - w_0.  Evaluated in closed form by residues.
    """
    gy = math.sqrt(gamma**2 + y)
    h = half_width
    d = laser_offset
    term1 = (gamma + h + 1j * d) / (gy**2 + (1j * h - d) ** 2)
    term2 = (h / gy) * (gamma + gy) / (h**2 + (d + 1j * gy) ** 2)
    return term1 + term2


class _ResponseMap:
    """F(x) for the implicit equation x = F(x); F depends on x only through
    t = |1 + x|^2, so the map is evaluated from t directly."""

    def __init__(self, ens: EmitterEnsemble, omega_l: float, cavity: CavityParams,
                 dec: DecoherenceParams, delta_c: Optional[float] = None):
        self.gamma = dec.gamma
        self.gamma_s = dec.gamma_s
        dc = cavity.delta_c if delta_c is None else delta_c
        self.kappa_eff = cavity.kappa + 2j * dc
        self.mu_scale = 1.0 / (1.0 + (2.0 * dc / cavity.kappa) ** 2)
        self.parametric = ens.is_parametric
        if self.parametric:
            assert ens.delta_inh is not None
            self.half_width = 0.5 * ens.delta_inh
            self.laser_offset = omega_l - ens.center
            if ens.g is not None:
                self.levels = [(ens.n * 1.0, ens.g)]
            else:
                assert ens.g_hist is not None
                self.levels = [(ens.n * p, g) for g, p in ens.g_hist if p > 0]
        else:
            deltas = ens.detunings() + ens.center - omega_l
            gs = ens.couplings()
            self.base = 2.0 * gs**2 / (self.kappa_eff * (self.gamma + 1j * deltas))
            denom = self.gamma_s * (self.gamma**2 + deltas**2)
            self.sat = np.divide(4.0 * gs**2 * self.gamma, denom,
                                 out=np.zeros_like(denom), where=denom > 0)

    def weak_limit(self, mu: float) -> complex:
        return self.evaluate(mu=0.0, t=1.0)

    def saturation_scale(self) -> float:
        """Largest saturation coefficient at mu = 1, t = 1 (for continuation)."""
        if self.gamma_s <= 0 or self.gamma <= 0:
            return math.inf
        if self.parametric:
            return max(4.0 * g**2 * self.mu_scale / (self.gamma * self.gamma_s) for _, g in self.levels)
        return float(np.max(self.sat)) * self.mu_scale if len(self.sat) else 0.0

    def evaluate(self, mu: float, t: float) -> complex:
        mu_eff = mu * self.mu_scale
        if self.parametric:
            x = 0.0 + 0.0j
            for weight, g in self.levels:
                if self.gamma_s > 0 and mu_eff > 0:
                    y = 4.0 * g**2 * mu_eff * self.gamma / (t * self.gamma_s)
                else:
                    y = 0.0
                integral = _lorentzian_response_integral(self.gamma, y, self.half_width, self.laser_offset)
                x += weight * (2.0 * g**2 / self.kappa_eff) * integral
            return complex(x)
        damp = 1.0 + self.sat * (mu_eff / t)
        return complex(np.sum(self.base / damp))


def solve_selfconsistent_x(ens: EmitterEnsemble, mu: float, omega_l: float,
                           cavity: CavityParams, dec: DecoherenceParams, *,
                           tol: float = 1e-10, max_iter: int = 10_000,
                           relaxation: float = 0.5, steps_per_decade: int = 10,
                           delta_c: Optional[float] = None) -> complex:
    """Self-consistent ensemble response x at one laser frequency.

    Damped Picard iteration with geometric continuation in mu: start from
    the weak-excitation solution, step mu up by 10^(1/steps_per_decade),
    relaxing x <- (1-a) x + a F(x) until |dx| < tol (1 + |x|) at each step.
    Raises :class:`SelfConsistencyError` (with the residual) on failure.
    """
    if mu < 0:
        raise ParameterError("mu must be >= 0")
    fmap = _ResponseMap(ens, omega_l, cavity, dec, delta_c=delta_c)
    x = fmap.weak_limit(mu)
    if mu == 0:
        return x
    if dec.gamma_s == 0:
        # no relaxation closure: any finite drive fully saturates, sigma_z -> 0
        return complex(0.0)
    sat = fmap.saturation_scale()
    mu_start = min(mu, 1e-3 / sat) if sat > 0 else mu
    n_steps = max(1, math.ceil(steps_per_decade * math.log10(mu / mu_start))) if mu > mu_start else 1
    mus = np.geomspace(mu_start, mu, n_steps + 1) if mu > mu_start else np.array([mu])
    for mu_k in mus:
        residual = math.inf
        for _ in range(max_iter):
            xn = fmap.evaluate(mu_k, abs(1.0 + x) ** 2)
            residual = abs(xn - x)
            x = (1.0 - relaxation) * x + relaxation * xn
            if residual < tol * (1.0 + abs(x)):
                break
        else:
            raise SelfConsistencyError(
                f"no convergence after {max_iter} iterations at mu={mu_k:.3e}", residual)
    return x


def reflection_from_x(x: complex | np.ndarray, cavity: CavityParams,
                      delta_c: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """(r, <a>/sqrt(mu)) from the ensemble response x."""
    dc = cavity.delta_c if delta_c is None else delta_c
    r = 1.0 - 2.0 * cavity.kappa_c / ((cavity.kappa + 2j * dc) * (1.0 + np.asarray(x)))
    a_unit = -1.0 / ((1.0 + 2j * dc / cavity.kappa) * (1.0 + np.asarray(x)))
    return r, a_unit


def reflection_spectrum(ens: EmitterEnsemble, mu: float, grid: Sequence[float],
                        cavity: CavityParams, dec: DecoherenceParams, *,
                        tol: float = 1e-10, max_iter: int = 10_000,
                        relaxation: float = 0.5, steps_per_decade: int = 10,
                        method: str = "newton") -> Spectrum:
    """Reflection spectrum from the nonlinear self-consistent solve.

    Grid = laser detuning from the ensemble center.  ``cavity.delta_c`` is
    the cavity offset from the center; the per-point cavity-laser detuning
    is tracked exactly.  Non-converged points are flagged and set to NaN
    rather than aborting the scan.

    ``method="newton"`` (default) runs the fast scalar Newton solve on
    t = |1+x|^2 per point, falling back to the damped-Picard continuation
    where it fails; ``method="picard"`` forces the continuation path
    everywhere.  Both land on the branch continuously connected to the
    weak-excitation solution (cross-checked in the test suite).
    """
    freqs = np.asarray(grid, dtype=float)
    if method not in ("newton", "picard"):
        raise ParameterError("method must be 'newton' or 'picard'")
    if not ens.is_parametric and method == "newton":
        return _reflection_spectrum_newton(ens, mu, freqs, cavity, dec, tol=tol,
                                           max_iter=max_iter, relaxation=relaxation,
                                           steps_per_decade=steps_per_decade)
    r = np.empty(len(freqs), dtype=complex)
    a = np.empty(len(freqs), dtype=complex)
    ok = np.ones(len(freqs), dtype=bool)
    for i, f in enumerate(freqs):
        omega_l = ens.center + f
        dc_point = cavity.delta_c - f
        try:
            x = solve_selfconsistent_x(ens, mu, omega_l, cavity, dec, tol=tol,
                                       max_iter=max_iter, relaxation=relaxation,
                                       steps_per_decade=steps_per_decade, delta_c=dc_point)
            r[i], a[i] = reflection_from_x(x, cavity, delta_c=dc_point)
        except SelfConsistencyError:
            r[i], a[i], ok[i] = np.nan, np.nan, False
    return _make_spectrum(freqs, r, a, ok)


def _reflection_spectrum_newton(ens: EmitterEnsemble, mu: float, freqs: np.ndarray,
                                cavity: CavityParams, dec: DecoherenceParams, *,
                                tol: float, max_iter: int, relaxation: float,
                                steps_per_decade: int) -> Spectrum:
    """Vectorized-over-grid Newton solve on t = |1+x|^2 (explicit ensembles).

    x depends on itself only through t, so each grid point reduces to one
    real root-find h(t) = t - |1+x(t)|^2 = 0, seeded from the
    weak-excitation value (largest-t root, the weak-connected branch)."""
    gamma, gamma_s = dec.gamma, dec.gamma_s
    deltas = ens.detunings()[None, :] - freqs[:, None]  # emitter-minus-laser
    gs = ens.couplings()[None, :]
    dc = cavity.delta_c - freqs
    kappa_eff = (cavity.kappa + 2j * dc)[:, None]
    mu_eff_vec = mu / (1.0 + (2.0 * dc / cavity.kappa) ** 2)
    base = 2.0 * gs**2 / (kappa_eff * (gamma + 1j * deltas))
    x_weak = np.sum(base, axis=1)
    n_pts = len(freqs)
    ok = np.ones(n_pts, dtype=bool)

    if mu == 0:
        x = x_weak
    elif gamma_s == 0:
        x = np.zeros(n_pts, dtype=complex)  # fully saturated ensemble
    else:
        sat = 4.0 * gs**2 * gamma / (gamma_s * (gamma**2 + deltas**2))
        sat_mu = sat * mu_eff_vec[:, None]

        def x_of_t(t):
            return np.sum(base / (1.0 + sat_mu / t[:, None]), axis=1)

        def h_of_t(t):
            return t - np.abs(1.0 + x_of_t(t)) ** 2

        t = np.abs(1.0 + x_weak) ** 2
        converged = np.zeros(n_pts, dtype=bool)
        for _ in range(60):
            h = h_of_t(t)
            dt_fd = 1e-6 * t
            hp = (h_of_t(t + dt_fd) - h) / dt_fd
            step = np.where(np.abs(hp) > 1e-300, h / np.where(hp == 0, 1.0, hp), 0.0)
            t_new = t - step
            t_new = np.where(t_new <= 0, 0.5 * t, t_new)  # keep t positive
            converged = np.abs(t_new - t) <= 1e-13 * (1.0 + np.abs(t_new))
            t = t_new
            if converged.all():
                break
        x = x_of_t(t)
        # spec convergence criterion on x itself; fall back where violated
        resid = np.abs(x - x_of_t(np.abs(1.0 + x) ** 2))
        bad = ~(resid < tol * (1.0 + np.abs(x)))
        for i in np.where(bad)[0]:
            try:
                x[i] = solve_selfconsistent_x(
                    ens, mu, ens.center + freqs[i], cavity, dec, tol=tol,
                    max_iter=max_iter, relaxation=relaxation,
                    steps_per_decade=steps_per_decade, delta_c=dc[i])
            except SelfConsistencyError:
                ok[i] = False
    r, a = reflection_from_x(x, cavity, delta_c=dc)
    r[~ok] = np.nan
    a = np.where(ok, a, np.nan)
    return _make_spectrum(freqs, r, a, ok)


# ---------------------------------------------------------------------------
# Analytic transparency expressions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CitAnalytics:
    """Analytic transparency dip: FWHM ``width``, normalized ``depth``,
    ``center`` (cavity-detuning corrected), and the high-power floor
    ``width_min`` = Delta_inh / C."""

    width: float
    depth: float
    center: float
    width_min: float


def cit_power_factor(model: SystemModel, mu: float) -> float:
    """The saturation factor B = (2 N <g> / (Delta_inh kappa)) sqrt(gamma_s gamma / mu);
    equals C sqrt(gamma_s gamma / (4 g^2 mu)) for uniform coupling."""
    ens, dec, cav = model.ensemble, model.decoherence, model.cavity
    if ens.delta_inh is None:
        raise ParameterError("analytic dip expressions need a parametric ensemble")
    if mu <= 0:
        return math.inf
    g_mean, _ = ens.g_moments()
    return (2.0 * ens.n * g_mean / (ens.delta_inh * cav.kappa)) * math.sqrt(
        dec.gamma_s * dec.gamma / mu)


def cit_center(omega0: float, omega_cav: float, cooperativity: float,
               delta_inh: float, kappa: float) -> float:
    """Dip center for a detuned cavity:
    [omega_0 - (Delta_inh/(C kappa)) omega_c] / (1 - Delta_inh/(C kappa))."""
    eps = delta_inh / (cooperativity * kappa)
    return (omega0 - eps * omega_cav) / (1.0 - eps)


def cit_analytics(model: SystemModel, mu: float, *, check: bool = True,
                  assumption_ratio: float = 10.0) -> CitAnalytics:
    """Analytic width/depth/center of the transparency dip at drive mu.

    Raises :class:`CitThresholdError` when mu is at or below the pole of the
    width formula.  Warns (never aborts) when the validity conditions fail.
    """
    ens, cav = model.ensemble, model.cavity
    c = ensemble_cooperativity(cav, ens)
    assert ens.delta_inh is not None
    if check:
        from .core import DriveParams, validate_assumptions

        report = validate_assumptions(model, DriveParams(mu=mu), ratio=assumption_ratio)
        if not report.passed:
            failing = [c_.name for c_ in report.checks if not c_.passed]
            warnings.warn(f"analytic dip expressions outside validity regime: {failing}",
                          stacklevel=2)
    b = cit_power_factor(model, mu)
    if 1.0 - b <= 0.0:
        raise CitThresholdError(
            f"below CIT threshold power: 1 - C sqrt(gamma_s gamma / 4 g^2 mu) = {1.0 - b:.3e}")
    width_min = ens.delta_inh / c
    width = width_min / (1.0 - b)
    kc_ratio = cav.coupling_ratio
    depth = ((1.0 - b) - kc_ratio * (1.0 - b) ** 2) / (1.0 - kc_ratio)
    center = cit_center(ens.center, ens.center + cav.delta_c, c, ens.delta_inh, cav.kappa)
    return CitAnalytics(width=width, depth=depth, center=center, width_min=width_min)


def single_contribution(delta: float, g: float, sigma_z: float, dec: DecoherenceParams) -> complex:
    """Relative coherence of one emitter, <sigma^-_D>/<a> = i g sigma_z (gamma - i D)/(gamma^2 + D^2)."""
    gamma = dec.gamma
    return 1j * g * sigma_z * (gamma - 1j * delta) / (gamma**2 + delta**2)


def pair_contribution(delta: float, g: float, sigma_z: float, dec: DecoherenceParams) -> complex:
    """Summed relative coherence of a symmetric +/-delta pair:
    i g sigma_z (2 gamma) / (gamma^2 + delta^2)."""
    gamma = dec.gamma
    return 1j * g * sigma_z * (2.0 * gamma) / (gamma**2 + delta**2)


__all__ = [
    "SelfConsistencyError",
    "CitThresholdError",
    "Spectrum",
    "TransitionLine",
    "reflection_weak_excitation",
    "SingleIonSteadyState",
    "single_ion_steady_state",
    "solve_selfconsistent_x",
    "reflection_from_x",
    "reflection_spectrum",
    "CitAnalytics",
    "cit_power_factor",
    "cit_center",
    "cit_analytics",
    "single_contribution",
    "pair_contribution",
]
