import math

import numpy as np
import pytest

from cavens.analysis import DipNormalization, fit_lorentzian_dip
from cavens.core import DecoherenceParams, EmitterEnsemble, SystemModel
from cavens.lindblad import mean_field_ode_steady_state
from cavens.meanfield import (
    CitThresholdError,
    TransitionLine,
    cit_analytics,
    cit_center,
    pair_contribution,
    reflection_from_x,
    reflection_spectrum,
    reflection_weak_excitation,
    single_contribution,
    single_ion_steady_state,
    solve_selfconsistent_x,
)
from cavens.units import TWO_PI, hz_to_angular

from conftest import coupling_for_cooperativity


def paper_like_ensemble(cavity, delta_inh, n=400, c=12.0):
    g = coupling_for_cooperativity(c, cavity, delta_inh, n)
    return EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh, g=g)


class TestWeakExcitation:
    def test_bare_cavity_without_emitters(self, cavity):
        grid = np.linspace(-60e9, 60e9, 301) * TWO_PI
        spec = reflection_weak_excitation(grid, [], cavity)
        # Lorentzian cavity response: minimum (1 - 2 kc/k)^2 at resonance
        i0 = np.argmin(np.abs(grid))
        assert math.isclose(spec.reflectance[i0], (1 - 2 * cavity.coupling_ratio) ** 2,
                            rel_tol=1e-9)
        assert spec.reflectance[0] > 0.9

    def test_three_transition_peaks(self, cavity, decoherence, delta_inh):
        omega_a = hz_to_angular(4.4e9)
        lines = [
            TransitionLine(omega_a, 0.0, decoherence.gamma, delta_inh),
            TransitionLine(omega_a, hz_to_angular(4e9), decoherence.gamma, delta_inh),
            TransitionLine(omega_a * math.sqrt(2), hz_to_angular(7e9), decoherence.gamma,
                           delta_inh),
        ]
        grid = np.linspace(-3e9, 10e9, 2601) * TWO_PI
        spec = reflection_weak_excitation(grid, lines, cavity)
        for center_hz in (0.0, 4e9, 7e9):
            i = np.argmin(np.abs(grid - hz_to_angular(center_hz)))
            assert spec.reflectance[i] > 0.9
        assert np.all(spec.reflectance <= 1.0 + 1e-9)

    def test_strong_single_transition_approaches_unity(self, cavity, decoherence, delta_inh):
        r_at_center = []
        for coupling_ghz in (1.0, 4.0, 16.0, 64.0):
            line = TransitionLine(hz_to_angular(coupling_ghz * 1e9), 0.0,
                                  decoherence.gamma, delta_inh)
            spec = reflection_weak_excitation([0.0], [line], cavity)
            r_at_center.append(spec.reflectance[0])
        assert np.all(np.diff(r_at_center) > 0)
        assert 1.0 - r_at_center[-1] < 1e-3


class TestSingleIon:
    def test_ground_state_limit(self, cavity, g35):
        # gamma << Gamma_c: the unsaturated emitter pushes reflection to ~1
        dec = DecoherenceParams.from_hz(600, 0.0)
        ss = single_ion_steady_state(0.0, g35, 0.0, cavity, dec)
        assert math.isclose(ss.sigma_z, -1.0)
        assert ss.reflectance > 0.98

    def test_saturation_limit(self, cavity, decoherence, g35):
        ss = single_ion_steady_state(0.0, g35, 1e9, cavity, decoherence)
        assert abs(ss.sigma_z) < 1e-6
        assert abs(ss.sigma_minus) < 1e-6
        assert math.isclose(ss.reflectance, 0.36, abs_tol=1e-6)


class TestSelfConsistentX:
    def test_empty_response(self, cavity, decoherence):
        ens = EmitterEnsemble.explicit([(0.0, 1.0)])
        x = solve_selfconsistent_x(ens, 0.0, 0.0, cavity, decoherence)
        assert x != 0  # weak response present
        tiny = EmitterEnsemble.explicit([(0.0, 1e-12)])
        assert abs(solve_selfconsistent_x(tiny, 1e-6, 0.0, cavity, decoherence)) < 1e-20

    def test_weak_limit_matches_weak_excitation(self, cavity, decoherence, delta_inh):
        ens = paper_like_ensemble(cavity, delta_inh)
        omega = ens.total_coupling
        line = TransitionLine(omega, 0.0, decoherence.gamma, delta_inh)
        for f_hz in (0.0, 30e6, -80e6):
            f = hz_to_angular(f_hz)
            x = solve_selfconsistent_x(ens, 0.0, f, cavity, decoherence, delta_c=-f)
            r, _ = reflection_from_x(x, cavity, delta_c=-f)
            spec = reflection_weak_excitation([f], [line], cavity)
            assert abs(r - spec.r_complex[0]) < 1e-6 * abs(spec.r_complex[0])

    def test_closed_form_oracle(self):
        """Deep inside the validity regime (every ratio >= 30) the solver
        matches the explicit solution within 5% per component."""
        from cavens.core import CavityParams, DriveParams, validate_assumptions

        cav = CavityParams.from_hz(10e9, 2e9)
        dec = DecoherenceParams.from_hz(1e3, 0.0)
        n, g = 13900, hz_to_angular(30e6)
        dinh = hz_to_angular(100e6)
        ens = EmitterEnsemble.lorentzian(n_ions=n, delta_inh=dinh, g=g)
        model = SystemModel(cav, dec, ens)
        offset = hz_to_angular(0.1e6)
        for mu in np.geomspace(1e-4, 6e-4, 5):
            assert validate_assumptions(model, DriveParams(mu=mu), ratio=30).passed
            x = solve_selfconsistent_x(ens, mu, offset, cav, dec)
            q = dinh * cav.kappa / (2 * n * g) * math.sqrt(mu / (dec.gamma_s * dec.gamma))
            x_ref = 1.0 / (q - 1.0) + 8j * offset * n * g**2 / (dinh**2 * cav.kappa)
            assert abs(x.real - x_ref.real) <= 0.05 * abs(x_ref.real)
            assert abs(x.imag - x_ref.imag) <= 0.05 * abs(x_ref.imag)

    def test_ode_oracle_equivalence_small_n(self, cavity, decoherence, g35):
        """Fixed point equals the integrated mean-field steady state (N <= 3)."""
        ens = EmitterEnsemble.explicit([(-hz_to_angular(2e6), 0.9 * g35),
                                        (hz_to_angular(0.5e6), g35),
                                        (hz_to_angular(3e6), 1.2 * g35)])
        for mu in (1e-7, 1e-4):
            x = solve_selfconsistent_x(ens, mu, 0.0, cavity, decoherence)
            ss = mean_field_ode_steady_state(ens, mu, 0.0, cavity, decoherence)
            r, _ = reflection_from_x(x, cavity)
            assert abs(abs(r) ** 2 - abs(ss.r_complex) ** 2) < 1e-6


class TestReflectionSpectrum:
    def test_mirror_symmetry(self, cavity, decoherence, delta_inh):
        ens = paper_like_ensemble(cavity, delta_inh).to_explicit()
        grid = np.linspace(-50e6, 50e6, 81) * TWO_PI
        spec = reflection_spectrum(ens, 1e-6, grid, cavity, decoherence)
        assert np.max(np.abs(spec.reflectance - spec.reflectance[::-1])) < 1e-9

    def test_reflectance_bounded(self, cavity, decoherence, delta_inh):
        ens = paper_like_ensemble(cavity, delta_inh).to_explicit()
        grid = np.linspace(-300e6, 300e6, 101) * TWO_PI
        for mu in (1e-8, 1e-5):
            spec = reflection_spectrum(ens, mu, grid, cavity, decoherence)
            assert np.all(spec.reflectance <= 1.0 + 1e-9)
            assert np.all(spec.reflectance >= 0.0)
            assert spec.converged.all()

    def test_newton_matches_picard(self, cavity, decoherence, delta_inh):
        ens = paper_like_ensemble(cavity, delta_inh, n=200).to_explicit()
        grid = np.array([-40e6, -5e6, 0.0, 2e6, 60e6]) * TWO_PI
        for mu in (1e-7, 1e-5, 1e-3):
            s_newton = reflection_spectrum(ens, mu, grid, cavity, decoherence)
            s_picard = reflection_spectrum(ens, mu, grid, cavity, decoherence,
                                           method="picard")
            assert np.max(np.abs(s_newton.r_complex - s_picard.r_complex)) < 1e-8

    def test_low_power_shows_dir_no_dip(self, cavity, decoherence, delta_inh):
        # continuum ensemble: a weak scan sees the broad reflectivity peak only
        ens = paper_like_ensemble(cavity, delta_inh)
        grid = np.linspace(-100e6, 100e6, 201) * TWO_PI
        spec = reflection_spectrum(ens, 1e-15, grid, cavity, decoherence)
        norm = DipNormalization((1 - 2 * cavity.coupling_ratio) ** 2, 1.0)
        assert fit_lorentzian_dip(spec, norm) is None
        assert spec.reflectance[len(grid) // 2] > 0.9

    def test_two_then_three_ion_interference(self, cavity, decoherence, g35):
        """A symmetric +/-48 kHz pair dips at zero detuning even at mu=1e-8;
        a resonant third emitter replaces the dip with a peak."""
        d = hz_to_angular(0.048e6)
        grid = np.linspace(-0.3e6, 0.3e6, 601) * TWO_PI
        pair = EmitterEnsemble.explicit([(-d, g35), (d, g35)])
        triple = EmitterEnsemble.explicit([(-d, g35), (0.0, g35), (d, g35)])
        s2 = reflection_spectrum(pair, 1e-8, grid, cavity, decoherence)
        s3 = reflection_spectrum(triple, 1e-8, grid, cavity, decoherence)
        i0 = len(grid) // 2
        i_ion = np.argmin(np.abs(grid - d))
        assert s2.reflectance[i0] < s2.reflectance[i_ion] - 0.2
        assert s3.reflectance[i0] > 0.8
        assert s3.reflectance[i0] > s3.reflectance[i0] - 0.01  # no central dip

    def test_monotone_narrowing(self, cavity, decoherence, delta_inh):
        """Fitted dip width is non-increasing in drive across the validity
        window.  The power floor keeps the per-emitter power broadening above
        the quantile spacing (continuum regime of the discrete stand-in); the
        ceiling keeps the saturation hole below the collective width."""
        n = 1000
        ens = paper_like_ensemble(cavity, delta_inh, n=n).to_explicit()
        grid = np.linspace(-90e6, 90e6, 361) * TWO_PI
        norm = DipNormalization((1 - 2 * cavity.coupling_ratio) ** 2, 1.0)
        mus = np.geomspace(3e-7, 5e-6, 8)
        widths = []
        for mu in mus:
            fit = fit_lorentzian_dip(reflection_spectrum(ens, mu, grid, cavity, decoherence),
                                     norm)
            assert fit is not None
            widths.append(fit.width)
        widths = np.array(widths)
        assert np.all(np.diff(widths) <= widths[:-1] * 1e-3)

    def test_g_distribution_independence(self, cavity, decoherence, delta_inh):
        """Equal N<g>, N<g^2> but different p(g) give the same dip width
        within 1%."""
        n = 400
        gc = coupling_for_cooperativity(12.0, cavity, delta_inh, n)
        pa = 0.5
        # two-level histogram with matched first and second moments
        from scipy.optimize import fsolve

        ga, gb = fsolve(lambda v: [pa * v[0] + (1 - pa) * v[1] - gc,
                                   pa * v[0] ** 2 + (1 - pa) * v[1] ** 2 - gc**2],
                        [0.6 * gc, 1.3 * gc])
        ens_c = EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh, g=gc).to_explicit()
        ens_h = EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh,
                                           g_hist=((ga, pa), (gb, 1 - pa))).to_explicit()
        grid = np.linspace(-60e6, 60e6, 241) * TWO_PI
        norm = DipNormalization((1 - 2 * cavity.coupling_ratio) ** 2, 1.0)
        mu = 4e-6
        w_c = fit_lorentzian_dip(reflection_spectrum(ens_c, mu, grid, cavity, decoherence),
                                 norm).width
        w_h = fit_lorentzian_dip(reflection_spectrum(ens_h, mu, grid, cavity, decoherence),
                                 norm).width
        assert abs(w_h / w_c - 1.0) < 0.01

    def test_width_grows_with_dephasing(self, cavity, delta_inh):
        """High-cooperativity narrow dip broadens as gamma grows."""
        n = 400
        ens = paper_like_ensemble(cavity, delta_inh, n=n, c=24.0).to_explicit()
        grid = np.linspace(-40e6, 40e6, 321) * TWO_PI
        norm = DipNormalization((1 - 2 * cavity.coupling_ratio) ** 2, 1.0)
        widths = []
        for gd_hz in (2e3, 20e3, 60e3):
            dec = DecoherenceParams.from_hz(600, gd_hz)
            fit = fit_lorentzian_dip(
                reflection_spectrum(ens, 3e-5, grid, cavity, dec), norm)
            widths.append(fit.width)
        assert widths[0] < widths[1] < widths[2]


class TestCitAnalytics:
    def _model(self, cavity, decoherence, delta_inh, c=12.0):
        return SystemModel(cavity, decoherence, paper_like_ensemble(cavity, delta_inh, c=c))

    def test_asymptotic_width(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh)
        res = cit_analytics(model, mu=1e12, check=False)
        assert math.isclose(res.width_min, hz_to_angular(150e6) / 12.0, rel_tol=1e-9)
        assert math.isclose(res.width, res.width_min, rel_tol=1e-3)
        assert math.isclose(res.width / TWO_PI, 12.5e6, rel_tol=0.05)

    def test_depth_saturates_to_one(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh)
        assert math.isclose(cit_analytics(model, mu=1e12, check=False).depth, 1.0,
                            rel_tol=1e-3)

    def test_below_threshold_raises(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh)
        with pytest.raises(CitThresholdError):
            cit_analytics(model, mu=1e-30, check=False)

    def test_out_of_regime_warns(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh, c=0.5)
        with pytest.warns(UserWarning):
            cit_analytics(model, mu=1e-3)

    def test_center_linear_in_cavity_detuning(self, cavity, decoherence, delta_inh):
        c = 12.0
        eps = delta_inh / (c * cavity.kappa)
        omega0 = hz_to_angular(1e9)
        # cavity at absolute zero: center = omega0 / (1 - eps)
        assert math.isclose(cit_center(omega0, 0.0, c, delta_inh, cavity.kappa),
                            omega0 / (1 - eps), rel_tol=1e-12)
        slope = (cit_center(omega0, 1e6, c, delta_inh, cavity.kappa)
                 - cit_center(omega0, 0.0, c, delta_inh, cavity.kappa)) / 1e6
        assert math.isclose(slope, -eps / (1 - eps), rel_tol=1e-9)


class TestPairContribution:
    def test_detuned_pair_suppressed(self, decoherence, g35):
        delta = 300.0 * decoherence.gamma
        single = single_contribution(delta, g35, -1.0, decoherence)
        pair = pair_contribution(delta, g35, -1.0, decoherence)
        assert abs(pair) < abs(single) * 0.01  # suppressed ~ gamma/delta
        expected = 2.0 * g35 * decoherence.gamma / delta**2
        assert math.isclose(abs(pair), expected, rel_tol=1e-3)

    def test_degenerate_pair_doubles(self, decoherence, g35):
        single = single_contribution(0.0, g35, -1.0, decoherence)
        pair = pair_contribution(0.0, g35, -1.0, decoherence)
        assert abs(pair - 2.0 * single) < 1e-12 * abs(pair)

    def test_saturated_vanishes(self, decoherence, g35):
        assert pair_contribution(1e6, g35, 0.0, decoherence) == 0.0
