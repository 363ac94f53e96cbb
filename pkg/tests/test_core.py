import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cavens.core import (
    AssumptionReport,
    CavityParams,
    DecoherenceParams,
    DriveParams,
    EmitterEnsemble,
    ParameterError,
    SystemModel,
    derive_rates,
    ensemble_cooperativity,
    mu_from_power,
    power_from_mu,
    validate_assumptions,
)
from cavens.units import TWO_PI, angular_to_hz, hz_to_angular


class TestUnits:
    @given(st.floats(min_value=1e-6, max_value=1e18))
    def test_hz_roundtrip(self, f):
        assert math.isclose(angular_to_hz(hz_to_angular(f)), f, rel_tol=1e-12)

    def test_paper_scale(self):
        assert math.isclose(hz_to_angular(44e9), TWO_PI * 44e9)


class TestParams:
    def test_cavity_invariants(self):
        with pytest.raises(ParameterError):
            CavityParams(kappa=-1.0, kappa_c=0.5)
        with pytest.raises(ParameterError):
            CavityParams(kappa=1.0, kappa_c=2.0)
        with pytest.raises(ParameterError):
            CavityParams(kappa=1.0, kappa_c=0.5, omega=0.0)

    def test_gamma_derived(self):
        dec = DecoherenceParams.from_hz(600, 6000)
        assert math.isclose(dec.gamma, hz_to_angular(6300))

    def test_ensemble_validation(self):
        with pytest.raises(ParameterError):
            EmitterEnsemble.explicit([(0.0, -1.0)])
        with pytest.raises(ParameterError):
            EmitterEnsemble.lorentzian(n_ions=5, delta_inh=-1.0, g=1.0)
        with pytest.raises(ParameterError):
            EmitterEnsemble.lorentzian(n_ions=5, delta_inh=1.0, g=1.0,
                                       g_hist=((1.0, 1.0),))
        with pytest.raises(ParameterError):
            EmitterEnsemble.lorentzian(n_ions=5, delta_inh=1.0,
                                       g_hist=((1.0, 0.5), (2.0, 0.5 + 1e-6)))

    def test_quantile_conversion_deterministic(self):
        ens = EmitterEnsemble.lorentzian(n_ions=101, delta_inh=hz_to_angular(150e6),
                                         g=hz_to_angular(10e6))
        e1, e2 = ens.to_explicit(), ens.to_explicit()
        assert e1.emitters == e2.emitters
        d = e1.detunings()
        assert np.allclose(d, -d[::-1])  # symmetric quantile medians
        assert abs(np.median(d)) < 1e-6

    def test_histogram_conversion_preserves_moments(self):
        hist = ((hz_to_angular(5e6), 0.25), (hz_to_angular(12e6), 0.75))
        ens = EmitterEnsemble.lorentzian(n_ions=400, delta_inh=hz_to_angular(150e6),
                                         g_hist=hist)
        expl = ens.to_explicit()
        g_mean, g2 = ens.g_moments()
        ge_mean, ge2 = expl.g_moments()
        assert math.isclose(ge_mean, g_mean, rel_tol=1e-2)
        assert math.isclose(ge2, g2, rel_tol=1e-2)
        # couplings not monotone in detuning (decorrelated assignment)
        gs = expl.couplings()
        assert len(set(np.round(gs, 3))) == 2


class TestDerivedRates:
    def test_purcell_paper_value(self, cavity, g35):
        rates = derive_rates(cavity, DecoherenceParams(0.0),
                             EmitterEnsemble.identical(1, g35))
        assert math.isclose(1.0 / rates.purcell, 1.4e-6, rel_tol=0.05)

    def test_average_purcell_time(self, cavity):
        g = hz_to_angular(10.6e6)
        rates = derive_rates(cavity, DecoherenceParams(0.0),
                             EmitterEnsemble.identical(1, g))
        assert math.isclose(1.0 / rates.purcell, 15.6e-6, rel_tol=0.01)

    def test_cooperativity_from_total_coupling(self, cavity, delta_inh):
        n = 1000
        g = hz_to_angular(4.4e9) / math.sqrt(n)
        ens = EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh, g=g)
        c = ensemble_cooperativity(cavity, ens)
        assert math.isclose(c, 12.0, rel_tol=0.05)

    def test_cooperativity_missing_delta_inh(self, cavity, g35):
        ens = EmitterEnsemble.identical(4, g35)
        assert derive_rates(cavity, DecoherenceParams(0.0), ens).cooperativity is None
        with pytest.raises(ParameterError):
            ensemble_cooperativity(cavity, ens)

    @settings(max_examples=30, deadline=None)
    @given(gs=st.lists(st.floats(min_value=1e5, max_value=1e9), min_size=2, max_size=16))
    def test_cooperativity_additivity(self, gs, cavity, delta_inh):
        ens = EmitterEnsemble.explicit([(0.0, g) for g in gs])
        half = len(gs) // 2
        e1 = EmitterEnsemble.explicit([(0.0, g) for g in gs[:half]]) if half else None
        e2 = EmitterEnsemble.explicit([(0.0, g) for g in gs[half:]])
        total = ensemble_cooperativity(cavity, ens, delta_inh=delta_inh)
        parts = ensemble_cooperativity(cavity, e2, delta_inh=delta_inh)
        if e1 is not None:
            parts += ensemble_cooperativity(cavity, e1, delta_inh=delta_inh)
        assert math.isclose(total, parts, rel_tol=1e-12)


class TestMuPower:
    def test_zero_and_linearity(self, cavity):
        assert mu_from_power(0.0, cavity) == 0.0
        m1 = mu_from_power(1e-9, cavity)
        assert math.isclose(mu_from_power(2e-9, cavity), 2.0 * m1, rel_tol=1e-12)

    def test_direct_evaluation(self, cavity):
        # hand evaluation of kappa_c P / ((kappa/2)^2 hbar omega)
        from scipy.constants import hbar

        expected = (TWO_PI * 8.8e9) * 1e-9 / ((TWO_PI * 22e9) ** 2 * hbar * TWO_PI * 304500e9)
        assert math.isclose(mu_from_power(1e-9, cavity), expected, rel_tol=1e-12)
        assert math.isclose(mu_from_power(1e-9, cavity), 0.014342145225006354, rel_tol=1e-9)

    def test_resonant_flag(self):
        cav = CavityParams.from_hz(44e9, 8.8e9, delta_c_hz=30e9)
        assert mu_from_power(1e-9, cav, resonant=True) > mu_from_power(1e-9, cav)

    @settings(max_examples=40, deadline=None)
    @given(p=st.floats(min_value=1e-15, max_value=1e-3))
    def test_power_roundtrip(self, p, cavity):
        mu = mu_from_power(p, cavity)
        assert math.isclose(power_from_mu(mu, cavity), p, rel_tol=1e-12)

    def test_drive_consistency_check(self, cavity):
        p = 1e-9
        mu = mu_from_power(p, cavity, resonant=True)
        DriveParams(power_in=p, mu=mu).resolve_mu(cavity)
        with pytest.raises(ParameterError):
            DriveParams(power_in=p, mu=2 * mu).resolve_mu(cavity)


class TestValidateAssumptions:
    def _model(self, cavity, decoherence, delta_inh, c=12.0, n=1000):
        from conftest import coupling_for_cooperativity

        g = coupling_for_cooperativity(c, cavity, delta_inh, n)
        return SystemModel(cavity, decoherence,
                           EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh, g=g))

    def test_tavis_cummings_ratio_50(self, cavity, delta_inh):
        # total coupling chosen so |W(center)| = 2pi x 0.5 THz, FSR = 2pi x 25 THz
        dec = DecoherenceParams.from_hz(600, 6000)
        n = 700000
        w_target = hz_to_angular(0.5e12)
        g = math.sqrt(w_target * (dec.gamma + 0.5 * delta_inh) / n)
        model = SystemModel(cavity, dec,
                            EmitterEnsemble.lorentzian(n_ions=n, delta_inh=delta_inh, g=g))
        report = validate_assumptions(model, DriveParams(mu=1e-3), fsr=hz_to_angular(25e12))
        tc = report["tavis_cummings"]
        assert tc.passed and math.isclose(tc.ratio, 50.0, rel_tol=0.01)

    def test_mu_zero_fails_lower_bound(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh)
        report = validate_assumptions(model, DriveParams(mu=0.0))
        assert not report["power_lower"].passed

    def test_low_cooperativity_fails(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh, c=0.5)
        report = validate_assumptions(model, DriveParams(mu=1e-3))
        assert not report["high_cooperativity"].passed

    def test_report_is_dict_serializable(self, cavity, decoherence, delta_inh):
        model = self._model(cavity, decoherence, delta_inh)
        report = validate_assumptions(model, DriveParams(mu=1e-3))
        assert isinstance(report, AssumptionReport)
        d = report.as_dict()
        assert set(d["checks"]) >= {"high_cooperativity", "power_lower", "power_upper",
                                    "inhomogeneity"}
