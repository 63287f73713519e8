import os

import numpy as np
import pytest

from pipeflow.scenario import load_scenario
from pipeflow.studies import (
    boundary_perturbation_study,
    epsilon_limit_study,
    fit_loglog_slope,
    gamma_perturbation_study,
    monotone_violations,
)

REPO = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
SCEN = os.path.join(REPO, "scenarios")


class TestSlopeFit:
    def test_exact_power_law(self):
        x = np.array([0.4, 0.2, 0.1, 0.05])
        slope, mask = fit_loglog_slope(x, 3.0 * x**1.5)
        assert slope == pytest.approx(1.5, abs=1e-12)
        assert all(mask)

    def test_guard_drops_preasymptotic_point(self):
        x = np.array([0.8, 0.2, 0.1, 0.05])
        y = 2.0 * x**2
        y[0] *= 40.0  # corrupt the coarsest point
        slope, mask = fit_loglog_slope(x, y)
        assert not mask[0]
        assert slope == pytest.approx(2.0, abs=1e-10)

    def test_identical_values_rejected(self):
        with pytest.raises(ValueError, match="slope"):
            fit_loglog_slope([0.1, 0.1, 0.2], [1.0, 1.0, 2.0])

    def test_too_few_points(self):
        with pytest.raises(ValueError):
            fit_loglog_slope([0.1, 0.2], [1.0, 2.0])


def test_monotone_violations():
    assert monotone_violations([4.0, 2.0, 1.0]) == 0
    assert monotone_violations([4.0, 5.0, 1.0]) == 1


@pytest.fixture(scope="module")
def perturbation_scenario():
    return load_scenario(os.path.join(SCEN, "pipe_perturbation.scn"))


class TestStudyValidation:
    @pytest.fixture
    def scenario(self, perturbation_scenario):
        return perturbation_scenario

    def test_epsilon_list_checks(self, scenario):
        with pytest.raises(ValueError, match="decreasing"):
            epsilon_limit_study(scenario, [0.1, 0.2, 0.05])
        with pytest.raises(ValueError, match="positive"):
            epsilon_limit_study(scenario, [0.2, 0.1, 0.0])
        with pytest.raises(ValueError):
            epsilon_limit_study(scenario, [0.2, 0.1])

    def test_gamma_offset_checks(self, scenario):
        with pytest.raises(ValueError, match="nonzero"):
            gamma_perturbation_study(scenario, [0.4, 0.0, 0.1])
        with pytest.raises(ValueError, match="sign"):
            gamma_perturbation_study(scenario, [0.4, -0.2, 0.1])
        with pytest.raises(ValueError, match="bounds"):
            gamma_perturbation_study(scenario, [2.0, 1.0, 0.5])

    def test_amplitude_checks(self, scenario):
        with pytest.raises(ValueError, match="positive"):
            boundary_perturbation_study(scenario, [0.2, 0.1, -0.05])


@pytest.mark.slow
class TestStudiesEndToEnd:
    def test_gamma_study_smoke(self):
        scenario = load_scenario(os.path.join(SCEN, "pipe_perturbation.scn"))
        result = gamma_perturbation_study(scenario, [0.4, 0.2, 0.1],
                                          certify=True)
        assert result.slope > 1.4
        assert result.all_certified
        assert monotone_violations(result.errors) <= 1

    def test_gamma_study_threads_deterministic(self):
        scenario = load_scenario(os.path.join(SCEN, "pipe_perturbation.scn"))
        a = gamma_perturbation_study(scenario, [0.4, 0.2, 0.1], certify=False)
        b = gamma_perturbation_study(scenario, [0.4, 0.2, 0.1], certify=False,
                                     threads=3)
        assert a.errors == b.errors

    def test_study_table_written(self, tmp_path):
        scenario = load_scenario(os.path.join(SCEN, "pipe_perturbation.scn"))
        result = gamma_perturbation_study(scenario, [0.4, 0.2, 0.1],
                                          certify=False)
        path = tmp_path / "table.csv"
        result.write_table(path)
        header = path.read_text().splitlines()[0]
        assert header.startswith("gamma_offset,")
