import math

import numpy as np
import pytest

from sparsesr import simgen
from sparsesr.simgen import (
    C,
    D,
    DC,
    DV,
    UC,
    X,
    PkpdParams,
    SyntheticSpec,
    mean_diameter,
    pkpd_rhs,
    policy_probs,
    simulate_pkpd,
    simulate_synthetic_variant,
)


def test_rhs_hand_example():
    p = PkpdParams()
    expected = (p.rho * math.log(p.K / 10.0) - (p.alpha_r * 2.0 + p.beta_r * 4.0)) * 10.0
    dv, dc = pkpd_rhs(10.0, 0.0, 2.0, 0.0)
    assert dv == pytest.approx(-0.9544, abs=1e-4)
    assert abs(dv - expected) < 1e-12
    assert dc == 0.0


def test_carrying_capacity_is_fixed_point():
    assert pkpd_rhs(PkpdParams().K, 0.0, 0.0, 0.0)[0] == 0.0


def test_policy_midpoint():
    pc, pr = policy_probs(6.5)
    assert pc == 0.5 and pr == 0.5


def test_sphere_diameter_capped():
    assert mean_diameter(math.pi / 6) == pytest.approx(1.0)
    assert mean_diameter(1e9) == PkpdParams().d_max


def test_targets_are_bitwise_finite_differences():
    d = simulate_pkpd("chemo_radio", 5, seed=2)
    x, c = d.features[X], d.features[C]
    for i in range(5):
        rows = slice(i * 60, (i + 1) * 60)
        xs, cs = x[rows], c[rows]
        assert np.array_equal(d.targets[DV][rows][:-1], xs[1:] - xs[:-1])
        assert np.array_equal(d.targets[DC][rows][:-1], cs[1:] - cs[:-1])


def test_shapes_positivity_and_doses():
    d = simulate_pkpd("chemo_radio", 20, seed=0)
    assert d.n_rows == 20 * 60
    assert np.all(d.features[X] >= PkpdParams().volume_floor)
    assert np.all(d.features[C] >= 0)
    assert set(np.unique(d.features[D])) <= {0.0, 2.0}
    assert set(np.unique(d.features[UC])) <= {0.0, 5.0}
    assert len(np.unique(d.groups)) == 20


def test_variants_expose_the_right_columns():
    none = simulate_pkpd("none", 3, seed=0)
    assert none.feature_names == [X, UC, D] and none.target_names == [DV]
    assert np.all(none.features[UC] == 0) and np.all(none.features[D] == 0)
    chemo = simulate_pkpd("chemo", 3, seed=0)
    assert D not in chemo.features and chemo.target_names == [DV, DC]
    with pytest.raises(ValueError):
        simulate_pkpd("radio", 3)


def test_patients_do_not_depend_on_cohort_size():
    a = simulate_pkpd("chemo_radio", 3, seed=9)
    b = simulate_pkpd("chemo_radio", 5, seed=9)
    assert np.array_equal(a.features[X], b.features[X][: a.n_rows])


def test_synthetic_forcing_vanishes_when_sine_is_zero():
    spec = SyntheticSpec(1)
    x, c, d = 20.0, 3.0, 2.0
    t = 2 * math.pi / spec.omega
    extra = spec.gamma * math.sin(spec.omega * t)
    base = pkpd_rhs(x, c, d, 0.0)[0]
    assert pkpd_rhs(x, c, d, 0.0, extra=extra)[0] == pytest.approx(base, abs=1e-15)


@pytest.mark.parametrize("variant", [1, 2, 3, 4, 5])
def test_synthetic_variants_run(variant):
    d = simulate_synthetic_variant(SyntheticSpec(variant), 3, seed=1)
    assert {"time", "I_t", "N_t"} <= set(d.feature_names)
    assert np.all(np.isfinite(d.targets[DV]))
    assert d.meta["ground_truth"][0].startswith("dv_dt")


def test_synthetic_variant_range():
    with pytest.raises(ValueError):
        SyntheticSpec(6)


def test_distractors_and_export(tmp_path):
    d = simgen.add_distractors(simulate_pkpd("chemo", 2, seed=0), 3, 0)
    assert [f for f in d.feature_names if f.startswith("noise_")] == ["noise_1", "noise_2", "noise_3"]
    csv_path, man = simgen.export(d, tmp_path, "x")
    assert csv_path.exists() and man.exists()


def test_collinearity_clones_are_correlated():
    sd = simgen.gen_collinearity(0.99, 0, 50)
    r = np.corrcoef(sd.dataset.features[C], sd.dataset.features[C + "_rho"])[0, 1]
    assert 0.97 < r < 1.0
    assert len(sd.pool) == 14 and len(set(sd.groups.values())) == 6


def test_epistasis_marginals_uninformative():
    sd = simgen.gen_epistasis(1, 0, 4000)
    y = sd.dataset.targets["y"]
    for v in ("x1", "x2"):
        assert abs(np.corrcoef(sd.dataset.features[v], y)[0, 1]) < 0.06
