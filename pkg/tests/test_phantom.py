import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from orthosep.phantom import (
    PhantomSpec,
    make_feature_fields,
    make_phantom,
    make_target,
    orthogonalize_against,
    write_phantom,
)
from orthosep.preprocess import CANONICAL_FEATURES
from orthosep.volumes import PROSTATE, SURROUNDING, TUMOUR, RegionMask, intersect_valid_mask, load_volume

SMALL = dict(dims=(24, 24, 20), prostate_radius_vox=6.0, tumour_radius_vox=3.0)


@pytest.fixture(scope="module")
def ph():
    return make_phantom(PhantomSpec(**SMALL, ortho_amplitude=0.5, seed=4))


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(tumour_radius_vox=9.0, prostate_radius_vox=8.0)
    with pytest.raises(ValueError):
        PhantomSpec(dims=(10, 10, 10))
    with pytest.raises(ValueError):
        PhantomSpec(ortho_amplitude=-1)
    with pytest.raises(ValueError):
        PhantomSpec(coefficients={"SUV": 1.0})


def test_feature_fields_deterministic_and_ranged():
    a = make_feature_fields(PhantomSpec(**SMALL, seed=2))
    b = make_feature_fields(PhantomSpec(**SMALL, seed=2))
    assert tuple(a.names) == CANONICAL_FEATURES
    for n in a.names:
        np.testing.assert_array_equal(a[n].data, b[n].data)
    for n in ("T1", "T2", "ADC"):
        assert a[n].data.min() >= 0 and a[n].data.max() <= 1


def test_default_features_not_collinear():
    ph = make_phantom(PhantomSpec())
    X = np.column_stack([ph.features[n].data[ph.mask.valid] for n in CANONICAL_FEATURES])
    corr = np.corrcoef(X.T)
    assert np.abs(corr[~np.eye(7, dtype=bool)]).max() < 0.9
    assert 25_000 <= ph.mask.valid.sum() <= 35_000


def test_regions_nested(ph):
    m = ph.mask
    assert np.all(m.valid[m.labels > 0])
    assert m.region("tumour").sum() > 0 and m.region("prostate").sum() > 0
    assert set(np.unique(m.labels[m.valid])) <= {SURROUNDING, PROSTATE, TUMOUR}
    # the valid mask comes from the raw channels (nonzero in all) and the CT soft-tissue window
    assert np.all(intersect_valid_mask(ph.raw.select(CANONICAL_FEATURES))[m.valid])
    assert np.all(np.abs(ph.raw["CT"].data[m.valid]) <= 300)


def test_target_components_recompose(ph):
    y = ph.target.data
    np.testing.assert_array_equal(y, ph.envelope + ph.orthogonal + ph.noise)
    assert np.all(ph.orthogonal[ph.mask.labels != TUMOUR] == 0)
    assert ph.orthogonal[ph.mask.labels == TUMOUR].any()
    rms = np.sqrt(np.mean(ph.orthogonal[ph.mask.region("tumour")] ** 2))
    assert rms == pytest.approx(0.5, rel=1e-12)


def test_orthogonal_field_is_orthogonal_to_features(ph):
    v = ph.mask.valid
    X = np.column_stack([ph.features[n].data[v] for n in CANONICAL_FEATURES])
    u = ph.orthogonal[v]
    assert np.linalg.norm(X.T @ u) / np.linalg.norm(u) <= 1e-6


def test_zero_amplitude_gives_pure_envelope():
    ph = make_phantom(PhantomSpec(**SMALL, seed=1))
    np.testing.assert_array_equal(ph.target.data, ph.envelope)
    assert not ph.orthogonal.any()


def test_too_few_tumour_voxels():
    spec = PhantomSpec(**SMALL, ortho_amplitude=1.0)
    ph = make_phantom(PhantomSpec(**SMALL))
    mask = RegionMask(ph.mask.grid, np.where(ph.mask.labels == TUMOUR, PROSTATE, ph.mask.labels), ph.mask.valid)
    with pytest.raises(ValueError):
        make_target(ph.features, mask, spec)


def test_orthogonalize_examples():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(300, 5))
    with pytest.raises(ValueError, match="no orthogonal content"):
        orthogonalize_against(X, X @ rng.normal(size=5))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_orthogonalize_properties(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(400, 7)) * rng.uniform(0.1, 5, 7)
    z = rng.normal(size=400)
    support = rng.random(400) < 0.3
    u = orthogonalize_against(X, z, support=support)
    assert np.all(u[~support] == 0)
    assert np.linalg.norm(X.T @ u) / np.linalg.norm(u) <= 1e-6
    again = orthogonalize_against(X, u, support=support)
    np.testing.assert_allclose(again, u, rtol=0, atol=1e-10 * np.abs(u).max())


def test_write_phantom_outputs(tmp_path, ph):
    write_phantom(ph, tmp_path)
    truth = json.loads((tmp_path / "phantom_truth.json").read_text())
    assert truth["ortho_amplitude"] == 0.5 and truth["seed"] == 4
    assert truth["orthogonal_energy"]["prostate"] == 0.0
    assert truth["orthogonal_energy"]["tumour"] == pytest.approx(0.25, rel=1e-12)
    assert "vp" not in truth["used_features"]
    for name in CANONICAL_FEATURES + ("CT", "SUV", "regions", "regions_valid"):
        assert (tmp_path / f"{name}.json").exists() and (tmp_path / f"{name}.raw").exists()
    ct = load_volume(tmp_path / "CT")
    assert ct.data.min() == -1000.0
    first = {p.name: p.read_bytes() for p in tmp_path.iterdir()}
    write_phantom(make_phantom(ph.spec), tmp_path / "again")
    second = {p.name: p.read_bytes() for p in (tmp_path / "again").iterdir()}
    assert first == second


def test_training_channels_match_pipeline_scaling(ph):
    ch = ph.training_channels()
    v = ph.mask.valid
    for n in CANONICAL_FEATURES:
        np.testing.assert_array_equal(ch[n].data, ph.features[n].data)
    y = ph.target.data[v]
    expected = (y - y.min()) / (y.max() - y.min())
    np.testing.assert_allclose(ch["SUV"].data[v], expected, rtol=0, atol=1e-15)
    assert not ch["SUV"].data[~v].any()
