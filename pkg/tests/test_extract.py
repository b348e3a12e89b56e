import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ossnet.errors import CapabilityError, ContractError, ShapeError
from ossnet.extract import (ModelOracle, dense_extract, lattice_coordinates, mise_extract,
                            resample_nearest, seed_lattice, seeded_extract, seeded_mise,
                            sphere_oracle, upsample_nearest)
from ossnet.metrics import disagreement
from ossnet.model import init_params
from ossnet.volume import Mask

CENTRE = (31.5, 31.5, 31.5)


def constant(value):
    return lambda pts: np.full(len(pts), value)


class Recording:
    """Wraps an oracle and keeps the size of every call."""

    def __init__(self, oracle):
        self.oracle, self.calls = oracle, []

    def __call__(self, pts):
        self.calls.append(len(pts))
        return self.oracle(pts)


# -------------------------------------------------------------------- oracles


def test_sphere_oracle_values():
    hard = sphere_oracle((0, 0, 0), 2.0)
    assert hard(np.array([[0, 0, 0], [2, 0, 0], [3, 0, 0]])).tolist() == [1.0, 0.5, 0.0]
    soft = sphere_oracle((0, 0, 0), 2.0, sharpness=3.0)
    assert soft(np.array([[0, 0, 0]]))[0] > 0.5
    assert soft(np.array([[0, 2.0, 0]]))[0] == 0.5
    with pytest.raises(ValueError):
        sphere_oracle((0, 0, 0), 0.0)


# ---------------------------------------------------------------------- dense


def test_dense_constant_oracle():
    mask, report = dense_extract(constant(0.9), 8, return_report=True)
    assert mask.count() == 512 and report.eval_count == 512


def test_dense_sphere_count():
    mask, report = dense_extract(sphere_oracle((15.5, 15.5, 15.5), 8), 32, return_report=True)
    assert report.eval_count == 32 ** 3
    assert abs(mask.count() - 2145) / 2145 < 0.05


def test_dense_respects_oracle_domain():
    # A 64^3-domain sphere sampled at 32^3 matches the 64^3 extraction block-averaged.
    o = sphere_oracle(CENTRE, 16, domain=(64, 64, 64))
    coarse = dense_extract(o, 32).count()
    assert abs(coarse * 8 - dense_extract(o, 64).count()) / (coarse * 8) < 0.05


def test_lattice_coordinates_convention():
    pts = lattice_coordinates(np.array([[0, 0, 0], [16, 16, 16]]), 16, (64, 64, 64))
    assert pts.tolist() == [[1.5, 1.5, 1.5], [65.5, 65.5, 65.5]]
    assert lattice_coordinates(np.array([[3, 4, 5]]), 8, (8, 8, 8)).tolist() == [[3, 4, 5]]


def test_oracle_contract_violations():
    with pytest.raises(ContractError):
        dense_extract(lambda p: np.zeros(len(p) + 1), 4)
    with pytest.raises(ContractError):
        dense_extract(constant(1.5), 4)
    with pytest.raises(ContractError):
        mise_extract(constant(np.nan), 2, 4)


# ----------------------------------------------------------------------- MISE


def test_mise_constant_oracle():
    mask, report = mise_extract(constant(0.2), 16, 64)
    assert report.eval_count == 17 ** 3
    assert report.stage_counts == [17 ** 3, 0, 0]
    assert mask.count() == 0
    full, _ = mise_extract(constant(0.7), 8, 32)
    assert full.count() == 32 ** 3


@pytest.mark.parametrize("radius,evals", [(4, 5937), (8, 8736), (12, 13272)])
def test_mise_equals_dense_on_spheres(radius, evals):
    oracle = sphere_oracle(CENTRE, radius)
    mask, report = mise_extract(oracle, 16, 64)
    dense = dense_extract(oracle, 64)
    assert disagreement(mask, dense) == 0.0
    assert report.eval_count == evals < 64 ** 3
    assert report.stage_counts[0] == 17 ** 3


@given(st.tuples(*[st.floats(20, 44) for _ in range(3)]), st.floats(4, 14),
       st.sampled_from([2.0, 8.0, np.inf]))
def test_mise_equals_dense_property(centre, radius, sharpness):
    oracle = sphere_oracle(centre, radius, sharpness)
    mask, report = mise_extract(oracle, 16, 64)
    assert mask == dense_extract(oracle, 64)
    assert report.eval_count <= 64 ** 3


def test_mise_resolution_checks():
    with pytest.raises(ValueError):
        mise_extract(constant(0.0), 32, 16)
    with pytest.raises(ValueError):
        mise_extract(constant(0.0), 16, 48)


def test_mise_same_resolution_is_dense_lattice():
    oracle = sphere_oracle((7.5, 7.5, 7.5), 5)
    mask, report = mise_extract(oracle, 16, 16)
    assert mask == dense_extract(oracle, 16)
    assert report.eval_count == 17 ** 3


def test_peak_batch_and_invariance():
    oracle = sphere_oracle(CENTRE, 10, sharpness=3.0)
    masks = []
    for b in (2 ** 6, 2 ** 10, 2 ** 14):
        rec = Recording(oracle)
        mask, report = mise_extract(rec, 16, 64, max_batch=b)
        assert max(rec.calls) <= b and report.peak_batch == max(rec.calls)
        masks.append(mask)
    assert masks[0] == masks[1] == masks[2]


def test_report_records():
    oracle = sphere_oracle(CENTRE, 8)
    mask, report = mise_extract(oracle, 16, 64)
    assert report.compare_dense(dense_extract(oracle, 64)) == 0.0
    record = json.loads(report.to_json())
    for key in ("eval_count", "stage_counts", "peak_batch", "wall_ms", "disagreement_vs_dense"):
        assert key in record
    assert "eval_count: 8736" in report.to_text()


# --------------------------------------------------------------------- seeded


def test_upsample_nearest():
    one = np.zeros((2, 2, 2), dtype=bool)
    one[1, 0, 1] = True
    assert upsample_nearest(one, 1) == Mask(one)
    up = upsample_nearest(one, 2)
    assert up.count() == 8 and up.data[2:4, 0:2, 2:4].all()
    with pytest.raises(ValueError):
        upsample_nearest(one, 0)


@given(st.integers(0, 2 ** 31), st.integers(1, 4))
def test_upsample_count_scales(seed, factor):
    m = np.random.default_rng(seed).random((3, 3, 3)) < 0.4
    assert upsample_nearest(m, factor).count() == m.sum() * factor ** 3


def test_seed_lattice_requires_all_incident_cells():
    seed = np.zeros((4, 4, 4), dtype=bool)
    seed[1:3, 1:3, 1:3] = True
    pts = seed_lattice(seed)
    assert pts.sum() == 1 and pts[2, 2, 2]
    assert seed_lattice(np.ones((2, 2, 2), dtype=bool)).all()


def test_resample_nearest_non_integer_ratio():
    grid = np.arange(27).reshape(3, 3, 3) % 2 == 0
    out = resample_nearest(grid, 6)
    assert out.shape == (6, 6, 6)
    assert np.array_equal(out[::2, ::2, ::2], grid)


def test_empty_seed_matches_mise():
    oracle = sphere_oracle(CENTRE, 9, sharpness=5.0)
    plain, r_plain = mise_extract(oracle, 16, 64)
    seeded, r_seed = seeded_mise(oracle, np.zeros((8, 8, 8), dtype=bool), 16, 64)
    assert plain == seeded
    assert r_seed.eval_count == r_plain.eval_count
    assert r_seed.stage_counts == r_plain.stage_counts


@pytest.mark.parametrize("radius", [8, 12, 20])
def test_perfect_seed_saves_evaluations(radius):
    oracle = sphere_oracle(CENTRE, radius, domain=(64, 64, 64))
    seed = dense_extract(oracle, 16).data.astype(bool)
    plain, r_plain = mise_extract(oracle, 16, 64)
    seeded, r_seed = seeded_mise(oracle, seed, 16, 64)
    assert r_seed.stage_counts[0] < r_plain.stage_counts[0]
    assert r_seed.eval_count < r_plain.eval_count
    assert disagreement(plain, seeded) < 1e-3


def test_overconfident_seed_is_corrected_at_boundary():
    # The seed claims a ball twice as large; erosion re-evaluates its rim.
    oracle = sphere_oracle(CENTRE, 8)
    big = dense_extract(sphere_oracle((7.5, 7.5, 7.5), 6), 16).data.astype(bool)
    seeded, report = seeded_mise(oracle, big, 16, 64)
    assert report.extra["stage0_reevaluated"] > 0
    assert seeded == mise_extract(oracle, 16, 64)[0]


def test_seed_shape_checked():
    with pytest.raises(ShapeError):
        seeded_mise(constant(0.0), np.zeros((4, 4, 2), dtype=bool), 4, 8)


def test_seeded_extract_needs_aux_head(tiny, phantom16):
    vol, _ = phantom16
    with pytest.raises(CapabilityError, match="mise_extract"):
        seeded_extract(init_params(tiny("A")), vol, 4, 16)


def test_seeded_extract_on_model(tiny, phantom16):
    vol, _ = phantom16
    params = init_params(tiny("C"))
    oracle = ModelOracle(params, vol)
    assert oracle.domain == (16, 16, 16) and oracle.aux.shape == (4, 4, 4)
    outs = [seeded_extract(params, vol, 4, 16, max_batch=b)[0] for b in (64, 1024)]
    assert outs[0] == outs[1]
    dense = dense_extract(oracle, 16)
    assert dense.shape == (16, 16, 16)
