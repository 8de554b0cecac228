import numpy as np
import pytest

from combocf.errors import ConfigError, ContractError, DegenerateDataError, DimensionError
from combocf.matching import (
    BalancingProjector,
    balanced_batches,
    build_balanced_batch,
    fit_projector,
    project,
)
from combocf.simcore import TreatmentSet, Unit

import oracles


def make_units(masks, k=3, seed=0, p=2):
    rng = np.random.default_rng(seed)
    units = [
        Unit(id=i, x=rng.normal(size=p), treatments=TreatmentSet(m, k), outcome=0.0)
        for i, m in enumerate(masks)
    ]
    scores = np.array([u.x for u in units])
    return units, scores


class TestProjector:
    def test_line_data_recovers_principal_axis(self):
        rng = np.random.default_rng(0)
        t = rng.normal(size=200)
        direction = np.array([3.0, 4.0]) / 5.0
        x = np.outer(t, direction) + rng.normal(scale=1e-4, size=(200, 2))
        proj = fit_projector(x, 1)
        cosine = abs(float(proj.components[0] @ direction))
        assert cosine > 0.999

    def test_mean_projects_to_zero(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(50, 4))
        proj = fit_projector(x, 2)
        assert np.allclose(proj.project(x.mean(axis=0)), 0.0, atol=1e-12)

    def test_full_rank_reconstruction(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 5))
        proj = fit_projector(x, 5)
        centered = x - proj.mean
        recon = proj.project(x) @ proj.components
        assert np.allclose(recon, centered, atol=1e-8)

    def test_rows_orthonormal(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(80, 6))
        proj = fit_projector(x, 4)
        gram = proj.components @ proj.components.T
        assert np.allclose(gram, np.eye(4), atol=1e-8)

    def test_sign_convention(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(40, 3))
        proj = fit_projector(x, 3)
        for row in proj.components:
            assert row[np.argmax(np.abs(row))] > 0

    def test_constant_data_rejected(self):
        with pytest.raises(DegenerateDataError):
            fit_projector(np.ones((20, 3)), 2)

    def test_bad_component_count(self):
        x = np.random.default_rng(0).normal(size=(10, 3))
        with pytest.raises(ConfigError):
            fit_projector(x, 4)
        with pytest.raises(ConfigError):
            fit_projector(x, 0)


class TestProject:
    def test_identity_like_projector(self):
        proj = BalancingProjector(mean=np.zeros(3), components=np.eye(3))
        x = np.array([1.0, -2.0, 0.5])
        assert np.array_equal(project(proj, x), x)

    def test_affine_linearity(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(30, 4))
        proj = fit_projector(x, 2)
        a, b = rng.normal(size=4), rng.normal(size=4)
        lhs = proj.project(a + b)
        rhs = proj.project(a) + proj.project(b) - proj.project(np.zeros(4))
        assert np.allclose(lhs, rhs, atol=1e-10)

    def test_projection_contracts_norm(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(30, 4))
        proj = fit_projector(x, 2)
        v = rng.normal(size=4)
        assert np.linalg.norm(proj.project(v)) <= np.linalg.norm(v - proj.mean) + 1e-12

    def test_dimension_mismatch(self):
        proj = BalancingProjector(mean=np.zeros(3), components=np.eye(3))
        with pytest.raises(DimensionError):
            proj.project(np.ones(4))


class TestBalancedBatch:
    def test_two_combination_pool_balances_two_two(self):
        for seed in range(20):
            units, scores = make_units([1, 1, 1, 2, 2, 2], seed=seed)
            batch = build_balanced_batch(units, scores, 4, np.random.default_rng(seed))
            masks = [u.treatments.mask for u in batch]
            assert masks.count(1) == 2
            assert masks.count(2) == 2

    def test_batch_of_entire_pool(self):
        units, scores = make_units([1, 2, 3, 1], seed=1)
        batch = build_balanced_batch(units, scores, 10, np.random.default_rng(0))
        assert sorted(u.id for u in batch) == [0, 1, 2, 3]

    def test_single_seed_unit(self):
        units, scores = make_units([1, 2, 3], seed=2)
        batch = build_balanced_batch(units, scores, 1, np.random.default_rng(3))
        assert len(batch) == 1

    def test_no_duplicates(self):
        units, scores = make_units([1, 1, 2, 2, 3, 3, 3, 1], seed=3)
        batch = build_balanced_batch(units, scores, 6, np.random.default_rng(4))
        ids = [u.id for u in batch]
        assert len(set(ids)) == len(ids)

    def test_deterministic_given_seed(self):
        units, scores = make_units([1, 1, 2, 2, 3, 3], seed=4)
        b1 = build_balanced_batch(units, scores, 5, np.random.default_rng(11))
        b2 = build_balanced_batch(units, scores, 5, np.random.default_rng(11))
        assert [u.id for u in b1] == [u.id for u in b2]

    def test_empty_pool_rejected(self):
        with pytest.raises(ContractError):
            build_balanced_batch([], np.empty((0, 2)), 3, np.random.default_rng(0))

    def test_nearest_choice_matches_linear_scan_oracle(self):
        rng = np.random.default_rng(7)
        units, scores = make_units([1, 1, 2, 2, 2, 3, 3, 1, 2, 3], seed=5)
        audited = []

        def on_select(candidate_ids, chosen_id, centroid):
            audited.append((list(candidate_ids), chosen_id, centroid.copy()))

        build_balanced_batch(units, scores, 8, rng, on_select=on_select)
        by_id = {u.id: i for i, u in enumerate(units)}
        assert audited
        for candidate_ids, chosen_id, centroid in audited:
            cand_scores = [scores[by_id[c]] for c in candidate_ids]
            best = oracles.linear_scan_nearest(cand_scores, candidate_ids, centroid)
            assert candidate_ids[best] == chosen_id

    def test_balance_within_one_when_supply_allows(self):
        rng = np.random.default_rng(8)
        for trial in range(50):
            n_masks = int(rng.integers(2, 5))
            counts = rng.integers(4, 9, size=n_masks)
            masks = [m + 1 for m, c in enumerate(counts) for _ in range(c)]
            units, scores = make_units(masks, k=4, seed=trial)
            size = int(rng.integers(2, min(12, len(units))))
            batch = build_balanced_batch(units, scores, size, rng)
            in_batch = {}
            for u in batch:
                in_batch[u.treatments.mask] = in_batch.get(u.treatments.mask, 0) + 1
            pool_counts = {m + 1: int(c) for m, c in enumerate(counts)}
            non_exhausted = {m: c for m, c in in_batch.items() if c < pool_counts[m]}
            if len(non_exhausted) >= 2:
                values = list(non_exhausted.values())
                assert max(values) - min(values) <= 1


class TestBalancedBatches:
    def test_partitions_pool(self):
        units, scores = make_units([1, 2, 3, 1, 2, 3, 1, 2, 3, 1], seed=9)
        batches = list(balanced_batches(units, scores, 4, np.random.default_rng(2)))
        ids = [u.id for b in batches for u in b]
        assert sorted(ids) == list(range(10))
        assert all(len(b) <= 4 for b in batches)
