import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from combocf import (
    CovariateSchema,
    SchemaError,
    SimulationConfig,
    TreatmentSet,
    assign_treatments,
    combined_outcome,
    counterfactual_outcome,
    default_schema,
    gen_covariates,
    generate_dataset,
    mixed_distance,
    sample_combo_coefficients,
    select_archetypes,
    truncated_normal,
)
from combocf.errors import ConfigError, ContractError
from combocf.rng import substream
from combocf.simcore import (
    INTERACTION_MEAN,
    INTERACTION_SD,
    OUTCOME_LOWER,
    OUTCOME_UPPER,
    SINGLE_OUTCOME_SD,
    build_single_outcome_model,
    single_outcome,
    treatment_weights,
)

import oracles


def tiny_schema():
    # p=4: two indicators then two continuous features
    return CovariateSchema(
        discrete_indices=(0, 1),
        continuous_indices=(2, 3),
        bernoulli_rates=(0.5, 0.5),
        ranges=((0.0, 2.0), (0.0, 2.0)),
    )


class TestSchema:
    def test_default_schema_valid(self):
        schema = default_schema()
        assert schema.p == 32
        assert len(schema.discrete_indices) == 24
        assert len(schema.continuous_indices) == 8

    def test_overlapping_indices_rejected(self):
        with pytest.raises(SchemaError):
            CovariateSchema((0, 1), (1, 2), (0.5, 0.5), ((0, 1),))

    def test_bad_rate_rejected(self):
        with pytest.raises(SchemaError):
            CovariateSchema((0,), (1,), (1.5,), ((0, 1),))

    def test_bad_range_rejected(self):
        with pytest.raises(SchemaError):
            CovariateSchema((0,), (1,), (0.5,), ((2.0, 1.0),))

    def test_roundtrip_json(self):
        schema = default_schema()
        assert CovariateSchema.from_json_dict(schema.to_json_dict()) == schema


class TestTreatmentSet:
    def test_empty_mask_rejected(self):
        with pytest.raises(ContractError):
            TreatmentSet(0, 3)

    def test_mask_beyond_k_rejected(self):
        with pytest.raises(ContractError):
            TreatmentSet(0b1000, 3)

    def test_indices_roundtrip(self):
        ts = TreatmentSet.from_indices([0, 2], 3)
        assert ts.mask == 0b101
        assert ts.indices() == (0, 2)
        assert ts.size == 2


class TestGenCovariates:
    def test_degenerate_rate_forces_ones(self):
        schema = CovariateSchema((0,), (), (1.0,), ())
        x = gen_covariates(schema, 3, substream(0, "covariates"))
        assert np.all(x[:, 0] == 1.0)

    def test_continuous_within_viral_load_bounds(self):
        schema = CovariateSchema((), (0,), (), ((0.84, 7.69),))
        x = gen_covariates(schema, 1000, substream(1, "covariates"))
        assert x[:, 0].min() >= 0.84
        assert x[:, 0].max() <= 7.69

    def test_deterministic(self):
        schema = default_schema()
        a = gen_covariates(schema, 50, substream(7, "covariates"))
        b = gen_covariates(schema, 50, substream(7, "covariates"))
        assert np.array_equal(a, b)

    def test_discrete_values_binary(self):
        schema = default_schema()
        x = gen_covariates(schema, 100, substream(3, "covariates"))
        d = list(schema.discrete_indices)
        assert set(np.unique(x[:, d])) <= {0.0, 1.0}


class TestMixedDistance:
    def test_identity_is_zero(self):
        schema = default_schema()
        x = gen_covariates(schema, 1, substream(0, "covariates"))[0]
        assert mixed_distance(x, x, schema) == 0.0

    def test_hand_value(self):
        # discrete [1,0] vs [1,1]: Jaccard 1 - 1/2; continuous mean |diff| 0.5
        schema = tiny_schema()
        x1 = np.array([1.0, 0.0, 0.5, 1.0])
        x2 = np.array([1.0, 1.0, 0.5, 2.0])
        assert mixed_distance(x1, x2, schema) == pytest.approx(0.5, abs=1e-15)

    def test_disjoint_indicator_sets(self):
        schema = tiny_schema()
        x1 = np.array([1.0, 0.0, 0.7, 0.7])
        x2 = np.array([0.0, 1.0, 0.7, 0.7])
        assert mixed_distance(x1, x2, schema) == pytest.approx(0.5, abs=1e-15)

    def test_both_indicator_sets_empty(self):
        schema = tiny_schema()
        x1 = np.array([0.0, 0.0, 0.7, 0.7])
        assert mixed_distance(x1, x1, schema) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
    def test_symmetry_and_range_match_scalar_oracle(self, s1, s2):
        schema = tiny_schema()
        x1 = gen_covariates(schema, 1, np.random.default_rng(s1))[0]
        x2 = gen_covariates(schema, 1, np.random.default_rng(s2))[0]
        d12 = mixed_distance(x1, x2, schema)
        d21 = mixed_distance(x2, x1, schema)
        assert d12 == pytest.approx(d21, abs=1e-15)
        assert 0.0 <= d12 <= 0.5 + 0.5 * 2.0  # |I_d|/p + |I_c|/p * max width
        assert d12 == pytest.approx(oracles.scalar_mixed_distance(x1, x2, schema), abs=1e-12)


class TestSelectArchetypes:
    def test_single_member_population(self):
        pop = np.array([[1.0, 2.0]])
        arch = select_archetypes(pop, 3, substream(0, "archetypes"))
        assert arch.shape == (3, 2)
        assert np.all(arch == pop[0])

    def test_deterministic(self):
        pop = np.arange(20.0).reshape(10, 2)
        a = select_archetypes(pop, 5, substream(4, "archetypes"))
        b = select_archetypes(pop, 5, substream(4, "archetypes"))
        assert np.array_equal(a, b)

    def test_zero_k_rejected(self):
        with pytest.raises(ConfigError):
            select_archetypes(np.ones((5, 2)), 0, substream(0, "a"))

    def test_uniform_selection_frequency(self):
        pop = np.arange(1000.0)[:, None]
        counts = np.zeros(1000)
        draws = 200
        per_draw = 200
        for s in range(draws):
            arch = select_archetypes(pop, per_draw, substream(s, "freq"))
            idx = arch[:, 0].astype(int)
            np.add.at(counts, idx, 1)
        total = draws * per_draw
        expected = total / 1000
        # Poisson-scale fluctuation band, five standard errors
        band = 5 * np.sqrt(expected)
        assert counts.min() >= expected - band
        assert counts.max() <= expected + band


class TestAssignTreatments:
    def test_zero_bias_weights_uniform(self):
        schema = tiny_schema()
        pop = gen_covariates(schema, 10, substream(0, "covariates"))
        w = treatment_weights(pop[0], pop[1:4], schema, 0.0)
        assert np.allclose(w, 1.0 / 3.0)

    def test_softmax_hand_value(self):
        # distances (0, ln 2) at bias 1 give weights (2/3, 1/3)
        schema = tiny_schema()
        x = np.array([1.0, 1.0, 1.0, 1.0])
        a0 = x.copy()
        a1 = x.copy()
        # one perturbed continuous feature: distance = (2/4) * (delta/2) = delta/4
        delta = 4.0 * np.log(2.0)
        a1[2] = x[2] + delta
        d1 = mixed_distance(x, a1, schema)
        assert d1 == pytest.approx(np.log(2.0), abs=1e-12)
        w = treatment_weights(x, np.array([a0, a1]), schema, 1.0)
        assert w == pytest.approx([2.0 / 3.0, 1.0 / 3.0], abs=1e-12)

    def test_size_always_within_bounds(self):
        schema = default_schema()
        pop = gen_covariates(schema, 30, substream(0, "covariates"))
        arch = pop[:4]
        for i in range(200):
            ts = assign_treatments(pop[i % 30], arch, schema, 3.0, substream(5, "assign", i))
            assert 1 <= ts.size <= 4

    def test_negative_bias_rejected(self):
        schema = tiny_schema()
        pop = gen_covariates(schema, 5, substream(0, "covariates"))
        with pytest.raises(ConfigError):
            assign_treatments(pop[0], pop[1:3], schema, -1.0, substream(0, "x"))


class TestSingleOutcomeModel:
    def test_sd_and_mean_bounds(self):
        pop = gen_covariates(default_schema(), 50, substream(0, "covariates"))
        rng = substream(0, "outcome-models")
        for _ in range(20):
            m = build_single_outcome_model(pop, rng)
            assert m.sd == SINGLE_OUTCOME_SD
            assert OUTCOME_LOWER < m.mean < OUTCOME_UPPER
            assert (m.lower, m.upper) == (OUTCOME_LOWER, OUTCOME_UPPER)

    def test_deterministic(self):
        pop = gen_covariates(default_schema(), 50, substream(0, "covariates"))
        m1 = build_single_outcome_model(pop, substream(9, "m"))
        m2 = build_single_outcome_model(pop, substream(9, "m"))
        assert m1.mean == m2.mean
        assert np.array_equal(m1.centroid, m2.centroid)

    def test_outcome_zero_at_centroid(self):
        schema = default_schema()
        pop = gen_covariates(schema, 10, substream(0, "covariates"))
        model = build_single_outcome_model(pop, substream(1, "m"))
        y = single_outcome(model, model.centroid, schema, substream(2, "draw"))
        assert y == 0.0

    def test_truncated_levels_within_bounds(self):
        rng = substream(0, "tn")
        draws = truncated_normal(rng, 4.0, SINGLE_OUTCOME_SD, OUTCOME_LOWER, OUTCOME_UPPER, size=5000)
        assert draws.min() > OUTCOME_LOWER
        assert draws.max() < OUTCOME_UPPER

    def test_truncated_mean_matches_quadrature(self):
        rng = substream(0, "tn-mean")
        draws = truncated_normal(rng, 4.0, 0.5, OUTCOME_LOWER, OUTCOME_UPPER, size=100_000)
        expected = oracles.truncated_normal_mean(4.0, 0.5, OUTCOME_LOWER, OUTCOME_UPPER)
        assert abs(draws.mean() - expected) < 0.01

    def test_truncated_mean_matches_quadrature_near_boundary(self):
        rng = substream(0, "tn-mean-low")
        draws = truncated_normal(rng, 1.0, 0.5, OUTCOME_LOWER, OUTCOME_UPPER, size=100_000)
        expected = oracles.truncated_normal_mean(1.0, 0.5, OUTCOME_LOWER, OUTCOME_UPPER)
        assert abs(draws.mean() - expected) < 0.01


class TestComboCoefficients:
    def test_moments_constants(self):
        assert INTERACTION_MEAN == -0.03
        assert INTERACTION_SD == 0.015

    def test_subset_count_k3(self):
        coeffs = sample_combo_coefficients(3, substream(0, "interactions"))
        assert len(coeffs) == 4  # C(3,2) + C(3,3)

    def test_subset_count_caps_at_degree_five(self):
        coeffs = sample_combo_coefficients(7, substream(0, "interactions"))
        from math import comb

        assert len(coeffs) == sum(comb(7, d) for d in range(2, 6))

    def test_zero_fraction_near_eighty_percent(self):
        total = 0
        zeros = 0
        for s in range(6):
            coeffs = sample_combo_coefficients(12, substream(s, "interactions"))
            vals = np.array(list(coeffs.values()))
            zeros += np.count_nonzero(vals == 0.0)
            total += vals.size
        assert abs(zeros / total - 0.8) < 0.02


class TestCombinedOutcome:
    def test_single_treatment_reduces_to_single_outcome(self, small_dataset):
        dataset, oracle = small_dataset
        u = dataset.units[0]
        for j in range(dataset.k):
            ts = TreatmentSet.from_indices([j], dataset.k)
            level = oracle.single_level(u.id, j)
            expected = level * mixed_distance(u.x, oracle.models[j].centroid, dataset.schema)
            assert counterfactual_outcome(oracle, u, ts) == expected

    def test_additive_when_coefficients_zero(self, small_dataset):
        from dataclasses import replace

        dataset, oracle = small_dataset
        u = dataset.units[1]
        zeroed = dict.fromkeys(oracle.interaction_coeffs, 0.0)
        o2 = replace(oracle, interaction_coeffs=zeroed, _singles_cache={})
        full = TreatmentSet.from_indices(range(dataset.k), dataset.k)
        singles = [
            o2.single_level(u.id, j)
            * mixed_distance(u.x, o2.models[j].centroid, dataset.schema)
            for j in range(dataset.k)
        ]
        assert counterfactual_outcome(o2, u, full) == pytest.approx(sum(singles), rel=1e-12)

    def test_hand_interaction_value(self, small_dataset):
        from dataclasses import replace

        dataset, oracle = small_dataset
        singles = np.array([1.0, 2.0, 3.0])
        coeffs = dict.fromkeys(oracle.interaction_coeffs, 0.0)
        coeffs[0b011] = 0.1
        assert oracles.subset_sum_outcome(singles, 0b111, coeffs) == pytest.approx(6.2, abs=1e-12)
        o2 = replace(oracle, interaction_coeffs=coeffs, _singles_cache={})
        assert o2._combine(singles, 0b111) == pytest.approx(6.2, abs=1e-12)

    def test_matches_subset_enumeration_oracle(self, small_dataset):
        dataset, oracle = small_dataset
        for u in dataset.units[:5]:
            singles = oracle._singles(u.x, u.id)
            for mask in range(1, 1 << dataset.k):
                ours = oracle._combine(singles, mask)
                ref = oracles.subset_sum_outcome(singles, mask, oracle.interaction_coeffs)
                assert ours == pytest.approx(ref, rel=1e-12, abs=1e-12)

    def test_empty_set_rejected(self, small_dataset):
        dataset, _ = small_dataset
        with pytest.raises(ContractError):
            TreatmentSet(0, dataset.k)


class TestGenerateDataset:
    def test_factual_consistency(self, small_dataset):
        dataset, oracle = small_dataset
        for u in dataset.units:
            assert counterfactual_outcome(oracle, u, u.treatments) == u.outcome

    def test_deterministic(self):
        cfg = SimulationConfig(n=40, k=3, assignment_bias=1.0, seed=5)
        d1, o1 = generate_dataset(cfg)
        d2, o2 = generate_dataset(cfg)
        assert [u.treatments.mask for u in d1.units] == [u.treatments.mask for u in d2.units]
        assert np.array_equal(d1.covariate_matrix(), d2.covariate_matrix())
        assert np.array_equal(d1.outcome_array(), d2.outcome_array())

    def test_counterfactual_query_repeatable(self, small_dataset):
        dataset, oracle = small_dataset
        u = dataset.units[3]
        full = TreatmentSet.from_indices(range(dataset.k), dataset.k)
        assert counterfactual_outcome(oracle, u, full) == counterfactual_outcome(oracle, u, full)

    def test_full_enumeration_size(self, small_dataset):
        dataset, oracle = small_dataset
        row = oracle.counterfactual_row(dataset.units[0])
        assert len(row) == 2**dataset.k - 1

    def test_k_bound_enforced(self):
        with pytest.raises(ConfigError):
            SimulationConfig(n=10, k=21, seed=0)

    def test_observed_masks_nonempty(self, small_dataset):
        dataset, _ = small_dataset
        assert all(u.treatments.mask > 0 for u in dataset.units)

    def test_unit_ids_unique(self, small_dataset):
        dataset, _ = small_dataset
        ids = [u.id for u in dataset.units]
        assert len(set(ids)) == len(ids)


class TestAssignmentBiasDirection:
    def test_biased_assignment_prefers_nearest_archetype(self):
        schema = default_schema()
        pop = gen_covariates(schema, 400, substream(11, "covariates"))
        arch = select_archetypes(pop, 4, substream(11, "archetypes"))
        hits_unbiased = 0
        hits_biased = 0
        n_draws = 400
        for i in range(n_draws):
            x = pop[i]
            dists = [mixed_distance(x, a, schema) for a in arch]
            nearest = int(np.argmin(dists))
            t0 = assign_treatments(x, arch, schema, 0.0, substream(77, "assign", i))
            t1 = assign_treatments(x, arch, schema, 10.0, substream(77, "assign", i))
            hits_unbiased += t0.contains(nearest)
            hits_biased += t1.contains(nearest)
        assert hits_biased > hits_unbiased
