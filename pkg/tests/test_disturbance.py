"""Coefficient disturbance: exact row edits, determinism, degenerate cases."""

import numpy as np
import pytest

from kernelblend import disturbance as DI
from kernelblend import pipeline as P
from kernelblend import synthesis as S
from kernelblend import tensor as T

from toys import toy_dataset, toy_state


def cm(rows):
    return S.CoefficientMatrix(values=T.Tensor(np.array(rows, dtype=float)))


class TestDisturb:
    def test_correct_is_identity(self):
        alpha = cm([[0.2, 0.8]])
        assert DI.disturb(alpha, DI.Disturbance("correct")) is alpha

    def test_uniform_rows(self):
        out = DI.disturb(cm([[0.9, 0.05, 0.03, 0.02]]), DI.Disturbance("uniform"))
        assert np.array_equal(out.values.data, [[0.25, 0.25, 0.25, 0.25]])

    def test_top1(self):
        out = DI.disturb(cm([[0.1, 0.6, 0.3]]), DI.Disturbance("top1"))
        assert np.array_equal(out.values.data, [[0.0, 1.0, 0.0]])

    def test_shuffle_preserves_multiset_and_sum(self):
        rows = [[0.5, 0.3, 0.15, 0.05], [0.25, 0.25, 0.4, 0.1]]
        out = DI.disturb(cm(rows), DI.Disturbance("shuffled", seed=3))
        for r in range(2):
            assert sorted(out.values.data[r]) == sorted(rows[r])
            assert out.values.data[r].sum() == pytest.approx(sum(rows[r]))

    def test_shuffle_deterministic_for_seed(self):
        rows = [[0.5, 0.3, 0.2]]
        a = DI.disturb(cm(rows), DI.Disturbance("shuffled", seed=7))
        b = DI.disturb(cm(rows), DI.Disturbance("shuffled", seed=7))
        assert np.array_equal(a.values.data, b.values.data)

    def test_mean_requires_table(self):
        with pytest.raises(ValueError, match="mean"):
            DI.disturb(cm([[0.5, 0.5]]), DI.Disturbance("mean"))

    def test_mean_applies_table(self):
        table = np.array([[0.7, 0.3]])
        out = DI.disturb(cm([[0.1, 0.9]]), DI.Disturbance("mean"), mean_table=table)
        assert np.array_equal(out.values.data, table)

    def test_idempotent_kinds(self):
        rows = [[0.3, 0.45, 0.25]]
        table = np.array([[0.2, 0.5, 0.3]])
        for kind, kw in (("top1", {}), ("uniform", {}), ("mean", {"mean_table": table})):
            once = DI.disturb(cm(rows), DI.Disturbance(kind), **kw)
            twice = DI.disturb(once, DI.Disturbance(kind), **kw)
            assert np.array_equal(once.values.data, twice.values.data)

    def test_row_subset_only_touches_targets(self):
        out = DI.disturb(cm([[0.8, 0.2], [0.3, 0.7]]), DI.Disturbance("uniform"), rows=[1])
        assert np.array_equal(out.values.data, [[0.8, 0.2], [0.5, 0.5]])

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError):
            DI.Disturbance("negate")


class TestEvaluateDisturbed:
    @pytest.fixture
    def model(self):
        state = toy_state(n_bases=3, seed=4)
        _, evalset = toy_dataset(train_size=8, eval_size=20)
        return state, evalset

    def test_correct_equals_undisturbed_pipeline(self, model):
        state, evalset = model
        acc = DI.evaluate_disturbed(state.lm, state.lm_params, state.bank,
                                    state.synth_cfg, evalset, DI.Disturbance("correct"))
        reference = 0
        for i in range(len(evalset)):
            res = P.infer(state.lm, state.lm_params, state.bank, state.synth_cfg,
                          evalset.images[i:i + 1], threshold=1.01)
            reference += res.prediction == evalset.labels[i]
        assert acc == reference / len(evalset)

    def test_single_basis_is_immune_to_every_kind(self):
        state = toy_state(n_bases=1, seed=5)
        _, evalset = toy_dataset(train_size=8, eval_size=16)
        accs = {
            kind: DI.evaluate_disturbed(state.lm, state.lm_params, state.bank,
                                        state.synth_cfg, evalset, DI.Disturbance(kind))
            for kind in DI.KINDS
        }
        assert len(set(accs.values())) == 1

    def test_out_of_range_layer_rejected(self, model):
        state, evalset = model
        with pytest.raises(ValueError, match="out of range"):
            DI.evaluate_disturbed(state.lm, state.lm_params, state.bank,
                                  state.synth_cfg, evalset,
                                  DI.Disturbance("uniform", layer=9))

    def test_mean_table_matches_manual_average(self, model):
        state, evalset = model
        table = DI.mean_coefficients(state.lm, state.lm_params, state.bank,
                                     state.synth_cfg, evalset)
        assert table.shape == (2, 3)
        np.testing.assert_allclose(table.sum(axis=1), 1.0, atol=1e-9)


class TestLayerSweep:
    def test_shared_layer_disturbance_is_noop(self):
        state = toy_state(n_bases=3, seed=6, shared=(0,))
        _, evalset = toy_dataset(train_size=8, eval_size=16)
        reference = DI.evaluate_disturbed(state.lm, state.lm_params, state.bank,
                                          state.synth_cfg, evalset, DI.Disturbance("correct"))
        rows = DI.layer_sweep(state.lm, state.lm_params, state.bank, state.synth_cfg,
                              evalset, kind="shuffled", seeds=2)
        assert rows[0]["shared"] is True
        assert rows[0]["accuracy_mean"] == reference
        assert rows[0]["accuracy_std"] == 0.0
        assert len(rows) == state.bank.spec.num_layers

    def test_reports_mean_and_std_over_seeds(self):
        state = toy_state(n_bases=3, seed=7)
        _, evalset = toy_dataset(train_size=8, eval_size=12)
        rows = DI.layer_sweep(state.lm, state.lm_params, state.bank, state.synth_cfg,
                              evalset, kind="shuffled", seeds=3)
        for row in rows:
            assert 0.0 <= row["accuracy_mean"] <= 1.0
            assert row["accuracy_std"] >= 0.0
