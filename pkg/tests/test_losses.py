import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from factories import loss_embeddings, random_loss_instance
from mama.errors import InputError, NumericError
from mama.losses import (BatchEmbeddings, CorrespondenceMatrix, LossConfig, Temperatures, clip_vt,
                         correspondence_matrix, info_nce_vv, local_loss, text_local_score, total_loss,
                         visual_local_score)

LOG1P_EXP_NEG1 = 0.31326168751822286  # -log(e / (e + 1))

# three fixed unit vectors and their positives, values frozen from tests/oracles.py
FIXED_V = [[0.6, 0.8, 0.0], [0.0, 0.6, 0.8], [0.8, 0.0, 0.6]]
FIXED_P = [[0.0, 0.8, 0.6], [0.6, 0.0, 0.8], [0.8, 0.6, 0.0]]
FIXED_VV_TAU05 = 0.8970255743673393
FIXED_VT_TAU007 = 4.581906104891808
FIXED_SIMCLR_TAU05 = 1.593306094993354


def t64(x):
    return torch.tensor(x, dtype=torch.float64)


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


class TestInfoNCE:
    def test_single_pair_has_no_negatives(self):
        v = t64([[1.0, 0.0]])
        assert info_nce_vv(v, v, 0.5).item() == pytest.approx(0.0, abs=1e-12)

    def test_all_identical_gives_log_two(self):
        v = t64([[0.6, 0.8], [0.6, 0.8]])
        for tau in (0.1, 0.5, 3.0):
            assert info_nce_vv(v, v, tau).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_frozen_three_vector_case(self):
        assert info_nce_vv(t64(FIXED_V), t64(FIXED_P), 0.5).item() == pytest.approx(FIXED_VV_TAU05, abs=1e-12)

    def test_simclr_variant_frozen(self):
        got = info_nce_vv(t64(FIXED_V), t64(FIXED_P), 0.5, variant="simclr").item()
        assert got == pytest.approx(FIXED_SIMCLR_TAU05, abs=1e-12)

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            info_nce_vv(t64(FIXED_V), t64(FIXED_P), 0.5, variant="moco")

    def test_non_finite_input(self):
        v = t64([[float("nan"), 0.0]])
        with pytest.raises(NumericError):
            info_nce_vv(v, v, 0.5)

    def test_large_logits_stay_finite(self):
        # direct exponentiation would overflow at this temperature
        rng = np.random.default_rng(0)
        v = t64(unit_rows(rng, 4, 8))
        assert math.isfinite(info_nce_vv(v, v, 1e-3).item())


class TestClip:
    def test_single_pair(self):
        v = t64([[0.0, 1.0]])
        assert clip_vt(v, v, 0.07).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_pair_closed_form(self):
        v = t64([[1.0, 0.0], [0.0, 1.0]])
        assert clip_vt(v, v, 1.0).item() == pytest.approx(LOG1P_EXP_NEG1, abs=1e-12)

    def test_frozen_three_vector_case(self):
        assert clip_vt(t64(FIXED_V), t64(FIXED_P), 0.07).item() == pytest.approx(FIXED_VT_TAU007, abs=1e-12)

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        v, t = t64(unit_rows(rng, 6, 5)), t64(unit_rows(rng, 6, 5))
        perm = torch.as_tensor(rng.permutation(6))
        assert clip_vt(v[perm], t[perm], 0.3).item() == pytest.approx(clip_vt(v, t, 0.3).item(), abs=1e-12)

    def test_perfect_alignment_limit(self):
        v = t64(np.eye(4))
        assert clip_vt(v, v, 1e-3).item() < 1e-2


class TestCorrespondence:
    def test_entries_match_oracle(self):
        s = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
        p = [[1.0, 2.0, 2.0], [0.0, 3.0, 4.0], [2.0, 0.0, 0.0], [1.0, 1.0, 1.0]]
        got = correspondence_matrix(t64(s), t64(p)).values.numpy()
        np.testing.assert_allclose(got, oracles.correspondence(s, p), atol=1e-12)

    def test_identical_rows_score_one(self):
        s = t64([[0.3, -0.4, 2.0]])
        assert correspondence_matrix(s, s).values.item() == pytest.approx(1.0, abs=1e-12)

    def test_zero_row_rejected(self):
        with pytest.raises(NumericError):
            correspondence_matrix(t64([[0.0, 0.0]]), t64([[1.0, 0.0]]))


class TestLocalScores:
    C = t64([[0.9, 0.1], [0.2, 0.8]])

    def test_visual_example(self):
        assert visual_local_score(CorrespondenceMatrix(self.C)).item() == pytest.approx(0.85)

    def test_text_example(self):
        assert text_local_score(CorrespondenceMatrix(self.C)).item() == pytest.approx(0.85)

    def test_single_row_and_column(self):
        row = t64([[0.1, 0.7, -0.2]])
        assert visual_local_score(CorrespondenceMatrix(row)).item() == pytest.approx(0.7)
        col = t64([[0.1], [0.7], [-0.2]])
        assert text_local_score(CorrespondenceMatrix(col)).item() == pytest.approx(0.7)

    def test_masked_rows_are_ignored(self):
        C = t64([[0.9, 0.1], [0.99, 0.99]])
        m = torch.tensor([True, False])
        assert visual_local_score(CorrespondenceMatrix(C, m)).item() == pytest.approx(0.9)
        assert text_local_score(CorrespondenceMatrix(C, m)).item() == pytest.approx(0.5)

    def test_all_masked(self):
        m = torch.tensor([False, False])
        with pytest.raises(InputError):
            visual_local_score(CorrespondenceMatrix(self.C, m))
        with pytest.raises(InputError):
            text_local_score(CorrespondenceMatrix(self.C, m))

    def test_dominated_column_leaves_visual_score_unchanged(self):
        rng = np.random.default_rng(3)
        C = rng.uniform(-1, 1, size=(3, 4))
        extra = C[:, [1]] - rng.uniform(0.01, 0.5, size=(3, 1))
        wider = np.hstack([C, extra])
        assert oracles.visual_local(wider.tolist()) == pytest.approx(oracles.visual_local(C.tolist()))
        assert visual_local_score(CorrespondenceMatrix(t64(wider))).item() == pytest.approx(
            visual_local_score(CorrespondenceMatrix(t64(C))).item(), abs=1e-12)

    def test_transpose_duality(self):
        C = t64(np.random.default_rng(4).uniform(-1, 1, size=(3, 5)))
        assert text_local_score(CorrespondenceMatrix(C)).item() == pytest.approx(
            visual_local_score(CorrespondenceMatrix(C.t().contiguous())).item(), abs=1e-12)

    def test_patch_scale_invariance(self):
        rng = np.random.default_rng(5)
        s, p = t64(rng.normal(size=(3, 6))), t64(rng.normal(size=(4, 6)))
        a = visual_local_score(correspondence_matrix(s, p)).item()
        b = visual_local_score(correspondence_matrix(s, 7.5 * p)).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestLocalLoss:
    def test_single_sample(self):
        lv, lt = local_loss([t64([[1.0, 0.0]])], [t64([[0.0, 1.0], [1.0, 1.0]])], 0.1)
        assert lv.item() == pytest.approx(0.0, abs=1e-12)
        assert lt.item() == pytest.approx(0.0, abs=1e-12)

    def test_identity_score_matrix_closed_form(self):
        # one sentence and one patch per sample, orthogonal across samples: c_v = c_t = identity
        s = [t64([[1.0, 0.0]]), t64([[0.0, 1.0]])]
        p = [t64([[1.0, 0.0]]), t64([[0.0, 1.0]])]
        lv, lt = local_loss(s, p, 1.0)
        assert lv.item() == pytest.approx(LOG1P_EXP_NEG1, abs=1e-12)
        assert lt.item() == pytest.approx(LOG1P_EXP_NEG1, abs=1e-12)

    def test_identical_features_give_log_batch(self):
        s = [t64([[1.0, 2.0], [0.5, 0.1]])] * 3
        p = [t64([[0.2, 1.0], [1.0, 0.0], [0.3, 0.3]])] * 3
        lv, lt = local_loss(s, p, 0.1)
        assert lv.item() == pytest.approx(math.log(3), abs=1e-12)
        assert lt.item() == pytest.approx(math.log(3), abs=1e-12)

    def test_empty_report_rejected(self):
        with pytest.raises(InputError):
            local_loss([t64(np.zeros((0, 2))), t64([[1.0, 0.0]])], [t64([[1.0, 0.0]])] * 2, 0.1)

    def test_padded_and_list_forms_agree(self):
        rng = np.random.default_rng(6)
        sents = [t64(rng.normal(size=(k, 4))) for k in (1, 3, 2)]
        patches = t64(rng.normal(size=(3, 5, 4)))
        padded = torch.zeros(3, 3, 4, dtype=torch.float64)
        mask = torch.zeros(3, 3, dtype=torch.bool)
        for i, s in enumerate(sents):
            padded[i, : len(s)] = s
            padded[i, len(s):] = 9.0  # garbage in padded rows must not leak
            mask[i, : len(s)] = True
        a = local_loss(sents, list(patches), 0.2)
        b = local_loss(padded, patches, 0.2, mask)
        assert a[0].item() == pytest.approx(b[0].item(), abs=1e-12)
        assert a[1].item() == pytest.approx(b[1].item(), abs=1e-12)


class TestOracleEquivalence:
    """Each loss against the naive summation oracle on 100 random instances, B <= 8, d <= 16."""

    N = 100

    def instances(self, seed):
        rng = np.random.default_rng(seed)
        for _ in range(self.N):
            yield random_loss_instance(rng, int(rng.integers(1, 9)), int(rng.integers(2, 17)))

    def test_info_nce_vv(self):
        for inst in self.instances(10):
            V = inst["V"] / np.linalg.norm(inst["V"], axis=1, keepdims=True)
            P = inst["V_pos"] / np.linalg.norm(inst["V_pos"], axis=1, keepdims=True)
            got = info_nce_vv(t64(V), t64(P), inst["tau1"]).item()
            assert got == pytest.approx(oracles.info_nce_vv(V.tolist(), P.tolist(), inst["tau1"]), abs=1e-5)

    def test_clip_vt(self):
        for inst in self.instances(11):
            V = inst["V"] / np.linalg.norm(inst["V"], axis=1, keepdims=True)
            T = inst["T"] / np.linalg.norm(inst["T"], axis=1, keepdims=True)
            got = clip_vt(t64(V), t64(T), inst["tau2"]).item()
            assert got == pytest.approx(oracles.clip_vt(V.tolist(), T.tolist(), inst["tau2"]), abs=1e-5)

    def test_local_scores(self):
        for inst in self.instances(12):
            s, p = inst["sents"][0], inst["patches"][0]
            C = correspondence_matrix(t64(s), t64(p))
            ref = oracles.correspondence(s.tolist(), p.tolist())
            assert visual_local_score(C).item() == pytest.approx(oracles.visual_local(ref), abs=1e-5)
            assert text_local_score(C).item() == pytest.approx(oracles.text_local(ref), abs=1e-5)

    def test_local_loss(self):
        for inst in self.instances(13):
            lv, lt = local_loss([t64(s) for s in inst["sents"]], list(t64(inst["patches"])), inst["tau_local"])
            rv, rt = oracles.local_loss([s.tolist() for s in inst["sents"]],
                                        [p.tolist() for p in inst["patches"]], inst["tau_local"])
            assert lv.item() == pytest.approx(rv, abs=1e-5)
            assert lt.item() == pytest.approx(rt, abs=1e-5)

    def test_total_loss(self):
        rng = np.random.default_rng(14)
        for inst in self.instances(14):
            step = int(rng.integers(0, 20))
            cfg = LossConfig(tau1=inst["tau1"], tau_local=inst["tau_local"], delta=10)
            temps = Temperatures(inst["tau1"], inst["tau2"], inst["tau_local"])
            got = total_loss(loss_embeddings(inst), temps, step, config=cfg)
            ref = oracles.total_loss(inst["V"].tolist(), inst["V_pos"].tolist(), inst["T"].tolist(),
                                     [s.tolist() for s in inst["sents"]], [p.tolist() for p in inst["patches"]],
                                     inst["tau1"], inst["tau2"], inst["tau_local"], 1.0 if step >= 10 else 0.0)
            assert got.total == pytest.approx(ref, abs=1e-5)
            assert got.loss.item() == pytest.approx(ref, abs=1e-5)


class TestTotalLoss:
    def inst(self, seed=0, B=4, d=6):
        return random_loss_instance(np.random.default_rng(seed), B, d)

    def test_weight_switch(self):
        cfg = LossConfig(delta=8000)
        assert cfg.weight_at(7999) == 0.0
        assert cfg.weight_at(8000) == 1.0

    def test_local_terms_excluded_before_switch(self):
        emb = loss_embeddings(self.inst())
        out = total_loss(emb, Temperatures(), 7999, delta=8000)
        assert out.w == 0.0
        assert out.total == pytest.approx(out.l_vv + out.l_vt_primary + out.l_vt_positive, abs=1e-12)
        assert out.l_local_v > 0  # still reported

    def test_identity_residual(self):
        emb = loss_embeddings(self.inst(1))
        for step in (0, 8000, 9000):
            assert total_loss(emb, Temperatures(), step, delta=8000).identity_residual() == 0.0

    def test_same_positive_gives_equal_vt_terms(self):
        inst = self.inst(2)
        inst["V_pos"] = inst["V"]
        out = total_loss(loss_embeddings(inst), Temperatures(), 0)
        assert out.l_vt_primary == out.l_vt_positive

    def test_ablation_switches_zero_terms(self):
        emb = loss_embeddings(self.inst(3))
        cfg = LossConfig(use_vv=False, use_symmetric_vt=False, use_sla=False, delta=0)
        out = total_loss(emb, Temperatures(), 5, config=cfg)
        assert out.l_vv == 0.0 and out.l_vt_positive == 0.0 and out.l_local_v == 0.0 and out.w == 0.0
        assert out.total == out.l_vt_primary

    def test_negative_step_rejected(self):
        with pytest.raises(InputError):
            total_loss(loss_embeddings(self.inst()), Temperatures(), -1)

    def test_temperatures_must_be_positive(self):
        with pytest.raises(ValueError):
            Temperatures(tau1=0.0)
        with pytest.raises(ValueError):
            Temperatures(tau2=torch.tensor(-0.1, requires_grad=True))


finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(2, 8), st.integers(0, 2**31 - 1), st.floats(0.05, 2.0))
def test_infonce_losses_are_non_negative(B, d, seed, tau):
    rng = np.random.default_rng(seed)
    V, P, T = (t64(unit_rows(rng, B, d)) for _ in range(3))
    assert info_nce_vv(V, P, tau).item() >= -1e-12
    assert clip_vt(V, T, tau).item() >= -1e-12
    lv, lt = local_loss(list(t64(rng.normal(size=(B, 2, d)))), list(t64(rng.normal(size=(B, 3, d)))), tau)
    assert lv.item() >= -1e-12 and lt.item() >= -1e-12


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1), st.floats(0.05, 1.0), st.floats(1.05, 3.0))
def test_lower_temperature_lowers_loss_when_positive_leads(B, seed, tau, factor):
    # positives hold every row's and column's argmax: shrinking tau sharpens toward them
    rng = np.random.default_rng(seed)
    scores = rng.uniform(-1, 0.5, size=(B, B))
    np.fill_diagonal(scores, rng.uniform(0.6, 1.0, size=B))
    cold = oracles.symmetric_ce(scores.tolist(), tau / factor)
    warm = oracles.symmetric_ce(scores.tolist(), tau)
    assert cold < warm
    # the same property on the implementation, via orthonormal-constructed embeddings
    V = t64(np.eye(B))
    T = t64(scores.T)  # V @ T.T == scores
    assert clip_vt(V, T, tau / factor).item() < clip_vt(V, T, tau).item()
