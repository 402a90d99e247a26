import dataclasses
import math
from fractions import Fraction

import numpy as np
import pytest

from mpnet_lab import objectives as O
from mpnet_lab.masks import masks_for, mpnet_masks, strip_compensation
from mpnet_lab.model import ModelConfig, zero_params
from mpnet_lab.permute import PermutationPlan, build_layout, sample_plan
from mpnet_lab.tokenizer import CLS, SEP, TokenizedSentence, collate

MODES = ("mpnet", "plm", "mlm", "mlm_od")


def toy_batch():
    rows = [(np.array([CLS, 5, 6, 7, 8, 9, 10, SEP]), np.array([0, 1, 1, 0, 1, 1, 1, 0], bool)),
            (np.array([CLS, 11, 12, 6, SEP]), np.array([0, 1, 1, 1, 0], bool))]
    return collate([TokenizedSentence(i, w) for i, w in rows], 8)


@pytest.mark.parametrize("mode", MODES)
def test_zero_params_give_log_vocab(mode):
    cfg = ModelConfig(layers=1, hidden=8, heads=2, ffn=8, vocab=13, max_pos=16, dropout=0.0)
    loss, nll = O.loss(O.ObjectiveSpec(mode, 0.4), zero_params(cfg), cfg, toy_batch(), seed=1)
    assert abs(loss.item() - math.log(13)) < 1e-12
    assert np.allclose(nll, math.log(13))


@pytest.mark.parametrize("mode", MODES)
def test_loss_positive_and_grad_flows(mode, tiny_params, tiny_cfg):
    loss, nll = O.loss(O.ObjectiveSpec(mode, 0.4), tiny_params, tiny_cfg, toy_batch(), seed=2)
    assert loss.item() > 0 and np.all(nll > 0)
    assert abs(loss.item() - nll.mean()) < 1e-12
    loss.backward()
    assert np.abs(tiny_params["tok_emb"].grad).sum() > 0
    used = tiny_params["query_vec"].grad
    if mode == "mlm":
        assert used is None or not used.any()
    else:
        assert used.any()


def test_specials_never_predicted():
    spec = O.ObjectiveSpec("mpnet", 0.9)
    for seed in range(20):
        prep = O.prepare_batch(spec, toy_batch(), seed=seed, vocab_size=13)
        assert CLS not in prep.targets and SEP not in prep.targets


def test_batched_equals_per_sequence(tiny_params, tiny_cfg):
    spec = O.ObjectiveSpec("mpnet", 0.4)
    prep = O.prepare_batch(spec, toy_batch(), seed=5, vocab_size=13)
    _, nll = O.batch_loss(tiny_params, tiny_cfg, prep)
    parts = []
    for lay in prep.layouts:
        parts.append(O.sequence_loss(tiny_params, tiny_cfg, lay, masks_for(lay.plan))[1])
    assert np.max(np.abs(nll - np.concatenate(parts))) < 1e-12


def test_batch_rejects_bad_ratio():
    with pytest.raises(ValueError):
        O.ObjectiveSpec("mpnet", 1.0)
    with pytest.raises(ValueError):
        O.ObjectiveSpec("bert")


def test_stripped_mpnet_equals_plm_bitwise(tiny_params, tiny_cfg):
    ids = np.array([5, 9, 7, 12, 6, 8])
    for seed in range(10):
        plan = sample_plan(6, [True] * 6, 0.5, "mpnet", seed)
        lay = build_layout(plan, ids)
        stripped, _ = O.sequence_loss(tiny_params, tiny_cfg, lay, strip_compensation(mpnet_masks(plan), plan))
        plm_plan = dataclasses.replace(plan, mode="plm")
        plm, _ = O.sequence_loss(tiny_params, tiny_cfg, build_layout(plm_plan, ids), masks_for(plm_plan))
        full, _ = O.sequence_loss(tiny_params, tiny_cfg, lay, mpnet_masks(plan))
        assert stripped.item() == plm.item()
        assert full.item() != plm.item()


def test_ordered_without_dependency_equals_mlm(tiny_params, tiny_cfg):
    ids = np.array([5, 9, 7, 12, 6, 8])
    for seed in range(10):
        od = sample_plan(6, [True] * 6, 0.5, "mlm_od", seed)
        # independent per-slot prediction: read each target off its own mask slot
        content, _ = O.sequence_loss(tiny_params, tiny_cfg, build_layout(od, ids), masks_for(od), "content")
        mlm = dataclasses.replace(od, mode="mlm")
        ref, _ = O.sequence_loss(tiny_params, tiny_cfg, build_layout(mlm, ids), masks_for(mlm))
        with_dep, _ = O.sequence_loss(tiny_params, tiny_cfg, build_layout(od, ids), masks_for(od))
        assert abs(content.item() - ref.item()) < 1e-9
        assert abs(with_dep.item() - ref.item()) > 1e-6


def brute_info(mode, n, k):
    """Average visible tokens/positions per predicted token, by direct counting."""
    plan = PermutationPlan(np.arange(n), n - k, mode, None)
    tok = pos = 0
    for t in range(k):
        seen_tokens = (n - k) + (0 if mode == "mlm" else t)
        seen_pos = seen_tokens + 1 if mode == "plm" else n
        tok += seen_tokens
        pos += min(seen_pos, n)
    assert plan.num_predicted == k
    return Fraction(tok, k * n), Fraction(pos, k * n)


@pytest.mark.parametrize("mode", MODES)
def test_info_fraction_finite_n(mode):
    for n in (2, 7, 20, 100):
        k = max(1, math.ceil(0.15 * n - 1e-9))
        tokens, positions = O.info_fraction(mode, n, 0.15)
        bt, bp = brute_info(mode, n, k)
        assert tokens == bt
        if mode == "plm":
            # own position is visible too; the accounting counts context tokens only
            assert positions == tokens
        else:
            assert positions == bp


def test_info_fraction_limits():
    assert O.info_fraction("mlm") == (Fraction(17, 20), 1)
    assert O.info_fraction("plm") == (Fraction(37, 40), Fraction(37, 40))
    assert O.info_fraction("mpnet") == (Fraction(37, 40), 1)
    assert O.format_info("mpnet") == "tokens 92.5% positions 100.0%"
    assert O.format_info("mlm") == "tokens 85.0% positions 100.0%"
    assert O.format_info("plm") == "tokens 92.5% positions 92.5%"
    big = O.info_fraction("mpnet", 200_000)[0]
    assert abs(big - Fraction(37, 40)) < Fraction(1, 10_000)
    with pytest.raises(ValueError):
        O.info_fraction("mlm", 1)


@pytest.mark.parametrize("mode", MODES)
def test_dependency_demo_untrained(mode):
    cfg = ModelConfig(layers=1, hidden=8, heads=2, ffn=8, vocab=13, max_pos=16, dropout=0.0)
    demo = O.dependency_demo(zero_params(cfg), cfg, [5, 6, 7, 8, 9], 2, 3, mode)
    assert abs(demo.p_revealed - 1 / 13) < 1e-12 and abs(demo.ratio - 1.0) < 1e-12


def test_dependency_demo_mlm_has_no_dependency(tiny_params, tiny_cfg):
    demo = O.dependency_demo(tiny_params, tiny_cfg, [5, 6, 7, 8, 9], 2, 3, "mlm")
    assert demo.ratio == 1.0
    demo = O.dependency_demo(tiny_params, tiny_cfg, [5, 6, 7, 8, 9], 2, 3, "mpnet")
    assert demo.ratio != 1.0


def test_conditioning_table():
    lines = O.conditioning_table("the river carries golden light".split(), [3, 4])
    assert lines == [
        "MLM: log P(golden | the river carries [M] [M]) + log P(light | the river carries [M] [M])",
        "PLM: log P(golden | the river carries) + log P(light | the river carries golden)",
        "MPNet: log P(golden | the river carries [M] [M]) + log P(light | the river carries golden [M])",
    ]
