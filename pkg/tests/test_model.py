import dataclasses
import math

import numpy as np
import pytest

from mpnet_lab import tensor as T
from mpnet_lab.masks import masks_for, mlm_masks, mpnet_masks
from mpnet_lab.model import (
    ModelConfig,
    encode_streams,
    forward_single,
    forward_two_stream,
    init_params,
    is_no_decay,
    param_shapes,
    relative_bucket,
    zero_params,
)
from mpnet_lab.permute import PermutationPlan, build_layout


def reference_bucket(delta, buckets=32, max_dist=128):
    """Scalar re-statement of the bucketing rule, written from the description."""
    half = buckets // 2
    base = half if delta < 0 else 0
    d = abs(delta)
    exact = half // 2
    if d < exact:
        return base + d
    b = exact + int(math.log(d / exact) / math.log(max_dist / exact) * (half - exact))
    return base + min(b, half - 1)


def two_stream_inputs(plan, ids):
    lay = build_layout(plan, ids)
    m = masks_for(plan)
    return lay, m


def run(params, cfg, lay, m):
    return encode_streams(params, cfg, lay.input_ids[None], lay.input_positions[None], m.content_allow[None],
                          lay.plan.predicted[None], m.query_allow[None])


class TestRelativeBucket:
    def test_matches_reference_histogram(self):
        deltas = np.arange(-512, 513)
        got = relative_bucket(deltas, 32, 128)
        want = np.array([reference_bucket(int(d)) for d in deltas])
        np.testing.assert_array_equal(got, want)
        hist = np.bincount(got, minlength=32)
        # offset 0 is non-negative, so the first negative bucket stays empty
        assert hist.sum() == 1025 and hist[16] == 0 and np.all(np.delete(hist, 16) > 0)

    def test_zero_and_monotone(self):
        assert relative_bucket(0) == 0
        pos = relative_bucket(np.arange(0, 600))
        neg = relative_bucket(-np.arange(1, 600))
        assert np.all(np.diff(pos) >= 0) and np.all(np.diff(neg) >= 0)
        assert pos.max() == 15 and neg.min() == 17 and neg.max() == 31

    def test_single_bucket(self):
        assert np.all(relative_bucket(np.arange(-5, 6), 1, 128) == 0)


class TestConfig:
    def test_dict_round_trip_from_strings(self):
        cfg = ModelConfig(layers=2, dropout=0.25, use_rel_bias=False)
        text = {k: str(v) for k, v in cfg.to_dict().items()}
        assert ModelConfig.from_dict(text) == cfg

    def test_rejects_bad_heads(self):
        with pytest.raises(ValueError):
            ModelConfig(hidden=10, heads=4)

    def test_param_inventory(self):
        cfg = ModelConfig(layers=2)
        shapes = param_shapes(cfg)
        assert shapes["tok_emb"] == (1024, 128) and shapes["rel_bias"] == (32, 4)
        assert sum(1 for k in shapes if k.startswith("layer1.")) == 16
        assert is_no_decay("layer0.q.b") and is_no_decay("emb_ln.g") and not is_no_decay("layer0.q.w")


class TestForward:
    def test_zero_params_uniform(self):
        cfg = ModelConfig(layers=2, hidden=8, heads=2, ffn=16, vocab=11, max_pos=16, dropout=0.0)
        plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
        lay, m = two_stream_inputs(plan, np.arange(5, 11))
        _, logits = forward_two_stream(zero_params(cfg), cfg, lay, m)
        assert logits.shape == (3, 11)
        np.testing.assert_array_equal(logits.data, 0.0)
        loss = T.cross_entropy(logits, lay.targets).item()
        assert abs(loss - math.log(11)) < 1e-12

    def test_slot_permutation_equivariance(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([2, 5, 1, 6, 3, 4], c=3)
        lay, m = two_stream_inputs(plan, np.array([5, 9, 7, 12, 6, 8]))
        h, g = run(tiny_params, tiny_cfg, lay, m)
        perm = np.random.default_rng(0).permutation(lay.length)
        h2, g2 = encode_streams(tiny_params, tiny_cfg, lay.input_ids[perm][None], lay.input_positions[perm][None],
                                m.content_allow[np.ix_(perm, perm)][None], plan.predicted[None],
                                m.query_allow[:, perm][None])
        assert np.max(np.abs(h2.data[0] - h.data[0][perm])) < 1e-9
        assert np.max(np.abs(g2.data - g.data)) < 1e-9

    def test_query_never_sees_own_token(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
        ids = np.array([5, 6, 7, 8, 9, 10])
        lay, m = two_stream_inputs(plan, ids)
        _, g = run(tiny_params, tiny_cfg, lay, m)
        n = plan.n
        for j in range(plan.num_predicted):
            for alt in range(tiny_cfg.vocab):
                bad = lay.input_ids.copy()
                bad[n + j] = alt
                _, g2 = encode_streams(tiny_params, tiny_cfg, bad[None], lay.input_positions[None],
                                       m.content_allow[None], plan.predicted[None], m.query_allow[None])
                np.testing.assert_array_equal(g2.data[0, :j + 1], g.data[0, :j + 1])

    def test_later_steps_do_see_earlier_tokens(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
        lay, m = two_stream_inputs(plan, np.array([5, 6, 7, 8, 9, 10]))
        _, g = run(tiny_params, tiny_cfg, lay, m)
        bad = lay.input_ids.copy()
        bad[plan.n] = 12
        _, g2 = encode_streams(tiny_params, tiny_cfg, bad[None], lay.input_positions[None], m.content_allow[None],
                               plan.predicted[None], m.query_allow[None])
        assert np.abs(g2.data[0, 1:] - g.data[0, 1:]).min(axis=-1).max() > 0

    def test_full_context_matches_single_stream(self, tiny_params, tiny_cfg):
        ids = np.array([5, 9, 7, 12, 6, 8])
        plan = PermutationPlan(np.array([3, 0, 5, 1, 4, 2]), 6, "mpnet", None)
        lay = build_layout(plan, ids)
        m = mpnet_masks(plan)
        h, g = encode_streams(tiny_params, tiny_cfg, lay.input_ids[None], lay.input_positions[None],
                              m.content_allow[None])
        assert g is None
        ref = forward_single(tiny_params, tiny_cfg, ids).data
        assert np.max(np.abs(h.data[0] - ref[plan.z])) < 1e-12

    def test_mlm_layout_matches_single_stream_on_kept(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([1, 3, 5, 2, 4], c=3, mode="mlm")
        ids = np.array([5, 6, 7, 8, 9])
        lay = build_layout(plan, ids)
        m = mlm_masks(plan)
        h, _ = encode_streams(tiny_params, tiny_cfg, lay.input_ids[None], lay.input_positions[None],
                              m.content_allow[None])
        masked = ids.copy()
        masked[plan.predicted] = 1
        ref = forward_single(tiny_params, tiny_cfg, masked).data
        assert np.max(np.abs(h.data[0] - ref[plan.z])) < 1e-12

    def test_padding_is_invisible(self, tiny_params, tiny_cfg):
        a = np.array([5, 6, 7, 8, 9])
        b = np.array([10, 11, 12])
        batch = np.zeros((2, 5), dtype=np.int64)
        batch[0], batch[1, :3] = a, b
        valid = batch != 0
        h = forward_single(tiny_params, tiny_cfg, batch, valid).data
        assert np.max(np.abs(h[0] - forward_single(tiny_params, tiny_cfg, a).data)) < 1e-12
        assert np.max(np.abs(h[1, :3] - forward_single(tiny_params, tiny_cfg, b).data)) < 1e-12

    def test_single_stream_does_not_read_query_vector(self, tiny_params, tiny_cfg):
        params = {k: v for k, v in tiny_params.items() if k != "query_vec"}
        forward_single(params, tiny_cfg, np.array([5, 6, 7]))

    def test_rel_bias_ablation_equivalence(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
        lay, m = two_stream_inputs(plan, np.array([5, 6, 7, 8, 9, 10]))
        one = dataclasses.replace(tiny_cfg, rel_buckets=1)
        off = dataclasses.replace(tiny_cfg, use_rel_bias=False)
        params = dict(tiny_params)
        params["rel_bias"] = T.Tensor(np.zeros((1, tiny_cfg.heads)), requires_grad=True)
        h1, g1 = run(params, one, lay, m)
        h2, g2 = run(params, off, lay, m)
        np.testing.assert_array_equal(h1.data, h2.data)
        np.testing.assert_array_equal(g1.data, g2.data)

    def test_bias_changes_output(self, tiny_params, tiny_cfg):
        plan = PermutationPlan.from_order([1, 3, 5, 4, 6, 2], c=3)
        lay, m = two_stream_inputs(plan, np.array([5, 6, 7, 8, 9, 10]))
        _, g1 = run(tiny_params, tiny_cfg, lay, m)
        _, g2 = run(tiny_params, dataclasses.replace(tiny_cfg, use_rel_bias=False), lay, m)
        assert np.abs(g1.data - g2.data).max() > 1e-6

    def test_position_out_of_range(self, tiny_params, tiny_cfg):
        with pytest.raises(ValueError):
            forward_single(tiny_params, tiny_cfg, np.full(17, 5))

    def test_dropout_deterministic_given_rng(self, tiny_params, tiny_cfg):
        cfg = dataclasses.replace(tiny_cfg, dropout=0.3)
        ids = np.array([5, 6, 7, 8])
        a = forward_single(tiny_params, cfg, ids, rng=np.random.default_rng(4)).data
        b = forward_single(tiny_params, cfg, ids, rng=np.random.default_rng(4)).data
        c = forward_single(tiny_params, cfg, ids).data
        np.testing.assert_array_equal(a, b)
        assert np.abs(a - c).max() > 1e-6


def test_model_gradients_match_finite_differences(tiny_params, tiny_cfg):
    plan = PermutationPlan.from_order([2, 4, 1, 3, 5], c=2)
    lay, m = two_stream_inputs(plan, np.array([5, 9, 7, 12, 6]))

    def loss():
        _, logits = forward_two_stream(tiny_params, tiny_cfg, lay, m)
        return T.cross_entropy(logits, lay.targets)

    for p in tiny_params.values():
        p.zero_grad()
    loss().backward()
    rng = np.random.default_rng(0)
    eps = 1e-4
    worst = 0.0
    for name, p in tiny_params.items():
        flat = p.data.reshape(-1)
        gflat = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(6, flat.size), replace=False):
            old = flat[i]
            with T.no_grad():
                flat[i] = old + eps
                up = loss().item()
                flat[i] = old - eps
                down = loss().item()
            flat[i] = old
            num = (up - down) / (2 * eps)
            worst = max(worst, abs(num - gflat[i]) / max(abs(num), abs(gflat[i]), 1e-6))
    assert worst < 1e-4
