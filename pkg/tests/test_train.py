import math

import numpy as np
import pytest

from nanoglm.adapters import init_lora, init_prefix
from nanoglm.errors import DegenerateExampleError, DimensionError
from nanoglm.model import ModelConfig, forward, init_model
from nanoglm.rng import Rng
from nanoglm.tensor import Precision
from nanoglm.train import (
    OptimizerState,
    TrainConfig,
    _tape_forward,
    build_qa_tokens,
    detect_degenerate,
    init_optimizer,
    lion_step,
    masked_ce,
    qa_loss,
    run_probes,
    sequence_repetition_ratio,
    train,
)


def randomize_b(adapter, seed=5, std=0.05):
    rng = Rng(seed)
    for piece in adapter.pieces.values():
        piece.b[:] = rng.normal_matrix(piece.b.shape, std).astype(piece.b.dtype)
    return adapter


def fd_check(bundle, adapter, q, a, samples_per_tensor=4, h=1e-5):
    """Central finite differences on a subsample of adapter entries."""
    loss, grads = qa_loss(bundle, adapter, q, a)
    worst = 0.0
    for key, arr in adapter.params().items():
        flat = arr.reshape(-1)
        idxs = np.linspace(0, flat.size - 1, min(samples_per_tensor, flat.size)).astype(int)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = qa_loss(bundle, adapter, q, a, need_grads=False)
            flat[i] = orig - h
            lm, _ = qa_loss(bundle, adapter, q, a, need_grads=False)
            flat[i] = orig
            fd = (lp - lm) / (2 * h)
            an = grads[key].reshape(-1)[i]
            worst = max(worst, abs(an - fd) / max(abs(an), abs(fd), 1e-8))
    return worst


class TestMaskedCe:
    def test_uniform_logits_give_log_vocab(self):
        v = 260
        logits = np.zeros((6, v))
        positions = np.array([2, 3, 4])
        targets = np.array([7, 8, 9])
        loss, _ = masked_ce(logits, positions, targets)
        assert loss == pytest.approx(math.log(v), abs=1e-9)

    def test_certain_model_gives_zero_loss(self):
        logits = np.zeros((4, 10))
        targets = np.array([1, 2])
        positions = np.array([1, 2])
        logits[positions, targets] = 1000.0
        loss, _ = masked_ce(logits, positions, targets)
        assert loss == 0.0

    def test_question_positions_do_not_contribute(self, tiny_bundle):
        tok = tiny_bundle.tokenizer
        q, a = tok.encode("question"), tok.encode("yes")
        inputs, positions, targets = build_qa_tokens(tiny_bundle, q, a)
        assert len(positions) == len(a) + 1  # answer tokens plus EOS
        assert positions[0] == 1 + len(q)  # first scored input is the SEP position
        assert list(targets[:-1]) == a and targets[-1] == tok.eos_id

    def test_empty_answer_rejected(self, tiny_bundle):
        with pytest.raises(DegenerateExampleError):
            qa_loss(tiny_bundle, None, tiny_bundle.tokenizer.encode("q"), [])

    def test_long_answer_truncated_with_warning(self, tiny_bundle, caplog):
        tok = tiny_bundle.tokenizer
        with caplog.at_level("WARNING"):
            inputs, positions, targets = build_qa_tokens(
                tiny_bundle, tok.encode("q"), tok.encode("x" * 50), max_seq_len=64, max_target_len=10)
        assert "truncated" in caplog.text
        assert len(positions) == 11

    def test_tape_forward_matches_model_forward(self, tiny_bundle, np_rng):
        lora = randomize_b(init_lora(tiny_bundle.config, rank=2, alpha=4.0, seed=2))
        prefix = init_prefix(tiny_bundle.config, prefix_len=2, seed=3)
        toks = [int(x) for x in np_rng.integers(4, 260, size=9)]
        logits, _ = _tape_forward(tiny_bundle, lora, prefix, toks)
        reference = forward(tiny_bundle, toks, (lora, prefix)).a
        assert np.abs(logits[-1] - reference).max() <= 1e-5


@pytest.fixture(scope="module")
def f64_setup():
    cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, max_seq_len=64)
    bundle = init_model(cfg, seed=21).astype(Precision.F64)
    return cfg, bundle


@pytest.fixture(scope="module")
def small_corpus():
    return [("hi", "yes"), ("好吗", "好"), ("ok?", "ok"), ("tea?", "no"),
            ("run?", "yes"), ("睡吗", "睡"), ("eat?", "sure"), ("cold?", "warm")]


class TestGradients:
    def test_lora_gradients_match_finite_differences(self, f64_setup):
        cfg, bundle = f64_setup
        lora = randomize_b(init_lora(cfg, rank=2, alpha=4.0, seed=1)).astype(Precision.F64)
        tok = bundle.tokenizer
        worst = fd_check(bundle, lora, tok.encode("头疼怎么办"), tok.encode("多休息"))
        assert worst <= 1e-4

    def test_prefix_gradients_match_finite_differences(self, f64_setup):
        cfg, bundle = f64_setup
        prefix = init_prefix(cfg, prefix_len=2, seed=2).astype(Precision.F64)
        tok = bundle.tokenizer
        worst = fd_check(bundle, prefix, tok.encode("tired?"), tok.encode("rest"))
        assert worst <= 1e-4


class TestRecipeDefaults:
    def test_train_config_matches_recipe(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 4
        assert cfg.learning_rate == 2e-5
        assert cfg.epochs == 1
        assert cfg.max_seq_len == 512
        assert cfg.max_target_len == 100
        assert cfg.warmup_steps == 0
        assert cfg.weight_decay == 0.0
        assert (cfg.lion_beta1, cfg.lion_beta2) == (0.9, 0.99)

    def test_lora_defaults_match_recipe(self, tiny_config):
        lora = init_lora(tiny_config)
        assert lora.rank == 8
        assert lora.alpha == 16.0
        assert lora.targets == ("q", "v")


class TestLion:
    def _config(self, **kw):
        defaults = dict(learning_rate=0.1, lion_beta1=0.9, lion_beta2=0.99, weight_decay=0.0)
        defaults.update(kw)
        return TrainConfig(**defaults)

    def test_positive_gradient_steps_down_by_lr(self):
        params = {"w": np.full((3,), 1.0)}
        grads = {"w": np.array([0.5, 2.0, 0.01])}
        state = init_optimizer(params)
        lion_step(params, grads, state, self._config())
        np.testing.assert_allclose(params["w"], 0.9, atol=1e-7)

    def test_zero_gradient_is_fixed_point(self):
        params = {"w": np.array([1.0, -2.0])}
        state = init_optimizer(params)
        lion_step(params, {"w": np.zeros(2)}, state, self._config())
        np.testing.assert_array_equal(params["w"], [1.0, -2.0])
        np.testing.assert_array_equal(state.m["w"], [0.0, 0.0])

    def test_sign_antisymmetry(self, np_rng):
        g = np_rng.normal(size=(4,))
        m = np_rng.normal(size=(4,))
        p1 = {"w": np.zeros(4)}
        s1 = OptimizerState(m={"w": m.copy()})
        lion_step(p1, {"w": g.copy()}, s1, self._config())
        p2 = {"w": np.zeros(4)}
        s2 = OptimizerState(m={"w": -m.copy()})
        lion_step(p2, {"w": -g.copy()}, s2, self._config())
        np.testing.assert_allclose(p2["w"], -p1["w"], atol=1e-12)
        np.testing.assert_allclose(s2.m["w"], -s1.m["w"], atol=1e-12)

    def test_momentum_update_rule(self):
        params = {"w": np.zeros(1)}
        grads = {"w": np.array([2.0])}
        state = init_optimizer(params)
        lion_step(params, grads, state, self._config())
        assert state.m["w"][0] == pytest.approx(0.02)  # (1 - 0.99) * 2

    def test_weight_decay_term(self):
        config = self._config(weight_decay=0.5)
        params = {"w": np.array([1.0])}
        state = init_optimizer(params)
        lion_step(params, {"w": np.array([1.0])}, state, config)
        # update = sign(0.1*1) + 0.5*1 = 1.5; p = 1 - 0.1*1.5
        assert params["w"][0] == pytest.approx(0.85)

    def test_shape_mismatch(self):
        params = {"w": np.zeros(2)}
        state = init_optimizer(params)
        with pytest.raises(DimensionError):
            lion_step(params, {"w": np.zeros(3)}, state, self._config())


class TestDegenerateDetection:
    def test_short_sequence_ratio_zero_but_length_flagged(self):
        report = detect_degenerate([[1, 2, 3]])
        assert report.per_text == [0.0]
        assert report.degenerate  # mean length 3 < 8

    def test_repeated_phrase_ratio(self):
        seq = "A B C D".split() * 10
        ratio = sequence_repetition_ratio(seq)
        # 37 4-grams, 4 distinct under the repeating cycle.
        assert ratio == pytest.approx(1 - 4 / 37)
        report = detect_degenerate([seq])
        assert report.degenerate and report.repetition_ratio > 0.85

    def test_distinct_long_sequence_not_flagged(self):
        report = detect_degenerate([list(range(40))])
        assert not report.degenerate
        assert report.repetition_ratio == 0.0

    def test_single_repeated_token_flagged(self):
        report = detect_degenerate([[7] * 30])
        assert report.degenerate
        assert report.per_text[0] == pytest.approx(1 - 1 / 27)


class TestTrainLoop:
    def test_probe_schedule(self, tiny_bundle, small_corpus, tmp_path):
        lora = init_lora(tiny_bundle.config, rank=2, seed=0)
        config = TrainConfig(batch_size=2, learning_rate=1e-3, probe_interval=5, seed=0, max_steps=20)
        result = train(tiny_bundle, lora, small_corpus, config, out_dir=tmp_path)
        assert [r.step for r in result.reports] == [5, 10, 15, 20]
        assert [p.name for p in result.checkpoints] == [
            "ckpt-000005.ngla", "ckpt-000010.ngla", "ckpt-000015.ngla", "ckpt-000020.ngla"]
        assert (tmp_path / "probes.jsonl").read_text(encoding="utf-8").count("\n") == 4

    def test_two_probe_prompts_by_default(self, tiny_bundle, small_corpus):
        lora = init_lora(tiny_bundle.config, rank=2, seed=0)
        config = TrainConfig(batch_size=2, learning_rate=1e-3, probe_interval=4, seed=0, max_steps=4)
        result = train(tiny_bundle, lora, small_corpus, config)
        assert len(result.reports[0].outputs) == 2

    def test_base_weights_untouched(self, tiny_bundle, small_corpus):
        before = tiny_bundle.weight_fingerprint()
        lora = init_lora(tiny_bundle.config, rank=2, seed=0)
        config = TrainConfig(batch_size=2, learning_rate=1e-3, probe_interval=10, seed=0, max_steps=10)
        train(tiny_bundle, lora, small_corpus, config)
        assert tiny_bundle.weight_fingerprint() == before

    def test_seeded_determinism(self, tiny_bundle, small_corpus):
        outs = []
        for _ in range(2):
            lora = init_lora(tiny_bundle.config, rank=2, seed=7)
            config = TrainConfig(batch_size=2, learning_rate=1e-3, probe_interval=10, seed=3, max_steps=10)
            train(tiny_bundle, lora, small_corpus, config)
            outs.append({k: v.copy() for k, v in lora.params().items()})
        for key in outs[0]:
            assert np.array_equal(outs[0][key], outs[1][key])

    def test_nan_loss_aborts_and_restores(self, tiny_bundle, small_corpus, tmp_path, monkeypatch):
        import nanoglm.train as train_mod

        real_qa_loss = train_mod.qa_loss
        calls = {"n": 0}

        def flaky(*args, **kwargs):
            calls["n"] += 1
            if calls["n"] > 12:  # poison after the first checkpoint (5 steps x 2 pairs)
                return float("nan"), {k: np.zeros_like(v) for k, v in lora.params().items()}
            return real_qa_loss(*args, **kwargs)

        lora = init_lora(tiny_bundle.config, rank=2, seed=0)
        monkeypatch.setattr(train_mod, "qa_loss", flaky)
        config = TrainConfig(batch_size=2, learning_rate=1e-3, probe_interval=5, seed=0, max_steps=50)
        result = train(tiny_bundle, lora, small_corpus, config, out_dir=tmp_path)
        assert result.aborted
        assert result.checkpoints, "checkpoint before the poison step is retained"
        from nanoglm.adapters import load_adapter

        good = load_adapter(result.checkpoints[-1])
        for key, arr in lora.params().items():
            assert np.array_equal(arr, good.params()[key])

    def test_empty_corpus_rejected(self, tiny_bundle):
        lora = init_lora(tiny_bundle.config, rank=2, seed=0)
        with pytest.raises(Exception):
            train(tiny_bundle, lora, [], TrainConfig(max_steps=1))


class TestProbeHarness:
    def test_scripted_degenerate_checkpoint_flags(self, tiny_bundle):
        def degenerate_gen(bundle, adapter, prompt):
            return [100]  # single-token output

        report = run_probes(tiny_bundle, None, ("p1", "p2"), step=1, generate_fn=degenerate_gen)
        assert report.degenerate

    def test_repetitive_checkpoint_flags(self, tiny_bundle):
        def repeat_gen(bundle, adapter, prompt):
            return [100] * 30

        report = run_probes(tiny_bundle, None, ("p1", "p2"), step=1, generate_fn=repeat_gen)
        assert report.degenerate and report.repetition_ratio > 0.9

    def test_healthy_checkpoint_not_flagged(self, tiny_bundle):
        def healthy_gen(bundle, adapter, prompt):
            return list(range(4, 44))

        report = run_probes(tiny_bundle, None, ("p1", "p2"), step=1, generate_fn=healthy_gen)
        assert not report.degenerate
        assert report.mean_output_length == 40
