import csv

import numpy as np
import pytest

from hdr4dgs import trainer as tr
from hdr4dgs.checkpoint import MAGIC, decode
from hdr4dgs.datagen import load_hdr, load_ldr
from hdr4dgs.errors import CheckpointError, ContractViolation, NonFiniteGradient
from hdr4dgs.trainer import (
    ABLATION_AXES,
    LOG_HEADER,
    AdamMoments,
    TrainConfig,
    ablate,
    adam_step,
    apply_grads,
    compute_grads,
    evaluate,
    group_of,
    init_state,
    learning_rate,
    load_checkpoint,
    load_config_file,
    save_checkpoint,
    train,
    warm_bank,
)

GROUPS = {"position", "scaling", "rotation", "opacity", "sh", "tone_curves", "drcl"}


def tiny_config(**kw):
    base = dict(iterations=6, n_init=40, k=3, log_every=2, checkpoint_every=3, tone_warmup=2)
    base.update(kw)
    return TrainConfig(**base)


class TestAdam:
    def test_zero_gradient(self):
        mom = AdamMoments(np.full(3, 0.5), np.full(3, 0.2), 4)
        p = np.array([1.0, -2.0, 3.0])
        out = adam_step(p, np.zeros(3), mom, 0.1, eps=0.0)
        np.testing.assert_allclose(mom.m, 0.45)
        np.testing.assert_allclose(mom.v, 0.2 * 0.999)
        # moments are non-zero so the parameter still moves; with fresh moments it would not
        fresh = AdamMoments.like(p)
        np.testing.assert_array_equal(adam_step(p, np.zeros(3), fresh, 0.1), p)
        assert out.shape == p.shape

    def test_first_step_is_sign(self):
        g = np.array([3.0, -0.01, 1e-5])
        out = adam_step(np.zeros(3), g, AdamMoments.like(g), 0.01, eps=0.0)
        np.testing.assert_allclose(out, -0.01 * np.sign(g), rtol=1e-12)

    def test_quadratic(self):
        x = np.array([1.0])
        mom = AdamMoments.like(x)
        for _ in range(100):
            x = adam_step(x, 2 * x, mom, 0.1)
        assert abs(x[0]) < 0.05

    def test_non_finite(self):
        mom = AdamMoments.like(np.zeros(2))
        with pytest.raises(NonFiniteGradient):
            adam_step(np.zeros(2), np.array([np.nan, 0.0]), mom, 0.1)
        assert mom.step == 0

    def test_shape_mismatch(self):
        with pytest.raises(ContractViolation):
            adam_step(np.zeros(2), np.zeros(3), AdamMoments.like(np.zeros(2)), 0.1)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert (c.lr_tone, c.lambda_dssim, c.alpha_hdr, c.k, c.context_dim) == (5e-4, 0.2, 0.6, 20, 2)
        assert (c.beta1, c.beta2, c.eps) == (0.9, 0.999, 1e-15)
        assert c.pixel_level and c.cell_kind == "gru" and c.n_init == 2000

    def test_unknown_key(self):
        with pytest.raises(ContractViolation):
            TrainConfig.from_dict({"iterations": 3, "lr_bogus": 1.0})

    def test_invalid_values(self):
        for kw in ({"iterations": 0}, {"lr_sh": 0.0}, {"cell_kind": "lstm"}, {"supervision": "hdr"},
                   {"lambda_dssim": 1.5}):
            with pytest.raises(ContractViolation):
                TrainConfig(**kw)

    def test_hash_ignores_paths(self):
        a = TrainConfig(out_dir="a", dataset="x")
        assert a.hash() == TrainConfig().hash()
        assert a.hash() != TrainConfig(seed=1).hash()

    def test_toml_file(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[train]\niterations = 7\ncell_kind = "rnn"\npixel_level = false\n')
        cfg = TrainConfig.from_dict(load_config_file(p))
        assert (cfg.iterations, cfg.cell_kind, cfg.pixel_level) == (7, "rnn", False)

    def test_alpha_follows_supervision(self):
        assert TrainConfig(supervision="ldr").effective_alpha == 0.0
        assert TrainConfig(supervision="ldr+hdr").effective_alpha == 0.6

    def test_position_lr_decays(self):
        c = TrainConfig(iterations=100)
        assert learning_rate(c, "position", 0, 2.0) == pytest.approx(1.6e-4 * 2.0)
        assert learning_rate(c, "position", 100, 2.0) == pytest.approx(1.6e-6 * 2.0)
        assert learning_rate(c, "opacity", 50, 2.0) == 5e-2


class TestStep:
    def test_every_group_gets_gradient(self, tiny_dataset):
        state = init_state(tiny_config(), tiny_dataset)
        warm_bank(state)
        rec = tiny_dataset.records("train")[1]
        _, _, grads = compute_grads(state, rec, load_ldr(rec))
        seen = {g: False for g in GROUPS}
        for name, g in grads.items():
            seen[group_of(name)] |= bool(np.any(g != 0))
        assert all(seen.values()), seen
        assert {group_of(n) for n in state.param_names()} == GROUPS

    def test_nan_gradient_skips_step(self, tiny_dataset):
        state = init_state(tiny_config(), tiny_dataset)
        warm_bank(state)
        rec = tiny_dataset.records("train")[0]
        _, _, grads = compute_grads(state, rec, load_ldr(rec))
        grads["cloud.mean4"][0, 0] = np.nan
        before = {n: state.get(n).copy() for n in state.param_names()}
        assert apply_grads(state, grads) is False
        assert state.skipped == 1
        for n in state.param_names():
            np.testing.assert_array_equal(state.get(n), before[n])

    def test_nan_during_training_is_counted(self, tiny_dataset):
        def hook(it, grads):
            if it == 3:
                grads["tone.curves.W1"][...] = np.inf

        res = train(tiny_dataset, tiny_config(), grad_hook=hook)
        assert res.state.skipped == 1
        assert all(np.all(np.isfinite(res.state.get(n))) for n in res.state.param_names())

    def test_tone_frozen_during_warmup(self, tiny_dataset):
        cfg = tiny_config(iterations=3, tone_warmup=10)
        fresh = init_state(cfg, tiny_dataset)
        res = train(tiny_dataset, cfg)
        for n in res.state.param_names():
            if n.startswith("tone."):
                np.testing.assert_array_equal(res.state.get(n), fresh.get(n))


class TestTrain:
    def test_outputs_and_determinism(self, tiny_dataset, tmp_path):
        a = train(tiny_dataset, tiny_config(), out_dir=tmp_path / "a")
        b = train(tiny_dataset, tiny_config(), out_dir=tmp_path / "b")
        for name in ("final.h4dg", "ckpt_000003.h4dg", "ckpt_000006.h4dg", "train_log.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        with open(tmp_path / "a" / "train_log.csv") as f:
            rows = list(csv.reader(f))
        assert tuple(rows[0]) == LOG_HEADER
        assert [int(r[0]) for r in rows[1:]] == [2, 4, 6]
        assert a.log_rows == b.log_rows

    def test_ldr_only_never_reads_hdr(self, tiny_dataset, monkeypatch):
        def boom(rec):
            raise AssertionError("HDR ground truth was read")

        monkeypatch.setattr(tr, "load_hdr", boom)
        res = train(tiny_dataset, tiny_config(supervision="ldr"))
        assert res.state.iteration == 6

    def test_ldr_hdr_reads_hdr(self, tiny_dataset, monkeypatch):
        calls = []

        def spy(rec):
            calls.append(rec)
            return load_hdr(rec)

        monkeypatch.setattr(tr, "load_hdr", spy)
        res = train(tiny_dataset, tiny_config(supervision="ldr+hdr"))
        assert calls
        assert any(r[3] > 0 for r in res.log_rows)

    def test_loss_decreases(self, tiny_dataset):
        res = train(tiny_dataset, tiny_config(iterations=120, log_every=20, n_init=200))
        assert res.log_rows[-1][1] < res.log_rows[0][1]


class TestCheckpoint:
    def test_round_trip_bytes(self, tiny_dataset, tmp_path):
        res = train(tiny_dataset, tiny_config(), out_dir=tmp_path)
        blob = (tmp_path / "final.h4dg").read_bytes()
        assert blob.startswith(MAGIC)
        state = load_checkpoint(tmp_path / "final.h4dg")
        again = save_checkpoint(tmp_path / "again.h4dg", state)
        assert again == blob
        header, arrays = decode(blob)
        assert header["iteration"] == 6 and header["seed"] == 0
        assert header["config_hash"] == res.state.config.hash()
        assert all(a.dtype == np.float32 for a in arrays.values())
        assert set(header["adam_steps"]) == set(res.state.param_names())

    def test_corrupt(self, tmp_path):
        p = tmp_path / "bad.h4dg"
        p.write_bytes(b"NOTACKPT" + b"\0" * 8)
        with pytest.raises(CheckpointError):
            load_checkpoint(p)
        p.write_bytes(MAGIC + (10**6).to_bytes(8, "little") + b"{}")
        with pytest.raises(CheckpointError):
            load_checkpoint(p)


class TestEvaluate:
    def test_schema_and_determinism(self, tiny_dataset):
        state = train(tiny_dataset, tiny_config()).state
        a = evaluate(state, tiny_dataset)
        b = evaluate(state, tiny_dataset)
        n_test = len(tiny_dataset.records("test"))
        assert len(a.rows) == 2 * n_test
        assert {r[2] for r in a.rows} == {"ldr", "hdr_mu"}
        assert a.rows == b.rows
        assert a.summary["frames"] == n_test and a.summary["fps"] > 0

    def test_ground_truth_against_itself(self, tiny_dataset, monkeypatch):
        state = init_state(tiny_config(), tiny_dataset)
        warm_bank(state)
        monkeypatch.setattr(tr, "render_record", lambda st, rec, settings=None: (load_hdr(rec), load_ldr(rec)))
        ev = evaluate(state, tiny_dataset)
        assert all(r[3] == 100.0 for r in ev.rows)
        assert all(r[4] == pytest.approx(1.0, abs=1e-12) for r in ev.rows)


class TestAblate:
    def test_k_grid(self, tiny_dataset):
        rows = ablate(tiny_dataset, tiny_config(iterations=2), "k")
        assert [r[1] for r in rows] == ["5", "10", "20", "30"]
        assert len({r[3] for r in rows}) == 1 and len({r[2] for r in rows}) == 1

    def test_pixel_level_grid(self, tiny_dataset):
        rows = ablate(tiny_dataset, tiny_config(iterations=2), "pixel_level")
        assert [r[1] for r in rows] == ["on", "off"]

    def test_axes(self):
        assert ABLATION_AXES["cell_kind"] == ("gru", "rnn")
        assert ABLATION_AXES["k"] == (5, 10, 20, 30)

    def test_unknown_axis(self, tiny_dataset):
        with pytest.raises(ContractViolation):
            ablate(tiny_dataset, tiny_config(iterations=1), "width")
