import csv

import numpy as np
import pytest

from hdr4dgs.checkpoint import decode
from hdr4dgs.cli import main
from hdr4dgs.imageio import read_pfm, read_png

TRAIN_FLAGS = ["--iterations", "4", "--n-init", "30", "--k", "2", "--log-every", "2",
               "--checkpoint-every", "2", "--tone-warmup", "1"]


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_ds")
    code = main(["datagen", "--timesteps", "4", "--cameras", "2", "--size", "16", "--supersample", "1",
                 "--with-hdr", "--out", str(out)])
    assert code == 0
    return out


@pytest.fixture(scope="module")
def checkpoint(dataset_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("cli_run")
    assert main(["train", "--dataset", str(dataset_dir), "--out-dir", str(out), *TRAIN_FLAGS]) == 0
    return out / "final.h4dg"


def same_run(a, b):
    """Equal config hash and arrays; the header also records the output paths, which differ."""
    ha, aa = decode(a.read_bytes())
    hb, ab = decode(b.read_bytes())
    return ha["config_hash"] == hb["config_hash"] and aa.keys() == ab.keys() and all(
        np.array_equal(aa[k], ab[k]) for k in aa)


def read_rows(path):
    with open(path, newline="") as f:
        return list(csv.reader(f))


class TestParser:
    @pytest.mark.parametrize("cmd", ["datagen", "train", "render", "eval", "gradcheck", "bench", "ablate"])
    def test_help(self, cmd, capsys):
        assert main([cmd, "--help"]) == 0
        text = capsys.readouterr().out
        assert "--config" in text and "--seed" in text

    def test_unknown_flag(self, capsys):
        assert main(["train", "--no-such-flag"]) == 2
        assert "unrecognized" in capsys.readouterr().err

    def test_no_command(self):
        assert main([]) == 2

    def test_missing_required(self, tmp_path):
        assert main(["train", "--out-dir", str(tmp_path)]) == 2


class TestDatagen:
    def test_counts_and_outputs(self, dataset_dir):
        assert len(list((dataset_dir / "ldr").glob("*.png"))) == 4 * 2 * 3
        assert len(list((dataset_dir / "hdr").glob("*.pfm"))) == 4 * 2
        assert (dataset_dir / "manifest.json").is_file()

    def test_without_hdr(self, tmp_path):
        assert main(["datagen", "--timesteps", "2", "--cameras", "1", "--size", "12", "--supersample", "1",
                     "--pattern", "monocular", "--no-with-hdr", "--out", str(tmp_path)]) == 0
        assert not list(tmp_path.glob("hdr/*.pfm"))
        assert len(list(tmp_path.glob("ldr/*.png"))) == 2


class TestTrain:
    def test_outputs(self, checkpoint):
        run = checkpoint.parent
        for name in ("final.h4dg", "ckpt_000002.h4dg", "train_log.csv", "train_log.png"):
            assert (run / name).is_file(), name

    def test_config_file(self, dataset_dir, checkpoint, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text('[train]\niterations = 4\nn_init = 30\nk = 2\nlog_every = 2\n'
                       'checkpoint_every = 2\ntone_warmup = 1\n')
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--dataset", str(dataset_dir), "--out-dir", str(out)]) == 0
        # same options through the file as through flags: identical parameters
        assert same_run(out / "final.h4dg", checkpoint)

    def test_flag_overrides_config(self, dataset_dir, checkpoint, tmp_path):
        cfg = tmp_path / "run.toml"
        cfg.write_text("[train]\niterations = 99\n")
        out = tmp_path / "run"
        assert main(["train", "--config", str(cfg), "--dataset", str(dataset_dir), "--out-dir", str(out),
                     *TRAIN_FLAGS]) == 0
        assert same_run(out / "final.h4dg", checkpoint)

    def test_unknown_config_key(self, dataset_dir, tmp_path, capsys):
        cfg = tmp_path / "bad.toml"
        cfg.write_text("[train]\nlearning_speed = 3\n")
        assert main(["train", "--config", str(cfg), "--dataset", str(dataset_dir), "--out-dir", str(tmp_path)]) == 2
        assert "learning_speed" in capsys.readouterr().err

    def test_bad_config_value(self, dataset_dir, tmp_path):
        cfg = tmp_path / "bad.toml"
        cfg.write_text('[train]\ncell_kind = "lstm"\n')
        assert main(["train", "--config", str(cfg), "--dataset", str(dataset_dir), "--out-dir", str(tmp_path)]) == 2
        cfg.write_text('[train]\niterations = "many"\n')
        assert main(["train", "--config", str(cfg), "--dataset", str(dataset_dir), "--out-dir", str(tmp_path)]) == 2

    def test_missing_config_file(self, dataset_dir, tmp_path):
        assert main(["train", "--config", str(tmp_path / "nope.toml"), "--dataset", str(dataset_dir),
                     "--out-dir", str(tmp_path)]) == 3

    def test_missing_dataset(self, tmp_path):
        assert main(["train", "--dataset", str(tmp_path / "absent"), "--out-dir", str(tmp_path)]) == 3


class TestRender:
    def test_frame_by_index(self, checkpoint, dataset_dir, tmp_path):
        assert main(["render", "--checkpoint", str(checkpoint), "--dataset", str(dataset_dir),
                     "--frame", "0", "--out", str(tmp_path)]) == 0
        names = sorted(p.name for p in tmp_path.iterdir())
        assert len(names) == 3
        hdr = read_pfm(next(tmp_path.glob("*_hdr.pfm")))
        ldr = read_png(next(tmp_path.glob("*_ldr.png")))
        assert hdr.shape == ldr.shape == (16, 16, 3)
        assert np.all(hdr >= 0)

    def test_repeatable(self, checkpoint, dataset_dir, tmp_path):
        for d in ("a", "b"):
            assert main(["render", "--checkpoint", str(checkpoint), "--dataset", str(dataset_dir),
                         "--frame", "1", "--out", str(tmp_path / d)]) == 0
        for p in (tmp_path / "a").iterdir():
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_t_clamped(self, checkpoint, dataset_dir, tmp_path, caplog):
        cam = ('{"rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0,0,4], '
               '"fx": 20, "fy": 20, "cx": 8, "cy": 8, "width": 16, "height": 16}')
        for t, d in (("1.7", "hi"), ("1.0", "one")):
            assert main(["render", "--checkpoint", str(checkpoint), "--camera", cam, "--t", t,
                         "--exposure", "2.0", "--out", str(tmp_path / d)]) == 0
        assert "clamped" in caplog.text
        for p in (tmp_path / "one").iterdir():
            assert p.read_bytes() == (tmp_path / "hi" / p.name).read_bytes()

    def test_all_test(self, checkpoint, dataset_dir, tmp_path):
        from hdr4dgs.datagen import Manifest
        n_test = len(Manifest.load(dataset_dir).records("test"))
        assert main(["render", "--checkpoint", str(checkpoint), "--dataset", str(dataset_dir),
                     "--all-test", "--mode", "ldr", "--out", str(tmp_path)]) == 0
        assert len(list(tmp_path.glob("*_ldr.png"))) == n_test
        assert not list(tmp_path.glob("*.pfm"))

    def test_ldr_needs_exposure(self, checkpoint, tmp_path):
        cam = ('{"rotation": [[1,0,0],[0,1,0],[0,0,1]], "translation": [0,0,4], '
               '"fx": 20, "fy": 20, "cx": 8, "cy": 8, "width": 16, "height": 16}')
        assert main(["render", "--checkpoint", str(checkpoint), "--camera", cam, "--t", "0.5",
                     "--out", str(tmp_path)]) == 2

    def test_bad_checkpoint(self, tmp_path):
        bad = tmp_path / "x.h4dg"
        bad.write_bytes(b"garbage")
        assert main(["render", "--checkpoint", str(bad), "--frame", "0", "--out", str(tmp_path)]) == 3


class TestEval:
    def test_outputs(self, checkpoint, dataset_dir, tmp_path, capsys):
        assert main(["eval", "--checkpoint", str(checkpoint), "--dataset", str(dataset_dir),
                     "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "metrics.csv")
        assert rows[0] == ["scene", "frame", "domain", "psnr", "ssim"]
        assert {r[2] for r in rows[1:]} == {"ldr", "hdr_mu"}
        summary = dict(read_rows(tmp_path / "summary.csv")[1:])
        assert {"frames", "fps", "ldr_psnr", "hdr_mu_psnr"} <= set(summary)
        assert (tmp_path / "metrics.png").stat().st_size > 0
        assert "LDR PSNR" in capsys.readouterr().out


class TestGradcheck:
    def test_quick_passes(self, capsys):
        assert main(["gradcheck", "--preset", "quick"]) == 0
        assert "gradcheck passed" in capsys.readouterr().out

    def test_wrong_sign_detected(self, capsys):
        assert main(["gradcheck", "--preset", "quick", "--inject-wrong-sign", "opacity"]) == 1
        out = capsys.readouterr().out
        assert "FAILED" in out and "opacity" in out.split("FAILED")[-1]

    def test_unknown_group(self):
        assert main(["gradcheck", "--preset", "quick", "--inject-wrong-sign", "colour"]) == 2


class TestBench:
    def test_outputs(self, checkpoint, dataset_dir, tmp_path, capsys):
        assert main(["bench", "--checkpoint", str(checkpoint), "--dataset", str(dataset_dir),
                     "--thread-counts", "1", "2", "--out", str(tmp_path)]) == 0
        rows = read_rows(tmp_path / "bench.csv")
        header = rows[0]
        assert [r[header.index("threads")] for r in rows[1:]] == ["1", "2"]
        assert all(r[header.index("width")] == "16" and r[header.index("gaussians")] == "30" for r in rows[1:])
        assert (tmp_path / "bench.png").is_file()
        assert "identical" in capsys.readouterr().out

    def test_too_few_frames(self, checkpoint):
        assert main(["bench", "--checkpoint", str(checkpoint), "--frames", "5"]) == 2


class TestAblate:
    def test_k_values(self, dataset_dir, tmp_path):
        assert main(["ablate", "--dataset", str(dataset_dir), "--out-dir", str(tmp_path), "--axis", "k",
                     "--values", "2", "3", *TRAIN_FLAGS[:2], "--n-init", "20"]) == 0
        rows = read_rows(tmp_path / "ablation_k.csv")
        assert [r[1] for r in rows[1:]] == ["2", "3"]
        assert (tmp_path / "ablation_k.png").is_file()
