import csv
import json

import numpy as np
import pytest

from sparsemae.cli import EXIT_CHECK, EXIT_CONFIG, EXIT_OK, main
from sparsemae.numerics import aft1
from sparsemae.pipeline import tiny_config


def read_csv(path):
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# manifest ")
    return lines[0].split()[-1], list(csv.DictReader(lines[1:]))


def manifest(out):
    return json.loads((out / "manifest.json").read_text())


@pytest.fixture(scope="module")
def tiny_ini(tmp_path_factory):
    p = tmp_path_factory.mktemp("cfg") / "tiny.ini"
    p.write_text(tiny_config(rank_every=0, warmup_steps=2).to_ini())
    return p


@pytest.fixture(scope="module")
def trained(tmp_path_factory, tiny_ini):
    out = tmp_path_factory.mktemp("train")
    assert main(["train-toy", "--config", str(tiny_ini), "--steps", "3", "--log-every", "0", "--out", str(out)]) == EXIT_OK
    return out


class TestManifest:
    def test_written_with_hash(self, tmp_path):
        assert main(["probe", "--trials", "5", "--out", str(tmp_path)]) == EXIT_OK
        man = manifest(tmp_path)
        assert man["subcommand"] == "probe" and man["seed"] == 0
        assert "probe.csv" in man["outputs"]
        digest, _ = read_csv(tmp_path / "probe.csv")
        assert digest == man["hash"]

    def test_rerun_bit_identical(self, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            assert main(["mask-gen", "--grid", "16", "--count", "3", "--previews", "1", "--out", str(out)]) == EXIT_OK
        for name in ("masks.aft1", "mask_counts.csv", "mask_000.pgm"):
            assert (a / name).read_bytes() == (b / name).read_bytes()

    def test_seed_changes_hash(self, tmp_path):
        main(["probe", "--trials", "3", "--out", str(tmp_path / "a")])
        main(["probe", "--trials", "3", "--seed", "1", "--out", str(tmp_path / "b")])
        assert manifest(tmp_path / "a")["hash"] != manifest(tmp_path / "b")["hash"]

    def test_out_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("SPARSEMAE_OUT", str(tmp_path / "env"))
        assert main(["probe", "--trials", "2"]) == EXIT_OK
        assert (tmp_path / "env" / "manifest.json").is_file()


class TestBenchAttn:
    def test_both_rows_within_tolerance(self, tmp_path):
        assert main(["bench-attn", "--n", "256", "--m", "32", "--reps", "1", "--out", str(tmp_path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "bench_attn.csv")
        assert list(rows[0])[:6] == ["N", "M", "impl", "wall_ns", "flops", "max_abs_err_vs_naive"]
        assert [r["impl"] for r in rows] == ["naive", "streaming"]
        assert float(rows[1]["max_abs_err_vs_naive"]) <= 1e-5

    def test_half_io_row(self, tmp_path):
        assert main(["bench-attn", "--n", "32", "--m", "8", "--reps", "1", "--half-io", "--out", str(tmp_path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "bench_attn.csv")
        assert [r["half_io"] for r in rows] == ["False", "False", "True"]

    @pytest.mark.parametrize("flags", [["--n", "0"], ["--n", "8", "--m", "9"], ["--reps", "0"]])
    def test_invalid_sizes(self, tmp_path, flags):
        assert main(["bench-attn", *flags, "--out", str(tmp_path)]) == EXIT_CONFIG


class TestMaskGen:
    def test_perlin_half_of_64(self, tmp_path):
        assert main(["mask-gen", "--count", "4", "--previews", "2", "--out", str(tmp_path)]) == EXIT_OK
        masks = aft1.load(tmp_path / "masks.aft1")
        assert masks.shape == (4, 64, 64) and masks.dtype == np.uint8
        assert np.all(masks.reshape(4, -1).sum(1) == 2048)
        _, rows = read_csv(tmp_path / "mask_counts.csv")
        assert {r["masked"] for r in rows} == {"2048"}
        assert (tmp_path / "mask_001.pgm").is_file() and not (tmp_path / "mask_002.pgm").exists()

    @pytest.mark.parametrize("ratio", ["1.0", "-0.2"])
    def test_bad_ratio(self, tmp_path, ratio):
        assert main(["mask-gen", "--ratio", ratio, "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_bad_size(self, tmp_path):
        assert main(["mask-gen", "--grid", "0", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestPsd:
    def test_generated(self, tmp_path):
        assert main(["psd", "--samples", "64", "--out", str(tmp_path)]) == EXIT_OK
        _, slopes = read_csv(tmp_path / "slopes.csv")
        get = {(r["strategy"], r["band"]): float(r["slope"]) for r in slopes}
        assert get[("perlin", "mid")] < get[("random", "mid")]
        _, prof = read_csv(tmp_path / "psd_perlin.csv")
        assert list(prof[0]) == ["f", "psd", "n_f"]

    def test_zero_ratio_dc_only(self, tmp_path):
        assert main(["psd", "--ratio", "0", "--samples", "4", "--grid", "16", "--strategies", "random",
                     "--out", str(tmp_path)]) == EXIT_OK
        _, prof = read_csv(tmp_path / "psd_random.csv")
        power = np.array([float(r["psd"]) for r in prof])
        assert power[0] > 0 and np.all(power[1:] == 0)

    def test_reads_mask_gen_outputs(self, tmp_path):
        gen = tmp_path / "gen"
        main(["mask-gen", "--grid", "32", "--count", "8", "--previews", "1", "--preview-scale", "1", "--out", str(gen)])
        assert main(["psd", "--input", f"perlin={gen / 'masks.aft1'}", "--input", str(gen / "mask_000.pgm"),
                     "--mid-band", "2", "8", "--high-band", "8", "16", "--out", str(tmp_path / "psd")]) == EXIT_OK
        assert (tmp_path / "psd" / "psd_perlin.csv").is_file()
        assert (tmp_path / "psd" / "psd_mask_000.csv").is_file()

    def test_file_matches_generated(self, tmp_path):
        gen = tmp_path / "gen"
        main(["mask-gen", "--grid", "32", "--count", "8", "--previews", "0", "--out", str(gen)])
        main(["psd", "--input", f"perlin={gen / 'masks.aft1'}", "--out", str(tmp_path / "a")])
        main(["psd", "--strategies", "perlin", "--grid", "32", "--samples", "8", "--out", str(tmp_path / "b")])
        assert read_csv(tmp_path / "a" / "psd_perlin.csv")[1] == read_csv(tmp_path / "b" / "psd_perlin.csv")[1]

    def test_missing_input(self, tmp_path):
        assert main(["psd", "--input", str(tmp_path / "nope.aft1"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_non_power_of_two(self, tmp_path):
        assert main(["psd", "--grid", "12", "--samples", "2", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_check_fails_on_white_masks(self, tmp_path):
        # random masks under the perlin label have a flat mid band
        gen = tmp_path / "gen"
        main(["mask-gen", "--strategy", "random", "--count", "16", "--previews", "0", "--out", str(gen)])
        assert main(["psd", "--input", f"perlin={gen / 'masks.aft1'}", "--check", "--out", str(tmp_path / "psd")]) == EXIT_CHECK


class TestTrainAndCheckpoints:
    def test_train_outputs(self, trained):
        man = manifest(trained)
        assert set(man["outputs"]) >= {"config.ini", "metrics.csv", "checkpoint"}
        _, rows = read_csv(trained / "metrics.csv")
        assert len(rows) == 3 and "aux_loss" in rows[0]
        assert (trained / "checkpoint" / "manifest.txt").is_file()

    def test_bad_config_key(self, tmp_path):
        assert main(["train-toy", "--set", "nonsense=1", "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_missing_config_file(self, tmp_path):
        assert main(["train-toy", "--config", str(tmp_path / "x.ini"), "--out", str(tmp_path)]) == EXIT_CONFIG

    def test_viz_tokens_one_pixmap_per_stage(self, trained, tmp_path):
        assert main(["viz-tokens", "--checkpoint", str(trained / "checkpoint"), "--out", str(tmp_path)]) == EXIT_OK
        stages = len(tiny_config().stages)
        assert sorted(p.name for p in tmp_path.glob("*.ppm")) == [f"tokens_stage{i}.ppm" for i in range(stages)]

    def test_diag_rank(self, trained, tmp_path):
        ck = str(trained / "checkpoint")
        assert main(["diag-rank", "--checkpoint", ck, "--images", "2", "--out", str(tmp_path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "rank.csv")
        assert [int(r["stage"]) for r in rows] == [0, 1]
        assert all(0 < float(r["r_hat"]) <= 1 for r in rows)
        maps = sorted(p.name for p in tmp_path.glob("pca_*.ppm"))
        assert maps == [f"pca_{h}_ck0_stage{i}.ppm" for h in ("decoder", "encoder") for i in (0, 1)]

    def test_diag_rank_without_maps(self, trained, tmp_path):
        ck = str(trained / "checkpoint")
        assert main(["diag-rank", "--checkpoint", ck, "--images", "1", "--pca", "none", "--out", str(tmp_path)]) == EXIT_OK
        assert not list(tmp_path.glob("*.ppm"))

    def test_diag_rank_gap_check(self, trained, tmp_path):
        ck = str(trained / "checkpoint")
        # identical checkpoints give zero gap
        args = ["diag-rank", "--checkpoint", ck, "--checkpoint", ck, "--images", "2", "--out", str(tmp_path)]
        assert main(args + ["--min-gap", "0.1"]) == EXIT_CHECK
        assert main(args + ["--min-gap", "0.0"]) == EXIT_OK

    @pytest.mark.parametrize("sub", ["diag-rank", "viz-tokens"])
    def test_missing_checkpoint(self, tmp_path, sub):
        assert main([sub, "--checkpoint", str(tmp_path / "none"), "--out", str(tmp_path)]) == EXIT_CONFIG


class TestGradcheck:
    def test_subset_green(self, tmp_path):
        assert main(["gradcheck", "--seeds", "2", "--cases", "tanh,attention,mse", "--out", str(tmp_path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "gradcheck.csv")
        assert len(rows) == 6 and {r["passed"] for r in rows} == {"True"}

    def test_unknown_case(self, tmp_path):
        assert main(["gradcheck", "--cases", "nope", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestFlopReport:
    def test_check_passes(self, tmp_path):
        assert main(["flop-report", "--check", "--out", str(tmp_path)]) == EXIT_OK
        _, rows = read_csv(tmp_path / "flop_exponents.csv")
        assert [r["model"] for r in rows] == ["nbhd", "dense"]

    def test_resolution_not_multiple_of_patch(self, tmp_path):
        assert main(["flop-report", "--resolutions", "450", "--out", str(tmp_path)]) == EXIT_CONFIG


class TestProbe:
    def test_check(self, tmp_path):
        assert main(["probe", "--trials", "200", "--check", "--out", str(tmp_path)]) == EXIT_OK

    def test_check_fails_in_b64(self, tmp_path):
        # no overflow in double precision, so the inverse-power kernel never fails
        assert main(["probe", "--trials", "50", "--precision", "b64", "--check", "--out", str(tmp_path)]) == EXIT_CHECK

    def test_bad_range(self, tmp_path):
        assert main(["probe", "--d-range", "5", "1", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_threads_flag(tmp_path):
    assert main(["probe", "--trials", "2", "--threads", "0", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["probe", "--trials", "2", "--threads", "1", "--out", str(tmp_path)]) == EXIT_OK
