import json
import math
import os

import numpy as np
import pytest

from conftest import synth_masks, synth_skeletons, synth_video
from vidmotion import skeleton as SK
from vidmotion import tensor as T
from vidmotion.cli import frame_metrics, main


def write_frames(directory, rasters, binary=False):
    os.makedirs(directory, exist_ok=True)
    for i, r in enumerate(rasters):
        path = os.path.join(directory, f"frame_{i:03d}.pgm")
        if binary:
            SK.write_mask_pgm(path, r)
        else:
            SK.write_pgm(path, r)


def make_job_dir(tmp_path, *, ref_shift=3.0, config_extra=None):
    root = tmp_path / "job"
    root.mkdir(exist_ok=True)
    T.save_tensor(root / "video.melt", synth_video())
    write_frames(root / "src_skeletons", synth_skeletons())
    write_frames(root / "src_masks", synth_masks(), binary=True)
    write_frames(root / "ref_skeletons", synth_skeletons(shift=ref_shift))
    write_frames(root / "ref_masks", synth_masks(shift=ref_shift), binary=True)
    blob = {
        "seed": 7,
        "training": {"steps": 20, "lr": 3e-5},
        "sampler": {"steps": 3, "guidance": 1.0},
        "prompts": {"source": "figure walking", "target": "figure marching"},
        "paths": {
            "source_video": str(root / "video.melt"),
            "source_masks": str(root / "src_masks"),
            "source_skeletons": str(root / "src_skeletons"),
            "ref_skeletons": str(root / "ref_skeletons"),
            "ref_masks": str(root / "ref_masks"),
        },
    }
    if config_extra:
        blob.update(config_extra)
    cfg_path = root / "config.json"
    cfg_path.write_text(json.dumps(blob, indent=1))
    return root, cfg_path


def tree_bytes(directory):
    out = {}
    for dirpath, _, files in os.walk(directory):
        for name in files:
            path = os.path.join(dirpath, name)
            out[os.path.relpath(path, directory)] = open(path, "rb").read()
    return out


class TestAlignCommand:
    def test_identity_square_fixture_reports_ratio_one(self, tmp_path):
        mask = np.zeros((32, 32), dtype=np.float32)
        mask[8:24, 10:26] = 1.0  # square bbox
        skel = np.zeros((32, 32), dtype=np.float32)
        skel[12:20, 12:20] = 200.0
        root = tmp_path / "idjob"
        root.mkdir()
        for sub in ("sk", "m"):
            write_frames(root / f"src_{sub}", [skel if sub == "sk" else mask] * 2,
                         binary=(sub == "m"))
            write_frames(root / f"ref_{sub}", [skel if sub == "sk" else mask] * 2,
                         binary=(sub == "m"))
        cfg = root / "c.json"
        cfg.write_text(json.dumps({"paths": {
            "source_skeletons": str(root / "src_sk"),
            "source_masks": str(root / "src_m"),
            "ref_skeletons": str(root / "ref_sk"),
            "ref_masks": str(root / "ref_m")}}))
        out = tmp_path / "out"
        assert main(["align", "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "align_report.json").read_text())
        assert len(report) == 2
        for entry in report:
            assert entry["ratio"] == 1.0
            assert entry["offset"] == [0, 0]
            assert entry["v_trans"] == [0.0, 0.0]
        aligned = SK.read_pgm(out / "aligned_000.pgm")
        np.testing.assert_array_equal(aligned, skel.astype(np.uint8))

    def test_translation_fixture_reports_offset(self, tmp_path):
        mask = np.zeros((32, 32), dtype=np.float32)
        mask[4:18, 5:19] = 1.0
        skel = np.zeros((32, 32), dtype=np.float32)
        skel[6:10, 7:15] = 150.0
        root = tmp_path / "trjob"
        root.mkdir()
        write_frames(root / "src_sk", [skel])
        write_frames(root / "src_m", [mask], binary=True)
        write_frames(root / "ref_sk", [np.roll(skel, (6, 6), (0, 1))])
        write_frames(root / "ref_m", [np.roll(mask, (6, 6), (0, 1))], binary=True)
        cfg = root / "c.json"
        cfg.write_text(json.dumps({"paths": {
            "source_skeletons": str(root / "src_sk"),
            "source_masks": str(root / "src_m"),
            "ref_skeletons": str(root / "ref_sk"),
            "ref_masks": str(root / "ref_m")}}))
        out = tmp_path / "out"
        assert main(["align", "--config", str(cfg), "--out", str(out)]) == 0
        report = json.loads((out / "align_report.json").read_text())
        assert report[0]["offset"] == [-6, -6]

    def test_missing_mask_dir_exits_2_with_path(self, tmp_path, capsys):
        root, cfg = make_job_dir(tmp_path)
        blob = json.loads(cfg.read_text())
        blob["paths"]["source_masks"] = str(root / "nope")
        cfg.write_text(json.dumps(blob))
        assert main(["align", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "nope" in capsys.readouterr().err


class TestTrainCommand:
    def test_writes_loss_csv_and_checkpoint(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--out", str(out)]) == 0
        lines = (out / "loss.csv").read_text().strip().splitlines()
        assert lines[0] == "step,loss"
        assert len(lines) == 21
        float(lines[1].split(",")[1])
        assert (out / "checkpoint" / "manifest.json").exists()

    def test_rerun_gives_byte_identical_checkpoints(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        outs = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["train", "--config", str(cfg), "--out",
                         str(out), "--steps", "6"]) == 0
            outs.append(tree_bytes(out))
        assert outs[0] == outs[1]

    def test_checkpoint_round_trips_through_loader(self, tmp_path):
        from vidmotion import network as N
        _, cfg = make_job_dir(tmp_path)
        out = tmp_path / "out"
        assert main(["train", "--config", str(cfg), "--out", str(out),
                     "--steps", "2"]) == 0
        model = N.load_checkpoint(out / "checkpoint")
        assert model.cfg.frames == 8
        assert "unet.enc0.cs.w_q" in model.params


class TestEditCommand:
    def test_full_edit_writes_artifacts(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out = tmp_path / "out"
        assert main(["edit", "--config", str(cfg), "--out", str(out)]) == 0
        assert (out / "edited.melt").exists()
        assert (out / "reconstructed.melt").exists()
        assert (out / "aligned" / "frame_000.pgm").exists()
        assert (out / "edited_previews" / "frame_007.pgm").exists()
        report = json.loads((out / "edit_report.json").read_text())
        assert report["cache"]["reads_cs"] > 0
        assert len(report["align"]) == 8
        edited = T.load_tensor(out / "edited.melt")
        assert np.isfinite(edited.data).all()

    def test_two_runs_byte_identical(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        trees = []
        for sub in ("a", "b"):
            out = tmp_path / sub
            assert main(["edit", "--config", str(cfg), "--out", str(out)]) == 0
            trees.append(tree_bytes(out))
        assert trees[0] == trees[1]

    def test_no_injection_flag_changes_output(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out_on = tmp_path / "on"
        out_off = tmp_path / "off"
        assert main(["edit", "--config", str(cfg), "--out", str(out_on)]) == 0
        assert main(["edit", "--config", str(cfg), "--out", str(out_off),
                     "--no-injection"]) == 0
        on = T.load_tensor(out_on / "edited.melt").data
        off = T.load_tensor(out_off / "edited.melt").data
        assert not np.array_equal(on, off)
        report = json.loads((out_off / "edit_report.json").read_text())
        assert report["injection_enabled"] is False
        assert report["cache"]["reads_cs"] == 0

    def test_drop_masked_tokens_and_inject_mid_flags_flow(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out_base = tmp_path / "base"
        out_drop = tmp_path / "drop"
        out_mid = tmp_path / "mid"
        assert main(["edit", "--config", str(cfg), "--out", str(out_base)]) == 0
        assert main(["edit", "--config", str(cfg), "--out", str(out_drop),
                     "--drop-masked-tokens"]) == 0
        assert main(["edit", "--config", str(cfg), "--out", str(out_mid),
                     "--inject-mid"]) == 0
        base = T.load_tensor(out_base / "edited.melt").data
        drop = T.load_tensor(out_drop / "edited.melt").data
        mid = T.load_tensor(out_mid / "edited.melt").data
        assert not np.array_equal(base, drop)
        assert not np.array_equal(base, mid)
        base_report = json.loads((out_base / "edit_report.json").read_text())
        mid_report = json.loads((out_mid / "edit_report.json").read_text())
        assert mid_report["cache"]["reads_cs"] > base_report["cache"]["reads_cs"]

    def test_empty_ref_mask_exits_2_with_frame(self, tmp_path, capsys):
        root, cfg = make_job_dir(tmp_path)
        blank = np.zeros((32, 32), dtype=np.float32)
        SK.write_mask_pgm(root / "ref_masks" / "frame_002.pgm", blank)
        assert main(["edit", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "frame 2" in capsys.readouterr().err


class TestReconstructCommand:
    def test_writes_reconstruction_and_report(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out = tmp_path / "out"
        assert main(["reconstruct", "--config", str(cfg),
                     "--out", str(out)]) == 0
        report = json.loads((out / "reconstruct_report.json").read_text())
        assert len(report["metrics_vs_source"]) == 8
        assert report["inversion_timesteps"][0] == -1


class TestConfigHandling:
    def test_malformed_json_exits_2_with_location(self, tmp_path, capsys):
        bad = tmp_path / "bad.json"
        bad.write_text('{"seed": 1,\n "oops"')
        assert main(["align", "--config", str(bad),
                     "--out", str(tmp_path / "o")]) == 2
        err = capsys.readouterr().err
        assert "line" in err and "column" in err

    def test_unknown_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"seed": 1, "bogus": {}}))
        assert main(["align", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "bogus" in capsys.readouterr().err

    def test_unknown_nested_key_rejected(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"sampler": {"steps": 3, "giudance": 1}}))
        assert main(["align", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2
        assert "giudance" in capsys.readouterr().err

    def test_seed_override_applies(self, tmp_path):
        _, cfg = make_job_dir(tmp_path)
        out_a = tmp_path / "a"
        out_b = tmp_path / "b"
        assert main(["edit", "--config", str(cfg), "--out", str(out_a),
                     "--seed", "11"]) == 0
        assert main(["edit", "--config", str(cfg), "--out", str(out_b),
                     "--seed", "12"]) == 0
        a = T.load_tensor(out_a / "edited.melt").data
        b = T.load_tensor(out_b / "edited.melt").data
        assert not np.array_equal(a, b)


class TestSelftestCommand:
    def test_clean_build_passes(self, capsys):
        assert main(["selftest"]) == 0
        out = capsys.readouterr().out
        assert "FAIL" not in out
        assert out.count("PASS") == 12

    def test_corrupted_gradient_mode_fails_specific_check(self, capsys):
        assert main(["selftest", "--corrupt-gradient"]) == 1
        out = capsys.readouterr().out
        assert "FAIL  gradient-adapter" in out
        assert sum(1 for line in out.splitlines()
                   if line.startswith("FAIL ")) == 1


class TestFrameMetrics:
    def test_identical_inputs_zero_rmse_inf_psnr(self):
        a = T.Tensor(np.random.default_rng(0).normal(0, 1, (3, 2, 4, 4))
                     .astype(np.float32))
        metrics = frame_metrics(a, a)
        for m in metrics:
            assert m["rmse"] == 0.0
            assert m["psnr"] == math.inf

    def test_unit_offset_gives_rmse_one(self):
        a = T.Tensor(np.random.default_rng(1).normal(0, 1, (2, 2, 3, 3))
                     .astype(np.float32))
        b = T.Tensor(a.data + 1.0)
        for m in frame_metrics(a, b):
            assert abs(m["rmse"] - 1.0) < 1e-6

    def test_random_pair_matches_brute_force(self):
        gen = np.random.default_rng(2)
        a = gen.normal(0, 1, (2, 3, 4, 4)).astype(np.float32)
        b = gen.normal(0, 1, (2, 3, 4, 4)).astype(np.float32)
        metrics = frame_metrics(T.Tensor(a), T.Tensor(b))
        for f in range(2):
            se = 0.0
            count = 0
            for c in range(3):
                for y in range(4):
                    for x in range(4):
                        se += (float(a[f, c, y, x]) - float(b[f, c, y, x])) ** 2
                        count += 1
            rmse = math.sqrt(se / count)
            assert abs(metrics[f]["rmse"] - rmse) < 1e-9
            ref64 = a[f].astype(np.float64)
            rng_ref = float(ref64.max() - ref64.min())
            want_psnr = 10 * math.log10(rng_ref ** 2 / (se / count))
            assert abs(metrics[f]["psnr"] - want_psnr) < 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(T.ShapeError):
            frame_metrics(T.zeros((2, 1, 2, 2)), T.zeros((3, 1, 2, 2)))
