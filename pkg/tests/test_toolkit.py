"""Scene synthesis, dataset files, report formatting, and the CLI surface."""

import numpy as np
import pytest

from gseal.errors import FormatError, ValidationError
from gseal.gradcore import save_weights
from gseal.nets import HiddenCodec, ModulationSet, ToyUNet
from gseal.renderer import load_image_raw
from gseal.toolkit.cli import main
from gseal.toolkit.reports import format_metric, format_percent, report_assemble
from gseal.toolkit.scenes import (
    PRIMITIVES,
    CameraRig,
    SceneSpec,
    _grid_order,
    foreground_fraction,
    input_cameras,
    load_dataset,
    load_rig,
    look_at,
    save_dataset,
    save_rig,
    synth_dataset,
    synth_scene,
)


def tiny_rig(count=2, size=32, seed=0):
    return CameraRig(count=count, width=size, height=size, seed=seed)


# ----------------------------------------------------------------- specs/rigs


class TestSceneSpec:
    def test_primitives_all_known(self):
        for p in PRIMITIVES:
            assert SceneSpec(primitive=p).primitive == p

    def test_rejects_unknown_primitive(self):
        with pytest.raises(ValidationError):
            SceneSpec(primitive="torus")

    @pytest.mark.parametrize("budget", [63, 4097, 0])
    def test_rejects_budget_out_of_range(self, budget):
        with pytest.raises(ValidationError):
            SceneSpec(primitive="box", budget=budget)

    def test_budget_bounds_inclusive(self):
        SceneSpec(primitive="box", budget=64)
        SceneSpec(primitive="box", budget=4096)


class TestCameraRig:
    def test_rejects_empty_rig(self):
        with pytest.raises(ValidationError):
            CameraRig(count=0)

    def test_rejects_radius_inside_near_plane(self):
        with pytest.raises(ValidationError):
            CameraRig(radius=0.04, near=0.05)

    def test_camera_count(self):
        assert len(CameraRig(count=5).cameras()) == 5

    def test_cameras_deterministic(self):
        a = CameraRig(count=3, seed=9).cameras()
        b = CameraRig(count=3, seed=9).cameras()
        for ca, cb in zip(a, b):
            assert np.array_equal(ca.view, cb.view)

    def test_look_at_puts_origin_on_axis(self):
        # the target projects to the view axis at depth == radius
        cam = look_at(0.7, 0.2, 2.5, 60.0, 64, 64)
        p = cam.view[:3, :3] @ np.zeros(3) + cam.view[:3, 3]
        assert abs(p[0]) < 1e-12 and abs(p[1]) < 1e-12
        assert abs(p[2] - 2.5) < 1e-12

    def test_look_at_rotation_orthonormal(self):
        cam = look_at(1.3, 0.4, 3.0, 60.0, 32, 32)
        R = cam.view[:3, :3]
        assert np.allclose(R @ R.T, np.eye(3), atol=1e-12)

    def test_input_cameras_fixed_protocol(self):
        cams = input_cameras(tiny_rig())
        assert len(cams) == 4
        # no jitter: the four azimuths are exact quarter turns, so the
        # stack is identical whatever the rig seed says
        again = input_cameras(tiny_rig(seed=123))
        for ca, cb in zip(cams, again):
            assert np.array_equal(ca.view, cb.view)


# ------------------------------------------------------------------ synthesis


class TestSynthScene:
    def test_budget_exact_count(self):
        for budget in (64, 81, 100):
            spec = SceneSpec(primitive="sphere-shell", budget=budget)
            assert synth_scene(spec, tiny_rig()).cloud.count == budget

    def test_deterministic_given_seeds(self):
        spec = SceneSpec(primitive="two-blob", budget=64, palette_seed=3, pose_seed=4)
        a = synth_scene(spec, tiny_rig())
        b = synth_scene(spec, tiny_rig())
        assert np.array_equal(a.cloud.mu, b.cloud.mu)
        assert np.array_equal(a.cloud.c, b.cloud.c)
        assert np.array_equal(a.input_stack, b.input_stack)

    def test_pose_seed_changes_geometry(self):
        base = SceneSpec(primitive="box", budget=64, pose_seed=0)
        other = SceneSpec(primitive="box", budget=64, pose_seed=1)
        a = synth_scene(base, tiny_rig())
        b = synth_scene(other, tiny_rig())
        assert not np.array_equal(a.cloud.mu, b.cloud.mu)

    def test_fields_within_activation_ranges(self):
        spec = SceneSpec(primitive="sphere-shell", budget=100)
        cloud = synth_scene(spec, tiny_rig()).cloud
        assert np.all(np.abs(cloud.mu) <= 0.88)
        assert np.all((cloud.s >= 0.02) & (cloud.s <= 0.06))
        assert np.allclose(np.linalg.norm(cloud.q, axis=1), 1.0, atol=1e-12)
        assert np.all((cloud.a > 0.5) & (cloud.a < 1.0))
        assert np.all((cloud.c > 0.0) & (cloud.c < 1.0))

    def test_views_and_stack_shapes(self):
        rig = tiny_rig(count=3, size=32)
        sample = synth_scene(SceneSpec(primitive="box", budget=64), rig)
        assert len(sample.views) == 3
        assert sample.views[0].shape == (3, 32, 32)
        assert sample.input_stack.shape == (12, 32, 32)

    @pytest.mark.parametrize("primitive", PRIMITIVES)
    def test_foreground_visible_from_ring(self, primitive):
        sample = synth_scene(SceneSpec(primitive=primitive, budget=256), tiny_rig())
        for view in sample.views:
            assert foreground_fraction(view) >= 0.05

    def test_foreground_fraction_on_known_image(self):
        img = np.ones((3, 4, 4))
        img[:, :2, :] = 0.2  # top half off-white
        assert foreground_fraction(img) == 0.5
        assert foreground_fraction(np.ones((3, 4, 4))) == 0.0

    def test_grid_order_is_permutation_sorted_by_projection(self):
        rng = np.random.default_rng(0)
        mu = rng.uniform(-0.8, 0.8, (64, 3))
        cam = input_cameras(tiny_rig())[0]
        order = _grid_order(mu, cam)
        assert np.array_equal(np.sort(order), np.arange(64))
        R, t = cam.view[:3, :3], cam.view[:3, 3]
        p = mu[order] @ R.T + t
        u, v = p[:, 0] / p[:, 2], p[:, 1] / p[:, 2]
        for r0 in range(0, 64, 8):
            assert np.all(np.diff(u[r0:r0 + 8]) >= 0)  # x sorted within a band
        band_v = v.reshape(8, 8).mean(axis=1)
        assert np.all(np.diff(band_v) >= 0)  # bands stacked by y

    def test_dataset_split_and_primitive_cycle(self):
        train, val, rig = synth_dataset(4, 2, seed=1, rig=tiny_rig(), budget=64)
        assert len(train) == 4 and len(val) == 2
        got = [s.spec.primitive for s in train + val]
        want = [PRIMITIVES[i % 3] for i in range(6)]
        assert got == want
        assert rig.width == 32

    def test_dataset_seed_reproducible(self):
        a, _, _ = synth_dataset(2, 0, seed=5, rig=tiny_rig(), budget=64)
        b, _, _ = synth_dataset(2, 0, seed=5, rig=tiny_rig(), budget=64)
        for sa, sb in zip(a, b):
            assert np.array_equal(sa.cloud.mu, sb.cloud.mu)
            assert np.array_equal(sa.views[0], sb.views[0])


# ------------------------------------------------------------------- file IO


class TestRigIO:
    def test_roundtrip(self, tmp_path):
        rig = CameraRig(count=6, radius=2.2, elevation=(0.12, 0.4), f=55.0,
                        width=48, height=48, jitter=0.1, seed=7, near=0.06)
        path = tmp_path / "rig.cfg"
        save_rig(path, rig)
        assert load_rig(path) == rig

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "rig.cfg"
        path.write_text("count=4\nradius=2.5\n")
        with pytest.raises(FormatError):
            load_rig(path)

    def test_non_key_value_line_rejected(self, tmp_path):
        path = tmp_path / "rig.cfg"
        path.write_text("count=4\nnot a config line\n")
        with pytest.raises(FormatError):
            load_rig(path)

    def test_comments_and_blanks_skipped(self, tmp_path):
        rig = tiny_rig()
        path = tmp_path / "rig.cfg"
        save_rig(path, rig)
        text = "# ring setup\n\n" + path.read_text()
        path.write_text(text)
        assert load_rig(path) == rig

    def test_bad_value_rejected(self, tmp_path):
        path = tmp_path / "rig.cfg"
        save_rig(path, tiny_rig())
        path.write_text(path.read_text().replace("count=2", "count=two"))
        with pytest.raises(FormatError):
            load_rig(path)


class TestDatasetIO:
    def test_roundtrip(self, tmp_path):
        rig = tiny_rig()
        train, _, _ = synth_dataset(2, 0, seed=3, rig=rig, budget=64)
        save_dataset(tmp_path / "train", train, rig, png=False)
        loaded, rig2 = load_dataset(tmp_path / "train")
        assert rig2 == rig
        assert len(loaded) == 2
        def f32(x):
            # cloud and image dumps hold float32; compare against the cast
            return np.asarray(x, dtype=np.float32).astype(np.float64)

        for orig, back in zip(train, loaded):
            assert back.spec == orig.spec
            assert np.array_equal(back.cloud.mu, f32(orig.cloud.mu))
            assert np.array_equal(back.cloud.c, f32(orig.cloud.c))
            assert np.array_equal(back.views[0], f32(np.clip(orig.views[0], 0.0, 1.0)))
            assert len(back.views) == len(orig.views)

    def test_missing_rig_rejected(self, tmp_path):
        (tmp_path / "scene_0000").mkdir(parents=True)
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_empty_dataset_rejected(self, tmp_path):
        save_rig(tmp_path / "rig.cfg", tiny_rig())
        with pytest.raises(FormatError):
            load_dataset(tmp_path)

    def test_png_previews_written(self, tmp_path):
        rig = tiny_rig()
        train, _, _ = synth_dataset(1, 0, seed=0, rig=rig, budget=64)
        save_dataset(tmp_path / "d", train, rig, png=True)
        assert (tmp_path / "d" / "scene_0000" / "view_00.png").exists()
        assert (tmp_path / "d" / "scene_0000" / "input_00.img").exists()


# ------------------------------------------------------------------- reports


class TestReports:
    def test_metric_four_decimals(self):
        assert format_metric(38.0228) == "38.0228"
        assert format_metric(38.02284) == "38.0228"
        assert format_metric(0.0) == "0.0000"

    def test_metric_infinity_sentinel(self):
        assert format_metric(float("inf")) == "inf"

    def test_percent_two_decimals(self):
        assert format_percent(0.9793) == "97.93%"
        assert format_percent(1.0) == "100.00%"
        assert format_percent(0.5) == "50.00%"

    def test_assemble_csv(self):
        csv_text, _ = report_assemble(
            ["attack", "psnr", "bit_acc"],
            [("noise", 31.25, 0.9793), ("none", float("inf"), 0.5)])
        assert csv_text == ("attack,psnr,bit_acc\n"
                            "noise,31.2500,97.93%\n"
                            "none,inf,50.00%\n")

    def test_assemble_percent_column_detection(self):
        csv_text, _ = report_assemble(["rate", "accuracy", "ssim"],
                                      [(0.25, 0.5, 0.25)])
        assert csv_text.splitlines()[1] == "25.00%,50.00%,0.2500"

    def test_assemble_passes_strings_and_ints(self):
        csv_text, _ = report_assemble(["label", "count"], [("all", 8)])
        assert csv_text.splitlines()[1] == "all,8"

    def test_assemble_empty_suite_keeps_header(self):
        csv_text, text = report_assemble(["a", "b"], [])
        assert csv_text == "a,b\n"
        assert text.splitlines()[0] == "a  b"

    def test_assemble_aligned_text(self):
        _, text = report_assemble(["target", "psnr"], [("render", 38.0228)])
        lines = text.splitlines()
        assert lines[0] == "target  psnr"
        assert lines[1] == "------  -------"
        assert lines[2] == "render  38.0228"


# ----------------------------------------------------------------------- CLI


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """One tiny dataset plus untrained checkpoints shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    rc = main(["synth-data", "--out", str(root / "data"), "--scenes", "2",
               "--val-scenes", "1", "--seed", "0", "--views", "2",
               "--size", "64", "--budget", "64"])
    assert rc == 0
    gen = ToyUNet(seed=0)
    save_weights(root / "gen.gswt", gen.params())
    codec = HiddenCodec(16, seed=0)
    save_weights(root / "codec.gswt", codec.params())
    save_weights(root / "mods.gswt", ModulationSet(16).params())
    return root


class TestCLI:
    def test_synth_data_layout(self, cli_workspace):
        data = cli_workspace / "data"
        assert (data / "train" / "rig.cfg").exists()
        assert (data / "train" / "scene_0001" / "cloud.gseal").exists()
        assert (data / "val" / "scene_0000" / "view_00.img").exists()

    def test_error_exits_with_2(self, cli_workspace, capsys):
        rc = main(["verify", "--splat", "nope.gseal",
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0xZZ"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_missing_file_reports_error(self, cli_workspace, capsys):
        rc = main(["render", "--splat", str(cli_workspace / "absent.gseal"),
                   "--rig", str(cli_workspace / "data" / "train" / "rig.cfg"),
                   "--out", str(cli_workspace / "absent_out")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_unknown_subcommand_exits(self):
        with pytest.raises(SystemExit):
            main(["frobnicate"])

    def test_generate_clean_and_render(self, cli_workspace, capsys):
        scene = cli_workspace / "data" / "train" / "scene_0000"
        splat = cli_workspace / "clean.gseal"
        rc = main(["generate", "--gen", str(cli_workspace / "gen.gswt"),
                   "--input", str(scene), "--out", str(splat)])
        assert rc == 0
        assert "clean" in capsys.readouterr().out
        out = cli_workspace / "renders"
        rc = main(["render", "--splat", str(splat),
                   "--rig", str(cli_workspace / "data" / "train" / "rig.cfg"),
                   "--out", str(out)])
        assert rc == 0
        assert (out / "view_01.img").exists()
        assert load_image_raw(out / "view_00.img").pixels.shape == (3, 64, 64)

    def test_generate_watermarked_needs_seal(self, cli_workspace, capsys):
        scene = cli_workspace / "data" / "train" / "scene_0000"
        rc = main(["generate", "--gen", str(cli_workspace / "gen.gswt"),
                   "--input", str(scene), "--message", "0xBEEF",
                   "--out", str(cli_workspace / "wm.gseal")])
        assert rc == 2
        assert "--seal" in capsys.readouterr().err

    def test_verify_exit_semantics(self, cli_workspace, capsys):
        splat = cli_workspace / "clean.gseal"
        rig = cli_workspace / "data" / "train" / "rig.cfg"
        rc = main(["verify", "--splat", str(splat),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0x0000", "--rig", str(rig)])
        out = capsys.readouterr().out
        decoded = out.split("decoded=")[1].strip()
        # exact-match contract: rc 0 iff every bit agrees
        assert rc == (0 if decoded == "0x0000" else 1)
        rc = main(["verify", "--splat", str(splat),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", decoded, "--rig", str(rig)])
        assert rc == 0
        assert "bit_accuracy=1.0000" in capsys.readouterr().out

    def test_verify_length_mismatch(self, cli_workspace, capsys):
        rc = main(["verify", "--splat", str(cli_workspace / "clean.gseal"),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0xABCDEF"])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_attack_image(self, cli_workspace):
        src = cli_workspace / "data" / "train" / "scene_0000" / "view_00.img"
        dst = cli_workspace / "attacked.img"
        rc = main(["attack", "--image", str(src), "--kind", "noise",
                   "--param", "0.1", "--seed", "0", "--out", str(dst)])
        assert rc == 0
        a = load_image_raw(src).pixels
        b = load_image_raw(dst).pixels
        assert a.shape == b.shape and not np.array_equal(a, b)
        assert b.min() >= 0.0 and b.max() <= 1.0

    def test_attack_splat_prune(self, cli_workspace):
        src = cli_workspace / "clean.gseal"
        dst = cli_workspace / "pruned.gseal"
        rc = main(["attack", "--splat", str(src), "--kind", "prune",
                   "--param", "0.25", "--out", str(dst)])
        assert rc == 0
        from gseal.gaussians import load_cloud

        assert load_cloud(dst).count == int(round(0.75 * load_cloud(src).count))

    def test_attack_requires_one_target(self, cli_workspace, capsys):
        rc = main(["attack", "--kind", "noise", "--param", "0.1",
                   "--out", str(cli_workspace / "x.img")])
        assert rc == 2
        rc = main(["attack", "--splat", "a.gseal", "--image", "b.img",
                   "--kind", "noise", "--param", "0.1",
                   "--out", str(cli_workspace / "x.img")])
        assert rc == 2
        capsys.readouterr()

    def test_attack_rejects_image_kind_on_splat(self, cli_workspace, capsys):
        rc = main(["attack", "--splat", str(cli_workspace / "clean.gseal"),
                   "--kind", "blur", "--param", "5",
                   "--out", str(cli_workspace / "y.gseal")])
        assert rc == 2
        assert "image attack" in capsys.readouterr().err

    def test_train_seal_runs_and_logs(self, cli_workspace, capsys):
        cfg = cli_workspace / "tiny.cfg"
        cfg.write_text("length=16\nsteps=2\nbatch_size=1\nviews_per_step=2\n")
        mods = cli_workspace / "mods_trained.gswt"
        log = cli_workspace / "seal.csv"
        rc = main(["train-seal", "--data", str(cli_workspace / "data"),
                   "--gen", str(cli_workspace / "gen.gswt"),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0xA5C3", "--config", str(cfg),
                   "--out", str(mods), "--log", str(log)])
        assert rc == 0
        assert "bit_acc=" in capsys.readouterr().out
        lines = log.read_text().splitlines()
        assert lines[0] == "step,L_msg,L_gs,L_rgb,total,bit_acc"
        assert len(lines) == 3

    def test_train_seal_unknown_config_key(self, cli_workspace, capsys):
        cfg = cli_workspace / "bad.cfg"
        cfg.write_text("length=16\nwavelets=3\n")
        rc = main(["train-seal", "--data", str(cli_workspace / "data"),
                   "--gen", str(cli_workspace / "gen.gswt"),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0xA5C3", "--config", str(cfg),
                   "--out", str(cli_workspace / "m2.gswt")])
        assert rc == 2
        assert "error:" in capsys.readouterr().err

    def test_train_seal_config_message_length_clash(self, cli_workspace, capsys):
        cfg = cli_workspace / "len8.cfg"
        cfg.write_text("length=8\nsteps=2\n")
        rc = main(["train-seal", "--data", str(cli_workspace / "data"),
                   "--gen", str(cli_workspace / "gen.gswt"),
                   "--dec", str(cli_workspace / "codec.gswt"),
                   "--message", "0xA5C3", "--config", str(cfg),
                   "--out", str(cli_workspace / "m3.gswt")])
        assert rc == 2
        assert "length" in capsys.readouterr().err

    def test_generate_watermarked_with_seal(self, cli_workspace, capsys):
        scene = cli_workspace / "data" / "train" / "scene_0000"
        wm = cli_workspace / "wm.gseal"
        rc = main(["generate", "--gen", str(cli_workspace / "gen.gswt"),
                   "--seal", str(cli_workspace / "mods.gswt"),
                   "--message", "0xA5C3", "--input", str(scene),
                   "--out", str(wm)])
        assert rc == 0
        assert "watermarked" in capsys.readouterr().out
        assert wm.exists()

    def test_report_robustness_needs_checkpoints(self, cli_workspace, capsys):
        rc = main(["report", "--suite", "robustness",
                   "--out", str(cli_workspace / "rob.csv"),
                   "--data", str(cli_workspace / "data"),
                   "--gen", str(cli_workspace / "gen.gswt")])
        assert rc == 2
        assert "robustness suite needs" in capsys.readouterr().err
