import hashlib
import json
import os
import sys

import numpy as np
import pytest
from PIL import Image

from viewprop.cli import build_parser, main
from viewprop.scene import gen_synthetic, load_dataset, preset


def _hash_tree(path):
    h = hashlib.sha256()
    for root, dirs, files in sorted(os.walk(path)):
        dirs.sort()
        for f in sorted(files):
            p = os.path.join(root, f)
            h.update(os.path.relpath(p, path).encode())
            h.update(open(p, "rb").read())
    return h.hexdigest()


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "scene"
    assert main(["gen-scene", "--preset", "plane-ring", "--views", "8", "--res", "48", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


class TestGenScene:
    def test_deterministic(self, tmp_path):
        for name in ("a", "b"):
            assert main(["gen-scene", "--views", "4", "--res", "32", "--seed", "7", "--out",
                         str(tmp_path / name)]) == 0
        assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")
        assert len(load_dataset(tmp_path / "a").views) == 4

    def test_one_view_is_usage_error(self, tmp_path, capsys):
        assert main(["gen-scene", "--views", "1", "--out", str(tmp_path)]) == 1
        assert "camera count ≥ 2" in capsys.readouterr().err

    def test_sphere_preset_matches_library_fixture(self, tmp_path):
        from viewprop.scene import save_dataset

        main(["gen-scene", "--preset", "sphere-over-plane", "--views", "4", "--res", "32", "--seed", "7",
              "--out", str(tmp_path / "cli")])
        save_dataset(gen_synthetic(preset("sphere-over-plane", 4, 32), seed=7), tmp_path / "lib")
        assert _hash_tree(tmp_path / "cli") == _hash_tree(tmp_path / "lib")

    def test_spec_file(self, tmp_path):
        spec = tmp_path / "scene.json"
        spec.write_text(json.dumps({"primitives": [{"type": "plane"}], "camera_ring": {"count": 3}}))
        assert main(["gen-scene", "--spec", str(spec), "--res", "16", "--out", str(tmp_path / "o")]) == 0
        assert len(load_dataset(tmp_path / "o").views) == 3

    def test_bad_spec_file(self, tmp_path):
        spec = tmp_path / "scene.json"
        spec.write_text(json.dumps({"primitives": [{"type": "torus"}]}))
        assert main(["gen-scene", "--spec", str(spec), "--out", str(tmp_path / "o")]) == 1


class TestParser:
    def test_unknown_flag_is_usage_error(self):
        with pytest.raises(SystemExit) as info:
            main(["propagate", "--dataset", "x", "--bogus"])
        assert info.value.code == 1

    def test_help_lists_defaults(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["propagate", "--help"])
        assert info.value.code == 0
        text = " ".join(capsys.readouterr().out.split())
        for flag, default in [("--phi", "0.3"), ("--n-r", "5"), ("--blend-t", "0.6"), ("--blend-steps", "3"),
                              ("--s-i", "1.5"), ("--s-t", "7.5"), ("--stop", "0.95"), ("--warmup", "10")]:
            assert flag in text and f"(default: {default})" in text

    def test_defaults_parse(self):
        args = build_parser().parse_args(["propagate", "--dataset", "d"])
        assert (args.phi, args.n_r, args.blend_t, args.s_i, args.s_t) == (0.3, 5, 0.6, 1.5, 7.5)
        assert args.post_refine and args.metrics


class TestPropagate:
    def test_identity_run(self, tmp_path, capsys):
        # one flat color, so resampling is exact and only 8-bit storage can differ
        spec = tmp_path / "flat.json"
        spec.write_text(json.dumps({"primitives": [{"type": "plane", "color_a": [0.4, 0.5, 0.6],
                                                    "color_b": [0.4, 0.5, 0.6]}],
                                    "camera_ring": {"radius": 1.0}}))
        main(["gen-scene", "--spec", str(spec), "--views", "6", "--res", "32", "--out", str(tmp_path / "scene")])
        out = tmp_path / "out"
        assert main(["propagate", "--dataset", str(tmp_path / "scene"), "--out", str(out)]) == 0
        text = capsys.readouterr().out
        assert "key views:" in text and "invocations:" in text
        src, res = load_dataset(tmp_path / "scene"), load_dataset(out / "dataset")
        for a, b in zip(src.views, res.views):
            assert np.array_equal(a.image, b.image)
            assert np.array_equal(a.depth_valid, b.depth_valid)

    def test_deterministic_trees(self, scene_dir, tmp_path):
        flags = ["propagate", "--dataset", str(scene_dir), "--editor", "mock:noisy-stylize", "--seed", "3"]
        assert main(flags + ["--out", str(tmp_path / "a")]) == 0
        assert main(flags + ["--out", str(tmp_path / "b")]) == 0
        assert _hash_tree(tmp_path / "a") == _hash_tree(tmp_path / "b")

    def test_unreachable_editor_is_runtime_error(self, scene_dir, tmp_path, capsys):
        code = main(["propagate", "--dataset", str(scene_dir), "--editor", "exec:/no/such/editor",
                     "--out", str(tmp_path)])
        assert code == 2
        assert "warmup" in capsys.readouterr().err

    def test_bad_values_are_usage_errors(self, scene_dir, tmp_path):
        assert main(["propagate", "--dataset", str(scene_dir), "--phi", "2", "--out", str(tmp_path)]) == 1
        assert main(["propagate", "--dataset", str(scene_dir), "--editor", "mock:nope",
                     "--out", str(tmp_path)]) == 1
        assert main(["propagate", "--dataset", str(tmp_path / "missing"), "--out", str(tmp_path)]) == 1

    def test_failing_external_editor_then_resume(self, scene_dir, tmp_path):
        script = tmp_path / "editor.py"
        script.write_text("import sys\nsys.exit(1)\n")
        out = tmp_path / "out"
        flags = ["--dataset", str(scene_dir), "--out", str(out), "--warmup", "0"]
        assert main(["propagate", *flags, "--editor", f"exec:{sys.executable} {script}"]) == 2
        assert main(["propagate", *flags, "--resume"]) == 0


class TestMetricsCommand:
    def test_identical_datasets_exit_runtime(self, scene_dir, tmp_path, capsys):
        code = main(["metrics", "--original", str(scene_dir), "--edited", str(scene_dir),
                     "--out", str(tmp_path / "m.json")])
        assert code == 2
        doc = json.loads((tmp_path / "m.json").read_text())
        assert "degenerate" in doc["errors"]["direction_score"]

    def test_propagated_beats_independent(self, scene_dir, tmp_path):
        from viewprop.editing import EditorConfig, EditorHandle, EditRequest
        from viewprop.scene import save_dataset

        assert main(["propagate", "--dataset", str(scene_dir), "--editor", "mock:noisy-stylize", "--seed", "7",
                     "--no-metrics", "--out", str(tmp_path / "prop")]) == 0
        independent = load_dataset(scene_dir)
        h = EditorHandle("mock:noisy-stylize")
        for v in independent.views:
            v.image = h.edit(EditRequest(v.image, v.image, EditorConfig(seed=1000 + v.id)))
        save_dataset(independent, tmp_path / "indep")
        scores = {}
        for name in ("prop", "indep"):
            edited = tmp_path / name / "dataset" if name == "prop" else tmp_path / name
            main(["metrics", "--original", str(scene_dir), "--edited", str(edited),
                  "--out", str(tmp_path / f"{name}.json")])
            scores[name] = json.loads((tmp_path / f"{name}.json").read_text())
        assert scores["prop"]["consistency_score"] > scores["indep"]["consistency_score"]
        assert scores["prop"]["photometric_inconsistency"] < scores["indep"]["photometric_inconsistency"]

    def test_view_count_mismatch(self, scene_dir, tmp_path):
        main(["gen-scene", "--views", "3", "--res", "48", "--out", str(tmp_path / "small")])
        assert main(["metrics", "--original", str(scene_dir), "--edited", str(tmp_path / "small"),
                     "--out", str(tmp_path / "m.json")]) == 1


class TestPropagateMask:
    def _mask(self, path, box=(16, 32)):
        m = np.zeros((48, 48), np.uint8)
        m[box[0]:box[1], box[0]:box[1]] = 255
        Image.fromarray(m).save(path)

    def test_writes_masks(self, scene_dir, tmp_path):
        self._mask(tmp_path / "m.png")
        assert main(["propagate-mask", "--dataset", str(scene_dir), "--mask", str(tmp_path / "m.png"),
                     "--out", str(tmp_path / "out")]) == 0
        names = sorted(os.listdir(tmp_path / "out"))
        assert "000_mask.png" in names and len(names) > 1
        seed = np.asarray(Image.open(tmp_path / "out" / "000_mask.png"))
        assert np.array_equal(seed, np.asarray(Image.open(tmp_path / "m.png")))

    def test_threshold_one_emits_seed_only(self, scene_dir, tmp_path):
        self._mask(tmp_path / "m.png")
        main(["propagate-mask", "--dataset", str(scene_dir), "--mask", str(tmp_path / "m.png"),
              "--overlap", "1.0", "--out", str(tmp_path / "out")])
        assert os.listdir(tmp_path / "out") == ["000_mask.png"]

    def test_empty_mask_is_usage_error(self, scene_dir, tmp_path, capsys):
        Image.fromarray(np.zeros((48, 48), np.uint8)).save(tmp_path / "m.png")
        assert main(["propagate-mask", "--dataset", str(scene_dir), "--mask", str(tmp_path / "m.png"),
                     "--out", str(tmp_path / "out")]) == 1
        assert "empty" in capsys.readouterr().err

    def test_size_mismatch(self, scene_dir, tmp_path):
        Image.fromarray(np.full((10, 10), 255, np.uint8)).save(tmp_path / "m.png")
        assert main(["propagate-mask", "--dataset", str(scene_dir), "--mask", str(tmp_path / "m.png")]) == 1


class TestInspect:
    def test_summary_and_contact_sheet(self, scene_dir, tmp_path, capsys):
        sheet = tmp_path / "sheet.png"
        assert main(["inspect", "--dataset", str(scene_dir), "--contact-sheet", str(sheet)]) == 0
        text = capsys.readouterr().out
        assert "8 views" in text
        assert Image.open(sheet).size == (5 * 48, 2 * 48)
