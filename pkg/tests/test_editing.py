import colorsys
import json
import sys
import textwrap
import threading

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewprop.editing import (MOCKS, EditorConfig, EditorError, EditorHandle, EditRequest, blend_refine, edit,
                              edit_averaged, post_refine, rgb_to_hsv, rotate_hue, sepia)


def _req(image, **cfg):
    return EditRequest(image, image, EditorConfig(**cfg))


def _solid(color, size=8):
    return np.tile(np.asarray(color, float), (size, size, 1))


class TestConfig:
    def test_defaults(self):
        c = EditorConfig()
        assert (c.timestep_t, c.diffusion_steps, c.image_guidance, c.text_guidance, c.n_r) == (0.6, 3, 1.5, 7.5, 5)

    @pytest.mark.parametrize("bad", [dict(timestep_t=0), dict(diffusion_steps=0), dict(n_r=0),
                                     dict(image_guidance=0)])
    def test_validation(self, bad):
        with pytest.raises(ValueError):
            EditorConfig(**bad)

    def test_request_shape_checks(self):
        with pytest.raises(ValueError):
            EditRequest(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)), EditorConfig())
        with pytest.raises(ValueError):
            EditRequest(np.zeros((4, 4)), np.zeros((4, 4)), EditorConfig())


class TestMocks:
    def test_identity(self):
        img = np.random.default_rng(0).random((8, 8, 3))
        assert np.array_equal(edit(EditorHandle("mock:identity"), _req(img)), img)

    def test_red_to_green(self):
        out = EditorHandle("mock:hue-rotate:120").edit(_req(_solid([1, 0, 0])))
        assert np.allclose(out, _solid([0, 1, 0]), atol=1e-12)

    def test_angle_from_instruction(self):
        out = EditorHandle("mock:hue-rotate").edit(_req(_solid([1, 0, 0]), instruction="rotate hue by 240 degrees"))
        assert np.allclose(out, _solid([0, 0, 1]), atol=1e-12)

    @settings(max_examples=50)
    @given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(-360, 360))
    def test_hue_rotation_matches_colorsys(self, r, g, b, angle):
        h, s, v = colorsys.rgb_to_hsv(r, g, b)
        expect = colorsys.hsv_to_rgb((h + angle / 360.0) % 1.0, s, v)
        assert np.allclose(rotate_hue(np.array([r, g, b]), angle), expect, atol=1e-9)

    def test_hsv_matches_colorsys(self):
        x = np.random.default_rng(1).random((200, 3))
        ref = np.array([colorsys.rgb_to_hsv(*c) for c in x])
        assert np.allclose(rgb_to_hsv(x), ref, atol=1e-12)

    def test_grayscale(self):
        out = EditorHandle("mock:grayscale").edit(_req(_solid([1, 0, 0])))
        assert np.allclose(out, 0.299)

    def test_checker_stamp_marks_center_only(self):
        img = _solid([0.2, 0.2, 0.2], 64)
        out = EditorHandle("mock:checker-stamp").edit(_req(img))
        changed = np.any(out != img, axis=-1)
        assert changed[16:48, 16:48].any() and not changed[:16].any() and not changed[:, 48:].any()

    def test_noisy_stylize_is_zero_mean_around_sepia(self):
        img = 0.3 + 0.4 * np.random.default_rng(2).random((32, 32, 3))
        h = EditorHandle("mock:noisy-stylize:0.1")
        runs = np.stack([h.edit(_req(img, seed=s)) for s in range(400)])
        stderr = runs.std(0) / np.sqrt(len(runs))
        # no clipping happens at this brightness, so the sample mean sits within a few standard errors
        assert runs.max() < 1 and runs.min() > 0
        assert np.all(np.abs(runs.mean(0) - sepia(img)) <= 5 * stderr + 1e-12)
        assert runs.std(0).mean() > 0.002

    def test_noisy_stylize_leaves_toned_input_alone(self):
        toned = sepia(np.random.default_rng(3).random((8, 8, 3)) * 0.7)
        out = EditorHandle("mock:noisy-stylize").edit(_req(toned, seed=11))
        assert np.allclose(out, toned, atol=1e-12)

    @pytest.mark.parametrize("name", sorted(MOCKS))
    def test_mocks_deterministic_and_clamped(self, name):
        img = np.random.default_rng(4).random((16, 16, 3))
        h = EditorHandle(f"mock:{name}")
        a, b = h.edit(_req(img, seed=5)), h.edit(_req(img, seed=5))
        assert np.array_equal(a, b)
        assert a.shape == img.shape and a.min() >= 0 and a.max() <= 1

    def test_unknown_mock(self):
        with pytest.raises(ValueError, match="unknown mock"):
            EditorHandle("mock:sharpen")
        with pytest.raises(ValueError):
            EditorHandle("banana")

    def test_backend_shape_and_finiteness_checked(self):
        with pytest.raises(EditorError, match="shape"):
            EditorHandle("c", backend=lambda r: r.input[:2]).edit(_req(_solid([0, 0, 0])))
        with pytest.raises(EditorError, match="non-finite"):
            EditorHandle("c", backend=lambda r: r.input * np.nan).edit(_req(_solid([0, 0, 0])))


class TestAveraging:
    def test_symmetric_runs_cancel(self):
        img = _solid([0.5, 0.3, 0.7])
        h = EditorHandle("pm", backend=lambda r: r.input + (0.1 if r.config.seed % 2 == 0 else -0.1))
        out = edit_averaged(h, _req(img, n_r=2, seed=0))
        assert np.allclose(out, img, atol=1e-15)

    def test_single_run_equals_edit(self):
        img = np.random.default_rng(5).random((8, 8, 3))
        h = EditorHandle("mock:noisy-stylize")
        assert np.array_equal(h.edit_averaged(_req(img, n_r=1, seed=9)), h.edit(_req(img, n_r=1, seed=9)))

    def test_variance_law(self):
        img = np.random.default_rng(6).random((100, 100, 3)) * 0.8
        h = EditorHandle("mock:noisy-stylize")
        seeds = range(0, 48 * 16, 16)
        single = np.stack([h.edit(_req(img, seed=s)) for s in seeds])
        avg = np.stack([h.edit_averaged(_req(img, seed=s + 100000, n_r=16)) for s in seeds])
        ratio = avg.var(0).mean() / single.var(0).mean()
        assert ratio <= 1.3 / 16

    def test_post_refine_variance_about_one_over_nr(self):
        img = np.random.default_rng(7).random((64, 64, 3)) * 0.8
        h = EditorHandle("mock:noisy-stylize")
        single = np.stack([h.edit(_req(img, seed=s)) for s in range(0, 400, 5)])
        refined = np.stack([post_refine(img, img, h, EditorConfig(n_r=5, seed=s + 10 ** 6))
                            for s in range(0, 400, 5)])
        ratio = refined.var(0).mean() / single.var(0).mean()
        assert 0.7 / 5 <= ratio <= 1.3 / 5


class TestRefinement:
    def test_blend_identity_returns_mixup(self):
        rng = np.random.default_rng(8)
        orig, mix = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert np.array_equal(blend_refine(orig, mix, EditorHandle("mock:identity"), EditorConfig()), mix)

    def test_post_refine_identity_returns_standin(self):
        rng = np.random.default_rng(9)
        a, b = rng.random((8, 8, 3)), rng.random((8, 8, 3))
        assert np.array_equal(post_refine(a, b, EditorHandle("mock:identity"), EditorConfig()), a)

    def test_median_blend_removes_salt_and_pepper(self):
        clean = np.zeros((64, 64, 3))
        clean[:, 32:] = [0.9, 0.4, 0.1]
        clean[40:, :] = [0.1, 0.3, 0.8]
        rng = np.random.default_rng(10)
        noisy = clean.copy()
        hit = rng.random((64, 64)) < 0.03
        noisy[hit] = rng.integers(0, 2, (hit.sum(), 1)).astype(float)
        out = blend_refine(clean, noisy, EditorHandle("mock:median-denoise"), EditorConfig())
        interior = (slice(1, -1), slice(1, -1))
        same = np.all(np.abs(out[interior] - clean[interior]) < 1e-12, axis=-1)
        assert same.mean() >= 0.99

    def test_passes_use_distinct_seeds(self):
        seen = []

        def spy(req):
            seen.append(req.config.seed)
            return req.input

        h = EditorHandle("spy", backend=spy)
        blend_refine(_solid([0, 0, 0]), _solid([0, 0, 0]), h, EditorConfig(n_r=3, seed=10))
        assert seen == [10, 11, 12, 13, 14, 15]

    def test_blend_inputs_and_conditions(self):
        seen = []

        def spy(req):
            seen.append((req.input[0, 0, 0], req.condition[0, 0, 0]))
            return req.input + 0.1

        h = EditorHandle("spy", backend=spy)
        blend_refine(_solid([0.2] * 3), _solid([0.5] * 3), h, EditorConfig(n_r=1))
        # pass 1: mixup against original; pass 2: pass-1 result against mixup
        assert seen[0] == (0.5, 0.2)
        assert seen[1] == pytest.approx((0.6, 0.5))


class TestCounting:
    def test_logical_invocations(self):
        h = EditorHandle("mock:identity")
        img = _solid([0.1, 0.2, 0.3])
        h.edit(_req(img), stage="key_edit")
        h.edit_averaged(_req(img, n_r=5), stage="blend")
        blend_refine(img, img, h, EditorConfig(n_r=5))
        assert h.invocations == {"key_edit": 1, "blend": 3}
        assert h.sub_runs == {"key_edit": 1, "blend": 15}
        assert h.ledger()["total"] == 4

    def test_failed_call_not_counted(self):
        def broken(req):
            raise EditorError("nope")

        h = EditorHandle("broken", backend=broken)
        with pytest.raises(EditorError):
            h.edit(_req(_solid([0, 0, 0])))
        assert h.invocation_counter == 0

    def test_concurrent_counting(self):
        h = EditorHandle("mock:identity")
        img = _solid([0.1, 0.2, 0.3], 4)

        def work():
            for _ in range(200):
                h.edit(_req(img), stage="blend")

        threads = [threading.Thread(target=work) for _ in range(8)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert h.invocations["blend"] == 1600


def _script(tmp_path, body):
    path = tmp_path / "editor.py"
    path.write_text(textwrap.dedent(body))
    return f"exec:{sys.executable} {path}"


class TestExternalEditor:
    def test_protocol_round_trip(self, tmp_path):
        spec = _script(tmp_path, """
            import json, os, sys
            import numpy as np
            from PIL import Image
            work = sys.argv[1]
            req = json.load(open(os.path.join(work, "request.json")))
            json.dump(req, open(os.path.join(os.path.dirname(__file__), "seen.json"), "w"))
            img = np.asarray(Image.open(os.path.join(work, req["input"])))
            Image.fromarray(255 - img).save(os.path.join(work, "output.png"))
        """)
        h = EditorHandle(spec)
        img = np.random.default_rng(11).integers(0, 256, (8, 8, 3)) / 255.0
        cfg = EditorConfig(timestep_t=0.7, n_r=4, seed=3, instruction="invert")
        out = h.edit_averaged(EditRequest(img, img, cfg), stage="blend")
        assert np.allclose(out, 1 - img, atol=1e-12)
        seen = json.loads((tmp_path / "seen.json").read_text())
        assert seen == {"instruction": "invert", "timestep_t": 0.7, "diffusion_steps": 3, "S_I": 1.5,
                        "S_T": 7.5, "n_r": 4, "seed": 3, "input": "input.png", "condition": "condition.png"}
        # one process call, still n_r sub-runs on the books
        assert h.invocations["blend"] == 1 and h.sub_runs["blend"] == 4

    def test_nonzero_exit_carries_stderr(self, tmp_path):
        spec = _script(tmp_path, """
            import sys
            sys.stderr.write("model weights missing")
            sys.exit(3)
        """)
        with pytest.raises(EditorError, match="exited with 3.*model weights missing"):
            EditorHandle(spec).edit(_req(_solid([0, 0, 0])))

    def test_missing_output(self, tmp_path):
        spec = _script(tmp_path, "pass\n")
        with pytest.raises(EditorError, match="no output.png"):
            EditorHandle(spec).edit(_req(_solid([0, 0, 0])))

    def test_wrong_size_output(self, tmp_path):
        spec = _script(tmp_path, """
            import os, sys
            from PIL import Image
            Image.new("RGB", (3, 3)).save(os.path.join(sys.argv[1], "output.png"))
        """)
        with pytest.raises(EditorError, match="shape"):
            EditorHandle(spec).edit(_req(_solid([0, 0, 0])))

    def test_missing_command(self):
        with pytest.raises(EditorError, match="not found"):
            EditorHandle("exec:/nonexistent/editor-binary").edit(_req(_solid([0, 0, 0])))

    def test_timeout(self, tmp_path):
        spec = _script(tmp_path, "import time\ntime.sleep(5)\n")
        with pytest.raises(EditorError, match="timed out"):
            EditorHandle(spec, timeout=0.5).edit(_req(_solid([0, 0, 0])))
