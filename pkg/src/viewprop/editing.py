"""2D editor abstraction.

An editor maps an ``EditRequest`` (input image, condition image, settings) to
an image of the same size. Built-in mocks are pure functions of the request;
an external editor is any command speaking the directory protocol described
in ``ExternalEditor``.

Every public call on ``EditorHandle`` is one *logical invocation*, no matter
how many sub-runs averaging performs; the handle keeps both counts per stage.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import os
import re
import shlex
import subprocess
import tempfile
import threading
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .scene import read_png_rgb, write_png_rgb

logger = logging.getLogger(__name__)


class EditorError(RuntimeError):
    """The editor failed or returned something unusable."""


@dataclass(frozen=True)
class EditorConfig:
    timestep_t: float = 0.6
    diffusion_steps: int = 3
    image_guidance: float = 1.5
    text_guidance: float = 7.5
    n_r: int = 5
    seed: int = 0
    instruction: str = ""

    def __post_init__(self):
        if not 0 < self.timestep_t <= 1:
            raise ValueError(f"timestep_t must be in (0, 1], got {self.timestep_t}")
        if self.diffusion_steps < 1:
            raise ValueError("diffusion_steps must be positive")
        if self.n_r < 1:
            raise ValueError("n_r must be at least 1")
        if not (self.image_guidance > 0 and self.text_guidance > 0):
            raise ValueError("guidance scales must be positive")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


@dataclass
class EditRequest:
    input: np.ndarray
    condition: np.ndarray
    config: EditorConfig

    def __post_init__(self):
        self.input = np.asarray(self.input, dtype=np.float64)
        self.condition = np.asarray(self.condition, dtype=np.float64)
        if self.input.shape != self.condition.shape:
            raise ValueError(f"input {self.input.shape} and condition {self.condition.shape} differ")
        if self.input.ndim != 3 or self.input.shape[2] != 3:
            raise ValueError(f"expected an (H, W, 3) image, got {self.input.shape}")


# --------------------------------------------------------------------------
# color helpers


def rgb_to_hsv(rgb):
    """Vectorized RGB -> HSV, all channels in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx = rgb.max(axis=-1)
    mn = rgb.min(axis=-1)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0,
                 np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(delta > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], axis=-1)


def hsv_to_rgb(hsv):
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0], hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0)
    f = h * 6.0 - i
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    i = i.astype(int) % 6
    choices = [np.stack(c, axis=-1) for c in
               ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros_like(hsv)
    for k, c in enumerate(choices):
        out[i == k] = c[i == k]
    return out


def rotate_hue(rgb, degrees):
    hsv = rgb_to_hsv(rgb)
    hsv[..., 0] = (hsv[..., 0] + degrees / 360.0) % 1.0
    return hsv_to_rgb(hsv)


LUMA = np.array([0.299, 0.587, 0.114])
SEPIA = np.array([1.12, 0.97, 0.78])
SEPIA = SEPIA / (SEPIA @ LUMA)  # unit luma, so toning an already toned image is a no-op


def sepia(rgb):
    return (rgb @ LUMA)[..., None] * SEPIA


# --------------------------------------------------------------------------
# built-in mocks


def _angle(param, instruction, default=120.0):
    if param:
        return float(param)
    m = re.search(r"-?\d+(?:\.\d+)?", instruction or "")
    return float(m.group()) if m else default


def _mock_identity(req, param):
    return req.input.copy()


def _mock_hue_rotate(req, param):
    return rotate_hue(req.input, _angle(param, req.config.instruction))


def _mock_grayscale(req, param):
    return np.repeat((req.input @ LUMA)[..., None], 3, axis=-1)


def _mock_checker_stamp(req, param):
    cell = int(param) if param else 8
    H, W = req.input.shape[:2]
    v, u = np.mgrid[0:H, 0:W]
    inside = (u >= W // 4) & (u < 3 * W // 4) & (v >= H // 4) & (v < 3 * H // 4)
    stamp = inside & (((u // cell) + (v // cell)) % 2 == 0)
    out = req.input.copy()
    out[stamp] = 0.5 * out[stamp] + 0.5 * np.array([0.9, 0.1, 0.8])
    return out


def _mock_noisy_stylize(req, param):
    """Sepia toning plus zero-mean seeded noise.

    The noise is one Gaussian draw per pixel along the sepia tint, scaled by
    ``amplitude`` times the size of the edit at that pixel. Already-toned
    input therefore comes back unchanged: like a diffusion editor, variation
    appears where the edit has to invent content.
    """
    amplitude = float(param) if param else 0.5
    target = sepia(req.input)
    change = np.abs(target - req.input).max(axis=-1)
    rng = np.random.default_rng(req.config.seed)
    xi = rng.standard_normal(change.shape)
    return target + (amplitude * change * xi)[..., None] * SEPIA


def _mock_median_denoise(req, param):
    size = int(param) if param else 3
    return median_filter(req.input, size=(size, size, 1), mode="nearest")


MOCKS = {
    "identity": _mock_identity,
    "hue-rotate": _mock_hue_rotate,
    "grayscale": _mock_grayscale,
    "checker-stamp": _mock_checker_stamp,
    "noisy-stylize": _mock_noisy_stylize,
    "median-denoise": _mock_median_denoise,
}


class ExternalEditor:
    """Run an editor command once per request.

    Protocol: a fresh work directory receives ``request.json`` plus
    ``input.png`` and ``condition.png``; the command is run with the directory
    as its only argument and must exit 0 leaving ``output.png`` of the same
    size. ``n_r`` travels in the request, so averaging happens inside the
    external process.
    """

    def __init__(self, command, timeout=300.0):
        self.argv = shlex.split(command) if isinstance(command, str) else list(command)
        if not self.argv:
            raise ValueError("empty editor command")
        self.timeout = timeout

    def __call__(self, req):
        cfg = req.config
        with tempfile.TemporaryDirectory(prefix="viewprop-edit-") as work:
            write_png_rgb(os.path.join(work, "input.png"), req.input)
            write_png_rgb(os.path.join(work, "condition.png"), req.condition)
            doc = {
                "instruction": cfg.instruction,
                "timestep_t": cfg.timestep_t,
                "diffusion_steps": cfg.diffusion_steps,
                "S_I": cfg.image_guidance,
                "S_T": cfg.text_guidance,
                "n_r": cfg.n_r,
                "seed": cfg.seed,
                "input": "input.png",
                "condition": "condition.png",
            }
            with open(os.path.join(work, "request.json"), "w") as f:
                json.dump(doc, f, indent=2)
            try:
                proc = subprocess.run(self.argv + [work], capture_output=True, text=True, timeout=self.timeout)
            except FileNotFoundError as exc:
                raise EditorError(f"editor command not found: {self.argv[0]}") from exc
            except subprocess.TimeoutExpired as exc:
                raise EditorError(f"editor timed out after {self.timeout} s") from exc
            if proc.returncode != 0:
                raise EditorError(f"editor exited with {proc.returncode}: {proc.stderr.strip()[-2000:]}")
            out_path = os.path.join(work, "output.png")
            if not os.path.isfile(out_path):
                raise EditorError(f"editor produced no output.png; stderr: {proc.stderr.strip()[-2000:]}")
            try:
                return read_png_rgb(out_path)
            except Exception as exc:
                raise EditorError(f"unreadable output.png: {exc}") from exc


class EditorHandle:
    """Counts logical invocations and sub-runs around one editor backend.

    ``spec`` is ``"mock:<name>[:<param>]"`` or ``"exec:<command line>"``; with
    ``backend`` given, ``spec`` is only a label. Only calls that return an
    image are counted.
    """

    def __init__(self, spec="mock:identity", timeout=300.0, backend=None):
        self.spec = spec
        if backend is not None:
            # any callable EditRequest -> image, e.g. a wrapped in-process model
            self.kind = "custom"
            self._backend = backend
        elif spec.startswith("mock:"):
            name, _, param = spec[5:].partition(":")
            if name not in MOCKS:
                raise ValueError(f"unknown mock editor {name!r} (known: {', '.join(MOCKS)})")
            fn = MOCKS[name]
            self.kind = "mock"
            self._backend = lambda req: fn(req, param)
        elif spec.startswith("exec:"):
            self.kind = "external"
            self._backend = ExternalEditor(spec[5:], timeout=timeout)
        else:
            raise ValueError(f"editor spec must start with 'mock:' or 'exec:', got {spec!r}")
        self._lock = threading.Lock()
        self.invocations = Counter()
        self.sub_runs = Counter()

    @property
    def invocation_counter(self):
        return sum(self.invocations.values())

    def _count(self, stage, sub_runs):
        with self._lock:
            self.invocations[stage] += 1
            self.sub_runs[stage] += sub_runs

    def _run(self, req):
        out = np.asarray(self._backend(req), dtype=np.float64)
        if out.shape != req.input.shape:
            raise EditorError(f"editor returned shape {out.shape}, expected {req.input.shape}")
        if not np.all(np.isfinite(out)):
            raise EditorError("editor returned non-finite values")
        return np.clip(out, 0.0, 1.0)

    def edit(self, req, stage="edit"):
        out = self._run(req)
        self._count(stage, 1)
        return out

    def edit_averaged(self, req, stage="edit"):
        n = req.config.n_r
        if self.kind == "external" or n == 1:
            out = self._run(req)
        else:
            runs = (self._run(EditRequest(req.input, req.condition, req.config.replace(seed=req.config.seed + k)))
                    for k in range(n))
            first = next(runs)
            # mean as offsets from the first run: exact when every run agrees
            acc = np.zeros(req.input.shape)
            for out in runs:
                acc += out - first
            out = first + acc / n
        self._count(stage, n)
        return out

    def ledger(self):
        return {"invocations": dict(sorted(self.invocations.items())),
                "sub_runs": dict(sorted(self.sub_runs.items())),
                "total": self.invocation_counter}


def edit(handle, request, stage="edit"):
    return handle.edit(request, stage)


def edit_averaged(handle, request, stage="edit"):
    """Mean of ``n_r`` edits with sub-seeds ``seed .. seed + n_r - 1``."""
    return handle.edit_averaged(request, stage)


def blend_refine(original, mixup, handle, config, stage="blend"):
    """Two averaged passes: clean the mixup against the original, then pull the result back
    toward the mixup's detail. Each pass draws its own sub-seeds."""
    first = handle.edit_averaged(EditRequest(mixup, original, config), stage)
    second_cfg = config.replace(seed=config.seed + config.n_r)
    return handle.edit_averaged(EditRequest(first, mixup, second_cfg), stage)


def post_refine(render_standin, mixup, handle, config, stage="post_refine"):
    return handle.edit_averaged(EditRequest(render_standin, mixup, config), stage)
