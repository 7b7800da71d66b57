"""End-to-end orchestration: warm-up, key-view loop with mixup, blend refinement,
optional post-refinement, metrics.

No radiance field is trained here. Where the method would render the trained
field before post-refinement, the stage-1 output is used as the render stand-in;
the ledger records this.
"""
from __future__ import annotations

import json
import logging
import os
import shutil
import time
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from .editing import EditorConfig, EditorError, EditorHandle, EditRequest, blend_refine, post_refine
from .geometry import FilterPolicy
from .metrics import ThumbnailEmbedder, report
from .propagation import (FINISHED, PropagationConfig, PropagationState, apply_projection_mixup,
                          derive_seed, load_state, run_warmup, save_state, select_next_key_view)
from .scene import DatasetManifest, load_dataset, save_dataset

logger = logging.getLogger(__name__)

RENDER_STANDIN = "stage-1 blended image (no radiance field is trained; post-refinement input is a stand-in)"


class ConfigError(ValueError):
    pass


class PipelineError(RuntimeError):
    """A stage failed. ``stage`` names it; ``checkpoint`` is where a resume can pick up."""

    def __init__(self, stage, message, checkpoint=None):
        super().__init__(f"{stage}: {message}" + (f" (checkpoint: {checkpoint})" if checkpoint else ""))
        self.stage = stage
        self.checkpoint = checkpoint


@dataclass
class RunConfig:
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    filter: FilterPolicy = field(default_factory=FilterPolicy)
    editor: str = "mock:identity"
    editor_timeout: float = 300.0
    instruction: str = ""
    key_t_range: tuple = (0.5, 0.9)
    key_steps: int = 10
    blend_t: float = 0.6
    blend_steps: int = 3
    n_r: int = 5
    image_guidance: float = 1.5
    text_guidance: float = 7.5
    enable_post_refine: bool = True
    metrics_enabled: bool = True
    orig_caption: str = "a photo of a scene"
    edit_caption: str = ""
    worker_count: int = 1
    output_dir: str = "out"
    record_timings: bool = False

    def __post_init__(self):
        lo, hi = self.key_t_range
        if not 0 < lo <= hi <= 1:
            raise ConfigError(f"key timestep range must satisfy 0 < lo <= hi <= 1, got {self.key_t_range}")
        if self.worker_count < 1:
            raise ConfigError("worker_count must be at least 1")
        # surface bad editor settings now rather than mid-run
        self.blend_config(0)

    @property
    def seed(self):
        return self.propagation.seed

    def key_config(self, key_index, view_id):
        rng = np.random.default_rng(derive_seed(self.seed, 4, key_index))
        t = float(rng.uniform(*self.key_t_range))
        return EditorConfig(t, self.key_steps, self.image_guidance, self.text_guidance, 1,
                            derive_seed(self.seed, 5, view_id), self.instruction)

    def warmup_config(self):
        lo, hi = self.key_t_range
        return EditorConfig(0.5 * (lo + hi), self.key_steps, self.image_guidance, self.text_guidance, 1,
                            self.seed, self.instruction)

    def blend_config(self, view_id, salt=6):
        return EditorConfig(self.blend_t, self.blend_steps, self.image_guidance, self.text_guidance, self.n_r,
                            derive_seed(self.seed, salt, view_id), self.instruction)


@dataclass
class RunLedger:
    editor: str = ""
    seed: int = 0
    num_views: int = 0
    warmup_iterations: int = 0
    invocations: dict = field(default_factory=dict)
    sub_runs: dict = field(default_factory=dict)
    key_views: list = field(default_factory=list)
    rho_history: list = field(default_factory=list)
    partial_coverage: bool = False
    post_refine: bool = False
    timings: dict = field(default_factory=dict)

    @property
    def stage1_invocations(self):
        return sum(self.invocations.get(s, 0) for s in ("warmup", "key_edit", "blend"))

    @property
    def expected_stage1(self):
        return self.warmup_iterations + len(self.key_views) + 2 * self.num_views

    def to_dict(self, timings=False):
        doc = {
            "metadata": {"editor": self.editor, "seed": self.seed, "num_views": self.num_views,
                         "render_standin": RENDER_STANDIN},
            "invocations": dict(sorted(self.invocations.items())),
            "sub_runs": dict(sorted(self.sub_runs.items())),
            "stage1_invocations": self.stage1_invocations,
            "stage1_expected": self.expected_stage1,
            "total_invocations": sum(self.invocations.values()),
            "warmup_iterations": self.warmup_iterations,
            "key_views": list(self.key_views),
            "partial_coverage": self.partial_coverage,
            "post_refine": self.post_refine,
            "rho_history": self.rho_history,
        }
        if timings:
            doc["timings"] = self.timings
        return doc


@dataclass
class Stage1Result:
    original: DatasetManifest
    edited: DatasetManifest
    mixup: dict
    state: PropagationState
    ledger: RunLedger


@contextmanager
def _timed(ledger, stage):
    t0 = time.perf_counter()
    yield
    ledger.timings[stage] = ledger.timings.get(stage, 0.0) + time.perf_counter() - t0
    logger.info("%s finished in %.2f s", stage, ledger.timings[stage])


def _mapper(workers):
    if workers <= 1:
        return map, None
    pool = ThreadPoolExecutor(max_workers=workers)
    return pool.map, pool


# --------------------------------------------------------------------------
# checkpoints


def _write_checkpoint(path, phase, views, state, blended, handle, ledger):
    os.makedirs(os.path.join(path, "images"), exist_ok=True)
    for v in views:
        np.save(os.path.join(path, "images", f"{v.id:03d}_mixup.npy"), v.image)
    for vid, img in blended.items():
        np.save(os.path.join(path, "images", f"{vid:03d}_blended.npy"), img)
    save_state(state, path)
    doc = {"phase": phase, "blended": sorted(blended), "invocations": dict(sorted(handle.invocations.items())),
           "sub_runs": dict(sorted(handle.sub_runs.items())), "rho_history": ledger.rho_history}
    with open(os.path.join(path, "progress.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_checkpoint(path, views, handle, ledger):
    with open(os.path.join(path, "progress.json")) as f:
        doc = json.load(f)
    for v in views:
        v.image = np.load(os.path.join(path, "images", f"{v.id:03d}_mixup.npy"))
    blended = {vid: np.load(os.path.join(path, "images", f"{vid:03d}_blended.npy")) for vid in doc["blended"]}
    state = load_state(path)
    for v in views:
        v.modified = state.masks[v.id].copy()
    handle.invocations.update(doc["invocations"])
    handle.sub_runs.update(doc["sub_runs"])
    ledger.rho_history = doc["rho_history"]
    return doc["phase"], state, blended


def has_checkpoint(path):
    return path is not None and os.path.isfile(os.path.join(path, "progress.json"))


# --------------------------------------------------------------------------
# stages


def run_stage1(dataset, config, handle=None, checkpoint_dir=None, resume=False, callback=None):
    """Warm-up, key-view selection/edit/mixup loop, then blend refinement of every view.

    ``callback(state, views, key_view)`` runs after each key-view iteration.
    With ``resume`` and an existing checkpoint, work already recorded there is
    skipped; all randomness is derived from the seed, so the result matches an
    uninterrupted run.
    """
    handle = handle or EditorHandle(config.editor, config.editor_timeout)
    original = dataset.copy()
    work = dataset.copy()
    views = work.views
    by_id = {v.id: v for v in views}
    if not any(v.depth_valid.any() for v in views):
        raise ConfigError("no view has any valid depth")
    originals = {v.id: v.image.copy() for v in original.views}
    ledger = RunLedger(editor=handle.spec, seed=config.seed, num_views=len(views),
                       warmup_iterations=config.propagation.warmup_iterations)
    policy = config.filter
    pconf = config.propagation
    map_fn, pool = _mapper(config.worker_count)

    phase, state, blended = "warmup", PropagationState.fresh(views), {}
    if resume and has_checkpoint(checkpoint_dir):
        phase, state, blended = _read_checkpoint(checkpoint_dir, views, handle, ledger)
        logger.info("resuming from %s at phase %s (%d key views)", checkpoint_dir, phase, len(state.key_views))

    def checkpoint(ph):
        if checkpoint_dir is not None:
            _write_checkpoint(checkpoint_dir, ph, views, state, blended, handle, ledger)

    def fail(stage, exc):
        # the last checkpoint written is consistent; partial work since then is redone on resume
        return PipelineError(stage, str(exc), checkpoint_dir)

    try:
        if phase == "warmup":
            with _timed(ledger, "warmup"):
                try:
                    run_warmup(views, handle, pconf, policy, config.warmup_config(),
                               originals, map_fn)
                except EditorError as exc:
                    raise PipelineError("warmup", str(exc)) from exc
            phase = "selection"
            checkpoint(phase)

        if phase == "selection":
            with _timed(ledger, "selection"):
                while True:
                    k = select_next_key_view(state, pconf)
                    if k is FINISHED:
                        break
                    key = by_id[k]
                    cfg = config.key_config(len(state.key_views), k)
                    try:
                        out = handle.edit(EditRequest(key.image.copy(), originals[k], cfg), stage="key_edit")
                    except EditorError as exc:
                        raise fail("key_edit", exc) from exc
                    fresh = ~state.masks[k]
                    key.image[fresh] = out[fresh]
                    state.mark_key(k)
                    key.modified = state.masks[k].copy()
                    targets = [v for v in views if v.id not in state.key_views]
                    list(map_fn(lambda t: apply_projection_mixup(t, key, state, policy), targets))
                    ledger.rho_history.append({"key_view": k, "rho": [state.rho[i] for i in state.view_ids]})
                    logger.info("key view %d (#%d): min rho %.4f", k, len(state.key_views), min(state.rho.values()))
                    if callback is not None:
                        callback(state, views, k)
                    checkpoint(phase)
            phase = "blend"
            checkpoint(phase)

        if phase == "blend":
            with _timed(ledger, "blend"):
                todo = [v for v in views if v.id not in blended]
                batch = max(config.worker_count, 1)
                for start in range(0, len(todo), batch):
                    chunk = todo[start:start + batch]
                    try:
                        results = list(map_fn(lambda v: blend_refine(originals[v.id], v.image, handle,
                                                                     config.blend_config(v.id)), chunk))
                    except EditorError as exc:
                        raise fail("blend", exc) from exc
                    blended.update({v.id: r for v, r in zip(chunk, results)})
                    checkpoint(phase)
            phase = "done"
            checkpoint(phase)
    finally:
        if pool is not None:
            pool.shutdown()

    mixup = {v.id: v.image.copy() for v in views}
    edited = work.copy()
    for v in edited.views:
        v.image = blended[v.id]
        v.modified = np.zeros(v.shape, dtype=bool)
    ledger.key_views = list(state.key_views)
    ledger.partial_coverage = state.partial
    ledger.invocations = dict(handle.invocations)
    ledger.sub_runs = dict(handle.sub_runs)
    return Stage1Result(original, edited, mixup, state, ledger)


def run_post_refinement(stage1, original, config, handle):
    """One averaged edit per view: stage-1 image as input, mixup as condition."""
    if not config.enable_post_refine:
        return stage1.edited
    refined = stage1.edited.copy()
    map_fn, pool = _mapper(config.worker_count)
    try:
        outs = list(map_fn(lambda v: post_refine(v.image, stage1.mixup[v.id], handle,
                                                 config.blend_config(v.id, salt=7)), refined.views))
    except EditorError as exc:
        raise PipelineError("post_refine", str(exc)) from exc
    finally:
        if pool is not None:
            pool.shutdown()
    for v, img in zip(refined.views, outs):
        v.image = img
    stage1.ledger.invocations = dict(handle.invocations)
    stage1.ledger.sub_runs = dict(handle.sub_runs)
    stage1.ledger.post_refine = True
    return refined


def run_all(dataset_path, config, resume=False, handle=None, callback=None):
    """Run every stage and write ``dataset/``, ``ledger.json``, ``metrics.json`` and ``checkpoint/``."""
    out = config.output_dir
    ckpt = os.path.join(out, "checkpoint")
    dataset = load_dataset(dataset_path) if isinstance(dataset_path, (str, os.PathLike)) else dataset_path
    if not resume and os.path.isdir(out):
        for name in ("dataset", "checkpoint", "ledger.json", "metrics.json"):
            p = os.path.join(out, name)
            if os.path.isdir(p):
                shutil.rmtree(p)
            elif os.path.exists(p):
                os.remove(p)
    os.makedirs(ckpt, exist_ok=True)
    handle = handle or EditorHandle(config.editor, config.editor_timeout)

    stage1 = run_stage1(dataset, config, handle, ckpt, resume=resume, callback=callback)
    ledger = stage1.ledger
    with _timed(ledger, "post_refine"):
        final = run_post_refinement(stage1, stage1.original, config, handle)
    save_dataset(final, os.path.join(out, "dataset"))
    with open(os.path.join(out, "ledger.json"), "w") as f:
        json.dump(ledger.to_dict(timings=config.record_timings), f, indent=2, sort_keys=True)
        f.write("\n")

    # evaluation only from here on: no editor calls past this point
    calls_before = handle.invocation_counter
    with _timed(ledger, "metrics"):
        rep = report(stage1.original.views, final.views, ledger.to_dict()["invocations"], ThumbnailEmbedder(),
                     config.orig_caption, config.edit_caption or config.instruction or None, config.filter,
                     config.metrics_enabled)
    assert handle.invocation_counter == calls_before
    for name, err in rep.errors.items():
        logger.warning("metric %s undefined: %s", name, err)
    rep.write(os.path.join(out, "metrics.json"))
    return out
