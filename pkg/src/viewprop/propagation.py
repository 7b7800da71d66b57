"""Sequential key-view editing: modified-ratio bookkeeping, key-view choice,
write-once projection mixup and the warm-up blend."""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from .geometry import FilterPolicy, build_correspondences, transfer_colors
from .scene import read_png_mask, write_png_mask

logger = logging.getLogger(__name__)

FINISHED = None


def derive_seed(*parts):
    """Stable 32-bit seed from integers (order matters)."""
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


@dataclass(frozen=True)
class PropagationConfig:
    phi: float = 0.3
    stop_ratio: float = 0.95
    seed: int = 0
    warmup_lambda: float = 0.5
    warmup_iterations: int = 10

    def __post_init__(self):
        if not 0 < self.phi <= 1:
            raise ValueError(f"phi must be in (0, 1], got {self.phi}")
        if not 0 < self.stop_ratio <= 1:
            raise ValueError(f"stop_ratio must be in (0, 1], got {self.stop_ratio}")
        if not 0 <= self.warmup_lambda <= 1:
            raise ValueError(f"warmup_lambda must be in [0, 1], got {self.warmup_lambda}")
        if self.warmup_iterations < 0:
            raise ValueError("warmup_iterations must be nonnegative")


@dataclass
class PropagationState:
    masks: dict
    rho: dict = field(default_factory=dict)
    key_views: list = field(default_factory=list)
    finished: bool = False
    partial: bool = False

    @classmethod
    def fresh(cls, views):
        masks = {v.id: np.zeros(v.shape, dtype=bool) for v in views}
        return cls(masks, {vid: 0.0 for vid in masks})

    @property
    def view_ids(self):
        return sorted(self.masks)

    def refresh(self, view_id):
        self.rho[view_id] = modified_ratio(self.masks[view_id])

    def mark_key(self, view_id):
        if view_id in self.key_views:
            raise ValueError(f"view {view_id} is already a key view")
        self.key_views.append(view_id)
        self.masks[view_id][:] = True
        self.refresh(view_id)

    def to_json(self, mask_dir):
        """Write masks as PNGs under ``mask_dir``; return the JSON-ready state."""
        os.makedirs(mask_dir, exist_ok=True)
        refs = {}
        for vid in self.view_ids:
            name = f"{vid:03d}_modified.png"
            write_png_mask(os.path.join(mask_dir, name), self.masks[vid])
            refs[str(vid)] = name
        return {
            "key_views": [int(k) for k in self.key_views],
            "rho": {str(k): self.rho[k] for k in self.view_ids},
            "masks": refs,
            "finished": self.finished,
            "partial": self.partial,
        }

    @classmethod
    def from_json(cls, doc, mask_dir):
        masks = {int(k): read_png_mask(os.path.join(mask_dir, name)) for k, name in doc["masks"].items()}
        state = cls(masks, {int(k): float(v) for k, v in doc["rho"].items()},
                    [int(k) for k in doc["key_views"]], doc["finished"], doc.get("partial", False))
        for vid in state.view_ids:
            if state.rho[vid] != modified_ratio(state.masks[vid]):
                raise ValueError(f"checkpoint rho for view {vid} does not match its mask")
        return state


def modified_ratio(mask):
    mask = np.asarray(mask, dtype=bool)
    return np.count_nonzero(mask) / mask.size if mask.size else 0.0


def key_view_weight(rho, phi):
    """Preference for editing a view next: rises with overlap up to ``phi``, then falls."""
    return rho if rho < phi else 2.0 * phi - rho


def select_next_key_view(state, config):
    """Next key view id, or ``FINISHED``.

    The first pick of a run is uniform over all views (seeded). Afterwards the
    non-key view with the largest weight wins, lowest id on ties.
    """
    ids = state.view_ids
    if min(state.rho[v] for v in ids) >= config.stop_ratio:
        state.finished = True
        return FINISHED
    if not state.key_views:
        rng = np.random.default_rng(derive_seed(config.seed, 1))
        return ids[int(rng.integers(len(ids)))]
    candidates = [v for v in ids if v not in state.key_views and state.rho[v] < 1.0]
    if not candidates:
        # progress guard: nothing left that could raise any ratio
        state.finished = True
        state.partial = True
        logger.warning("key-view selection stopped with partial coverage: min rho %.4f < %.4f",
                       min(state.rho.values()), config.stop_ratio)
        return FINISHED
    return max(candidates, key=lambda v: (key_view_weight(state.rho[v], config.phi), -v))


def apply_projection_mixup(target, edited_source, state, policy=None):
    """Copy the edited source's colors into the not-yet-modified pixels of ``target``.

    Updates ``target.image``, ``target.modified`` and the state's mask/ratio
    for the target. Returns the boolean array of pixels written.
    """
    mask = state.masks[target.id]
    if mask.all():
        return np.zeros_like(mask)
    cmap = build_correspondences(target, edited_source, policy)
    colors, valid = transfer_colors(cmap, edited_source.image)
    write = valid & ~mask
    target.image[write] = colors[write]
    mask |= write
    target.modified = mask.copy()
    state.refresh(target.id)
    return write


def warmup_blend(target, edited_source, lam, policy=None):
    """In the projected region: ``lam * original + (1 - lam) * projected``. Modified bits untouched."""
    if not 0 <= lam <= 1:
        raise ValueError(f"lambda must be in [0, 1], got {lam}")
    cmap = build_correspondences(target, edited_source, policy)
    colors, m_w = transfer_colors(cmap, edited_source.image)
    image = target.image
    image[m_w] = lam * image[m_w] + (1.0 - lam) * colors[m_w]
    return m_w


def run_warmup(views, editor, config, policy=None, editor_config=None, originals=None, map_fn=map):
    """Edit a seeded-random view and blend it into every other view, ``warmup_iterations`` times.

    ``views`` are updated in place. Returns the number of editor invocations.
    """
    from .editing import EditorConfig, EditorError, EditRequest

    editor_config = editor_config or EditorConfig()
    originals = originals if originals is not None else {v.id: v.image.copy() for v in views}
    by_id = {v.id: v for v in views}
    ids = sorted(by_id)
    calls = 0
    for it in range(config.warmup_iterations):
        rng = np.random.default_rng(derive_seed(config.seed, 2, it))
        vid = ids[int(rng.integers(len(ids)))]
        src = by_id[vid]
        cfg = editor_config.replace(seed=derive_seed(config.seed, 3, it))
        try:
            edited = editor.edit(EditRequest(src.image.copy(), originals[vid], cfg), stage="warmup")
        except EditorError as exc:
            raise EditorError(f"warm-up iteration {it}: {exc}") from exc
        calls += 1
        edited_src = src.with_image(edited)
        others = [by_id[i] for i in ids if i != vid]
        list(map_fn(lambda v: warmup_blend(v, edited_src, config.warmup_lambda, policy), others))
        logger.debug("warm-up %d: edited view %d", it, vid)
    return calls


def save_state(state, path):
    doc = state.to_json(os.path.join(path, "masks"))
    with open(os.path.join(path, "state.json"), "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def load_state(path):
    with open(os.path.join(path, "state.json")) as f:
        doc = json.load(f)
    return PropagationState.from_json(doc, os.path.join(path, "masks"))
