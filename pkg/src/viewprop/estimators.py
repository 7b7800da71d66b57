"""scikit-learn style wrappers around the propagation pipeline and mask propagation."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .editing import EditorHandle
from .geometry import FilterPolicy, propagate_mask
from .pipeline import RunConfig, run_post_refinement, run_stage1
from .propagation import PropagationConfig, PropagationState, apply_projection_mixup
from .validation import check_mask, check_views


class EditPropagator(TransformerMixin, BaseEstimator):
    """Edit a few key views with a 2D editor and carry the edit to every view.

    ``fit`` runs the whole dataset update; ``transform`` copies the fitted
    key-view edits into other views by depth-guided projection.

    Example::

        prop = EditPropagator(editor="mock:hue-rotate:40", seed=7).fit(dataset)
        prop.edited_.views[0].image
    """

    def __init__(self, editor="mock:identity", instruction="", phi=0.3, stop_ratio=0.95, warmup_iterations=10,
                 warmup_lambda=0.5, n_r=5, seed=0, enable_post_refine=True, max_reprojection_error=5.0,
                 depth_agreement_tolerance=0.01, worker_count=1):
        self.editor = editor
        self.instruction = instruction
        self.phi = phi
        self.stop_ratio = stop_ratio
        self.warmup_iterations = warmup_iterations
        self.warmup_lambda = warmup_lambda
        self.n_r = n_r
        self.seed = seed
        self.enable_post_refine = enable_post_refine
        self.max_reprojection_error = max_reprojection_error
        self.depth_agreement_tolerance = depth_agreement_tolerance
        self.worker_count = worker_count

    def _run_config(self):
        prop = PropagationConfig(self.phi, self.stop_ratio, self.seed, self.warmup_lambda, self.warmup_iterations)
        policy = FilterPolicy(self.max_reprojection_error, self.depth_agreement_tolerance)
        return RunConfig(propagation=prop, filter=policy, editor=self.editor, instruction=self.instruction,
                         n_r=self.n_r, enable_post_refine=self.enable_post_refine, worker_count=self.worker_count)

    def fit(self, X, y=None):
        manifest = check_views(X)
        config = self._run_config()
        handle = EditorHandle(config.editor)
        stage1 = run_stage1(manifest, config, handle)
        self.edited_ = run_post_refinement(stage1, stage1.original, config, handle)
        self.key_views_ = list(stage1.state.key_views)
        self.ledger_ = stage1.ledger
        self.config_ = config
        return self

    def fit_transform(self, X, y=None):
        return self.fit(X).edited_

    def transform(self, X):
        """Project the edited key views into copies of ``X`` (write-once, in key-view order)."""
        check_is_fitted(self, "edited_")
        out = check_views(X).copy()
        by_id = {v.id: v for v in self.edited_.views}
        state = PropagationState.fresh(out.views)
        for k in self.key_views_:
            for v in out.views:
                apply_projection_mixup(v, by_id[k], state, self.config_.filter)
        return out


class MaskPropagator(BaseEstimator):
    """Carry a user mask on one view to every view that sees the same region.

    ``masks_`` maps accepted view ids to boolean masks.
    """

    def __init__(self, seed_view=0, overlap_threshold=0.5, max_reprojection_error=5.0,
                 depth_agreement_tolerance=0.01):
        self.seed_view = seed_view
        self.overlap_threshold = overlap_threshold
        self.max_reprojection_error = max_reprojection_error
        self.depth_agreement_tolerance = depth_agreement_tolerance

    def fit(self, X, y):
        """``y`` is the seed-view mask."""
        manifest = check_views(X)
        by_id = {v.id: v for v in manifest.views}
        if self.seed_view not in by_id:
            raise ValueError(f"seed view {self.seed_view} not in dataset")
        seed = by_id[self.seed_view]
        mask = check_mask(y, seed.shape)
        policy = FilterPolicy(self.max_reprojection_error, self.depth_agreement_tolerance)
        self.masks_ = propagate_mask(seed, mask, manifest.views, self.overlap_threshold, policy)
        self.view_ids_ = [v.id for v in manifest.views]
        return self

    def transform(self, X=None):
        """Stack of masks in view order; views that were not accepted get an all-false mask."""
        check_is_fitted(self, "masks_")
        manifest = check_views(X) if X is not None else None
        ids = [v.id for v in manifest.views] if manifest is not None else self.view_ids_
        shapes = {v.id: v.shape for v in manifest.views} if manifest is not None else None
        out = []
        for vid in ids:
            if vid in self.masks_:
                out.append(self.masks_[vid])
            else:
                shape = shapes[vid] if shapes else next(iter(self.masks_.values())).shape
                out.append(np.zeros(shape, dtype=bool))
        return np.stack(out)
