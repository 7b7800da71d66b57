"""Input checks shared by the estimator wrappers and the CLI."""
from __future__ import annotations

import os

import numpy as np

from .scene import DatasetManifest, ViewRecord, load_dataset


def check_views(X):
    """Return a ``DatasetManifest`` for a manifest, a list of views, or a dataset directory."""
    if isinstance(X, DatasetManifest):
        views = X.views
        manifest = X
    elif isinstance(X, (str, os.PathLike)):
        manifest = load_dataset(X)
        views = manifest.views
    else:
        views = list(X)
        manifest = DatasetManifest(views)
    if len(views) < 1:
        raise ValueError("need at least one view")
    for v in views:
        if not isinstance(v, ViewRecord):
            raise TypeError(f"expected ViewRecord, got {type(v).__name__}")
    ids = [v.id for v in views]
    if len(set(ids)) != len(ids):
        raise ValueError("view ids must be unique")
    return manifest


def check_mask(mask, shape):
    mask = np.asarray(mask)
    if mask.shape != tuple(shape):
        raise ValueError(f"mask shape {mask.shape} does not match view shape {tuple(shape)}")
    if mask.dtype != bool:
        mask = mask > 0
    return mask


def check_same_views(fitted_ids, manifest):
    ids = [v.id for v in manifest.views]
    if ids != list(fitted_ids):
        raise ValueError(f"views {ids} differ from the fitted views {list(fitted_ids)}")
