"""Evaluation: text-image direction score, adjacent-view consistency score,
geometric photometric inconsistency, and the JSON report."""
from __future__ import annotations

import hashlib
import json
import os
import shlex
import subprocess
import tempfile
from dataclasses import asdict, dataclass, field

import numpy as np

from .geometry import FilterPolicy, build_correspondences, transfer_colors
from .scene import write_png_rgb

NORM_TOL = 1e-6


class MetricError(ValueError):
    """A metric is undefined for the given inputs (never silently reported as 0)."""


class ThumbnailEmbedder:
    """Fixture-grade provider: 8x8 mean-pooled grayscale thumbnail, flattened and L2-normalized.

    ``text_embed`` hashes the text to a seeded unit vector; it carries no meaning
    beyond distinguishing strings.
    """

    def __init__(self, grid=8):
        self.grid = grid
        self.dimension = grid * grid

    def image_embed(self, image):
        gray = np.asarray(image, dtype=np.float64)[..., :3] @ np.array([0.299, 0.587, 0.114])
        rows = np.array_split(np.arange(gray.shape[0]), self.grid)
        cols = np.array_split(np.arange(gray.shape[1]), self.grid)
        thumb = np.array([[gray[np.ix_(r, c)].mean() for c in cols] for r in rows]).reshape(-1)
        n = np.linalg.norm(thumb)
        return thumb / n if n > 0 else thumb

    def text_embed(self, text):
        seed = int.from_bytes(hashlib.sha256(text.encode("utf-8")).digest()[:8], "little")
        vec = np.random.default_rng(seed).standard_normal(self.dimension)
        return vec / np.linalg.norm(vec)


class ExternalEmbedder:
    """Embedding provider behind a command, mirroring the editor protocol.

    The work directory gets ``embed_request.json`` (``kind`` = image|text,
    ``input`` image file or ``text``, and the expected ``dimension``); the
    command must write ``embedding.bin`` holding exactly ``dimension``
    little-endian float32 values.
    """

    def __init__(self, command, dimension, timeout=300.0):
        self.argv = shlex.split(command)
        self.dimension = int(dimension)
        self.timeout = timeout

    def _call(self, doc, image=None):
        with tempfile.TemporaryDirectory(prefix="viewprop-embed-") as work:
            if image is not None:
                write_png_rgb(os.path.join(work, "input.png"), image)
                doc["input"] = "input.png"
            doc["dimension"] = self.dimension
            with open(os.path.join(work, "embed_request.json"), "w") as f:
                json.dump(doc, f)
            try:
                proc = subprocess.run(self.argv + [work], capture_output=True, text=True, timeout=self.timeout)
            except (OSError, subprocess.TimeoutExpired) as exc:
                raise MetricError(f"embedding provider failed: {exc}") from exc
            if proc.returncode != 0:
                raise MetricError(f"embedding provider exited {proc.returncode}: {proc.stderr.strip()[-2000:]}")
            path = os.path.join(work, "embedding.bin")
            if not os.path.isfile(path):
                raise MetricError("embedding provider wrote no embedding.bin")
            vec = np.fromfile(path, dtype="<f4").astype(np.float64)
        if vec.shape != (self.dimension,):
            raise MetricError(f"embedding has {vec.size} values, expected {self.dimension}")
        return vec

    def image_embed(self, image):
        return self._call({"kind": "image"}, image=image)

    def text_embed(self, text):
        return self._call({"kind": "text", "text": text})


def make_provider(spec="builtin", dimension=512, timeout=300.0):
    if spec == "builtin":
        return ThumbnailEmbedder()
    if spec.startswith("exec:"):
        return ExternalEmbedder(spec[5:], dimension, timeout)
    raise ValueError(f"provider spec must be 'builtin' or 'exec:<command>', got {spec!r}")


def _checked(vec):
    vec = np.asarray(vec, dtype=np.float64)
    n = np.linalg.norm(vec)
    if n != 0 and abs(n - 1.0) > NORM_TOL:
        raise MetricError(f"provider returned a vector of norm {n:.8f}, expected unit length")
    return vec


def cosine(a, b, what="difference"):
    """Cosine similarity; a zero vector is an error, never a score."""
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise MetricError(f"degenerate direction: zero {what} difference vector")
    return float(a @ b / (na * nb))


def direction_score(orig_images, edit_images, orig_caption, edit_caption, provider):
    """Mean cosine between per-view image-embedding change and the caption-embedding change."""
    if len(orig_images) != len(edit_images) or not orig_images:
        raise MetricError("need equal-length, nonempty image lists")
    if not orig_caption or not edit_caption:
        raise MetricError("captions must be nonempty")
    text_delta = _checked(provider.text_embed(edit_caption)) - _checked(provider.text_embed(orig_caption))
    if np.linalg.norm(text_delta) == 0:
        raise MetricError("degenerate direction: captions embed identically")
    scores = []
    for o, e in zip(orig_images, edit_images):
        delta = _checked(provider.image_embed(e)) - _checked(provider.image_embed(o))
        scores.append(cosine(delta, text_delta, "image"))
    return float(np.mean(scores))


def consistency_score(orig_images, edit_images, provider):
    """Mean over adjacent pairs of cos(edited change, original change)."""
    if len(orig_images) != len(edit_images):
        raise MetricError("need equal-length image lists")
    if len(orig_images) < 2:
        raise MetricError("consistency needs at least two views")
    eo = [_checked(provider.image_embed(x)) for x in orig_images]
    ee = [_checked(provider.image_embed(x)) for x in edit_images]
    return float(np.mean([cosine(ee[i + 1] - ee[i], eo[i + 1] - eo[i], "adjacent-view")
                          for i in range(len(eo) - 1)]))


def photometric_inconsistency(views, policy=None):
    """Mean absolute per-channel color difference over valid correspondences of adjacent views.

    Both directions of each pair are pooled, so the value does not depend on pair order.
    """
    policy = policy or FilterPolicy()
    if len(views) < 2:
        raise MetricError("photometric inconsistency needs at least two views")
    total = 0.0
    count = 0
    for a, b in zip(views[:-1], views[1:]):
        for t, s in ((a, b), (b, a)):
            colors, mask = transfer_colors(build_correspondences(t, s, policy), s.image)
            if mask.any():
                total += np.abs(t.image[mask] - colors[mask]).mean(axis=-1).sum()
                count += int(mask.sum())
    if count == 0:
        raise MetricError("no valid correspondences between adjacent views")
    return float(total / count)


@dataclass
class MetricReport:
    direction_score: float = None
    consistency_score: float = None
    photometric_inconsistency: float = None
    invocations: dict = field(default_factory=dict)
    errors: dict = field(default_factory=dict)

    def to_json(self):
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())


def report(original=None, edited=None, ledger=None, provider=None, orig_caption="a photo of a scene",
           edit_caption=None, policy=None, metrics_enabled=True):
    """Collect every metric plus the invocation ledger.

    A metric that is undefined for these inputs is left as ``None`` with its
    reason under ``errors``.
    """
    rep = MetricReport(invocations=dict(ledger or {}))
    if not metrics_enabled:
        return rep
    missing = [name for name, val in (("original", original), ("edited", edited)) if val is None]
    if missing:
        raise MetricError(f"missing run artifacts: {', '.join(missing)}")
    if len(original) != len(edited):
        raise MetricError(f"view count mismatch: {len(original)} original vs {len(edited)} edited")
    provider = provider or ThumbnailEmbedder()
    orig_images = [v.image for v in original]
    edit_images = [v.image for v in edited]
    jobs = {
        "direction_score": lambda: direction_score(orig_images, edit_images, orig_caption,
                                                   edit_caption or "an edited photo of a scene", provider),
        "consistency_score": lambda: consistency_score(orig_images, edit_images, provider),
        "photometric_inconsistency": lambda: photometric_inconsistency(edited, policy),
    }
    for name, job in jobs.items():
        try:
            setattr(rep, name, job())
        except MetricError as exc:
            rep.errors[name] = str(exc)
    return rep
