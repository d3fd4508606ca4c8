"""Uncertainty scores from clean-vs-perturbed feature similarity.

The decision score for an image is the mean cosine similarity between its
feature under the original parameters and under each of `n_draws` perturbed
parameter sets; uncertainty is `2 - 2 * mean_similarity`, the upper bound on
the variance of teacher-similarity predictions that motivates the method.
Perturbed snapshots are built once per run and reused for every image, so a
whole test set costs two forward passes per draw.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .backbone import Backbone, extract_features, snapshot_params
from .perturbation import PerturbationSpec, mc_dropout_features, perturb_model


@dataclass(frozen=True)
class ScoreRecord:
    image_id: str
    mean_similarity: float
    uncertainty: float
    n_draws: int
    spec_hash: str


def make_record(image_id: str, similarities, spec_hash: str) -> ScoreRecord:
    """Record from the per-draw similarities of one image."""
    sims = np.asarray(similarities, dtype=np.float64)
    if sims.size == 0:
        raise ValueError("at least one similarity draw required")
    s_bar = float(sims.mean())
    return ScoreRecord(
        image_id=image_id,
        mean_similarity=s_bar,
        uncertainty=2.0 - 2.0 * s_bar,
        n_draws=int(sims.size),
        spec_hash=spec_hash,
    )


def wepe_uncertainty(model: Backbone, spec: PerturbationSpec, images,
                     image_ids: list[str] | None = None,
                     snapshot: dict | None = None,
                     batch_size: int = 64) -> list[ScoreRecord]:
    """Score a batch of preprocessed images against fixed perturbed snapshots.

    All images share the same `n_draws` perturbed parameter sets (weight noise)
    or fixed dropout masks (mc_dropout family).
    """
    spec.validate_for(model)
    x = np.asarray(images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    n = x.shape[0]
    if image_ids is None:
        image_ids = [str(i) for i in range(n)]
    if len(image_ids) != n:
        raise ValueError("image_ids length does not match image count")

    base = snapshot if snapshot is not None else snapshot_params(model)
    clean = extract_features(model, x, params=base, batch_size=batch_size).astype(np.float64)

    sims = np.zeros((n, spec.n_draws), dtype=np.float64)
    for k in range(spec.n_draws):
        if spec.family == "mc_dropout":
            pert = mc_dropout_features(model, x, spec.dropout_p, spec.seed,
                                       draw_index=k, batch_size=batch_size)
        else:
            snap = perturb_model(base, spec, k, depth=model.num_blocks)
            pert = extract_features(model, x, params=snap.materialize(), batch_size=batch_size)
        sims[:, k] = np.sum(clean * pert.astype(np.float64), axis=1)

    h = spec.spec_hash()
    return [make_record(image_ids[i], sims[i], h) for i in range(n)]


def ensemble_variance(predictions) -> float:
    """Population variance of a list of scalar predictions."""
    preds = np.asarray(predictions, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("at least one prediction required")
    mu = preds.mean()
    return float(np.mean((preds - mu) ** 2))


def bound_gap(perturbed_features, teacher_feature) -> np.ndarray:
    """Per-draw slack of the similarity-variance upper bound.

    For each draw k with deviation g_k = f_k - mean_j f_j and surrogate teacher
    vector t, the gap is ||g_k||^2 ||t||^2 - (g_k . t)^2, equal to
    ||g_k||^2 ||t||^2 sin^2(angle(g_k, t)). Both forms are computed and must
    agree to 1e-9; the gap is nonnegative by Cauchy-Schwarz.
    """
    feats = np.asarray(perturbed_features, dtype=np.float64)
    t = np.asarray(teacher_feature, dtype=np.float64).reshape(-1)
    if feats.ndim != 2 or feats.shape[0] < 2:
        raise ValueError("need at least two perturbed feature vectors")
    if feats.shape[1] != t.shape[0]:
        raise ValueError(f"dimension mismatch: features are {feats.shape[1]}-d, teacher is {t.shape[0]}-d")
    g = feats - feats.mean(axis=0, keepdims=True)
    g_sq = np.sum(g * g, axis=1)
    t_sq = float(t @ t)
    inner = g @ t
    gap_product = g_sq * t_sq - inner**2

    cos_sq = np.zeros_like(g_sq)
    nonzero = (g_sq > 0) & (t_sq > 0)
    cos_sq[nonzero] = inner[nonzero] ** 2 / (g_sq[nonzero] * t_sq)
    gap_sine = g_sq * t_sq * (1.0 - cos_sq)
    if np.max(np.abs(gap_product - gap_sine)) > 1e-9:
        raise AssertionError("bound-gap identities disagree beyond 1e-9")
    return np.maximum(gap_product, 0.0)


def decide(record: ScoreRecord | float, threshold: float) -> str:
    """Label an image from its decision score: generated iff score < threshold."""
    score = record.mean_similarity if isinstance(record, ScoreRecord) else float(record)
    return "generated" if score < threshold else "natural"


# ---------------------------------------------------------------------------
# Score cache (JSON lines, one file per (manifest, spec) pair)
# ---------------------------------------------------------------------------

def score_cache_path(cache_dir, manifest_name: str, spec_hash: str) -> Path:
    return Path(cache_dir) / f"scores__{manifest_name}__{spec_hash}.jsonl"


def write_scores(path, records: list[ScoreRecord]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(json.dumps({
                "image_id": r.image_id,
                "mean_similarity": r.mean_similarity,
                "uncertainty": r.uncertainty,
                "n_draws": r.n_draws,
                "spec_hash": r.spec_hash,
            }, sort_keys=True) + "\n")


def read_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            d = json.loads(line)
            records.append(ScoreRecord(
                image_id=d["image_id"],
                mean_similarity=float(d["mean_similarity"]),
                uncertainty=float(d["uncertainty"]),
                n_draws=int(d["n_draws"]),
                spec_hash=d["spec_hash"],
            ))
    return records
