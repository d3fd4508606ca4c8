"""Choosing which blocks to perturb.

Two strategies: a natural-image-only probe that perturbs one block at a time
and ranks blocks by how little the features move (perturb the most stable
ones), and a supervised sweep over first-k prefixes that picks the k with the
best validation AUROC.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .backbone import Backbone, extract_features, snapshot_params
from .evaluation import compute_auroc
from .perturbation import PerturbationSpec, perturb_model
from .scoring import wepe_uncertainty


@dataclass
class ProbeReport:
    per_block_similarity: dict[int, float]  # percent, higher = more stable
    ranks: dict[int, int]                   # 1 = highest similarity
    selected_blocks: tuple[int, ...]
    method: str
    k: int | None = None
    meta: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "method": self.method,
            "k": self.k,
            "per_block_similarity": {str(b): v for b, v in sorted(self.per_block_similarity.items())},
            "ranks": {str(b): r for b, r in sorted(self.ranks.items())},
            "selected_blocks": sorted(self.selected_blocks),
            "meta": self.meta,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")


def rank_blocks(per_block_similarity: dict[int, float]) -> dict[int, int]:
    """Rank 1..B by descending similarity; ties go to the lower block index."""
    order = sorted(per_block_similarity, key=lambda b: (-per_block_similarity[b], b))
    return {b: i + 1 for i, b in enumerate(order)}


def probe_blocks_natural(model: Backbone, natural_images, ratio: float = 0.1,
                         seed: int = 0, batch_size: int = 64) -> ProbeReport:
    """Rank blocks by natural-image feature stability under single-block noise.

    Consumes only natural images. For each block, exactly that block is
    perturbed (same std rule as scoring) and the mean clean-vs-perturbed
    cosine similarity over the probe set is recorded as a percentage.
    """
    x = np.asarray(natural_images, dtype=np.float32)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] == 0:
        raise ValueError("probe needs at least one natural image")
    snap = snapshot_params(model)
    clean = extract_features(model, x, params=snap, batch_size=batch_size).astype(np.float64)
    sims: dict[int, float] = {}
    for b in range(model.num_blocks):
        spec = PerturbationSpec(family="gaussian", ratio=ratio, block_indices=(b,), seed=seed)
        pert = perturb_model(snap, spec, 0, depth=model.num_blocks)
        feats = extract_features(model, x, params=pert.materialize(), batch_size=batch_size)
        sims[b] = float(np.mean(np.sum(clean * feats.astype(np.float64), axis=1))) * 100.0
    ranks = rank_blocks(sims)
    return ProbeReport(
        per_block_similarity=sims,
        ranks=ranks,
        selected_blocks=(),
        method="natural_topk",
        meta={"ratio": ratio, "seed": seed, "n_images": int(x.shape[0])},
    )


def select_blocks_topk(report: ProbeReport, k: int) -> set[int]:
    """The k blocks with ranks 1..k; also stamps them onto the report."""
    n_blocks = len(report.ranks)
    if not 1 <= k <= n_blocks:
        raise ValueError(f"k must be in [1, {n_blocks}], got {k}")
    chosen = {b for b, r in report.ranks.items() if r <= k}
    report.selected_blocks = tuple(sorted(chosen))
    report.k = k
    return chosen


def sweep_prefix_supervised(model: Backbone, val_manifest, ratio: float = 0.1,
                            seed: int = 0, k_range=None,
                            batch_size: int = 64) -> tuple[int, dict[int, float]]:
    """Validation AUROC for perturbing the first k blocks, for each k.

    Returns (best k, curve). Ties resolve to the smaller k. The manifest must
    contain both labels.
    """
    from .data import load_manifest_images  # local import to avoid a cycle

    if k_range is None:
        k_range = range(1, model.num_blocks + 1)
    ks = sorted(set(int(k) for k in k_range))
    if not ks or ks[0] < 1 or ks[-1] > model.num_blocks:
        raise ValueError(f"k_range must lie within [1, {model.num_blocks}]")
    stack, kept, _errors = load_manifest_images(val_manifest, model.arch)
    labels = np.array([e.label for e in kept], dtype=np.int64)
    if len(set(labels.tolist())) < 2:
        raise ValueError("validation manifest must contain both labels")
    snap = snapshot_params(model)
    curve: dict[int, float] = {}
    for k in ks:
        spec = PerturbationSpec(family="gaussian", ratio=ratio,
                                block_indices=tuple(range(k)), seed=seed)
        records = wepe_uncertainty(model, spec, stack, snapshot=snap, batch_size=batch_size)
        scores = np.array([r.mean_similarity for r in records])
        curve[k] = compute_auroc(scores, labels)
    best_k = max(ks, key=lambda k: (curve[k], -k))
    return best_k, curve
