"""Detection metrics, feature-distribution distance, benchmark orchestration.

Score orientation throughout: natural images (label 1) are expected to score
HIGHER mean similarity than generated ones, and the decision rule labels an
image generated when its score falls below the threshold.
"""

from __future__ import annotations

import csv
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .backbone import Backbone, extract_features
from .data import DatasetManifest, load_manifest_images
from .perturbation import PerturbationSpec
from .scoring import ScoreRecord, wepe_uncertainty

REPORT_SCHEMA = 1


def _check_scores(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be equal-length 1-D sequences")
    if not (np.any(y == 0) and np.any(y == 1)):
        raise ValueError("need both labels (0 and 1) to compute ranking metrics")
    return s, y


def compute_auroc(scores, labels) -> float:
    """P(natural scores above generated) + half the tie mass, via ranks."""
    s, y = _check_scores(scores, labels)
    ranks = rankdata(s)  # average ranks handle ties
    n1 = int(np.sum(y == 1))
    n0 = y.size - n1
    rank_sum = float(np.sum(ranks[y == 1]))
    return (rank_sum - n1 * (n1 + 1) / 2.0) / (n1 * n0)


def compute_ap(scores, labels) -> float:
    """Average precision with natural (label 1) as the positive class."""
    s, y = _check_scores(scores, labels)
    order = np.argsort(-s, kind="stable")
    y_sorted = y[order]
    s_sorted = s[order]
    n_pos = int(y.sum())
    tp = fp = 0
    recall_prev = 0.0
    ap = 0.0
    i = 0
    n = y.size
    while i < n:
        j = i
        while j < n and s_sorted[j] == s_sorted[i]:
            j += 1
        tp += int(y_sorted[i:j].sum())
        fp += (j - i) - int(y_sorted[i:j].sum())
        recall = tp / n_pos
        precision = tp / (tp + fp)
        ap += (recall - recall_prev) * precision
        recall_prev = recall
        i = j
    return ap


def best_threshold_accuracy(scores, labels) -> tuple[float, float]:
    """Max accuracy of the rule (generated iff score < t) over all thresholds.

    Candidates are midpoints of adjacent distinct sorted scores plus sentinels
    below and above every score; returns the smallest threshold attaining the
    maximum.
    """
    s, y = _check_scores(scores, labels)
    distinct = np.unique(s)
    candidates = [distinct[0] - 1.0]
    candidates += [(a + b) / 2.0 for a, b in zip(distinct[:-1], distinct[1:])]
    candidates += [distinct[-1] + 1.0]
    best_acc = -1.0
    best_t = candidates[0]
    n = y.size
    for t in candidates:
        pred_natural = s >= t
        acc = float(np.sum(pred_natural == (y == 1))) / n
        if acc > best_acc:
            best_acc, best_t = acc, t
    return best_acc, float(best_t)


# ---------------------------------------------------------------------------
# Feature-distribution distance
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FidResult:
    value: float
    n_a: int
    n_b: int
    feature_dim: int


def _sqrt_trace(cov_a: np.ndarray, cov_b: np.ndarray) -> float:
    """Tr((cov_a cov_b)^(1/2)) via symmetric eigendecompositions."""
    vals_b, vecs_b = np.linalg.eigh((cov_b + cov_b.T) / 2.0)
    root_b = (vecs_b * np.sqrt(np.clip(vals_b, 0.0, None))) @ vecs_b.T
    inner = root_b @ cov_a @ root_b
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    return float(np.sum(np.sqrt(np.clip(vals, 0.0, None))))


def compute_fid(features_a, features_b) -> FidResult:
    """Frechet distance between Gaussian fits of two feature sets.

    Expects raw (unnormalized) backbone features; unit-norm vectors collapse
    the covariance geometry this distance relies on.
    """
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ValueError("feature sets must be 2-D with a common dimension")
    d = a.shape[1]
    for name, feats in (("a", a), ("b", b)):
        if feats.shape[0] < d + 1:
            raise ValueError(f"set {name} needs at least dim+1={d + 1} samples, got {feats.shape[0]}")
        if not np.all(np.isfinite(feats)):
            raise ValueError(f"set {name} contains non-finite features")
    mu_a, mu_b = a.mean(axis=0), b.mean(axis=0)
    cov_a, cov_b = np.cov(a, rowvar=False), np.cov(b, rowvar=False)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * _sqrt_trace(cov_a, cov_b))
    return FidResult(value=max(value, 0.0), n_a=a.shape[0], n_b=b.shape[0], feature_dim=d)


def fid_between_manifest_classes(model: Backbone, manifest: DatasetManifest) -> dict[str, FidResult]:
    """FID of each generator's images against the manifest's natural images."""
    stack, kept, _errors = load_manifest_images(manifest, model.arch)
    feats = extract_features(model, stack, normalize=False)
    nat = feats[[i for i, e in enumerate(kept) if e.label == 1]]
    out = {}
    for gen in manifest.generators():
        rows = [i for i, e in enumerate(kept) if e.label == 0 and e.generator == gen]
        out[gen] = compute_fid(nat, feats[rows])
    return out


# ---------------------------------------------------------------------------
# Benchmark
# ---------------------------------------------------------------------------

def _agg(values: list[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std()), "per_seed": [float(v) for v in arr]}


@dataclass
class EvalReport:
    spec: PerturbationSpec
    arch_id: str
    seeds: list[int]
    overall: dict
    per_generator: dict
    errors: list
    n_images: int
    timestamp: str
    score_table: dict = field(default_factory=dict, repr=False)  # seed -> (records, labels, generators)

    def to_json_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "spec": self.spec.to_json_dict(),
            "arch_id": self.arch_id,
            "seeds": list(self.seeds),
            "overall": self.overall,
            "per_generator": self.per_generator,
            "errors": [{"path": p, "error": m} for p, m in self.errors],
            "n_images": self.n_images,
            "timestamp": self.timestamp,
        }


def run_benchmark(manifest: DatasetManifest, model: Backbone, spec: PerturbationSpec,
                  seeds: list[int], degrade=None, degrade_seed: int = 0,
                  batch_size: int = 64) -> EvalReport:
    """Score the manifest under each seed and aggregate detection metrics.

    Per seed, the perturbed snapshots are rebuilt from that seed and every
    image is scored against them. Per-generator metrics compare that
    generator's images with all natural images; per-generator accuracy uses
    the overall optimal threshold of the same seed.
    """
    spec.validate_for(model)
    stack, kept, errors = load_manifest_images(manifest, model.arch, degrade=degrade,
                                               degrade_seed=degrade_seed)
    labels = np.array([e.label for e in kept], dtype=np.int64)
    if stack.shape[0] == 0 or len(set(labels.tolist())) < 2:
        raise ValueError("manifest must provide readable images of both labels")
    gens = [e.generator or "" for e in kept]
    generators = sorted({g for g, e in zip(gens, kept) if e.label == 0 and g})

    overall_rows: dict[str, list[float]] = {"auroc": [], "ap": [], "acc": [], "threshold": []}
    per_gen_rows: dict[str, dict[str, list[float]]] = {
        g: {"auroc": [], "ap": [], "acc": []} for g in generators
    }
    score_table = {}
    nat_idx = np.where(labels == 1)[0]
    for seed in seeds:
        records = wepe_uncertainty(model, spec.with_seed(seed), stack,
                                   image_ids=[e.path for e in kept], batch_size=batch_size)
        scores = np.array([r.mean_similarity for r in records])
        score_table[seed] = (records, labels.copy(), list(gens))
        acc, threshold = best_threshold_accuracy(scores, labels)
        overall_rows["auroc"].append(compute_auroc(scores, labels))
        overall_rows["ap"].append(compute_ap(scores, labels))
        overall_rows["acc"].append(acc)
        overall_rows["threshold"].append(threshold)
        for g in generators:
            rows = np.concatenate([nat_idx, [i for i, gg in enumerate(gens)
                                             if labels[i] == 0 and gg == g]]).astype(int)
            s_g, y_g = scores[rows], labels[rows]
            per_gen_rows[g]["auroc"].append(compute_auroc(s_g, y_g))
            per_gen_rows[g]["ap"].append(compute_ap(s_g, y_g))
            pred = np.where(s_g >= threshold, 1, 0)
            per_gen_rows[g]["acc"].append(float(np.mean(pred == y_g)))

    return EvalReport(
        spec=spec,
        arch_id=model.arch_id,
        seeds=list(seeds),
        overall={k: _agg(v) for k, v in overall_rows.items()},
        per_generator={g: {k: _agg(v) for k, v in rows.items()} for g, rows in per_gen_rows.items()},
        errors=errors,
        n_images=int(stack.shape[0]),
        timestamp=time.strftime("%Y-%m-%dT%H:%M:%S"),
        score_table=score_table,
    )


def emit_report(report: EvalReport, out_dir, fmt: str = "json", plots: bool = False) -> list[Path]:
    """Write the report (json or csv) and optional per-generator histograms."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if fmt == "json":
        path = out_dir / "report.json"
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(report.to_json_dict(), fh, indent=1, sort_keys=True)
            fh.write("\n")
        written.append(path)
    elif fmt == "csv":
        path = out_dir / "report.csv"
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["generator", "seed", "auroc", "ap", "acc", "threshold"])
            for i, seed in enumerate(report.seeds):
                writer.writerow(["overall", seed,
                                 report.overall["auroc"]["per_seed"][i],
                                 report.overall["ap"]["per_seed"][i],
                                 report.overall["acc"]["per_seed"][i],
                                 report.overall["threshold"]["per_seed"][i]])
                for g, rows in sorted(report.per_generator.items()):
                    writer.writerow([g, seed, rows["auroc"]["per_seed"][i],
                                     rows["ap"]["per_seed"][i], rows["acc"]["per_seed"][i],
                                     report.overall["threshold"]["per_seed"][i]])
        written.append(path)
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    if plots:
        written.extend(_plot_histograms(report, out_dir))
    return written


def _plot_histograms(report: EvalReport, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    seed = report.seeds[0]
    records, labels, gens = report.score_table[seed]
    scores = np.array([r.mean_similarity for r in records])
    paths = []
    for g in sorted(report.per_generator):
        nat = scores[labels == 1]
        fake = scores[(labels == 0) & (np.array(gens) == g)]
        fig, ax = plt.subplots(figsize=(5, 3.2))
        bins = np.linspace(min(scores.min(), 0.0), 1.0, 40)
        ax.hist(nat, bins=bins, alpha=0.6, label="natural", color="tab:blue")
        ax.hist(fake, bins=bins, alpha=0.6, label=g, color="tab:red")
        ax.set_xlabel("mean similarity")
        ax.set_ylabel("count")
        ax.legend()
        fig.tight_layout()
        p = out_dir / f"hist_{g.replace('/', '_')}.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        paths.append(p)
    return paths
