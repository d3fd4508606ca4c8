"""Command-line entry point.

Every run writes a resolved `run_config.json` next to its results; re-running
a subcommand with `--config <that file>` reproduces the results byte-for-byte
(timestamps aside). Exit codes: 0 success, 1 validation error (bad flags,
missing or malformed inputs), 2 runtime failure.
"""

from __future__ import annotations

import json
import shutil
import sys
from pathlib import Path

import click
import numpy as np

from .archive import ArchiveError
from .backbone import (
    Backbone,
    CheckpointShapeError,
    UnknownArchError,
    extract_features,
    get_arch,
    load_backbone,
    make_reference_backbone,
    convert_checkpoint,
)
from .calibration import AdapterConfig, default_block_indices, train_calibration
from .data import (
    DatasetManifest,
    ImageDecodeError,
    ManifestError,
    ManifestEntry,
    load_manifest,
    load_manifest_images,
    load_raw_image,
    make_toy_benchmark,
    save_manifest,
)
from .evaluation import emit_report, fid_between_manifest_classes, run_benchmark
from .perturbation import PerturbationSpec
from .probe import probe_blocks_natural, select_blocks_topk, sweep_prefix_supervised
from .scoring import wepe_uncertainty, write_scores
from .theory import (
    backbone_feature_fn,
    default_sensitivity_sigma,
    differential_sensitivity_check,
    fd_sensitivity_oracle,
    mc_sensitivity,
    posterior_variance_demo,
)
from .transforms import DegradationSpec

_VALIDATION_ERRORS = (
    ManifestError,
    ImageDecodeError,
    UnknownArchError,
    CheckpointShapeError,
    ArchiveError,
    FileNotFoundError,
    ValueError,
)


def parse_blocks(text: str, depth: int) -> tuple[int, ...]:
    """'first:K', 'a-b' ranges, comma lists, or 'default'."""
    text = text.strip().lower()
    if text == "default":
        return default_block_indices(depth)
    if text.startswith("first:"):
        k = int(text.split(":", 1)[1])
        if not 1 <= k <= depth:
            raise ValueError(f"first:{k} out of range for a {depth}-block model")
        return tuple(range(k))
    blocks: set[int] = set()
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = part.split("-", 1)
            blocks.update(range(int(lo), int(hi) + 1))
        else:
            blocks.add(int(part))
    if not blocks:
        raise ValueError(f"could not parse block selection {text!r}")
    bad = [b for b in blocks if b < 0 or b >= depth]
    if bad:
        raise ValueError(f"block index {bad[0]} out of range for a {depth}-block model")
    return tuple(sorted(blocks))


def parse_seeds(text: str) -> list[int]:
    seeds = [int(s) for s in str(text).split(",") if str(s).strip() != ""]
    if not seeds:
        raise ValueError("at least one seed required")
    return seeds


def _load_model(arch_id: str, checkpoint: str | None) -> Backbone:
    arch = get_arch(arch_id)
    if checkpoint:
        return load_backbone(checkpoint, arch_id)
    if arch.init_seed is None:
        raise ValueError(f"arch {arch_id!r} requires --checkpoint")
    return make_reference_backbone(arch_id)


def _resolve(config_path: str | None, provided: dict, defaults: dict) -> dict:
    """Layer: defaults < saved run config < explicitly provided flags."""
    merged = dict(defaults)
    if config_path:
        doc = json.loads(Path(config_path).read_text(encoding="utf-8"))
        for k, v in doc.get("args", {}).items():
            if k in merged and v is not None:
                merged[k] = v
    for k, v in provided.items():
        if v is not None and (not isinstance(v, bool) or v):
            merged[k] = v
    return merged


def _write_run_config(out_dir: Path, command: str, args: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"schema": 1, "command": command, "args": args}
    with open(out_dir / "run_config.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _spec_from_args(a: dict, depth: int) -> PerturbationSpec:
    return PerturbationSpec(
        family=a["family"],
        ratio=a["ratio"],
        block_indices=parse_blocks(a["blocks"], depth),
        n_draws=a["n_draws"],
        seed=a["seed"],
        dropout_p=a["dropout_p"],
    )


@click.group()
def cli():
    """Detect AI-generated images via weight-perturbation uncertainty."""


_MODEL_OPTS = [
    click.option("--arch", default=None, help="Architecture id (default ref-tiny)."),
    click.option("--checkpoint", default=None, type=click.Path(), help="Named-tensor checkpoint."),
]
_SPEC_OPTS = [
    click.option("--family", default=None,
                 type=click.Choice(["gaussian", "uniform", "laplace", "mc_dropout"])),
    click.option("--ratio", default=None, type=float, help="Noise std as a fraction of mean |param|."),
    click.option("--blocks", default=None, help="'first:K', 'a-b', 'i,j,k', or 'default'."),
    click.option("--n-draws", default=None, type=int),
    click.option("--dropout-p", default=None, type=float),
    click.option("--seed", default=None, type=int),
]


def _add(opts):
    def deco(fn):
        for opt in reversed(opts):
            fn = opt(fn)
        return fn
    return deco


_SPEC_DEFAULTS = {"family": "gaussian", "ratio": 0.1, "blocks": "default",
                  "n_draws": 1, "dropout_p": 0.1, "seed": 0}


@cli.command()
@click.option("--manifest", default=None, type=click.Path())
@_add(_MODEL_OPTS)
@_add(_SPEC_OPTS)
@click.option("--output", default=None, type=click.Path())
@click.option("--batch-size", default=None, type=int)
@click.option("--workers", default=None, type=int)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def score(config_path, **kw):
    """Score a manifest: one similarity/uncertainty record per image."""
    a = _resolve(config_path, kw, {
        "manifest": None, "arch": "ref-tiny", "checkpoint": None,
        "output": "wepe-out", "batch_size": 64, "workers": 0, **_SPEC_DEFAULTS,
    })
    if not a["manifest"]:
        raise click.UsageError("--manifest is required")
    model = _load_model(a["arch"], a["checkpoint"])
    manifest = load_manifest(a["manifest"])
    spec = _spec_from_args(a, model.num_blocks)
    stack, kept, errors = load_manifest_images(manifest, model.arch, workers=a["workers"])
    if stack.shape[0] == 0:
        raise ValueError("no readable images in manifest")
    records = wepe_uncertainty(model, spec, stack, image_ids=[e.path for e in kept],
                               batch_size=a["batch_size"])
    out_dir = Path(a["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    write_scores(out_dir / "scores.jsonl", records)
    if errors:
        with open(out_dir / "errors.json", "w", encoding="utf-8") as fh:
            json.dump([{"path": p, "error": m} for p, m in errors], fh, indent=1, sort_keys=True)
    _write_run_config(out_dir, "score", a)
    click.echo(f"scored {len(records)} images -> {out_dir / 'scores.jsonl'}")


@cli.command()
@click.option("--manifest", default=None, type=click.Path())
@_add(_MODEL_OPTS)
@_add(_SPEC_OPTS)
@click.option("--seeds", default=None, help="Comma list, e.g. 0,1,2,3,4.")
@click.option("--degrade", default=None, help="kind:strength, e.g. jpeg:50, blur:1.0, sda, fda.")
@click.option("--degrade-seed", default=None, type=int)
@click.option("--format", "fmt", default=None, type=click.Choice(["json", "csv"]))
@click.option("--plots", is_flag=True, default=False)
@click.option("--output", default=None, type=click.Path())
@click.option("--batch-size", default=None, type=int)
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def benchmark(config_path, **kw):
    """Multi-seed evaluation with AUROC/AP/ACC overall and per generator."""
    a = _resolve(config_path, kw, {
        "manifest": None, "arch": "ref-tiny", "checkpoint": None, "seeds": "0,1,2,3,4",
        "degrade": None, "degrade_seed": 0, "fmt": "json", "plots": False,
        "output": "wepe-out", "batch_size": 64, **_SPEC_DEFAULTS,
    })
    if not a["manifest"]:
        raise click.UsageError("--manifest is required")
    model = _load_model(a["arch"], a["checkpoint"])
    manifest = load_manifest(a["manifest"])
    spec = _spec_from_args(a, model.num_blocks)
    degrade = DegradationSpec.parse(a["degrade"]) if a["degrade"] else None
    report = run_benchmark(manifest, model, spec, seeds=parse_seeds(a["seeds"]),
                           degrade=degrade, degrade_seed=a["degrade_seed"],
                           batch_size=a["batch_size"])
    out_dir = Path(a["output"])
    emit_report(report, out_dir, fmt=a["fmt"], plots=a["plots"])
    _write_run_config(out_dir, "benchmark", a)
    click.echo(f"AUROC {report.overall['auroc']['mean']:.4f} "
               f"± {report.overall['auroc']['std']:.4f} over seeds {report.seeds}")


@cli.command()
@click.option("--natural-dir", default=None, type=click.Path())
@click.option("--manifest", default=None, type=click.Path(),
              help="Alternative source; natural entries only (or both labels with --sweep).")
@_add(_MODEL_OPTS)
@click.option("--ratio", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--sample-size", default=None, type=int)
@click.option("--topk", default=None, type=int)
@click.option("--sweep", is_flag=True, default=False,
              help="Supervised first-k sweep over the manifest instead of the natural probe.")
@click.option("--plot", is_flag=True, default=False)
@click.option("--output", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def probe(config_path, **kw):
    """Rank blocks by natural-image stability; optionally select the top k."""
    a = _resolve(config_path, kw, {
        "natural_dir": None, "manifest": None, "arch": "ref-tiny", "checkpoint": None,
        "ratio": 0.1, "seed": 0, "sample_size": 64, "topk": None, "sweep": False,
        "plot": False, "output": "wepe-out",
    })
    model = _load_model(a["arch"], a["checkpoint"])
    out_dir = Path(a["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    if a["sweep"]:
        if not a["manifest"]:
            raise click.UsageError("--sweep requires --manifest with both labels")
        manifest = load_manifest(a["manifest"])
        best_k, curve = sweep_prefix_supervised(model, manifest, ratio=a["ratio"], seed=a["seed"])
        doc = {"method": "supervised_prefix", "best_k": best_k,
               "auroc_by_k": {str(k): v for k, v in sorted(curve.items())}}
        with open(out_dir / "probe_report.json", "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1, sort_keys=True)
            fh.write("\n")
        _write_run_config(out_dir, "probe", a)
        click.echo(f"best prefix k={best_k} (AUROC {curve[best_k]:.4f})")
        return
    images = _collect_natural_images(a, model)
    report = probe_blocks_natural(model, images, ratio=a["ratio"], seed=a["seed"])
    if a["topk"]:
        select_blocks_topk(report, a["topk"])
    report.save(out_dir / "probe_report.json")
    if a["plot"]:
        _plot_probe(report, out_dir / "probe_similarity.png")
    _write_run_config(out_dir, "probe", a)
    click.echo(f"probe report -> {out_dir / 'probe_report.json'}"
               + (f" selected {sorted(report.selected_blocks)}" if a["topk"] else ""))


def _collect_natural_images(a: dict, model: Backbone) -> np.ndarray:
    from .data import preprocess_array

    arch = model.arch
    tensors = []
    if a["natural_dir"]:
        paths = sorted(p for p in Path(a["natural_dir"]).iterdir() if p.is_file())
        if not paths:
            raise ValueError(f"no files in --natural-dir {a['natural_dir']}")
        for p in paths[: a["sample_size"]]:
            tensors.append(preprocess_array(load_raw_image(p), arch.img_size, arch.mean, arch.std))
    elif a["manifest"]:
        manifest = load_manifest(a["manifest"])
        naturals = [e for e in manifest.entries if e.label == 1][: a["sample_size"]]
        if not naturals:
            raise ValueError("manifest has no natural (label 1) entries")
        for e in naturals:
            tensors.append(preprocess_array(load_raw_image(manifest.resolve(e)),
                                            arch.img_size, arch.mean, arch.std))
    else:
        raise click.UsageError("provide --natural-dir or --manifest")
    return np.stack(tensors)


def _plot_probe(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    blocks = sorted(report.per_block_similarity)
    vals = [report.per_block_similarity[b] for b in blocks]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(blocks, vals, color="tab:blue")
    ax.set_xlabel("block")
    ax.set_ylabel("natural similarity (%)")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


@cli.command()
@click.option("--manifest", default=None, type=click.Path())
@click.option("--kind", default=None, type=click.Choice(["sda", "fda"]))
@click.option("--sigma", default=None, type=float)
@click.option("--seed", default=None, type=int)
@click.option("--output", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def attack(config_path, **kw):
    """Write an attacked copy of a dataset: noise on generated images only."""
    a = _resolve(config_path, kw, {"manifest": None, "kind": "sda", "sigma": 0.1,
                                   "seed": 0, "output": "wepe-attacked"})
    if not a["manifest"]:
        raise click.UsageError("--manifest is required")
    manifest = load_manifest(a["manifest"])
    spec = DegradationSpec(kind=a["kind"], strength=a["sigma"], apply_to="generated_only")
    out_dir = Path(a["output"])
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    from PIL import Image

    for i, entry in enumerate(manifest.entries):
        src = manifest.resolve(entry)
        dst_rel = f"images/{i:05d}_{Path(entry.path).name}"
        dst = out_dir / dst_rel
        if entry.label == 1:
            shutil.copyfile(src, dst)  # attacker never touches naturals
        else:
            img = spec.apply(load_raw_image(src), entry.label, seed=a["seed"], key=entry.path)
            u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
            Image.fromarray(u8).save(dst.with_suffix(".png"), format="PNG")
            dst_rel = str(Path(dst_rel).with_suffix(".png"))
        entries.append(ManifestEntry(path=dst_rel, label=entry.label, generator=entry.generator))
    attacked = DatasetManifest(name=f"{manifest.name}-{a['kind']}", entries=entries, root=out_dir)
    save_manifest(attacked, out_dir / "manifest.json")
    _write_run_config(out_dir, "attack", a)
    click.echo(f"attacked manifest -> {out_dir / 'manifest.json'}")


@cli.command()
@click.option("--manifest", default=None, type=click.Path())
@_add(_MODEL_OPTS)
@click.option("--epochs", default=None, type=int)
@click.option("--batch-size", default=None, type=int)
@click.option("--lr", default=None, type=float)
@click.option("--rank", default=None, type=int)
@click.option("--alpha", default=None, type=float)
@click.option("--ratio", default=None, type=float)
@click.option("--blocks", default=None)
@click.option("--seed", default=None, type=int)
@click.option("--no-augment", is_flag=True, default=False)
@click.option("--literal-sign", is_flag=True, default=False,
              help="Optimize the gap with the opposite (as-printed) sign.")
@click.option("--out", default=None, type=click.Path())
@click.option("--output", default=None, type=click.Path(), help="Directory for run metadata.")
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def calibrate(config_path, **kw):
    """Train low-rank adapters that widen the natural/generated gap."""
    a = _resolve(config_path, kw, {
        "manifest": None, "arch": "ref-tiny", "checkpoint": None, "epochs": 1,
        "batch_size": 16, "lr": 1e-5, "rank": 8, "alpha": 8.0, "ratio": 0.1,
        "blocks": "default", "seed": 0, "no_augment": False, "literal_sign": False,
        "out": "adapters.ckpt", "output": "wepe-out",
    })
    if not a["manifest"]:
        raise click.UsageError("--manifest is required")
    model = _load_model(a["arch"], a["checkpoint"])
    manifest = load_manifest(a["manifest"])
    config = AdapterConfig(
        rank=a["rank"], alpha=a["alpha"], learning_rate=a["lr"], epochs=a["epochs"],
        batch_size=a["batch_size"], ratio=a["ratio"],
        blocks=parse_blocks(a["blocks"], model.num_blocks),
        augment=not a["no_augment"], literal_sign=a["literal_sign"],
    )
    ckpt = train_calibration(model, manifest, config, seed=a["seed"])
    ckpt.save(a["out"])
    out_dir = Path(a["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "calibration_loss.json", "w", encoding="utf-8") as fh:
        json.dump({"loss_curve": ckpt.loss_curve}, fh, indent=1)
        fh.write("\n")
    _write_run_config(out_dir, "calibrate", a)
    click.echo(f"adapter checkpoint -> {a['out']} ({len(ckpt.loss_curve)} steps)")


@cli.command()
@click.option("--check", default=None,
              type=click.Choice(["sensitivity", "theorem1", "bvm", "bound-gap"]))
@click.option("--seed", default=None, type=int)
@click.option("--output", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def theory(config_path, **kw):
    """Run one of the verification checks and write a JSON report."""
    a = _resolve(config_path, kw, {"check": "theorem1", "seed": 0, "output": "wepe-out"})
    out_dir = Path(a["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = a["seed"]
    if a["check"] == "theorem1":
        doc = {
            "trained": differential_sensitivity_check(seed=seed),
            "control": differential_sensitivity_check(seed=seed, control=True),
        }
    elif a["check"] == "bvm":
        ns = [1, 10, 100, 1000, 10000]
        doc = {"n": ns, "posterior_variance": posterior_variance_demo(ns),
               "diffuse_prior_ratio_100_1000": posterior_variance_demo([100], 1.0, 1e6)[0]
               / posterior_variance_demo([1000], 1.0, 1e6)[0]}
    elif a["check"] == "sensitivity":
        model = make_reference_backbone("ref-micro")
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 5))))
        img = rng.normal(0.0, 1.0, (3, model.arch.img_size, model.arch.img_size)).astype(np.float32)
        fn, theta0 = backbone_feature_fn(model, img)
        sigma = default_sensitivity_sigma(theta0)
        est = mc_sensitivity(fn, theta0, sigma, n_draws=300, seed=seed)
        fd = fd_sensitivity_oracle(fn, theta0, h=1e-4)
        doc = {"mc": est.value, "mc_std_error": est.std_error, "fd": fd,
               "relative_error": abs(est.value - fd) / fd, "sigma": sigma}
    else:  # bound-gap
        from .scoring import bound_gap

        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 6))))
        worst = 0.0
        min_gap = float("inf")
        for _ in range(50):
            n, d = int(rng.integers(2, 9)), int(rng.choice([8, 32, 128]))
            feats = rng.normal(0, 1, (n, d))
            feats /= np.linalg.norm(feats, axis=1, keepdims=True)
            t = rng.normal(0, 1, d)
            gaps = bound_gap(feats, t)
            min_gap = min(min_gap, float(gaps.min()))
            worst = max(worst, float(gaps.min() < -1e-12))
        doc = {"instances": 50, "min_gap": min_gap, "all_nonnegative": worst == 0.0}
    path = out_dir / f"theory_{a['check']}.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_run_config(out_dir, "theory", a)
    click.echo(f"theory report -> {path}")


@cli.command()
@click.option("--manifest", default=None, type=click.Path())
@_add(_MODEL_OPTS)
@click.option("--output", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def fid(config_path, **kw):
    """FID of each generator's images against the manifest's naturals."""
    a = _resolve(config_path, kw, {"manifest": None, "arch": "ref-tiny",
                                   "checkpoint": None, "output": "wepe-out"})
    if not a["manifest"]:
        raise click.UsageError("--manifest is required")
    model = _load_model(a["arch"], a["checkpoint"])
    manifest = load_manifest(a["manifest"])
    results = fid_between_manifest_classes(model, manifest)
    doc = {g: {"fid": r.value, "n_natural": r.n_a, "n_generated": r.n_b}
           for g, r in sorted(results.items())}
    out_dir = Path(a["output"])
    out_dir.mkdir(parents=True, exist_ok=True)
    with open(out_dir / "fid.json", "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
    _write_run_config(out_dir, "fid", a)
    for g, row in doc.items():
        click.echo(f"{g}: FID {row['fid']:.2f}")


@cli.command("convert-checkpoint")
@click.option("--input", "input_path", required=True, type=click.Path(exists=True))
@click.option("--arch", required=True)
@click.option("--output", required=True, type=click.Path())
def convert_checkpoint_cmd(input_path, arch, output):
    """Convert a public torch state dict into the named-tensor archive."""
    convert_checkpoint(input_path, output, arch)
    click.echo(f"converted {input_path} -> {output}")


@cli.command()
@click.option("--seed", default=None, type=int)
@click.option("--n-per-class", default=None, type=int)
@click.option("--train-steps", default=None, type=int)
@click.option("--output", default=None, type=click.Path())
@click.option("--config", "config_path", default=None, type=click.Path(exists=True))
def toy(config_path, **kw):
    """Build the offline toy benchmark (images, manifests, trained backbone)."""
    a = _resolve(config_path, kw, {"seed": 0, "n_per_class": 64, "train_steps": 400,
                                   "output": "toy-benchmark"})
    bench = make_toy_benchmark(a["seed"], a["n_per_class"], a["output"],
                               train_steps=a["train_steps"])
    _write_run_config(Path(a["output"]), "toy", a)
    click.echo(f"toy benchmark in {bench.work_dir} "
               f"(backbone ckpt, train/test manifests, {2 * a['n_per_class']} test images)")


def run_command(argv=None) -> int:
    """Execute one CLI invocation; returns the exit code instead of exiting."""
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Exit as exc:
        return int(exc.exit_code)
    except click.UsageError as exc:
        click.echo(f"error: {exc.format_message()}", err=True)
        return 1
    except click.Abort:
        return 1
    except _VALIDATION_ERRORS as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # noqa: BLE001 - boundary: report and exit 2
        click.echo(f"runtime failure: {type(exc).__name__}: {exc}", err=True)
        return 2


def main() -> None:
    sys.exit(run_command())


if __name__ == "__main__":
    main()
