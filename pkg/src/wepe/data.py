"""Dataset manifests, image preprocessing, feature caching, toy benchmark.

A manifest is a JSON file listing image paths with binary labels
(1 = natural, 0 = generated) and an optional generator tag. The toy benchmark
synthesizes two procedural image families, self-trains the reference backbone
on the first one, and emits train/test manifests so the full pipeline runs
offline.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image, UnidentifiedImageError
from scipy.ndimage import gaussian_filter

from .backbone import (
    ArchSpec,
    Backbone,
    build_backbone,
    get_arch,
    save_checkpoint,
)
from .perturbation import PerturbationSpec


class ManifestError(ValueError):
    """Schema violation in a dataset manifest."""


class ImageDecodeError(ValueError):
    """File could not be decoded into an image."""


# ---------------------------------------------------------------------------
# Manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: int
    generator: str | None = None


@dataclass
class DatasetManifest:
    name: str
    entries: list[ManifestEntry]
    root: Path = field(default_factory=Path)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.label for e in self.entries], dtype=np.int64)

    def generators(self) -> list[str]:
        return sorted({e.generator for e in self.entries if e.label == 0 and e.generator})


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or "entries" not in doc:
        raise ManifestError(f"manifest {path} must be an object with an 'entries' list")
    entries = []
    seen: dict[str, int] = {}
    for i, raw in enumerate(doc["entries"]):
        where = f"{path} entry {i}"
        if not isinstance(raw, dict) or "path" not in raw or "label" not in raw:
            raise ManifestError(f"{where}: each entry needs 'path' and 'label'")
        label = raw["label"]
        if label not in (0, 1):
            raise ManifestError(f"{where} ({raw['path']!r}): label must be 0 or 1, got {label!r}")
        if raw["path"] in seen:
            raise ManifestError(
                f"{where}: duplicate path {raw['path']!r} (first at entry {seen[raw['path']]})"
            )
        seen[raw["path"]] = i
        gen = raw.get("generator")
        entries.append(ManifestEntry(path=str(raw["path"]), label=int(label),
                                     generator=str(gen) if gen is not None else None))
    if not entries:
        raise ManifestError(f"manifest {path} has no entries")
    return DatasetManifest(name=str(doc.get("name", path.stem)), entries=entries, root=path.parent)


def save_manifest(manifest: DatasetManifest, path) -> None:
    doc = {
        "name": manifest.name,
        "entries": [
            {"path": e.path, "label": e.label}
            | ({"generator": e.generator} if e.generator is not None else {})
            for e in manifest.entries
        ],
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


# ---------------------------------------------------------------------------
# Image decoding and preprocessing
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PreprocessedImage:
    tensor: np.ndarray  # (3, H, W) float32, standardized
    source_id: str


def load_raw_image(path) -> np.ndarray:
    """Decode to (H, W, 3) float64 in [0, 1]; grayscale replicates channels."""
    try:
        with Image.open(path) as im:
            im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.float64) / 255.0
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise ImageDecodeError(f"cannot decode image {path}: {exc}") from exc
    if arr.size == 0:
        raise ImageDecodeError(f"zero-size image: {path}")
    return arr


def preprocess_array(img: np.ndarray, target_size: int,
                     mean: tuple[float, ...], std: tuple[float, ...]) -> np.ndarray:
    """[0,1] HWC image -> standardized (3, target, target) float32 tensor.

    Resizes the shorter side to ceil(target * 256/224) with bicubic
    resampling, center-crops, then standardizes per channel.
    """
    u8 = np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    im = Image.fromarray(u8)
    w, h = im.size
    if w == 0 or h == 0:
        raise ImageDecodeError("zero-size image")
    short = math.ceil(target_size * 256 / 224)
    scale = short / min(w, h)
    im = im.resize((max(short, round(w * scale)), max(short, round(h * scale))), Image.BICUBIC)
    w, h = im.size
    left = (w - target_size) // 2
    top = (h - target_size) // 2
    im = im.crop((left, top, left + target_size, top + target_size))
    arr = np.asarray(im, dtype=np.float32) / 255.0
    arr = (arr - np.asarray(mean, dtype=np.float32)) / np.asarray(std, dtype=np.float32)
    return arr.transpose(2, 0, 1).copy()


def load_image(path, arch: ArchSpec, target_size: int | None = None) -> PreprocessedImage:
    """Decode + preprocess one file for the given architecture."""
    raw = load_raw_image(path)
    size = target_size or arch.img_size
    tensor = preprocess_array(raw, size, arch.mean, arch.std)
    return PreprocessedImage(tensor=tensor, source_id=str(path))


def load_manifest_images(manifest: DatasetManifest, arch: ArchSpec,
                         degrade=None, degrade_seed: int | None = None,
                         workers: int = 0):
    """Decode every manifest entry; returns (stack, kept_entries, errors).

    Unreadable files are skipped and reported as (path, message) pairs.
    An optional DegradationSpec is applied to the raw image before
    preprocessing, keyed per path for deterministic noise. `workers` > 1
    decodes in a thread pool; results keep manifest order either way.
    """

    def load_one(entry: ManifestEntry):
        raw = load_raw_image(manifest.resolve(entry))
        if degrade is not None:
            raw = degrade.apply(raw, entry.label, seed=degrade_seed, key=entry.path)
        return preprocess_array(raw, arch.img_size, arch.mean, arch.std)

    results: list = [None] * len(manifest.entries)
    if workers and workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            futures = {i: pool.submit(load_one, e) for i, e in enumerate(manifest.entries)}
        for i, fut in futures.items():
            try:
                results[i] = fut.result()
            except (ImageDecodeError, FileNotFoundError) as exc:
                results[i] = (manifest.entries[i].path, str(exc))
    else:
        for i, entry in enumerate(manifest.entries):
            try:
                results[i] = load_one(entry)
            except (ImageDecodeError, FileNotFoundError) as exc:
                results[i] = (entry.path, str(exc))

    tensors, kept, errors = [], [], []
    for entry, res in zip(manifest.entries, results):
        if isinstance(res, tuple):
            errors.append(res)
        else:
            tensors.append(res)
            kept.append(entry)
    stack = np.stack(tensors) if tensors else np.zeros((0, 3, arch.img_size, arch.img_size), np.float32)
    return stack, kept, errors


# ---------------------------------------------------------------------------
# Feature cache
# ---------------------------------------------------------------------------

def cache_root() -> Path:
    env = os.environ.get("WEPE_CACHE_DIR")
    return Path(env) if env else Path.home() / ".cache" / "wepe"


def content_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()[:20]


class FeatureCache:
    """Flat binary feature file + JSON index {image_hash -> row}.

    One cache per (arch_id, parameter fingerprint); safe for concurrent
    readers, appends happen through a single writer.
    """

    def __init__(self, directory, arch_id: str, fingerprint: str, feature_dim: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        stem = f"features__{arch_id}__{fingerprint}"
        self.bin_path = self.dir / f"{stem}.bin"
        self.index_path = self.dir / f"{stem}.json"
        self.feature_dim = feature_dim
        self._index: dict[str, int] = {}
        if self.index_path.is_file():
            with open(self.index_path, encoding="utf-8") as fh:
                self._index = json.load(fh)

    def get(self, image_hash: str) -> np.ndarray | None:
        row = self._index.get(image_hash)
        if row is None:
            return None
        with open(self.bin_path, "rb") as fh:
            fh.seek(row * self.feature_dim * 4)
            buf = fh.read(self.feature_dim * 4)
        return np.frombuffer(buf, dtype=np.float32).copy()

    def put(self, image_hash: str, vector: np.ndarray) -> None:
        vec = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vec.shape[0] != self.feature_dim:
            raise ValueError(f"expected {self.feature_dim}-d feature, got {vec.shape[0]}")
        if image_hash in self._index:
            return
        with open(self.bin_path, "ab") as fh:
            fh.write(vec.tobytes())
        self._index[image_hash] = len(self._index)
        with open(self.index_path, "w", encoding="utf-8") as fh:
            json.dump(self._index, fh, sort_keys=True)


# ---------------------------------------------------------------------------
# Toy benchmark
# ---------------------------------------------------------------------------

# Each toy "generator" shifts the palette statistics toward neutral (a
# mode-averaging artifact) and mixes in uniform texture noise; both grow
# together so distribution shift is monotone across generators.
TOY_GENERATORS: dict[str, tuple[float, float]] = {
    "gen-light": (0.70, 0.15),
    "gen-medium": (0.85, 0.22),
    "gen-heavy": (1.00, 0.32),
}
TOY_BLOCKS = (0, 1, 2)  # blocks perturbed by the toy pipeline (not the last)
_PALETTE_LO, _PALETTE_HI = 0.32, 0.68


@dataclass
class ToyBenchmark:
    train_manifest: DatasetManifest
    test_manifest: DatasetManifest
    model: Backbone
    work_dir: Path


def _toy_natural(rng: np.random.Generator, pull: float = 0.0) -> np.ndarray:
    """Family-A image: bimodal color palette, smooth field, soft shapes.

    `pull` drags the palette toward neutral gray; 0 for natural images,
    positive for the shifted generator families.
    """
    bits = rng.integers(0, 2, 3)
    base = np.where(bits == 1, _PALETTE_HI, _PALETTE_LO)
    base = base + pull * (0.5 - base)
    img = gaussian_filter(rng.normal(0.0, 1.0, (32, 32, 3)), sigma=(3.0, 3.0, 0))
    img = base + 0.45 * img / (np.abs(img).max() + 1e-9)
    yy, xx = np.mgrid[0:32, 0:32]
    for _ in range(rng.integers(1, 4)):
        cy, cx = rng.uniform(6, 26, 2)
        ry, rx = rng.uniform(3, 9, 2)
        d = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2
        mask = np.clip(1.5 - d, 0.0, 1.0)[:, :, None]
        color = np.where(bits == 1, rng.uniform(0.55, 0.9, 3), rng.uniform(0.1, 0.45, 3))
        color = color + pull * (0.5 - color)
        img = img * (1 - 0.6 * mask) + 0.6 * mask * color
    return np.clip(img, 0.0, 1.0)


def _toy_generated(rng: np.random.Generator, generator: str) -> np.ndarray:
    try:
        pull, mix = TOY_GENERATORS[generator]
    except KeyError:
        raise ValueError(f"unknown toy generator {generator!r}") from None
    img = _toy_natural(rng, pull=pull)
    img = (1 - mix) * img + mix * rng.uniform(0.0, 1.0, img.shape)
    return np.clip(img, 0.0, 1.0)


def _palette_cluster(img: np.ndarray) -> int:
    """Self-supervised cluster id of a family-A image from its mean color."""
    bits = (img.mean(axis=(0, 1)) > 0.5).astype(int)
    return int(bits[0] + 2 * bits[1] + 4 * bits[2])


def _cluster_prototypes(seed: int, k: int = 8, dim: int = 32) -> torch.Tensor:
    g = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 99))))
    q, _ = np.linalg.qr(g.normal(0.0, 1.0, (dim, dim)))
    return torch.as_tensor(q[:, :k].T.copy(), dtype=torch.float32)


def _train_toy_backbone(seed: int, arch: ArchSpec, steps: int = 400,
                        batch_size: int = 32, lr: float = 2e-3,
                        stability_weight: float = 4.0, ratio: float = 0.1,
                        temperature: float = 0.1) -> Backbone:
    """Self-train the reference backbone on streamed family-A images.

    Feature-consistency objective with two terms: (1) features of noisy views
    must land on their palette-cluster prototype (keeps the map input-
    dependent), and (2) features must stay put under fresh weight noise on
    every block (rewards parameter-flat solutions around family-A inputs).
    Training never sees a family-B image.
    """
    student = build_backbone(arch)
    prototypes = _cluster_prototypes(seed, dim=arch.dim)
    params = {k: v.clone().requires_grad_(True) for k, v in student.params.items()}
    block_names = {
        b: [n for n in params if n.startswith(f"blocks.{b}.")] for b in range(arch.depth)
    }
    opt = torch.optim.Adam(params.values(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    stream = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 55))))

    for _step in range(steps):
        raws = [_toy_natural(stream) for _ in range(batch_size)]
        clusters = torch.as_tensor([_palette_cluster(r) for r in raws])
        x = torch.as_tensor(np.stack([
            preprocess_array(r, arch.img_size, arch.mean, arch.std) for r in raws
        ]))
        x_view = x + torch.randn(x.shape, generator=gen) * 0.1
        f_view = F.normalize(student.forward(x_view, params=params), dim=-1)
        loss = F.cross_entropy((f_view @ prototypes.T) / temperature, clusters)

        noisy = dict(params)
        for b, names in block_names.items():
            with torch.no_grad():
                total = sum(params[nm].detach().abs().sum() for nm in names)
                count = sum(params[nm].numel() for nm in names)
                std = ratio * (total / count)
            for nm in names:
                noisy[nm] = params[nm] + torch.randn(params[nm].shape, generator=gen) * std
        f_clean = F.normalize(student.forward(x, params=params), dim=-1)
        f_noisy = F.normalize(student.forward(x, params=noisy), dim=-1)
        stability = (2.0 - 2.0 * (f_noisy * f_clean).sum(-1)).mean()

        opt.zero_grad()
        (loss + stability_weight * stability).backward()
        opt.step()

    trained = {k: v.detach().clone() for k, v in params.items()}
    return Backbone(arch, trained)


def _save_png(img: np.ndarray, path: Path) -> None:
    u8 = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(u8).save(path, format="PNG")


def make_toy_benchmark(seed: int, n_per_class: int, work_dir,
                       train_steps: int = 400) -> ToyBenchmark:
    """Synthesize the offline benchmark: images, manifests, trained backbone."""
    if n_per_class < 16:
        raise ValueError("n_per_class must be at least 16")
    work_dir = Path(work_dir)
    img_dir = work_dir / "images"
    try:
        img_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create toy work directory {work_dir}: {exc}") from exc

    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 2024))))
    arch = get_arch("ref-tiny")
    names = list(TOY_GENERATORS)

    def synth_split(split: str, n: int) -> list[ManifestEntry]:
        entries = []
        for i in range(n):
            img = _toy_natural(rng)
            name = f"{split}_nat_{i:04d}.png"
            _save_png(img, img_dir / name)
            entries.append(ManifestEntry(path=f"images/{name}", label=1))
        for i in range(n):
            generator = names[i % len(names)]
            img = _toy_generated(rng, generator)
            name = f"{split}_gen_{i:04d}.png"
            _save_png(img, img_dir / name)
            entries.append(ManifestEntry(path=f"images/{name}", label=0, generator=generator))
        return entries

    train_manifest = DatasetManifest(name="toy-train", entries=synth_split("train", n_per_class),
                                     root=work_dir)
    test_manifest = DatasetManifest(name="toy-test", entries=synth_split("test", n_per_class),
                                    root=work_dir)
    save_manifest(train_manifest, work_dir / "train_manifest.json")
    save_manifest(test_manifest, work_dir / "test_manifest.json")

    model = _train_toy_backbone(seed=seed, arch=arch, steps=train_steps)
    save_checkpoint(model, work_dir / "backbone.ckpt")
    return ToyBenchmark(
        train_manifest=train_manifest,
        test_manifest=test_manifest,
        model=model,
        work_dir=work_dir,
    )


def toy_perturbation_spec(seed: int = 0, family: str = "gaussian",
                          n_draws: int = 1) -> PerturbationSpec:
    """Perturbation settings used by the toy pipeline."""
    return PerturbationSpec(family=family, ratio=0.1, block_indices=TOY_BLOCKS,
                            n_draws=n_draws, seed=seed)
