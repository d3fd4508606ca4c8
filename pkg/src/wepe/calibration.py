"""Calibration fine-tuning: widen the natural/generated similarity gap.

Low-rank adapters on the per-block attention query/value projections are the
only trainable parameters. Each optimization step draws a fresh weight
perturbation, computes clean-vs-perturbed feature similarity per image, and
minimizes mean(similarity of generated) - mean(similarity of natural), which
pushes natural images toward perturbation-stable features and generated ones
away.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field, asdict

import numpy as np
import torch
import torch.nn.functional as F

from .archive import load_tensors, save_tensors
from .backbone import Backbone
from .data import DatasetManifest, load_raw_image, preprocess_array
from .perturbation import PerturbationSpec, perturb_model
from .transforms import gaussian_blur, jpeg_degrade


class CalibrationDivergence(RuntimeError):
    """Training loss became non-finite."""


def default_block_indices(depth: int) -> tuple[int, ...]:
    """Default perturbation targets: first 19 of 24 blocks, scaled otherwise."""
    k = 19 if depth == 24 else math.ceil(0.8 * depth)
    return tuple(range(min(k, depth)))


@dataclass(frozen=True)
class AdapterConfig:
    rank: int = 8
    alpha: float = 8.0
    target_tensors: tuple[str, ...] = ("q_proj", "v_proj")
    learning_rate: float = 1e-5
    betas: tuple[float, float] = (0.9, 0.99)
    weight_decay: float = 0.01
    epochs: int = 1
    batch_size: int = 16
    ratio: float = 0.1
    family: str = "gaussian"
    blocks: tuple[int, ...] | None = None  # None -> default_block_indices(depth)
    augment: bool = True
    literal_sign: bool = False  # optimize the printed loss direction instead

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError("adapter rank must be >= 1")

    def to_json_dict(self) -> dict:
        d = asdict(self)
        d["target_tensors"] = list(self.target_tensors)
        d["betas"] = list(self.betas)
        d["blocks"] = list(self.blocks) if self.blocks is not None else None
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class LoraAdapters:
    """Low-rank factors for the targeted projection weights.

    Each targeted weight W (out x in) gets A (rank x in, random zero-mean) and
    B (out x rank, zeros), contributing (alpha/rank) * B @ A. Zero B means the
    effective parameters start exactly at the base model.
    """

    def __init__(self, model: Backbone, config: AdapterConfig, seed: int = 0):
        self.config = config
        self.arch_id = model.arch_id
        self.factors: dict[str, tuple[torch.Tensor, torch.Tensor]] = {}
        rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 4242))))
        targets = [
            name for name in sorted(model.params)
            if name.endswith(".weight") and any(f".attn.{t}." in name for t in config.target_tensors)
        ]
        if not targets:
            raise ValueError(
                f"architecture {model.arch_id!r} exposes none of the targeted projections "
                f"{config.target_tensors}"
            )
        for name in targets:
            out_dim, in_dim = model.params[name].shape
            a = torch.as_tensor(rng.normal(0.0, 0.02, (config.rank, in_dim)).astype(np.float32))
            b = torch.zeros(out_dim, config.rank)
            self.factors[name] = (a.requires_grad_(True), b.requires_grad_(True))

    def parameters(self) -> list[torch.Tensor]:
        return [t for pair in self.factors.values() for t in pair]

    def num_params(self) -> int:
        return sum(t.numel() for t in self.parameters())

    def effective_params(self, base: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        """Base parameters with adapter deltas merged in (differentiable)."""
        scale = self.config.alpha / self.config.rank
        out = dict(base)
        for name, (a, b) in self.factors.items():
            out[name] = base[name] + scale * (b @ a)
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for name, (a, b) in self.factors.items():
            arrays[f"{name}.lora_a"] = a.detach().numpy()
            arrays[f"{name}.lora_b"] = b.detach().numpy()
        return arrays


def attach_adapters(model: Backbone, config: AdapterConfig, seed: int = 0) -> LoraAdapters:
    """Create zero-initialized adapters for the model's q/v projections."""
    return LoraAdapters(model, config, seed=seed)


def calibration_gap_loss(sim_natural, sim_generated, literal_sign: bool = False):
    """Similarity-gap objective over one batch, split by label.

    Default returns mean(sim_generated) - mean(sim_natural): minimizing it
    raises confidence on natural images and lowers it on generated ones. The
    literal form returns the negation. Accepts torch tensors (differentiable)
    or plain sequences.
    """
    nat = sim_natural if isinstance(sim_natural, torch.Tensor) else torch.as_tensor(
        np.asarray(sim_natural, dtype=np.float64))
    gen = sim_generated if isinstance(sim_generated, torch.Tensor) else torch.as_tensor(
        np.asarray(sim_generated, dtype=np.float64))
    if nat.numel() == 0 or gen.numel() == 0:
        raise ValueError("both similarity batches must be nonempty")
    gap = gen.mean() - nat.mean()
    loss = -gap if literal_sign else gap
    return loss if (isinstance(sim_natural, torch.Tensor) or isinstance(sim_generated, torch.Tensor)) else float(loss)


@dataclass
class CalibrationCheckpoint:
    adapters: dict[str, np.ndarray]
    config: AdapterConfig
    seed: int
    loss_curve: list[float] = field(default_factory=list)
    arch_id: str = ""

    def save(self, path) -> None:
        meta = {
            "config": self.config.to_json_dict(),
            "config_hash": self.config.config_hash(),
            "seed": self.seed,
            "loss_curve": self.loss_curve,
            "arch_id": self.arch_id,
        }
        save_tensors(path, self.adapters, meta=meta)

    @classmethod
    def load(cls, path) -> "CalibrationCheckpoint":
        arrays, meta = load_tensors(path)
        cfg = meta.get("config", {})
        cfg["target_tensors"] = tuple(cfg.get("target_tensors", ("q_proj", "v_proj")))
        cfg["betas"] = tuple(cfg.get("betas", (0.9, 0.99)))
        if cfg.get("blocks") is not None:
            cfg["blocks"] = tuple(cfg["blocks"])
        return cls(adapters=arrays, config=AdapterConfig(**cfg), seed=int(meta.get("seed", 0)),
                   loss_curve=list(meta.get("loss_curve", [])), arch_id=meta.get("arch_id", ""))


def apply_checkpoint(model: Backbone, ckpt: CalibrationCheckpoint) -> dict[str, torch.Tensor]:
    """Parameter dict with the checkpoint's adapter deltas merged in."""
    scale = ckpt.config.alpha / ckpt.config.rank
    out = dict(model.params)
    for key, arr in ckpt.adapters.items():
        if not key.endswith(".lora_a"):
            continue
        name = key[: -len(".lora_a")]
        a = torch.from_numpy(ckpt.adapters[f"{name}.lora_a"])
        b = torch.from_numpy(ckpt.adapters[f"{name}.lora_b"])
        out[name] = model.params[name] + scale * (b @ a)
    return out


def _augment_raw(img: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random JPEG (quality 30..100) and Gaussian blur (sigma 0..3), p=0.5 each."""
    out = img
    if rng.random() < 0.5:
        out = jpeg_degrade(out, int(rng.integers(30, 101)))
    if rng.random() < 0.5:
        out = gaussian_blur(out, float(rng.uniform(0.0, 3.0)))
    return out


def train_calibration(model: Backbone, train_manifest: DatasetManifest,
                      config: AdapterConfig, seed: int = 0) -> CalibrationCheckpoint:
    """Fit adapters on a labeled manifest; the backbone stays frozen.

    Batches are stratified (half natural, half generated). Every step draws a
    fresh perturbation of the adapter-merged parameters; only the unperturbed
    branch carries gradients.
    """
    arch = model.arch
    raws, labels = [], []
    for entry in train_manifest.entries:
        raws.append(load_raw_image(train_manifest.resolve(entry)))
        labels.append(entry.label)
    labels = np.asarray(labels)
    nat_idx = np.where(labels == 1)[0]
    gen_idx = np.where(labels == 0)[0]
    if len(nat_idx) == 0 or len(gen_idx) == 0:
        raise ValueError("calibration needs both labels in the training manifest")

    adapters = attach_adapters(model, config, seed=seed)
    opt = torch.optim.AdamW(adapters.parameters(), lr=config.learning_rate,
                            betas=config.betas, weight_decay=config.weight_decay)
    blocks = config.blocks if config.blocks is not None else default_block_indices(model.num_blocks)
    half = max(1, config.batch_size // 2)
    steps_per_epoch = max(1, math.ceil((len(nat_idx) + len(gen_idx)) / (2 * half)))
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, 31337))))
    loss_curve: list[float] = []

    step = 0
    for _epoch in range(config.epochs):
        for _ in range(steps_per_epoch):
            batch_idx = np.concatenate([
                rng.choice(nat_idx, size=min(half, len(nat_idx)), replace=False),
                rng.choice(gen_idx, size=min(half, len(gen_idx)), replace=False),
            ])
            batch_labels = labels[batch_idx]
            imgs = []
            for i in batch_idx:
                raw = _augment_raw(raws[i], rng) if config.augment else raws[i]
                imgs.append(preprocess_array(raw, arch.img_size, arch.mean, arch.std))
            x = torch.as_tensor(np.stack(imgs))

            effective = adapters.effective_params(model.params)
            f_student = F.normalize(model.forward(x, params=effective), dim=-1)
            with torch.no_grad():
                frozen = {k: v.detach() for k, v in effective.items()}
                step_spec = PerturbationSpec(family=config.family, ratio=config.ratio,
                                             block_indices=blocks,
                                             seed=_step_seed(seed, step))
                perturbed = perturb_model(frozen, step_spec, 0, depth=model.num_blocks).materialize()
                f_pert = F.normalize(model.forward(x, params=perturbed), dim=-1)
            sims = (f_student * f_pert).sum(-1)
            loss = calibration_gap_loss(sims[torch.as_tensor(batch_labels == 1)],
                                        sims[torch.as_tensor(batch_labels == 0)],
                                        literal_sign=config.literal_sign)
            if not torch.isfinite(loss):
                raise CalibrationDivergence(f"non-finite loss at step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            loss_curve.append(float(loss.detach()))
            step += 1

    return CalibrationCheckpoint(adapters=adapters.state_arrays(), config=config,
                                 seed=seed, loss_curve=loss_curve, arch_id=model.arch_id)


def _step_seed(seed: int, step: int) -> int:
    blob = f"calib:{seed}:{step}".encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")
