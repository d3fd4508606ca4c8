"""Feature-extraction backbones as ordered parameter blocks + a pure forward.

A backbone is a vision transformer described by an `ArchSpec`, held as a flat
dict of named float32 tensors. One "block" is one full transformer layer
(attention + MLP + their norms, plus layerscale when the arch has it); the
patch embedding, position embedding, class token, and final norm live in
`non_block_params`. The forward pass is a pure function of (params, input),
so perturbed parameter sets can be evaluated without touching the model.

Features are the class-token embedding after the final norm, L2-normalized
unless raw features are requested.
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .archive import load_tensors, save_tensors

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)

_BLOCK_RE = re.compile(r"^blocks\.(\d+)\.")


class UnknownArchError(ValueError):
    """arch_id not present in the registry."""


class CheckpointShapeError(ValueError):
    """Checkpoint tensors do not match the declared architecture."""


# ---------------------------------------------------------------------------
# Architecture registry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchSpec:
    arch_id: str
    depth: int
    dim: int
    heads: int
    patch: int
    img_size: int
    mlp_ratio: float = 4.0
    layerscale: bool = False
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.5, 0.5, 0.5)
    init_seed: int | None = None  # set only for the built-in reference archs
    init_scale: float = 0.1

    @property
    def hidden(self) -> int:
        return int(self.dim * self.mlp_ratio)

    @property
    def num_patches(self) -> int:
        return (self.img_size // self.patch) ** 2

    def block_param_shapes(self, index: int) -> dict[str, tuple[int, ...]]:
        p = f"blocks.{index}."
        d, h = self.dim, self.hidden
        shapes: dict[str, tuple[int, ...]] = {
            p + "norm1.weight": (d,),
            p + "norm1.bias": (d,),
            p + "attn.q_proj.weight": (d, d),
            p + "attn.q_proj.bias": (d,),
            p + "attn.k_proj.weight": (d, d),
            p + "attn.k_proj.bias": (d,),
            p + "attn.v_proj.weight": (d, d),
            p + "attn.v_proj.bias": (d,),
            p + "attn.out_proj.weight": (d, d),
            p + "attn.out_proj.bias": (d,),
            p + "norm2.weight": (d,),
            p + "norm2.bias": (d,),
            p + "mlp.fc1.weight": (h, d),
            p + "mlp.fc1.bias": (h,),
            p + "mlp.fc2.weight": (d, h),
            p + "mlp.fc2.bias": (d,),
        }
        if self.layerscale:
            shapes[p + "ls1.gamma"] = (d,)
            shapes[p + "ls2.gamma"] = (d,)
        return shapes

    def param_shapes(self) -> dict[str, tuple[int, ...]]:
        """Full name -> shape map for this architecture."""
        d = self.dim
        shapes: dict[str, tuple[int, ...]] = {
            "patch_embed.weight": (d, 3, self.patch, self.patch),
            "patch_embed.bias": (d,),
            "cls_token": (1, 1, d),
            "pos_embed": (1, 1 + self.num_patches, d),
            "norm.weight": (d,),
            "norm.bias": (d,),
        }
        for i in range(self.depth):
            shapes.update(self.block_param_shapes(i))
        return shapes


ARCH_REGISTRY: dict[str, ArchSpec] = {
    # Offline reference model: every test runs without downloads.
    "ref-tiny": ArchSpec(
        arch_id="ref-tiny", depth=4, dim=32, heads=4, patch=4, img_size=32,
        init_seed=20240501,
    ),
    # Smaller variant of the reference model, kept under the finite-difference
    # parameter cap used by the sensitivity oracle.
    "ref-micro": ArchSpec(
        arch_id="ref-micro", depth=2, dim=16, heads=2, patch=8, img_size=32,
        init_seed=20240502,
    ),
    # DINOv2 ViT-L/14 shaped architecture (weights supplied externally).
    "vit-l-14": ArchSpec(
        arch_id="vit-l-14", depth=24, dim=1024, heads=16, patch=14, img_size=224,
        layerscale=True, mean=IMAGENET_MEAN, std=IMAGENET_STD,
    ),
}


def get_arch(arch_id: str) -> ArchSpec:
    try:
        return ARCH_REGISTRY[arch_id]
    except KeyError:
        raise UnknownArchError(
            f"unknown arch_id {arch_id!r}; known: {sorted(ARCH_REGISTRY)}"
        ) from None


# ---------------------------------------------------------------------------
# Torch compute graph (instantiated on the meta device; params live outside)
# ---------------------------------------------------------------------------

class _Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = dim // heads
        self.q_proj = nn.Linear(dim, dim)
        self.k_proj = nn.Linear(dim, dim)
        self.v_proj = nn.Linear(dim, dim)
        self.out_proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, d = x.shape
        def split(t):
            return t.view(b, n, self.heads, self.head_dim).transpose(1, 2)
        q, k, v = split(self.q_proj(x)), split(self.k_proj(x)), split(self.v_proj(x))
        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(self.head_dim), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, d)
        return self.out_proj(out)


class _Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x: torch.Tensor, unit_mask: torch.Tensor | None = None) -> torch.Tensor:
        h = F.gelu(self.fc1(x))
        if unit_mask is not None:
            h = h * unit_mask
        return self.fc2(h)


class _LayerScale(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x * self.gamma


class _EncoderBlock(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.norm1 = nn.LayerNorm(arch.dim)
        self.attn = _Attention(arch.dim, arch.heads)
        self.norm2 = nn.LayerNorm(arch.dim)
        self.mlp = _Mlp(arch.dim, arch.hidden)
        if arch.layerscale:
            self.ls1 = _LayerScale(arch.dim)
            self.ls2 = _LayerScale(arch.dim)
        else:
            self.ls1 = nn.Identity()
            self.ls2 = nn.Identity()

    def forward(self, x: torch.Tensor, unit_mask: torch.Tensor | None = None) -> torch.Tensor:
        x = x + self.ls1(self.attn(self.norm1(x)))
        x = x + self.ls2(self.mlp(self.norm2(x), unit_mask))
        return x


class _VisionTransformer(nn.Module):
    def __init__(self, arch: ArchSpec):
        super().__init__()
        self.arch = arch
        self.patch_embed = nn.Conv2d(3, arch.dim, kernel_size=arch.patch, stride=arch.patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, arch.dim))
        self.pos_embed = nn.Parameter(torch.zeros(1, 1 + arch.num_patches, arch.dim))
        self.blocks = nn.ModuleList(_EncoderBlock(arch) for _ in range(arch.depth))
        self.norm = nn.LayerNorm(arch.dim)

    def forward(self, x: torch.Tensor, unit_masks: list[torch.Tensor | None] | None = None) -> torch.Tensor:
        b = x.shape[0]
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(b, -1, -1), x], dim=1)
        x = x + self.pos_embed
        for i, block in enumerate(self.blocks):
            mask = unit_masks[i] if unit_masks is not None else None
            x = block(x, mask)
        return self.norm(x)[:, 0]


# ---------------------------------------------------------------------------
# Backbone: parameter store + block views
# ---------------------------------------------------------------------------

@dataclass
class ParameterBlock:
    """One transformer layer's parameters, viewed by name."""

    index: int
    tensors: dict[str, torch.Tensor]

    @property
    def mean_abs_param(self) -> float:
        total = 0.0
        count = 0
        for t in self.tensors.values():
            total += float(t.detach().double().abs().sum())
            count += t.numel()
        if count == 0:
            raise ValueError(f"block {self.index} has no parameters")
        return total / count

    @property
    def num_params(self) -> int:
        return sum(t.numel() for t in self.tensors.values())


class Backbone:
    """Immutable-after-load model: arch + named parameter tensors."""

    def __init__(self, arch: ArchSpec, params: dict[str, torch.Tensor]):
        expected = arch.param_shapes()
        _validate_param_set(params, expected)
        self.arch = arch
        self.params: dict[str, torch.Tensor] = {
            k: v.detach().to(torch.float32) for k, v in params.items()
        }
        with torch.device("meta"):
            self._module = _VisionTransformer(arch)

    @property
    def arch_id(self) -> str:
        return self.arch.arch_id

    @property
    def feature_dim(self) -> int:
        return self.arch.dim

    @property
    def num_blocks(self) -> int:
        return self.arch.depth

    @property
    def blocks(self) -> list[ParameterBlock]:
        return params_to_blocks(self.params, self.arch.depth)

    @property
    def non_block_params(self) -> dict[str, torch.Tensor]:
        return {k: v for k, v in self.params.items() if not _BLOCK_RE.match(k)}

    def fingerprint(self) -> str:
        """Content hash over parameters, used as a cache key component."""
        digest = hashlib.sha256()
        digest.update(self.arch_id.encode())
        for name in sorted(self.params):
            digest.update(name.encode())
            digest.update(self.params[name].numpy().tobytes())
        return digest.hexdigest()[:16]

    def forward(self, x: torch.Tensor, params: dict[str, torch.Tensor] | None = None,
                unit_masks: list | None = None) -> torch.Tensor:
        """Class-token embedding after the final norm (not yet normalized)."""
        call_params = self.params if params is None else params
        return torch.func.functional_call(
            self._module, call_params, (x,), {"unit_masks": unit_masks}
        )


def _validate_param_set(params: dict[str, torch.Tensor], expected: dict[str, tuple[int, ...]]) -> None:
    for name in sorted(expected):
        if name not in params:
            raise CheckpointShapeError(f"missing tensor {name!r}")
        got = tuple(params[name].shape)
        want = expected[name]
        if got != want:
            raise CheckpointShapeError(
                f"shape mismatch for tensor {name!r}: checkpoint has {got}, arch declares {want}"
            )
    extra = sorted(set(params) - set(expected))
    if extra:
        raise CheckpointShapeError(f"unexpected tensor {extra[0]!r} not declared by arch")


def params_to_blocks(params: dict[str, torch.Tensor], depth: int) -> list[ParameterBlock]:
    """Group a parameter dict into per-layer blocks, ordered by index."""
    grouped: dict[int, dict[str, torch.Tensor]] = {i: {} for i in range(depth)}
    for name, tensor in params.items():
        m = _BLOCK_RE.match(name)
        if m:
            grouped[int(m.group(1))][name] = tensor
    return [ParameterBlock(index=i, tensors=grouped[i]) for i in range(depth)]


# ---------------------------------------------------------------------------
# Construction and checkpoint IO
# ---------------------------------------------------------------------------

def _init_reference_params(arch: ArchSpec) -> dict[str, torch.Tensor]:
    """Seeded, platform-stable init for the built-in reference architectures."""
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(arch.init_seed)))
    params: dict[str, np.ndarray] = {}
    for name, shape in sorted(arch.param_shapes().items()):
        if name.endswith("norm.weight") or name.endswith("norm1.weight") or name.endswith("norm2.weight"):
            arr = np.ones(shape)
        elif name.endswith(".bias") or name.endswith("norm.bias"):
            arr = np.zeros(shape)
        elif name.endswith("ls1.gamma") or name.endswith("ls2.gamma"):
            arr = np.full(shape, 1e-2)
        else:
            arr = rng.normal(0.0, arch.init_scale, size=shape)
        params[name] = arr.astype(np.float32)
    return {k: torch.from_numpy(v) for k, v in params.items()}


def build_backbone(arch: ArchSpec, params: dict[str, torch.Tensor] | None = None) -> Backbone:
    """Backbone from an explicit ArchSpec; seeded init when params omitted."""
    if params is None:
        if arch.init_seed is None:
            raise ValueError(f"arch {arch.arch_id!r} has no built-in init; provide a checkpoint")
        params = _init_reference_params(arch)
    return Backbone(arch, params)


def make_reference_backbone(arch_id: str = "ref-tiny") -> Backbone:
    return build_backbone(get_arch(arch_id))


def load_backbone(checkpoint_path, arch_id: str) -> Backbone:
    """Load a named-tensor checkpoint and validate it against the arch."""
    arch = get_arch(arch_id)
    tensors, _meta = load_tensors(checkpoint_path)
    params = {k: torch.from_numpy(np.ascontiguousarray(v, dtype=np.float32)) for k, v in tensors.items()}
    return Backbone(arch, params)


def save_checkpoint(model: Backbone, path) -> None:
    arrays = {k: v.numpy() for k, v in model.params.items()}
    save_tensors(path, arrays, meta={"arch_id": model.arch_id})


def snapshot_params(model: Backbone) -> dict[str, torch.Tensor]:
    """Deep copy of the model parameters; safe to hold across perturbations."""
    return {k: v.detach().clone() for k, v in model.params.items()}


# ---------------------------------------------------------------------------
# Feature extraction
# ---------------------------------------------------------------------------

def _as_batch_tensor(images) -> torch.Tensor:
    if isinstance(images, torch.Tensor):
        x = images
    else:
        x = torch.as_tensor(np.asarray(images), dtype=torch.float32)
    if x.ndim == 3:
        x = x.unsqueeze(0)
    if x.ndim != 4:
        raise ValueError(f"expected (B,3,H,W) image batch, got shape {tuple(x.shape)}")
    return x.to(torch.float32)


def extract_features(model: Backbone, images, params: dict[str, torch.Tensor] | None = None,
                     normalize: bool = True, batch_size: int = 64) -> np.ndarray:
    """Features for a batch of preprocessed images, one unit-norm row each.

    `params` substitutes a parameter snapshot (e.g. a perturbed one) without
    modifying the model. `normalize=False` returns the raw class-token
    embedding, used for FID and sensitivity estimation.
    """
    x = _as_batch_tensor(images)
    if x.shape[0] == 0:
        raise ValueError("empty image batch")
    expect = (3, model.arch.img_size, model.arch.img_size)
    if tuple(x.shape[1:]) != expect:
        raise ValueError(f"expected image shape {expect}, got {tuple(x.shape[1:])}")
    outs = []
    with torch.no_grad():
        for start in range(0, x.shape[0], batch_size):
            feats = model.forward(x[start : start + batch_size], params=params)
            if normalize:
                feats = F.normalize(feats, dim=-1)
            outs.append(feats)
    return torch.cat(outs).numpy().astype(np.float32)


# ---------------------------------------------------------------------------
# External checkpoint conversion
# ---------------------------------------------------------------------------

_DROP_KEYS = {"mask_token"}


def convert_state_dict(state: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Map a public ViT state dict (fused qkv naming) onto this layout.

    Splits `attn.qkv.*` into q/k/v projections, renames `attn.proj.*` to
    `attn.out_proj.*` and `patch_embed.proj.*` to `patch_embed.*`. Raises on
    tensors this layout cannot represent (e.g. register tokens).
    """
    out: dict[str, np.ndarray] = {}
    for name, value in state.items():
        if name.startswith("backbone."):
            name = name[len("backbone."):]
        if name in _DROP_KEYS:
            continue
        if "register_tokens" in name:
            raise CheckpointShapeError(
                f"tensor {name!r} requires a register-token architecture, which is not registered"
            )
        arr = np.asarray(value, dtype=np.float32)
        if ".attn.qkv." in name:
            kind = name.rsplit(".", 1)[1]  # weight | bias
            prefix = name.split(".attn.qkv.")[0] + ".attn."
            d = arr.shape[0] // 3
            for part, chunk in zip(("q_proj", "k_proj", "v_proj"), np.split(arr, 3, axis=0)):
                out[f"{prefix}{part}.{kind}"] = chunk
            continue
        name = name.replace(".attn.proj.", ".attn.out_proj.")
        name = name.replace("patch_embed.proj.", "patch_embed.")
        out[name] = arr
    return out


def convert_checkpoint(input_path, output_path, arch_id: str) -> None:
    """Convert a torch `.pth` state dict into the named-tensor archive format."""
    arch = get_arch(arch_id)
    state = torch.load(input_path, map_location="cpu", weights_only=True)
    if isinstance(state, dict) and "state_dict" in state:
        state = state["state_dict"]
    arrays = convert_state_dict({k: v.numpy() for k, v in state.items()})
    _validate_param_set({k: torch.from_numpy(v) for k, v in arrays.items()}, arch.param_shapes())
    save_tensors(output_path, arrays, meta={"arch_id": arch_id, "converted": True})
