"""Audio spectrogram Transformer with optional adapters and prompt tokens.

Inputs are spectrograms of shape ``[T, F]`` or batches ``[B, T, F]``. Every
forward function accepts either a single sequence ``[S, d]`` or a batch
``[B, S, d]``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from . import autodiff as ad
from .adapters import (
    Adapter,
    PromptBank,
    adapter_forward,
    adapter_shapes,
    init_adapter,
    init_prompts,
    prompt_inject,
    prompt_strip,
)
from .autodiff import Tensor
from .errors import ConfigurationError, DimensionError

Variant = Literal["vanilla", "aat-m", "aat-ms"]
VARIANTS = ("vanilla", "aat-m", "aat-ms")
# Init scale of the CLS token and positional table. Large enough that a
# frozen random backbone still separates patch positions.
POS_STD = 1.0


@dataclass(frozen=True)
class ModelConfig:
    depth: int
    embed_dim: int
    num_heads: int
    mlp_ratio: int
    patch_size: int
    input_time: int
    input_freq: int
    num_classes: int
    adapter_dim: int = 0
    prompt_length: int = 0
    variant: Variant = "vanilla"
    ln_eps: float = 1e-6

    def __post_init__(self):
        for name in ("depth", "embed_dim", "num_heads", "mlp_ratio", "patch_size", "input_time", "input_freq", "num_classes"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value <= 0:
                raise ConfigurationError(f"{name} must be a positive integer, got {value!r}")
        if self.adapter_dim < 0 or self.prompt_length < 0:
            raise ConfigurationError("adapter_dim and prompt_length must be nonnegative")
        if self.embed_dim % self.num_heads:
            raise ConfigurationError(f"num_heads={self.num_heads} does not divide embed_dim={self.embed_dim}")
        if self.input_time % self.patch_size or self.input_freq % self.patch_size:
            raise ConfigurationError(
                f"input {self.input_time}x{self.input_freq} is not divisible by patch_size={self.patch_size}"
            )
        if self.variant not in VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.variant != "vanilla" and not 0 < self.adapter_dim < self.embed_dim:
            raise ConfigurationError(f"variant {self.variant} needs 0 < adapter_dim < embed_dim")

    @property
    def grid(self) -> tuple[int, int]:
        return self.input_time // self.patch_size, self.input_freq // self.patch_size

    @property
    def num_patches(self) -> int:
        t, f = self.grid
        return t * f

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def hidden_dim(self) -> int:
        return self.mlp_ratio * self.embed_dim

    def replace(self, **changes) -> ModelConfig:
        return dataclasses.replace(self, **changes)


PRESETS: dict[str, ModelConfig] = {
    "tiny": ModelConfig(
        depth=2, embed_dim=8, num_heads=2, mlp_ratio=2, patch_size=2,
        input_time=8, input_freq=8, num_classes=3, adapter_dim=2, prompt_length=2,
    ),
    "tiny-plus": ModelConfig(
        depth=4, embed_dim=32, num_heads=4, mlp_ratio=2, patch_size=8,
        input_time=64, input_freq=64, num_classes=4, adapter_dim=8, prompt_length=12,
    ),
    "ast-base": ModelConfig(
        depth=12, embed_dim=768, num_heads=12, mlp_ratio=4, patch_size=16,
        input_time=1024, input_freq=128, num_classes=50, adapter_dim=192, prompt_length=12,
    ),
}


@dataclass
class PatchEmbed:
    weight: Tensor
    bias: Tensor


@dataclass
class PositionalState:
    cls_token: Tensor
    pos_embed: Tensor


@dataclass
class TransformerBlock:
    norm1_gamma: Tensor
    norm1_beta: Tensor
    qkv_weight: Tensor
    qkv_bias: Tensor
    proj_weight: Tensor
    proj_bias: Tensor
    norm2_gamma: Tensor
    norm2_beta: Tensor
    fc1_weight: Tensor
    fc1_bias: Tensor
    fc2_weight: Tensor
    fc2_bias: Tensor
    num_heads: int
    eps: float = 1e-6
    mlp_adapter: Adapter | None = None
    spatial_adapter: Adapter | None = None

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        params = {
            f"{prefix}norm1.gamma": self.norm1_gamma,
            f"{prefix}norm1.beta": self.norm1_beta,
            f"{prefix}attn.qkv.weight": self.qkv_weight,
            f"{prefix}attn.qkv.bias": self.qkv_bias,
            f"{prefix}attn.proj.weight": self.proj_weight,
            f"{prefix}attn.proj.bias": self.proj_bias,
            f"{prefix}norm2.gamma": self.norm2_gamma,
            f"{prefix}norm2.beta": self.norm2_beta,
            f"{prefix}mlp.fc1.weight": self.fc1_weight,
            f"{prefix}mlp.fc1.bias": self.fc1_bias,
            f"{prefix}mlp.fc2.weight": self.fc2_weight,
            f"{prefix}mlp.fc2.bias": self.fc2_bias,
        }
        if self.mlp_adapter is not None:
            params.update(self.mlp_adapter.named_parameters(f"{prefix}mlp_adapter."))
        if self.spatial_adapter is not None:
            params.update(self.spatial_adapter.named_parameters(f"{prefix}spatial_adapter."))
        return params


@dataclass
class TaskHead:
    norm_gamma: Tensor
    norm_beta: Tensor
    weight: Tensor
    bias: Tensor
    eps: float = 1e-6


@dataclass
class AudioTransformer:
    config: ModelConfig
    patch_embed: PatchEmbed
    positional: PositionalState
    blocks: list[TransformerBlock]
    head: TaskHead
    prompts: PromptBank | None = None
    variant: Variant = "vanilla"

    def named_parameters(self) -> dict[str, Tensor]:
        params = {
            "patch_embed.weight": self.patch_embed.weight,
            "patch_embed.bias": self.patch_embed.bias,
            "cls_token": self.positional.cls_token,
            "pos_embed": self.positional.pos_embed,
        }
        for i, block in enumerate(self.blocks):
            params.update(block.named_parameters(f"blocks.{i}."))
        if self.prompts is not None:
            params.update(self.prompts.named_parameters())
        params.update({
            "head.norm.gamma": self.head.norm_gamma,
            "head.norm.beta": self.head.norm_beta,
            "head.fc.weight": self.head.weight,
            "head.fc.bias": self.head.bias,
        })
        return params

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(state)
        unexpected = set(state) - set(params)
        if missing or unexpected:
            raise ConfigurationError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, p in params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()


def param_inventory(
    config: ModelConfig,
    mlp_adapters: bool = False,
    spatial_adapters: bool = False,
    prompts: bool = False,
) -> dict[str, tuple[int, ...]]:
    """Names and shapes of every parameter, without allocating anything.

    Key order matches :meth:`AudioTransformer.named_parameters`.
    """
    d, hidden, p2 = config.embed_dim, config.hidden_dim, config.patch_size**2
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (p2, d),
        "patch_embed.bias": (d,),
        "cls_token": (1, d),
        "pos_embed": (config.num_patches + 1, d),
    }
    for i in range(config.depth):
        pre = f"blocks.{i}."
        shapes.update({
            pre + "norm1.gamma": (d,),
            pre + "norm1.beta": (d,),
            pre + "attn.qkv.weight": (d, 3 * d),
            pre + "attn.qkv.bias": (3 * d,),
            pre + "attn.proj.weight": (d, d),
            pre + "attn.proj.bias": (d,),
            pre + "norm2.gamma": (d,),
            pre + "norm2.beta": (d,),
            pre + "mlp.fc1.weight": (d, hidden),
            pre + "mlp.fc1.bias": (hidden,),
            pre + "mlp.fc2.weight": (hidden, d),
            pre + "mlp.fc2.bias": (d,),
        })
        if mlp_adapters:
            shapes.update({pre + "mlp_adapter." + k: v for k, v in adapter_shapes(d, config.adapter_dim).items()})
        if spatial_adapters:
            shapes.update({pre + "spatial_adapter." + k: v for k, v in adapter_shapes(d, config.adapter_dim).items()})
    if prompts:
        shapes.update({f"prompts.{i}": (config.prompt_length, d) for i in range(config.depth)})
    shapes.update({
        "head.norm.gamma": (d,),
        "head.norm.beta": (d,),
        "head.fc.weight": (d, config.num_classes),
        "head.fc.bias": (config.num_classes,),
    })
    return shapes


def _xavier(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)))


def _adapter_seed(seed: int, layer: int, kind: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, layer, kind])


def build_model(
    config: ModelConfig,
    seed: int = 0,
    variant: Variant | None = None,
    with_prompts: bool = False,
    adapter_seed: int | None = None,
) -> AudioTransformer:
    """Seeded random backbone standing in for a pre-trained checkpoint.

    The backbone weights depend only on ``seed`` and the architecture, so a
    vanilla and an adapted model built with the same seed share them exactly.
    Adapters and prompts draw from ``adapter_seed`` (default: ``seed``).
    """
    variant = variant or config.variant
    if variant != config.variant:
        config = config.replace(variant=variant)
    if with_prompts and config.prompt_length <= 0:
        raise ConfigurationError("prompts requested but prompt_length is 0")
    adapter_seed = seed if adapter_seed is None else adapter_seed
    d, hidden, p2 = config.embed_dim, config.hidden_dim, config.patch_size**2
    rng = np.random.default_rng(seed)

    patch_embed = PatchEmbed(_xavier(rng, p2, d), Tensor(np.zeros(d)))
    positional = PositionalState(
        cls_token=Tensor(rng.normal(0.0, POS_STD, size=(1, d))),
        pos_embed=Tensor(rng.normal(0.0, POS_STD, size=(config.num_patches + 1, d))),
    )
    blocks = []
    for i in range(config.depth):
        block = TransformerBlock(
            norm1_gamma=Tensor(np.ones(d)),
            norm1_beta=Tensor(np.zeros(d)),
            qkv_weight=_xavier(rng, d, 3 * d),
            qkv_bias=Tensor(np.zeros(3 * d)),
            proj_weight=_xavier(rng, d, d),
            proj_bias=Tensor(np.zeros(d)),
            norm2_gamma=Tensor(np.ones(d)),
            norm2_beta=Tensor(np.zeros(d)),
            fc1_weight=_xavier(rng, d, hidden),
            fc1_bias=Tensor(np.zeros(hidden)),
            fc2_weight=_xavier(rng, hidden, d),
            fc2_bias=Tensor(np.zeros(d)),
            num_heads=config.num_heads,
            eps=config.ln_eps,
        )
        if variant in ("aat-m", "aat-ms"):
            block.mlp_adapter = init_adapter(d, config.adapter_dim, False, _adapter_seed(adapter_seed, i, 0))
        if variant == "aat-ms":
            block.spatial_adapter = init_adapter(d, config.adapter_dim, True, _adapter_seed(adapter_seed, i, 1))
        blocks.append(block)
    head = TaskHead(
        norm_gamma=Tensor(np.ones(d)),
        norm_beta=Tensor(np.zeros(d)),
        weight=_xavier(rng, d, config.num_classes),
        bias=Tensor(np.zeros(config.num_classes)),
        eps=config.ln_eps,
    )
    prompts = None
    if with_prompts:
        prompts = init_prompts(config.depth, config.prompt_length, d, np.random.SeedSequence([adapter_seed, 2]))
    return AudioTransformer(config, patch_embed, positional, blocks, head, prompts, variant)


# ----------------------------------------------------------------------------
# embedding


def patchify(spectrogram, config: ModelConfig) -> Tensor:
    """Split ``[..., T, F]`` into ``[..., N, P*P]`` non-overlapping patches.

    Patches are ordered time-major, then frequency; each is flattened row-major.
    """
    x = ad.as_tensor(spectrogram)
    p = config.patch_size
    if x.ndim < 2:
        raise DimensionError(f"spectrogram must be at least 2-D, got shape {x.shape}")
    t_len, f_len = x.shape[-2:]
    if t_len % p or f_len % p:
        raise DimensionError(f"spectrogram {t_len}x{f_len} is not divisible by patch size {p}")
    lead = x.shape[:-2]
    t, f = t_len // p, f_len // p
    x = ad.reshape(x, lead + (t, p, f, p))
    k = len(lead)
    axes = tuple(range(k)) + (k, k + 2, k + 1, k + 3)
    x = ad.transpose(x, axes)
    return ad.reshape(x, lead + (t * f, p * p))


def _linear_resample_matrix(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers, clamped at the borders
    m = np.zeros((n_out, n_in))
    for i in range(n_out):
        src = min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1.0)
        lo = int(np.floor(src))
        hi = min(lo + 1, n_in - 1)
        w = src - lo
        m[i, lo] += 1.0 - w
        m[i, hi] += w
    return m


def interpolate_pos_embed(pos, from_grid: tuple[int, int], to_grid: tuple[int, int]) -> Tensor:
    """Bilinearly resample patch positional rows to a new time-frequency grid.

    Row 0 (the CLS position) passes through unchanged. Differentiable with
    respect to ``pos``.
    """
    pos = ad.as_tensor(pos)
    t0, f0 = from_grid
    t1, f1 = to_grid
    if pos.ndim != 2 or pos.shape[0] != t0 * f0 + 1:
        raise DimensionError(f"pos embed {pos.shape} does not match grid {t0}x{f0} (+1 CLS row)")
    if min(t0, f0, t1, f1) <= 0:
        raise DimensionError(f"grids must be positive, got {from_grid} -> {to_grid}")
    if (t0, f0) == (t1, f1):
        return pos
    resample = np.kron(_linear_resample_matrix(t0, t1), _linear_resample_matrix(f0, f1))
    cls_row = ad.slice_along(pos, 0, 1, axis=0)
    patch_rows = ad.slice_along(pos, 1, pos.shape[0], axis=0)
    return ad.concat([cls_row, ad.matmul(resample, patch_rows)], axis=0)


def embed(spectrogram, model: AudioTransformer) -> Tensor:
    config = model.config
    x = ad.as_tensor(spectrogram)
    patches = patchify(x, config)
    tokens = ad.matmul(patches, model.patch_embed.weight) + model.patch_embed.bias
    cls = model.positional.cls_token
    if tokens.ndim > 2:
        cls = ad.add(cls, np.zeros(tokens.shape[:-2] + cls.shape))
    seq = ad.concat([cls, tokens], axis=-2)
    p = config.patch_size
    grid = (x.shape[-2] // p, x.shape[-1] // p)
    pos = interpolate_pos_embed(model.positional.pos_embed, config.grid, grid)
    return seq + pos


# ----------------------------------------------------------------------------
# blocks


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 2:
        return ad.reshape(x, (1,) + x.shape), True
    return x, False


def mhsa_forward(x, block: TransformerBlock, trace: list | None = None) -> Tensor:
    """Multi-head self-attention of LN1(x), without the residual add."""
    x, single = _batched(ad.as_tensor(x))
    b, s, d = x.shape
    h = block.num_heads
    dh = d // h
    normed = ad.layernorm(x, block.norm1_gamma, block.norm1_beta, block.eps)
    qkv = ad.matmul(normed, block.qkv_weight) + block.qkv_bias
    qkv = ad.transpose(ad.reshape(qkv, (b, s, 3, h, dh)), (2, 0, 3, 1, 4))
    q, k, v = (ad.reshape(ad.slice_along(qkv, i, i + 1, axis=0), (b, h, s, dh)) for i in range(3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / np.sqrt(dh))
    weights = ad.softmax(scores, axis=-1)
    if trace is not None:
        trace.append({"event": "attention", "weights": weights.data})
    mixed = ad.reshape(ad.transpose(ad.matmul(weights, v), (0, 2, 1, 3)), (b, s, d))
    out = ad.matmul(mixed, block.proj_weight) + block.proj_bias
    return ad.reshape(out, (s, d)) if single else out


def mlp_forward(x, block: TransformerBlock) -> Tensor:
    hidden = ad.gelu(ad.matmul(x, block.fc1_weight) + block.fc1_bias)
    return ad.matmul(hidden, block.fc2_weight) + block.fc2_bias


def block_forward(x, block: TransformerBlock, variant: Variant = "vanilla", trace: list | None = None) -> Tensor:
    x = ad.as_tensor(x)
    if variant not in VARIANTS:
        raise ConfigurationError(f"unknown variant {variant!r}")
    if variant in ("aat-m", "aat-ms") and block.mlp_adapter is None:
        raise ConfigurationError(f"variant {variant} needs an MLP adapter on every block")
    if variant == "aat-ms" and block.spatial_adapter is None:
        raise ConfigurationError("variant aat-ms needs a spatial adapter on every block")

    attn = mhsa_forward(x, block, trace)
    if variant == "aat-ms":
        mid = x + adapter_forward(attn, block.spatial_adapter)
    else:
        mid = x + attn
    normed = ad.layernorm(mid, block.norm2_gamma, block.norm2_beta, block.eps)
    out = mid + mlp_forward(normed, block)
    if variant != "vanilla":
        out = out + adapter_forward(normed, block.mlp_adapter)
    return out


def model_forward(spectrogram, model: AudioTransformer, prompts: PromptBank | None = None,
                  trace: list | None = None) -> Tensor:
    """Logits ``[C]`` for a ``[T, F]`` input, or ``[B, C]`` for ``[B, T, F]``.

    ``prompts`` defaults to the model's own prompt bank. When present, layer
    i's tokens are prepended before block i and dropped after it.
    """
    prompts = model.prompts if prompts is None else prompts
    if prompts is not None and len(prompts.tokens) != len(model.blocks):
        raise ConfigurationError(f"prompt bank has {len(prompts.tokens)} layers, model has {len(model.blocks)}")
    x = embed(spectrogram, model)
    for i, block in enumerate(model.blocks):
        if prompts is not None:
            x = prompt_inject(x, prompts.tokens[i])
        if trace is not None:
            trace.append({"event": "block_in", "layer": i, "shape": x.shape})
        x = block_forward(x, block, model.variant, trace)
        if trace is not None:
            trace.append({"event": "block_out", "layer": i, "shape": x.shape})
        if prompts is not None:
            x = prompt_strip(x, prompts.length)
        if trace is not None:
            trace.append({"event": "layer_out", "layer": i, "shape": x.shape, "value": x.data})
    cls = ad.slice_along(x, 0, 1, axis=-2)
    cls = ad.reshape(cls, cls.shape[:-2] + (cls.shape[-1],))
    head = model.head
    normed = ad.layernorm(cls, head.norm_gamma, head.norm_beta, head.eps)
    return ad.matmul(ad.reshape(normed, (-1, normed.shape[-1])), head.weight).reshape(
        normed.shape[:-1] + (head.weight.shape[1],)
    ) + head.bias
