"""Hierarchical transformer over block-local attention with conv aggregation.

Feature maps travel channels-last (``N x H x W x d``). At each level the map
is cut into a ``g x g`` grid of blocks and attention runs independently
inside every block with weights shared across blocks. Between levels a
3x3 conv, per-site layer norm and a stride-2 3x3 max-pool merge each 2x2
group of blocks into one block.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .tensor import (
    GeometryError,
    Tensor,
    conv2d_3x3,
    layer_norm,
    maxpool2d_3x3,
    softmax_rows,
)


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 28
    patch_size: int = 1
    bottom_block: int = 7
    dims: tuple[int, ...] = (64, 128, 256)
    heads: tuple[int, ...] = (3, 3, 3)
    # per-head width; None means dims[i] // heads[i]
    head_dim: int | None = 64
    layers: tuple[int, ...] = (2, 2, 8)
    num_classes: int = 3
    ffn_expansion: int = 4
    head_hidden: int = 256
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("dims", "heads", "layers"):
            object.__setattr__(self, name, tuple(int(v) for v in getattr(self, name)))
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.dims)

    @property
    def grid(self) -> int:
        """Blocks per side at the bottom level."""
        return self.image_size // self.bottom_block

    @property
    def block_tokens_side(self) -> int:
        return self.bottom_block // self.patch_size

    @property
    def tokens_per_block(self) -> int:
        return self.block_tokens_side**2

    def grid_at(self, level: int) -> int:
        return self.grid >> level

    def side_at(self, level: int) -> int:
        """Spatial side (in tokens) of the feature map at ``level``."""
        return self.grid_at(level) * self.block_tokens_side

    def head_width(self, level: int) -> int:
        if self.head_dim is None:
            return self.dims[level] // self.heads[level]
        return self.head_dim

    def validate(self) -> None:
        if min(self.image_size, self.patch_size, self.bottom_block) < 1:
            raise ConfigError("image_size, patch_size and bottom_block must be positive")
        if self.image_size % self.bottom_block:
            raise ConfigError(
                f"image_size {self.image_size} not divisible by bottom_block {self.bottom_block}"
            )
        if self.bottom_block % self.patch_size:
            raise ConfigError(
                f"bottom_block {self.bottom_block} not divisible by patch_size {self.patch_size}"
            )
        if not (len(self.dims) == len(self.heads) == len(self.layers)) or not self.dims:
            raise ConfigError("dims, heads and layers need one entry per level")
        if self.grid != 2 ** (self.levels - 1):
            raise ConfigError(
                f"{self.levels} levels need a {2 ** (self.levels - 1)}-block grid side, "
                f"image_size/bottom_block gives {self.grid}"
            )
        if any(b <= a for a, b in zip(self.dims, self.dims[1:])):
            raise ConfigError(f"dims must strictly increase across levels: {self.dims}")
        if min(self.heads) < 1 or min(self.layers) < 0:
            raise ConfigError("heads must be >= 1 and layers >= 0")
        if self.head_dim is None:
            for d, h in zip(self.dims, self.heads):
                if d % h:
                    raise ConfigError(f"dim {d} not divisible by {h} heads")
        elif self.head_dim < 1:
            raise ConfigError("head_dim must be positive")
        if self.num_classes < 2 or self.ffn_expansion < 1 or self.head_hidden < 1:
            raise ConfigError("num_classes >= 2, ffn_expansion >= 1, head_hidden >= 1")

    def to_dict(self) -> dict:
        out = asdict(self)
        for name in ("dims", "heads", "layers"):
            out[name] = list(out[name])
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> ModelConfig:
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**obj)


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def parameter_shapes(cfg: ModelConfig) -> "OrderedDict[str, tuple[int, ...]]":
    """Every parameter name and shape in canonical (checkpoint) order."""
    shapes: OrderedDict[str, tuple[int, ...]] = OrderedDict()
    patch_in = cfg.patch_size * cfg.patch_size * 3
    shapes["patch.weight"] = (patch_in, cfg.dims[0])
    shapes["patch.bias"] = (cfg.dims[0],)
    for lvl, d in enumerate(cfg.dims):
        inner = cfg.heads[lvl] * cfg.head_width(lvl)
        hidden = cfg.ffn_expansion * d
        shapes[f"level{lvl}.pos"] = (cfg.tokens_per_block, d)
        for i in range(cfg.layers[lvl]):
            p = f"level{lvl}.layer{i}"
            shapes[f"{p}.ln1.gamma"] = (d,)
            shapes[f"{p}.ln1.beta"] = (d,)
            shapes[f"{p}.attn.wq"] = (d, inner)
            shapes[f"{p}.attn.wk"] = (d, inner)
            shapes[f"{p}.attn.wv"] = (d, inner)
            shapes[f"{p}.attn.wo"] = (inner, d)
            shapes[f"{p}.ln2.gamma"] = (d,)
            shapes[f"{p}.ln2.beta"] = (d,)
            shapes[f"{p}.ffn.w1"] = (d, hidden)
            shapes[f"{p}.ffn.b1"] = (hidden,)
            shapes[f"{p}.ffn.w2"] = (hidden, d)
            shapes[f"{p}.ffn.b2"] = (d,)
        if lvl + 1 < cfg.levels:
            nxt = cfg.dims[lvl + 1]
            shapes[f"agg{lvl}.conv.weight"] = (nxt, d, 3, 3)
            shapes[f"agg{lvl}.conv.bias"] = (nxt,)
            shapes[f"agg{lvl}.ln.gamma"] = (nxt,)
            shapes[f"agg{lvl}.ln.beta"] = (nxt,)
    shapes["head.fc1.weight"] = (cfg.dims[-1], cfg.head_hidden)
    shapes["head.fc1.bias"] = (cfg.head_hidden,)
    shapes["head.fc2.weight"] = (cfg.head_hidden, cfg.num_classes)
    shapes["head.fc2.bias"] = (cfg.num_classes,)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0) -> "OrderedDict[str, Tensor]":
    rng = np.random.default_rng(seed)
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, shape in parameter_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "gamma":
            value = np.ones(shape)
        elif leaf in ("beta", "bias", "b1", "b2", "pos"):
            value = np.zeros(shape)
        elif len(shape) == 4:
            value = _uniform(rng, shape[1] * 9, shape)
        else:
            value = _uniform(rng, shape[0], shape)
        params[name] = Tensor(value, requires_grad=True, name=name)
    return params


# -- functional building blocks -------------------------------------------


def to_blocks(x: Tensor, grid: int) -> Tensor:
    """``N x S x S x d`` -> ``N x grid^2 x (S/grid)^2 x d`` (row-major blocks/tokens)."""
    n, s, _, d = x.shape
    t = s // grid
    y = x.reshape(n, grid, t, grid, t, d).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, grid * grid, t * t, d)


def from_blocks(x: Tensor, grid: int) -> Tensor:
    n, _, tt, d = x.shape
    t = int(round(math.sqrt(tt)))
    y = x.reshape(n, grid, grid, t, t, d).transpose(0, 1, 3, 2, 4, 5)
    return y.reshape(n, grid * t, grid * t, d)


def patch_embed(
    images: Tensor, cfg: ModelConfig, params: dict[str, Tensor]
) -> Tensor:
    """Images ``N x H x W x 3`` -> tokens ``N x blocks x tokens x d0`` with positions."""
    n, h, w, c = images.shape
    if (h, w, c) != (cfg.image_size, cfg.image_size, 3):
        raise ConfigError(
            f"input {h}x{w}x{c} does not match image_size {cfg.image_size} x 3"
        )
    p = cfg.patch_size
    s = h // p
    patches = images.reshape(n, s, p, s, p, c).transpose(0, 1, 3, 2, 4, 5)
    patches = patches.reshape(n, s, s, p * p * c)
    emb = patches @ params["patch.weight"] + params["patch.bias"]
    return to_blocks(emb, cfg.grid) + params["level0.pos"]


def attention_weights(q: Tensor, k: Tensor) -> Tensor:
    scale = 1.0 / math.sqrt(q.shape[-1])
    return softmax_rows((q @ k.swapaxes(-1, -2)) * scale)


def local_msa(
    x: Tensor, heads: int, head_dim: int, params: dict[str, Tensor], prefix: str
) -> Tensor:
    """Multi-head attention confined to each block: ``... x n x d`` -> same."""
    *lead, n, _ = x.shape

    def split(t: Tensor) -> Tensor:
        t = t.reshape(*lead, n, heads, head_dim)
        axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
        return t.transpose(axes)

    q = split(x @ params[f"{prefix}.wq"])
    k = split(x @ params[f"{prefix}.wk"])
    v = split(x @ params[f"{prefix}.wv"])
    out = attention_weights(q, k) @ v
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    out = out.transpose(axes).reshape(*lead, n, heads * head_dim)
    return out @ params[f"{prefix}.wo"]


def feed_forward(x: Tensor, params: dict[str, Tensor], prefix: str) -> Tensor:
    hidden = (x @ params[f"{prefix}.w1"] + params[f"{prefix}.b1"]).relu()
    return hidden @ params[f"{prefix}.w2"] + params[f"{prefix}.b2"]


def transformer_layer(
    y: Tensor, cfg: ModelConfig, params: dict[str, Tensor], level: int, index: int
) -> Tensor:
    p = f"level{level}.layer{index}"
    eps = cfg.ln_eps
    normed = layer_norm(y, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"], eps)
    y = y + local_msa(normed, cfg.heads[level], cfg.head_width(level), params, f"{p}.attn")
    normed = layer_norm(y, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"], eps)
    return y + feed_forward(normed, params, f"{p}.ffn")


def block_aggregate(
    fmap: Tensor, cfg: ModelConfig, params: dict[str, Tensor], level: int
) -> Tensor:
    """Channels-last map ``N x h x w x d_l`` -> ``N x h/2 x w/2 x d_{l+1}``."""
    _, h, w, _ = fmap.shape
    if h % 2 or w % 2:
        raise GeometryError(f"block aggregation needs an even map, got {h}x{w}")
    p = f"agg{level}"
    x = conv2d_3x3(
        fmap.transpose(0, 3, 1, 2),
        params[f"{p}.conv.weight"],
        params[f"{p}.conv.bias"],
        stride=1,
        padding=1,
    )
    x = layer_norm(
        x.transpose(0, 2, 3, 1), params[f"{p}.ln.gamma"], params[f"{p}.ln.beta"], cfg.ln_eps
    )
    x = maxpool2d_3x3(x.transpose(0, 3, 1, 2), stride=2, padding=1)
    return x.transpose(0, 2, 3, 1)


def _as_batch(x) -> Tensor:
    data = getattr(x, "data", x)
    if isinstance(x, Tensor):
        t = x
    else:
        t = Tensor(np.asarray(data, dtype=np.float64))
    if t.ndim == 3:
        t = t.reshape((1,) + t.shape)
    if t.ndim != 4:
        raise ConfigError(f"expected H x W x 3 or N x H x W x 3 input, got {t.shape}")
    return t


@dataclass
class HTNet:
    cfg: ModelConfig = field(default_factory=ModelConfig)
    params: "OrderedDict[str, Tensor]" = None
    seed: int = 0

    def __post_init__(self):
        if self.params is None:
            self.params = init_params(self.cfg, self.seed)
        expected = parameter_shapes(self.cfg)
        got = {k: v.shape for k, v in self.params.items()}
        if list(got) != list(expected) or any(got[k] != expected[k] for k in expected):
            raise ConfigError("parameters do not match the model configuration")

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def level_tokens(self, x, upto_level: int = 0) -> Tensor:
        """Block tokens after the transformer layers of ``upto_level``."""
        return self._run(_as_batch(x), stop_level=upto_level)

    def forward(self, x) -> Tensor:
        """Logits ``N x num_classes`` for one map or a batch of maps."""
        return self._run(_as_batch(x), stop_level=None)

    __call__ = forward

    def predict(self, x) -> np.ndarray:
        return self.forward(x).data.argmax(axis=-1)

    def _run(self, images: Tensor, stop_level: int | None) -> Tensor:
        cfg, params = self.cfg, self.params
        tokens = patch_embed(images, cfg, params)
        for lvl in range(cfg.levels):
            if lvl > 0:
                tokens = to_blocks(fmap, cfg.grid_at(lvl)) + params[f"level{lvl}.pos"]
            for i in range(cfg.layers[lvl]):
                tokens = transformer_layer(tokens, cfg, params, lvl, i)
            if stop_level is not None and lvl == stop_level:
                return tokens
            if lvl + 1 < cfg.levels:
                fmap = block_aggregate(from_blocks(tokens, cfg.grid_at(lvl)), cfg, params, lvl)
        pooled = tokens.mean(axis=(1, 2))
        hidden = (pooled @ params["head.fc1.weight"] + params["head.fc1.bias"]).relu()
        return hidden @ params["head.fc2.weight"] + params["head.fc2.bias"]
