"""Two-view masked completion transformer and its dense-regression head.

A shared ViT encoder processes each image's patch tokens (image 1 optionally
masked), a decoder alternates self-attention on image-1 tokens, cross-attention
to image-2 tokens and an MLP, and either a linear completion head predicts
patch-normalized pixels or a multi-scale convolutional fusion head regresses a
per-pixel location field plus a raw uncertainty channel.

Positions enter attention through 2D rotary embeddings: each head's features
split in two halves, the x coordinate rotating the first half and y the second,
so logits depend on relative offsets only. A fixed 2D sin-cos absolute
embedding is available as the ablation alternative.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from enum import Enum

import numpy as np
from scipy import special

from . import tensor as T
from .tensor import Tensor


class Head(str, Enum):
    completion = "completion"
    dense_regression = "dense_regression"


class PosEmbed(str, Enum):
    cosine_absolute = "cosine_absolute"
    rope = "rope"


class ScaleParam(str, Enum):
    stereo_bounded = "stereo_bounded"  # d = exp(2*3*(sigmoid(d'/3)-0.5))
    flow_bounded = "flow_bounded"  # d = 1/4 + (4-1/4)*sigmoid(d')
    unbounded = "unbounded"  # d = exp(d')


STEREO_ALPHA = 3.0
FLOW_BETA = 4.0


@dataclass
class ModelConfig:
    patch_size: int = 16
    enc_depth: int = 12
    enc_dim: int = 768
    enc_heads: int = 12
    dec_depth: int = 8
    dec_dim: int = 512
    dec_heads: int = 16
    pos_embed: PosEmbed = PosEmbed.rope
    rope_base_freq: float = 10000.0
    mask_ratio: float = 0.9
    head: Head = Head.completion
    out_channels: int = 1  # mu channels for the dense head (1 disparity, 2 flow)

    def __post_init__(self):
        self.pos_embed = PosEmbed(self.pos_embed)
        self.head = Head(self.head)
        if self.enc_dim % self.enc_heads or self.dec_dim % self.dec_heads:
            raise ValueError("feature dims must divide head counts")
        for dim, heads in ((self.enc_dim, self.enc_heads), (self.dec_dim, self.dec_heads)):
            dh = dim // heads
            if dh % 4:
                raise ValueError(f"per-head dim {dh} must be divisible by 4 for 2D rotations")

    @property
    def dpt_width(self) -> int:
        return self.dec_dim // 2

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pos_embed"] = self.pos_embed.value
        d["head"] = self.head.value
        return d


PRESETS = {
    # encoder ViT-B / decoder Small is the historical baseline pairing
    "vitb_small": dict(enc_depth=12, enc_dim=768, enc_heads=12,
                       dec_depth=8, dec_dim=512, dec_heads=16),
    "vitb_base": dict(enc_depth=12, enc_dim=768, enc_heads=12,
                      dec_depth=12, dec_dim=768, dec_heads=12),
    "vitl_base": dict(enc_depth=24, enc_dim=1024, enc_heads=16,
                      dec_depth=12, dec_dim=768, dec_heads=12),
    "tiny": dict(enc_depth=2, enc_dim=64, enc_heads=4,
                 dec_depth=2, dec_dim=64, dec_heads=4),
}


def make_config(preset: str, **overrides) -> ModelConfig:
    return ModelConfig(**{**PRESETS[preset], **overrides})


@dataclass
class TokenGrid:
    tokens: Tensor  # (n_tokens, dim)
    positions: np.ndarray  # (n_tokens, 2) int patch coords (x, y)
    grid_hw: tuple[int, int]  # full patch grid (rows, cols)
    image_size: tuple[int, int]  # (H, W) pixels


@dataclass
class DensePrediction:
    mu: Tensor  # (H, W, channels)
    d_raw: Tensor  # (H, W)
    param: ScaleParam


# ---------------------------------------------------------------------------
# patch helpers (pure numpy: model inputs and targets carry no gradients)


def patchify(image: np.ndarray, patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Split (H, W, 3) into ((H/p)*(W/p), p*p*3) patch rows plus (x, y) coords."""
    h, w = image.shape[:2]
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image dims {(h, w)} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    patches = (
        image.reshape(gh, p, gw, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * gw, p * p * 3)
    )
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    positions = np.stack([xs, ys], axis=1)
    return patches, positions


def unpatchify(patches: np.ndarray, grid_hw: tuple[int, int], patch_size: int) -> np.ndarray:
    gh, gw = grid_hw
    p = patch_size
    return (
        patches.reshape(gh, gw, p, p, 3).transpose(0, 2, 1, 3, 4).reshape(gh * p, gw * p, 3)
    )


PATCH_STD_FLOOR = 1e-6


def normalize_patches(patches: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-patch standardization of reconstruction targets (std floored so a
    constant patch maps to zeros)."""
    mean = patches.mean(axis=1, keepdims=True)
    std = np.maximum(patches.std(axis=1, keepdims=True), PATCH_STD_FLOOR)
    return (patches - mean) / std, mean, std


def denormalize_patches(pred: np.ndarray, mean: np.ndarray, std: np.ndarray) -> np.ndarray:
    return pred * std + mean


def visible_token_count(n_tokens: int, mask_ratio: float) -> int:
    return n_tokens - math.floor(mask_ratio * n_tokens)


def sample_visible_ids(rng: np.random.Generator, n_tokens: int, mask_ratio: float) -> np.ndarray:
    keep = visible_token_count(n_tokens, mask_ratio)
    return np.sort(rng.permutation(n_tokens)[:keep])


# ---------------------------------------------------------------------------
# rotary and absolute positional machinery


def rope_angles(positions: np.ndarray, d_head: int, base_freq: float, dtype) -> tuple[np.ndarray, np.ndarray]:
    """cos/sin tables (n, d_head/2): x rotates the first half's pairs, y the
    second half's, frequency base_freq**(-2j/(d_head/2)) for pair j."""
    half = d_head // 2
    n_pairs = half // 2
    freqs = base_freq ** (-2.0 * np.arange(n_pairs) / half)
    ax = positions[:, 0:1] * freqs[None, :]
    ay = positions[:, 1:2] * freqs[None, :]
    angles = np.concatenate([ax, ay], axis=1)
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def rope_transform(features: Tensor, positions: np.ndarray, base_freq: float) -> Tensor:
    """Rotate feature pairs by position-dependent angles; features (..., n, d)."""
    d = features.shape[-1]
    if d % 4:
        raise T.ContractViolation(f"RoPE needs feature dim divisible by 4, got {d}")
    cos, sin = rope_angles(positions, d, base_freq, features.dtype)
    q = d // 4  # pairs per half; layout: [x_a, x_b, y_a, y_b] quarters
    idx_a = np.concatenate([np.arange(q), 2 * q + np.arange(q)])
    idx_b = np.concatenate([q + np.arange(q), 3 * q + np.arange(q)])
    fa = features[..., idx_a]
    fb = features[..., idx_b]
    ra = T.sub(T.mul(fa, cos), T.mul(fb, sin))
    rb = T.add(T.mul(fa, sin), T.mul(fb, cos))
    halves = [ra[..., :q], rb[..., :q], ra[..., q:], rb[..., q:]]
    return T.concat(halves, axis=-1)


def sincos_positions(positions: np.ndarray, dim: int, dtype) -> np.ndarray:
    """Fixed 2D sin-cos absolute embedding (x on the first half, y on second)."""
    half = dim // 2
    quarter = half // 2
    freqs = 10000.0 ** (-np.arange(quarter) / quarter)
    out = np.concatenate(
        [
            np.sin(positions[:, 0:1] * freqs[None, :]),
            np.cos(positions[:, 0:1] * freqs[None, :]),
            np.sin(positions[:, 1:2] * freqs[None, :]),
            np.cos(positions[:, 1:2] * freqs[None, :]),
        ],
        axis=1,
    )
    if out.shape[1] < dim:  # dim not divisible by 4: zero-pad the tail
        out = np.concatenate([out, np.zeros((out.shape[0], dim - out.shape[1]))], axis=1)
    return out.astype(dtype)


# ---------------------------------------------------------------------------
# parameters


def _init_linear(rng, fan_in, fan_out, dtype, std=0.02):
    w = rng.normal(0.0, std, size=(fan_in, fan_out)).astype(dtype)
    b = np.zeros(fan_out, dtype=dtype)
    return w, b


def _attn_params(rng, prefix, q_dim, kv_dim, dtype, params):
    for name, fan_in in (("wq", q_dim), ("wk", kv_dim), ("wv", kv_dim)):
        w, b = _init_linear(rng, fan_in, q_dim, dtype)
        params[f"{prefix}.{name}"] = Tensor(w, requires_grad=True)
        params[f"{prefix}.{name[1]}b"] = Tensor(b, requires_grad=True)
    w, b = _init_linear(rng, q_dim, q_dim, dtype)
    params[f"{prefix}.wo"] = Tensor(w, requires_grad=True)
    params[f"{prefix}.ob"] = Tensor(b, requires_grad=True)


def _ln_params(prefix, dim, dtype, params):
    params[f"{prefix}.g"] = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)


def _mlp_params(rng, prefix, dim, dtype, params):
    w1, b1 = _init_linear(rng, dim, 4 * dim, dtype)
    w2, b2 = _init_linear(rng, 4 * dim, dim, dtype)
    params[f"{prefix}.w1"] = Tensor(w1, requires_grad=True)
    params[f"{prefix}.b1"] = Tensor(b1, requires_grad=True)
    params[f"{prefix}.w2"] = Tensor(w2, requires_grad=True)
    params[f"{prefix}.b2"] = Tensor(b2, requires_grad=True)


def _conv_params(rng, prefix, cin, cout, dtype, params, ksize=3):
    w = rng.normal(0.0, 0.02, size=(ksize * ksize, cin, cout)).astype(dtype)
    params[f"{prefix}.w"] = Tensor(w, requires_grad=True)
    params[f"{prefix}.b"] = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True)


def init_params(config: ModelConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    p: dict[str, Tensor] = {}
    patch_in = config.patch_size**2 * 3
    w, b = _init_linear(rng, patch_in, config.enc_dim, dtype)
    p["patch_embed.w"] = Tensor(w, requires_grad=True)
    p["patch_embed.b"] = Tensor(b, requires_grad=True)

    for i in range(config.enc_depth):
        _ln_params(f"enc.{i}.ln1", config.enc_dim, dtype, p)
        _attn_params(rng, f"enc.{i}.attn", config.enc_dim, config.enc_dim, dtype, p)
        _ln_params(f"enc.{i}.ln2", config.enc_dim, dtype, p)
        _mlp_params(rng, f"enc.{i}.mlp", config.enc_dim, dtype, p)
    _ln_params("enc.norm", config.enc_dim, dtype, p)

    w, b = _init_linear(rng, config.enc_dim, config.dec_dim, dtype)
    p["dec.adapter.w"] = Tensor(w, requires_grad=True)
    p["dec.adapter.b"] = Tensor(b, requires_grad=True)
    p["dec.mask_token"] = Tensor(
        rng.normal(0.0, 0.02, size=(1, config.dec_dim)).astype(dtype), requires_grad=True
    )
    for i in range(config.dec_depth):
        _ln_params(f"dec.{i}.ln1", config.dec_dim, dtype, p)
        _attn_params(rng, f"dec.{i}.self", config.dec_dim, config.dec_dim, dtype, p)
        _ln_params(f"dec.{i}.lnc", config.dec_dim, dtype, p)
        _attn_params(rng, f"dec.{i}.cross", config.dec_dim, config.dec_dim, dtype, p)
        _ln_params(f"dec.{i}.ln2", config.dec_dim, dtype, p)
        _mlp_params(rng, f"dec.{i}.mlp", config.dec_dim, dtype, p)
    _ln_params("dec.norm", config.dec_dim, dtype, p)

    w, b = _init_linear(rng, config.dec_dim, patch_in, dtype)
    p["head.completion.w"] = Tensor(w, requires_grad=True)
    p["head.completion.b"] = Tensor(b, requires_grad=True)

    c = config.dpt_width
    dims = [config.enc_dim, config.dec_dim, config.dec_dim, config.dec_dim]
    for k, dim in enumerate(dims):
        wk, bk = _init_linear(rng, dim, c, dtype)
        p[f"dpt.proj{k}.w"] = Tensor(wk, requires_grad=True)
        p[f"dpt.proj{k}.b"] = Tensor(bk, requires_grad=True)
    # sub-pixel blocks of the stride-deconvolutions start out tied, so a
    # featureless input maps to a featureless feature pyramid at init (training
    # is free to break the symmetry)
    w, b = _init_linear(rng, c, c, dtype)
    p["dpt.up0.w"] = Tensor(np.tile(w, (1, 16)), requires_grad=True)
    p["dpt.up0.b"] = Tensor(np.tile(b, 16), requires_grad=True)
    w, b = _init_linear(rng, c, c, dtype)
    p["dpt.up1.w"] = Tensor(np.tile(w, (1, 4)), requires_grad=True)
    p["dpt.up1.b"] = Tensor(np.tile(b, 4), requires_grad=True)
    w, b = _init_linear(rng, 4 * c, c, dtype)
    p["dpt.down3.w"] = Tensor(w, requires_grad=True)
    p["dpt.down3.b"] = Tensor(b, requires_grad=True)
    for k in range(4):
        _conv_params(rng, f"dpt.rcu{k}.conv1", c, c, dtype, p)
        _conv_params(rng, f"dpt.rcu{k}.conv2", c, c, dtype, p)
    _conv_params(rng, "dpt.head.conv1", c, c, dtype, p)
    _conv_params(rng, "dpt.head.conv2", c, config.out_channels + 1, dtype, p)
    return p


def param_count(config: ModelConfig) -> int:
    """Closed-form parameter count for a config (documented per component)."""
    e, d, pi = config.enc_dim, config.dec_dim, config.patch_size**2 * 3
    c = config.dpt_width
    attn = lambda dim: 4 * (dim * dim + dim)  # q, k, v, o projections with bias
    mlp = lambda dim: dim * 4 * dim + 4 * dim + 4 * dim * dim + dim
    ln = lambda dim: 2 * dim
    enc_block = attn(e) + mlp(e) + 2 * ln(e)
    dec_block = 2 * attn(d) + mlp(d) + 3 * ln(d)
    total = pi * e + e  # patch embed
    total += config.enc_depth * enc_block + ln(e)
    total += e * d + d + d  # adapter + mask token
    total += config.dec_depth * dec_block + ln(d)
    total += d * pi + pi  # completion head
    total += (e * c + c) + 3 * (d * c + c)  # dpt projections
    total += c * 16 * c + 16 * c  # up x4
    total += c * 4 * c + 4 * c  # up x2
    total += 4 * c * c + c  # down x2
    total += 4 * 2 * (9 * c * c + c)  # residual conv units
    total += 9 * c * c + c  # fusion head conv1
    total += 9 * c * (config.out_channels + 1) + (config.out_channels + 1)  # conv2
    return total


# ---------------------------------------------------------------------------
# forward building blocks


def _linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return T.add(T.matmul(x, w), b)


def _ln(x: Tensor, params, prefix) -> Tensor:
    return T.add(T.mul(T.layer_norm(x), params[f"{prefix}.g"]), params[f"{prefix}.b"])


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    n, dim = x.shape
    return T.transpose(T.reshape(x, (n, n_heads, dim // n_heads)), (1, 0, 2))


def _merge_heads(x: Tensor) -> Tensor:
    h, n, dh = x.shape
    return T.reshape(T.transpose(x, (1, 0, 2)), (n, h * dh))


def attention(
    x: Tensor,
    context: Tensor,
    params: dict,
    prefix: str,
    n_heads: int,
    config: ModelConfig,
    q_positions: np.ndarray | None,
    k_positions: np.ndarray | None,
) -> Tensor:
    """Multi-head attention with optional rotary position transform applied
    symmetrically to queries and keys."""
    q = _split_heads(_linear(x, params[f"{prefix}.wq"], params[f"{prefix}.qb"]), n_heads)
    k = _split_heads(_linear(context, params[f"{prefix}.wk"], params[f"{prefix}.kb"]), n_heads)
    v = _split_heads(_linear(context, params[f"{prefix}.wv"], params[f"{prefix}.vb"]), n_heads)
    if config.pos_embed is PosEmbed.rope and q_positions is not None:
        q = rope_transform(q, q_positions, config.rope_base_freq)
        k = rope_transform(k, k_positions, config.rope_base_freq)
    dh = q.shape[-1]
    logits = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), 1.0 / math.sqrt(dh))
    attn = T.softmax(logits, axis=-1)
    out = _merge_heads(T.matmul(attn, v))
    return _linear(out, params[f"{prefix}.wo"], params[f"{prefix}.ob"])


def _mlp(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = T.gelu(_linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return _linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def encode(
    image: np.ndarray,
    config: ModelConfig,
    params: dict,
    visible_ids: np.ndarray | None = None,
) -> TokenGrid:
    """Run the shared encoder on one image; `visible_ids` restricts processing
    to the unmasked tokens (pre-training masks image 1 only)."""
    h, w = image.shape[:2]
    patches, positions = patchify(image, config.patch_size)
    gh, gw = h // config.patch_size, w // config.patch_size
    if visible_ids is not None:
        patches = patches[visible_ids]
        positions = positions[visible_ids]
    dtype = params["patch_embed.w"].dtype
    x = _linear(Tensor(patches.astype(dtype)), params["patch_embed.w"], params["patch_embed.b"])
    if config.pos_embed is PosEmbed.cosine_absolute:
        x = T.add(x, sincos_positions(positions, config.enc_dim, dtype))
    for i in range(config.enc_depth):
        attn_in = _ln(x, params, f"enc.{i}.ln1")
        x = T.add(x, attention(attn_in, attn_in, params, f"enc.{i}.attn",
                               config.enc_heads, config, positions, positions))
        x = T.add(x, _mlp(_ln(x, params, f"enc.{i}.ln2"), params, f"enc.{i}.mlp"))
    x = _ln(x, params, "enc.norm")
    return TokenGrid(tokens=x, positions=positions, grid_hw=(gh, gw), image_size=(h, w))


def assemble_decoder_input(
    grid1: TokenGrid, config: ModelConfig, params: dict, full_positions: np.ndarray
) -> Tensor:
    """Map encoded visible tokens to decoder width and fill masked slots with
    the learned mask embedding."""
    adapted = _linear(grid1.tokens, params["dec.adapter.w"], params["dec.adapter.b"])
    n_full = full_positions.shape[0]
    if grid1.positions.shape[0] == n_full:
        return adapted
    table = T.concat([adapted, params["dec.mask_token"]], axis=0)
    # row index per grid slot: its visible row, or the shared mask row
    pos_to_row = np.full(n_full, adapted.shape[0], dtype=np.int64)
    gw = grid1.grid_hw[1]
    flat_visible = grid1.positions[:, 1] * gw + grid1.positions[:, 0]
    pos_to_row[flat_visible] = np.arange(adapted.shape[0])
    return T.embedding_lookup(table, pos_to_row)


def decode(
    grid1: TokenGrid,
    grid2: TokenGrid,
    config: ModelConfig,
    params: dict,
) -> tuple[Tensor, list[Tensor]]:
    """Decoder over the (mask-filled) image-1 grid, cross-attending image 2.

    Returns the final decoded tokens and every block's output (the dense head
    taps a subset of these).
    """
    gh, gw = grid1.grid_hw
    ys, xs = np.divmod(np.arange(gh * gw), gw)
    full_positions = np.stack([xs, ys], axis=1)
    x = assemble_decoder_input(grid1, config, params, full_positions)
    ctx = _linear(grid2.tokens, params["dec.adapter.w"], params["dec.adapter.b"])
    dtype = x.dtype
    if config.pos_embed is PosEmbed.cosine_absolute:
        x = T.add(x, sincos_positions(full_positions, config.dec_dim, dtype))
        ctx = T.add(ctx, sincos_positions(grid2.positions, config.dec_dim, dtype))
    block_outputs: list[Tensor] = []
    for i in range(config.dec_depth):
        sa_in = _ln(x, params, f"dec.{i}.ln1")
        x = T.add(x, attention(sa_in, sa_in, params, f"dec.{i}.self",
                               config.dec_heads, config, full_positions, full_positions))
        ca_in = _ln(x, params, f"dec.{i}.lnc")
        x = T.add(x, attention(ca_in, ctx, params, f"dec.{i}.cross",
                               config.dec_heads, config, full_positions, grid2.positions))
        x = T.add(x, _mlp(_ln(x, params, f"dec.{i}.ln2"), params, f"dec.{i}.mlp"))
        block_outputs.append(x)
    final = _ln(x, params, "dec.norm")
    return final, block_outputs


def completion_head(decoded: Tensor, params: dict) -> Tensor:
    """Per-token patch-pixel predictions in patch-normalized space."""
    return _linear(decoded, params["head.completion.w"], params["head.completion.b"])


def forward_completion(
    img1: np.ndarray,
    img2: np.ndarray,
    config: ModelConfig,
    params: dict,
    visible_ids: np.ndarray,
) -> tuple[Tensor, TokenGrid]:
    """Masked cross-view completion forward pass; predictions cover all tokens
    of image 1 (the loss restricts to masked ones)."""
    grid1 = encode(img1, config, params, visible_ids=visible_ids)
    grid2 = encode(img2, config, params)
    decoded, _ = decode(grid1, grid2, config, params)
    return completion_head(decoded, params), grid1


# ---------------------------------------------------------------------------
# dense-prediction head


def _conv3x3(x: Tensor, params: dict, prefix: str) -> Tensor:
    """3x3 same-padding convolution on (H, W, C), expressed as 9 shifted
    matmuls so the gradient falls out of the primitive ops."""
    h, w, cin = x.shape
    weight = params[f"{prefix}.w"]
    # edge padding keeps constant fields exactly constant through the conv,
    # which makes tiled and untiled inference agree on featureless inputs
    xp = T.concat([x[0:1], x, x[h - 1 : h]], axis=0)
    xp = T.concat([xp[:, 0:1], xp, xp[:, w - 1 : w]], axis=1)
    acc = None
    for k, (dy, dx) in enumerate((dy, dx) for dy in range(3) for dx in range(3)):
        window = T.reshape(xp[dy : dy + h, dx : dx + w, :], (h * w, cin))
        term = T.matmul(window, weight[k])
        acc = term if acc is None else T.add(acc, term)
    out = T.add(acc, params[f"{prefix}.b"])
    return T.reshape(out, (h, w, weight.shape[2]))


def _rcu(x: Tensor, params: dict, prefix: str) -> Tensor:
    """Residual unit: x + conv3x3(gelu(conv3x3(gelu(x))))."""
    y = _conv3x3(T.gelu(x), params, f"{prefix}.conv1")
    y = _conv3x3(T.gelu(y), params, f"{prefix}.conv2")
    return T.add(x, y)


def _tokens_to_map(tokens: Tensor, grid_hw, params, k) -> Tensor:
    gh, gw = grid_hw
    x = _linear(tokens, params[f"dpt.proj{k}.w"], params[f"dpt.proj{k}.b"])
    return T.reshape(x, (gh, gw, x.shape[-1]))


def _pixel_shuffle_up(x: Tensor, w: Tensor, b: Tensor, factor: int) -> Tensor:
    """Stride-`factor` deconvolution with kernel = stride: a linear map to
    factor^2 sub-pixels, then a reshuffle."""
    gh, gw, c = x.shape
    y = T.add(T.matmul(T.reshape(x, (gh * gw, c)), w), b)
    cout = y.shape[-1] // (factor * factor)
    y = T.reshape(y, (gh, gw, factor, factor, cout))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (gh * factor, gw * factor, cout))


def _space_to_depth_down(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Stride-2 convolution with a 2x2 kernel via space-to-depth + linear."""
    gh, gw, c = x.shape
    if gh % 2 or gw % 2:
        raise T.ContractViolation(f"token grid {gh}x{gw} must be even for the 1/32 path")
    y = T.reshape(x, (gh // 2, 2, gw // 2, 2, c))
    y = T.reshape(T.transpose(y, (0, 2, 1, 3, 4)), (gh // 2 * (gw // 2), 4 * c))
    y = T.add(T.matmul(y, w), b)
    return T.reshape(y, (gh // 2, gw // 2, y.shape[-1]))


def select_head_features(
    enc_grid: TokenGrid, block_outputs: list[Tensor], config: ModelConfig
) -> list[Tensor]:
    """Encoder output plus decoder blocks at depths ceil(D/3), ceil(2D/3), D."""
    d = config.dec_depth
    picks = [math.ceil(d / 3), math.ceil(2 * d / 3), d]
    return [enc_grid.tokens] + [block_outputs[i - 1] for i in picks]


def dpt_head(
    features: list[Tensor],
    grid_hw: tuple[int, int],
    config: ModelConfig,
    params: dict,
    scale_param: ScaleParam,
) -> DensePrediction:
    """Reassemble 4 token grids to maps at 1/4..1/32 of input resolution, fuse
    coarse-to-fine with residual conv units, and project to mu + d_raw."""
    if len(features) != 4:
        raise T.ContractViolation(f"dense head needs exactly 4 feature grids, got {len(features)}")
    maps = [_tokens_to_map(t, grid_hw, params, k) for k, t in enumerate(features)]
    m0 = _pixel_shuffle_up(maps[0], params["dpt.up0.w"], params["dpt.up0.b"], 4)
    m1 = _pixel_shuffle_up(maps[1], params["dpt.up1.w"], params["dpt.up1.b"], 2)
    m2 = maps[2]
    m3 = _space_to_depth_down(maps[3], params["dpt.down3.w"], params["dpt.down3.b"])

    x = _rcu(m3, params, "dpt.rcu3")
    x = T.add(T.upsample_nearest(x, 2), m2)
    x = _rcu(x, params, "dpt.rcu2")
    x = T.add(T.upsample_nearest(x, 2), m1)
    x = _rcu(x, params, "dpt.rcu1")
    x = T.add(T.upsample_nearest(x, 2), m0)
    x = _rcu(x, params, "dpt.rcu0")

    x = _conv3x3(x, params, "dpt.head.conv1")
    x = T.upsample_nearest(T.gelu(x), 4)
    out = _conv3x3(x, params, "dpt.head.conv2")
    mu = out[:, :, : config.out_channels]
    d_raw = out[:, :, config.out_channels]
    return DensePrediction(mu=mu, d_raw=d_raw, param=scale_param)


def forward_dense(
    img1: np.ndarray,
    img2: np.ndarray,
    config: ModelConfig,
    params: dict,
    scale_param: ScaleParam,
) -> DensePrediction:
    """Unmasked two-view forward pass through the dense-regression head."""
    grid1 = encode(img1, config, params)
    grid2 = encode(img2, config, params)
    _, blocks = decode(grid1, grid2, config, params)
    feats = select_head_features(grid1, blocks, config)
    return dpt_head(feats, grid1.grid_hw, config, params, scale_param)


def scale_from_raw(d_raw, param: ScaleParam):
    """Map the raw uncertainty channel to a strictly positive scale."""
    if isinstance(d_raw, Tensor):
        if param is ScaleParam.stereo_bounded:
            a = STEREO_ALPHA
            return T.exp(T.mul(T.sub(T.sigmoid(T.mul(d_raw, 1.0 / a)), 0.5), 2.0 * a))
        if param is ScaleParam.flow_bounded:
            b = FLOW_BETA
            return T.add(T.mul(T.sigmoid(d_raw), b - 1.0 / b), 1.0 / b)
        return T.exp(d_raw)
    d_raw = np.asarray(d_raw, dtype=np.float64)
    if param is ScaleParam.stereo_bounded:
        a = STEREO_ALPHA
        return np.exp(2.0 * a * (special.expit(d_raw / a) - 0.5))
    if param is ScaleParam.flow_bounded:
        b = FLOW_BETA
        return 1.0 / b + (b - 1.0 / b) * special.expit(d_raw)
    return np.exp(d_raw)
