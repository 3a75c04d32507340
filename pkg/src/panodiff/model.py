"""Joint image/map diffusion transformers.

Three modes share one U-shaped self-attention trunk:

* ``one-stream`` - tokens ``[time, cond..., image patches, map patches]``;
  two heads predict image noise and clean map bits.
* ``given-map``  - same trunk fed the clean map; map features are projected
  and added to image features before the image head (no map head).
* ``two-stream`` - a frozen image-only trunk (``backbone/``) plus a map
  stream (``mapstream/``) that reads the backbone's per-block features and
  feeds an auxiliary image output back through bias-free, zero-initialized
  projections.

Parameters live in a flat :class:`NamedTensors`; linear weights are stored
as (in, out). Images are (B, H, W, C), maps (B, fH, fW, 8).
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch

from . import numerics as nx
from .bitcodec import NUM_BITS
from .mapprep import check_alignment
from .numerics import NamedTensors, Rng, Tensor

MODES = ("one-stream", "two-stream", "given-map")
PAD_TOKEN = 256
EMPTY_TOKEN = 257
VOCAB = 258
INIT_STD = 0.02

BACKBONE = "backbone/"
MAPSTREAM = "mapstream/"


class ModelError(ValueError):
    pass


@dataclass
class ModelConfig:
    image_size: int = 16
    image_channels: int = 3
    patch: int = 2
    patch_factor: int = 2
    hidden: int = 128
    depth: int = 6
    heads: int = 4
    cond_tokens: int = 6
    vocab: int = VOCAB
    mode: str = "one-stream"
    mlp_ratio: int = 4
    cond_pos_embed: bool = True
    zero_heads: bool = True
    # ablation: the model always sees an all-zero noisy map
    zero_map_input: bool = False

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModelError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.depth < 2 or self.depth % 2:
            raise ModelError(f"depth must be even and >= 2, got {self.depth}")
        if self.hidden % self.heads:
            raise ModelError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        check_alignment(self.image_hw, self.patch, self.patch_factor, self.map_hw)

    @property
    def image_hw(self) -> tuple[int, int]:
        return (self.image_size, self.image_size)

    @property
    def map_hw(self) -> tuple[int, int]:
        s = self.image_size * self.patch_factor
        return (s, s)

    @property
    def map_patch(self) -> int:
        return self.patch * self.patch_factor

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.image_size, self.image_size, self.image_channels)

    @property
    def map_shape(self) -> tuple[int, int, int]:
        return (*self.map_hw, NUM_BITS)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# conditioning tokens ----------------------------------------------------------

def condition_tokens(ids, length: int) -> list[int]:
    """Pad a caption (category ids) to ``length`` tokens."""
    ids = [int(i) for i in ids]
    if len(ids) > length:
        raise ModelError(f"caption has {len(ids)} tokens, model takes {length}")
    if any(not 0 <= i <= 255 for i in ids):
        raise ModelError(f"caption ids must lie in [0, 255]: {ids}")
    return ids + [PAD_TOKEN] * (length - len(ids))


def empty_condition(length: int) -> list[int]:
    return [EMPTY_TOKEN] * length


# patchify ---------------------------------------------------------------------

def patchify(x: Tensor, p: int) -> Tensor:
    """(B, H, W, C) -> (B, H/p * W/p, p*p*C), patches in row-major order."""
    b, h, w, c = x.shape
    if h % p or w % p:
        raise nx.ShapeError(f"patchify: {h}x{w} not divisible by patch {p}")
    x = x.reshape(b, h // p, p, w // p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), p * p * c)


def unpatchify(tokens: Tensor, p: int, h: int, w: int, c: int) -> Tensor:
    b, n, d = tokens.shape
    if n != (h // p) * (w // p) or d != p * p * c:
        raise nx.ShapeError(f"unpatchify: tokens {tuple(tokens.shape)} do not tile {h}x{w}x{c} with patch {p}")
    x = tokens.reshape(b, h // p, w // p, p, p, c).permute(0, 1, 3, 2, 4, 5)
    return x.reshape(b, h, w, c)


def embed_patches(x: Tensor, p: int, w: Tensor, b: Tensor, pos: Tensor) -> Tensor:
    """Strided-conv patch embedding (as a linear map on patches) plus positions."""
    return nx.add(nx.linear(patchify(x, p), w, b), pos)


# init -------------------------------------------------------------------------

def _shapes_trunk(cfg: ModelConfig, prefix: str, with_skips: bool = True) -> list[tuple[str, tuple, str]]:
    d, hdim = cfg.hidden, cfg.hidden * cfg.mlp_ratio
    out = []
    for i in range(cfg.depth):
        blk = f"{prefix}blocks.{i}."
        if with_skips and i >= cfg.depth // 2:
            out += [(blk + "skip.w", (2 * d, d), "normal"), (blk + "skip.b", (d,), "zeros")]
        out += [
            (blk + "ln1.g", (d,), "ones"), (blk + "ln1.b", (d,), "zeros"),
            (blk + "attn.qkv.w", (d, 3 * d), "normal"), (blk + "attn.qkv.b", (3 * d,), "zeros"),
            (blk + "attn.proj.w", (d, d), "normal"), (blk + "attn.proj.b", (d,), "zeros"),
            (blk + "ln2.g", (d,), "ones"), (blk + "ln2.b", (d,), "zeros"),
            (blk + "mlp.fc1.w", (d, hdim), "normal"), (blk + "mlp.fc1.b", (hdim,), "zeros"),
            (blk + "mlp.fc2.w", (hdim, d), "normal"), (blk + "mlp.fc2.b", (d,), "zeros"),
        ]
    out += [(prefix + "final_ln.g", (d,), "ones"), (prefix + "final_ln.b", (d,), "zeros")]
    return out


def _shapes_image_io(cfg: ModelConfig, prefix: str) -> list[tuple[str, tuple, str]]:
    d, p, c, n = cfg.hidden, cfg.patch, cfg.image_channels, cfg.num_patches
    head = "zeros" if cfg.zero_heads else "normal"
    return [
        (prefix + "time.w1", (d, d), "normal"), (prefix + "time.b1", (d,), "zeros"),
        (prefix + "time.w2", (d, d), "normal"), (prefix + "time.b2", (d,), "zeros"),
        (prefix + "cond_embed", (cfg.vocab, d), "embed"),
        (prefix + "cond_pos", (cfg.cond_tokens, d), "embed"),
        (prefix + "img_embed.w", (p * p * c, d), "normal"), (prefix + "img_embed.b", (d,), "zeros"),
        (prefix + "img_pos", (n, d), "embed"),
        (prefix + "img_head.w", (d, p * p * c), head), (prefix + "img_head.b", (p * p * c,), "zeros"),
    ]


def _shapes_map_io(cfg: ModelConfig, prefix: str, head: bool = True) -> list[tuple[str, tuple, str]]:
    d, q, n = cfg.hidden, cfg.map_patch, cfg.num_patches
    out = [
        (prefix + "map_embed.w", (q * q * NUM_BITS, d), "normal"), (prefix + "map_embed.b", (d,), "zeros"),
        (prefix + "map_pos", (n, d), "embed"),
    ]
    if head:
        kind = "zeros" if cfg.zero_heads else "normal"
        out += [(prefix + "map_head.w", (d, q * q * NUM_BITS), kind),
                (prefix + "map_head.b", (q * q * NUM_BITS,), "zeros")]
    return out


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """(name, shape, init kind) for every tensor of the configured model."""
    if cfg.mode == "one-stream":
        return _shapes_image_io(cfg, "") + _shapes_map_io(cfg, "") + _shapes_trunk(cfg, "")
    if cfg.mode == "given-map":
        d = cfg.hidden
        return (_shapes_image_io(cfg, "") + _shapes_map_io(cfg, "", head=False)
                + _shapes_trunk(cfg, "") + [("map_add.w", (d, d), "normal"), ("map_add.b", (d,), "zeros")])
    d = cfg.hidden
    backbone = _shapes_image_io(cfg, BACKBONE) + _shapes_trunk(cfg, BACKBONE)
    stream = _shapes_map_io(cfg, MAPSTREAM) + _shapes_trunk(cfg, MAPSTREAM)
    stream += [(f"{MAPSTREAM}zero.{i}.w", (d, d), "zeros") for i in range(cfg.depth)]
    return backbone + stream


def init_params(cfg: ModelConfig, rng: Rng, backbone: NamedTensors | None = None) -> NamedTensors:
    params = NamedTensors()
    for name, shape, kind in param_shapes(cfg):
        if kind == "zeros":
            t = torch.zeros(shape, dtype=nx.default_dtype())
        elif kind == "ones":
            t = torch.ones(shape, dtype=nx.default_dtype())
        else:
            t = rng.child(name).normal(shape, std=INIT_STD)
        params[name] = t.requires_grad_(True)
    if cfg.mode == "two-stream":
        if backbone is not None:
            load_backbone(params, backbone)
        for name in params:
            if name.startswith(BACKBONE):
                params[name].requires_grad_(False)
    return params


def load_backbone(params: NamedTensors, source: NamedTensors) -> None:
    """Copy image-stream weights into ``backbone/``; accepts bare or prefixed names."""
    for name, t in params.items():
        if not name.startswith(BACKBONE):
            continue
        bare = name[len(BACKBONE):]
        src = source.get(name, source.get(bare))
        if src is None:
            raise ModelError(f"backbone source is missing {bare!r}")
        if tuple(src.shape) != tuple(t.shape):
            raise ModelError(f"backbone tensor {bare!r}: shape {tuple(src.shape)} != {tuple(t.shape)}")
        with torch.no_grad():
            t.copy_(src)


def frozen_names(cfg: ModelConfig, params: NamedTensors) -> list[str]:
    if cfg.mode != "two-stream":
        return []
    return [k for k in params if k.startswith(BACKBONE)]


# building blocks --------------------------------------------------------------

def timestep_embedding(t: Tensor, dim: int) -> Tensor:
    """Sinusoidal features of (possibly fractional) timesteps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=t.dtype) / half)
    args = t[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def attention(x: Tensor, P: NamedTensors, pre: str, heads: int) -> Tensor:
    b, n, d = x.shape
    dh = d // heads
    qkv = nx.linear(x, P[pre + "qkv.w"], P[pre + "qkv.b"])
    qkv = qkv.reshape(b, n, 3, heads, dh).permute(2, 0, 3, 1, 4)
    q, k, v = qkv[0], qkv[1], qkv[2]
    out = nx.attention(q, k, v).transpose(1, 2).reshape(b, n, d)
    return nx.linear(out, P[pre + "proj.w"], P[pre + "proj.b"])


def block(x: Tensor, P: NamedTensors, pre: str, heads: int) -> Tensor:
    """Pre-norm attention + MLP residual block."""
    h = nx.layer_norm(x, P[pre + "ln1.g"], P[pre + "ln1.b"])
    x = nx.add(x, attention(h, P, pre + "attn.", heads))
    h = nx.layer_norm(x, P[pre + "ln2.g"], P[pre + "ln2.b"])
    h = nx.gelu(nx.linear(h, P[pre + "mlp.fc1.w"], P[pre + "mlp.fc1.b"]))
    return nx.add(x, nx.linear(h, P[pre + "mlp.fc2.w"], P[pre + "mlp.fc2.b"]))


def _skip_in(x: Tensor, skip: Tensor, P: NamedTensors, pre: str) -> Tensor:
    return nx.linear(nx.concat([x, skip], dim=-1), P[pre + "skip.w"], P[pre + "skip.b"])


def trunk(x: Tensor, P: NamedTensors, pre: str, cfg: ModelConfig) -> Tensor:
    """U-shaped stack: block i >= depth/2 fuses the output of block depth-1-i."""
    saved = []
    half = cfg.depth // 2
    for i in range(cfg.depth):
        bp = f"{pre}blocks.{i}."
        if i >= half:
            x = _skip_in(x, saved[cfg.depth - 1 - i], P, bp)
        x = block(x, P, bp, cfg.heads)
        if i < half:
            saved.append(x)
    return nx.layer_norm(x, P[pre + "final_ln.g"], P[pre + "final_ln.b"])


def _prefix_tokens(t, cond, P: NamedTensors, pre: str, cfg: ModelConfig, dtype) -> Tensor:
    """[time token, condition tokens] of shape (B, 1 + K, D)."""
    t = torch.as_tensor(t, dtype=dtype)
    cond = torch.as_tensor(cond, dtype=torch.long)
    if cond.dim() == 1:
        cond = cond[None]
    b = cond.shape[0]
    if t.dim() == 0:
        t = t.expand(b)
    if cond.shape[1] != cfg.cond_tokens:
        raise nx.ShapeError(f"condition: expected {cfg.cond_tokens} tokens, got {cond.shape[1]}")
    temb = timestep_embedding(t, cfg.hidden)
    temb = nx.linear(nx.gelu(nx.linear(temb, P[pre + "time.w1"], P[pre + "time.b1"])),
                     P[pre + "time.w2"], P[pre + "time.b2"])
    c = nx.embedding(cond, P[pre + "cond_embed"])
    if cfg.cond_pos_embed:
        c = nx.add(c, P[pre + "cond_pos"])
    return nx.concat([temb[:, None, :], c], dim=1)


def _check_inputs(cfg: ModelConfig, x: Tensor, m: Tensor | None) -> None:
    if tuple(x.shape[1:]) != cfg.image_shape:
        raise nx.ShapeError(f"image input: expected (B, {cfg.image_shape}), got {tuple(x.shape)}")
    if m is not None:
        if tuple(m.shape[1:]) != cfg.map_shape:
            raise nx.ShapeError(f"map input: expected (B, {cfg.map_shape}), got {tuple(m.shape)}")
        if m.shape[0] != x.shape[0]:
            raise nx.ShapeError(f"batch mismatch: image {tuple(x.shape)} vs map {tuple(m.shape)}")


def _image_tokens(x, P, pre, cfg):
    return embed_patches(x, cfg.patch, P[pre + "img_embed.w"], P[pre + "img_embed.b"], P[pre + "img_pos"])


def _map_tokens(m, P, pre, cfg):
    if cfg.zero_map_input:
        m = torch.zeros_like(m)
    return embed_patches(m, cfg.map_patch, P[pre + "map_embed.w"], P[pre + "map_embed.b"], P[pre + "map_pos"])


def _image_out(h: Tensor, P, pre, cfg) -> Tensor:
    out = nx.linear(h, P[pre + "img_head.w"], P[pre + "img_head.b"])
    return unpatchify(out, cfg.patch, *cfg.image_shape)


def _map_out(h: Tensor, P, pre, cfg) -> Tensor:
    out = nx.linear(h, P[pre + "map_head.w"], P[pre + "map_head.b"])
    return unpatchify(out, cfg.map_patch, *cfg.map_shape)


# forwards ---------------------------------------------------------------------

def forward_one_stream(x_t: Tensor, m_t: Tensor, cond, t, params: NamedTensors, cfg: ModelConfig):
    """Returns (eps_pred, m0_pred)."""
    _check_inputs(cfg, x_t, m_t)
    n = cfg.num_patches
    pre = _prefix_tokens(t, cond, params, "", cfg, x_t.dtype)
    if pre.shape[0] != x_t.shape[0]:
        pre = pre.expand(x_t.shape[0], -1, -1)
    h = nx.concat([pre, _image_tokens(x_t, params, "", cfg), _map_tokens(m_t, params, "", cfg)], dim=1)
    h = trunk(h, params, "", cfg)
    k = pre.shape[1]
    return _image_out(h[:, k:k + n], params, "", cfg), _map_out(h[:, k + n:], params, "", cfg)


def forward_given_map(x_t: Tensor, m0: Tensor, cond, t, params: NamedTensors, cfg: ModelConfig) -> Tensor:
    """Image noise prediction with the clean map as a condition."""
    _check_inputs(cfg, x_t, m0)
    n = cfg.num_patches
    pre = _prefix_tokens(t, cond, params, "", cfg, x_t.dtype)
    if pre.shape[0] != x_t.shape[0]:
        pre = pre.expand(x_t.shape[0], -1, -1)
    h = nx.concat([pre, _image_tokens(x_t, params, "", cfg), _map_tokens(m0, params, "", cfg)], dim=1)
    h = trunk(h, params, "", cfg)
    k = pre.shape[1]
    img = nx.add(h[:, k:k + n], nx.linear(h[:, k + n:], params["map_add.w"], params["map_add.b"]))
    return _image_out(img, params, "", cfg)


def forward_backbone(x_t: Tensor, cond, t, params: NamedTensors, cfg: ModelConfig) -> Tensor:
    """The image stream on its own (what the two-stream model starts from)."""
    _check_inputs(cfg, x_t, None)
    pre = _prefix_tokens(t, cond, params, BACKBONE, cfg, x_t.dtype)
    if pre.shape[0] != x_t.shape[0]:
        pre = pre.expand(x_t.shape[0], -1, -1)
    h = nx.concat([pre, _image_tokens(x_t, params, BACKBONE, cfg)], dim=1)
    h = trunk(h, params, BACKBONE, cfg)
    return _image_out(h[:, pre.shape[1]:], params, BACKBONE, cfg)


def forward_two_stream(x_t: Tensor, m_t: Tensor, cond, t, params: NamedTensors, cfg: ModelConfig):
    """Returns (eps_pred, m0_pred).

    Per block i the map stream sees [backbone features entering block i,
    map tokens]; its image-token output goes through ``zero.i`` and is added
    to the backbone's block-i output.
    """
    if BACKBONE + "blocks.0.ln1.g" not in params:
        raise ModelError("two-stream forward needs backbone/ parameters")
    _check_inputs(cfg, x_t, m_t)
    B, M = BACKBONE, MAPSTREAM
    pre = _prefix_tokens(t, cond, params, B, cfg, x_t.dtype)
    if pre.shape[0] != x_t.shape[0]:
        pre = pre.expand(x_t.shape[0], -1, -1)
    h = nx.concat([pre, _image_tokens(x_t, params, B, cfg)], dim=1)
    m = _map_tokens(m_t, params, M, cfg)
    n_img = h.shape[1]
    half = cfg.depth // 2
    saved_h, saved_a = [], []
    for i in range(cfg.depth):
        a = nx.concat([h, m], dim=1)
        if i >= half:
            h = _skip_in(h, saved_h[cfg.depth - 1 - i], params, f"{B}blocks.{i}.")
            a = _skip_in(a, saved_a[cfg.depth - 1 - i], params, f"{M}blocks.{i}.")
        a = block(a, params, f"{M}blocks.{i}.", cfg.heads)
        h = block(h, params, f"{B}blocks.{i}.", cfg.heads)
        if i < half:
            saved_h.append(h)
            saved_a.append(a)
        aux, m = nx.split(a, [n_img, a.shape[1] - n_img], dim=1)
        h = nx.add(h, nx.linear(aux, params[f"{M}zero.{i}.w"]))
    h = nx.layer_norm(h, params[B + "final_ln.g"], params[B + "final_ln.b"])
    m = nx.layer_norm(m, params[M + "final_ln.g"], params[M + "final_ln.b"])
    return _image_out(h[:, pre.shape[1]:], params, B, cfg), _map_out(m, params, M, cfg)


def forward(x_t: Tensor, m_t: Tensor, cond, t, params: NamedTensors, cfg: ModelConfig):
    """Dispatch on mode. given-map returns (eps_pred, None)."""
    if cfg.mode == "one-stream":
        return forward_one_stream(x_t, m_t, cond, t, params, cfg)
    if cfg.mode == "two-stream":
        return forward_two_stream(x_t, m_t, cond, t, params, cfg)
    return forward_given_map(x_t, m_t, cond, t, params, cfg), None
