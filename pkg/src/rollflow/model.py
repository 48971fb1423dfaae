"""Two-branch audio-video transformer with cross-modal fusion.

Video latents are patchified into per-frame token grids and processed by
spatial attention within each frame plus causal attention across frames.
Audio segments get causal attention across frames only.  The branches
exchange information once per block, after the attentions and before the
feed-forward layers, through one of three fusion styles:

  concat-attention       joint self-attention over all tokens of both
                         modalities, frame-causal at block granularity
  temporal-average       each branch's feed-forward pass is modulated by
                         the other branch's per-frame token average
  temporal-average-cond  as above, with the timestep and class embedding
                         added to the average before modulation

Every attention and feed-forward site is wrapped in adaptive layer
normalization driven by per-frame conditioning, with zero-initialized
modulation maps and output heads so the freshly built network is the
identity with zero output.
"""
from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np

from . import numerics as nx
from .numerics import Tensor
from .schedule import TimestepVector


class BlockVariant(enum.Enum):
    CONCAT_ATTENTION = "concat-attention"
    TEMPORAL_AVERAGE = "temporal-average"
    TEMPORAL_AVERAGE_COND = "temporal-average-cond"


@dataclasses.dataclass(frozen=True)
class ModelConfig:
    variant: BlockVariant = BlockVariant.TEMPORAL_AVERAGE_COND
    depth: int = 12
    hidden: int = 128
    heads: int = 8
    patch: int = 2
    channels: int = 4
    height: int = 8
    width: int = 8
    segments_per_frame: int = 4
    mel_bins: int = 16
    classes: int | None = None
    mlp_ratio: float = 2.0
    eps: float = 1e-6

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be at least 1")
        if self.hidden % 2 != 0:
            raise ValueError("hidden width must be even")
        if self.hidden % self.heads != 0:
            raise ValueError("heads must divide hidden width")
        if self.height % self.patch != 0 or self.width % self.patch != 0:
            raise ValueError("patch size must divide both latent extents")
        if self.segments_per_frame < 1 or self.mel_bins < 1:
            raise ValueError("audio geometry must be positive")
        if self.classes is not None and self.classes < 1:
            raise ValueError("classes must be positive when set")

    @property
    def patches_per_frame(self) -> int:
        return (self.height // self.patch) * (self.width // self.patch)

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch * self.patch


@dataclasses.dataclass(frozen=True)
class ConditionEmbeddings:
    """Per-frame modulation inputs: timestep rows plus optional class vector."""

    t_emb: Tensor
    y_emb: Tensor | None = None

    def combined(self) -> Tensor:
        if self.y_emb is None:
            return self.t_emb
        return nx.add(self.t_emb, self.y_emb)


@dataclasses.dataclass
class RFlavNetwork:
    cfg: ModelConfig
    params: dict[str, Tensor]
    dtype: type = np.float32

    def named_parameters(self):
        return self.params.items()

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


# ---------------------------------------------------------------------------
# construction

def _normal(rng, shape, std, dtype):
    return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)


def _add_attention_site(params, prefix, d, dtype, rng):
    params[prefix + ".mod.W"] = _zeros((d, 3 * d), dtype)
    params[prefix + ".mod.b"] = _zeros((3 * d,), dtype)
    params[prefix + ".qkv.W"] = _normal(rng, (d, 3 * d), 0.02, dtype)
    params[prefix + ".qkv.b"] = _zeros((3 * d,), dtype)
    params[prefix + ".out.W"] = _normal(rng, (d, d), 0.02, dtype)
    params[prefix + ".out.b"] = _zeros((d,), dtype)


def _add_ffn_site(params, prefix, d, hidden, dtype, rng):
    params[prefix + ".mod.W"] = _zeros((d, 3 * d), dtype)
    params[prefix + ".mod.b"] = _zeros((3 * d,), dtype)
    params[prefix + ".W1"] = _normal(rng, (d, hidden), 0.02, dtype)
    params[prefix + ".b1"] = _zeros((hidden,), dtype)
    params[prefix + ".W2"] = _normal(rng, (hidden, d), 0.02, dtype)
    params[prefix + ".b2"] = _zeros((d,), dtype)


def build_network(cfg: ModelConfig, seed: int = 0,
                  dtype=np.float32) -> RFlavNetwork:
    """Initialize all parameters; modulation maps and heads start at zero."""
    rng = np.random.default_rng(seed)
    d = cfg.hidden
    mlp_hidden = int(round(cfg.mlp_ratio * d))
    params: dict[str, Tensor] = {}
    params["patch.W"] = _normal(rng, (cfg.patch_dim, d), 0.02, dtype)
    params["patch.b"] = _zeros((d,), dtype)
    params["audio_in.W"] = _normal(rng, (cfg.mel_bins, d), 0.02, dtype)
    params["audio_in.b"] = _zeros((d,), dtype)
    params["tmlp.W1"] = _normal(rng, (d, d), 0.02, dtype)
    params["tmlp.b1"] = _zeros((d,), dtype)
    params["tmlp.W2"] = _normal(rng, (d, d), 0.02, dtype)
    params["tmlp.b2"] = _zeros((d,), dtype)
    if cfg.classes is not None:
        params["class_emb"] = _normal(rng, (cfg.classes, d), 0.02, dtype)
    for i in range(cfg.depth):
        pre = f"b{i}"
        _add_attention_site(params, pre + ".vs", d, dtype, rng)
        _add_attention_site(params, pre + ".vt", d, dtype, rng)
        _add_attention_site(params, pre + ".at", d, dtype, rng)
        if cfg.variant is BlockVariant.CONCAT_ATTENTION:
            _add_attention_site(params, pre + ".fu", d, dtype, rng)
        _add_ffn_site(params, pre + ".vf", d, mlp_hidden, dtype, rng)
        _add_ffn_site(params, pre + ".af", d, mlp_hidden, dtype, rng)
    params["head_v.mod.W"] = _zeros((d, 2 * d), dtype)
    params["head_v.mod.b"] = _zeros((2 * d,), dtype)
    params["head_v.W"] = _zeros((d, cfg.patch_dim), dtype)
    params["head_v.b"] = _zeros((cfg.patch_dim,), dtype)
    params["head_a.mod.W"] = _zeros((d, 2 * d), dtype)
    params["head_a.mod.b"] = _zeros((2 * d,), dtype)
    params["head_a.W"] = _zeros((d, cfg.mel_bins), dtype)
    params["head_a.b"] = _zeros((cfg.mel_bins,), dtype)
    return RFlavNetwork(cfg, params, dtype)


# ---------------------------------------------------------------------------
# token plumbing

def patchify(latent, p: int, weight: Tensor, bias: Tensor) -> Tensor:
    """[T,c,h,w] -> [T,L,D]: non-overlapping p*p patches, then projection."""
    latent = nx.as_tensor(latent)
    frames, c, h, w = latent.shape
    if h % p != 0 or w % p != 0:
        raise ValueError(f"patch size {p} does not divide extents ({h},{w})")
    gh, gw = h // p, w // p
    x = nx.reshape(latent, (frames, c, gh, p, gw, p))
    x = nx.permute(x, (0, 2, 4, 1, 3, 5))
    x = nx.reshape(x, (frames, gh * gw, c * p * p))
    return nx.add(nx.matmul(x, weight), bias)


def unpatchify(tokens: Tensor, c: int, h: int, w: int, p: int,
               weight: Tensor, bias: Tensor) -> Tensor:
    """[T,L,D] -> [T,c,h,w]: project back to patch pixels, then reassemble."""
    frames, patches, _ = tokens.shape
    gh, gw = h // p, w // p
    if patches != gh * gw:
        raise ValueError(f"token count {patches} does not tile {h}x{w} at p={p}")
    x = nx.add(nx.matmul(tokens, weight), bias)
    x = nx.reshape(x, (frames, gh, gw, c, p, p))
    x = nx.permute(x, (0, 3, 1, 4, 2, 5))
    return nx.reshape(x, (frames, c, h, w))


def embed_timesteps(ts: TimestepVector, dim: int) -> np.ndarray:
    """Sinusoidal features of each frame timestep, geometric frequencies.

    Timesteps in [0,1] are scaled by 1000 so neighbouring noise levels are
    distinguishable at the usual 1e4 period floor.
    """
    if dim % 2 != 0:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / half)
    args = np.asarray(ts.t, dtype=np.float64)[:, None] * 1000.0 * freqs[None, :]
    return np.concatenate([np.cos(args), np.sin(args)], axis=-1)


def condition_embeddings(net: RFlavNetwork, ts: TimestepVector,
                         y: int | None) -> ConditionEmbeddings:
    table = embed_timesteps(ts, net.cfg.hidden).astype(net.dtype)
    p = net.params
    h = nx.silu(nx.add(nx.matmul(Tensor(table), p["tmlp.W1"]), p["tmlp.b1"]))
    t_emb = nx.add(nx.matmul(h, p["tmlp.W2"]), p["tmlp.b2"])
    y_emb = None
    if y is not None:
        if net.cfg.classes is None:
            raise ValueError("network was built without class conditioning")
        if not 0 <= y < net.cfg.classes:
            raise ValueError(f"class id {y} outside [0, {net.cfg.classes})")
        y_emb = nx.take_slice(p["class_emb"], 0, y, y + 1)
        y_emb = nx.reshape(y_emb, (net.cfg.hidden,))
    return ConditionEmbeddings(t_emb, y_emb)


# ---------------------------------------------------------------------------
# modulation and attention sites

def _chunk3(x: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    d = x.shape[-1] // 3
    ax = x.ndim - 1
    return (nx.take_slice(x, ax, 0, d),
            nx.take_slice(x, ax, d, 2 * d),
            nx.take_slice(x, ax, 2 * d, 3 * d))


def _align(mod: Tensor, target_ndim: int) -> Tensor:
    # [T,K] -> [T,1,...,K] so per-frame vectors broadcast over token axes
    while mod.ndim < target_ndim:
        shape = (mod.shape[0],) + (1,) * (target_ndim - mod.ndim) + mod.shape[1:]
        mod = nx.reshape(mod, shape)
    return mod


def adaln_modulate(x: Tensor, cond: Tensor, weight: Tensor, bias: Tensor,
                   eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """Normalize x, apply conditioned shift/scale, and return the gate.

    The gate multiplies the branch output before its residual add; with a
    zero-initialized map the site is an exact identity.
    """
    cond = nx.as_tensor(cond)
    if cond.ndim == 1:
        cond = nx.reshape(cond, (1, cond.shape[0]))
    mod = _align(nx.add(nx.matmul(cond, weight), bias), x.ndim)
    scale, shift, gate = _chunk3(mod)
    normed = nx.layer_normalize(x, eps=eps)
    out = nx.add(nx.mul(normed, nx.add(scale, 1.0)), shift)
    return out, gate


def _final_modulate(x: Tensor, cond: Tensor, weight: Tensor, bias: Tensor,
                    eps: float) -> Tensor:
    mod = _align(nx.add(nx.matmul(cond, weight), bias), x.ndim)
    d = mod.shape[-1] // 2
    ax = mod.ndim - 1
    scale = nx.take_slice(mod, ax, 0, d)
    shift = nx.take_slice(mod, ax, d, 2 * d)
    return nx.add(nx.mul(nx.layer_normalize(x, eps=eps), nx.add(scale, 1.0)), shift)


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n), dtype=bool))


def frame_block_mask(frames: int, block: int) -> np.ndarray:
    """Token i may attend token j iff j's frame is not later than i's."""
    idx = np.repeat(np.arange(frames), block)
    return idx[None, :] <= idx[:, None]


def _heads_split(x: Tensor, heads: int) -> Tensor:
    # [..., N, D] -> [..., H, N, D/H]
    *lead, n, d = x.shape
    x = nx.reshape(x, tuple(lead) + (n, heads, d // heads))
    order = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    return nx.permute(x, order)


def _heads_join(x: Tensor) -> Tensor:
    # [..., H, N, D/H] -> [..., N, D]
    *lead, h, n, dh = x.shape
    order = tuple(range(len(lead))) + (x.ndim - 2, x.ndim - 3, x.ndim - 1)
    x = nx.permute(x, order)
    return nx.reshape(x, tuple(lead) + (n, h * dh))


def _attention_site(x: Tensor, mask: np.ndarray | None, heads: int,
                    params: dict, prefix: str) -> Tensor:
    qkv = nx.add(nx.matmul(x, params[prefix + ".qkv.W"]), params[prefix + ".qkv.b"])
    q, k, v = _chunk3(qkv)
    out = nx.attention(_heads_split(q, heads), _heads_split(k, heads),
                       _heads_split(v, heads), mask=mask)
    out = _heads_join(out)
    return nx.add(nx.matmul(out, params[prefix + ".out.W"]), params[prefix + ".out.b"])


def _ffn(x: Tensor, params: dict, prefix: str) -> Tensor:
    h = nx.gelu(nx.add(nx.matmul(x, params[prefix + ".W1"]), params[prefix + ".b1"]))
    return nx.add(nx.matmul(h, params[prefix + ".W2"]), params[prefix + ".b2"])


def _gated_attention(x: Tensor, cond: Tensor, mask, heads, params, prefix, eps):
    moded, gate = adaln_modulate(x, cond, params[prefix + ".mod.W"],
                                 params[prefix + ".mod.b"], eps)
    return nx.add(x, nx.mul(gate, _attention_site(moded, mask, heads, params, prefix)))


def _gated_ffn(x: Tensor, cond: Tensor, params, prefix, eps):
    moded, gate = adaln_modulate(x, cond, params[prefix + ".mod.W"],
                                 params[prefix + ".mod.b"], eps)
    return nx.add(x, nx.mul(gate, _ffn(moded, params, prefix)))


def temporal_average(video: Tensor, audio: Tensor) -> tuple[Tensor, Tensor]:
    """Per-frame mean over each branch's within-frame token axis."""
    return (nx.mean(video, axis=1, keepdims=True),
            nx.mean(audio, axis=1, keepdims=True))


# ---------------------------------------------------------------------------
# block and full forward

def block_forward(variant: BlockVariant, video: Tensor, audio: Tensor,
                  cond: ConditionEmbeddings, params: dict, prefix: str,
                  heads: int, eps: float = 1e-6) -> tuple[Tensor, Tensor]:
    """One fusion block: attentions, cross-modal exchange, feed-forwards.

    ``video`` is [T,L,D]; ``audio`` is [T,S,D] with S segments per frame.
    Outputs keep both shapes.  Nothing at frame i reads any token or
    timestep of a frame later than i.
    """
    frames, patches, d = video.shape
    segs = audio.shape[1]
    cvec = cond.combined()

    # video: spatial attention within each frame, then causal across frames;
    # modulation always happens in [T,L,D] layout so per-frame conditioning
    # broadcasts over the token axis, with transposes only around attention
    video = _gated_attention(video, cvec, None, heads, params, prefix + ".vs", eps)
    vt_moded, vt_gate = adaln_modulate(video, cvec, params[prefix + ".vt.mod.W"],
                                       params[prefix + ".vt.mod.b"], eps)
    vt_out = _attention_site(nx.permute(vt_moded, (1, 0, 2)),
                             causal_mask(frames), heads, params, prefix + ".vt")
    video = nx.add(video, nx.mul(vt_gate, nx.permute(vt_out, (1, 0, 2))))

    # audio: one causal attention over the flattened segment sequence,
    # full attention within a frame's segment group
    at_moded, at_gate = adaln_modulate(audio, cvec, params[prefix + ".at.mod.W"],
                                       params[prefix + ".at.mod.b"], eps)
    flat = nx.reshape(at_moded, (frames * segs, d))
    at_out = _attention_site(flat, frame_block_mask(frames, segs), heads,
                             params, prefix + ".at")
    audio = nx.add(audio, nx.mul(at_gate, nx.reshape(at_out, (frames, segs, d))))

    if variant is BlockVariant.CONCAT_ATTENTION:
        joint = nx.concat([video, audio], axis=1)
        fu_moded, fu_gate = adaln_modulate(joint, cvec,
                                           params[prefix + ".fu.mod.W"],
                                           params[prefix + ".fu.mod.b"], eps)
        width = patches + segs
        flat = nx.reshape(fu_moded, (frames * width, d))
        fu_out = _attention_site(flat, frame_block_mask(frames, width), heads,
                                 params, prefix + ".fu")
        fused = nx.add(joint, nx.mul(fu_gate,
                                     nx.reshape(fu_out, (frames, width, d))))
        video = nx.take_slice(fused, 1, 0, patches)
        audio = nx.take_slice(fused, 1, patches, width)
        video_ffn_cond = cvec
        audio_ffn_cond = cvec
    else:
        v_avg, a_avg = temporal_average(video, audio)
        v_avg = nx.reshape(v_avg, (frames, d))
        a_avg = nx.reshape(a_avg, (frames, d))
        if variant is BlockVariant.TEMPORAL_AVERAGE_COND:
            v_avg = nx.add(v_avg, cvec)
            a_avg = nx.add(a_avg, cvec)
        # each branch's feed-forward is driven by the other branch's summary
        video_ffn_cond = a_avg
        audio_ffn_cond = v_avg

    video = _gated_ffn(video, video_ffn_cond, params, prefix + ".vf", eps)
    audio = _gated_ffn(audio, audio_ffn_cond, params, prefix + ".af", eps)
    return video, audio


def network_forward(net: RFlavNetwork, video_latent, audio_mel,
                    ts: TimestepVector, y: int | None = None
                    ) -> tuple[Tensor, Tensor]:
    """Predict per-element velocities for both modalities.

    ``video_latent``: [T,c,h,w]; ``audio_mel``: [T,S,N]; returns tensors of
    the same shapes.
    """
    cfg = net.cfg
    video_latent = nx.as_tensor(video_latent)
    audio_mel = nx.as_tensor(audio_mel)
    frames = len(ts.t)
    if video_latent.shape != (frames, cfg.channels, cfg.height, cfg.width):
        raise ValueError(f"video shape {video_latent.shape} does not match "
                         f"({frames},{cfg.channels},{cfg.height},{cfg.width})")
    if audio_mel.shape != (frames, cfg.segments_per_frame, cfg.mel_bins):
        raise ValueError(f"audio shape {audio_mel.shape} does not match "
                         f"({frames},{cfg.segments_per_frame},{cfg.mel_bins})")
    p = net.params
    video = patchify(video_latent, cfg.patch, p["patch.W"], p["patch.b"])
    audio = nx.add(nx.matmul(audio_mel, p["audio_in.W"]), p["audio_in.b"])
    cond = condition_embeddings(net, ts, y)
    for i in range(cfg.depth):
        video, audio = block_forward(cfg.variant, video, audio, cond,
                                     p, f"b{i}", cfg.heads, cfg.eps)
    cvec = cond.combined()
    video = _final_modulate(video, cvec, p["head_v.mod.W"], p["head_v.mod.b"], cfg.eps)
    phi_v = unpatchify(video, cfg.channels, cfg.height, cfg.width, cfg.patch,
                       p["head_v.W"], p["head_v.b"])
    audio = _final_modulate(audio, cvec, p["head_a.mod.W"], p["head_a.mod.b"], cfg.eps)
    phi_a = nx.add(nx.matmul(audio, p["head_a.W"]), p["head_a.b"])
    return phi_v, phi_a
