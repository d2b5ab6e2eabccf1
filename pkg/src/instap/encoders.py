"""Video/text encoders, projections, cross-attention pooling and the fusion transformer.

Everything that carries learnable weights lives in :class:`InstAPModel`.  The
module-level functions (``encode_video_full``, ``fuse``, ...) are thin,
sample-level entry points; the training code calls the batched methods on the
model directly.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import kernels
from .schema import Box, InstanceAnnotation, Sample
from .tokens import TokenSeq, patchify

TEACHER_SEED = 0x1A9F_2024


@dataclass(frozen=True)
class ModelConfig:
    d: int = 64
    d_proj: int = 32
    heads: int = 4
    video_layers: int = 2
    text_layers: int = 2
    fusion_layers: int = 2
    patch: int = 8
    max_frames: int = 16
    max_grid: int = 8
    vocab_size: int = 35
    max_len: int = 16
    pad_id: int = 1
    mlp_ratio: int = 4
    grounding_hidden: int = 128
    tau_init: float = 0.07
    teacher_seed: int = TEACHER_SEED

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


# ---------------------------------------------------------------------------
# building blocks


class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.heads = heads
        self.q = nn.Linear(d, d)
        # a key bias only shifts each query's logits by a constant, which softmax ignores
        self.k = nn.Linear(d, d, bias=False)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)

    def forward(self, x, ctx=None, key_valid=None, return_attn=False):
        ctx = x if ctx is None else ctx
        B, Lq, d = x.shape
        Lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(B, Lq, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(B, Lk, h, d // h).transpose(1, 2)
        v = self.v(ctx).view(B, Lk, h, d // h).transpose(1, 2)
        logits = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_valid is not None:
            logits = logits.masked_fill(~key_valid[:, None, None, :], float("-inf"))
        attn = logits.softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(B, Lq, d)
        out = self.o(out)
        return (out, attn) if return_attn else out


class MLP(nn.Module):
    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, d * ratio)
        self.fc2 = nn.Linear(d * ratio, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class Block(nn.Module):
    """Pre-LN transformer block, optionally with a cross-attention sub-layer."""

    def __init__(self, d: int, heads: int, ratio: int, cross: bool = False):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, heads)
        self.cross = cross
        if cross:
            self.ln_x = nn.LayerNorm(d)
            self.xattn = Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = MLP(d, ratio)

    def forward(self, x, key_valid=None, ctx=None, ctx_valid=None, return_attn=False):
        a, attn = self.attn(self.ln1(x), key_valid=key_valid, return_attn=True)
        x = x + a
        if self.cross and ctx is not None:
            x = x + self.xattn(self.ln_x(x), ctx, key_valid=ctx_valid)
        x = x + self.mlp(self.ln2(x))
        return (x, attn) if return_attn else x

    def zero_residual(self):
        with torch.no_grad():
            for lin in (self.attn.o, self.mlp.fc2) + ((self.xattn.o,) if self.cross else ()):
                lin.weight.zero_()
                lin.bias.zero_()


class VideoEncoder(nn.Module):
    """Patch embedding + factorised (frame, row, col) positions + joint space-time attention."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch_embed = nn.Linear(cfg.patch * cfg.patch * 3, cfg.d)
        self.pos_t = nn.Embedding(cfg.max_frames, cfg.d)
        self.pos_r = nn.Embedding(cfg.max_grid, cfg.d)
        self.pos_c = nn.Embedding(cfg.max_grid, cfg.d)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.video_layers))

    def embed(self, patches, positions):
        return (self.patch_embed(patches) + self.pos_t(positions[..., 0])
                + self.pos_r(positions[..., 1]) + self.pos_c(positions[..., 2]))

    def forward(self, patches, positions, valid=None, return_attn=False):
        x = self.embed(patches, positions)
        attn = None
        for blk in self.blocks:
            x, attn = blk(x, key_valid=valid, return_attn=True)
        return (x, attn) if return_attn else x


class TextEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.pad_id = cfg.pad_id
        self.vocab_size = cfg.vocab_size
        self.tok = nn.Embedding(cfg.vocab_size, cfg.d)
        self.pos = nn.Embedding(cfg.max_len, cfg.d)
        self.blocks = nn.ModuleList(Block(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.text_layers))

    def forward(self, ids):
        if int(ids.max()) >= self.vocab_size or int(ids.min()) < 0:
            raise ValueError(f"token id out of range for vocab of size {self.vocab_size}")
        valid = ids != self.pad_id
        x = self.tok(ids) + self.pos(torch.arange(ids.shape[1], device=ids.device))[None]
        for blk in self.blocks:
            x = blk(x, key_valid=valid)
        return x, valid


class Fusion(nn.Module):
    """Text self-attention + cross-attention to visual tokens, BERT-style."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers = nn.ModuleList(
            Block(cfg.d, cfg.heads, cfg.mlp_ratio, cross=True) for _ in range(cfg.fusion_layers)
        )
        self.norm = nn.LayerNorm(cfg.d)

    def forward(self, text, text_valid, visual=None, visual_valid=None):
        x = text
        for layer in self.layers:
            x = layer(x, key_valid=text_valid, ctx=visual, ctx_valid=visual_valid)
        return self.norm(x)


class CrossAttnPool(nn.Module):
    """Z = C + XAttn(LN(C), LN(V)): crop queries, scene keys/values."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.ln_q = nn.LayerNorm(cfg.d)
        self.ln_kv = nn.LayerNorm(cfg.d)
        self.attn = Attention(cfg.d, cfg.heads)

    def forward(self, C, V, C_valid=None, V_valid=None):
        Z = C + self.attn(self.ln_q(C), self.ln_kv(V), key_valid=V_valid)
        return Z, masked_mean(Z, C_valid)


class GroundingHead(nn.Module):
    """3-layer MLP mapping a fused [CLS] vector to a normalised (cx, cy, w, h) box."""

    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.fc3 = nn.Linear(hidden, 4)

    def forward(self, x):
        x = F.gelu(self.fc1(x))
        x = F.gelu(self.fc2(x))
        return torch.sigmoid(self.fc3(x))


def masked_mean(x, valid=None):
    if valid is None:
        return x.mean(dim=1)
    w = valid.to(x.dtype)[..., None]
    return (x * w).sum(dim=1) / w.sum(dim=1)


def init_weights(module: nn.Module, generator: torch.Generator) -> None:
    """Deterministic init: LeCun-normal linears, N(0, 0.02) embeddings."""
    for m in module.modules():
        if isinstance(m, nn.Linear):
            with torch.no_grad():
                m.weight.normal_(0.0, 1.0 / math.sqrt(m.in_features), generator=generator)
                if m.bias is not None:
                    m.bias.zero_()
        elif isinstance(m, nn.Embedding):
            with torch.no_grad():
                m.weight.normal_(0.0, 0.02, generator=generator)
        elif isinstance(m, nn.LayerNorm):
            with torch.no_grad():
                m.weight.fill_(1.0)
                m.bias.zero_()


# ---------------------------------------------------------------------------
# full model


VIDEO_PREFIX = "video."
TEACHER_PREFIX = "teacher."


class InstAPModel(nn.Module):
    """Every learnable tensor of the system plus the frozen teacher.

    ``fusion`` and ``itm_head`` are single modules shared by the global and
    instance matching / MLM objectives.
    """

    def __init__(self, cfg: ModelConfig = ModelConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.video = VideoEncoder(cfg)
        self.teacher = VideoEncoder(cfg)
        self.text = TextEncoder(cfg)
        self.proj_v = nn.Linear(cfg.d, cfg.d_proj, bias=False)
        self.proj_t = nn.Linear(cfg.d, cfg.d_proj, bias=False)
        self.pool = CrossAttnPool(cfg)
        self.fusion = Fusion(cfg)
        self.itm_head = nn.Linear(cfg.d, 2)
        self.mlm_head = nn.Linear(cfg.d, cfg.vocab_size)
        self.grounding = GroundingHead(cfg.d, cfg.grounding_hidden)
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.log_tau_inst = nn.Parameter(torch.tensor(math.log(cfg.tau_init)))
        self.reset_parameters(seed)

    def reset_parameters(self, seed: int) -> None:
        g = torch.Generator().manual_seed(int(seed))
        for name, child in self.named_children():
            if name != "teacher":
                init_weights(child, g)
        with torch.no_grad():
            self.log_tau.fill_(math.log(self.cfg.tau_init))
            self.log_tau_inst.fill_(math.log(self.cfg.tau_init))
        init_weights(self.teacher, torch.Generator().manual_seed(self.cfg.teacher_seed))
        self.teacher.requires_grad_(False)

    @property
    def tau(self):
        return self.log_tau.exp()

    @property
    def tau_inst(self):
        return self.log_tau_inst.exp()

    def trainable_named_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(TEACHER_PREFIX)]

    # -- batched paths -------------------------------------------------------

    def encode_video(self, patches, positions, valid=None):
        V = self.video(patches, positions, valid)
        return V, masked_mean(V, valid)

    @torch.no_grad()
    def teacher_forward(self, patches, positions, valid=None):
        hT, attn = self.teacher(patches, positions, valid, return_attn=True)
        # attn is (B, heads, query, key); average heads, then make rows receivers
        A = attn.mean(dim=1).transpose(-1, -2)
        return hT, A

    def encode_text(self, ids):
        T, valid = self.text(ids)
        return T, T[:, 0], valid

    def project(self, raw, which: str):
        lin = {"visual": self.proj_v, "text": self.proj_t}[which]
        out = lin(raw)
        norm = out.norm(dim=-1, keepdim=True)
        if bool((norm == 0).any()):
            raise ValueError("projection produced a zero vector; normalisation undefined")
        return out / norm

    def fuse_hidden(self, text_hidden, text_valid, visual=None, visual_valid=None):
        return self.fusion(text_hidden, text_valid, visual, visual_valid)

    def matching_logits(self, fused):
        return self.itm_head(fused[:, 0])

    def mlm_logits(self, fused):
        return self.mlm_head(fused)


def param_count(cfg: ModelConfig) -> int:
    return sum(p.numel() for p in InstAPModel(cfg).parameters())


# ---------------------------------------------------------------------------
# sample-level entry points


def _to_tensor(x, model: InstAPModel):
    dtype = next(model.parameters()).dtype
    return torch.as_tensor(np.asarray(x) if not torch.is_tensor(x) else x, dtype=dtype)


def _pos(tokens: TokenSeq):
    return torch.as_tensor(tokens.positions, dtype=torch.long)[None]


def embed_tokens(model: InstAPModel, tokens: TokenSeq) -> TokenSeq:
    """Apply the student's patch projection + positional embedding."""
    x = model.video.embed(_to_tensor(tokens.data, model)[None], _pos(tokens))
    return TokenSeq(x[0], tokens.positions)


def encode_video_full(model: InstAPModel, tokens: TokenSeq):
    """Run the student on every patch token; returns (V, mean-pooled v)."""
    V, v = model.encode_video(_to_tensor(tokens.data, model)[None], _pos(tokens))
    return TokenSeq(V[0], tokens.positions), v[0]


def encode_video_student(model: InstAPModel, visible: TokenSeq):
    """Student features for visible tokens only (they attend among themselves)."""
    V = model.video(_to_tensor(visible.data, model)[None], _pos(visible))
    return TokenSeq(V[0], visible.positions)


def teacher_features(model: InstAPModel, tokens: TokenSeq):
    """Frozen-teacher features on the full token set and its head-averaged final attention map."""
    hT, A = model.teacher_forward(_to_tensor(tokens.data, model)[None], _pos(tokens))
    return TokenSeq(hT[0], tokens.positions), A[0]


def encode_text(model: InstAPModel, token_ids):
    ids = torch.as_tensor(np.asarray(token_ids), dtype=torch.long)
    squeeze = ids.ndim == 1
    if squeeze:
        ids = ids[None]
    T, t, _ = model.encode_text(ids)
    return (T[0], t[0]) if squeeze else (T, t)


def project(model: InstAPModel, raw, which: str):
    return model.project(_to_tensor(raw, model), which)


def crop_instance(sample: Sample, instance: InstanceAnnotation, crop_hw=(32, 32)) -> np.ndarray:
    """Bilinear crops of the annotated frames; returns (T_c, H_c, W_c, 3) in [0, 1]."""
    T, H, W, _ = sample.frames.shape
    frames = sample.frames01
    out = []
    for b in instance.trajectory:
        if not 0 <= b.t < T:
            raise ValueError(f"box frame {b.t} outside the sample's {T} frames")
        x0, y0 = max(b.x, 0), max(b.y, 0)
        x1, y1 = min(b.x + b.w, W), min(b.y + b.h, H)
        if x1 <= x0 or y1 <= y0:
            raise ValueError(f"degenerate box after clamping: {b}")
        out.append(kernels.bilinear_resize(frames[b.t, y0:y1, x0:x1], crop_hw[0], crop_hw[1]))
    return np.stack(out)


def cross_attend_pool(model: InstAPModel, C: TokenSeq, V: TokenSeq):
    Z, z = model.pool(_to_tensor(C.data, model)[None], _to_tensor(V.data, model)[None])
    return TokenSeq(Z[0], C.positions), z[0]


def fuse(model: InstAPModel, visual, text_ids):
    """Fused [CLS] vector and per-position vocab logits for one (visual, caption) pair.

    ``visual`` is a TokenSeq, an (L, d) array, or None for a text-only pass.
    """
    ids = torch.as_tensor(np.asarray(text_ids), dtype=torch.long)[None]
    T, _, valid = model.encode_text(ids)
    vis = None
    if visual is not None:
        data = visual.data if isinstance(visual, TokenSeq) else visual
        vis = _to_tensor(data, model)
        if vis.ndim == 1:
            vis = vis[None]
        vis = vis[None]
    fused = model.fuse_hidden(T, valid, vis)
    return fused[0, 0], model.mlm_logits(fused)[0]


def box_to_unit(box: Box, H: int, W: int) -> np.ndarray:
    """Pixel box -> normalised (cx, cy, w, h)."""
    return np.array([(box.x + box.w / 2) / W, (box.y + box.h / 2) / H, box.w / W, box.h / H])


__all__ = [
    "ModelConfig", "InstAPModel", "TokenSeq", "patchify", "embed_tokens", "encode_video_full",
    "encode_video_student", "teacher_features", "encode_text", "project", "crop_instance",
    "cross_attend_pool", "fuse", "param_count", "box_to_unit", "masked_mean",
]
