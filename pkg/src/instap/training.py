"""Two-stage training: masked video modelling, then instance-aware alignment.

Stage 1 (``pretrain``) regresses frozen-teacher features from the visible
tokens left by attention-guided masking.  Stage 2 (``align``) optimises the
global and instance VTC/VTM/MLM objectives.  All randomness flows from three
seeds: ``seed_data`` (shuffling, caption choice), ``seed_init`` (weights) and
``seed_dropout`` (per-step draws: MLM masks and hard negatives).
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import losses as L
from .checkpoint import load_model_tensors, read_checkpoint, write_checkpoint
from .encoders import VIDEO_PREFIX, InstAPModel, ModelConfig, crop_instance
from .masking import build_mask, importance_scores
from .schema import Sample, Vocab, default_vocab, sample_caption_sentence, tokenize
from .tokens import patchify

log = logging.getLogger(__name__)

LOG_TAU_BOUNDS = (math.log(1e-3), math.log(10.0))


# ---------------------------------------------------------------------------
# config


@dataclass(frozen=True)
class TrainConfig:
    stage: str = "align"
    mask_ratio: float = 0.8
    frames_per_clip: int = 4
    batch_size: int = 16
    epochs: int = 10
    max_steps: int = 0  # 0 -> epochs * batches per epoch
    lr: float = 1.5e-4
    warmup_frac: float = 0.05
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weights: L.LossWeights = L.LossWeights()
    seed_data: int = 0
    seed_init: int = 0
    seed_dropout: int = 0
    caption_subsampling: bool = True
    independent_inst_temperature: bool = True
    keep_rec_in_align: bool = False
    mlm_ratio: float = 0.15
    crop_hw: tuple[int, int] = (32, 32)
    checkpoint_every: int = 0
    init_from: str | None = None
    model: ModelConfig = ModelConfig()

    def __post_init__(self):
        if self.stage not in ("pretrain", "align"):
            raise ValueError(f"stage must be 'pretrain' or 'align', got {self.stage!r}")
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask_ratio must lie in [0, 1)")
        if self.stage == "align" and self.batch_size < 2:
            raise ValueError("align needs batch_size >= 2 for in-batch negatives")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        d["crop_hw"] = list(self.crop_hw)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown config keys: {', '.join(unknown)}")
        d = dict(d)
        if "weights" in d:
            w = d["weights"]
            bad = sorted(set(w) - {f.name for f in dataclasses.fields(L.LossWeights)})
            if bad:
                raise KeyError(f"unknown config keys: {', '.join('weights.' + b for b in bad)}")
            d["weights"] = L.LossWeights(**w)
        if "model" in d:
            m = d["model"]
            bad = sorted(set(m) - {f.name for f in dataclasses.fields(ModelConfig)})
            if bad:
                raise KeyError(f"unknown config keys: {', '.join('model.' + b for b in bad)}")
            d["model"] = ModelConfig(**m)
        for k in ("betas", "crop_hw"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class OptState:
    exp_avg: dict = field(default_factory=dict)
    exp_avg_sq: dict = field(default_factory=dict)
    step: int = 0


def no_decay(name: str) -> bool:
    """Temperatures, biases and LayerNorm gains are exempt from weight decay."""
    return name.startswith("log_tau") or name.endswith("bias") or ".ln" in name or name.startswith("fusion.norm")


@torch.no_grad()
def adamw_update(params: dict, grads: dict, opt: OptState, lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, weight_decay: float = 0.0, decay_filter: Callable = no_decay) -> None:
    """Bias-corrected Adam moments with decoupled weight decay, in place."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and tuple(g.shape) != tuple(p.shape):
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {name} {tuple(p.shape)}")
    opt.step += 1
    b1, b2 = betas
    c1 = 1.0 - b1 ** opt.step
    c2 = 1.0 - b2 ** opt.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = torch.zeros_like(p)
        m = opt.exp_avg.get(name)
        if m is None:
            m = opt.exp_avg[name] = torch.zeros_like(p)
            opt.exp_avg_sq[name] = torch.zeros_like(p)
        v = opt.exp_avg_sq[name]
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        if weight_decay and not decay_filter(name):
            p.mul_(1.0 - lr * weight_decay)
        p.sub_(lr * (m / c1) / ((v / c2).sqrt() + eps))


def cosine_lr(step: int, total_steps: int, base_lr: float, warmup_steps: int = 0) -> float:
    if warmup_steps > 0 and step < warmup_steps:
        return base_lr * step / warmup_steps
    span = max(total_steps - warmup_steps, 1)
    progress = min(max(step - warmup_steps, 0) / span, 1.0)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# ---------------------------------------------------------------------------
# gradient checking


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """max |a - n| scaled by the larger of the two gradients' max-magnitudes (floored)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def grad_check(loss_fn: Callable[[], torch.Tensor], params, n_probe: int = 200, step: float = 1e-5,
               seed: int = 0, analytic: dict | None = None, order: int = 2) -> dict:
    """Compare autograd against central finite differences.

    ``params`` is a model (its trainable tensors are probed) or a dict/list of
    leaf tensors.  Up to ``n_probe`` random coordinates per tensor are
    perturbed.  ``analytic`` overrides the autograd gradients (used to check
    that the harness notices a wrong gradient).  Returns per-tensor relative
    errors plus ``"max"``.

    ``loss_fn`` may also return a dict of scalar losses; every entry is then
    checked from the same perturbed evaluations and the result maps each loss
    name to its own error dict.  ``order=4`` uses the five-point stencil,
    which tolerates a larger ``step`` (less cancellation noise) at twice the cost.
    """
    if order not in (2, 4):
        raise ValueError("order must be 2 or 4")
    if isinstance(params, InstAPModel):
        named = dict(params.trainable_named_parameters())
    elif isinstance(params, dict):
        named = dict(params)
    else:
        named = {str(i): p for i, p in enumerate(params)}
    single = analytic is not None or not isinstance(loss_fn(), dict)
    fn = (lambda: {"loss": loss_fn()}) if single else loss_fn
    if analytic is not None:
        analytic = {"loss": analytic}
    else:
        for p in named.values():
            p.grad = None
        losses = fn()
        analytic = {}
        for key, loss in losses.items():
            grads = torch.autograd.grad(loss, list(named.values()), allow_unused=True, retain_graph=True)
            analytic[key] = {n: (g if g is not None else torch.zeros_like(p)).detach().clone()
                             for (n, p), g in zip(named.items(), grads)}
    rng = np.random.default_rng(seed)
    errors = {key: {} for key in analytic}
    with torch.no_grad():
        for name, p in named.items():
            flat = p.view(-1)
            idx = np.arange(flat.numel()) if flat.numel() <= n_probe else rng.choice(flat.numel(), n_probe, replace=False)
            num = {key: np.empty(len(idx)) for key in analytic}
            for j, i in enumerate(idx):
                orig = flat[i].item()
                f = {}
                for k in ((-2, -1, 1, 2) if order == 4 else (-1, 1)):
                    flat[i] = orig + k * step
                    f[k] = {key: float(v) for key, v in fn().items()}
                flat[i] = orig
                for key in analytic:
                    d1 = (f[1][key] - f[-1][key]) / (2 * step)
                    if order == 4:
                        d2 = (f[2][key] - f[-2][key]) / (4 * step)
                        d1 = (4 * d1 - d2) / 3
                    num[key][j] = d1
            for key in analytic:
                a = analytic[key][name].reshape(-1)[torch.as_tensor(idx)].double().numpy()
                errors[key][name] = relative_error(a, num[key])
    for e in errors.values():
        e["max"] = max(e.values(), default=0.0)
    return errors["loss"] if single else errors


# ---------------------------------------------------------------------------
# data preparation


class Prepared:
    """Per-sample tensors that do not change across epochs (patches, crops, teacher targets)."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self._video: dict[str, tuple] = {}
        self._crops: dict[str, list] = {}
        self._teacher: dict[str, tuple] = {}

    def video(self, smp: Sample):
        out = self._video.get(smp.sample_id)
        if out is None:
            frames = smp.frames01[: self.cfg.frames_per_clip]
            tok = patchify(frames, self.cfg.model.patch)
            out = (tok.data.astype(np.float32), tok.positions)
            self._video[smp.sample_id] = out
        return out

    def crops(self, smp: Sample):
        out = self._crops.get(smp.sample_id)
        if out is None:
            out = []
            for inst in smp.instances:
                tok = patchify(crop_instance(smp, inst, self.cfg.crop_hw), self.cfg.model.patch)
                out.append((tok.data.astype(np.float32), tok.positions))
            self._crops[smp.sample_id] = out
        return out

    def teacher(self, model: InstAPModel, smp: Sample):
        """Cached (teacher features, visible index) for the sample."""
        out = self._teacher.get(smp.sample_id)
        if out is None:
            x, pos = self.video(smp)
            hT, A = model.teacher_forward(torch.from_numpy(x)[None].to(_dtype(model)),
                                          torch.from_numpy(pos)[None])
            mask = build_mask(importance_scores(A[0].double().numpy()), self.cfg.mask_ratio)
            if mask.visible.size == 0:
                raise ValueError(f"masking ratio {self.cfg.mask_ratio} leaves no visible token in {smp.sample_id}")
            out = (hT[0], mask.visible)
            self._teacher[smp.sample_id] = out
        return out


def _dtype(model: InstAPModel):
    return next(model.parameters()).dtype


def pad_stack(items: Sequence[tuple[np.ndarray, np.ndarray]]):
    """Stack variable-length (data, positions) pairs into padded arrays + validity mask."""
    n = max(len(d) for d, _ in items)
    dim = items[0][0].shape[1]
    data = np.zeros((len(items), n, dim), dtype=np.float32)
    pos = np.zeros((len(items), n, 3), dtype=np.int64)
    valid = np.zeros((len(items), n), dtype=bool)
    for i, (d, p) in enumerate(items):
        data[i, : len(d)] = d
        pos[i, : len(d)] = p
        valid[i, : len(d)] = True
    return data, pos, valid


def caption_rng(seed_data: int, source_id: int, slot: int) -> np.random.Generator:
    return np.random.default_rng([int(seed_data), int(source_id) & (2**63 - 1), int(slot)])


def choose_sentence(caption: list[str], epoch: int, subsample: bool, rng) -> str:
    if subsample:
        return sample_caption_sentence(caption, epoch, rng, cycling=True)
    return " ".join(caption)


@dataclass
class AlignBatch:
    video: np.ndarray
    video_pos: np.ndarray
    video_valid: np.ndarray
    text_ids: np.ndarray
    mlm_ids: np.ndarray
    mlm_targets: np.ndarray
    crop: np.ndarray | None
    crop_pos: np.ndarray | None
    crop_valid: np.ndarray | None
    owner: np.ndarray
    inst_source: np.ndarray
    inst_ids: np.ndarray
    inst_mlm_ids: np.ndarray
    inst_mlm_targets: np.ndarray
    rec_hT: torch.Tensor | None = None
    rec_visible: list | None = None

    @property
    def num_instances(self) -> int:
        return int(len(self.owner))


def build_align_batch(samples: Sequence[Sample], prep: Prepared, vocab: Vocab, cfg: TrainConfig,
                      epoch: int, rng: np.random.Generator) -> AlignBatch:
    max_len = cfg.model.max_len
    video = pad_stack([prep.video(s) for s in samples])
    text, mlm, tgt = [], [], []
    for s in samples:
        sent = choose_sentence(s.global_caption, epoch, cfg.caption_subsampling,
                               caption_rng(cfg.seed_data, s.source_id, 0))
        ids = tokenize(sent, vocab, max_len)
        text.append(ids)
        corrupted, _, targets = L.mask_text_tokens(ids, cfg.mlm_ratio, rng, vocab)
        mlm.append(corrupted)
        tgt.append(targets)
    crops, owner, src, iids, imlm, itgt = [], [], [], [], [], []
    for b, s in enumerate(samples):
        for inst, crop in zip(s.instances, prep.crops(s)):
            crops.append(crop)
            owner.append(b)
            src.append(s.source_id)
            sent = choose_sentence(inst.caption, epoch, cfg.caption_subsampling,
                                   caption_rng(cfg.seed_data, s.source_id, inst.instance_id + 1))
            ids = tokenize(sent, vocab, max_len)
            iids.append(ids)
            corrupted, _, targets = L.mask_text_tokens(ids, cfg.mlm_ratio, rng, vocab)
            imlm.append(corrupted)
            itgt.append(targets)
    cp = pad_stack(crops) if crops else (None, None, None)
    shape0 = (0, max_len)
    return AlignBatch(
        *video, np.array(text), np.array(mlm), np.array(tgt), *cp,
        owner=np.array(owner, dtype=np.int64), inst_source=np.array(src, dtype=np.int64),
        inst_ids=np.array(iids, dtype=np.int64).reshape(-1, max_len) if iids else np.zeros(shape0, np.int64),
        inst_mlm_ids=np.array(imlm, dtype=np.int64).reshape(-1, max_len) if imlm else np.zeros(shape0, np.int64),
        inst_mlm_targets=np.array(itgt, dtype=np.int64).reshape(-1, max_len) if itgt else np.zeros(shape0, np.int64),
    )


# ---------------------------------------------------------------------------
# loss assembly


def _tensor(a, dtype):
    return torch.from_numpy(np.ascontiguousarray(a)).to(dtype)


def _long(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.int64))


def _bool(a):
    return torch.from_numpy(np.ascontiguousarray(a, dtype=bool))


def rec_from_visible(model: InstAPModel, video, pos, hT, visible_sets):
    """Batched reconstruction loss: per-sample mean over its visible set, averaged over samples."""
    dt = _dtype(model)
    items = [(video[b][vis], pos[b][vis]) for b, vis in enumerate(visible_sets)]
    x, p, valid = pad_stack(items)
    hS = model.video(_tensor(x, dt), _long(p), _bool(valid))
    n = hS.shape[1]
    tgt = torch.zeros(len(items), n, hT[0].shape[-1], dtype=dt)
    for b, vis in enumerate(visible_sets):
        tgt[b, : len(vis)] = hT[b][torch.as_tensor(vis)].to(dt)
    per = []
    for b, vis in enumerate(visible_sets):
        per.append(L.rec_loss(hS[b, : len(vis)], tgt[b, : len(vis)]))
    return torch.stack(per).mean()


@dataclass
class Negatives:
    text_for_video: np.ndarray
    video_for_text: np.ndarray
    inst_text_for_crop: np.ndarray | None = None
    inst_crop_for_text: np.ndarray | None = None


def instance_branch_active(cfg: TrainConfig) -> bool:
    w = cfg.weights
    return (w.vtc_inst + w.vtm_inst + w.mlm_inst) > 0


def align_losses(model: InstAPModel, batch: AlignBatch, cfg: TrainConfig, rng: np.random.Generator,
                 negatives: Negatives | None = None):
    """All stage-2 components as tensors, plus the hard negatives that were used."""
    dt = _dtype(model)
    x, pos, valid = _tensor(batch.video, dt), _long(batch.video_pos), _bool(batch.video_valid)
    V, v = model.encode_video(x, pos, valid)
    T, t, tvalid = model.encode_text(_long(batch.text_ids))
    vp, tp = model.project(v, "visual"), model.project(t, "text")
    comps = {"vtc": L.vtc_loss(vp, tp, model.tau)}

    B = len(batch.text_ids)
    if negatives is None:
        with torch.no_grad():
            nt, nv = L.mine_hard_negatives(vp @ tp.T, float(model.tau), rng)
        negatives = Negatives(nt, nv)
    ar = np.arange(B)
    vi = np.concatenate([ar, ar, negatives.video_for_text])
    ti = np.concatenate([ar, negatives.text_for_video, ar])
    labels = torch.cat([torch.ones(B, dtype=dt), torch.zeros(2 * B, dtype=dt)])
    fused = model.fuse_hidden(T[ti], tvalid[ti], V[vi], valid[vi])
    comps["vtm"] = L.vtm_loss(L.vtm_probs(model.matching_logits(fused)), labels)

    Tm, _, mvalid = model.encode_text(_long(batch.mlm_ids))
    fused = model.fuse_hidden(Tm, mvalid, V, valid)
    comps["mlm"] = L.mlm_loss(model.mlm_logits(fused), _long(batch.mlm_targets))

    if cfg.keep_rec_in_align and batch.rec_hT is not None:
        comps["rec"] = rec_from_visible(model, batch.video, batch.video_pos, batch.rec_hT, batch.rec_visible)

    N = batch.num_instances
    if N > 0 and instance_branch_active(cfg):
        cx = _tensor(batch.crop, dt)
        cpos, cvalid = _long(batch.crop_pos), _bool(batch.crop_valid)
        C = model.video(cx, cpos, cvalid)
        c = (C * cvalid[..., None].to(dt)).sum(1) / cvalid.sum(1, keepdim=True).to(dt)
        owner = torch.as_tensor(batch.owner)
        Z, z = model.pool(C, V[owner], cvalid, valid[owner])
        zp = model.project(z, "visual")
        S, s, svalid = model.encode_text(_long(batch.inst_ids))
        sp = model.project(s, "text")
        tau_i = model.tau_inst if cfg.independent_inst_temperature else model.tau
        comps["vtc_inst"] = L.instance_vtc_loss(zp, sp, batch.inst_source, tau_i)

        if N >= 2:
            if negatives.inst_text_for_crop is None:
                allowed = batch.inst_source[:, None] != batch.inst_source[None, :]
                with torch.no_grad():
                    a, b = L.mine_hard_negatives(zp @ sp.T, float(tau_i), rng, allowed=allowed)
                negatives.inst_text_for_crop, negatives.inst_crop_for_text = a, b
            a, b = negatives.inst_text_for_crop, negatives.inst_crop_for_text
            ar = np.arange(N)
            ok_a, ok_b = a >= 0, b >= 0
            ci = np.concatenate([ar, ar[ok_a], b[ok_b]])
            si = np.concatenate([ar, a[ok_a], ar[ok_b]])
            labels = torch.cat([torch.ones(N, dtype=dt), torch.zeros(len(ci) - N, dtype=dt)])
            fused = model.fuse_hidden(S[si], svalid[si], c[ci][:, None, :], None)
            comps["vtm_inst"] = L.vtm_loss(L.vtm_probs(model.matching_logits(fused)), labels)
        else:
            comps["vtm_inst"] = torch.zeros((), dtype=dt)

        Sm, _, smvalid = model.encode_text(_long(batch.inst_mlm_ids))
        fused = model.fuse_hidden(Sm, smvalid, Z, cvalid)
        comps["mlm_inst"] = L.mlm_loss(model.mlm_logits(fused), _long(batch.inst_mlm_targets))
    return comps, negatives


def pretrain_losses(model: InstAPModel, samples: Sequence[Sample], prep: Prepared):
    items = [prep.video(s) for s in samples]
    targets = [prep.teacher(model, s) for s in samples]
    return {"rec": rec_from_visible(model, [d for d, _ in items], [p for _, p in items],
                                    [h for h, _ in targets], [vis for _, vis in targets])}


# ---------------------------------------------------------------------------
# steps


def _apply(model: InstAPModel, opt: OptState, total: torch.Tensor, lr: float, cfg: TrainConfig) -> None:
    params = dict(model.trainable_named_parameters())
    for p in params.values():
        p.grad = None
    total.backward()
    grads = {n: p.grad for n, p in params.items() if p.grad is not None}
    adamw_update(params, grads, opt, lr, cfg.betas, cfg.eps, cfg.weight_decay)
    with torch.no_grad():
        model.log_tau.clamp_(*LOG_TAU_BOUNDS)
        model.log_tau_inst.clamp_(*LOG_TAU_BOUNDS)
    for p in params.values():
        p.grad = None


def pretrain_step(model: InstAPModel, samples: Sequence[Sample], cfg: TrainConfig, opt: OptState,
                  prep: Prepared, lr: float | None = None) -> L.LossReport:
    if cfg.stage != "pretrain":
        raise ValueError("pretrain_step requires stage='pretrain'")
    comps = pretrain_losses(model, samples, prep)
    report = L.total_loss(comps, cfg.weights)
    _apply(model, opt, comps["rec"], cfg.lr if lr is None else lr, cfg)
    return report


def align_step(model: InstAPModel, samples: Sequence[Sample], cfg: TrainConfig, opt: OptState,
               prep: Prepared, vocab: Vocab, rng: np.random.Generator, epoch: int = 0,
               lr: float | None = None) -> L.LossReport:
    if cfg.stage != "align":
        raise ValueError("align_step requires stage='align'")
    if len(samples) < 2:
        raise ValueError("align_step needs at least two samples")
    batch = build_align_batch(samples, prep, vocab, cfg, epoch, rng)
    if cfg.keep_rec_in_align:
        tgt = [prep.teacher(model, s) for s in samples]
        batch.rec_hT = [h for h, _ in tgt]
        batch.rec_visible = [vis for _, vis in tgt]
    comps, _ = align_losses(model, batch, cfg, rng)
    _, _, total = L.combine(comps, cfg.weights)
    report = L.total_loss(comps, cfg.weights)
    _apply(model, opt, total, cfg.lr if lr is None else lr, cfg)
    return report


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: InstAPModel, opt: OptState | None, path, meta: dict | None = None) -> None:
    tensors = {n: t for n, t in model.state_dict().items()}
    if opt is not None:
        for n, t in opt.exp_avg.items():
            tensors[f"optim.exp_avg.{n}"] = t
        for n, t in opt.exp_avg_sq.items():
            tensors[f"optim.exp_avg_sq.{n}"] = t
    meta = dict(meta or {})
    meta["model_config"] = model.cfg.to_dict()
    meta["optim_step"] = opt.step if opt is not None else 0
    write_checkpoint(path, tensors, meta)


def load_checkpoint(path) -> tuple[InstAPModel, OptState, dict]:
    """Rebuild the model and optimizer state from a checkpoint file."""
    tensors, meta = read_checkpoint(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = InstAPModel(cfg)
    model_names = list(model.state_dict())
    if tensors.get("log_tau") is not None and tensors["log_tau"].dtype == np.float64:
        model.double()
    load_model_tensors(model, tensors, model_names)
    opt = OptState(step=int(meta.get("optim_step", 0)))
    for n, t in tensors.items():
        if n.startswith("optim.exp_avg."):
            opt.exp_avg[n[len("optim.exp_avg."):]] = torch.from_numpy(t)
        elif n.startswith("optim.exp_avg_sq."):
            opt.exp_avg_sq[n[len("optim.exp_avg_sq."):]] = torch.from_numpy(t)
    return model, opt, meta


def handoff_from_stage1(path, cfg: ModelConfig, seed_init: int) -> InstAPModel:
    """Fresh stage-2 model whose video-encoder tensors come from a stage-1 checkpoint."""
    if not Path(path).is_file():
        raise FileNotFoundError(f"stage-1 checkpoint not found: {path}")
    tensors, _ = read_checkpoint(path)
    model = InstAPModel(cfg, seed=seed_init)
    names = [n for n in model.state_dict() if n.startswith(VIDEO_PREFIX)]
    load_model_tensors(model, tensors, names)
    return model


# ---------------------------------------------------------------------------
# drivers


def epoch_order(n: int, seed_data: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([int(seed_data), 7, int(epoch)]).permutation(n)


def iter_batches(n: int, cfg: TrainConfig, min_batch: int):
    """Yield (epoch, step, indices) following the data-seeded shuffle."""
    per_epoch = [b for b in range(0, n, cfg.batch_size)]
    step = 0
    total = total_steps(n, cfg, min_batch)
    epoch = 0
    while step < total:
        order = epoch_order(n, cfg.seed_data, epoch)
        for start in per_epoch:
            idx = order[start:start + cfg.batch_size]
            if len(idx) < min_batch:
                continue
            yield epoch, step, idx
            step += 1
            if step >= total:
                return
        epoch += 1


def total_steps(n: int, cfg: TrainConfig, min_batch: int) -> int:
    full, rem = divmod(n, cfg.batch_size)
    per_epoch = full + (1 if rem >= min_batch else 0)
    if per_epoch == 0:
        raise ValueError(f"dataset of {n} samples is too small for batches of >= {min_batch}")
    return cfg.max_steps if cfg.max_steps > 0 else per_epoch * cfg.epochs


@dataclass
class RunResult:
    model: InstAPModel
    opt: OptState
    history: list
    best_path: Path | None = None


def train(cfg: TrainConfig, samples: Sequence[Sample], model: InstAPModel | None = None,
          vocab: Vocab | None = None, out_dir=None, step_log=None) -> RunResult:
    """Run one stage end to end; writes checkpoints and a JSON-lines step log when paths are given."""
    torch.manual_seed(cfg.seed_dropout)
    vocab = vocab or default_vocab()
    if model is None:
        if cfg.stage == "align" and cfg.init_from:
            model = handoff_from_stage1(cfg.init_from, cfg.model, cfg.seed_init)
        else:
            model = InstAPModel(cfg.model, seed=cfg.seed_init)
    if cfg.model.vocab_size != len(vocab):
        raise ValueError(f"model vocab_size {cfg.model.vocab_size} != vocab size {len(vocab)}")
    samples = sorted(samples, key=lambda s: s.sample_id)
    prep = Prepared(cfg)
    opt = OptState()
    min_batch = 2 if cfg.stage == "align" else 1
    total = total_steps(len(samples), cfg, min_batch)
    warmup = int(cfg.warmup_frac * total)
    rng = np.random.default_rng([int(cfg.seed_dropout), 11])
    out_dir = Path(out_dir) if out_dir else None
    history, best, best_path, window = [], math.inf, None, []
    for epoch, step, idx in iter_batches(len(samples), cfg, min_batch):
        batch = [samples[i] for i in idx]
        lr = cosine_lr(step, total, cfg.lr, warmup)
        if cfg.stage == "pretrain":
            rep = pretrain_step(model, batch, cfg, opt, prep, lr)
        else:
            rep = align_step(model, batch, cfg, opt, prep, vocab, rng, epoch, lr)
        history.append(rep)
        window.append(rep.total)
        if step_log:
            L.append_step_log(step_log, rep, step=step, epoch=epoch, lr=lr)
        if out_dir and cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
            score = float(np.mean(window))
            window = []
            if score < best:
                best = score
                best_path = out_dir / "best.iapt"
                save_checkpoint(model, opt, best_path, {"step": step + 1, "score": score, "stage": cfg.stage,
                                                        "train_config": cfg.to_dict()})
        if step % 50 == 0:
            log.info("%s step %d/%d loss %.4f", cfg.stage, step, total, rep.total)
    if out_dir:
        save_checkpoint(model, opt, out_dir / "last.iapt",
                        {"step": total, "stage": cfg.stage, "train_config": cfg.to_dict()})
        if best_path is None:
            best_path = out_dir / "last.iapt"
    return RunResult(model, opt, history, best_path)
