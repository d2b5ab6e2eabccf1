"""Retrieval (global and instance splits) and grounding evaluation."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import kernels
from .encoders import InstAPModel, box_to_unit, crop_instance, masked_mean
from .schema import Box, Sample, Vocab, default_vocab, tokenize
from .tokens import patchify
from .training import pad_stack

KS = (1, 5, 10)


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalResult:
    split: str
    sim: np.ndarray  # queries (texts) x candidates (visual)
    t2v: dict
    v2t: dict
    flags: list = field(default_factory=list)

    @property
    def mean_recall(self) -> float:
        vals = [self.t2v[k] for k in KS] + [self.v2t[k] for k in KS]
        return float(sum(vals) / len(vals))

    def metrics(self, percent: bool = True) -> dict:
        s = 100.0 if percent else 1.0
        out = {f"t2v_r{k}": self.t2v[k] * s for k in KS}
        out.update({f"v2t_r{k}": self.v2t[k] * s for k in KS})
        out["mean_recall"] = self.mean_recall * s
        return out


def recall_from_ranks(ranks: np.ndarray, ks=KS) -> dict:
    return {k: float(np.mean(ranks < k)) for k in ks}


def retrieval_metrics(sim, gt=None, split: str = "global", ks=KS) -> RetrievalResult:
    """R@K in both directions.

    ``sim[q, c]`` scores text query q against visual candidate c and
    ``gt[q]`` is q's matching candidate (identity by default).  Candidates are
    ranked by descending similarity with ties going to the lower index.  The
    reverse direction treats candidates as queries; when several texts share
    a candidate, the best-ranked one counts.
    """
    sim = np.asarray(sim, dtype=np.float64)
    Q, C = sim.shape
    gt = np.arange(Q) if gt is None else np.asarray(gt, dtype=np.int64)
    if gt.shape != (Q,) or gt.min(initial=0) < 0 or gt.max(initial=0) >= C:
        raise ValueError("gt must give one candidate index per query")
    flags = [f"K={k} exceeds pool of {C}; R@{k} is 1 by convention" for k in ks if k > C]
    t2v = recall_from_ranks(kernels.gt_ranks(sim, gt), ks)

    owners = [np.flatnonzero(gt == c) for c in range(C)]
    cand = np.array([c for c in range(C) if owners[c].size], dtype=np.int64)
    simT = np.ascontiguousarray(sim.T[cand])
    best = np.full(len(cand), np.iinfo(np.int64).max)
    for j in range(max(o.size for o in owners)):
        has = np.array([owners[c].size > j for c in cand])
        g = np.array([owners[c][j] if owners[c].size > j else 0 for c in cand], dtype=np.int64)
        r = kernels.gt_ranks(simT, g)
        best = np.where(has, np.minimum(best, r), best)
    v2t = recall_from_ranks(best, ks)
    return RetrievalResult(split, sim, t2v, v2t, flags)


def full_sort_recall(sim, gt, ks=KS) -> dict:
    """Reference implementation: stable full sort of every row."""
    sim = np.asarray(sim, dtype=np.float64)
    hits = {k: 0 for k in ks}
    for q in range(sim.shape[0]):
        order = sorted(range(sim.shape[1]), key=lambda c: (-sim[q, c], c))
        rank = order.index(int(gt[q]))
        for k in ks:
            hits[k] += rank < k
    return {k: hits[k] / sim.shape[0] for k in ks}


# ---------------------------------------------------------------------------
# embedding extraction


@dataclass(frozen=True)
class EvalConfig:
    frames_per_clip: int = 4
    crop_hw: tuple[int, int] = (32, 32)
    batch_size: int = 32
    sentence_index: int = 0
    pool_size: int = 0  # 0 -> whole split
    rerank_vtm: int = 0  # >0: re-score this many top candidates per query with the matching head


def _video_tokens(smp: Sample, cfg: EvalConfig, patch: int):
    tok = patchify(smp.frames01[: cfg.frames_per_clip], patch)
    return tok.data.astype(np.float32), tok.positions


def _model_dtype(model):
    return next(model.parameters()).dtype


def _chunks(n: int, size: int):
    for i in range(0, n, size):
        yield slice(i, min(i + size, n))


@torch.no_grad()
def video_embeddings(model: InstAPModel, samples: Sequence[Sample], cfg: EvalConfig):
    """(V list, valid list, pooled v, projected v) for each sample."""
    dt = _model_dtype(model)
    Vs, valids, raw = [], [], []
    for sl in _chunks(len(samples), cfg.batch_size):
        x, p, valid = pad_stack([_video_tokens(s, cfg, model.cfg.patch) for s in samples[sl]])
        V, v = model.encode_video(torch.from_numpy(x).to(dt), torch.from_numpy(p), torch.from_numpy(valid))
        for b in range(V.shape[0]):
            Vs.append(V[b])
            valids.append(torch.from_numpy(valid[b]))
        raw.append(v)
    v = torch.cat(raw)
    return Vs, valids, v, model.project(v, "visual")


@torch.no_grad()
def text_embeddings(model: InstAPModel, sentences: Sequence[str], vocab: Vocab, batch_size: int = 64):
    ids = np.array([tokenize(s, vocab, model.cfg.max_len) for s in sentences], dtype=np.int64)
    out = []
    for sl in _chunks(len(ids), batch_size):
        _, t, _ = model.encode_text(torch.from_numpy(ids[sl]))
        out.append(t)
    t = torch.cat(out)
    return ids, model.project(t, "text")


def _pick(caption: Sequence[str], index: int) -> str:
    return caption[min(index, len(caption) - 1)]


@torch.no_grad()
def _rerank(model, sim, text_ids, visual, visual_valid, k):
    """Replace the top-k similarities of each query with matching-head probabilities (+1 offset)."""
    out = sim.copy()
    for q in range(sim.shape[0]):
        top = _topk(sim[q], k)
        ids = torch.from_numpy(np.repeat(text_ids[q:q + 1], len(top), axis=0))
        T, _, tvalid = model.encode_text(ids)
        vis = torch.stack([visual[c] for c in top])
        vv = torch.stack([visual_valid[c] for c in top]) if visual_valid is not None else None
        p = model.matching_logits(model.fuse_hidden(T, tvalid, vis, vv)).softmax(-1)[:, 1]
        out[q, top] = 1.0 + p.double().numpy()
    return out


def _topk(row: np.ndarray, k: int) -> np.ndarray:
    order = np.lexsort((np.arange(len(row)), -row))
    return order[:k]


def eval_global_retrieval(model: InstAPModel, samples: Sequence[Sample], vocab: Vocab | None = None,
                          cfg: EvalConfig = EvalConfig()) -> RetrievalResult:
    if not samples:
        raise ValueError("empty dataset")
    vocab = vocab or default_vocab()
    samples = list(samples)[: cfg.pool_size or None]
    model.eval()
    Vs, valids, _, vp = video_embeddings(model, samples, cfg)
    ids, tp = text_embeddings(model, [_pick(s.global_caption, cfg.sentence_index) for s in samples], vocab)
    sim = (tp @ vp.T).double().numpy()
    if cfg.rerank_vtm:
        sim = _rerank(model, sim, ids, Vs, valids, cfg.rerank_vtm)
    return retrieval_metrics(sim, split="global")


@torch.no_grad()
def crop_embeddings(model: InstAPModel, samples: Sequence[Sample], cfg: EvalConfig, pairs):
    """Projected cross-attended crop embeddings and raw pooled crop embeddings for (sample, instance) pairs."""
    dt = _model_dtype(model)
    index = {s.sample_id: i for i, s in enumerate(samples)}
    Vs, valids, _, _ = video_embeddings(model, samples, cfg)
    zs, cs = [], []
    for sl in _chunks(len(pairs), cfg.batch_size):
        items = []
        for smp, inst in pairs[sl]:
            tok = patchify(crop_instance(smp, inst, cfg.crop_hw), model.cfg.patch)
            items.append((tok.data.astype(np.float32), tok.positions))
        x, p, valid = pad_stack(items)
        cvalid = torch.from_numpy(valid)
        C = model.video(torch.from_numpy(x).to(dt), torch.from_numpy(p), cvalid)
        owners = [index[smp.sample_id] for smp, _ in pairs[sl]]
        Lv = max(Vs[o].shape[0] for o in owners)
        V = torch.zeros(len(owners), Lv, C.shape[-1], dtype=dt)
        Vv = torch.zeros(len(owners), Lv, dtype=torch.bool)
        for j, o in enumerate(owners):
            V[j, : Vs[o].shape[0]] = Vs[o]
            Vv[j, : Vs[o].shape[0]] = valids[o]
        _, z = model.pool(C, V, cvalid, Vv)
        zs.append(z)
        cs.append(masked_mean(C, cvalid))
    z = torch.cat(zs)
    return model.project(z, "visual"), torch.cat(cs)


def eval_instance_retrieval(model: InstAPModel, samples: Sequence[Sample], vocab: Vocab | None = None,
                            cfg: EvalConfig = EvalConfig()) -> RetrievalResult:
    """Instance captions vs cross-attended crop embeddings, candidates pooled across sources."""
    vocab = vocab or default_vocab()
    pairs = [(s, inst) for s in samples for inst in s.instances]
    if cfg.pool_size:
        pairs = pairs[: cfg.pool_size]
    if not pairs:
        raise ValueError("dataset has no instances")
    if len(pairs) == 1:
        return retrieval_metrics(np.ones((1, 1)), split="instance")
    if len({s.source_id for s, _ in pairs}) < 2:
        raise ValueError("instance retrieval needs instances from at least two sources")
    model.eval()
    used = list({s.sample_id: s for s, _ in pairs}.values())
    zp, c = crop_embeddings(model, used, cfg, pairs)
    ids, sp = text_embeddings(model, [_pick(inst.caption, cfg.sentence_index) for _, inst in pairs], vocab)
    sim = (sp @ zp.T).double().numpy()
    if cfg.rerank_vtm:
        sim = _rerank(model, sim, ids, [ci[None] for ci in c], None, cfg.rerank_vtm)
    return retrieval_metrics(sim, split="instance")


# ---------------------------------------------------------------------------
# box geometry


def _xywh(b) -> tuple[float, float, float, float]:
    if isinstance(b, Box):
        return float(b.x), float(b.y), float(b.w), float(b.h)
    x, y, w, h = (float(v) for v in b)
    return x, y, w, h


def _areas(a, b):
    ax, ay, aw, ah = _xywh(a)
    bx, by, bw, bh = _xywh(b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive area")
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    # rounding in the corner arithmetic can push inter past the smaller area
    inter = min(iw * ih, aw * ah, bw * bh)
    union = aw * ah + bw * bh - inter
    enc = (max(ax + aw, bx + bw) - min(ax, bx)) * (max(ay + ah, by + bh) - min(ay, by))
    return inter, union, max(enc, union)


def iou(a, b) -> float:
    """IoU of two (x, y, w, h) boxes or :class:`Box` objects."""
    inter, union, _ = _areas(a, b)
    return inter / union


def giou(a, b) -> float:
    inter, union, enc = _areas(a, b)
    return inter / union - (enc - union) / enc


def cxcywh_to_xyxy(b):
    return torch.stack([b[..., 0] - b[..., 2] / 2, b[..., 1] - b[..., 3] / 2,
                        b[..., 0] + b[..., 2] / 2, b[..., 1] + b[..., 3] / 2], dim=-1)


def giou_torch(pred, target):
    """Differentiable IoU and GIoU for (..., 4) boxes in (cx, cy, w, h)."""
    p, t = cxcywh_to_xyxy(pred), cxcywh_to_xyxy(target)
    iw = (torch.minimum(p[..., 2], t[..., 2]) - torch.maximum(p[..., 0], t[..., 0])).clamp_min(0)
    ih = (torch.minimum(p[..., 3], t[..., 3]) - torch.maximum(p[..., 1], t[..., 1])).clamp_min(0)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + target[..., 2] * target[..., 3] - inter
    enc = ((torch.maximum(p[..., 2], t[..., 2]) - torch.minimum(p[..., 0], t[..., 0]))
           * (torch.maximum(p[..., 3], t[..., 3]) - torch.minimum(p[..., 1], t[..., 1])))
    i = inter / union
    return i, i - (enc - union) / enc


def grounding_loss(pred, target, frame_counts=None):
    """Per frame: mean |pred - target| over (cx, cy, w, h) plus (1 - GIoU).

    Frame losses are summed within an instance (``frame_counts`` gives the
    number of consecutive frames per instance) and averaged over instances.
    """
    _, g = giou_torch(pred, target)
    per_frame = (pred - target).abs().mean(dim=-1) + (1.0 - g)
    if frame_counts is None:
        return per_frame.sum()
    per_inst = torch.stack([chunk.sum() for chunk in torch.split(per_frame, list(frame_counts))])
    return per_inst.mean()


# ---------------------------------------------------------------------------
# grounding


@dataclass(frozen=True)
class GroundingConfig:
    steps: int = 500
    lr: float = 1e-3
    batch_size: int = 32
    freeze_backbone: bool = True
    seed: int = 0
    frames_per_clip: int = 4
    sentence_index: int = 0


@dataclass
class GroundingPrediction:
    sample_id: str
    instance_id: int
    pred: np.ndarray  # (frames, 4) normalised cx, cy, w, h
    target: np.ndarray
    ious: np.ndarray

    @property
    def score(self) -> float:
        return float(self.ious.mean())


def _grounding_items(samples: Sequence[Sample]):
    items = [(s, inst) for s in samples for inst in s.instances]
    if not items:
        raise ValueError("grounding needs a dataset with instances")
    return items


def fused_frame_features(model: InstAPModel, samples: Sequence[Sample], vocab: Vocab, cfg: GroundingConfig,
                         items=None):
    """Fused [CLS] for every (annotated frame's visual tokens, instance caption) pair.

    Returns (features (F, d), targets (F, 4), frame counts per instance).
    """
    dt = _model_dtype(model)
    items = items or _grounding_items(samples)
    feats, targets, counts = [], [], []
    cache = {}
    for smp, inst in items:
        if smp.sample_id not in cache:
            tok = patchify(smp.frames01[: cfg.frames_per_clip], model.cfg.patch)
            V, _ = model.encode_video(torch.from_numpy(tok.data.astype(np.float32))[None].to(dt),
                                      torch.from_numpy(tok.positions)[None])
            cache[smp.sample_id] = (V[0], tok.positions[:, 0])
        V, frame_of = cache[smp.sample_id]
        ids = torch.tensor([tokenize(_pick(inst.caption, cfg.sentence_index), vocab, model.cfg.max_len)])
        T, _, tvalid = model.encode_text(ids)
        boxes = [b for b in inst.trajectory if b.t < V.shape[0] and b.t < cfg.frames_per_clip]
        vis = torch.stack([V[torch.from_numpy(np.flatnonzero(frame_of == b.t))] for b in boxes])
        fused = model.fuse_hidden(T.expand(len(boxes), -1, -1), tvalid.expand(len(boxes), -1), vis)
        feats.append(fused[:, 0])
        H, W = smp.frames.shape[1:3]
        targets.append(torch.tensor(np.stack([box_to_unit(b, H, W) for b in boxes]), dtype=dt))
        counts.append(len(boxes))
    return torch.cat(feats), torch.cat(targets), counts


def grounding_finetune(model: InstAPModel, samples: Sequence[Sample], vocab: Vocab | None = None,
                       cfg: GroundingConfig = GroundingConfig()) -> list[float]:
    """Fit the box head on the fused features; returns the loss history."""
    from .training import OptState, adamw_update

    vocab = vocab or default_vocab()
    items = _grounding_items(samples)
    rng = np.random.default_rng([cfg.seed, 3])
    head = dict(("grounding." + n, p) for n, p in model.grounding.named_parameters())
    if cfg.freeze_backbone:
        with torch.no_grad():
            feats, targets, counts = fused_frame_features(model, samples, vocab, cfg, items)
        offsets = np.concatenate([[0], np.cumsum(counts)])
        params = head
    else:
        params = dict(model.trainable_named_parameters())
    opt = OptState()
    history = []
    for step in range(cfg.steps):
        pick = rng.choice(len(items), size=min(cfg.batch_size, len(items)), replace=False)
        pick.sort()
        if cfg.freeze_backbone:
            rows = np.concatenate([np.arange(offsets[i], offsets[i + 1]) for i in pick])
            f, tgt, cnt = feats[rows], targets[rows], [counts[i] for i in pick]
        else:
            f, tgt, cnt = fused_frame_features(model, samples, vocab, cfg, [items[i] for i in pick])
        loss = grounding_loss(model.grounding(f), tgt, cnt)
        grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
        adamw_update(params, {n: g for n, g in zip(params, grads) if g is not None}, opt, cfg.lr,
                     weight_decay=0.0)
        history.append(float(loss.detach()))
    return history


@torch.no_grad()
def grounding_predict(model: InstAPModel, samples: Sequence[Sample], vocab: Vocab | None = None,
                      cfg: GroundingConfig = GroundingConfig()) -> list[GroundingPrediction]:
    vocab = vocab or default_vocab()
    items = _grounding_items(samples)
    feats, targets, counts = fused_frame_features(model, samples, vocab, cfg, items)
    pred = model.grounding(feats)
    ious, _ = giou_torch(pred, targets)
    out, off = [], 0
    for (smp, inst), n in zip(items, counts):
        out.append(GroundingPrediction(smp.sample_id, inst.instance_id, pred[off:off + n].double().numpy(),
                                       targets[off:off + n].double().numpy(), ious[off:off + n].double().numpy()))
        off += n
    return out


def grounding_metrics(preds, thresholds=(0.5, 0.7, 0.9)) -> dict:
    """IoU@t: fraction of instances whose mean per-frame IoU is >= t.

    ``preds`` is a list of :class:`GroundingPrediction` or of per-instance scores.
    """
    scores = [p.score if isinstance(p, GroundingPrediction) else float(np.mean(p)) for p in preds]
    if not scores:
        raise ValueError("empty prediction set")
    s = np.asarray(scores)
    return {t: float(np.mean(s >= t - 1e-12)) for t in thresholds}


# ---------------------------------------------------------------------------
# reporting


CSV_COLUMNS = ["run", "split", "pool_size", "T2V R@1", "T2V R@5", "T2V R@10",
               "V2T R@1", "V2T R@5", "V2T R@10", "mean recall"]


def result_document(result: RetrievalResult, seed: int, checkpoint: str | None) -> dict:
    return {
        "split": result.split,
        "pool_size": int(result.sim.shape[1]),
        "metrics": result.metrics(percent=True),
        "seed": seed,
        "checkpoint": checkpoint,
        "flags": result.flags,
    }


def write_json(path, doc) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def report_rows(docs: Sequence[dict], run_names: Sequence[str] | None = None) -> list[list]:
    rows = []
    for i, doc in enumerate(docs):
        for d in doc.get("results", [doc]):
            if "metrics" not in d or "t2v_r1" not in d["metrics"]:
                continue
            m = d["metrics"]
            six = [m["t2v_r1"], m["t2v_r5"], m["t2v_r10"], m["v2t_r1"], m["v2t_r5"], m["v2t_r10"]]
            name = run_names[i] if run_names else (d.get("checkpoint") or f"run{i}")
            rows.append([name, d["split"], d.get("pool_size", "")] + [repr(float(v)) for v in six]
                        + [repr(sum(six) / 6)])
    return rows


def report_csv(docs: Sequence[dict], run_names=None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(report_rows(docs, run_names))
    return buf.getvalue()

