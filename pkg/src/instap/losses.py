"""Training objectives: feature regression, global and instance VTC/VTM/MLM, and their weighting.

All loss functions take torch tensors (numpy input is converted) and return a
0-d tensor, so they can be differentiated.  The two contrastive losses sum the
video->text and text->video directional means rather than averaging them.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch

PROB_CLAMP = 1e-7


def _t(x, dtype=None):
    if torch.is_tensor(x):
        return x if dtype is None else x.to(dtype)
    return torch.as_tensor(np.asarray(x), dtype=dtype or torch.float64)


def _check_tau(tau):
    v = float(tau.detach()) if torch.is_tensor(tau) else float(tau)
    if v <= 0:
        raise ValueError(f"temperature must be positive, got {v}")


# ---------------------------------------------------------------------------
# reconstruction


def rec_loss(hS, hT, omega=None):
    """Mean squared distance between L2-normalised student and teacher features.

    ``hS`` holds one row per visible token (in ``omega`` order); ``hT`` holds
    all L teacher rows and is indexed by ``omega``.  Batched inputs
    (B, |omega|, d) / (B, |omega|, d) with ``omega=None`` are also accepted.
    """
    hS, hT = _t(hS), _t(hT, None)
    if omega is not None:
        hT = hT[torch.as_tensor(np.asarray(omega), dtype=torch.long)]
    hT = hT.to(hS.dtype)
    if hS.shape[-2] == 0:
        raise ValueError("empty visible set")
    nS, nT = hS.norm(dim=-1, keepdim=True), hT.norm(dim=-1, keepdim=True)
    if bool((nS == 0).any()) or bool((nT == 0).any()):
        raise ValueError("zero-norm feature vector in reconstruction loss")
    diff = hS / nS - hT / nT
    return (diff * diff).sum(dim=-1).mean()


# ---------------------------------------------------------------------------
# contrastive


def _bidirectional_infonce(a, b, tau, allowed=None):
    logits = a @ b.T / tau
    if allowed is not None:
        logits = logits.masked_fill(~allowed, float("-inf"))
    idx = torch.arange(a.shape[0])
    a2b = -(logits.log_softmax(dim=1)[idx, idx]).mean()
    logits_t = b @ a.T / tau
    if allowed is not None:
        logits_t = logits_t.masked_fill(~allowed, float("-inf"))
    b2a = -(logits_t.log_softmax(dim=1)[idx, idx]).mean()
    return a2b + b2a


def vtc_loss(v_proj, t_proj, tau):
    """Bidirectional in-batch InfoNCE over index-aligned (video, text) pairs."""
    _check_tau(tau)
    v, t = _t(v_proj), _t(t_proj)
    return _bidirectional_infonce(v, t.to(v.dtype), _t(tau, v.dtype) if torch.is_tensor(tau) else tau)


def alpha_mask(source_ids) -> torch.Tensor:
    """``alpha[n, m]`` is True when caption m may appear in n's denominator."""
    src = torch.as_tensor(np.asarray(source_ids, dtype=np.int64))
    same = src[:, None] == src[None, :]
    return ~same | torch.eye(len(src), dtype=torch.bool)


def instance_vtc_loss(z_proj, s_proj, source_ids, tau_inst):
    """Instance InfoNCE with same-source negatives removed from both denominators."""
    _check_tau(tau_inst)
    z, s = _t(z_proj), _t(s_proj)
    tau = _t(tau_inst, z.dtype) if torch.is_tensor(tau_inst) else tau_inst
    return _bidirectional_infonce(z, s.to(z.dtype), tau, alpha_mask(source_ids))


def mine_hard_negatives(sim, tau, rng, allowed=None):
    """Sample one negative per row and per column with probability ∝ exp(sim / tau).

    Returns ``(neg_text_for_video, neg_video_for_text)``.  ``allowed`` optionally
    restricts candidates (used for the instance α rule); a row with no
    candidate gets -1.
    """
    sim = np.asarray(sim.detach().cpu() if torch.is_tensor(sim) else sim, dtype=np.float64)
    B = sim.shape[0]
    if B < 2:
        raise ValueError("hard-negative mining needs at least two pairs")
    ok = ~np.eye(B, dtype=bool)
    if allowed is not None:
        ok &= np.asarray(allowed, dtype=bool)
    tau = float(tau)

    def draw(mat, okm):
        out = np.full(B, -1, dtype=np.int64)
        for i in range(B):
            cand = np.flatnonzero(okm[i])
            if cand.size == 0:
                continue
            logits = mat[i, cand] / tau
            w = np.exp(logits - logits.max())
            out[i] = cand[rng.choice(cand.size, p=w / w.sum())]
        return out

    return draw(sim, ok), draw(sim.T, ok.T)


# ---------------------------------------------------------------------------
# matching / masked language modelling


def vtm_loss(probs, labels):
    """Mean binary cross-entropy on positive-class probabilities (clamped at 1e-7)."""
    p = _t(probs).clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = _t(labels, p.dtype)
    return -(y * p.log() + (1 - y) * (1 - p).log()).mean()


def vtm_probs(logits):
    """p = softmax(logits)[:, 1]."""
    return logits.softmax(dim=-1)[:, 1]


def mask_text_tokens(token_ids, ratio, rng, vocab):
    """BERT-style masking with pure [MASK] replacement.

    Each non-special position is masked independently with probability
    ``ratio``; if none is picked one is forced.  Returns ``(corrupted ids,
    masked positions, targets)`` where targets holds the original ids at the
    masked positions and -100 elsewhere.
    """
    ids = np.asarray(token_ids, dtype=np.int64)
    special = np.isin(ids, list(vocab.special_ids))
    maskable = np.flatnonzero(~special)
    if maskable.size == 0:
        raise ValueError("sentence has no maskable token")
    pick = rng.random(maskable.size) < ratio
    if not pick.any():
        pick[rng.integers(maskable.size)] = True
    positions = maskable[pick]
    corrupted = ids.copy()
    corrupted[positions] = vocab.mask_id
    targets = np.full_like(ids, -100)
    targets[positions] = ids[positions]
    return corrupted, positions, targets


def mlm_loss(logits, targets):
    """Per-caption mean token NLL at masked positions, averaged over captions.

    ``logits`` is (B, L, V); ``targets`` is (B, L) with -100 at unmasked slots.
    Every caption needs at least one masked position.
    """
    logits = _t(logits)
    tgt = torch.as_tensor(np.asarray(targets) if not torch.is_tensor(targets) else targets, dtype=torch.long)
    if logits.ndim == 2:
        logits, tgt = logits[None], tgt[None]
    sel = tgt != -100
    counts = sel.sum(dim=1)
    if bool((counts == 0).any()):
        raise ValueError("every caption needs a non-empty mask set")
    logp = logits.log_softmax(dim=-1).clamp_min(math.log(PROB_CLAMP))
    nll = -logp.gather(-1, tgt.clamp_min(0)[..., None])[..., 0]
    nll = nll * sel.to(nll.dtype)
    return (nll.sum(dim=1) / counts.to(nll.dtype)).mean()


# ---------------------------------------------------------------------------
# composition


@dataclass(frozen=True)
class LossWeights:
    vtc: float = 1.0
    vtm: float = 1.0
    mlm: float = 1.0
    vtc_inst: float = 0.1
    vtm_inst: float = 0.1
    mlm_inst: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not math.isfinite(v) or v < 0:
                raise ValueError(f"loss weight {f.name} must be finite and >= 0, got {v}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossReport:
    rec: float = 0.0
    vtc: float = 0.0
    vtm: float = 0.0
    mlm: float = 0.0
    vtc_inst: float = 0.0
    vtm_inst: float = 0.0
    mlm_inst: float = 0.0
    global_total: float = 0.0
    inst_total: float = 0.0
    total: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self, **extra) -> str:
        return json.dumps({**extra, **self.to_dict()}, sort_keys=True)


def combine(components: dict, weights: LossWeights):
    """Weighted sum of (possibly tensor) components: returns (global, inst, total)."""
    g = weights.vtc * components.get("vtc", 0.0) + weights.vtm * components.get("vtm", 0.0) \
        + weights.mlm * components.get("mlm", 0.0)
    i = weights.vtc_inst * components.get("vtc_inst", 0.0) + weights.vtm_inst * components.get("vtm_inst", 0.0) \
        + weights.mlm_inst * components.get("mlm_inst", 0.0)
    return g, i, components.get("rec", 0.0) + g + i


def total_loss(components: dict, weights: LossWeights) -> LossReport:
    vals = {k: float(v.detach()) if torch.is_tensor(v) else float(v) for k, v in components.items()}
    for k, v in vals.items():
        if not math.isfinite(v):
            raise ValueError(f"loss component {k} is not finite")
    g, i, tot = combine(vals, weights)
    return LossReport(**{k: vals.get(k, 0.0) for k in
                         ("rec", "vtc", "vtm", "mlm", "vtc_inst", "vtm_inst", "mlm_inst")},
                      global_total=g, inst_total=i, total=tot)


def append_step_log(path, report: LossReport, **extra) -> None:
    with open(path, "a") as f:
        f.write(report.to_json(**extra) + "\n")
