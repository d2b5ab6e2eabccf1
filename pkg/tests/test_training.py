import copy
import json
import math

import numpy as np
import pytest
import torch

from instap import losses as L
from instap.encoders import InstAPModel, ModelConfig
from instap.schema import SceneConfig, default_vocab, generate_dataset
from instap.training import (
    OptState,
    Prepared,
    TrainConfig,
    adamw_update,
    align_losses,
    align_step,
    build_align_batch,
    cosine_lr,
    grad_check,
    handoff_from_stage1,
    pretrain_losses,
    pretrain_step,
    relative_error,
    save_checkpoint,
    train,
)

from conftest import MICRO

SMALL = SceneConfig(canvas=(32, 32), T=2, object_count=(1, 3), sizes=(8, 12))


def micro_train_cfg(**kw):
    base = dict(stage="align", batch_size=4, frames_per_clip=2, crop_hw=(16, 16), model=MICRO, max_steps=3)
    base.update(kw)
    return TrainConfig(**base)


# --- config -----------------------------------------------------------------


def test_config_round_trip():
    cfg = micro_train_cfg(weights=L.LossWeights(vtc_inst=0.5))
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_config_unknown_key():
    with pytest.raises(KeyError, match="bogus"):
        TrainConfig.from_dict({"stage": "align", "bogus": 1})


def test_config_unknown_nested_key():
    with pytest.raises(KeyError, match="weights.nope"):
        TrainConfig.from_dict({"weights": {"nope": 1.0}})


@pytest.mark.parametrize("kw", [dict(mask_ratio=1.0), dict(batch_size=1), dict(epochs=0), dict(stage="x")])
def test_config_invariants(kw):
    with pytest.raises(ValueError):
        TrainConfig(**kw)


def test_pretrain_allows_batch_of_one():
    assert TrainConfig(stage="pretrain", batch_size=1).batch_size == 1


# --- optimizer / schedule ---------------------------------------------------


def test_adamw_zero_grad_identity():
    p = {"w": torch.tensor([1.0, -2.0], dtype=torch.float64)}
    before = p["w"].clone()
    adamw_update(p, {"w": torch.zeros(2, dtype=torch.float64)}, OptState(), 0.1)
    assert torch.equal(p["w"], before)


def test_adamw_single_step():
    p = {"w": torch.tensor(1.0, dtype=torch.float64)}
    adamw_update(p, {"w": torch.tensor(1.0, dtype=torch.float64)}, OptState(), 0.1, (0.9, 0.999), 1e-8, 0.0)
    assert float(p["w"]) == pytest.approx(0.9, abs=1e-8)


def test_adamw_pure_decay():
    p = {"w": torch.tensor(2.0, dtype=torch.float64)}
    adamw_update(p, {"w": torch.tensor(0.0, dtype=torch.float64)}, OptState(), 0.1, weight_decay=0.1)
    assert float(p["w"]) == pytest.approx(2.0 * 0.99, abs=1e-15)


def test_adamw_skips_decay_for_temperature_and_bias():
    p = {"log_tau": torch.tensor(2.0, dtype=torch.float64), "fc.bias": torch.tensor(2.0, dtype=torch.float64)}
    adamw_update(p, {}, OptState(), 0.1, weight_decay=0.1)
    assert float(p["log_tau"]) == 2.0 and float(p["fc.bias"]) == 2.0


def test_adamw_shape_mismatch():
    with pytest.raises(ValueError):
        adamw_update({"w": torch.zeros(2)}, {"w": torch.zeros(3)}, OptState(), 0.1)


def test_adamw_state_mirrors_params():
    p = {"a": torch.zeros(2, 3), "b": torch.zeros(4)}
    opt = OptState()
    adamw_update(p, {"a": torch.ones(2, 3), "b": torch.ones(4)}, opt, 0.1)
    adamw_update(p, {"a": torch.ones(2, 3), "b": torch.ones(4)}, opt, 0.1)
    assert opt.step == 2 and {k: tuple(v.shape) for k, v in opt.exp_avg.items()} == {"a": (2, 3), "b": (4,)}


def test_cosine_schedule_points():
    assert cosine_lr(10, 110, 1.0, 10) == 1.0
    assert cosine_lr(110, 110, 1.0, 10) == pytest.approx(0.0, abs=1e-15)
    assert cosine_lr(60, 110, 1.0, 10) == pytest.approx(0.5, abs=1e-12)
    assert cosine_lr(5, 110, 1.0, 10) == pytest.approx(0.5)
    assert cosine_lr(0, 110, 1.0, 10) == 0.0


# --- gradient checking ------------------------------------------------------


def test_grad_check_quadratic():
    p = torch.randn(7, dtype=torch.float64, requires_grad=True)
    err = grad_check(lambda: (p * p).sum(), {"p": p})
    assert err["max"] < 1e-9


def test_grad_check_detects_corruption():
    p = torch.randn(7, dtype=torch.float64, requires_grad=True)
    bad = {"p": (2 * p).detach() * 1.01}
    assert grad_check(lambda: (p * p).sum(), {"p": p}, analytic=bad)["max"] > 1e-3


def test_relative_error_floor():
    assert relative_error(np.zeros(3), np.zeros(3)) == 0.0
    assert relative_error(np.array([1.0]), np.array([1.01])) == pytest.approx(0.01 / 1.01)


@pytest.fixture(scope="module")
def tiny_scenes():
    return generate_dataset(4, 1, "train", SceneConfig(canvas=(16, 16), T=2, object_count=(2, 2), sizes=(4, 6)))


def test_grad_check_full_objective(tiny_scenes):
    torch.manual_seed(0)
    cfg = micro_train_cfg(batch_size=2, crop_hw=(8, 8), keep_rec_in_align=True,
                          weights=L.LossWeights(1, 1, 1, 0.1, 0.1, 0.1))
    model = InstAPModel(MICRO, seed=0).double()
    prep = Prepared(cfg)
    samples = tiny_scenes[:2]
    batch = build_align_batch(samples, prep, default_vocab(), cfg, 0, np.random.default_rng(0))
    tgt = [prep.teacher(model, s) for s in samples]
    batch.rec_hT, batch.rec_visible = [h.double() for h, _ in tgt], [v for _, v in tgt]
    _, neg = align_losses(model, batch, cfg, np.random.default_rng(1))

    def objective():
        comps, _ = align_losses(model, batch, cfg, np.random.default_rng(1), negatives=neg)
        return L.combine(comps, cfg.weights)[2]

    err = grad_check(objective, model, n_probe=8)
    assert err["max"] < 1e-4, {k: v for k, v in err.items() if v > 1e-5}


# --- stage 1 ----------------------------------------------------------------


def test_self_distillation_fixed_point(small_scenes):
    model = InstAPModel(ModelConfig(d=16, d_proj=8, heads=2, video_layers=1, text_layers=1, fusion_layers=1))
    model = model.double()
    model.video.load_state_dict(model.teacher.state_dict())
    cfg = TrainConfig(stage="pretrain", mask_ratio=0.0, frames_per_clip=2, model=model.cfg)
    comps = pretrain_losses(model, small_scenes[:2], Prepared(cfg))
    comps["rec"].backward()
    assert float(comps["rec"].detach()) < 1e-20
    grads = [p.grad.abs().max() for _, p in model.trainable_named_parameters() if p.grad is not None]
    assert max(grads) < 1e-9


def test_pretrain_overfits(small_scenes):
    cfg = TrainConfig(stage="pretrain", max_steps=300, batch_size=8, lr=1e-3, warmup_frac=0.0, frames_per_clip=2)
    hist = [r.rec for r in train(cfg, small_scenes).history]
    assert hist[-1] <= 0.5 * hist[9]


def test_pretrain_report_is_rec_only(small_scenes):
    cfg = TrainConfig(stage="pretrain", frames_per_clip=2, model=MICRO)
    model = InstAPModel(MICRO)
    rep = pretrain_step(model, small_scenes[:2], cfg, OptState(), Prepared(cfg))
    assert rep.total == rep.rec > 0 and rep.vtc == 0


def test_pretrain_deterministic(small_scenes):
    cfg = TrainConfig(stage="pretrain", max_steps=5, batch_size=4, frames_per_clip=2, model=MICRO)
    a = train(cfg, small_scenes)
    b = train(cfg, small_scenes)
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]


def test_teacher_unchanged_by_training(small_scenes):
    model = InstAPModel(MICRO)
    before = {k: v.clone() for k, v in model.teacher.state_dict().items()}
    train(micro_train_cfg(max_steps=2, stage="pretrain"), small_scenes, model=model)
    train(micro_train_cfg(max_steps=2), small_scenes, model=model)
    assert all(torch.equal(before[k], v) for k, v in model.teacher.state_dict().items())


def test_step_rejects_wrong_stage(small_scenes):
    cfg = micro_train_cfg()
    with pytest.raises(ValueError):
        pretrain_step(InstAPModel(MICRO), small_scenes[:2], cfg, OptState(), Prepared(cfg))


# --- stage 2 ----------------------------------------------------------------


def _global_only_reference(model, batch, cfg, rng):
    """Global VTC + VTM + MLM written out directly, without the instance branch."""
    from instap.training import _bool, _long, _tensor

    dt = torch.float64
    V, v = model.encode_video(_tensor(batch.video, dt), _long(batch.video_pos), _bool(batch.video_valid))
    T, t, tv = model.encode_text(_long(batch.text_ids))
    vp, tp = model.project(v, "visual"), model.project(t, "text")
    vtc = L.vtc_loss(vp, tp, model.tau)
    with torch.no_grad():
        nt, nv = L.mine_hard_negatives(vp @ tp.T, float(model.tau), rng)
    B = len(nt)
    ar = np.arange(B)
    vi, ti = np.r_[ar, ar, nv], np.r_[ar, nt, ar]
    valid = _bool(batch.video_valid)
    p = L.vtm_probs(model.matching_logits(model.fuse_hidden(T[ti], tv[ti], V[vi], valid[vi])))
    vtm = L.vtm_loss(p, torch.cat([torch.ones(B, dtype=dt), torch.zeros(2 * B, dtype=dt)]))
    Tm, _, mv = model.encode_text(_long(batch.mlm_ids))
    mlm = L.mlm_loss(model.mlm_logits(model.fuse_hidden(Tm, mv, V, valid)), _long(batch.mlm_targets))
    return vtc + vtm + mlm


def test_zero_instance_weights_match_global_only(small_scenes):
    cfg = micro_train_cfg(weights=L.LossWeights(vtc_inst=0, vtm_inst=0, mlm_inst=0), weight_decay=0.0)
    a = InstAPModel(MICRO, seed=3).double()
    b = copy.deepcopy(a)
    samples = small_scenes[:4]
    rep = align_step(a, samples, cfg, OptState(), Prepared(cfg), default_vocab(), np.random.default_rng(5))
    assert rep.inst_total == 0.0

    rng = np.random.default_rng(5)
    batch = build_align_batch(samples, Prepared(cfg), default_vocab(), cfg, 0, rng)
    loss = _global_only_reference(b, batch, cfg, rng)
    params = dict(b.trainable_named_parameters())
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    adamw_update(params, {n: g for n, g in zip(params, grads) if g is not None}, OptState(), cfg.lr,
                 cfg.betas, cfg.eps, 0.0)
    assert rep.total == pytest.approx(float(loss.detach()), rel=1e-12)
    for (n, p), (_, q) in zip(a.named_parameters(), b.named_parameters()):
        assert torch.allclose(p, q, rtol=0, atol=1e-12), n


def test_zero_instance_batch_is_degenerate(small_scenes):
    import dataclasses

    samples = [dataclasses.replace(s, instances=[]) for s in small_scenes[:3]]
    cfg = micro_train_cfg()
    model = InstAPModel(MICRO).double()
    batch = build_align_batch(samples, Prepared(cfg), default_vocab(), cfg, 0, np.random.default_rng(0))
    comps, _ = align_losses(model, batch, cfg, np.random.default_rng(0))
    rep = L.total_loss(comps, cfg.weights)
    assert rep.vtc_inst == rep.vtm_inst == rep.mlm_inst == rep.inst_total == 0.0
    L.combine(comps, cfg.weights)[2].backward()
    assert all(p.grad is None or not p.grad.any() for p in model.pool.parameters())
    assert model.log_tau_inst.grad is None or float(model.log_tau_inst.grad) == 0.0


def test_identical_captions_symmetric_text_gradient():
    torch.manual_seed(0)
    v = torch.nn.functional.normalize(torch.randn(3, 4, dtype=torch.float64), dim=1)
    t0 = torch.nn.functional.normalize(torch.randn(1, 4, dtype=torch.float64), dim=1)
    t = t0.repeat(3, 1).requires_grad_(True)
    L.vtc_loss(v, t, 0.5).backward()
    g = t.grad
    # swapping two videos permutes the gradient rows the same way
    t2 = t0.repeat(3, 1).requires_grad_(True)
    L.vtc_loss(v[[1, 0, 2]], t2, 0.5).backward()
    assert torch.allclose(t2.grad[[1, 0, 2]], g, atol=1e-14)
    assert torch.allclose(g.sum(0), t2.grad.sum(0), atol=1e-14)


def test_align_reports_all_components(small_scenes):
    cfg = micro_train_cfg()
    rep = align_step(InstAPModel(MICRO), small_scenes[:4], cfg, OptState(), Prepared(cfg), default_vocab(),
                     np.random.default_rng(0))
    for k in ("vtc", "vtm", "mlm", "vtc_inst", "vtm_inst", "mlm_inst"):
        assert getattr(rep, k) > 0, k
    assert rep.total == pytest.approx(rep.global_total + rep.inst_total)


def test_align_deterministic(small_scenes):
    cfg = micro_train_cfg(max_steps=4)
    a, b = train(cfg, small_scenes), train(cfg, small_scenes)
    assert [r.to_dict() for r in a.history] == [r.to_dict() for r in b.history]
    sa, sb = a.model.state_dict(), b.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_temperature_clamped(small_scenes):
    model = InstAPModel(MICRO)
    with torch.no_grad():
        model.log_tau.fill_(50.0)
    train(micro_train_cfg(max_steps=1), small_scenes, model=model)
    assert float(model.tau.detach()) <= 10.0 + 1e-5


def test_shared_tau_option_uses_global_temperature(small_scenes):
    cfg = micro_train_cfg(independent_inst_temperature=False)
    model = InstAPModel(MICRO)
    align_step(model, small_scenes[:4], cfg, OptState(), Prepared(cfg), default_vocab(), np.random.default_rng(0))
    assert float(model.log_tau_inst.detach()) == pytest.approx(math.log(0.07))


def test_align_needs_two_samples(small_scenes):
    cfg = micro_train_cfg()
    with pytest.raises(ValueError):
        align_step(InstAPModel(MICRO), small_scenes[:1], cfg, OptState(), Prepared(cfg), default_vocab(),
                   np.random.default_rng(0))


@pytest.mark.slow
def test_stage2_smoke_convergence():
    ds = generate_dataset(64, 0, "train", SMALL)
    ratios = []
    for s in range(3):
        cfg = TrainConfig(stage="align", max_steps=200, batch_size=16, lr=5e-4, seed_init=s, seed_data=s,
                          seed_dropout=s, frames_per_clip=2)
        h = [r.total for r in train(cfg, ds).history]
        ratios.append(h[-1] / h[9])
    assert np.mean(ratios) < 0.6


# --- checkpoints and hand-off -----------------------------------------------


def test_save_load_save_identical(tmp_path, small_scenes):
    from instap.training import load_checkpoint

    res = train(micro_train_cfg(max_steps=2), small_scenes)
    save_checkpoint(res.model, res.opt, tmp_path / "a.iapt", {"note": "x"})
    model, opt, meta = load_checkpoint(tmp_path / "a.iapt")
    save_checkpoint(model, opt, tmp_path / "b.iapt", {k: v for k, v in meta.items()
                                                    if k not in ("model_config", "optim_step")})
    assert (tmp_path / "a.iapt").read_bytes() == (tmp_path / "b.iapt").read_bytes()
    assert opt.step == res.opt.step == 2


def test_handoff_transfers_only_video(tmp_path, small_scenes):
    stage1 = train(micro_train_cfg(stage="pretrain", max_steps=2), small_scenes, out_dir=tmp_path)
    model = handoff_from_stage1(tmp_path / "last.iapt", MICRO, seed_init=11)
    fresh = InstAPModel(MICRO, seed=11)
    s1, s2, fr = stage1.model.state_dict(), model.state_dict(), fresh.state_dict()
    for k in s2:
        if k.startswith("video."):
            assert torch.equal(s2[k], s1[k]), k
        else:
            assert torch.equal(s2[k], fr[k]), k


def test_handoff_missing_file_names_path(tmp_path):
    with pytest.raises(FileNotFoundError, match="nothing.iapt"):
        handoff_from_stage1(tmp_path / "nothing.iapt", MICRO, 0)


def test_train_writes_outputs(tmp_path, small_scenes):
    cfg = micro_train_cfg(max_steps=4, checkpoint_every=2)
    res = train(cfg, small_scenes, out_dir=tmp_path, step_log=tmp_path / "steps.jsonl")
    rows = [json.loads(x) for x in (tmp_path / "steps.jsonl").read_text().splitlines()]
    assert [r["step"] for r in rows] == [0, 1, 2, 3]
    assert (tmp_path / "last.iapt").is_file() and res.best_path.is_file()
