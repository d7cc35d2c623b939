import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from mtmr.checkpoint import load_checkpoint, save_checkpoint
from mtmr.kspace import undersample
from mtmr.phantom import PhantomConfig, build_dataset, generate_phantom
from mtmr.recon_net import ReconConfig
from mtmr.seg_net import SegConfig
from mtmr.trainer import (ItfsPolicy, NonFiniteLossError, TrainingConfig, WeightSchedule, alpha_beta,
                          compute_losses, epoch_means, history_csv, infer, init_state, load_samples,
                          make_sample, read_history_csv, recon_loss, seg_loss, train, train_step,
                          volume_mask)

from oracles import replay_total_loss


def toy_config(**kw):
    base = dict(epochs=2, batch_size=4, lr=1e-3, recon=ReconConfig(1, 2, 4), seg=SegConfig(depth=1, base_channels=4))
    base.update(kw)
    return TrainingConfig(**base)


def toy_samples(n=6, size=16, dtype=torch.float32, cfg=None):
    cfg = cfg or toy_config()
    pc = PhantomConfig(height=size, width=size)
    out = []
    for i in range(n):
        ph = generate_phantom(pc, i)
        out.append(make_sample(ph.image, ph.labels, volume_mask(size, cfg, i // 3), i // 3, dtype))
    return out


# -- schedule ---------------------------------------------------------------

def test_exponential_schedule_values():
    s = WeightSchedule()
    assert alpha_beta(s, 0) == (0.8, 0.2)
    a3, b3 = alpha_beta(s, 3)
    assert a3 == 0.05 and abs(b3 - 0.95) < 1e-15
    mpmath.mp.dps = 50
    exact = mpmath.exp(-1) - mpmath.mpf("0.2")
    a1, b1 = alpha_beta(s, 1)
    assert abs(a1 - float(exact)) < 1e-12
    assert abs(b1 - float(1 - exact)) < 1e-12


def test_fixed_schedule():
    s = WeightSchedule(kind="fixed", fixed_alpha=0.5)
    assert all(alpha_beta(s, e) == (0.5, 0.5) for e in range(60))


def test_linear_schedule_reaches_floor():
    s = WeightSchedule(kind="linear", final_epoch=20)
    assert alpha_beta(s, 0)[0] == pytest.approx(0.8)
    assert alpha_beta(s, 20)[0] == pytest.approx(0.05)
    assert alpha_beta(s, 40)[0] == 0.05


def test_negative_epoch_rejected():
    with pytest.raises(ValueError):
        alpha_beta(WeightSchedule(), -1)


@pytest.mark.parametrize("kind", ["fixed", "linear", "exponential"])
def test_schedule_invariants_sweep(kind):
    s = WeightSchedule(kind=kind, fixed_alpha=0.3, t_scale=0.37)
    prev = 1.0
    for e in range(0, 10_001):
        a, b = alpha_beta(s, e)
        assert abs(a + b - 1) < 1e-12
        assert 0.05 <= a <= 1 if kind != "fixed" else a == 0.3
        if kind != "fixed":
            assert a <= prev
            prev = a


# -- ITFS -------------------------------------------------------------------

def test_alternate_steps_even_teacher():
    p = ItfsPolicy()
    assert [p.is_teacher(s) for s in range(8)] == [True, False] * 4


@settings(max_examples=50, deadline=None)
@given(start=st.integers(0, 10_000), n=st.integers(1, 200))
def test_itfs_window_balance(start, n):
    p = ItfsPolicy()
    assert sum(p.is_teacher(s) for s in range(start, start + 2 * n)) == n


def test_itfs_disabled_and_bernoulli():
    assert not any(ItfsPolicy(enabled=False).is_teacher(s) for s in range(100))
    b = ItfsPolicy(schedule="bernoulli", teacher_ratio=0.3, seed=4)
    flags = [b.is_teacher(s) for s in range(4000)]
    assert flags == [b.is_teacher(s) for s in range(4000)]
    assert abs(np.mean(flags) - 0.3) < 0.03
    assert all(ItfsPolicy(teacher_ratio=1.0).is_teacher(s) for s in range(10))


# -- losses -----------------------------------------------------------------

def test_recon_loss_examples():
    t = torch.rand(4, 4)
    assert recon_loss(t, t) == 0
    assert recon_loss(t + 1, t).item() == pytest.approx(1.0)
    rng = np.random.default_rng(0)
    a, b = rng.random((4, 4)), rng.random((4, 4))
    total = 0.0
    for i in range(4):
        for j in range(4):
            total += (a[i, j] - b[i, j]) ** 2
    assert abs(recon_loss(torch.as_tensor(a), torch.as_tensor(b)).item() - total / 16) < 1e-12
    assert abs(recon_loss(torch.as_tensor(a), torch.as_tensor(b), "sum").item() - total) < 1e-12
    with pytest.raises(ValueError):
        recon_loss(torch.zeros(2, 2), torch.zeros(3, 3))


def _onehot_probs(labels, c=2):
    return torch.nn.functional.one_hot(labels, c).movedim(-1, 1).double()


def test_seg_loss_examples():
    labels = torch.zeros(1, 4, 4, dtype=torch.int64)
    labels[0, :2, :2] = 1
    assert seg_loss(_onehot_probs(labels), labels).item() == pytest.approx(1 - 8 / 8.1, abs=1e-12)
    shifted = torch.zeros_like(labels)
    shifted[0, 2:, 2:] = 1
    assert seg_loss(_onehot_probs(shifted), labels).item() == pytest.approx(1.0, abs=1e-12)
    empty = torch.zeros_like(labels)
    assert seg_loss(_onehot_probs(empty), empty).item() == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(ValueError):
        seg_loss(_onehot_probs(empty), empty + 2)


# -- steps ------------------------------------------------------------------

def test_teacher_step_isolates_recon_from_seg_branch():
    state = init_state(toy_config(), dtype=torch.float64)
    batch = toy_samples(4, dtype=torch.float64)
    _, _, l_seg, _, _ = compute_losses(state, batch, 0, teacher=True)
    grads = torch.autograd.grad(l_seg, list(state.recon.parameters()), allow_unused=True)
    assert all(g is None or not g.any() for g in grads)
    _, _, l_seg_free, _, _ = compute_losses(state, batch, 0, teacher=False)
    grads = torch.autograd.grad(l_seg_free, list(state.recon.parameters()), allow_unused=True)
    assert any(g is not None and g.abs().sum() > 0 for g in grads)


def test_alpha_one_leaves_seg_params():
    cfg = toy_config(schedule=WeightSchedule(kind="fixed", fixed_alpha=1.0))
    state = init_state(cfg)
    before = [p.detach().clone() for p in state.seg.parameters()]
    recon_before = [p.detach().clone() for p in state.recon.parameters()]
    train_step(state, toy_samples(4))
    assert all(torch.equal(a, b) for a, b in zip(before, state.seg.parameters()))
    assert any(not torch.equal(a, b) for a, b in zip(recon_before, state.recon.parameters()))


@pytest.mark.parametrize("teacher_step", [0, 1])
def test_step_loss_matches_replay(teacher_step):
    state = init_state(toy_config(), dtype=torch.float64)
    state.global_step = teacher_step
    batch = toy_samples(4, dtype=torch.float64)
    recon_sd = {k: v.clone() for k, v in state.recon.state_dict().items()}
    seg_sd = {k: v.clone() for k, v in state.seg.state_dict().items()}
    _, rec = train_step(state, batch)
    k = torch.stack([s.kspace for s in batch])
    w = torch.stack([s.weights for s in batch])
    target = torch.stack([s.image for s in batch])
    labels = torch.stack([s.labels for s in batch])
    expected = replay_total_loss(recon_sd, seg_sd, k, w, target, labels, rec.alpha, rec.beta,
                                 rec.teacher, n_convs=2, seg_depth=1)
    assert rec.teacher == (teacher_step == 0)
    assert abs(rec.l_total - expected.item()) < 1e-10
    # the update actually moved the parameters
    assert any(not torch.equal(recon_sd[k], v) for k, v in state.recon.state_dict().items())


def test_non_finite_loss_aborts():
    state = init_state(toy_config())
    batch = toy_samples(2)
    with torch.no_grad():
        next(state.seg.parameters()).fill_(float("inf"))
    with pytest.raises((NonFiniteLossError, RuntimeError)):
        train_step(state, batch)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        train_step(init_state(toy_config()), [])


# -- training loop ----------------------------------------------------------

def test_zero_epochs_returns_initial_state():
    cfg = toy_config(epochs=0)
    state = train(cfg, samples=toy_samples())
    fresh = init_state(cfg)
    assert state.history == [] and state.epoch == 0
    assert all(torch.equal(a, b) for a, b in zip(state.recon.parameters(), fresh.recon.parameters()))


def test_training_is_deterministic(tmp_path):
    samples = toy_samples()
    a = train(toy_config(), samples=samples, run_dir=tmp_path / "a")
    b = train(toy_config(), samples=samples, run_dir=tmp_path / "b")
    assert (tmp_path / "a" / "loss_history.csv").read_bytes() == (tmp_path / "b" / "loss_history.csv").read_bytes()
    assert (tmp_path / "a" / "final.ckpt").read_bytes() == (tmp_path / "b" / "final.ckpt").read_bytes()
    assert len(a.history) == 2 * math.ceil(6 / 4)
    assert read_history_csv(history_csv(a.history)) == a.history
    assert len(epoch_means(b.history)) == 2


def test_resume_matches_uninterrupted(tmp_path):
    samples = toy_samples()
    full = train(toy_config(epochs=3), samples=samples)
    part = train(toy_config(epochs=1, checkpoint_every=1), samples=samples, run_dir=tmp_path)
    assert (tmp_path / "epoch_0001.ckpt").exists()
    resumed = train(toy_config(epochs=3), samples=samples, resume=tmp_path / "epoch_0001.ckpt")
    assert part.epoch == 1 and resumed.epoch == 3
    for a, b in zip(list(full.recon.parameters()) + list(full.seg.parameters()),
                    list(resumed.recon.parameters()) + list(resumed.seg.parameters())):
        assert torch.equal(a, b)
    assert resumed.history == full.history


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    state = train(toy_config(epochs=1), samples=toy_samples())
    save_checkpoint(state, tmp_path / "s.ckpt")
    loaded = load_checkpoint(tmp_path / "s.ckpt")
    for a, b in zip(state.recon.state_dict().values(), loaded.recon.state_dict().values()):
        assert torch.equal(a, b)
    assert loaded.global_step == state.global_step and loaded.config == state.config


def test_train_from_manifest(tmp_path):
    m = build_dataset(PhantomConfig(height=16, width=16), 6, 0, tmp_path, slices_per_volume=3)
    state = train(toy_config(epochs=1), manifest=m)
    assert state.global_step == 2
    masks = [volume_mask(16, state.config, v) for v in (0, 1)]
    assert masks[0] != masks[1]
    assert len(load_samples(m, state.config)) == 6


def test_infer_is_deterministic_and_free_running():
    cfg = toy_config()
    state = train(cfg, samples=toy_samples())
    ph = generate_phantom(PhantomConfig(height=16, width=16), 99)
    m = undersample(ph.image, volume_mask(16, cfg, 0))
    mag1, p1 = infer(state, m)
    mag2, p2 = infer(state, m)
    assert np.array_equal(mag1, mag2) and np.array_equal(p1, p2)
    state.config.itfs.teacher_ratio = 1.0
    _, p3 = infer(state, m)
    assert np.array_equal(p1, p3)
    assert p1.shape == (2, 16, 16) and abs(p1.sum(0) - 1).max() < 1e-5


def test_config_dict_roundtrip_and_unknown_key():
    cfg = toy_config(schedule=WeightSchedule(kind="linear"), itfs=ItfsPolicy(teacher_ratio=0.25))
    assert TrainingConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        TrainingConfig.from_dict({"bogus": 1})
    with pytest.raises(ValueError):
        TrainingConfig(recon_reduction="median")
