import pytest
import torch
import torch.nn.functional as F

from videopure.attacks import (AttackConfig, BPDATarget, ClassifierTarget,
                               EOTTarget, _candidate_xent, adaptive_loss_curve,
                               bpda_target, eot_target, pgd, transfer_attack)
from videopure.data import DatasetManifest, VideoTensor, generate_clip
from videopure.errors import AttackError, ConfigError
from videopure.models import VideoClassifier
from videopure.purify import IdentityPurifier


@pytest.fixture(scope="module")
def clip():
    return generate_clip(2, 3, DatasetManifest(frames=4, height=16, width=16, margin=12))


@pytest.fixture(scope="module")
def clf():
    torch.manual_seed(0)
    return VideoClassifier(channels=1, num_classes=8, width=8)


class PullTarget:
    """Deterministic toy target: loss grows along a fixed direction."""

    def __init__(self, w: torch.Tensor):
        self.w = w
        self.calls = 0

    def loss_and_grad(self, x, y):
        self.calls += 1
        return float((x * self.w).sum()), self.w.clone()


def test_config_validation_and_step_default():
    cfg = AttackConfig()
    assert cfg.effective_step == pytest.approx(cfg.epsilon / 4)
    assert AttackConfig(step_size=0.01).effective_step == 0.01
    for bad in (dict(epsilon=0.0), dict(iterations=0), dict(norm="l1"),
                dict(eot_reps=0), dict(step_size=-1.0)):
        with pytest.raises(ConfigError):
            AttackConfig(**bad)


@pytest.mark.parametrize("norm", ["linf", "l2"])
@pytest.mark.parametrize("random_start", [False, True])
def test_every_iterate_stays_in_ball_and_range(clip, norm, random_start):
    eps = 8 / 255 if norm == "linf" else 2.0
    x0 = clip.video.frames
    gen = torch.Generator().manual_seed(42)
    for trial in range(20):
        w = torch.randn(x0.shape, generator=gen)
        cfg = AttackConfig(epsilon=eps, iterations=5, norm=norm,
                           random_start=random_start, seed=trial)
        seen = []

        def cb(i, xa, loss):
            seen.append(xa.clone())

        out = pgd(clip.video, clip.label, PullTarget(w), cfg, iter_callback=cb)
        assert len(seen) == 5
        for xa in seen + [out.frames]:
            delta = xa - x0
            if norm == "linf":
                assert float(delta.abs().max()) <= eps + 1e-6
            else:
                assert float(delta.norm()) <= eps + 1e-5
            assert float(xa.min()) >= 0.0 and float(xa.max()) <= 1.0


def test_pgd_climbs_a_linear_loss(clip):
    w = torch.ones(clip.video.frames.shape)
    target = PullTarget(w)
    cfg = AttackConfig(iterations=4)
    out = pgd(clip.video, clip.label, target, cfg)
    # pushing along +w raises <w, x> unless already saturated at 1
    assert float((out.frames - clip.video.frames).sum()) > 0


def test_candidate_xent_single_equals_cross_entropy(clf, clip):
    x = clip.video.frames
    loss = _candidate_xent(clf, [x], 3)
    ref = F.cross_entropy(clf(x), torch.tensor([3]))
    assert float((loss - ref).abs().detach()) < 1e-6


def test_bpda_on_identity_matches_graybox_bitwise(clf, clip):
    cfg = AttackConfig(iterations=6, seed=9)
    plain = pgd(clip.video, clip.label, ClassifierTarget(clf), cfg)
    via_bpda = pgd(clip.video, clip.label,
                   bpda_target(IdentityPurifier(clf)), cfg)
    assert torch.equal(plain.frames, via_bpda.frames)


def test_eot_of_deterministic_is_noop_bitwise(clf, clip):
    cfg = AttackConfig(iterations=4, seed=1)
    plain = pgd(clip.video, clip.label, ClassifierTarget(clf), cfg)
    wrapped = pgd(clip.video, clip.label,
                  eot_target(ClassifierTarget(clf), reps=5), cfg)
    assert torch.equal(plain.frames, wrapped.frames)


def test_eot_averages_and_counts_reps(clip):
    x = clip.video.frames

    class Cycle:
        def __init__(self):
            self.i = 0
            self.grads = [torch.zeros(x.shape), torch.ones(x.shape)]

        def loss_and_grad(self, xx, y):
            g = self.grads[self.i % 2]
            self.i += 1
            return float(self.i), g

    inner = Cycle()
    loss, grad = EOTTarget(inner, reps=4).loss_and_grad(x, 0)
    assert inner.i == 4
    assert loss == pytest.approx((1 + 2 + 3 + 4) / 4)
    assert torch.equal(grad, torch.full(x.shape, 0.5))


def test_bpda_mode_validation(clf):
    d = IdentityPurifier(clf)
    with pytest.raises(ConfigError):
        BPDATarget(d, mode="median")
    with pytest.raises(ConfigError):
        BPDATarget(IdentityPurifier())  # no classifier anywhere
    bad = BPDATarget(d, mode="step:5")
    with pytest.raises(ConfigError):  # identity defense has one candidate
        bad.loss_and_grad(torch.rand(4, 16, 16, 1), 0)


def test_bpda_final_and_step_pick_candidates(clf, clip):
    x = clip.video.frames
    d = IdentityPurifier(clf)
    l_vote, g_vote = BPDATarget(d, mode="vote").loss_and_grad(x, 1)
    l_final, g_final = BPDATarget(d, mode="final").loss_and_grad(x, 1)
    l_step, g_step = BPDATarget(d, mode="step:0").loss_and_grad(x, 1)
    # a single candidate makes all three modes equivalent
    assert l_vote == l_final == l_step
    assert torch.equal(g_vote, g_final) and torch.equal(g_vote, g_step)


def test_transfer_equals_pgd_on_surrogate(clf, clip):
    torch.manual_seed(5)
    surrogate = VideoClassifier(channels=1, num_classes=8, width=8)
    cfg = AttackConfig(iterations=3, seed=2)
    a = transfer_attack(clip.video, clip.label, surrogate, cfg)
    b = pgd(clip.video, clip.label, ClassifierTarget(surrogate), cfg)
    assert torch.equal(a.frames, b.frames)
    # and it is genuinely a different attack than against clf
    c = pgd(clip.video, clip.label, ClassifierTarget(clf), cfg)
    assert not torch.equal(a.frames, c.frames)


def test_loss_curve_matches_pgd_and_length(clf, clip):
    cfg = AttackConfig(iterations=7, seed=3)
    x_adv, losses = adaptive_loss_curve(clip.video, clip.label,
                                        ClassifierTarget(clf), cfg)
    assert len(losses) == 7
    ref = pgd(clip.video, clip.label, ClassifierTarget(clf), cfg)
    assert torch.equal(x_adv.frames, ref.frames)
    # the first entry is the loss at the clean input
    l0, _ = ClassifierTarget(clf).loss_and_grad(clip.video.frames, clip.label)
    assert losses[0] == pytest.approx(l0)


def test_non_finite_gradient_raises(clip):
    class BadTarget:
        def loss_and_grad(self, x, y):
            return float("nan"), torch.zeros(x.shape)

    with pytest.raises(AttackError):
        pgd(clip.video, clip.label, BadTarget(), AttackConfig(iterations=2))


def test_l2_flat_gradient_stops_early(clip):
    target = PullTarget(torch.zeros(clip.video.frames.shape))
    cfg = AttackConfig(iterations=10, norm="l2", epsilon=1.0)
    out = pgd(clip.video, clip.label, target, cfg)
    assert target.calls == 1  # flat: bail after the first evaluation
    assert torch.equal(out.frames, clip.video.frames)


def test_random_start_seeded(clip):
    w = torch.randn(clip.video.frames.shape, generator=torch.Generator().manual_seed(0))
    cfg = AttackConfig(iterations=2, random_start=True, seed=11)
    a = pgd(clip.video, clip.label, PullTarget(w), cfg)
    b = pgd(clip.video, clip.label, PullTarget(w), cfg)
    c = pgd(clip.video, clip.label, PullTarget(w),
            AttackConfig(iterations=2, random_start=True, seed=12))
    assert torch.equal(a.frames, b.frames)
    assert not torch.equal(a.frames, c.frames)
