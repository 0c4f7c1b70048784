"""White-box, transfer, and adaptive attacks on defended video classifiers.

All attacks are projected gradient descent in pixel space.  What varies is
the loss target:

* ``ClassifierTarget`` differentiates the classifier alone (the gray-box
  setting: the defense is ignored during crafting but applied at test time).
* ``bpda_target`` runs the defense forward without gradients, re-attaches the
  candidates, and backpropagates a cross-entropy on the mean softmax of the
  candidate list; the averaged candidate gradient stands in for the defense's
  Jacobian (straight-through).  A defense with a single identity candidate
  makes this bitwise identical to attacking the classifier directly.
* ``EOTTarget`` wraps any target, averaging loss and gradient over repeated
  evaluations with fresh defense randomness.  Averaging runs in float64 and
  a deterministic inner target makes the wrapper an exact no-op.

The PGD loop itself is shared: sign steps with L-inf projection or normalized
steps with L2 ball projection, always followed by a clamp to [0, 1].
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass
from math import log
from typing import Callable, Protocol

import torch
import torch.nn.functional as F

from .data import FlowField, VideoTensor
from .errors import AttackError, ConfigError, require
from .purify import Purifier

IterCallback = Callable[[int, torch.Tensor, float], None]


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 4.0 / 255.0
    step_size: float | None = None     # None -> epsilon / 4
    iterations: int = 10
    norm: str = "linf"                 # or "l2"
    random_start: bool = False
    eot_reps: int = 20                 # used only when the target is EOT-wrapped
    seed: int = 0

    def __post_init__(self):
        require(self.epsilon > 0, ConfigError, "epsilon must be positive")
        require(self.step_size is None or self.step_size > 0, ConfigError,
                "step_size must be positive")
        require(self.iterations >= 1, ConfigError, "iterations must be >= 1")
        require(self.norm in ("linf", "l2"), ConfigError, f"unknown norm {self.norm!r}")
        require(self.eot_reps >= 1, ConfigError, "eot_reps must be >= 1")

    @property
    def effective_step(self) -> float:
        return self.step_size if self.step_size is not None else self.epsilon / 4.0

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


class AttackTarget(Protocol):
    def loss_and_grad(self, x: torch.Tensor, y: int) -> tuple[float, torch.Tensor]: ...


def _candidate_xent(classifier, candidates: list[torch.Tensor], y: int) -> torch.Tensor:
    """Cross-entropy of the mean softmax over candidates, in stable log space.

    -log(mean_i p_i[y]) = -(logsumexp_i(log p_i[y]) - log m).  With one
    candidate this reduces to the ordinary cross-entropy.
    """
    logp_y = torch.stack([F.log_softmax(classifier(c)[0], dim=-1)[y] for c in candidates])
    return -(torch.logsumexp(logp_y, dim=0) - log(len(candidates)))


class ClassifierTarget:
    """Differentiate the bare classifier; the defense never enters the graph."""

    def __init__(self, classifier):
        self.classifier = classifier

    def loss_and_grad(self, x: torch.Tensor, y: int) -> tuple[float, torch.Tensor]:
        xg = x.detach().clone().requires_grad_(True)
        loss = _candidate_xent(self.classifier, [xg], y)
        (grad,) = torch.autograd.grad(loss, xg)
        return float(loss.detach()), grad.detach()


class BPDATarget:
    """Straight-through gradients through a purification defense.

    mode 'vote' attacks the whole candidate list via the mean softmax, mode
    'final' attacks the last candidate only, and mode 'step:K' attacks
    candidate K, mirroring the defense's own answer modes.  The defense runs
    without gradients, each candidate is re-attached as a leaf, and the input
    gradient is the mean of the candidate gradients.
    """

    def __init__(self, defense: Purifier, classifier=None, mode: str = "vote",
                 flow: FlowField | None = None):
        require(mode in ("vote", "final") or mode.startswith("step:"), ConfigError,
                f"unknown BPDA mode {mode!r}")
        self.defense = defense
        self.classifier = classifier if classifier is not None else defense.classifier
        require(self.classifier is not None, ConfigError, "BPDA needs a classifier")
        self.mode = mode
        self.flow = flow

    def loss_and_grad(self, x: torch.Tensor, y: int) -> tuple[float, torch.Tensor]:
        with torch.no_grad():
            rec = self.defense.purify(VideoTensor(x.detach().clamp(0, 1)), flow=self.flow)
        if self.mode == "vote":
            videos = rec.vote_list
        elif self.mode == "final":
            videos = rec.vote_list[-1:]
        else:
            k = int(self.mode[5:])
            require(0 <= k < len(rec.vote_list), ConfigError,
                    f"step index {k} out of range for {len(rec.vote_list)} candidates")
            videos = rec.vote_list[k:k + 1]
        leaves = [v.frames.detach().clone().requires_grad_(True) for v in videos]
        loss = _candidate_xent(self.classifier, leaves, y)
        grads = torch.autograd.grad(loss, leaves)
        grad = torch.stack(grads).mean(dim=0)
        return float(loss.detach()), grad.detach()


class EOTTarget:
    """Expectation over transformation: average an inner target over reps."""

    def __init__(self, inner: AttackTarget, reps: int):
        require(reps >= 1, ConfigError, "reps must be >= 1")
        self.inner = inner
        self.reps = reps

    def loss_and_grad(self, x: torch.Tensor, y: int) -> tuple[float, torch.Tensor]:
        loss_acc = 0.0
        grad_acc: torch.Tensor | None = None
        for _ in range(self.reps):
            loss, grad = self.inner.loss_and_grad(x, y)
            loss_acc += loss
            g64 = grad.double()
            grad_acc = g64 if grad_acc is None else grad_acc + g64
        grad_out = (grad_acc / self.reps).to(grad.dtype)
        return loss_acc / self.reps, grad_out


def bpda_target(defense: Purifier, classifier=None, mode: str = "vote",
                flow: FlowField | None = None) -> BPDATarget:
    return BPDATarget(defense, classifier, mode, flow)


def eot_target(inner: AttackTarget, reps: int) -> EOTTarget:
    return EOTTarget(inner, reps)


def _project(xa: torch.Tensor, x0: torch.Tensor, cfg: AttackConfig) -> torch.Tensor:
    if cfg.norm == "linf":
        delta = (xa - x0).clamp(-cfg.epsilon, cfg.epsilon)
    else:
        delta = xa - x0
        n = float(delta.norm())
        if n > cfg.epsilon:
            delta = delta * (cfg.epsilon / n)
    return (x0 + delta).clamp(0.0, 1.0)


def pgd(x: VideoTensor, y: int, target: AttackTarget, cfg: AttackConfig,
        iter_callback: IterCallback | None = None) -> VideoTensor:
    """Maximize the target loss within the norm ball around x, staying in [0, 1].

    The callback, if given, sees (iteration, iterate, loss_at_previous_point)
    after every projection; it is how the tests watch per-step invariants.
    """
    x0 = x.frames.detach()
    xa = x0.clone()
    if cfg.random_start:
        gen = torch.Generator().manual_seed(cfg.seed)
        if cfg.norm == "linf":
            xa = xa + cfg.epsilon * (2 * torch.rand(xa.shape, generator=gen) - 1)
        else:
            noise = torch.randn(xa.shape, generator=gen)
            xa = xa + noise * (cfg.epsilon / max(float(noise.norm()), 1e-12))
        xa = _project(xa, x0, cfg)

    a = cfg.effective_step
    for i in range(1, cfg.iterations + 1):
        loss, grad = target.loss_and_grad(xa, y)
        if not (torch.isfinite(grad).all() and torch.isfinite(torch.tensor(loss))):
            raise AttackError("non-finite loss or gradient", iteration=i)
        if cfg.norm == "linf":
            xa = xa + a * grad.sign()
        else:
            gn = float(grad.norm())
            if gn < 1e-20:
                break  # flat landscape, nothing left to climb
            xa = xa + a * grad / gn
        xa = _project(xa, x0, cfg)
        if iter_callback is not None:
            iter_callback(i, xa, loss)
    return VideoTensor(xa)


def adaptive_loss_curve(x: VideoTensor, y: int, target: AttackTarget,
                        cfg: AttackConfig) -> tuple[VideoTensor, list[float]]:
    """PGD plus the loss observed at each iteration (one entry per step).

    Entry i is the target loss at the iterate the i-th step started from, so
    no extra target evaluations happen and stochastic targets see exactly the
    same call sequence as plain pgd.
    """
    losses: list[float] = []

    def cb(i: int, xa: torch.Tensor, loss_at_prev: float) -> None:
        losses.append(loss_at_prev)

    x_adv = pgd(x, y, target, cfg, iter_callback=cb)
    return x_adv, losses


def transfer_attack(x: VideoTensor, y: int, surrogate_classifier,
                    cfg: AttackConfig) -> VideoTensor:
    """PGD against a different classifier; evaluate wherever you like."""
    return pgd(x, y, ClassifierTarget(surrogate_classifier), cfg)
