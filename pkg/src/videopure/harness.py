"""Experiment orchestration: metrics, defense/attack grids, ablations, reports.

A run is a pure function of its config file plus the referenced checkpoints:
every random draw (attack starts, stochastic defenses, clip selection) is
derived from the master seed and a string tag, so re-running a config
reproduces the accuracy numbers exactly.  Timing fields are the only part of
a report that varies between runs.
"""

from __future__ import annotations

import csv
import json
import os
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from .attacks import (AttackConfig, ClassifierTarget, adaptive_loss_curve,
                      bpda_target, eot_target, pgd)
from .data import LabeledClip, derive_seed, load_dataset
from .errors import ConfigError, require
from .guidance import GuidanceConfig
from .models import load_model
from .purify import (DDIMInversionPurifier, DiffpureDDIMPurifier,
                     DiffpureDDPMPurifier, IdentityPurifier, JpegPurifier,
                     Purifier, TemporalShufflePurifier, VideoPurePurifier,
                     WaveletPurifier)
from .schedule import make_linear_schedule, respace

SCHEMA_VERSION = 1

ATTACK_MODES = ("graybox", "transfer", "bpda", "eot+bpda")
ABLATION_KNOBS = ("t_star", "alpha_s", "single_step_k", "losses", "zt_replace")


# --- configuration ---------------------------------------------------------

@dataclass
class ExperimentConfig:
    """Everything one evaluation run needs, JSON round-trippable."""

    dataset: str
    checkpoints: dict               # role -> path; needs classifier + epsilon
    defenses: list = field(default_factory=list)   # [{"name": ..., **params}]
    attacks: list = field(default_factory=list)    # [{"label", "mode", "config"}]
    metrics: list = field(default_factory=lambda: ["standard", "robust_star", "robust"])
    seed: int = 0
    out_dir: str = "runs/exp"
    clips_per_class: int = 1
    t_ddim: int = 50
    loss_curves: bool = False
    workers: int = 0

    def __post_init__(self):
        require("classifier" in self.checkpoints and "epsilon" in self.checkpoints,
                ConfigError, "checkpoints must name at least classifier and epsilon")
        for a in self.attacks:
            require(a.get("mode") in ATTACK_MODES, ConfigError,
                    f"attack mode must be one of {ATTACK_MODES}, got {a.get('mode')!r}")
            require("label" in a, ConfigError, "every attack needs a label")
        labels = [a["label"] for a in self.attacks]
        require(len(labels) == len(set(labels)), ConfigError, "attack labels must be unique")

    def to_json(self) -> dict:
        return {
            "dataset": self.dataset, "checkpoints": dict(self.checkpoints),
            "defenses": [dict(d) for d in self.defenses],
            "attacks": [dict(a) for a in self.attacks],
            "metrics": list(self.metrics), "seed": self.seed,
            "out_dir": self.out_dir, "clips_per_class": self.clips_per_class,
            "t_ddim": self.t_ddim, "loss_curves": self.loss_curves,
            "workers": self.workers,
        }

    @classmethod
    def from_json(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        require(not unknown, ConfigError, f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path: str | os.PathLike) -> "ExperimentConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def attack_config_from_json(d: dict) -> AttackConfig:
    known = set(AttackConfig.__dataclass_fields__)
    unknown = set(d) - known
    require(not unknown, ConfigError, f"unknown attack config keys: {sorted(unknown)}")
    return AttackConfig(**d)


@dataclass
class EvalReport:
    """Per-defense results: the three accuracies plus per-clip detail."""

    label: str
    standard_acc: float | None = None
    robust_acc_star: dict = field(default_factory=dict)   # attack label -> fraction
    robust_acc: dict = field(default_factory=dict)
    per_clip: dict = field(default_factory=dict)          # column -> outcome dicts
    seconds_per_clip: float = 0.0
    loss_curves: dict = field(default_factory=dict)       # attack label -> mean change

    @property
    def attack_accuracies(self) -> dict:
        return {**self.robust_acc_star, **self.robust_acc}

    @property
    def average(self) -> float | None:
        accs = self.attack_accuracies
        return sum(accs.values()) / len(accs) if accs else None

    def to_json(self) -> dict:
        avg_star = (sum(self.robust_acc_star.values()) / len(self.robust_acc_star)
                    if self.robust_acc_star else None)
        avg_adapt = (sum(self.robust_acc.values()) / len(self.robust_acc)
                     if self.robust_acc else None)
        return {
            "label": self.label, "standard_acc": self.standard_acc,
            "robust_acc_star": dict(self.robust_acc_star),
            "robust_acc": dict(self.robust_acc),
            "average": self.average, "avg_robust_star": avg_star,
            "avg_robust": avg_adapt, "per_clip": self.per_clip,
            "seconds_per_clip": self.seconds_per_clip,
            "loss_curves": self.loss_curves,
        }


# --- defenses by name ------------------------------------------------------

def build_defense(spec: dict, *, classifier, eps_model, sched, rsched,
                  codec=None) -> Purifier:
    """Instantiate a defense from its config entry {"name": ..., **params}."""
    spec = dict(spec)
    name = spec.pop("name", None)
    spec.pop("label", None)
    try:
        if name == "none":
            return IdentityPurifier(classifier, **spec)
        if name == "videopure":
            gkeys = {k: spec.pop(k) for k in list(spec)
                     if k in GuidanceConfig.__dataclass_fields__}
            guidance = GuidanceConfig(**gkeys) if gkeys else None
            return VideoPurePurifier(eps_model, classifier, rsched,
                                     guidance=guidance, codec=codec, **spec)
        if name == "diffpure-ddpm":
            return DiffpureDDPMPurifier(eps_model, classifier, sched, codec=codec, **spec)
        if name == "diffpure-ddim":
            return DiffpureDDIMPurifier(eps_model, classifier, rsched, codec=codec, **spec)
        if name == "ddim-inversion":
            return DDIMInversionPurifier(eps_model, classifier, rsched, codec=codec, **spec)
        if name == "jpeg":
            return JpegPurifier(classifier, **spec)
        if name == "wavelet":
            return WaveletPurifier(classifier, **spec)
        if name == "shuffle":
            return TemporalShufflePurifier(classifier, **spec)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for defense {name!r}: {exc}") from exc
    raise ConfigError(f"unknown defense name {name!r}")


def select_eval_clips(clips: list[LabeledClip], clips_per_class: int,
                      master_seed: int) -> list[LabeledClip]:
    """One held-out clip per class by default; the seed rotates which one."""
    require(clips_per_class >= 1, ConfigError, "clips_per_class must be >= 1")
    by_class: dict[int, list[LabeledClip]] = {}
    for c in clips:
        by_class.setdefault(c.label, []).append(c)
    picked = []
    for label in sorted(by_class):
        group = sorted(by_class[label], key=lambda c: c.clip_id)
        offset = derive_seed(master_seed, f"pick/{label}") % len(group)
        for j in range(min(clips_per_class, len(group))):
            picked.append(group[(offset + j) % len(group)])
    return picked


# --- metric runners --------------------------------------------------------

def _merge_clip_results(results: list[tuple]) -> list[dict]:
    return [out for _, out in sorted(results, key=lambda kv: kv[0])]


def _map_clips(fn, clips: list[LabeledClip], workers: int) -> list[dict]:
    """Apply fn(clip) over clips, optionally with a bounded thread pool.

    Results merge deterministically by clip_id regardless of completion order.
    """
    if workers and workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(fn, clips))
    else:
        outs = [fn(c) for c in clips]
    return _merge_clip_results([(c.clip_id, o) for c, o in zip(clips, outs)])


def _attach(defense: Purifier, classifier) -> Purifier:
    if classifier is not None and defense.classifier is None:
        defense.classifier = classifier
    require(defense.classifier is not None, ConfigError,
            "defense has no classifier to answer with")
    return defense


def _eval_outcome(defense: Purifier, clip: LabeledClip, video,
                  master_seed: int) -> dict:
    # the reseed tag depends only on the clip, never on the attack, so a
    # stochastic defense answers identically across every column of a row
    defense.reseed(derive_seed(master_seed, f"eval/{clip.clip_id}"))
    t0 = time.monotonic()
    rec = defense.purify(video, flow=clip.flow)
    sec = rec.meta.get("seconds", time.monotonic() - t0)
    return {"clip_id": clip.clip_id, "label": clip.label,
            "pred": rec.voted_class, "correct": bool(rec.voted_class == clip.label),
            "seconds": round(float(sec), 6)}


def _accuracy(outcomes: list[dict]) -> float:
    return sum(o["correct"] for o in outcomes) / len(outcomes)


def run_standard_acc(defense: Purifier, classifier, clips: list[LabeledClip], *,
                     master_seed: int = 0, workers: int = 0,
                     collect: list | None = None) -> float:
    """Fraction of clean clips the defended pipeline labels correctly."""
    require(len(clips) > 0, ConfigError, "no clips to evaluate")
    _attach(defense, classifier)
    outs = _map_clips(lambda c: _eval_outcome(defense, c, c.video, master_seed),
                      clips, 0 if defense.stochastic else workers)
    if collect is not None:
        collect.extend(outs)
    return _accuracy(outs)


def run_robust_acc_star(defense: Purifier, classifier, clips: list[LabeledClip],
                        atk_cfg: AttackConfig, *, master_seed: int = 0,
                        surrogate=None, label: str = "pgd", workers: int = 0,
                        collect: list | None = None) -> float:
    """Gray-box metric: craft against the classifier alone, evaluate defended.

    With ``surrogate`` set the attack transfers from that model instead.
    """
    require(len(clips) > 0, ConfigError, "no clips to evaluate")
    _attach(defense, classifier)
    atk_model = surrogate if surrogate is not None else defense.classifier

    def one(clip: LabeledClip) -> dict:
        cfg = replace(atk_cfg, seed=derive_seed(master_seed, f"atk/{label}/{clip.clip_id}"))
        x_adv = pgd(clip.video, clip.label, ClassifierTarget(atk_model), cfg)
        return _eval_outcome(defense, clip, x_adv, master_seed)

    outs = _map_clips(one, clips, 0 if defense.stochastic else workers)
    if collect is not None:
        collect.extend(outs)
    return _accuracy(outs)


def run_robust_acc(defense: Purifier, classifier, clips: list[LabeledClip],
                   atk_cfg: AttackConfig, adaptive_mode: str = "bpda", *,
                   master_seed: int = 0, label: str | None = None,
                   curves: list | None = None,
                   collect: list | None = None) -> float:
    """Adaptive metric: attack classifier-plus-defense, evaluate defended.

    ``adaptive_mode`` picks the gradient route: straight-through alone
    ('bpda') or averaged over defense randomness ('eot+bpda').  Passing a
    ``curves`` list additionally collects the per-iteration loss trace of
    every clip at no extra cost.
    """
    require(adaptive_mode in ("bpda", "eot+bpda"), ConfigError,
            f"adaptive_mode must be 'bpda' or 'eot+bpda', got {adaptive_mode!r}")
    require(len(clips) > 0, ConfigError, "no clips to evaluate")
    _attach(defense, classifier)
    label = label if label is not None else adaptive_mode
    bpda_mode = getattr(defense, "vote_mode", "vote")

    outs = []
    for clip in clips:
        defense.reseed(derive_seed(master_seed, f"atk/{label}/{clip.clip_id}"))
        target = bpda_target(defense, defense.classifier, mode=bpda_mode, flow=clip.flow)
        if adaptive_mode == "eot+bpda":
            target = eot_target(target, atk_cfg.eot_reps)
        cfg = replace(atk_cfg, seed=derive_seed(master_seed, f"atk/{label}/{clip.clip_id}"))
        if curves is not None:
            x_adv, losses = adaptive_loss_curve(clip.video, clip.label, target, cfg)
            curves.append(losses)
        else:
            x_adv = pgd(clip.video, clip.label, target, cfg)
        outs.append(_eval_outcome(defense, clip, x_adv, master_seed))
    if collect is not None:
        collect.extend(outs)
    return _accuracy(outs)


# --- the full grid ---------------------------------------------------------

def _check_paths(config: ExperimentConfig) -> None:
    missing = [p for p in [config.dataset, *config.checkpoints.values()]
               if not os.path.exists(p)]
    require(not missing, ConfigError, f"missing input files: {missing}")


def load_toolchain(config: ExperimentConfig):
    """Load dataset, models, and schedules a config refers to."""
    _check_paths(config)
    clips, _, _ = load_dataset(config.dataset)
    eval_clips = select_eval_clips(clips, config.clips_per_class, config.seed)
    classifier, _ = load_model(config.checkpoints["classifier"])
    eps_model, _ = load_model(config.checkpoints["epsilon"])
    classifier.eval()
    eps_model.eval()
    codec = None
    if config.checkpoints.get("autoencoder"):
        codec, _ = load_model(config.checkpoints["autoencoder"])
        codec.eval()
    surrogate = None
    if config.checkpoints.get("surrogate"):
        surrogate, _ = load_model(config.checkpoints["surrogate"])
        surrogate.eval()
    sched = make_linear_schedule()
    rsched = respace(sched, config.t_ddim)
    return eval_clips, classifier, eps_model, codec, surrogate, sched, rsched


def run_matrix(config: ExperimentConfig) -> dict:
    """Evaluate every defense under every configured attack; return the report.

    The report's "average" per row is the arithmetic mean of that row's
    attack-column entries (the clean column stays separate); per-metric
    averages are reported alongside.
    """
    t_start = time.monotonic()
    clips, classifier, eps_model, codec, surrogate, sched, rsched = load_toolchain(config)
    for a in config.attacks:
        if a["mode"] == "transfer":
            require(surrogate is not None, ConfigError,
                    "transfer attacks need a surrogate checkpoint")

    rows: dict[str, dict] = {}
    columns = [a["label"] for a in config.attacks]
    for spec in config.defenses:
        label = spec.get("label", spec.get("name"))
        require(label not in rows, ConfigError, f"duplicate defense label {label!r}")
        defense = build_defense(spec, classifier=classifier, eps_model=eps_model,
                                sched=sched, rsched=rsched, codec=codec)
        report = EvalReport(label=label)
        if "standard" in config.metrics:
            outs: list[dict] = []
            report.standard_acc = run_standard_acc(
                defense, classifier, clips, master_seed=config.seed,
                workers=config.workers, collect=outs)
            report.per_clip["clean"] = outs
            report.seconds_per_clip = sum(o["seconds"] for o in outs) / len(outs)
        for atk in config.attacks:
            cfg = attack_config_from_json(atk.get("config", {}))
            outs = []
            if atk["mode"] in ("graybox", "transfer"):
                if "robust_star" not in config.metrics:
                    continue
                acc = run_robust_acc_star(
                    defense, classifier, clips, cfg, master_seed=config.seed,
                    surrogate=surrogate if atk["mode"] == "transfer" else None,
                    label=atk["label"], workers=config.workers, collect=outs)
                report.robust_acc_star[atk["label"]] = acc
            else:
                if "robust" not in config.metrics:
                    continue
                mode = "bpda" if atk["mode"] == "bpda" else "eot+bpda"
                traces: list | None = [] if config.loss_curves else None
                acc = run_robust_acc(
                    defense, classifier, clips, cfg, mode, master_seed=config.seed,
                    label=atk["label"], curves=traces, collect=outs)
                report.robust_acc[atk["label"]] = acc
                if traces:
                    n_it = min(len(t) for t in traces)
                    report.loss_curves[atk["label"]] = [
                        sum(t[i] - t[0] for t in traces) / len(traces)
                        for i in range(n_it)]
            report.per_clip[atk["label"]] = outs
        rows[label] = report.to_json()

    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "matrix",
        "config": config.to_json(),
        "clip_ids": [c.clip_id for c in clips],
        "columns": columns,
        "rows": rows,
        "timing": {"total_seconds": round(time.monotonic() - t_start, 3)},
    }


# --- ablations -------------------------------------------------------------

def _ablation_variants(knob: str, base: dict, values=None) -> list[tuple[str, dict]]:
    g = GuidanceConfig()
    lam_t = base.get("lambda_temp", g.lambda_temp)
    lam_s = base.get("lambda_spa", g.lambda_spa)
    t_star = int(base.get("t_star", 6))
    if knob == "t_star":
        vals = values if values is not None else [2, 4, 6, 8, 10]
        return [(f"t{v}", {"t_star": int(v)}) for v in vals]
    if knob == "alpha_s":
        vals = values if values is not None else [-8.0, -6.0, -4.0, -2.0, 0.0]
        return [(f"a{v:g}", {"alpha_s": float(v)}) for v in vals]
    if knob == "single_step_k":
        vals = values if values is not None else list(range(t_star + 1))
        rows = [(f"step{int(k)}", {"vote_mode": f"step:{int(k)}"}) for k in vals]
        rows.append(("vote", {"vote_mode": "vote"}))
        return rows
    if knob == "losses":
        return [("both", {"lambda_temp": lam_t, "lambda_spa": lam_s}),
                ("temporal", {"lambda_temp": lam_t, "lambda_spa": 0.0}),
                ("spatial", {"lambda_temp": 0.0, "lambda_spa": lam_s}),
                ("none", {"lambda_temp": 0.0, "lambda_spa": 0.0})]
    if knob == "zt_replace":
        return [("keep", {"zt_replace": False}), ("replace", {"zt_replace": True})]
    raise ConfigError(f"knob must be one of {ABLATION_KNOBS}, got {knob!r}")


def run_ablation(config: ExperimentConfig, knob: str, values=None,
                 metrics: tuple = ("standard", "robust")) -> dict:
    """Sweep one knob of the guided defense and measure the requested metrics.

    The sweep starts from the first "videopure" entry in config.defenses (or
    defaults), and uses the first matching attack entry for each metric.
    """
    t_start = time.monotonic()
    clips, classifier, eps_model, codec, surrogate, sched, rsched = load_toolchain(config)
    base = next((dict(d) for d in config.defenses if d.get("name") == "videopure"),
                {"name": "videopure"})
    star_atk = next((a for a in config.attacks if a["mode"] in ("graybox", "transfer")), None)
    adapt_atk = next((a for a in config.attacks if a["mode"] in ("bpda", "eot+bpda")), None)

    rows = []
    for label, over in _ablation_variants(knob, base, values):
        spec = {**base, **over}
        spec.pop("label", None)
        defense = build_defense(spec, classifier=classifier, eps_model=eps_model,
                                sched=sched, rsched=rsched, codec=codec)
        row: dict = {"label": label, "params": over,
                     "standard_acc": None, "robust_acc_star": None, "robust_acc": None}
        if "standard" in metrics:
            row["standard_acc"] = run_standard_acc(
                defense, classifier, clips, master_seed=config.seed)
        if "robust_star" in metrics and star_atk is not None:
            row["robust_acc_star"] = run_robust_acc_star(
                defense, classifier, clips,
                attack_config_from_json(star_atk.get("config", {})),
                master_seed=config.seed,
                surrogate=surrogate if star_atk["mode"] == "transfer" else None,
                label=star_atk["label"])
        if "robust" in metrics and adapt_atk is not None:
            mode = "bpda" if adapt_atk["mode"] == "bpda" else "eot+bpda"
            row["robust_acc"] = run_robust_acc(
                defense, classifier, clips,
                attack_config_from_json(adapt_atk.get("config", {})),
                mode, master_seed=config.seed, label=adapt_atk["label"])
        rows.append(row)

    return {
        "schema_version": SCHEMA_VERSION,
        "kind": "ablation",
        "knob": knob,
        "config": config.to_json(),
        "clip_ids": [c.clip_id for c in clips],
        "rows": rows,
        "timing": {"total_seconds": round(time.monotonic() - t_start, 3)},
    }


# --- persistence -----------------------------------------------------------

def _atomic_write_text(text: str, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_results(report: dict, out_dir: str | os.PathLike,
                  name: str = "results.json") -> Path:
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    return _atomic_write_text(text, Path(out_dir) / name)


def write_summary_csv(report: dict, out_dir: str | os.PathLike,
                      name: str = "summary.csv") -> Path:
    """Flatten a report into the grid CSV (one row per defense or sweep point)."""
    import io

    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    fmt = lambda v: "" if v is None else f"{v:.4f}"
    if report.get("kind") == "matrix":
        cols = report["columns"]
        w.writerow(["defense", "clean", *cols, "average", "seconds_per_clip"])
        for label, row in report["rows"].items():
            accs = {**row["robust_acc_star"], **row["robust_acc"]}
            w.writerow([label, fmt(row["standard_acc"]),
                        *[fmt(accs.get(c)) for c in cols],
                        fmt(row["average"]), f"{row['seconds_per_clip']:.3f}"])
    elif report.get("kind") == "ablation":
        w.writerow(["variant", "standard_acc", "robust_acc_star", "robust_acc"])
        for row in report["rows"]:
            w.writerow([row["label"], fmt(row["standard_acc"]),
                        fmt(row["robust_acc_star"]), fmt(row["robust_acc"])])
    else:
        raise ConfigError(f"cannot summarize report kind {report.get('kind')!r}")
    return _atomic_write_text(buf.getvalue(), Path(out_dir) / name)
