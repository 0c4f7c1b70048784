"""Command line front end.

Every subcommand prints a short summary to stdout and writes its artifacts
under the requested output path.  The environment variable VIDEOPURE_SEED,
when set, overrides the master seed of any command that takes one.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

from .attacks import AttackConfig, ClassifierTarget, pgd
from .data import (DatasetManifest, LabeledClip, derive_seed, generate_dataset,
                   load_dataset, save_dataset)
from .errors import VideoPureError
from .harness import (ExperimentConfig, attack_config_from_json, run_ablation,
                      run_matrix, write_results, write_summary_csv)
from .models import (eval_accuracy, load_model, save_model, train_autoencoder,
                     train_classifier, train_epsilon_model)
from .schedule import make_linear_schedule


def _seed_override(seed: int) -> int:
    env = os.environ.get("VIDEOPURE_SEED")
    return int(env) if env else seed


def _load_clips(path: str):
    clips, manifest, _ = load_dataset(path)
    return clips, manifest


def cmd_gen_data(args) -> int:
    manifest = DatasetManifest(frames=args.frames, height=args.height,
                               width=args.width, seed=_seed_override(args.seed))
    clips = generate_dataset(manifest, args.clips_per_class, start_seed=args.start_seed)
    save_dataset(clips, args.out, manifest)
    print(f"wrote {len(clips)} clips ({manifest.num_classes} classes, "
          f"{manifest.frames}x{manifest.height}x{manifest.width}) -> {args.out}")
    return 0


def cmd_train_classifier(args) -> int:
    clips, _ = _load_clips(args.data)
    val = _load_clips(args.val_data)[0] if args.val_data else None
    codec = load_model(args.codec, "autoencoder")[0] if args.codec else None
    model, report = train_classifier(clips, epochs=args.epochs,
                                     seed=_seed_override(args.seed),
                                     val_clips=val, width=args.width,
                                     noise_aug=args.noise_aug,
                                     codec=codec, codec_noise=args.codec_noise)
    save_model(args.out, model, "classifier", extra=report.to_json())
    print(f"classifier: final loss {report.final_train_loss:.4f} "
          f"metrics {report.metrics} -> {args.out}")
    return 0


def cmd_train_diffusion(args) -> int:
    clips, _ = _load_clips(args.data)
    val = _load_clips(args.val_data)[0] if args.val_data else None
    codec = load_model(args.ae, "autoencoder")[0] if args.ae else None
    model, report = train_epsilon_model(clips, make_linear_schedule(),
                                        epochs=args.epochs,
                                        seed=_seed_override(args.seed),
                                        codec=codec, val_clips=val,
                                        base_width=args.base_width,
                                        z0_jitter=args.z0_jitter)
    save_model(args.out, model, "epsilon", extra=report.to_json())
    print(f"diffusion model: final loss {report.final_train_loss:.4f} "
          f"metrics {report.metrics} -> {args.out}")
    return 0


def cmd_train_ae(args) -> int:
    clips, _ = _load_clips(args.data)
    val = _load_clips(args.val_data)[0] if args.val_data else None
    model, report = train_autoencoder(clips, epochs=args.epochs,
                                      seed=_seed_override(args.seed), val_clips=val,
                                      latent_channels=args.latent_channels,
                                      width=args.width,
                                      spatial_stride=args.spatial_stride,
                                      noise_aug=args.noise_aug,
                                      input_noise=args.input_noise)
    save_model(args.out, model, "autoencoder", extra=report.to_json())
    print(f"autoencoder: final loss {report.final_train_loss:.6f} "
          f"metrics {report.metrics} -> {args.out}")
    return 0


def cmd_attack(args) -> int:
    clips, manifest = _load_clips(args.data)
    classifier, _ = load_model(args.classifier, "classifier")
    classifier.eval()
    atk_model = classifier
    if args.surrogate:
        atk_model, _ = load_model(args.surrogate, "classifier")
        atk_model.eval()
    cfg = AttackConfig(epsilon=args.epsilon, iterations=args.steps, norm=args.norm)
    seed = _seed_override(args.seed)

    adv_clips, n_clean, n_adv = [], 0, 0
    for clip in clips:
        cfg_i = dataclasses.replace(cfg, seed=derive_seed(seed, f"atk/{clip.clip_id}"))
        x_adv = pgd(clip.video, clip.label, ClassifierTarget(atk_model), cfg_i)
        adv_clips.append(dataclasses.replace(clip, video=x_adv))
        n_clean += eval_accuracy(classifier, [clip]) > 0.5
        n_adv += eval_accuracy(classifier, [adv_clips[-1]]) > 0.5
    save_dataset(adv_clips, args.out, manifest,
                 extra_meta={"attack": cfg.to_json(), "source": args.data})
    print(f"undefended accuracy: clean {n_clean / len(clips):.3f} "
          f"adversarial {n_adv / len(clips):.3f}; wrote {len(adv_clips)} clips -> {args.out}")
    return 0


def _load_config(args) -> ExperimentConfig:
    config = ExperimentConfig.load(args.config)
    if args.out_dir:
        config = dataclasses.replace(config, out_dir=args.out_dir)
    env = os.environ.get("VIDEOPURE_SEED")
    if env:
        config = dataclasses.replace(config, seed=int(env))
    return config


def _emit_plots_guarded(report: dict, out_dir: str) -> None:
    # plots render after the JSON/CSV are already on disk, so a matplotlib
    # failure costs the figures and nothing else
    try:
        from .plots import emit_plots

        for p in emit_plots(report, out_dir):
            print(f"plot: {p}")
    except Exception as exc:  # noqa: BLE001
        print(f"warning: plotting failed ({exc}); results are intact", file=sys.stderr)


def cmd_eval(args) -> int:
    config = _load_config(args)
    report = run_matrix(config)
    out = Path(config.out_dir)
    jpath = write_results(report, out)
    cpath = write_summary_csv(report, out)
    if not args.no_plots:
        _emit_plots_guarded(report, config.out_dir)
    print(cpath.read_text(), end="")
    print(f"results: {jpath}")
    return 0


def cmd_ablate(args) -> int:
    config = _load_config(args)
    values = json.loads(args.values) if args.values else None
    metrics = tuple(args.metrics.split(","))
    report = run_ablation(config, args.knob, values=values, metrics=metrics)
    out = Path(config.out_dir)
    jpath = write_results(report, out, name=f"ablation_{args.knob}.json")
    cpath = write_summary_csv(report, out, name=f"ablation_{args.knob}.csv")
    if not args.no_plots:
        _emit_plots_guarded(report, config.out_dir)
    print(cpath.read_text(), end="")
    print(f"results: {jpath}")
    return 0


def cmd_plot(args) -> int:
    from .plots import emit_plots

    out_dir = args.out_dir if args.out_dir else str(Path(args.results).parent)
    for p in emit_plots(args.results, out_dir):
        print(f"plot: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="videopure",
        description="Diffusion-based video purification lab: data, training, "
                    "attacks, and defense evaluation.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic moving-shape dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--clips-per-class", type=int, default=8)
    g.add_argument("--start-seed", type=int, default=0)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--frames", type=int, default=8)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=32)
    g.set_defaults(fn=cmd_gen_data)

    for name, fn in (("train-classifier", cmd_train_classifier),
                     ("train-diffusion", cmd_train_diffusion),
                     ("train-ae", cmd_train_ae)):
        t = sub.add_parser(name, help=f"{name.replace('-', ' ')} on a dataset")
        t.add_argument("--data", required=True)
        t.add_argument("--val-data", default=None)
        t.add_argument("--out", required=True)
        t.add_argument("--epochs", type=int, default=10)
        t.add_argument("--seed", type=int, default=0)
        if name == "train-classifier":
            t.add_argument("--width", type=int, default=16)
            t.add_argument("--noise-aug", type=float, default=0.0,
                           help="pixel-noise augmentation, relative to frame std")
            t.add_argument("--codec", default=None,
                           help="autoencoder checkpoint; train on round-tripped frames")
            t.add_argument("--codec-noise", type=float, default=0.3,
                           help="latent-noise amplitude for codec augmentation")
        if name == "train-diffusion":
            t.add_argument("--base-width", type=int, default=32)
            t.add_argument("--ae", default=None, help="autoencoder checkpoint for latent diffusion")
            t.add_argument("--z0-jitter", type=float, default=0.1,
                           help="latent jitter amplitude, relative to latent std")
        if name == "train-ae":
            t.add_argument("--latent-channels", type=int, default=16)
            t.add_argument("--width", type=int, default=32)
            t.add_argument("--spatial-stride", type=int, default=1)
            t.add_argument("--noise-aug", type=float, default=0.35,
                           help="latent-noise amplitude for the consistency loss")
            t.add_argument("--input-noise", type=float, default=0.06,
                           help="pixel-noise amplitude on encoder inputs")
        t.set_defaults(fn=fn)

    a = sub.add_parser("attack", help="craft adversarial clips against a classifier")
    a.add_argument("--data", required=True)
    a.add_argument("--classifier", required=True)
    a.add_argument("--surrogate", default=None, help="craft against this model instead")
    a.add_argument("--out", required=True)
    a.add_argument("--epsilon", type=float, default=4 / 255)
    a.add_argument("--steps", type=int, default=10)
    a.add_argument("--norm", choices=("linf", "l2"), default="linf")
    a.add_argument("--seed", type=int, default=0)
    a.set_defaults(fn=cmd_attack)

    e = sub.add_parser("eval", help="run the defense/attack evaluation grid")
    e.add_argument("--config", required=True, help="experiment config JSON")
    e.add_argument("--out-dir", default=None)
    e.add_argument("--no-plots", action="store_true")
    e.set_defaults(fn=cmd_eval)

    b = sub.add_parser("ablate", help="sweep one knob of the guided defense")
    b.add_argument("--config", required=True)
    b.add_argument("--knob", required=True,
                   choices=("t_star", "alpha_s", "single_step_k", "losses", "zt_replace"))
    b.add_argument("--values", default=None, help="JSON list overriding the sweep values")
    b.add_argument("--metrics", default="standard,robust")
    b.add_argument("--out-dir", default=None)
    b.add_argument("--no-plots", action="store_true")
    b.set_defaults(fn=cmd_ablate)

    pl = sub.add_parser("plot", help="render figures from a results JSON")
    pl.add_argument("--results", required=True)
    pl.add_argument("--out-dir", default=None)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except VideoPureError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
