"""Command-line surface: data synthesis, training, evaluation, gradient
self-check, and visualization.

Every run resolves its configuration (file, then --set overrides), writes
the resolved snapshot into a per-run directory, and puts all outputs next
to it.  Exit codes: 0 success, 2 config error, 3 data error, 4 numeric
failure (divergence or a failed gradient check).
"""
from __future__ import annotations

import argparse
import datetime as _dt
import os
import sys

import numpy as np

from . import evaluate, viz
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import (
    ConfigError,
    apply_overrides,
    load_config_file,
    section,
    write_snapshot,
)
from .data import (
    DataError,
    generate_synthetic,
    load_corpus,
    normalize,
    save_corpus,
    split,
)
from .gradcheck import run_gradcheck
from .tensor import NumericError
from .training import TrainConfig, train_joint, train_resynthesis

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

RECOGNIZER_NOTE = ("recognizer body: dilated temporal convolution stack "
                   "(no recurrent layers)")


def _resolve_config(args) -> dict:
    table = load_config_file(args.config) if args.config else {}
    return apply_overrides(table, args.set or [])


def _make_run_dir(args, command: str) -> str:
    if args.run_dir:
        os.makedirs(args.run_dir, exist_ok=True)
        return args.run_dir
    base = args.out or "runs"
    os.makedirs(base, exist_ok=True)
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%d-%H%M%S")
    candidate = os.path.join(base, f"{command}-{stamp}")
    suffix = 0
    while os.path.exists(candidate):
        suffix += 1
        candidate = os.path.join(base, f"{command}-{stamp}-{suffix}")
    os.makedirs(candidate)
    return candidate


def _train_config(table: dict) -> TrainConfig:
    try:
        return TrainConfig.from_dict(section(table, "train"))
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def _load_split_corpus(table: dict, channels: int):
    manifest = table.get("data.manifest")
    if not manifest:
        raise ConfigError("data.manifest is required")
    labels = table.get("data.labels")
    corpus = load_corpus(manifest, labels_path=labels, expect_channels=channels)
    ratio = float(table.get("data.split_ratio", 0.8))
    seed = int(table.get("data.split_seed", 0))
    return split(corpus, ratio=ratio, seed=seed)


def cmd_synth_data(args) -> int:
    table = _resolve_config(args)
    run_dir = _make_run_dir(args, "synth-data")
    cfg = section(table, "synth")
    corpus, truth = generate_synthetic(
        n_gestures=int(cfg.get("gestures", 8)),
        n_utterances=int(cfg.get("utterances", 200)),
        t_range=(int(cfg.get("t_min", 400)), int(cfg.get("t_max", 800))),
        noise=float(cfg.get("noise", 0.01)),
        seed=int(cfg.get("seed", 0)),
        channels=int(cfg.get("channels", 12)),
        kernel_len=int(cfg.get("kernel_len", 41)),
        mean_extra_gap=float(cfg.get("mean_extra_gap", 280.0)),
        kernel_scale=float(cfg.get("kernel_scale", 3.0)),
        with_labels=bool(cfg.get("with_labels", True)),
    )
    corpus_dir = os.path.join(run_dir, "corpus")
    manifest = save_corpus(corpus, corpus_dir)
    scores = {f"score/{k}": v for k, v in truth.scores.items()}
    np.savez(os.path.join(run_dir, "truth.npz"),
             dictionary=truth.dictionary, noise=np.array([truth.noise]),
             **scores)
    write_snapshot(table, os.path.join(run_dir, "config.resolved.cfg"))
    print(f"wrote {len(corpus)} utterances to {manifest}")
    print(f"planted sparseness: S1 >= {truth.min_s1:.4f}, S2 >= {truth.min_s2:.4f}")
    return EXIT_OK


def _run_training(args, task: str) -> int:
    table = dict(_resolve_config(args))
    table["train.task"] = task
    config = _train_config(table)
    train, _ = _load_split_corpus(table, config.channels)
    train_norm, stats = normalize(train)
    run_dir = _make_run_dir(args, f"train-{task}")
    write_snapshot(table, os.path.join(run_dir, "config.resolved.cfg"))
    metrics_path = os.path.join(run_dir, "metrics.csv")
    driver = train_resynthesis if task == "resynthesis" else train_joint
    result = driver(config, train_norm, stats, log_path=metrics_path)
    save_checkpoint(
        os.path.join(run_dir, "checkpoint.npz"), result.model, stats,
        config.to_dict(), recognizer=result.recognizer, alphabet=result.alphabet,
        metrics={"best_epoch": result.best_epoch, "best_metric": result.best_metric,
                 "skipped_utterances": result.skipped, "aborted": result.aborted})
    print(f"run dir: {run_dir}")
    if result.skipped:
        print(f"skipped {result.skipped} utterances with infeasible label lengths")
    if result.aborted:
        print(f"training aborted: {result.abort_reason}", file=sys.stderr)
        print("saved the last good checkpoint", file=sys.stderr)
        return EXIT_NUMERIC
    metric_name = "val rec %" if task == "resynthesis" else "val PER %"
    print(f"best epoch {result.best_epoch}: {metric_name} = {result.best_metric:.4f}")
    return EXIT_OK


def cmd_train_resynth(args) -> int:
    return _run_training(args, "resynthesis")


def cmd_train_joint(args) -> int:
    return _run_training(args, "joint")


def cmd_eval(args) -> int:
    table = dict(_resolve_config(args))
    if args.checkpoint:
        table["eval.checkpoint"] = args.checkpoint
    if args.manifest:
        table["data.manifest"] = args.manifest
    if args.labels:
        table["data.labels"] = args.labels
    ckpt_path = table.get("eval.checkpoint")
    if not ckpt_path:
        raise ConfigError("eval.checkpoint (or --checkpoint) is required")
    ckpt = load_checkpoint(ckpt_path)
    channels = ckpt.model.channels
    _, test = _load_split_corpus(table, channels)
    if ckpt.stats is None:
        raise ConfigError("checkpoint carries no normalization stats")
    test_norm, _ = normalize(test, ckpt.stats)

    run_dir = _make_run_dir(args, "eval")
    write_snapshot(table, os.path.join(run_dir, "config.resolved.cfg"))
    rec = evaluate.reconstruction_metrics(ckpt.model, test_norm)
    lines = [f"utterances evaluated: {len(test_norm)}",
             f"rec loss %: {rec['rec_pct']:.4f}",
             f"sparsity S1 %: {100 * rec['s1']:.4f}",
             f"sparsity S2 %: {100 * rec['s2']:.4f}",
             f"entropy: {rec['entropy']:.6f}"]
    report_rows = ["id,rec_pct,s1,s2,entropy"]
    for row in rec["rows"]:
        report_rows.append(f"{row['id']},{row['rec_pct']!r},{row['s1']!r},"
                           f"{row['s2']!r},{row['entropy']!r}")
    with open(os.path.join(run_dir, "reconstruction.csv"), "w") as fh:
        fh.write("\n".join(report_rows) + "\n")

    if ckpt.recognizer is not None:
        labeled = [u for u in test_norm if u.labels]
        if labeled:
            beam_width = int(table.get("eval.beam_width",
                                       ckpt.config.get("beam_width", 50)))
            greedy = evaluate.recognition_metrics(ckpt.model, ckpt.recognizer,
                                                  labeled, ckpt.alphabet)
            beam = evaluate.recognition_metrics(ckpt.model, ckpt.recognizer,
                                                labeled, ckpt.alphabet,
                                                beam_width=beam_width)
            lines += [f"PER % (greedy): {greedy['per']:.4f}",
                      f"PER-V % (greedy): {greedy['per_v']:.4f}",
                      f"PER % (beam {beam_width}): {beam['per']:.4f}",
                      f"PER-V % (beam {beam_width}): {beam['per_v']:.4f}",
                      f"note: {RECOGNIZER_NOTE}"]
            rows = [f"# {RECOGNIZER_NOTE}",
                    "utt_id,per,per_v,ref_len,edits,edits_merged"]
            for row in beam["rows"]:
                rows.append(f"{row['id']},{row['per']!r},{row['per_v']!r},"
                            f"{row['ref_len']},{row['edits']},{row['edits_merged']}")
            with open(os.path.join(run_dir, "recognition.csv"), "w") as fh:
                fh.write("\n".join(rows) + "\n")
    report_path = os.path.join(run_dir, "report.txt")
    with open(report_path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print("\n".join(lines))
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_viz(args) -> int:
    table = dict(_resolve_config(args))
    if args.checkpoint:
        table["eval.checkpoint"] = args.checkpoint
    if args.manifest:
        table["data.manifest"] = args.manifest
    if args.utterance:
        table["viz.utterance"] = args.utterance
    ckpt_path = table.get("eval.checkpoint")
    manifest = table.get("data.manifest")
    if not ckpt_path or not manifest:
        raise ConfigError("viz needs eval.checkpoint and data.manifest")
    ckpt = load_checkpoint(ckpt_path)
    corpus = load_corpus(manifest, expect_channels=ckpt.model.channels)
    utt_id = table.get("viz.utterance") or corpus[0].id
    matches = [u for u in corpus if u.id == utt_id]
    if not matches:
        raise DataError(f"utterance {utt_id!r} not in manifest")
    utt = matches[0]
    if ckpt.stats is None:
        raise ConfigError("checkpoint carries no normalization stats")
    (norm_utt,), _ = normalize([utt], ckpt.stats)

    run_dir = _make_run_dir(args, "viz")
    write_snapshot(table, os.path.join(run_dir, "config.resolved.cfg"))
    score, xhat = evaluate.score_utterance(ckpt.model, norm_utt.frames)
    matrix = score.activations.data
    rate = utt.sample_rate
    alignments = viz.load_alignments(args.alignment) if args.alignment else None

    viz.score_heatmap_csv(matrix, os.path.join(run_dir, "score.csv"))
    viz.score_heatmap_svg(matrix, rate, os.path.join(run_dir, "score.svg"),
                          alignments=alignments)
    top_k = int(table.get("viz.top_k", 4))
    chosen = viz.top_gestures(matrix, top_k)
    for d in chosen:
        viz.gesture_svg(ckpt.model.dictionary.data[:, :, d], rate,
                        os.path.join(run_dir, f"gesture_{d}.svg"),
                        title=f"gesture {d}")
    viz.overlay_svg(norm_utt.frames, xhat,
                    rate, os.path.join(run_dir, "overlay.svg"))
    print(f"utterance {utt.id}: wrote score.csv, score.svg, "
          f"{len(chosen)} gesture panels, overlay.svg")
    print(f"run dir: {run_dir}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    table = dict(_resolve_config(args))
    points = int(table.get("gradcheck.points", args.points))
    seed = int(table.get("gradcheck.seed", 0))
    rows = run_gradcheck(points=points, seed=seed)
    run_dir = _make_run_dir(args, "gradcheck")
    write_snapshot(table, os.path.join(run_dir, "config.resolved.cfg"))
    lines = ["item,max_rel_err,points,passed"]
    print(f"{'item':26s} {'max rel err':>12s}  result")
    for row in rows:
        print(f"{row.name:26s} {row.max_rel_err:12.3e}  "
              f"{'PASS' if row.passed else 'FAIL'}")
        lines.append(f"{row.name},{row.max_rel_err!r},{row.points},{row.passed}")
    with open(os.path.join(run_dir, "gradcheck.csv"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    print(f"run dir: {run_dir}")
    return EXIT_OK if all(r.passed for r in rows) else EXIT_NUMERIC


def _add_common(sub):
    sub.add_argument("--config", help="key = value config file")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="override a config value (repeatable)")
    sub.add_argument("--out", help="base directory for timestamped run dirs")
    sub.add_argument("--run-dir", help="exact run directory (no timestamp)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gestfactor",
        description="Convolutive sparse factorization of articulatory "
                    "kinematics into gestures and gestural scores.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="generate a synthetic corpus")
    _add_common(p)
    p.set_defaults(fn=cmd_synth_data)

    p = sub.add_parser("train-resynth", help="train the gesture autoencoder")
    _add_common(p)
    p.set_defaults(fn=cmd_train_resynth)

    p = sub.add_parser("train-joint",
                       help="train resynthesis + CTC phoneme recognition")
    _add_common(p)
    p.set_defaults(fn=cmd_train_joint)

    p = sub.add_parser("eval", help="score a checkpoint on a test manifest")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--labels")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("viz", help="emit score heatmap and gesture panels")
    _add_common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--utterance")
    p.add_argument("--alignment", help="optional 'label start end' file")
    p.set_defaults(fn=cmd_viz)

    p = sub.add_parser("gradcheck", help="finite-difference self-check")
    _add_common(p)
    p.add_argument("--points", type=int, default=100)
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
