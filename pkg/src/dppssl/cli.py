"""Command-line entry point: generate, train, evaluate, analyze.

Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 numerical
failure (non-finite loss), 5 malformed metrics log.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .data import CorpusError, GeneratorConfigError, generate_corpus, load_corpus, save_corpus
from .experiments import c_levels
from .evaluation import (
    TrialScoreSet,
    all_pair_trials,
    cluster_purity,
    compute_eer,
    diversity_report,
    pair_accuracy,
    read_trials_csv,
    verification_scores,
    write_scores_csv,
)
from .model import CheckpointError, EncoderParams, load_bundle, load_checkpoint, save_bundle, save_checkpoint
from .numerics import NonFiniteError, Tensor
from .sampling import ClusterPositives, SelfPositives
from .training import (
    TrainConfigError,
    TrainingDiverged,
    cluster_multimodal,
    reference_embeddings,
    train_mcl,
    train_mcl_dpp,
    train_reference_encoder,
    train_stage2,
)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_LOG = 2, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _global_flags(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", metavar="PATH", default=d, help="key = value config file")
    p.add_argument("--seed", type=int, metavar="U64", default=d, help="global seed")
    p.add_argument("--run-dir", metavar="PATH", default=d, help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", default=argparse.SUPPRESS if suppress else [],
                   help="override one config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dppssl", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", help="write a synthetic corpus file")
    _global_flags(g, suppress=True)
    g.add_argument("--out", required=True, metavar="PATH", help="corpus file to write")
    g.add_argument("--split", default="train", choices=["train", "validation", "test", "reference"])

    t = sub.add_parser("train", help="train MCL, MCL-DPP or MCL-DPP-C")
    _global_flags(t, suppress=True)
    t.add_argument("mode", choices=["mcl", "mcl-dpp", "mcl-dpp-c"])
    t.add_argument("--corpus", required=True, metavar="PATH", help="training corpus file")
    t.add_argument("--stage-one", metavar="CKPT", help="stage-one model checkpoint (mcl-dpp-c)")
    t.add_argument("--run-stage-one", action="store_true", help="run MCL-DPP first (mcl-dpp-c)")
    t.add_argument("--reference", metavar="CKPT", help="reference encoder checkpoint for diversity")
    t.add_argument("--resume", metavar="CKPT", help="resume from a full training-state checkpoint")
    t.add_argument("--oracle-labels", action="store_true",
                   help="stage two on ground-truth labels (supervised topline)")

    e = sub.add_parser("evaluate", help="score trials and write a report")
    _global_flags(e, suppress=True)
    e.add_argument("--checkpoint", required=True, metavar="CKPT")
    e.add_argument("--corpus", required=True, metavar="PATH")
    e.add_argument("--trials", metavar="CSV", help="clip_a,clip_b,is_target (default: all pairs)")
    e.add_argument("--modality", default="S+F", choices=["S", "F", "S+F"], help="modality for scores.csv")
    e.add_argument("--reference", metavar="CKPT", help="reference encoder checkpoint for diversity")

    a = sub.add_parser("analyze", help="turn a metrics log into plot-ready CSVs")
    _global_flags(a, suppress=True)
    return parser


def _overrides(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(EXIT_CONFIG, f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _load_config(args):
    overrides = _overrides(args.set)
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    try:
        return cfgmod.load(args.config, overrides)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"cannot read config: {exc}") from exc
    except (cfgmod.ConfigError, TrainConfigError, GeneratorConfigError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


@contextmanager
def _locked(run_dir: Path):
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise CliError(EXIT_IO, f"{run_dir} is locked by another process ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield run_dir
    finally:
        lock.unlink(missing_ok=True)


def _require_run_dir(args) -> Path:
    if not args.run_dir:
        raise CliError(EXIT_CONFIG, "--run-dir is required")
    return Path(args.run_dir)


# ---------------------------------------------------------------------------
# commands


def cmd_generate(args) -> int:
    run, resolved = _load_config(args)
    corpus = generate_corpus(run.generator, args.split)
    save_corpus(corpus, args.out)
    print(f"N={corpus.N} G={corpus.num_speakers} speech_dim={run.generator.speech_dim} "
          f"face_dim={run.generator.face_dim} split={args.split} -> {args.out}")
    return 0


def _reference_encoder(run, corpus, path) -> EncoderParams:
    if path:
        arrays, _ = load_checkpoint(path)
        layers = []
        k = 0
        while f"{k}.weight" in arrays:
            layers.append((Tensor(arrays[f"{k}.weight"]), Tensor(arrays[f"{k}.bias"])))
            k += 1
        if not layers:
            raise CheckpointError(f"{path}: not a reference encoder checkpoint")
        return EncoderParams(layers)
    ref_corpus = generate_corpus(corpus.config, "reference")
    # fixed architecture and seed so D is comparable across runs
    return train_reference_encoder(ref_corpus, epochs=run.reference_epochs)


def _save_reference(path: Path, enc: EncoderParams) -> None:
    tensors = {}
    for k, (w, b) in enumerate(enc.layers):
        tensors[f"{k}.weight"] = w.data
        tensors[f"{k}.bias"] = b.data
    save_checkpoint(path, tensors, {"kind": "reference_encoder"})


def cmd_train(args) -> int:
    run, resolved = _load_config(args)
    run_dir = _require_run_dir(args)
    if args.mode == "mcl-dpp-c" and not (args.stage_one or args.run_stage_one):
        raise CliError(EXIT_CONFIG, "mcl-dpp-c needs a stage-one model: pass --stage-one CKPT or --run-stage-one")
    corpus = load_corpus(args.corpus)
    tc = run.train_config()
    with _locked(run_dir):
        (run_dir / "config.txt").write_text(cfgmod.dump(resolved), encoding="utf-8")
        validation = generate_corpus(corpus.config, "validation")
        ref_enc = _reference_encoder(run, corpus, args.reference)
        _save_reference(run_dir / "reference.ckpt", ref_enc)
        ref = reference_embeddings(ref_enc, corpus)
        try:
            if args.mode == "mcl":
                result = train_mcl(corpus, tc, validation, ref, run_dir, args.resume)
            elif args.mode == "mcl-dpp":
                result = train_mcl_dpp(corpus, tc, validation, ref, run_dir, args.resume)
            else:
                stage_dir = run_dir / "stage2"
                stage_dir.mkdir(exist_ok=True)
                if args.stage_one:
                    bundle, meta = load_bundle(args.stage_one)
                    bundle.extra = {"final_C": meta.get("final_C")}
                else:
                    one_dir = run_dir / "stage1"
                    one_dir.mkdir(exist_ok=True)
                    first = train_mcl_dpp(corpus, tc, validation, ref, one_dir)
                    save_bundle(one_dir / "model.ckpt", first.bundle, first.bundle.extra)
                    bundle = first.bundle
                labels = corpus.speaker_ids if args.oracle_labels else None
                result = train_stage2(corpus, bundle, run.stage2, tc, validation, labels,
                                      stage_dir, args.resume)
                (run_dir / "metrics.jsonl").write_bytes((stage_dir / "metrics.jsonl").read_bytes())
        except TrainingDiverged as exc:
            raise CliError(EXIT_NUMERIC, f"training diverged at epoch {exc.epoch}") from exc
        save_bundle(run_dir / "model.ckpt", result.bundle, result.bundle.extra)
    best = result.log[result.best_epoch]
    print(f"{args.mode}: {len(result.log)} epochs, best epoch {result.best_epoch}, "
          f"val EER S={best['val_eer_s']:.4f}, final C={result.final_C}")
    return 0


def cmd_evaluate(args) -> int:
    run, resolved = _load_config(args)
    bundle, meta = load_bundle(args.checkpoint)
    corpus = load_corpus(args.corpus)
    trials = read_trials_csv(args.trials) if args.trials else all_pair_trials(corpus.speaker_ids)
    scores = verification_scores(bundle, corpus, trials, run.train.sampling.face_aug, run.train.eval_seed)
    target = scores["is_target"]
    report = {f"eer_{k}": compute_eer(TrialScoreSet.from_labels(scores[m], target))
              for k, m in (("s", "S"), ("f", "F"), ("sf", "S+F"))}
    C = meta.get("final_C")
    if C is None or C >= corpus.N:
        assignment_labels = np.arange(corpus.N)
        sets = SelfPositives(corpus.N)
    else:
        assignment_labels = cluster_multimodal(corpus, bundle, int(C), run.seed).labels
        sets = ClusterPositives(assignment_labels)
    ref = reference_embeddings(_reference_encoder(run, corpus, args.reference), corpus)
    dr = diversity_report(sets, ref)
    report.update(D=dr.D, n_plus=dr.n_plus, pair_accuracy=pair_accuracy(sets, corpus.speaker_ids),
                  purity=cluster_purity(assignment_labels, corpus.speaker_ids))
    out = Path(args.run_dir) if args.run_dir else Path(".")
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    write_scores_csv(out / "scores.csv", scores["clip_a"], scores["clip_b"], scores[args.modality])
    print(json.dumps(report, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# analyze

_LOG_KEYS = ("stage", "epoch", "C", "train_loss", "val_eer_s", "val_eer_f", "val_eer_sf", "D", "pair_accuracy")


def read_metrics_log(path) -> list[dict]:
    records = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CliError(EXIT_LOG, f"{path}:{lineno}: not JSON ({exc.msg})") from None
            if not isinstance(rec, dict) or any(k not in rec for k in _LOG_KEYS):
                raise CliError(EXIT_LOG, f"{path}:{lineno}: missing metrics fields")
            if not isinstance(rec["epoch"], int):
                raise CliError(EXIT_LOG, f"{path}:{lineno}: epoch must be an integer")
            records.append(rec)
    if not records:
        raise CliError(EXIT_LOG, f"{path}: empty metrics log")
    return records


def _num(x) -> str:
    if x is None:
        return ""
    if isinstance(x, float):
        return format(x, ".17g")
    return str(x)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(x) for x in row])


def analyze(records: list[dict], out_dir: Path) -> None:
    _write_csv(out_dir / "d_vs_c.csv", ["C", "epochs", "D"],
               c_levels(records, "D"))
    _write_csv(out_dir / "accuracy_vs_c.csv", ["C", "epochs", "pair_accuracy"],
               c_levels(records, "pair_accuracy"))
    _write_csv(out_dir / "eer_vs_epoch.csv",
               ["stage", "epoch", "C", "val_eer_s", "val_eer_f", "val_eer_sf"],
               [[r["stage"], r["epoch"], r["C"], r["val_eer_s"], r["val_eer_f"], r["val_eer_sf"]] for r in records])
    _write_csv(out_dir / "c_trajectory.csv", ["epoch", "C"],
               [[r["epoch"], r["C"]] for r in records if r["C"] is not None])


def cmd_analyze(args) -> int:
    run_dir = _require_run_dir(args)
    log = run_dir / "metrics.jsonl"
    if not log.exists():
        raise CliError(EXIT_IO, f"{log} not found")
    analyze(read_metrics_log(log), run_dir)
    print(f"wrote analysis CSVs to {run_dir}")
    return 0


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate, "analyze": cmd_analyze}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except CliError as exc:
        print(f"dppssl: {exc}", file=sys.stderr)
        return exc.code
    except (cfgmod.ConfigError, TrainConfigError, GeneratorConfigError) as exc:
        print(f"dppssl: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (NonFiniteError, TrainingDiverged) as exc:
        print(f"dppssl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CorpusError, CheckpointError) as exc:
        print(f"dppssl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
