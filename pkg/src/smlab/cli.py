"""Command-line surface: generate | train | experiment | probe | plot.

Seed policy: one ``--seed`` value drives everything.  ``generate`` and
``train`` use it directly; ``experiment`` gives trial ``i`` the seed
``seed + i``, and every trial derives its split/masking/init/shuffle
streams from its own seed with fixed spawn keys.  Flag values override
config-file values, which override defaults; the fully resolved
configuration is always written next to the outputs.

Exit status is nonzero exactly when a command fails; the error line names
the component that raised.
"""

import argparse
import dataclasses
import json
import os
import sys
from collections import Counter

import numpy as np

from . import checkpoint as ck
from . import experiment as ex
from . import model as M
from . import plotting
from . import scenario as sc


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

@dataclasses.dataclass
class RunConfig:
    """Fully resolved settings for a run; serialized beside outputs."""

    seed: int = 0
    n_trials: int = 6
    workers: int = 1
    scenario: sc.ScenarioConfig = dataclasses.field(
        default_factory=sc.ScenarioConfig
    )
    model: M.ModelConfig = dataclasses.field(default_factory=M.ModelConfig)
    train: ex.TrainConfig = dataclasses.field(default_factory=ex.TrainConfig)

    def to_dict(self):
        return {
            "seed": self.seed,
            "n_trials": self.n_trials,
            "workers": self.workers,
            "scenario": self.scenario.to_dict(),
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        return dataclasses.replace(
            cfg,
            seed=int(d.get("seed", cfg.seed)),
            n_trials=int(d.get("n_trials", cfg.n_trials)),
            workers=int(d.get("workers", cfg.workers)),
            scenario=(sc.ScenarioConfig.from_dict(d["scenario"])
                      if "scenario" in d else cfg.scenario),
            model=(M.ModelConfig.from_dict(d["model"])
                   if "model" in d else cfg.model),
            train=(ex.TrainConfig.from_dict(d["train"])
                   if "train" in d else cfg.train),
        )


def load_run_config(path):
    with open(path) as fh:
        return RunConfig.from_dict(json.load(fh))


def save_run_config(config, path):
    with open(path, "w") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def resolve_config(args):
    """Defaults, then the --config file, then explicit flags."""
    config = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        config = dataclasses.replace(config, seed=args.seed)
    if getattr(args, "workers", None) is not None:
        config = dataclasses.replace(config, workers=args.workers)
    if getattr(args, "trials", None) is not None:
        config = dataclasses.replace(config, n_trials=args.trials)

    train = config.train
    if getattr(args, "schedule", None) is not None:
        parts = tuple(int(p) for p in args.schedule.split(",") if p)
        train = dataclasses.replace(train, schedule=parts)
    if getattr(args, "epochs", None) is not None:
        kept = tuple(e for e in train.schedule if e < args.epochs)
        train = dataclasses.replace(train, schedule=kept + (args.epochs,))
    if getattr(args, "remask_per_epoch", None) is not None:
        train = dataclasses.replace(train,
                                    remask_per_epoch=args.remask_per_epoch)
    if getattr(args, "lr", None) is not None:
        train = dataclasses.replace(train, lr=args.lr)
    if train is not config.train:
        config = dataclasses.replace(config, train=train)
    return config


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_generate(args):
    """Write the enumeration stats, the 470-chunk sample, and the split."""
    config = resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)

    universe = sc.enumerate_chunks(config.scenario)
    split = sc.sample_split(universe, config.seed, config.scenario)
    sample = list(split.train) + list(split.test)

    sc.write_chunks(os.path.join(out, "sample.jsonl"), sample,
                    config.seed, config.scenario)
    sc.write_chunks(os.path.join(out, "train.jsonl"), split.train,
                    config.seed, config.scenario)
    sc.write_chunks(os.path.join(out, "test.jsonl"), split.test,
                    config.seed, config.scenario)
    save_run_config(config, os.path.join(out, "config.json"))

    particles = sc.particle_occurrences(universe)
    two = [c for c in universe if c.prev is not None and c.cur is not None]
    qtypes = Counter(q.qtype for q in ex.build_questions(two, config.scenario))
    ratio = particles["ne"] / particles["yo"]
    stats = [
        f"universe size: {len(universe)}",
        f"particle occurrences: ne={particles['ne']} yo={particles['yo']} "
        f"(ne:yo = {ratio:.4f})",
        "question types over two-utterance chunks: "
        + " ".join(f"{ex.QTYPE_NAMES[q]}={qtypes[q]}" for q in (1, 2, 3)),
        f"sampled chunks: {len(sample)} "
        f"(train {len(split.train)} / test {len(split.test)})",
        f"config fingerprint: {split.fingerprint}",
    ]
    with open(os.path.join(out, "stats.txt"), "w") as fh:
        fh.write("\n".join(stats) + "\n")
    for line in stats:
        print(line)


def cmd_train(args):
    """Train one model on the split for this seed; save a checkpoint."""
    config = resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    save_run_config(config, os.path.join(out, "config.json"))

    result_state = ex.TrialState(seed=config.seed)
    for checkpoint in config.train.schedule:
        result_state = ex.advance_trial(
            result_state, config.model, config.train, config.scenario,
            checkpoint,
        )
        point = result_state.points[-1]
        print(f"epoch {checkpoint}: "
              + ex._format_accs(point.accuracies), flush=True)

    model, adam = ex.rebuild_trial(result_state, config.model, config.train)
    path = os.path.join(out, "model.ckpt")
    ck.save_checkpoint(model, adam, path)
    print(f"checkpoint written to {path}")


def _holdout_paths(out):
    return {
        "config": os.path.join(out, "config.json"),
        "state": os.path.join(out, "run_state.json"),
        "curves": os.path.join(out, "curves.csv"),
        "confusion": os.path.join(out, "confusion.csv"),
        "phases": os.path.join(out, "phases.txt"),
        "svg": os.path.join(out, "curve.svg"),
    }


def _trial_ckpt(out, index, label):
    return os.path.join(out, f"trial{index}_{label}.ckpt")


def _persist_states(out, config, fingerprint):
    """Checkpoint-boundary callback: per-trial model files plus a JSON
    record of curve progress, enough to resume the run."""

    def callback(states, checkpoint):
        for i, state in enumerate(states):
            model, adam = ex.rebuild_trial(state, config.model, config.train)
            ck.save_checkpoint(model, adam, _trial_ckpt(out, i, "latest"))
        record = {
            "fingerprint": fingerprint,
            "epoch": checkpoint,
            "trials": [_state_to_json(s) for s in states],
        }
        tmp = os.path.join(out, "run_state.json.tmp")
        with open(tmp, "w") as fh:
            json.dump(record, fh)
        os.replace(tmp, os.path.join(out, "run_state.json"))

    return callback


def _state_to_json(state):
    return {
        "seed": state.seed,
        "epoch": state.epoch,
        "question_counts": {str(k): v for k, v in
                            (state.question_counts or {}).items()},
        "split_fingerprint": state.split_fingerprint,
        "points": [
            {
                "epoch": p.epoch,
                "accuracies": {str(k): v for k, v in p.accuracies.items()},
                "confusion": {str(k): dict(c) for k, c in p.confusion.items()},
            }
            for p in state.points
        ],
    }


def _state_from_json(d, params, adam):
    return ex.TrialState(
        seed=d["seed"],
        epoch=d["epoch"],
        params=params,
        adam=adam,
        points=[
            ex.CurvePoint(
                p["epoch"],
                {int(k): v for k, v in p["accuracies"].items()},
                {int(k): Counter(c) for k, c in p["confusion"].items()},
            )
            for p in d["points"]
        ],
        question_counts={int(k): v for k, v in d["question_counts"].items()},
        split_fingerprint=d["split_fingerprint"],
    )


def _load_resume_states(out, config, fingerprint):
    path = os.path.join(out, "run_state.json")
    if not os.path.exists(path):
        return None
    with open(path) as fh:
        record = json.load(fh)
    if record.get("fingerprint") != fingerprint:
        print("existing run_state.json belongs to a different config; "
              "starting fresh", flush=True)
        return None
    states = []
    for i, entry in enumerate(record["trials"]):
        model, adam = ck.load_checkpoint(_trial_ckpt(out, i, "latest"),
                                         expect_config=config.model)
        states.append(
            _state_from_json(entry, {k: p.data for k, p in model.params.items()},
                             adam.state())
        )
    print(f"resuming from epoch {record['epoch']}", flush=True)
    return states


def cmd_experiment(args):
    """Run the repeated holdout and write every artifact of the run."""
    config = resolve_config(args)
    out = args.out
    os.makedirs(out, exist_ok=True)
    paths = _holdout_paths(out)
    save_run_config(config, paths["config"])

    fingerprint = ex.run_fingerprint(config.model, config.train,
                                     config.scenario)
    initial = None if args.fresh else _load_resume_states(out, config,
                                                          fingerprint)
    result = ex.run_holdout(
        base_seed=config.seed,
        n_trials=config.n_trials,
        model_config=config.model,
        train_config=config.train,
        scenario_config=config.scenario,
        workers=config.workers,
        progress=lambda msg: print(msg, flush=True),
        on_checkpoint=_persist_states(out, config, fingerprint),
        initial_states=initial,
    )

    for i in range(config.n_trials):
        latest = _trial_ckpt(out, i, "latest")
        if os.path.exists(latest):
            os.replace(latest, _trial_ckpt(out, i, "final"))
    ex.write_curves_csv(paths["curves"], result)
    ex.write_confusion_csv(paths["confusion"], result)
    ex.write_phase_report(paths["phases"], result)
    plotting.write_curves_svg(
        paths["svg"],
        plotting.curve_from_mean_points(result.mean_curve),
        note=f"seed={result.base_seed} fingerprint={result.fingerprint}",
    )
    ratio = result.qtype_ratio()
    print("question-type ratio: " + ":".join(f"{r:.3f}" for r in ratio))
    print(f"artifacts written to {out}")


def cmd_probe(args):
    """Load a checkpoint, mask one position of a chunk record, and report
    predictions plus attention maps."""
    model, _ = ck.load_checkpoint(args.checkpoint)
    config = resolve_config(args)
    vocab = sc.build_vocabulary(config.scenario)

    if args.record.startswith("@"):
        with open(args.record[1:]) as fh:
            record = json.loads(fh.readline())
    else:
        record = json.loads(args.record)
    chunk = sc.record_to_chunk(record, config.scenario)
    ids, slots = sc.encode_chunk(chunk, vocab)
    position = args.mask_position
    if not 0 <= position < sc.SEQ_LEN:
        raise ValueError(
            f"mask position {position} outside the {sc.SEQ_LEN}-token layout"
        )
    masked = ids.copy()
    masked[position] = vocab.mask_id
    example = sc.MaskedExample(
        masked, slots, np.array([position], dtype=np.int64),
        np.array([ids[position]], dtype=np.int64),
    )

    ranking = M.predict_masked(model, example)[0]
    hidden, maps = M.encode(model, masked, slots)
    logits = M.mlm_logits(model, hidden).data[position]
    print(f"top-{args.top_k} at position {position} "
          f"(original {vocab.token(int(ids[position]))}):")
    for rank in range(args.top_k):
        tok = int(ranking[rank])
        print(f"  {rank + 1}. {vocab.token(tok)}  logit={logits[tok]:.4f}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "attention.csv")
        with open(path, "w") as fh:
            fh.write("layer,head,from_pos,to_pos,weight\n")
            for layer_idx, layer in enumerate(maps.layers):
                heads, s, _ = layer.shape
                for h in range(heads):
                    for i in range(s):
                        for j in range(s):
                            fh.write(f"{layer_idx},{h},{i},{j},"
                                     f"{layer[h, i, j]!r}\n")
        print(f"attention maps written to {path}")


def cmd_plot(args):
    """Re-render the accuracy SVG from a curves CSV."""
    note = ""
    curve = []
    with open(args.curves) as fh:
        for line in fh:
            line = line.strip()
            if line.startswith("#"):
                note = line.lstrip("# ")
                continue
            if not line or line.startswith("epoch,"):
                continue
            epoch, trial, a1, a2, a3 = line.split(",")
            if trial != "mean":
                continue
            curve.append(
                (int(epoch),
                 {q: (float(v) if v else None)
                  for q, v in zip((1, 2, 3), (a1, a2, a3))})
            )
    plotting.write_curves_svg(args.out, curve, note=note)
    print(f"plot written to {args.out}")


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--seed", type=int, help="base seed (default 0)")
    if out_required:
        p.add_argument("--out", required=True, help="output directory")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="smlab",
        description="masked-token learning experiments on a closed-world "
                    "caregiver scenario",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="enumerate, sample, and split chunks")
    _add_common(p)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train one model and save a checkpoint")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="train to this final epoch")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--schedule", help="comma-separated checkpoint epochs")
    p.add_argument("--remask-per-epoch",
                   action=argparse.BooleanOptionalAction,
                   help="draw fresh maskings every epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment",
                       help="repeated-holdout learning-curve experiment")
    _add_common(p)
    p.add_argument("--epochs", type=int, help="train to this final epoch")
    p.add_argument("--lr", type=float, help="learning rate")
    p.add_argument("--workers", type=int, help="concurrent trial processes")
    p.add_argument("--trials", type=int, help="number of holdout trials")
    p.add_argument("--schedule", help="comma-separated checkpoint epochs")
    p.add_argument("--remask-per-epoch",
                   action=argparse.BooleanOptionalAction,
                   help="draw fresh maskings every epoch")
    p.add_argument("--fresh", action="store_true",
                   help="ignore any resumable state in the out directory")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("probe",
                       help="inspect predictions and attention for one input")
    p.add_argument("--config", help="run config JSON file")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    p.add_argument("--checkpoint", required=True, help="model checkpoint file")
    p.add_argument("--record", required=True,
                   help="chunk record JSON (or @file with one record per line)")
    p.add_argument("--mask-position", type=int, required=True)
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", help="directory for the attention CSV")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("plot", help="render the accuracy SVG from curves.csv")
    p.add_argument("--curves", required=True, help="curves CSV file")
    p.add_argument("--out", required=True, help="output SVG file")
    p.set_defaults(func=cmd_plot)

    return parser


def _component_of(exc):
    module = type(exc).__module__
    if module.startswith("smlab."):
        return module.split(".", 1)[1]
    return type(exc).__name__


def entry(argv=None):
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except Exception as exc:  # surface the failing component, exit nonzero
        print(f"smlab {args.command}: error in {_component_of(exc)}: {exc}",
              file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(entry())
