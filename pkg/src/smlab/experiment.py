"""Fill-in test protocol: questions, labeled answers, training trials,
repeated holdout, phase detection, and confusion analysis.

A trial trains one model on one 440/30 split and is evaluated at scheduled
epoch checkpoints.  ``run_holdout`` advances all trials in lockstep from
checkpoint to checkpoint so the averaged curve always holds one value per
trial per cell, and stops early once the averaged accuracies clear the exit
threshold at two consecutive checkpoints.  Every piece of randomness is
derived from the trial seed with a per-purpose (and per-epoch) spawn key,
which makes a trial resumable from any checkpoint boundary and makes
concurrent execution bit-identical to sequential execution.
"""

import dataclasses
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from threadpoolctl import threadpool_limits

from . import model as M
from . import scenario as sc
from .optim import Adam
from .rng import Rng

QTYPE_NAMES = {1: "i", 2: "ii", 3: "iii"}
DEFAULT_SCHEDULE = (1, 2, 4, 8, 10, 16, 32, 64, 128, 256, 512, 1024, 2048, 4096)


# ---------------------------------------------------------------------------
# Training configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for one trial; the last schedule entry is the final
    epoch."""

    lr: float = 1e-3
    batch_size: int = 64
    schedule: tuple = DEFAULT_SCHEDULE
    maskings_per_chunk: int = sc.MASKINGS_PER_CHUNK
    remask_per_epoch: bool = False
    early_exit: bool = True
    exit_threshold: float = 0.95
    exit_patience: int = 2

    def __post_init__(self):
        s = tuple(int(e) for e in self.schedule)
        object.__setattr__(self, "schedule", s)
        if not s:
            raise ValueError("schedule is empty")
        if s[0] < 1 or any(b <= a for a, b in zip(s, s[1:])):
            raise ValueError(f"schedule must be strictly increasing, got {s}")
        if s[-1] >= 8 and 8 not in s:
            raise ValueError("schedule must include epoch 8")
        if self.lr <= 0 or self.batch_size < 1 or self.maskings_per_chunk < 1:
            raise ValueError("lr, batch_size, maskings_per_chunk must be positive")
        if self.exit_patience < 1:
            raise ValueError("exit_patience must be at least 1")

    @property
    def final_epoch(self):
        return self.schedule[-1]

    def to_dict(self):
        return {
            "lr": self.lr,
            "batch_size": self.batch_size,
            "schedule": list(self.schedule),
            "maskings_per_chunk": self.maskings_per_chunk,
            "remask_per_epoch": self.remask_per_epoch,
            "early_exit": self.early_exit,
            "exit_threshold": self.exit_threshold,
            "exit_patience": self.exit_patience,
        }

    @classmethod
    def from_dict(cls, d):
        allowed = {f.name for f in dataclasses.fields(cls)}
        kwargs = {k: v for k, v in d.items() if k in allowed}
        if "schedule" in kwargs:
            kwargs["schedule"] = tuple(kwargs["schedule"])
        return cls(**kwargs)


def run_fingerprint(model_config, train_config, scenario_config=None):
    """Stable 16-hex-char digest of the full resolved configuration."""
    import hashlib
    import json

    scenario_config = scenario_config or sc.ScenarioConfig()
    blob = json.dumps(
        {
            "model": model_config.to_dict(),
            "train": train_config.to_dict(),
            "scenario": scenario_config.to_dict(),
        },
        sort_keys=True,
        separators=(",", ":"),
    )
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Questions and labeling
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class Question:
    """One fill-in test item: a particle position replaced by [MASK]."""

    chunk: sc.Chunk
    part: str  # "prev" or "cur"
    position: int
    token_ids: np.ndarray
    slot_ids: np.ndarray
    correct: frozenset  # subset of {"yo", "ne"}, non-empty
    qtype: int  # 1: only yo, 2: only ne, 3: both


def _qtype_of(correct):
    if correct == frozenset(("yo",)):
        return 1
    if correct == frozenset(("ne",)):
        return 2
    return 3


def _label_part(chunk, part, config):
    """Correct particle set for the prev or cur utterance of a chunk."""
    utt = getattr(chunk, part)
    content = sc.utterance_content(utt.surface)
    correct = set()
    for p in sc.PARTICLES:
        surface = f"{content}-{p}"
        if surface not in config.inventory:
            continue
        candidate = dataclasses.replace(
            chunk, **{part: sc.parse_utterance(surface, config.inventory)}
        )
        if not sc.consistency_check(candidate, config):
            correct.add(p)
    return frozenset(correct)


def label_question(question, config=None):
    """Recompute (correct set, qtype) from the question's source chunk by
    substituting each particle and checking inventory membership plus the
    consistency rules."""
    config = config or sc.ScenarioConfig()
    correct = _label_part(question.chunk, question.part, config)
    assert correct, "question from a consistent chunk lost both particles"
    return correct, _qtype_of(correct)


@lru_cache(maxsize=4)
def _universe_set(config):
    return frozenset(sc.enumerate_chunks(config))


def label_oracle_bruteforce(question, config=None):
    """Independent labeling: a particle is correct iff substituting it
    yields a chunk present in the exhaustively enumerated universe."""
    config = config or sc.ScenarioConfig()
    universe = _universe_set(config)
    chunk = question.chunk
    utt = getattr(chunk, question.part)
    content = sc.utterance_content(utt.surface)
    correct = set()
    for p in sc.PARTICLES:
        surface = f"{content}-{p}"
        if surface not in config.inventory:
            continue
        candidate = dataclasses.replace(
            chunk, **{question.part: sc.parse_utterance(surface, config.inventory)}
        )
        if candidate in universe:
            correct.add(p)
    return frozenset(correct)


def build_questions(chunks, config=None, vocab=None):
    """Two questions per two-utterance chunk: mask the prev particle, mask
    the cur particle."""
    config = config or sc.ScenarioConfig()
    vocab = vocab or sc.build_vocabulary(config)
    questions = []
    for chunk in chunks:
        if chunk.prev is None or chunk.cur is None:
            raise ValueError(
                "fill-in questions need two real utterances; got a chunk "
                f"with prev={chunk.prev!r} cur={chunk.cur!r}"
            )
        ids, slots = sc.encode_chunk(chunk, vocab)
        for part, offset in (("prev", 0), ("cur", sc.MAX_UTT_LEN)):
            utt = getattr(chunk, part)
            position = offset + len(utt.words) - 1
            masked = ids.copy()
            masked[position] = vocab.mask_id
            correct = _label_part(chunk, part, config)
            assert correct, "consistent chunk yielded an unanswerable question"
            questions.append(
                Question(chunk, part, position, masked, slots, correct,
                         _qtype_of(correct))
            )
    return questions


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalResult:
    """Per-qtype accuracy (None where no questions exist) plus the full
    multiset of predictions per qtype."""

    accuracies: dict  # {1: float|None, 2: ..., 3: ...}
    counts: dict  # {1: int, 2: int, 3: int}
    confusion: dict  # {qtype: Counter(token -> count)}


def evaluate(model, questions, vocab=None):
    """Answer every question with the model's full-vocabulary top-1 token.

    An answer is correct iff it is in the question's correct set.  Ties in
    the logits resolve to the lowest token id, matching the ranking order
    of the prediction head.
    """
    vocab = vocab or sc.build_vocabulary()
    if not questions:
        return EvalResult({q: None for q in QTYPE_NAMES},
                          {q: 0 for q in QTYPE_NAMES},
                          {q: Counter() for q in QTYPE_NAMES})
    tokens = np.stack([q.token_ids for q in questions])
    slots = np.stack([q.slot_ids for q in questions])
    hidden, _ = M.forward_hidden(model, tokens, slots)
    n, s, d = hidden.shape
    flat = hidden.data.reshape(n * s, d)
    rows = flat[np.arange(n) * s + np.array([q.position for q in questions])]
    logits = rows @ model.params["tok_emb"].data.T + model.params["out_bias"].data
    top1 = logits.argmax(axis=1)

    right = {q: 0 for q in QTYPE_NAMES}
    total = {q: 0 for q in QTYPE_NAMES}
    confusion = {q: Counter() for q in QTYPE_NAMES}
    for question, answer in zip(questions, top1):
        token = vocab.token(int(answer))
        total[question.qtype] += 1
        confusion[question.qtype][token] += 1
        if token in question.correct:
            right[question.qtype] += 1
    accuracies = {
        q: (right[q] / total[q] if total[q] else None) for q in QTYPE_NAMES
    }
    return EvalResult(accuracies, total, confusion)


# ---------------------------------------------------------------------------
# Trials
# ---------------------------------------------------------------------------

@dataclass
class CurvePoint:
    epoch: int
    accuracies: dict  # {qtype: float|None}
    confusion: dict = field(default_factory=dict)  # {qtype: Counter}


@dataclass
class TrialState:
    """Everything needed to resume a trial at an epoch boundary."""

    seed: int
    epoch: int = 0
    params: dict = None  # name -> ndarray, None before the first segment
    adam: dict = None
    points: list = field(default_factory=list)
    question_counts: dict = None
    split_fingerprint: str = ""


@dataclass
class TrialResult:
    seed: int
    points: list  # CurvePoint per scheduled checkpoint reached
    question_counts: dict
    split_fingerprint: str


def _trial_context(seed, train_config, scenario_config):
    """Deterministic per-trial data: vocab, split, questions, epoch pool."""
    config = scenario_config or sc.ScenarioConfig()
    vocab = sc.build_vocabulary(config)
    universe = sc.enumerate_chunks(config)
    split = sc.sample_split(universe, seed, config,
                            rng=Rng(seed).spawn("split"))
    questions = build_questions(split.test, config, vocab)
    return config, vocab, split, questions


def _epoch_examples(split, vocab, seed, epoch, train_config):
    """Masked examples for one epoch.  With remasking off, every epoch
    reuses the single pool drawn from the "mask" stream; with it on, each
    epoch draws a fresh pool from its own keyed stream."""
    if train_config.remask_per_epoch:
        rng = Rng(seed).spawn(f"mask{epoch}")
    else:
        rng = Rng(seed).spawn("mask")
    return sc.build_epoch(split.train, vocab, rng,
                          per_chunk=train_config.maskings_per_chunk,
                          expected_train=None)


def rebuild_trial(state, model_config, train_config):
    """Model and optimizer objects for a trial state (fresh when the state
    has not trained yet)."""
    from . import tensor as T

    if state.params is None:
        model = M.init_model(model_config, rng=Rng(state.seed).spawn("init"))
    else:
        params = {k: T.param(v) for k, v in state.params.items()}
        model = M.EncoderModel(model_config, params)
    adam = Adam(model.param_list(), lr=train_config.lr)
    if state.adam is not None:
        adam.load_state(state.adam)
    return model, adam


def advance_trial(state, model_config, train_config, scenario_config,
                  target_epoch):
    """Train a trial from its current epoch to ``target_epoch`` and evaluate.

    Pure function of its arguments; numeric work is pinned to one BLAS
    thread so results do not depend on where or alongside what it runs.
    """
    if target_epoch <= state.epoch:
        raise ValueError(
            f"target epoch {target_epoch} not past current {state.epoch}"
        )
    with threadpool_limits(limits=1):
        config, vocab, split, questions = _trial_context(
            state.seed, train_config, scenario_config
        )
        model, adam = rebuild_trial(state, model_config, train_config)
        examples = None
        for epoch in range(state.epoch + 1, target_epoch + 1):
            if examples is None or train_config.remask_per_epoch:
                examples = _epoch_examples(split, vocab, state.seed, epoch,
                                           train_config)
            order = Rng(state.seed).spawn(f"shuffle{epoch}").permutation(
                len(examples)
            )
            bs = train_config.batch_size
            for lo in range(0, len(order), bs):
                batch = [examples[i] for i in order[lo:lo + bs]]
                M.train_step(model, batch, adam)
        result = evaluate(model, questions, vocab)
        counts = dict(result.counts)
    return TrialState(
        seed=state.seed,
        epoch=target_epoch,
        params={k: p.data for k, p in model.params.items()},
        adam=adam.state(),
        points=state.points + [
            CurvePoint(target_epoch, result.accuracies, result.confusion)
        ],
        question_counts=counts,
        split_fingerprint=split.fingerprint,
    )


def _exit_streak(accuracies, threshold, streak):
    """Update the consecutive-checkpoint counter for the early-exit rule.
    Absent accuracies (no questions of that type) do not block the exit."""
    values = [v for v in accuracies.values() if v is not None]
    if values and all(v >= threshold for v in values):
        return streak + 1
    return 0


def run_trial(seed, model_config=None, train_config=None,
              scenario_config=None, progress=None):
    """One full training trial, evaluated at every scheduled checkpoint.

    Early exit (if enabled) uses this trial's own accuracies: once they
    hold at or above the exit threshold for ``exit_patience`` consecutive
    checkpoints, later checkpoints are skipped.
    """
    model_config = model_config or M.ModelConfig()
    train_config = train_config or TrainConfig()
    state = TrialState(seed=seed)
    streak = 0
    for checkpoint in train_config.schedule:
        state = advance_trial(state, model_config, train_config,
                              scenario_config, checkpoint)
        point = state.points[-1]
        if progress:
            progress(f"trial {seed}: epoch {checkpoint} "
                     + _format_accs(point.accuracies))
        streak = _exit_streak(point.accuracies, train_config.exit_threshold,
                              streak)
        if train_config.early_exit and streak >= train_config.exit_patience:
            break
    return TrialResult(seed, state.points, state.question_counts,
                       state.split_fingerprint)


# ---------------------------------------------------------------------------
# Repeated holdout
# ---------------------------------------------------------------------------

@dataclass
class MeanPoint:
    epoch: int
    accuracies: dict  # {qtype: float|None}


@dataclass
class HoldoutResult:
    base_seed: int
    fingerprint: str
    trials: list  # TrialResult, ordered by trial index
    mean_curve: list  # MeanPoint per checkpoint reached by all trials
    qtype_counts: dict  # {qtype: summed question count across trials}

    def qtype_ratio(self):
        """Question-type counts normalized by the type-i count."""
        base = self.qtype_counts[1] or 1
        return tuple(self.qtype_counts[q] / base for q in QTYPE_NAMES)


def _mean_accuracies(points):
    """Arithmetic mean per qtype across trial points, skipping absent
    cells; None when absent everywhere."""
    out = {}
    for q in QTYPE_NAMES:
        values = [p.accuracies[q] for p in points if p.accuracies[q] is not None]
        out[q] = sum(values) / len(values) if values else None
    return out


def _format_accs(accs):
    return " ".join(
        f"{QTYPE_NAMES[q]}={accs[q]:.3f}" if accs[q] is not None
        else f"{QTYPE_NAMES[q]}=--"
        for q in QTYPE_NAMES
    )


def run_holdout(base_seed=0, n_trials=6, model_config=None, train_config=None,
                scenario_config=None, workers=1, progress=None,
                on_checkpoint=None, initial_states=None):
    """Repeated holdout: trials seeded ``base_seed + i`` advance in lockstep
    checkpoint by checkpoint.

    After each checkpoint the per-trial accuracies are averaged; once the
    averaged accuracies stay at or above the exit threshold for
    ``exit_patience`` consecutive checkpoints, the remaining schedule is
    skipped for every trial.  Trials within a checkpoint segment may run in
    up to ``workers`` processes; results are bit-identical to sequential
    execution because each segment is a pure function of the trial state.

    ``on_checkpoint(states, checkpoint)`` is called after every completed
    segment (for persistence / resume support); ``initial_states`` restarts
    from previously persisted states, which must all sit at the same epoch.
    """
    if n_trials < 1:
        raise ValueError("n_trials must be at least 1")
    model_config = model_config or M.ModelConfig()
    train_config = train_config or TrainConfig()
    fingerprint = run_fingerprint(model_config, train_config, scenario_config)

    if initial_states is None:
        states = [TrialState(seed=base_seed + i) for i in range(n_trials)]
    else:
        states = list(initial_states)
        if len(states) != n_trials:
            raise ValueError(
                f"{len(states)} resume states for {n_trials} trials"
            )
        if len({s.epoch for s in states}) != 1:
            raise ValueError("resume states are not at a common epoch")

    streak = 0
    for point in _completed_mean_curve(states):
        streak = _exit_streak(point.accuracies, train_config.exit_threshold,
                              streak)
    pool = ProcessPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for checkpoint in train_config.schedule:
            if checkpoint <= states[0].epoch:
                continue
            if train_config.early_exit and streak >= train_config.exit_patience:
                break
            args = [(s, model_config, train_config, scenario_config, checkpoint)
                    for s in states]
            if pool is None:
                states = [advance_trial(*a) for a in args]
            else:
                states = list(pool.map(_advance_star, args))
            mean = _mean_accuracies([s.points[-1] for s in states])
            if progress:
                progress(f"epoch {checkpoint}: mean " + _format_accs(mean))
            if on_checkpoint:
                on_checkpoint(states, checkpoint)
            streak = _exit_streak(mean, train_config.exit_threshold, streak)
    finally:
        if pool is not None:
            pool.shutdown()

    trials = [
        TrialResult(s.seed, s.points, s.question_counts, s.split_fingerprint)
        for s in states
    ]
    mean_curve = _completed_mean_curve(states)
    counts = {
        q: sum(t.question_counts[q] for t in trials) for q in QTYPE_NAMES
    }
    return HoldoutResult(base_seed, fingerprint, trials, mean_curve, counts)


def _advance_star(args):
    return advance_trial(*args)


def _completed_mean_curve(states):
    if not states or not states[0].points:
        return []
    n = min(len(s.points) for s in states)
    curve = []
    for i in range(n):
        epochs = {s.points[i].epoch for s in states}
        if len(epochs) != 1:
            raise ValueError(f"trial checkpoints out of step: {epochs}")
        curve.append(MeanPoint(epochs.pop(),
                               _mean_accuracies([s.points[i] for s in states])))
    return curve


# ---------------------------------------------------------------------------
# Phase detection
# ---------------------------------------------------------------------------

@dataclass
class PhaseReport:
    phase1_epoch: int  # None when the signature never appears
    phase1_accuracies: dict
    peak_value: float  # running type-ii peak the dip is measured against
    dip_epoch: int  # None when no qualifying dip exists
    dip_value: float
    recovery_epoch: int  # None when the dip never recovers
    u_shape: bool
    final_epoch: int
    final_accuracies: dict

    def to_text(self):
        lines = ["phase report", "============"]
        if self.phase1_epoch is None:
            lines.append("phase-one signature: not found")
        else:
            lines.append(
                f"phase-one signature: epoch {self.phase1_epoch} "
                f"({_format_accs(self.phase1_accuracies)})"
            )
        if self.dip_epoch is None:
            lines.append("type-ii dip: none detected")
        else:
            lines.append(
                f"type-ii dip: epoch {self.dip_epoch} at {self.dip_value:.4f} "
                f"(peak before dip {self.peak_value:.4f})"
            )
            if self.recovery_epoch is None:
                lines.append("recovery: not reached")
            else:
                lines.append(f"recovery: epoch {self.recovery_epoch}")
        lines.append(f"u-shape detected: {'yes' if self.u_shape else 'no'}")
        lines.append(
            f"final: epoch {self.final_epoch} "
            f"({_format_accs(self.final_accuracies)})"
        )
        return "\n".join(lines)


def detect_phases(curve, threshold_hi=0.9, threshold_lo=0.2, dip_min=0.02):
    """Find the two-phase structure in a (mean) learning curve.

    Phase one: the earliest checkpoint where type ii and iii are at or
    above ``threshold_hi`` while type i is at or below ``threshold_lo``.
    U-shape: after that checkpoint, type ii falls at least ``dip_min``
    below its running peak and later climbs back to ``threshold_hi``.
    """
    if len(curve) < 3:
        raise ValueError(f"need at least 3 checkpoints, got {len(curve)}")

    phase1_idx = None
    for i, point in enumerate(curve):
        a = point.accuracies
        if any(a[q] is None for q in QTYPE_NAMES):
            continue
        if a[2] >= threshold_hi and a[3] >= threshold_hi and a[1] <= threshold_lo:
            phase1_idx = i
            break

    peak = 0.0
    dip_idx = None
    dip_value = 0.0
    recovery_idx = None
    if phase1_idx is not None:
        peak = max(
            p.accuracies[2] for p in curve[: phase1_idx + 1]
            if p.accuracies[2] is not None
        )
        running = peak
        for j in range(phase1_idx + 1, len(curve)):
            v = curve[j].accuracies[2]
            if v is None:
                continue
            if dip_idx is None:
                if v <= running - dip_min:
                    dip_idx = j
                    dip_value = v
                    peak = running
                else:
                    running = max(running, v)
            else:
                if v < dip_value:  # keep tracking the bottom of the dip
                    dip_idx, dip_value = j, v
                if v >= threshold_hi:
                    recovery_idx = j
                    break

    final = curve[-1]
    return PhaseReport(
        phase1_epoch=None if phase1_idx is None else curve[phase1_idx].epoch,
        phase1_accuracies=(
            {} if phase1_idx is None else dict(curve[phase1_idx].accuracies)
        ),
        peak_value=peak,
        dip_epoch=None if dip_idx is None else curve[dip_idx].epoch,
        dip_value=dip_value,
        recovery_epoch=None if recovery_idx is None else curve[recovery_idx].epoch,
        u_shape=recovery_idx is not None,
        final_epoch=final.epoch,
        final_accuracies=dict(final.accuracies),
    )


# ---------------------------------------------------------------------------
# Confusion analysis
# ---------------------------------------------------------------------------

CORRECT_TOKENS = {1: frozenset(("yo",)), 2: frozenset(("ne",)),
                  3: frozenset(("yo", "ne"))}


@dataclass
class ConfusionTrends:
    """Prediction counts per checkpoint and qtype, summed across trials."""

    epochs: list
    counts: dict  # {(epoch, qtype): Counter(token -> count)}
    totals: dict  # {(epoch, qtype): question count}

    def proportion(self, epoch, qtype, token):
        total = self.totals.get((epoch, qtype), 0)
        if not total:
            return 0.0
        return self.counts[(epoch, qtype)][token] / total

    def series(self, qtype, token):
        """(epoch, proportion) for one predicted token on one qtype."""
        return [(e, self.proportion(e, qtype, token)) for e in self.epochs]

    def wrong_table(self, epoch, qtype):
        """Wrong answers at a checkpoint, ranked by count (ties by token)."""
        counter = self.counts.get((epoch, qtype), Counter())
        wrong = [
            (tok, n) for tok, n in counter.items()
            if tok not in CORRECT_TOKENS[qtype]
        ]
        wrong.sort(key=lambda item: (-item[1], item[0]))
        total = self.totals.get((epoch, qtype), 0)
        return [(tok, n, n / total) for tok, n in wrong]


def confusion_trends(trials):
    """Aggregate the per-trial confusion records over common checkpoints."""
    if not trials:
        return ConfusionTrends([], {}, {})
    n = min(len(t.points) for t in trials)
    epochs = [trials[0].points[i].epoch for i in range(n)]
    counts = {}
    totals = {}
    for i, epoch in enumerate(epochs):
        for q in QTYPE_NAMES:
            merged = Counter()
            total = 0
            for t in trials:
                point = t.points[i]
                merged.update(point.confusion.get(q, Counter()))
                total += sum(point.confusion.get(q, Counter()).values())
            counts[(epoch, q)] = merged
            totals[(epoch, q)] = total
    return ConfusionTrends(epochs, counts, totals)


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def _comment_header(result):
    return (f"# seed={result.base_seed} fingerprint={result.fingerprint}\n")


def _cell(value):
    return "" if value is None else repr(value)


def write_curves_csv(path, result):
    """Per-trial and mean accuracies: epoch, trial (index or "mean"),
    acc_type_i, acc_type_ii, acc_type_iii."""
    lines = [_comment_header(result),
             "epoch,trial,acc_type_i,acc_type_ii,acc_type_iii\n"]
    n_points = min(len(t.points) for t in result.trials)
    for i in range(n_points):
        epoch = result.trials[0].points[i].epoch
        for idx, trial in enumerate(result.trials):
            a = trial.points[i].accuracies
            lines.append(
                f"{epoch},{idx},{_cell(a[1])},{_cell(a[2])},{_cell(a[3])}\n"
            )
        m = result.mean_curve[i].accuracies
        lines.append(
            f"{epoch},mean,{_cell(m[1])},{_cell(m[2])},{_cell(m[3])}\n"
        )
    with open(path, "w") as fh:
        fh.writelines(lines)


def write_confusion_csv(path, result):
    """Aggregated prediction counts: epoch, qtype, predicted_token, count,
    proportion (of all questions of that qtype at that checkpoint)."""
    trends = confusion_trends(result.trials)
    lines = [_comment_header(result),
             "epoch,qtype,predicted_token,count,proportion\n"]
    for epoch in trends.epochs:
        for q in QTYPE_NAMES:
            total = trends.totals.get((epoch, q), 0)
            items = sorted(trends.counts.get((epoch, q), Counter()).items(),
                           key=lambda item: (-item[1], item[0]))
            for token, count in items:
                lines.append(
                    f"{epoch},{QTYPE_NAMES[q]},{token},{count},"
                    f"{repr(count / total)}\n"
                )
    with open(path, "w") as fh:
        fh.writelines(lines)


def write_phase_report(path, result, threshold_hi=0.9, threshold_lo=0.2,
                       dip_min=0.02):
    """Structured-text summary: phases, ratio, and the mean curve table."""
    report = detect_phases(result.mean_curve, threshold_hi, threshold_lo,
                           dip_min)
    ratio = result.qtype_ratio()
    lines = [
        _comment_header(result).rstrip("\n"),
        report.to_text(),
        "",
        "question-type counts (all trials): "
        + " ".join(f"{QTYPE_NAMES[q]}={result.qtype_counts[q]}"
                   for q in QTYPE_NAMES),
        "question-type ratio: "
        + ":".join(f"{r:.3f}" for r in ratio),
        "",
        "mean curve:",
    ]
    for point in result.mean_curve:
        lines.append(f"  epoch {point.epoch}: "
                     + _format_accs(point.accuracies))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
