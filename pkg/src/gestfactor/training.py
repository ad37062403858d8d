"""Optimization: Adam with weight decay, the stepped learning-rate
schedule, segment sampling, and the resynthesis / joint training drivers.

Runs are deterministic for a fixed (seed, config, corpus): every random
choice draws from generators derived from the config seed, and the
metrics log reproduces bitwise on a single thread.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import evaluate
from .ctc import InfeasibleTargetError, LabelAlphabet, min_frames, recognize
from .data import NormStats, Utterance
from .factorization import GestureModel, init_model, model_forward
from .objectives import LossReport, LossWeights, joint_loss, resynthesis_loss
from .tensor import NumericError, Tape, Tensor

METRICS_HEADER = "step,epoch,lr,rec,s1,s2,entropy,ctc,total,val_per,val_per_v"


@dataclass
class TrainConfig:
    """Every knob of a training run, in one serializable record."""
    task: str = "resynthesis"            # resynthesis | joint
    d: int = 40                          # number of gestures
    channels: int = 12
    kernel_len: int = 41
    lambda1: float = 10.0
    lambda2: float = 10.0
    lambda3: float = 10.0
    lambda4: float = 1.0
    lr0: float = 1e-3
    lr_decay_every: int = 5              # epochs
    lr_decay_factor: float = 5.0
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    batch_size: int = 8
    segment_len: int = 300               # frames
    epochs: int = 10
    seed: int = 0
    kmeans_window: int = 41
    kmeans_max_windows: int = 20_000
    decoder_bias: bool = True
    val_fraction: float = 0.1
    beam_width: int = 50
    rec_loss: str = "norm"               # norm | mse reconstruction objective

    def __post_init__(self):
        if self.task not in ("resynthesis", "joint"):
            raise ValueError(f"unknown task {self.task!r}")
        positive = ["d", "channels", "kernel_len", "lr0", "lr_decay_every",
                    "lr_decay_factor", "batch_size", "segment_len", "epochs",
                    "kmeans_window", "kmeans_max_windows"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        for name in ["lambda1", "lambda2", "lambda3", "lambda4", "weight_decay"]:
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.beam_width < 1:
            raise ValueError("beam_width must be >= 1")
        if self.rec_loss not in ("norm", "mse"):
            raise ValueError("rec_loss must be 'norm' or 'mse'")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(raw) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**raw)


def lr_at(epoch: int, config: TrainConfig) -> float:
    """Initial rate divided by the decay factor every ``lr_decay_every`` epochs."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return config.lr0 / config.lr_decay_factor ** (epoch // config.lr_decay_every)


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class AdamState:
    """First/second moments per parameter plus the shared step counter.

    Parameters whose name is in ``no_decay`` (norm scales/shifts and biases)
    are exempt from weight decay.
    """

    beta1 = 0.9
    beta2 = 0.999
    epsilon = 1e-8

    def __init__(self, no_decay: frozenset[str] = frozenset()):
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step_count = 0
        self.no_decay = no_decay


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None],
              state: AdamState, lr: float, weight_decay: float = 0.0,
              decoupled: bool = False) -> dict[str, Tensor]:
    """One bias-corrected Adam update; returns the new parameter tensors.

    Classical coupled decay adds wd * param to the gradient before the
    moment updates; ``decoupled`` applies it directly to the parameter
    instead.  Non-finite gradients reject the whole step.
    """
    if lr <= 0:
        raise ValueError("learning rate must be positive")
    bad = [name for name, g in grads.items()
           if g is not None and not np.all(np.isfinite(g))]
    if bad:
        raise NumericError(f"non-finite gradients for: {', '.join(sorted(bad))}")

    state.step_count += 1
    t = state.step_count
    correct1 = 1.0 - state.beta1 ** t
    correct2 = 1.0 - state.beta2 ** t
    updated: dict[str, Tensor] = {}
    for name, param in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros(param.shape)
        elif g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape "
                             f"{param.shape} for {name}")
        decay = weight_decay if name not in state.no_decay else 0.0
        if decay and not decoupled:
            g = g + decay * param.data
        m = state.m.get(name)
        if m is None:
            m = np.zeros(param.shape)
            state.v[name] = np.zeros(param.shape)
        v = state.v[name]
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        step = lr * (m / correct1) / (np.sqrt(v / correct2) + state.epsilon)
        new_data = param.data - step
        if decay and decoupled:
            new_data = new_data - lr * decay * param.data
        updated[name] = Tensor(new_data)
    return updated


# ---------------------------------------------------------------------------
# Segment sampling
# ---------------------------------------------------------------------------

def sample_segment(utt: Utterance, seg_len: int,
                   rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """A random fixed-length window; short utterances are zero-padded right.

    Returns (frames (C, seg_len), valid frame count).  The valid count
    feeds a mask so padded frames never enter losses or norm statistics.
    """
    n = utt.n_frames
    if n >= seg_len:
        start = int(rng.integers(0, n - seg_len + 1))
        return np.ascontiguousarray(utt.frames[:, start:start + seg_len]), seg_len
    out = np.zeros((utt.channels, seg_len))
    out[:, :n] = utt.frames
    return out, n


def _batch_arrays(utts: list[Utterance], seg_len: int | None,
                  rng: np.random.Generator):
    """Stack utterances (or sampled segments) into (X, mask, lengths)."""
    if seg_len is not None:
        pairs = [sample_segment(u, seg_len, rng) for u in utts]
        width = seg_len
    else:
        width = max(u.n_frames for u in utts)
        pairs = []
        for u in utts:
            padded = np.zeros((u.channels, width))
            padded[:, :u.n_frames] = u.frames
            pairs.append((padded, u.n_frames))
    x = np.stack([p for p, _ in pairs])
    lengths = [v for _, v in pairs]
    if all(v == width for v in lengths):
        return Tensor(x), None, None
    mask = np.zeros((len(utts), width))
    for b, v in enumerate(lengths):
        mask[b, :v] = 1.0
    return Tensor(x), mask, lengths


# ---------------------------------------------------------------------------
# Drivers
# ---------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: GestureModel
    stats: NormStats | None
    config: TrainConfig
    metrics: list[str] = field(default_factory=list)   # CSV rows incl. header
    recognizer: object | None = None
    alphabet: LabelAlphabet | None = None
    best_epoch: int = -1
    best_metric: float = float("inf")
    final_report: LossReport | None = None
    skipped: int = 0
    aborted: bool = False
    abort_reason: str = ""

    def write_metrics(self, path: str) -> None:
        with open(path, "w") as fh:
            for row in self.metrics:
                fh.write(row + "\n")


def _val_split(corpus: list[Utterance], config: TrainConfig):
    """Deterministic last-fraction validation carve-out of the train split."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xA11D]))
    order = rng.permutation(len(corpus))
    n_val = max(1, int(round(config.val_fraction * len(corpus))))
    if n_val >= len(corpus):
        raise ValueError("corpus too small for the validation fraction")
    train = [corpus[i] for i in order[:-n_val]]
    val = [corpus[i] for i in order[-n_val:]]
    return train, val


def _row(step, epoch, lr, report: LossReport, val_per="", val_per_v="") -> str:
    ctc = "" if report.ctc is None else repr(report.ctc)
    return (f"{step},{epoch},{lr!r},{report.rec!r},{report.s1!r},{report.s2!r},"
            f"{report.entropy!r},{ctc},{report.total!r},{val_per},{val_per_v}")


def _check_corpus(corpus: list[Utterance], config: TrainConfig):
    if not corpus:
        raise ValueError("empty corpus")
    for u in corpus:
        if u.channels != config.channels:
            raise ValueError(f"utterance {u.id} has {u.channels} channels, "
                             f"config expects {config.channels}")


def train_resynthesis(config: TrainConfig, corpus: list[Utterance],
                      stats: NormStats | None = None,
                      log_path: str | None = None) -> TrainResult:
    """Fit the gesture autoencoder on z-scored kinematics.

    Decoder starts from k-means centers over training windows, encoder from
    fan-in uniform noise.  Each epoch draws one random segment per training
    utterance; the returned model is the best-by-validation-reconstruction
    snapshot.  A non-finite loss or gradient aborts with the last good one.
    """
    if config.task != "resynthesis":
        raise ValueError("config.task must be 'resynthesis'")
    _check_corpus(corpus, config)
    train_utts, val_utts = _val_split(corpus, config)

    model = init_model(config.channels, config.d, config.seed,
                       kernel_len=config.kernel_len, corpus=train_utts,
                       decoder_bias=config.decoder_bias,
                       kmeans_window=config.kmeans_window,
                       kmeans_max_windows=config.kmeans_max_windows)
    no_decay = frozenset(n for n in model.tensors()
                         if n.endswith(("gamma", "beta", "bias")))
    adam = AdamState(no_decay=no_decay)
    seg_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x5E6]))
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0D8]))

    result = TrainResult(model=model, stats=stats, config=config,
                         metrics=[METRICS_HEADER])
    best_state = None
    weights = config.weights
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write(METRICS_HEADER + "\n")
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            order = order_rng.permutation(len(train_utts))
            batches = [order[i:i + config.batch_size]
                       for i in range(0, len(order), config.batch_size)]
            for batch_idx in batches:
                utts = [train_utts[i] for i in batch_idx]
                x, mask, lengths = _batch_arrays(utts, config.segment_len, seg_rng)
                with Tape() as tape:
                    score, xhat = model_forward(x, model, mask)
                    report = resynthesis_loss(x, xhat, score, weights,
                                              lengths, config.rec_loss)
                grads = tape.backward(report.objective)
                named = model.tensors()
                grad_map = {k: grads.get(t) for k, t in named.items()}
                model.update_tensors(
                    adam_step(named, grad_map, adam, lr, config.weight_decay,
                              decoupled=config.decoupled_weight_decay))
                step += 1
                row = _row(step, epoch, lr, report)
                result.metrics.append(row)
                if log_fh:
                    log_fh.write(row + "\n")
                result.final_report = report
            val_rec = evaluate.reconstruction_metrics(model, val_utts)["rec_pct"]
            if val_rec < result.best_metric:
                result.best_metric = val_rec
                result.best_epoch = epoch
                best_state = evaluate.export_state(model)
    except NumericError as exc:
        result.aborted = True
        result.abort_reason = str(exc)
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        evaluate.import_state(model, best_state)
    model.set_mode("eval")
    return result


def train_joint(config: TrainConfig, corpus: list[Utterance],
                stats: NormStats | None = None,
                alphabet: LabelAlphabet | None = None,
                log_path: str | None = None) -> TrainResult:
    """Joint resynthesis + CTC phoneme recognition on the gestural scores.

    Full utterances (padded per batch with masks) instead of segments; the
    recognizer reads the score matrix.  Utterances whose label sequence
    cannot fit their frame count are skipped and counted.  Validation PER
    (greedy) is logged every epoch and selects the best snapshot.
    """
    if config.task != "joint":
        raise ValueError("config.task must be 'joint'")
    _check_corpus(corpus, config)
    labeled = [u for u in corpus if u.labels]
    if not labeled:
        raise ValueError("joint training needs labeled utterances")
    if alphabet is None:
        symbols = sorted({s for u in labeled for s in u.labels})
        alphabet = LabelAlphabet(symbols)

    feasible = []
    skipped = 0
    for u in labeled:
        target = alphabet.encode(u.labels)
        if u.n_frames < max(1, min_frames(target)):
            skipped += 1
            continue
        feasible.append(u)
    if len(feasible) < 2:
        raise ValueError("not enough feasible labeled utterances")

    train_utts, val_utts = _val_split(feasible, config)
    from .ctc import init_recognizer
    model = init_model(config.channels, config.d, config.seed,
                       kernel_len=config.kernel_len, corpus=train_utts,
                       decoder_bias=config.decoder_bias,
                       kmeans_window=config.kmeans_window,
                       kmeans_max_windows=config.kmeans_max_windows)
    recognizer = init_recognizer(config.d, alphabet.n_classes, config.seed)

    named_all = {**{f"model.{k}": v for k, v in model.tensors().items()},
                 **{f"rec.{k}": v for k, v in recognizer.tensors().items()}}
    no_decay = frozenset(n for n in named_all
                         if n.endswith(("gamma", "beta", "bias")))
    adam = AdamState(no_decay=no_decay)
    order_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0x0D8]))

    result = TrainResult(model=model, stats=stats, config=config,
                         metrics=[METRICS_HEADER], recognizer=recognizer,
                         alphabet=alphabet, skipped=skipped)
    best_state = None
    weights = config.weights
    step = 0
    log_fh = open(log_path, "w") if log_path else None
    try:
        if log_fh:
            log_fh.write(METRICS_HEADER + "\n")
        for epoch in range(config.epochs):
            lr = lr_at(epoch, config)
            order = order_rng.permutation(len(train_utts))
            batches = [order[i:i + config.batch_size]
                       for i in range(0, len(order), config.batch_size)]
            epoch_rows = []
            for batch_idx in batches:
                utts = [train_utts[i] for i in batch_idx]
                x, mask, lengths = _batch_arrays(utts, None, order_rng)
                real_lengths = lengths or [u.n_frames for u in utts]
                targets = [alphabet.encode(u.labels) for u in utts]
                with Tape() as tape:
                    score, xhat = model_forward(x, model, mask)
                    log_probs = recognize(score, recognizer, mask=mask)
                    lp_list = [evaluate.slice_log_probs(log_probs, b, real_lengths[b])
                               for b in range(len(utts))]
                    report = joint_loss(x, xhat, score, lp_list, targets,
                                        weights, lengths, config.rec_loss)
                grads = tape.backward(report.objective)
                grad_map = {k: grads.get(t) for k, t in named_all.items()}
                updated = adam_step(named_all, grad_map, adam, lr,
                                    config.weight_decay,
                                    decoupled=config.decoupled_weight_decay)
                model.update_tensors({k[len("model."):]: v for k, v in updated.items()
                                      if k.startswith("model.")})
                recognizer.update_tensors({k[len("rec."):]: v for k, v in updated.items()
                                           if k.startswith("rec.")})
                named_all = {**{f"model.{k}": v for k, v in model.tensors().items()},
                             **{f"rec.{k}": v for k, v in recognizer.tensors().items()}}
                step += 1
                epoch_rows.append((step, epoch, lr, report))
                result.final_report = report
            scored = evaluate.recognition_metrics(model, recognizer, val_utts,
                                                  alphabet, beam_width=None)
            val_per, val_per_v = scored["per"], scored["per_v"]
            for i, (s, e, lr_i, rep) in enumerate(epoch_rows):
                last = i == len(epoch_rows) - 1
                row = _row(s, e, lr_i, rep,
                           val_per=repr(val_per) if last else "",
                           val_per_v=repr(val_per_v) if last else "")
                result.metrics.append(row)
                if log_fh:
                    log_fh.write(row + "\n")
            if val_per < result.best_metric:
                result.best_metric = val_per
                result.best_epoch = epoch
                best_state = (evaluate.export_state(model),
                              evaluate.export_state(recognizer))
    except NumericError as exc:
        result.aborted = True
        result.abort_reason = str(exc)
    finally:
        if log_fh:
            log_fh.close()
    if best_state is not None:
        evaluate.import_state(model, best_state[0])
        evaluate.import_state(recognizer, best_state[1])
    model.set_mode("eval")
    recognizer.set_mode("eval")
    return result
