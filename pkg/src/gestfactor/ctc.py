"""CTC loss, decoding, and phoneme-error-rate scoring.

The loss marginalizes over all blank-augmented monotonic alignments with
the usual forward-backward recursion, done in log space; the gradient
comes from the alignment posteriors.  Decoding is per-frame greedy or
prefix beam search.  Blank is always class index 0; real labels occupy
columns 1..A of the per-frame log-prob rows.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    as_tensor,
    batchnorm1d,
    conv1d,
    custom_op,
    log_softmax,
    mul,
    relu,
    transpose,
)

BLANK = 0

NEG_INF = -np.inf


class InfeasibleTargetError(ValueError):
    """Target cannot be aligned: too few frames for the label sequence."""


# ---------------------------------------------------------------------------
# Label alphabets
# ---------------------------------------------------------------------------

CMU_PHONES = [
    "aa", "ae", "ah", "ao", "aw", "ay", "b", "ch", "d", "dh", "eh", "er",
    "ey", "f", "g", "hh", "ih", "iy", "jh", "k", "l", "m", "n", "ng", "ow",
    "oy", "p", "r", "s", "sh", "t", "th", "uh", "uw", "v", "w", "y", "z",
    "zh",
]

# phones indistinguishable in articulator kinematics (voicing/nasality)
CMU_MERGE_GROUPS = [
    ("p", "b", "m"), ("t", "d", "n"), ("ch", "jh"), ("f", "v"),
    ("sh", "zh"), ("k", "g", "ng"), ("s", "z"), ("th", "dh"),
]


class LabelAlphabet:
    """Ordered symbol set with blank fixed at index 0 and a merge map.

    Symbol i maps to logit column i+1.  The merge map collapses symbols
    that share an articulatory class; it is idempotent by construction
    (every group maps onto its first member).
    """

    def __init__(self, symbols: Sequence[str], merge_groups: Sequence[Sequence[str]] = ()):
        symbols = list(symbols)
        if len(set(symbols)) != len(symbols):
            raise ValueError("duplicate symbols in alphabet")
        self.symbols = symbols
        self._index = {sym: i + 1 for i, sym in enumerate(symbols)}
        self.merge_map = {s: s for s in symbols}
        for group in merge_groups:
            for sym in group:
                if sym not in self._index:
                    raise ValueError(f"merge symbol {sym!r} not in alphabet")
                self.merge_map[sym] = group[0]

    @property
    def size(self) -> int:
        return len(self.symbols)

    @property
    def n_classes(self) -> int:
        """Logit width: all symbols plus the blank."""
        return len(self.symbols) + 1

    def encode(self, seq: Sequence[str]) -> list[int]:
        try:
            return [self._index[s] for s in seq]
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} not in alphabet") from None

    def decode(self, indices: Sequence[int]) -> list[str]:
        return [self.symbols[i - 1] for i in indices]

    def merge(self, seq: Sequence[str]) -> list[str]:
        return [self.merge_map.get(s, s) for s in seq]


def cmu_alphabet() -> LabelAlphabet:
    """The 39-phone CMU dictionary set with the articulatory merge groups."""
    return LabelAlphabet(CMU_PHONES, CMU_MERGE_GROUPS)


# ---------------------------------------------------------------------------
# CTC loss
# ---------------------------------------------------------------------------

def _validate_log_probs(lp: np.ndarray, tol: float = 1e-3) -> None:
    if lp.ndim != 2:
        raise ShapeError(f"log_probs must be (t, classes), got {lp.shape}")
    row_lse = np.logaddexp.reduce(lp, axis=1)
    if np.any(np.abs(row_lse) > tol):
        raise ValueError("log_probs rows are not log-softmax normalized")


def _extended_target(target: Sequence[int], n_classes: int) -> np.ndarray:
    target = list(target)
    for y in target:
        if not 1 <= y < n_classes:
            raise ValueError(f"label index {y} outside 1..{n_classes - 1}")
    ext = np.full(2 * len(target) + 1, BLANK, dtype=np.int64)
    ext[1::2] = target
    return ext


def min_frames(target: Sequence[int]) -> int:
    """Shortest input that can emit the target: its length plus one extra
    frame per adjacent repeat (the mandatory separating blank)."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


def ctc_loss(log_probs: Tensor, target: Sequence[int]) -> Tensor:
    """-ln P(target | log_probs) as a differentiable scalar.

    ``target`` holds label indices (1..A, no blanks).  Raises
    :class:`InfeasibleTargetError` when the input is too short to emit the
    target at all, and ValueError for non-normalized rows.
    """
    log_probs = as_tensor(log_probs)
    lp = log_probs.data
    _validate_log_probs(lp)
    frames, n_classes = lp.shape
    target = list(target)
    if frames < max(1, min_frames(target)):
        raise InfeasibleTargetError(
            f"{frames} frames cannot emit a target of length {len(target)} "
            f"(needs >= {min_frames(target)})")

    ext = _extended_target(target, n_classes)
    s_len = ext.size
    emit = lp[:, ext]  # (t, S)

    skip_ok = np.zeros(s_len, dtype=bool)
    if s_len >= 3:
        skip_ok[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])

    alpha = np.full((frames, s_len), NEG_INF)
    alpha[0, 0] = emit[0, 0]
    if s_len > 1:
        alpha[0, 1] = emit[0, 1]
    with np.errstate(invalid="ignore"):
        for t in range(1, frames):
            prev = alpha[t - 1]
            acc = prev.copy()
            acc[1:] = np.logaddexp(acc[1:], prev[:-1])
            if s_len >= 3:
                acc[2:] = np.where(skip_ok[2:],
                                   np.logaddexp(acc[2:], prev[:-2]), acc[2:])
            alpha[t] = acc + emit[t]

        log_p = alpha[frames - 1, s_len - 1]
        if s_len > 1:
            log_p = np.logaddexp(log_p, alpha[frames - 1, s_len - 2])

        beta = np.full((frames, s_len), NEG_INF)
        beta[frames - 1, s_len - 1] = emit[frames - 1, s_len - 1]
        if s_len > 1:
            beta[frames - 1, s_len - 2] = emit[frames - 1, s_len - 2]
        for t in range(frames - 2, -1, -1):
            nxt = beta[t + 1]
            acc = nxt.copy()
            acc[:-1] = np.logaddexp(acc[:-1], nxt[1:])
            if s_len >= 3:
                acc[:-2] = np.where(skip_ok[2:],
                                    np.logaddexp(acc[:-2], nxt[2:]), acc[:-2])
            beta[t] = acc + emit[t]

        # posterior mass per (frame, class); alpha and beta both include the
        # frame's emission, so divide it out once
        gamma = alpha + beta
        log_grad = np.full((frames, n_classes), NEG_INF)
        for k in np.unique(ext):
            cols = gamma[:, ext == k]
            log_grad[:, k] = np.logaddexp.reduce(cols, axis=1)
        grad = -np.exp(log_grad - lp - log_p)

    loss_val = -log_p

    def backward(g):
        return (g.reshape(-1)[0] * grad,)

    return custom_op(np.array(loss_val), (log_probs,), backward)


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------

def collapse(path: Sequence[int]) -> list[int]:
    """Merge consecutive repeats, then drop blanks."""
    out = []
    prev = None
    for p in path:
        if p != prev:
            if p != BLANK:
                out.append(int(p))
            prev = p
    return out


def greedy_decode(log_probs) -> list[int]:
    """Best class per frame (ties to the lowest index), collapsed."""
    lp = as_tensor(log_probs).data
    _validate_log_probs(lp)
    return collapse(np.argmax(lp, axis=1))


def beam_decode(log_probs, width: int = 50, return_score: bool = False):
    """CTC prefix beam search over label prefixes.

    Tracks blank-ending and label-ending log probability per prefix,
    prunes to ``width`` prefixes per frame, and breaks ties first by
    probability then by lexicographically smaller prefix.
    """
    if width < 1:
        raise ValueError("beam width must be >= 1")
    lp = as_tensor(log_probs).data
    _validate_log_probs(lp)
    n_classes = lp.shape[1]

    beams: dict[tuple, tuple[float, float]] = {(): (0.0, NEG_INF)}
    for row in lp:
        grown: dict[tuple, list[float]] = {}

        def slot(prefix):
            entry = grown.get(prefix)
            if entry is None:
                entry = [NEG_INF, NEG_INF]
                grown[prefix] = entry
            return entry

        for prefix, (p_blank, p_label) in beams.items():
            total = np.logaddexp(p_blank, p_label)
            entry = slot(prefix)
            entry[0] = np.logaddexp(entry[0], total + row[BLANK])
            last = prefix[-1] if prefix else None
            if last is not None:
                entry[1] = np.logaddexp(entry[1], p_label + row[last])
            for c in range(1, n_classes):
                ext = slot(prefix + (c,))
                source = p_blank if c == last else total
                ext[1] = np.logaddexp(ext[1], source + row[c])

        ranked = sorted(grown.items(),
                        key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
        beams = {prefix: (pb, pl) for prefix, (pb, pl) in ranked[:width]}

    best, (p_blank, p_label) = min(
        beams.items(), key=lambda kv: (-np.logaddexp(kv[1][0], kv[1][1]), kv[0]))
    if return_score:
        return list(best), float(np.logaddexp(p_blank, p_label))
    return list(best)


# ---------------------------------------------------------------------------
# Error rates
# ---------------------------------------------------------------------------

def edit_distance(ref: Sequence, hyp: Sequence) -> int:
    """Levenshtein distance with unit insert/delete/substitute costs."""
    m, n = len(ref), len(hyp)
    prev = list(range(n + 1))
    for i in range(1, m + 1):
        cur = [i] + [0] * n
        for j in range(1, n + 1):
            cost = 0 if ref[i - 1] == hyp[j - 1] else 1
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + cost)
        prev = cur
    return prev[n]


def per(refs: Sequence[Sequence], hyps: Sequence[Sequence], merge: bool = False,
        merge_map: dict | None = None) -> float:
    """Phoneme error rate in percent: total edits over total reference length.

    ``merge`` first maps both sides through ``merge_map`` (default: the CMU
    voicing groups), which scores sequences up to articulatory class.
    """
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps must pair up")
    if merge:
        mapping = merge_map if merge_map is not None else cmu_alphabet().merge_map
        refs = [[mapping.get(s, s) for s in r] for r in refs]
        hyps = [[mapping.get(s, s) for s in h] for h in hyps]
    total_ref = sum(len(r) for r in refs)
    if total_ref == 0:
        raise ValueError("total reference length is zero")
    edits = sum(edit_distance(r, h) for r, h in zip(refs, hyps))
    return 100.0 * edits / total_ref


# ---------------------------------------------------------------------------
# Phoneme recognizer
# ---------------------------------------------------------------------------

@dataclass
class RecognizerParams:
    """Frame classifier over kinematics or gestural scores.

    Three 64-channel convs, then a stack of dilated convs standing in for a
    recurrent body (kernel 5, dilations 1/2/4/8, 256 channels), then two
    128-wide frame-local projections and the class logits.  All layers keep
    the input length.
    """
    in_channels: int
    n_classes: int
    front_kernels: list
    front_norms: list
    context_kernels: list
    context_norms: list
    context_dilations: list
    proj_kernels: list
    proj_biases: list
    out_kernel: Tensor = None
    out_bias: Tensor = None

    def tensors(self) -> dict[str, Tensor]:
        named = {}
        for i, k in enumerate(self.front_kernels):
            named[f"front{i}.kernel"] = k
        for i, k in enumerate(self.context_kernels):
            named[f"context{i}.kernel"] = k
        for i, (k, b) in enumerate(zip(self.proj_kernels, self.proj_biases)):
            named[f"proj{i}.kernel"] = k
            named[f"proj{i}.bias"] = b
        named["out.kernel"] = self.out_kernel
        named["out.bias"] = self.out_bias
        for i, st in enumerate(self.front_norms):
            named[f"front{i}.gamma"] = st.gamma
            named[f"front{i}.beta"] = st.beta
        for i, st in enumerate(self.context_norms):
            named[f"context{i}.gamma"] = st.gamma
            named[f"context{i}.beta"] = st.beta
        return named

    def update_tensors(self, named: dict[str, Tensor]) -> None:
        for name, value in named.items():
            group, attr = name.split(".", 1)
            if group.startswith("front"):
                i = int(group[len("front"):])
                target = self.front_norms[i] if attr in ("gamma", "beta") else None
                if target is not None:
                    setattr(target, attr, value)
                else:
                    self.front_kernels[i] = value
            elif group.startswith("context"):
                i = int(group[len("context"):])
                target = self.context_norms[i] if attr in ("gamma", "beta") else None
                if target is not None:
                    setattr(target, attr, value)
                else:
                    self.context_kernels[i] = value
            elif group.startswith("proj"):
                i = int(group[len("proj"):])
                if attr == "kernel":
                    self.proj_kernels[i] = value
                else:
                    self.proj_biases[i] = value
            elif group == "out":
                if attr == "kernel":
                    self.out_kernel = value
                else:
                    self.out_bias = value
            else:
                raise KeyError(name)

    def norm_states(self) -> list[BatchNormState]:
        return list(self.front_norms) + list(self.context_norms)

    def set_mode(self, mode: str):
        for st in self.norm_states():
            st.mode = mode
        return self


def _uniform_kernel(rng: np.random.Generator, k: int, c_in: int, c_out: int) -> Tensor:
    bound = 1.0 / np.sqrt(k * c_in)
    return Tensor(rng.uniform(-bound, bound, size=(k, c_in, c_out)))


def init_recognizer(in_channels: int, n_classes: int, seed: int,
                    front_width: int = 64, context_width: int = 256,
                    proj_width: int = 128) -> RecognizerParams:
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EC0]))
    front_kernels, front_norms = [], []
    width = in_channels
    for _ in range(3):
        front_kernels.append(_uniform_kernel(rng, 5, width, front_width))
        front_norms.append(BatchNormState(front_width))
        width = front_width
    context_kernels, context_norms, dilations = [], [], [1, 2, 4, 8]
    for _ in dilations:
        context_kernels.append(_uniform_kernel(rng, 5, width, context_width))
        context_norms.append(BatchNormState(context_width))
        width = context_width
    proj_kernels, proj_biases = [], []
    for _ in range(2):
        proj_kernels.append(_uniform_kernel(rng, 1, width, proj_width))
        proj_biases.append(Tensor(np.zeros(proj_width)))
        width = proj_width
    out_kernel = _uniform_kernel(rng, 1, width, n_classes)
    out_bias = Tensor(np.zeros(n_classes))
    return RecognizerParams(
        in_channels=in_channels, n_classes=n_classes,
        front_kernels=front_kernels, front_norms=front_norms,
        context_kernels=context_kernels, context_norms=context_norms,
        context_dilations=dilations,
        proj_kernels=proj_kernels, proj_biases=proj_biases,
        out_kernel=out_kernel, out_bias=out_bias)


def recognize(x: Tensor, params: RecognizerParams,
              mask: np.ndarray | None = None) -> Tensor:
    """Per-frame log-probs (B, t, classes) for a (B, F, t) input.

    ``mask`` (B, t) confines batch-norm statistics to real frames of padded
    batches and re-zeroes padding between layers, so scores at valid frames
    are independent of the padding.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != params.in_channels:
        raise ShapeError(f"expected (B, {params.in_channels}, t), got {x.shape}")
    mask_b = None if mask is None else Tensor(np.asarray(mask, dtype=np.float64)[:, None, :])

    def masked(h):
        return h if mask_b is None else mul(h, mask_b)

    h = x
    for kernel, norm in zip(params.front_kernels, params.front_norms):
        h = masked(relu(batchnorm1d(conv1d(h, kernel), norm, mask=mask)))
    for kernel, norm, dil in zip(params.context_kernels, params.context_norms,
                                 params.context_dilations):
        h = masked(relu(batchnorm1d(conv1d(h, kernel, dilation=dil), norm, mask=mask)))
    for kernel, bias in zip(params.proj_kernels, params.proj_biases):
        h = masked(relu(conv1d(h, kernel, bias)))
    logits = conv1d(h, params.out_kernel, params.out_bias)
    return log_softmax(transpose(logits, (0, 2, 1)), axis=2)
