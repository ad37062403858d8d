"""Inference-mode scoring shared by training validation, the CLI and tests:
reconstruction/sparseness metrics, recognition error rates, and parameter
state snapshots."""
from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np

from . import objectives
from .ctc import LabelAlphabet, beam_decode, edit_distance, greedy_decode, recognize
from .data import Utterance
from .factorization import GestureModel, GesturalScore, model_forward
from .tensor import NumericError, Tensor, narrow, reshape


def export_state(module) -> dict:
    """Copy every parameter and norm statistic of a model/recognizer."""
    state = {name: t.data.copy() for name, t in module.tensors().items()}
    for i, st in enumerate(module.norm_states()):
        state[f"__norm{i}.running_mean"] = st.running_mean.copy()
        state[f"__norm{i}.running_var"] = st.running_var.copy()
        state[f"__norm{i}.updates"] = st.updates
        state[f"__norm{i}.seeded"] = st.seeded
    return state


def import_state(module, state: dict) -> None:
    tensor_names = set(module.tensors())
    module.update_tensors({k: Tensor(v) for k, v in state.items()
                           if k in tensor_names})
    for i, st in enumerate(module.norm_states()):
        st.running_mean = np.array(state[f"__norm{i}.running_mean"])
        st.running_var = np.array(state[f"__norm{i}.running_var"])
        st.updates = int(state[f"__norm{i}.updates"])
        st.seeded = bool(state[f"__norm{i}.seeded"])


@contextmanager
def _eval_mode(*modules):
    saved = [[st.mode for st in m.norm_states()] for m in modules]
    for m in modules:
        m.set_mode("eval")
    try:
        yield
    finally:
        for m, modes in zip(modules, saved):
            for st, mode in zip(m.norm_states(), modes):
                st.mode = mode


def slice_log_probs(log_probs: Tensor, b: int, length: int) -> Tensor:
    """The (length, classes) rows of one batch element."""
    one = reshape(narrow(log_probs, 0, b, 1), log_probs.shape[1:])
    if length < one.shape[0]:
        one = narrow(one, 0, 0, length)
    return one


def score_utterance(model: GestureModel, frames: np.ndarray
                    ) -> tuple[GesturalScore, np.ndarray]:
    """Inference-mode (score, reconstruction) for one (C, t) utterance."""
    with _eval_mode(model):
        score, xhat = model_forward(Tensor(frames[None]), model)
    return GesturalScore(Tensor(score.data[0])), xhat.data[0]


def reconstruction_metrics(model: GestureModel, utts: list[Utterance]) -> dict:
    """Relative reconstruction error (%) plus mean sparseness and entropy.

    The error aggregates as a corpus-level relative Frobenius norm; the
    sparseness/entropy values average per utterance.  Degenerate scores
    (all-constant rows) report entropy as NaN rather than failing the scan.
    """
    num_sq = den_sq = 0.0
    rows = []
    s1_all, s2_all, ent_all = [], [], []
    with _eval_mode(model):
        for utt in utts:
            score, xhat = model_forward(Tensor(utt.frames[None]), model)
            h = Tensor(score.data[0])
            err_sq = float(((utt.frames - xhat.data[0]) ** 2).sum())
            ref_sq = float((utt.frames ** 2).sum())
            num_sq += err_sq
            den_sq += ref_sq
            s1 = objectives.time_sparsity(h).item()
            s2 = objectives.channel_sparsity(h).item()
            try:
                ent = objectives.entropy_of_sparseness(h).item()
            except NumericError:
                ent = math.nan
            rec_pct = 100.0 * math.sqrt(err_sq / ref_sq) if ref_sq > 0 else 0.0
            rows.append({"id": utt.id, "rec_pct": rec_pct, "s1": s1, "s2": s2,
                         "entropy": ent})
            s1_all.append(s1)
            s2_all.append(s2)
            ent_all.append(ent)
    finite_ents = [e for e in ent_all if not math.isnan(e)]
    return {
        "rec_pct": 100.0 * math.sqrt(num_sq / den_sq) if den_sq > 0 else 0.0,
        "s1": float(np.mean(s1_all)),
        "s2": float(np.mean(s2_all)),
        "entropy": float(np.mean(finite_ents)) if finite_ents else math.nan,
        "rows": rows,
    }


def recognition_metrics(model: GestureModel, recognizer, utts: list[Utterance],
                        alphabet: LabelAlphabet,
                        beam_width: int | None = None) -> dict:
    """Corpus PER and PER-V over labeled utterances.

    ``beam_width`` None decodes greedily.  PER-V rescoring maps both sides
    through the alphabet's merge classes, so it can never exceed PER.
    """
    rows = []
    edits = edits_merged = ref_total = 0
    merge = alphabet.merge_map
    with _eval_mode(model, recognizer):
        for utt in utts:
            if not utt.labels:
                continue
            score, _ = model_forward(Tensor(utt.frames[None]), model)
            log_probs = recognize(score, recognizer)
            lp = log_probs.data[0]
            if beam_width is None:
                hyp_idx = greedy_decode(lp)
            else:
                hyp_idx = beam_decode(lp, width=beam_width)
            hyp = alphabet.decode(hyp_idx)
            ref = list(utt.labels)
            e = edit_distance(ref, hyp)
            em = edit_distance([merge.get(s, s) for s in ref],
                               [merge.get(s, s) for s in hyp])
            rows.append({"id": utt.id, "ref_len": len(ref), "edits": e,
                         "edits_merged": em,
                         "per": 100.0 * e / len(ref),
                         "per_v": 100.0 * em / len(ref)})
            edits += e
            edits_merged += em
            ref_total += len(ref)
    if ref_total == 0:
        raise ValueError("no labeled utterances to score")
    return {"per": 100.0 * edits / ref_total,
            "per_v": 100.0 * edits_merged / ref_total,
            "rows": rows}
