"""Checkpoint container: every parameter tensor, norm-layer running
statistics, normalization stats, and the config snapshot in one npz file.
Round-trips are bit-exact (float64 arrays verbatim, metadata as JSON)."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .ctc import LabelAlphabet, RecognizerParams, init_recognizer
from .data import NormStats
from .factorization import GestureModel, init_model
from .tensor import Tensor

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    """Unreadable or incomplete checkpoint file."""


def _pack_module(prefix: str, module, arrays: dict, meta: dict) -> None:
    for name, t in module.tensors().items():
        arrays[f"{prefix}/{name}"] = t.data
    norm_meta = []
    for i, st in enumerate(module.norm_states()):
        arrays[f"{prefix}/__norm{i}.running_mean"] = st.running_mean
        arrays[f"{prefix}/__norm{i}.running_var"] = st.running_var
        norm_meta.append({"momentum": st.momentum, "epsilon": st.epsilon,
                          "updates": st.updates, "seeded": st.seeded})
    meta[f"{prefix}_norms"] = norm_meta


def _unpack_norms(prefix: str, module, arrays, meta: dict) -> None:
    for i, (st, info) in enumerate(zip(module.norm_states(),
                                       meta[f"{prefix}_norms"])):
        st.running_mean = np.array(arrays[f"{prefix}/__norm{i}.running_mean"])
        st.running_var = np.array(arrays[f"{prefix}/__norm{i}.running_var"])
        st.momentum = info["momentum"]
        st.epsilon = info["epsilon"]
        st.updates = info["updates"]
        st.seeded = info["seeded"]
        st.mode = "eval"


@dataclass
class Checkpoint:
    model: GestureModel
    stats: NormStats | None
    config: dict
    recognizer: RecognizerParams | None = None
    alphabet: LabelAlphabet | None = None
    metrics: dict | None = None

    @property
    def task(self) -> str:
        return self.config.get("task", "resynthesis")


def save_checkpoint(path: str, model: GestureModel, stats: NormStats | None,
                    config: dict, recognizer: RecognizerParams | None = None,
                    alphabet: LabelAlphabet | None = None,
                    metrics: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {"format_version": FORMAT_VERSION, "config": config,
                  "metrics": metrics or {},
                  "model": {"channels": model.channels, "d": model.n_gestures,
                            "kernel_len": model.kernel_len,
                            "decoder_bias": model.bias is not None}}
    _pack_module("model", model, arrays, meta)
    if stats is not None:
        arrays["stats/mean"] = stats.mean
        arrays["stats/std"] = stats.std
    if recognizer is not None:
        if alphabet is None:
            raise ValueError("a recognizer checkpoint needs its alphabet")
        _pack_module("rec", recognizer, arrays, meta)
        meta["recognizer"] = {"in_channels": recognizer.in_channels,
                              "n_classes": recognizer.n_classes}
        merge_groups: dict[str, list[str]] = {}
        for sym, tgt in alphabet.merge_map.items():
            if sym != tgt:
                merge_groups.setdefault(tgt, [tgt]).append(sym)
        meta["alphabet"] = {"symbols": alphabet.symbols,
                            "merge_groups": sorted(merge_groups.values())}
    arrays["__meta__"] = np.frombuffer(
        json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str) -> Checkpoint:
    try:
        arrays = np.load(path, allow_pickle=False)
    except Exception as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if "__meta__" not in arrays:
        raise CheckpointError(f"{path}: missing metadata block")
    meta = json.loads(bytes(arrays["__meta__"]).decode("utf-8"))
    if meta.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version "
                              f"{meta.get('format_version')}")
    info = meta["model"]
    model = init_model(info["channels"], info["d"], seed=0,
                       kernel_len=info["kernel_len"],
                       decoder_bias=info["decoder_bias"])
    try:
        model.update_tensors({name: Tensor(np.array(arrays[f"model/{name}"]))
                              for name in model.tensors()})
        _unpack_norms("model", model, arrays, meta)
        model.set_mode("eval")

        stats = None
        if "stats/mean" in arrays:
            stats = NormStats(mean=np.array(arrays["stats/mean"]),
                              std=np.array(arrays["stats/std"]))

        recognizer = alphabet = None
        if "recognizer" in meta:
            rec_info = meta["recognizer"]
            recognizer = init_recognizer(rec_info["in_channels"],
                                         rec_info["n_classes"], seed=0)
            recognizer.update_tensors(
                {name: Tensor(np.array(arrays[f"rec/{name}"]))
                 for name in recognizer.tensors()})
            _unpack_norms("rec", recognizer, arrays, meta)
            recognizer.set_mode("eval")
            alpha_info = meta["alphabet"]
            alphabet = LabelAlphabet(alpha_info["symbols"],
                                     alpha_info["merge_groups"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing checkpoint field {exc}") from None
    return Checkpoint(model=model, stats=stats, config=meta["config"],
                      recognizer=recognizer, alphabet=alphabet,
                      metrics=meta.get("metrics") or None)
