"""Finite-difference verification suite over every differentiable piece:
each item draws seeded random instances and compares analytic gradients
against central differences.  The CLI surfaces it as `gradcheck`; the
acceptance tests call :func:`run_gradcheck` directly."""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ctc as ctc_mod
from . import factorization as fac
from . import objectives as obj
from . import tensor as tn

TOLERANCE = 1e-4


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    points: int
    passed: bool


def _away_from_zero(values: np.ndarray, floor: float = 5e-2) -> np.ndarray:
    """Push entries off the ReLU/|x| kinks so central differences are clean."""
    return np.where(np.abs(values) < floor, floor * 2.0, values)


def _check_conv1d(rng: np.random.Generator) -> float:
    k = int(rng.integers(1, 7))
    dil = int(rng.integers(1, 3))
    x = tn.Tensor(rng.standard_normal((2, 2, 7)))
    kernel = tn.Tensor(rng.standard_normal((k, 2, 3)))
    bias = tn.Tensor(rng.standard_normal(3))
    probe = tn.Tensor(rng.standard_normal((2, 3, 7)))

    def f(a, b, c):
        return tn.tsum(tn.mul(tn.conv1d(a, b, c, dilation=dil), probe))

    return tn.finite_difference_check(f, [x, kernel, bias])


def _check_relu(rng: np.random.Generator) -> float:
    x = tn.Tensor(_away_from_zero(rng.standard_normal(12)))
    probe = tn.Tensor(rng.standard_normal(12))
    return tn.finite_difference_check(
        lambda t: tn.tsum(tn.mul(tn.relu(t), probe)), [x])


def _check_batchnorm_train(rng: np.random.Generator) -> float:
    x = tn.Tensor(rng.standard_normal((2, 3, 5)))
    gamma = tn.Tensor(rng.standard_normal(3) + 1.5)
    beta = tn.Tensor(rng.standard_normal(3))
    probe = tn.Tensor(rng.standard_normal((2, 3, 5)))

    def f(a, g, b):
        state = tn.BatchNormState(3)
        state.gamma, state.beta = g, b
        return tn.tsum(tn.mul(tn.batchnorm1d(a, state), probe))

    return tn.finite_difference_check(f, [x, gamma, beta])


def _check_batchnorm_eval(rng: np.random.Generator) -> float:
    state = tn.BatchNormState(3)
    tn.batchnorm1d(tn.Tensor(rng.standard_normal((4, 3, 6))), state)
    state.eval()
    probe = tn.Tensor(rng.standard_normal((1, 3, 4)))

    def f(a, g, b):
        state.gamma, state.beta = g, b
        return tn.tsum(tn.mul(tn.batchnorm1d(a, state), probe))

    points = [tn.Tensor(rng.standard_normal((1, 3, 4))),
              tn.Tensor(rng.standard_normal(3) + 1.0),
              tn.Tensor(rng.standard_normal(3))]
    return tn.finite_difference_check(f, points)


def _check_batchnorm_masked(rng: np.random.Generator) -> float:
    mask = np.ones((2, 6))
    mask[0, 4:] = 0.0
    probe = tn.Tensor(rng.standard_normal((2, 3, 6)) * mask[:, None, :])

    def f(a, g, b):
        state = tn.BatchNormState(3)
        state.gamma, state.beta = g, b
        return tn.tsum(tn.mul(tn.batchnorm1d(a, state, mask=mask), probe))

    points = [tn.Tensor(rng.standard_normal((2, 3, 6)) * mask[:, None, :]),
              tn.Tensor(rng.standard_normal(3) + 1.5),
              tn.Tensor(rng.standard_normal(3))]
    return tn.finite_difference_check(f, points)


def _check_log_softmax(rng: np.random.Generator) -> float:
    x = tn.Tensor(rng.standard_normal((3, 4)))
    probe = tn.Tensor(rng.standard_normal((3, 4)))
    return tn.finite_difference_check(
        lambda t: tn.tsum(tn.mul(tn.log_softmax(t, axis=1), probe)), [x])


def _check_hoyer(rng: np.random.Generator) -> float:
    h = tn.Tensor(_away_from_zero(rng.standard_normal((3, 7))))
    probe = tn.Tensor(rng.standard_normal(3))
    return tn.finite_difference_check(
        lambda t: tn.tsum(tn.mul(obj.hoyer_rows(t), probe)), [h])


def _check_time_sparsity(rng: np.random.Generator) -> float:
    h = tn.Tensor(np.abs(rng.standard_normal((3, 7))) + 0.1)
    return tn.finite_difference_check(lambda t: obj.time_sparsity(t), [h])


def _check_channel_sparsity(rng: np.random.Generator) -> float:
    h = tn.Tensor(np.abs(rng.standard_normal((3, 7))) + 0.1)
    return tn.finite_difference_check(lambda t: obj.channel_sparsity(t), [h])


def _check_entropy(rng: np.random.Generator) -> float:
    h = tn.Tensor(np.abs(rng.standard_normal((4, 6))) + 0.2)
    return tn.finite_difference_check(lambda t: obj.entropy_of_sparseness(t), [h])


def _check_reconstruction(rng: np.random.Generator) -> float:
    x = tn.Tensor(rng.standard_normal((2, 6)))
    xh = tn.Tensor(rng.standard_normal((2, 6)))
    err_mse = tn.finite_difference_check(
        lambda a, b: obj.reconstruction_loss(a, b).mse, [x, xh])
    err_norm = tn.finite_difference_check(
        lambda a, b: obj.reconstruction_loss(a, b).norm, [x, xh])
    return max(err_mse, err_norm)


def _check_resynthesis(rng: np.random.Generator) -> float:
    w = obj.LossWeights(2.0, 1.0, 0.5, 1.0)
    x = tn.Tensor(rng.standard_normal((1, 2, 7)))
    xh = tn.Tensor(rng.standard_normal((1, 2, 7)))
    h = tn.Tensor(np.abs(rng.standard_normal((1, 3, 7))) + 0.1)

    def f(a, b):
        return obj.resynthesis_loss(x, a, b, w).objective

    return tn.finite_difference_check(f, [xh, h])


def _check_ctc(rng: np.random.Generator) -> float:
    lp = rng.standard_normal((5, 3))
    lp -= np.logaddexp.reduce(lp, axis=1, keepdims=True)
    target = [1, 2] if rng.integers(2) else [2, 1]
    return tn.finite_difference_check(
        lambda t: ctc_mod.ctc_loss(t, target), [tn.Tensor(lp)])


def _check_autoencoder(rng: np.random.Generator) -> float:
    model = fac.init_model(channels=2, n_gestures=2, seed=int(rng.integers(1 << 16)),
                           kernel_len=3)
    x = tn.Tensor(rng.standard_normal((2, 2, 8)))
    probe = tn.Tensor(rng.standard_normal((2, 2, 8)))
    names = list(model.tensors())

    def f(*tensors):
        model.update_tensors(dict(zip(names, tensors)))
        _, xhat = fac.model_forward(x, model)
        return tn.tsum(tn.mul(xhat, probe))

    points = [model.tensors()[n] for n in names]
    return tn.finite_difference_check(f, points, max_coords=6, rng=rng)


def _check_recognizer_ctc(rng: np.random.Generator) -> float:
    params = ctc_mod.init_recognizer(in_channels=2, n_classes=3,
                                     seed=int(rng.integers(1 << 16)),
                                     front_width=3, context_width=4, proj_width=3)
    x0 = tn.Tensor(rng.standard_normal((1, 2, 8)))
    front = params.front_kernels[0]
    out_k = params.out_kernel

    def f(x, k_front, k_out):
        params.front_kernels[0] = k_front
        params.out_kernel = k_out
        lp = tn.reshape(tn.narrow(ctc_mod.recognize(x, params), 0, 0, 1), (8, 3))
        return ctc_mod.ctc_loss(lp, [1, 2])

    err = tn.finite_difference_check(f, [x0, front, out_k], max_coords=8, rng=rng)
    params.front_kernels[0] = front
    params.out_kernel = out_k
    return err


DEFAULT_ITEMS: list[tuple[str, Callable]] = [
    ("conv1d", _check_conv1d),
    ("relu", _check_relu),
    ("batchnorm_train", _check_batchnorm_train),
    ("batchnorm_eval", _check_batchnorm_eval),
    ("batchnorm_masked", _check_batchnorm_masked),
    ("log_softmax", _check_log_softmax),
    ("hoyer_rows", _check_hoyer),
    ("time_sparsity", _check_time_sparsity),
    ("channel_sparsity", _check_channel_sparsity),
    ("entropy_of_sparseness", _check_entropy),
    ("reconstruction_loss", _check_reconstruction),
    ("resynthesis_loss", _check_resynthesis),
    ("ctc_loss", _check_ctc),
    ("autoencoder_params", _check_autoencoder),
    ("recognizer_ctc", _check_recognizer_ctc),
]


def run_gradcheck(points: int = 100, seed: int = 0,
                  items: list[tuple[str, Callable]] | None = None,
                  tolerance: float = TOLERANCE) -> list[GradCheckRow]:
    """Evaluate every item at ``points`` seeded random instances."""
    rows = []
    for name, fn in (items if items is not None else DEFAULT_ITEMS):
        tag = zlib.crc32(name.encode("utf-8"))
        rng = np.random.default_rng(np.random.SeedSequence([seed, tag]))
        worst = 0.0
        for _ in range(points):
            worst = max(worst, fn(rng))
        rows.append(GradCheckRow(name=name, max_rel_err=worst, points=points,
                                 passed=worst < tolerance))
    return rows
