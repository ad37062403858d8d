"""The gesture autoencoder.

The encoder maps kinematics (B, C, t) through two batch-normalized convs
and a ReLU to a non-negative gestural score (B, D, t).  The decoder is a
single convolution whose kernel bank IS the gesture dictionary: gesture d
is the (T, C) slice kernels[:, :, d], a short multichannel articulator
trajectory.  ``convolutive_synthesis`` is the literal shifted-column sum
the decoder factorizes, kept as an independently coded reference; the
causal decode alignment reproduces it exactly.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (
    BatchNormState,
    ShapeError,
    Tensor,
    as_tensor,
    batchnorm1d,
    conv1d,
    mul,
    relu,
    transpose,
)


@dataclass
class GestureDictionary:
    """Decoder kernel bank (T, C, D): kernel length x channels x gestures.

    Values carry no sign constraint; only the scores are non-negative.
    At 200 Hz the default T=41 spans about 200 ms of articulator movement.
    """
    kernels: Tensor

    def __post_init__(self):
        self.kernels = as_tensor(self.kernels)
        if self.kernels.ndim != 3:
            raise ShapeError(f"dictionary must be (T, C, D), got {self.kernels.shape}")

    @property
    def kernel_len(self) -> int:
        return self.kernels.shape[0]

    @property
    def channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def n_gestures(self) -> int:
        return self.kernels.shape[2]

    def gesture(self, d: int) -> np.ndarray:
        """The (T, C) trajectory of one gesture."""
        return self.kernels.data[:, :, d]

    def duration_seconds(self, sample_rate: float) -> float:
        return self.kernel_len / sample_rate


@dataclass
class GesturalScore:
    """Non-negative activation matrix (D, t) at the source frame rate."""
    activations: Tensor
    frame_rate: float = 200.0

    def __post_init__(self):
        self.activations = as_tensor(self.activations)
        if self.activations.ndim != 2:
            raise ShapeError(f"score must be (D, t), got {self.activations.shape}")
        if np.any(self.activations.data < 0):
            raise ValueError("gestural scores are non-negative")

    @property
    def n_gestures(self) -> int:
        return self.activations.shape[0]

    @property
    def n_frames(self) -> int:
        return self.activations.shape[1]


@dataclass
class EncoderParams:
    """Two conv layers (15 then 5 wide) with a batch norm after each.

    The receptive field is 15 + 5 - 1 = 19 frames.
    """
    conv1: Tensor
    norm1: BatchNormState
    conv2: Tensor
    norm2: BatchNormState

    @property
    def in_channels(self) -> int:
        return self.conv1.shape[1]

    @property
    def n_gestures(self) -> int:
        return self.conv2.shape[2]


def init_encoder(channels: int, n_gestures: int, seed: int,
                 hidden: int = 64, k1: int = 15, k2: int = 5) -> EncoderParams:
    """Fan-in-scaled uniform kernels, fresh norm states."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4C0]))
    b1 = 1.0 / np.sqrt(k1 * channels)
    b2 = 1.0 / np.sqrt(k2 * hidden)
    return EncoderParams(
        conv1=Tensor(rng.uniform(-b1, b1, size=(k1, channels, hidden))),
        norm1=BatchNormState(hidden),
        conv2=Tensor(rng.uniform(-b2, b2, size=(k2, hidden, n_gestures))),
        norm2=BatchNormState(n_gestures),
    )


def encode(x: Tensor, params: EncoderParams, mask: np.ndarray | None = None) -> Tensor:
    """Non-negative gestural scores (B, D, t) for kinematics (B, C, t).

    relu(bn(conv2(bn(conv1(x))))).  With a (B, t) mask, norm statistics use
    only real frames and padding is re-zeroed between layers, so scores at
    valid frames match an unpadded forward pass exactly.
    """
    x = as_tensor(x)
    if x.ndim != 3 or x.shape[1] != params.in_channels:
        raise ShapeError(f"expected (B, {params.in_channels}, t), got {x.shape}")
    mask_b = None if mask is None else Tensor(np.asarray(mask, dtype=np.float64)[:, None, :])

    def masked(h):
        return h if mask_b is None else mul(h, mask_b)

    h = masked(batchnorm1d(conv1d(x, params.conv1), params.norm1, mask=mask))
    h = batchnorm1d(conv1d(h, params.conv2), params.norm2, mask=mask)
    return masked(relu(h))


def decode(score: Tensor, dictionary: Tensor, bias: Tensor | None = None,
           alignment: str = "centered") -> Tensor:
    """Resynthesize kinematics (B, C, t) from scores (B, D, t).

    ``centered`` is the same-padded layout the model trains with.
    ``causal`` places each gesture's onset at its activation frame
    (left pad T-1, kernel time-reversed) and equals
    :func:`convolutive_synthesis` exactly.
    """
    score, dictionary = as_tensor(score), as_tensor(dictionary)
    if dictionary.ndim != 3:
        raise ShapeError(f"dictionary must be (T, C, D), got {dictionary.shape}")
    kernel_len = dictionary.shape[0]
    if score.shape[-2] != dictionary.shape[2]:
        raise ShapeError(f"score has {score.shape[-2]} gestures, "
                         f"dictionary holds {dictionary.shape[2]}")
    kernel = transpose(dictionary, (0, 2, 1))  # (T, D, C)
    if alignment == "centered":
        return conv1d(score, kernel, bias)
    if alignment == "causal":
        flipped = transpose(dictionary, (0, 2, 1)).data[::-1]
        return conv1d(score, Tensor(flipped.copy()), bias,
                      pad_left=kernel_len - 1, pad_right=0)
    raise ValueError(f"unknown alignment {alignment!r}")


def convolutive_synthesis(dictionary, score) -> np.ndarray:
    """Reference synthesis: X[c, tau] = sum_i sum_d W[i, c, d] * H[d, tau - i].

    The shifted-column sum written as a plain loop over lag and gesture
    (columns before time zero count as zero).  Not differentiable and not
    fast; it exists to pin down what the decoder must compute.
    """
    w = dictionary.data if isinstance(dictionary, Tensor) else np.asarray(dictionary, float)
    h = score.data if isinstance(score, Tensor) else np.asarray(score, float)
    kernel_len, channels, n_gestures = w.shape
    if h.shape[0] != n_gestures:
        raise ShapeError("score/dictionary gesture counts differ")
    n_frames = h.shape[1]
    out = np.zeros((channels, n_frames))
    for lag in range(kernel_len):
        for d in range(n_gestures):
            for c in range(channels):
                out[c, lag:] += w[lag, c, d] * h[d, :n_frames - lag]
    return out


# ---------------------------------------------------------------------------
# k-means dictionary initialization
# ---------------------------------------------------------------------------

def kmeans(points: np.ndarray, k: int, seed: int, tol: float = 1e-6,
           max_iter: int = 300) -> tuple[np.ndarray, np.ndarray, list[float]]:
    """Lloyd's algorithm with k-means++ seeding.

    Runs until the max center shift drops below ``tol`` or ``max_iter``
    passes.  Returns (centers, labels, per-iteration inertia); the inertia
    sequence is non-increasing.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} points, got {n}")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x53ED]))

    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(n, p=d2 / total)
        else:
            idx = rng.integers(n)
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))

    sq_norms = (points ** 2).sum(axis=1)
    inertia_history: list[float] = []
    for _ in range(max_iter):
        dists = sq_norms[:, None] - 2.0 * points @ centers.T + (centers ** 2).sum(axis=1)
        labels = np.argmin(dists, axis=1)
        inertia = float(np.maximum(dists.min(axis=1), 0.0).sum())
        inertia_history.append(inertia)
        new_centers = centers.copy()
        for j in range(k):
            members = labels == j
            if members.any():
                new_centers[j] = points[members].mean(axis=0)
            else:
                new_centers[j] = points[np.argmax(dists.min(axis=1))]
        shift = np.sqrt(((new_centers - centers) ** 2).sum(axis=1)).max()
        centers = new_centers
        if shift < tol:
            break
    return centers, labels, inertia_history


def sliding_windows(frames: np.ndarray, window: int, stride: int = 1) -> np.ndarray:
    """All length-``window`` segments of a (C, t) signal as flat
    frame-major supervectors, shape (n_windows, window * C)."""
    channels, n_frames = frames.shape
    if n_frames < window:
        return np.empty((0, window * channels))
    view = np.lib.stride_tricks.sliding_window_view(frames, window, axis=1)
    return np.ascontiguousarray(
        view[:, ::stride].transpose(1, 2, 0)).reshape(-1, window * channels)


def kmeans_init(corpus, n_gestures: int, window: int = 41, stride: int = 1,
                seed: int = 0, max_windows: int = 20_000,
                unit_norm: bool = True) -> GestureDictionary:
    """Cluster all sliding kinematics windows and use the centers as gestures.

    Each center (a window * C supervector) reshapes to one (T, C) kernel
    slice.  Window sets beyond ``max_windows`` are subsampled (seeded) to
    bound memory; the paper-scale stride stays 1.
    """
    chunks = [sliding_windows(u.frames if hasattr(u, "frames") else np.asarray(u),
                              window, stride) for u in corpus]
    points = np.concatenate([c for c in chunks if c.size], axis=0) \
        if any(c.size for c in chunks) else np.empty((0, 0))
    total_frames = sum((u.frames if hasattr(u, "frames") else np.asarray(u)).shape[1]
                       for u in corpus)
    if total_frames < n_gestures * window:
        raise ValueError(f"corpus has {total_frames} frames; "
                         f"needs >= {n_gestures * window} for {n_gestures} gestures")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x71D0]))
    if points.shape[0] > max_windows:
        keep = np.sort(rng.choice(points.shape[0], size=max_windows, replace=False))
        points = points[keep]
    distinct = {p.tobytes() for p in points}
    if len(distinct) < n_gestures:
        raise ValueError(f"only {len(distinct)} distinct windows for "
                         f"{n_gestures} gestures")
    centers, _, _ = kmeans(points, n_gestures, seed=seed)
    channels = corpus[0].frames.shape[0] if hasattr(corpus[0], "frames") \
        else np.asarray(corpus[0]).shape[0]
    kernels = np.stack([c.reshape(window, channels) for c in centers], axis=2)
    if unit_norm:
        # scale freedom lives in the scores (norm + ReLU absorb it); unit
        # kernels keep the initial decode at data scale
        norms = np.sqrt((kernels ** 2).sum(axis=(0, 1), keepdims=True))
        kernels = kernels / np.maximum(norms, np.finfo(np.float64).tiny)
    return GestureDictionary(Tensor(kernels))


# ---------------------------------------------------------------------------
# Full model
# ---------------------------------------------------------------------------

@dataclass
class GestureModel:
    """Encoder parameters plus the gesture dictionary (= decoder kernel).

    The dictionary is an ordinary trainable parameter after its k-means
    initialization; the optional decoder bias absorbs channel means.
    """
    encoder: EncoderParams
    dictionary: Tensor
    bias: Tensor | None

    @property
    def channels(self) -> int:
        return self.dictionary.shape[1]

    @property
    def n_gestures(self) -> int:
        return self.dictionary.shape[2]

    @property
    def kernel_len(self) -> int:
        return self.dictionary.shape[0]

    def tensors(self) -> dict[str, Tensor]:
        named = {
            "encoder.conv1": self.encoder.conv1,
            "encoder.conv2": self.encoder.conv2,
            "encoder.norm1.gamma": self.encoder.norm1.gamma,
            "encoder.norm1.beta": self.encoder.norm1.beta,
            "encoder.norm2.gamma": self.encoder.norm2.gamma,
            "encoder.norm2.beta": self.encoder.norm2.beta,
            "dictionary": self.dictionary,
        }
        if self.bias is not None:
            named["bias"] = self.bias
        return named

    def update_tensors(self, named: dict[str, Tensor]) -> None:
        enc = self.encoder
        setters = {
            "encoder.conv1": lambda v: setattr(enc, "conv1", v),
            "encoder.conv2": lambda v: setattr(enc, "conv2", v),
            "encoder.norm1.gamma": lambda v: setattr(enc.norm1, "gamma", v),
            "encoder.norm1.beta": lambda v: setattr(enc.norm1, "beta", v),
            "encoder.norm2.gamma": lambda v: setattr(enc.norm2, "gamma", v),
            "encoder.norm2.beta": lambda v: setattr(enc.norm2, "beta", v),
            "dictionary": lambda v: setattr(self, "dictionary", v),
            "bias": lambda v: setattr(self, "bias", v),
        }
        for name, value in named.items():
            setters[name](value)

    def norm_states(self) -> list[BatchNormState]:
        return [self.encoder.norm1, self.encoder.norm2]

    def set_mode(self, mode: str):
        for st in self.norm_states():
            st.mode = mode
        return self


def init_model(channels: int, n_gestures: int, seed: int, kernel_len: int = 41,
               corpus=None, decoder_bias: bool = True,
               kmeans_window: int | None = None,
               kmeans_max_windows: int = 20_000) -> GestureModel:
    """Random encoder; dictionary from k-means over ``corpus`` when given,
    otherwise fan-in uniform."""
    encoder = init_encoder(channels, n_gestures, seed)
    if corpus is not None:
        window = kernel_len if kmeans_window is None else kmeans_window
        dictionary = kmeans_init(corpus, n_gestures, window=window, seed=seed,
                                 max_windows=kmeans_max_windows).kernels
    else:
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xD1C7]))
        bound = 1.0 / np.sqrt(kernel_len * n_gestures)
        dictionary = Tensor(rng.uniform(-bound, bound,
                                        size=(kernel_len, channels, n_gestures)))
    bias = Tensor(np.zeros(channels)) if decoder_bias else None
    return GestureModel(encoder=encoder, dictionary=dictionary, bias=bias)


def model_forward(x: Tensor, model: GestureModel,
                  mask: np.ndarray | None = None) -> tuple[Tensor, Tensor]:
    """(scores, reconstruction) for a batch of kinematics."""
    score = encode(x, model.encoder, mask=mask)
    xhat = decode(score, model.dictionary, model.bias)
    return score, xhat
