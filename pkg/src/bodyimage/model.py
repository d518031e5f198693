"""Two-branch forward model ``motor -> (predicted image, predicted error)``.

A shared trunk of two fully-connected SELU layers feeds a low-resolution
32-channel feature map to two structurally identical branches.  Each branch
upsamples three times (nearest x2 followed by a 3x3 convolution) and then
tapers 32 -> 16 -> 8 -> 3 channels with plain convolutions, the last one
ReLU-activated so both outputs are nonnegative.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad

log = logging.getLogger(__name__)

TRUNK_WIDTH = 128
FEATURE_CHANNELS = 32
TAPER = (16, 8, 3)
BRANCHES = ("image", "error")


def layer_shapes(image_dims: tuple[int, int], motor_dim: int) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every parameter array."""
    h, w = image_dims
    if h < 1 or w < 1:
        raise ValueError(f"image dims {image_dims} must be positive")
    h0, w0 = -(-h // 8), -(-w // 8)
    shapes: dict[str, tuple[int, ...]] = {
        "fc1.w": (TRUNK_WIDTH, motor_dim),
        "fc1.b": (TRUNK_WIDTH,),
        "fc2.w": (h0 * w0 * FEATURE_CHANNELS, TRUNK_WIDTH),
        "fc2.b": (h0 * w0 * FEATURE_CHANNELS,),
    }
    for branch in BRANCHES:
        for i in range(1, 4):
            shapes[f"{branch}.up{i}.k"] = (3, 3, FEATURE_CHANNELS, FEATURE_CHANNELS)
            shapes[f"{branch}.up{i}.b"] = (FEATURE_CHANNELS,)
        c_in = FEATURE_CHANNELS
        for i, c_out in enumerate(TAPER, start=1):
            shapes[f"{branch}.conv{i}.k"] = (3, 3, c_in, c_out)
            shapes[f"{branch}.conv{i}.b"] = (c_out,)
            c_in = c_out
    return shapes


@dataclass
class NetworkParams:
    image_dims: tuple[int, int]
    motor_dim: int
    arrays: dict[str, np.ndarray]

    @property
    def feature_dims(self) -> tuple[int, int, int]:
        h, w = self.image_dims
        return -(-h // 8), -(-w // 8), FEATURE_CHANNELS

    @property
    def n_parameters(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.image_dims, self.motor_dim, {k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.image_dims, self.motor_dim, {k: v.astype(dtype) for k, v in self.arrays.items()})

    def predict(self, motors: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return predict(self, motors)

    def save(self, path: str | Path) -> None:
        ad.save_arrays(list(self.arrays.values()), path)

    @classmethod
    def load(cls, path: str | Path, image_dims: tuple[int, int], motor_dim: int) -> "NetworkParams":
        shapes = layer_shapes(image_dims, motor_dim)
        arrays = ad.load_arrays(path)
        if [a.shape for a in arrays] != list(shapes.values()):
            raise ad.CheckpointError(f"{path}: layer shapes do not match a {image_dims} / {motor_dim}-joint network")
        return cls(tuple(image_dims), motor_dim, dict(zip(shapes, arrays)))


def build_network(image_dims: tuple[int, int], motor_dim: int, seed=0, dtype=np.float32) -> NetworkParams:
    """Weights ~ N(0, 1/fan_in), biases zero."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in layer_shapes(image_dims, motor_dim).items():
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape, dtype=dtype)
        else:
            fan_in = shape[1] if len(shape) == 2 else 9 * shape[2]
            arrays[name] = (rng.standard_normal(shape) / np.sqrt(fan_in)).astype(dtype)
    return NetworkParams(tuple(image_dims), motor_dim, arrays)


# ---------------------------------------------------------------------------
# Forward pass
# ---------------------------------------------------------------------------


def _branch(tape_params: dict[str, ad.Tensor], branch: str, h: ad.Tensor) -> ad.Tensor:
    p = tape_params
    for i in range(1, 4):
        h = ad.selu(ad.upsample_conv2d(h, p[f"{branch}.up{i}.k"], p[f"{branch}.up{i}.b"]))
    h = ad.selu(ad.conv2d(h, p[f"{branch}.conv1.k"], p[f"{branch}.conv1.b"]))
    h = ad.selu(ad.conv2d(h, p[f"{branch}.conv2.k"], p[f"{branch}.conv2.b"]))
    return ad.relu(ad.conv2d(h, p[f"{branch}.conv3.k"], p[f"{branch}.conv3.b"]))


def forward(params: NetworkParams, tape_params: dict[str, ad.Tensor], motors: ad.Tensor) -> tuple[ad.Tensor, ad.Tensor]:
    """Record the network on ``motors.tape``; ``motors`` is ``(N, N_m)``."""
    if motors.value.ndim != 2 or motors.shape[1] != params.motor_dim:
        raise ad.ShapeError(f"motor batch shape {motors.shape} incompatible with {params.motor_dim} joints")
    p = tape_params
    h = ad.selu(ad.fully_connected(motors, p["fc1.w"], p["fc1.b"]))
    h = ad.selu(ad.fully_connected(h, p["fc2.w"], p["fc2.b"]))
    h = ad.reshape(h, (motors.shape[0],) + params.feature_dims)
    s_hat, e_hat = _branch(p, "image", h), _branch(p, "error", h)
    # sizes that are not multiples of 8 are decoded on the next multiple and centre-cropped
    (height, width), (h0, w0, _) = params.image_dims, params.feature_dims
    if (height, width) != (8 * h0, 8 * w0):
        top, left = (8 * h0 - height) // 2, (8 * w0 - width) // 2
        s_hat = ad.crop2d(s_hat, top, left, height, width)
        e_hat = ad.crop2d(e_hat, top, left, height, width)
    return s_hat, e_hat


def register(tape: ad.Tape, params: NetworkParams) -> dict[str, ad.Tensor]:
    return {name: tape.variable(value, name=name) for name, value in params.arrays.items()}


def predict(params: NetworkParams, motors: np.ndarray, chunk: int = 250) -> tuple[np.ndarray, np.ndarray]:
    """Predicted image and predicted error for one motor vector or a batch.

    Returns ``(H, W, 3)`` arrays for a single vector, ``(N, H, W, 3)`` for a batch.
    """
    motors = np.asarray(motors)
    single = motors.ndim == 1
    batch = motors[None] if single else motors
    if batch.ndim != 2 or batch.shape[1] != params.motor_dim:
        raise ad.ShapeError(f"motor shape {motors.shape} incompatible with {params.motor_dim} joints")
    dtype = next(iter(params.arrays.values())).dtype
    images, errors = [], []
    for start in range(0, len(batch), chunk):
        tape = ad.Tape(dtype)
        s_hat, e_hat = forward(params, register(tape, params), tape.constant(batch[start:start + chunk]))
        images.append(s_hat.value)
        errors.append(e_hat.value)
        tape.clear()
    if not images:
        h, w = params.image_dims
        empty = np.zeros((0, h, w, 3), dtype=dtype)
        return empty, empty.copy()
    s, e = np.concatenate(images), np.concatenate(errors)
    return (s[0], e[0]) if single else (s, e)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def loss_rec(predictions: ad.Tensor, targets: ad.Tensor) -> ad.Tensor:
    """Mean absolute reconstruction error over the batch and every component."""
    return ad.l1_mean(predictions, targets)


def loss_err(error_predictions: ad.Tensor, predictions: ad.Tensor, targets: ad.Tensor, detach: bool = True) -> ad.Tensor:
    """Mean absolute gap between the predicted error and the actual ``|s_hat - s|``.

    With ``detach`` the actual error is a fixed target, so this loss never
    pushes on the image branch.
    """
    actual = ad.absolute(ad.sub(predictions, targets))
    if detach:
        actual = ad.stop_gradient(actual)
    return ad.l1_mean(error_predictions, actual)


def loss_total(rec: ad.Tensor, err: ad.Tensor, alpha: float) -> ad.Tensor:
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return rec
    return ad.add(rec, ad.scale(err, alpha))


# ---------------------------------------------------------------------------
# Optimisation
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 5000
    batch_size: int = 100
    lr_start: float = 1e-3
    lr_end: float = 1e-5
    alpha_ramp_end: int | None = None  # defaults to iterations // 2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    precision: str = "float32"
    detach_error_target: bool = True

    def __post_init__(self):
        if self.alpha_ramp_end is None:
            self.alpha_ramp_end = max(self.iterations // 2, 1)
        self.validate()

    def validate(self) -> None:
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 < self.alpha_ramp_end <= max(self.iterations, 1):
            raise ValueError("need 0 < alpha_ramp_end <= iterations")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def alpha(self, t: int) -> float:
        return min(t / self.alpha_ramp_end, 1.0)

    def learning_rate(self, t: int) -> float:
        if self.iterations == 0:
            return self.lr_start
        return self.lr_start + (self.lr_end - self.lr_start) * t / self.iterations


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: NetworkParams) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in params.arrays.items()},
                   {k: np.zeros_like(a) for k, a in params.arrays.items()})


def adam_step(arrays: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update, applied in place to ``arrays`` and ``state``."""
    if arrays.keys() != grads.keys():
        raise ValueError("parameter and gradient names differ")
    state.step += 1
    t = state.step
    corr1 = 1.0 - beta1 ** t
    corr2 = 1.0 - beta2 ** t
    for name, g in grads.items():
        p = arrays[name]
        if g.shape != p.shape:
            raise ad.ShapeError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
        dtype = p.dtype.type
        m, v = state.m[name], state.v[name]
        m *= dtype(beta1)
        m += dtype(1 - beta1) * g
        v *= dtype(beta2)
        v += dtype(1 - beta2) * (g * g)
        p -= dtype(lr) * (m / dtype(corr1)) / (np.sqrt(v / dtype(corr2)) + dtype(eps))


@dataclass
class HistoryRow:
    iteration: int
    loss_rec: float
    loss_err: float
    alpha: float
    lr: float


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[HistoryRow] = field(default_factory=list)

    def history_csv(self) -> str:
        lines = ["iter,loss_rec,loss_err,alpha,lr"]
        lines += [f"{r.iteration},{r.loss_rec!r},{r.loss_err!r},{r.alpha!r},{r.lr!r}" for r in self.history]
        return "\n".join(lines) + "\n"


def gradients(params: NetworkParams, motors: np.ndarray, images: np.ndarray, alpha: float,
              detach: bool = True) -> tuple[dict[str, np.ndarray], float, float]:
    """Gradient of the total loss on one batch, plus the two loss values."""
    dtype = next(iter(params.arrays.values())).dtype
    tape = ad.Tape(dtype)
    tp = register(tape, params)
    s_hat, e_hat = forward(params, tp, tape.constant(motors))
    target = tape.constant(images)
    rec = loss_rec(s_hat, target)
    err = loss_err(e_hat, s_hat, target, detach=detach)
    total = loss_total(rec, err, alpha)
    try:
        grads = ad.backward(tape, total)
        return {name: grads[t] for name, t in tp.items()}, float(rec.value), float(err.value)
    finally:
        tape.clear()


def train(motors: np.ndarray, images: np.ndarray, config: TrainConfig,
          initial: NetworkParams | None = None, progress_every: int = 0) -> TrainResult:
    """Minimise ``L_rec + alpha * L_err`` with Adam on random mini-batches.

    ``motors`` is ``(n, N_m)`` and ``images`` ``(n, H, W, 3)``.  Batches are
    drawn with replacement from a generator seeded by ``config.seed``, which
    also seeds the initial weights when ``initial`` is not given.
    """
    motors = np.asarray(motors)
    images = np.asarray(images)
    if len(motors) == 0:
        raise ValueError("cannot train on an empty dataset")
    if len(motors) != len(images):
        raise ValueError("motor and image counts differ")
    dtype = config.dtype
    init_seed, batch_seed = np.random.SeedSequence(config.seed).spawn(2)
    if initial is None:
        params = build_network(images.shape[1:3], motors.shape[1], seed=init_seed, dtype=dtype)
    else:
        params = initial.astype(dtype)
    motors = motors.astype(dtype)
    images = images.astype(dtype)
    rng = np.random.default_rng(batch_seed)
    state = AdamState.zeros_like(params)
    history = []
    for t in range(config.iterations):
        idx = rng.integers(0, len(motors), size=config.batch_size)
        alpha = config.alpha(t)
        lr = config.learning_rate(t)
        grads, rec, err = gradients(params, motors[idx], images[idx], alpha, config.detach_error_target)
        adam_step(params.arrays, grads, state, lr, config.beta1, config.beta2, config.eps)
        history.append(HistoryRow(t, rec, err, alpha, lr))
        if progress_every and (t % progress_every == 0 or t == config.iterations - 1):
            log.info("iter %d  L_rec %.5f  L_err %.5f  alpha %.3f  lr %.2e", t, rec, err, alpha, lr)
    return TrainResult(params, history)


def config_dict(config: TrainConfig) -> dict:
    return asdict(config)


def fingerprint(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(json.dumps([str(a.dtype), a.shape]).encode())
        h.update(a.tobytes())
    return h.hexdigest()
