"""Encoder Z (image -> scalar) and residual predictor T(z) = z + dT(z)."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

IMAGE_SIZE = 100

# (name, kernel/weight shape) in forward order
CONV_LAYERS = [
    ("conv1", (3, 3, 1, 16)),
    ("conv2", (3, 3, 16, 32)),
    ("conv3", (3, 3, 32, 32)),
]
ENCODER_DENSE = [200, 100, 50, 10]
PREDICTOR_DENSE = [10, 30, 30, 10]
# 100 -> pool -> 50 -> pool -> 25
FLAT_FEATURES = 25 * 25 * 32


def _layer_shapes() -> dict[str, tuple[str, tuple[int, ...]]]:
    """Ordered mapping of parameter name -> (group, shape)."""
    shapes: dict[str, tuple[str, tuple[int, ...]]] = {}
    for name, kshape in CONV_LAYERS:
        shapes[f"enc.{name}.w"] = ("encoder", kshape)
        shapes[f"enc.{name}.b"] = ("encoder", (kshape[-1],))
    width = FLAT_FEATURES
    for i, units in enumerate(ENCODER_DENSE, start=1):
        shapes[f"enc.fc{i}.w"] = ("encoder", (width, units))
        shapes[f"enc.fc{i}.b"] = ("encoder", (units,))
        width = units
    shapes["enc.head.w"] = ("encoder", (width, 1))
    shapes["enc.head.b"] = ("encoder", (1,))
    width = 1
    for i, units in enumerate(PREDICTOR_DENSE, start=1):
        shapes[f"pred.fc{i}.w"] = ("predictor", (width, units))
        shapes[f"pred.fc{i}.b"] = ("predictor", (units,))
        width = units
    shapes["pred.head.w"] = ("predictor", (width, 1))
    shapes["pred.head.b"] = ("predictor", (1,))
    return shapes


LAYER_SHAPES = _layer_shapes()


@dataclass
class ModelParams:
    """All trainable tensors, keyed by ``enc.*`` / ``pred.*`` names."""

    tensors: dict[str, Tensor]
    init_seed: int | None = None
    dtype: np.dtype = field(default=np.dtype(np.float32))

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def encoder(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("enc.")}

    @property
    def predictor(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.tensors.items() if k.startswith("pred.")}

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self.tensors.values()]))

    def layer_counts(self) -> list[tuple[str, int]]:
        counts: dict[str, int] = {}
        for name, t in self.tensors.items():
            layer = name.rsplit(".", 1)[0]
            counts[layer] = counts.get(layer, 0) + t.size
        return list(counts.items())

    def clone(self) -> "ModelParams":
        return ModelParams(
            {k: Tensor(v.data.copy(), requires_grad=True, name=k) for k, v in self.tensors.items()},
            self.init_seed,
            self.dtype,
        )

    def astype(self, dtype) -> "ModelParams":
        dtype = np.dtype(dtype)
        return ModelParams(
            {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.tensors.items()},
            self.init_seed,
            dtype,
        )

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for name, t in self.tensors.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()

    def save(self, path: str | Path) -> None:
        ad.save_checkpoint(path, self.tensors)

    @classmethod
    def load(cls, path: str | Path) -> "ModelParams":
        arrays = ad.load_checkpoint(path)
        if list(arrays) != list(LAYER_SHAPES):
            raise ValueError(f"{path}: parameter names do not match the architecture")
        for name, arr in arrays.items():
            if arr.shape != LAYER_SHAPES[name][1]:
                raise ValueError(f"{path}: {name} has shape {arr.shape}, expected {LAYER_SHAPES[name][1]}")
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        receptive = shape[0] * shape[1]
        return shape[2] * receptive, shape[3] * receptive
    return shape[0], shape[1]


def init(rng: np.random.Generator | int, dtype=np.float32) -> ModelParams:
    """Glorot-uniform weights, zero biases."""
    seed = rng if isinstance(rng, (int, np.integer)) else None
    if seed is not None:
        rng = np.random.default_rng(int(seed))
    tensors: dict[str, Tensor] = {}
    for name, (_, shape) in LAYER_SHAPES.items():
        if name.endswith(".b"):
            data = np.zeros(shape)
        else:
            fan_in, fan_out = _fans(shape)
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(tensors, seed, np.dtype(dtype))


def _as_batch(canvases, dtype) -> Tensor:
    if isinstance(canvases, Tensor):
        arr = canvases.data
    else:
        arr = np.asarray(canvases)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[1:] != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"encoder expects {IMAGE_SIZE}x{IMAGE_SIZE} canvases, got {arr.shape}")
    return Tensor(arr.astype(dtype, copy=False)[..., None])


def encode_batch(params: ModelParams, canvases) -> Tensor:
    """Encode N canvases; returns a tensor of shape (N,)."""
    x = _as_batch(canvases, params.dtype)
    p = params.tensors
    h = ad.relu(ad.conv2d(x, p["enc.conv1.w"], p["enc.conv1.b"], padding=1))
    h = ad.relu(ad.conv2d(h, p["enc.conv2.w"], p["enc.conv2.b"], padding=1))
    h = ad.maxpool2d(h, 2)
    h = ad.relu(ad.conv2d(h, p["enc.conv3.w"], p["enc.conv3.b"], padding=1))
    h = ad.maxpool2d(h, 2)
    h = ad.reshape(h, (h.shape[0], -1))
    for i in range(1, len(ENCODER_DENSE) + 1):
        h = ad.tanh(ad.dense(h, p[f"enc.fc{i}.w"], p[f"enc.fc{i}.b"]))
    z = ad.dense(h, p["enc.head.w"], p["enc.head.b"])
    return ad.reshape(z, (z.shape[0],))


def encode(params: ModelParams, canvas) -> float:
    """Scalar code of a single canvas (no tape bookkeeping)."""
    arr = np.asarray(canvas)
    if arr.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ShapeError(f"encoder expects a {IMAGE_SIZE}x{IMAGE_SIZE} canvas, got {arr.shape}")
    return float(encode_batch(params, arr).data[0])


def predict_batch(params: ModelParams, z: Tensor) -> Tensor:
    """T(z) = z + dT(z) for a 1-d tensor of codes."""
    p = params.tensors
    h = ad.reshape(z, (z.shape[0], 1))
    acts = [ad.relu] * (len(PREDICTOR_DENSE) - 1) + [ad.tanh]
    for i, act in enumerate(acts, start=1):
        h = act(ad.dense(h, p[f"pred.fc{i}.w"], p[f"pred.fc{i}.b"]))
    delta = ad.dense(h, p["pred.head.w"], p["pred.head.b"])
    return ad.add(z, ad.reshape(delta, (z.shape[0],)))


def predict(params: ModelParams, z: float) -> float:
    return float(predict_batch(params, Tensor(np.array([z], dtype=params.dtype))).data[0])


def delta_bound(params: ModelParams) -> float:
    """Upper bound on |T(z) - z| given the tanh-clamped pre-head activations."""
    w = params["pred.head.w"].data.astype(np.float64)
    b = params["pred.head.b"].data.astype(np.float64)
    return float(np.abs(w).sum() + np.abs(b).sum())


@dataclass
class GradCheckReport:
    coords: list[tuple[str, tuple[int, ...]]]
    analytic: np.ndarray
    numeric: np.ndarray
    rejected: list[tuple[str, tuple[int, ...]]] = field(default_factory=list)

    @property
    def rel_errors(self) -> np.ndarray:
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), 1e-12)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max()) if len(self.coords) else 0.0

    def layers(self) -> set[str]:
        return {name for name, _ in self.coords}


def _same_pattern(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def gradient_check(
    params: ModelParams,
    canvas,
    num_coords: int = 100,
    rng: np.random.Generator | int = 0,
    h: float = 1e-3,
    max_draws: int | None = None,
    order: int = 4,
) -> GradCheckReport:
    """Compare backprop against central differences of T(Z(canvas)).

    Draws cycle through every parameter tensor of encoder and predictor,
    with a uniform random index inside each. A draw whose +-h perturbation
    flips any ReLU, max-pool or abs branch anywhere in the stencil is rejected (the function is not
    differentiable across that interval) and recorded in ``rejected``.
    ``order`` selects the 2-point or 4-point central stencil (truncation
    error O(h^2) or O(h^4)). Run on float64 parameters.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(int(rng))
    names = list(params.tensors)
    max_draws = 50 * num_coords if max_draws is None else max_draws

    def forward() -> tuple[float, list[np.ndarray]]:
        with ad.Tape() as tape:
            out = predict_batch(params, encode_batch(params, canvas))
        return float(out.data[0]), ad.active_pattern(tape), (tape, out)

    params.zero_grad()
    _, base, (tape, out) = forward()
    tape.backward(out, seed=np.ones(out.shape, out.dtype))
    grads = {n: (np.zeros_like(params[n].data) if params[n].grad is None else params[n].grad.copy()) for n in names}
    params.zero_grad()
    del tape, out

    report = GradCheckReport([], np.zeros(0), np.zeros(0))
    analytic, numeric = [], []
    seen = set()
    offsets = (2, 1, -1, -2) if order == 4 else (1, -1)
    for draw in range(max_draws):
        if len(report.coords) == num_coords:
            break
        name = names[draw % len(names)]
        data = params[name].data
        idx = tuple(int(rng.integers(d)) for d in data.shape)
        if (name, idx) in seen:
            continue
        seen.add((name, idx))
        orig = data[idx]
        values, smooth = {}, True
        for k in offsets:
            data[idx] = orig + k * h
            values[k], pattern, _ = forward()
            smooth = smooth and _same_pattern(base, pattern)
        data[idx] = orig
        if not smooth:
            report.rejected.append((name, idx))
            continue
        if order == 4:
            diff = (8 * (values[1] - values[-1]) - (values[2] - values[-2])) / (12 * h)
        else:
            diff = (values[1] - values[-1]) / (2 * h)
        report.coords.append((name, idx))
        analytic.append(float(grads[name][idx]))
        numeric.append(diff)
    report.analytic = np.array(analytic)
    report.numeric = np.array(numeric)
    return report
