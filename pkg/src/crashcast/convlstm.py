"""Single-layer ConvLSTM forecaster for one rectangular region.

The cell follows the classic gate equations without peephole terms::

    i = sigmoid(W_xi * X + W_hi * h + b_i)
    f = sigmoid(W_xf * X + W_hf * h + b_f)
    o = sigmoid(W_xo * X + W_ho * h + b_o)
    C' = f . C + i . tanh(W_xc * X + W_hc * h + b_c)
    h' = o . tanh(C')

and the last hidden state goes through a 1x1 convolution and a softplus to
give a positive next-week map.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import List

import numpy as np

from . import autodiff as ad
from .archive import read_archive, write_archive
from .cube import SpaceTimeCube, SplitIndex

GATES = ("i", "f", "o", "c")
KERNEL_NAMES = ("w_xi", "w_hi", "w_xf", "w_hf", "w_xo", "w_ho", "w_xc", "w_hc")
BIAS_NAMES = ("b_i", "b_f", "b_o", "b_c")
READOUT_NAMES = ("w_out", "b_out")


class ConvLSTMError(ValueError):
    pass


@dataclass
class ConvLSTMParams:
    """The eight gate kernels, four gate biases and the 1x1 readout."""

    w_xi: ad.Tensor
    w_hi: ad.Tensor
    w_xf: ad.Tensor
    w_hf: ad.Tensor
    w_xo: ad.Tensor
    w_ho: ad.Tensor
    w_xc: ad.Tensor
    w_hc: ad.Tensor
    b_i: ad.Tensor
    b_f: ad.Tensor
    b_o: ad.Tensor
    b_c: ad.Tensor
    w_out: ad.Tensor
    b_out: ad.Tensor

    def __post_init__(self):
        ks = {getattr(self, n).shape[2:] for n in KERNEL_NAMES}
        if len(ks) != 1:
            raise ConvLSTMError(f"all gate kernels must share one size, got {sorted(ks)}")
        k = ks.pop()
        if len(k) != 2 or k[0] != k[1] or k[0] % 2 == 0:
            raise ConvLSTMError(f"kernel size must be odd and square, got {k}")
        hidden = self.w_hi.shape[0]
        c_in = self.w_xi.shape[1]
        for g in GATES:
            wx, wh, b = getattr(self, f"w_x{g}"), getattr(self, f"w_h{g}"), getattr(self, f"b_{g}")
            if wx.shape != (hidden, c_in) + k:
                raise ConvLSTMError(f"w_x{g} has shape {wx.shape}, expected {(hidden, c_in) + k}")
            if wh.shape != (hidden, hidden) + k:
                raise ConvLSTMError(f"w_h{g} has shape {wh.shape}, expected {(hidden, hidden) + k}")
            if b.shape != (hidden,):
                raise ConvLSTMError(f"b_{g} has shape {b.shape}, expected ({hidden},)")
        if self.w_out.shape != (1, hidden, 1, 1) or self.b_out.shape != (1,):
            raise ConvLSTMError("readout must be a 1x1 convolution from the hidden channels to one channel")

    @property
    def hidden_channels(self):
        return self.w_hi.shape[0]

    @property
    def input_channels(self):
        return self.w_xi.shape[1]

    @property
    def kernel_size(self):
        return self.w_xi.shape[2]

    def named(self):
        return {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}

    def tensors(self):
        return list(self.named().values())

    def arrays(self):
        return {k: v.data.copy() for k, v in self.named().items()}

    @classmethod
    def from_arrays(cls, arrays, requires_grad=True):
        return cls(**{k: ad.Tensor(np.array(arrays[k]), requires_grad=requires_grad, name=k)
                      for k in KERNEL_NAMES + BIAS_NAMES + READOUT_NAMES})

    @classmethod
    def zeros(cls, input_channels, hidden_channels, kernel_size=3):
        k = kernel_size
        arrays = {}
        for g in GATES:
            arrays[f"w_x{g}"] = np.zeros((hidden_channels, input_channels, k, k))
            arrays[f"w_h{g}"] = np.zeros((hidden_channels, hidden_channels, k, k))
            arrays[f"b_{g}"] = np.zeros(hidden_channels)
        arrays["w_out"] = np.zeros((1, hidden_channels, 1, 1))
        arrays["b_out"] = np.zeros(1)
        return cls.from_arrays(arrays)

    @classmethod
    def initialize(cls, input_channels, hidden_channels, kernel_size, rng, forget_bias=1.0, readout_bias=0.0):
        """Uniform(+-1/sqrt(fan_in)) kernels, forget bias ``forget_bias``, other gate biases 0."""
        k = kernel_size
        arrays = {}
        for g in GATES:
            bx = 1.0 / math.sqrt(input_channels * k * k)
            bh = 1.0 / math.sqrt(hidden_channels * k * k)
            arrays[f"w_x{g}"] = rng.uniform(-bx, bx, (hidden_channels, input_channels, k, k))
            arrays[f"w_h{g}"] = rng.uniform(-bh, bh, (hidden_channels, hidden_channels, k, k))
            arrays[f"b_{g}"] = np.zeros(hidden_channels)
        arrays["b_f"][:] = forget_bias
        bo = 1.0 / math.sqrt(hidden_channels)
        arrays["w_out"] = rng.uniform(-bo, bo, (1, hidden_channels, 1, 1))
        arrays["b_out"] = np.array([readout_bias], dtype=np.float64)
        return cls.from_arrays(arrays)


@dataclass
class CellState:
    h: ad.Tensor
    C: ad.Tensor

    def __post_init__(self):
        if self.h.shape != self.C.shape:
            raise ConvLSTMError(f"h and C must share a shape, got {self.h.shape} and {self.C.shape}")

    @classmethod
    def zeros(cls, hidden_channels, height, width, batch=None):
        shape = (hidden_channels, height, width) if batch is None else (batch, hidden_channels, height, width)
        return cls(ad.Tensor(np.zeros(shape)), ad.Tensor(np.zeros(shape)))


def _fused(params):
    wx = ad.concat([params.w_xi, params.w_xf, params.w_xo, params.w_xc], axis=0)
    wh = ad.concat([params.w_hi, params.w_hf, params.w_ho, params.w_hc], axis=0)
    b = ad.concat([params.b_i, params.b_f, params.b_o, params.b_c], axis=0)
    return wx, wh, b


def _gates_to_state(pre, c_prev, hidden, batched):
    """Turn stacked gate pre-activations into the next (h, C)."""
    def part(j):
        sl = slice(j * hidden, (j + 1) * hidden)
        return pre[(slice(None), sl)] if batched else pre[sl]

    i = ad.sigmoid(part(0))
    f = ad.sigmoid(part(1))
    o = ad.sigmoid(part(2))
    g = ad.tanh(part(3))
    c = ad.hadamard(i, g) if c_prev is None else ad.add(ad.hadamard(f, c_prev), ad.hadamard(i, g))
    h = ad.hadamard(o, ad.tanh(c))
    return h, c, (i, f, o)


def cell_step(x_t, prev: CellState, params: ConvLSTMParams, return_gates=False):
    """One ConvLSTM update. ``x_t`` is ``[C_in, H, W]`` or ``[B, C_in, H, W]``."""
    x_t = x_t if isinstance(x_t, ad.Tensor) else ad.Tensor(x_t)
    batched = x_t.data.ndim == 4
    hidden = params.hidden_channels
    spatial = x_t.shape[-2:]
    expect = (hidden,) + spatial
    if (prev.h.shape[1:] if batched else prev.h.shape) != expect:
        raise ConvLSTMError(f"state shape {prev.h.shape} does not match input {x_t.shape} and {hidden} hidden channels")
    if x_t.shape[-3] != params.input_channels:
        raise ConvLSTMError(f"input has {x_t.shape[-3]} channels, parameters expect {params.input_channels}")
    wx, wh, b = _fused(params)
    pre = ad.add(ad.conv2d_same(x_t, wx, b), ad.conv2d_same(prev.h, wh))
    h, c, gates = _gates_to_state(pre, prev.C, hidden, batched)
    state = CellState(h, c)
    return (state, gates) if return_gates else state


def forward_sequence(inputs, params: ConvLSTMParams):
    """Run the cell over ``inputs`` from a zero state and read out one map.

    ``inputs`` is a list of L tensors (or arrays), each ``[C_in, H, W]`` or
    ``[B, C_in, H, W]``. Returns ``[1, H, W]`` or ``[B, 1, H, W]``.
    """
    if len(inputs) == 0:
        raise ConvLSTMError("need at least one input frame")
    steps = [x if isinstance(x, ad.Tensor) else ad.Tensor(x) for x in inputs]
    unbatched = steps[0].data.ndim == 3
    if unbatched:
        steps = [ad.reshape(x, (1,) + x.shape) for x in steps]
    shape = steps[0].shape
    if any(x.shape != shape for x in steps):
        raise ConvLSTMError("all input frames must share one shape")
    if shape[1] != params.input_channels:
        raise ConvLSTMError(f"input has {shape[1]} channels, parameters expect {params.input_channels}")
    batch, hidden, L = shape[0], params.hidden_channels, len(steps)

    wx, wh, b = _fused(params)
    # input convolutions for all steps in one call
    if any(x.requires_grad for x in steps):
        stacked = ad.concat(steps, axis=0)
    else:
        stacked = ad.Tensor(np.concatenate([x.data for x in steps], axis=0))
    xconv = ad.conv2d_same(stacked, wx, b)

    h = c = None
    for t in range(L):
        pre = xconv[t * batch:(t + 1) * batch]
        if h is not None:
            pre = ad.add(pre, ad.conv2d_same(h, wh))
        h, c, _ = _gates_to_state(pre, c, hidden, True)

    out = ad.softplus(ad.conv2d_same(h, params.w_out, params.b_out))
    if unbatched:
        out = ad.reshape(out, out.shape[1:])
    return out


def masked_mse(pred, truth, mask=None):
    """Mean squared error over cells where ``mask`` is true and ``truth`` is not NaN.

    ``pred`` may be a Tensor (result is a differentiable 0-d Tensor) or an
    array (result is a float). ``mask`` broadcasts against ``truth``.
    """
    truth = np.asarray(truth, dtype=np.float64)
    pshape = pred.shape if isinstance(pred, ad.Tensor) else np.shape(pred)
    if tuple(pshape) != truth.shape:
        raise ConvLSTMError(f"prediction shape {tuple(pshape)} differs from truth {truth.shape}")
    valid = ~np.isnan(truth)
    if mask is not None:
        valid &= np.broadcast_to(np.asarray(mask, dtype=bool), truth.shape)
    count = int(valid.sum())
    if count == 0:
        raise ConvLSTMError("mask selects no valid cells")
    filled = np.where(valid, truth, 0.0)
    if isinstance(pred, ad.Tensor):
        sq = ad.square(ad.sub(pred, ad.Tensor(filled)))
        return ad.scale(ad.total(ad.hadamard(sq, ad.Tensor(valid.astype(np.float64)))), 1.0 / count)
    diff = np.where(valid, np.asarray(pred, dtype=np.float64) - filled, 0.0)
    return float((diff * diff).sum() / count)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lookback: int = 8
    hidden_channels: int = 8
    kernel_size: int = 3
    epochs: int = 30
    learning_rate: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 32
    grad_clip: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lookback < 1:
            raise ConvLSTMError("lookback must be >= 1")
        if self.epochs < 1:
            raise ConvLSTMError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ConvLSTMError("learning_rate must be positive")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConvLSTMError("kernel_size must be odd")
        if self.hidden_channels < 1:
            raise ConvLSTMError("hidden_channels must be >= 1")

    def to_dict(self):
        return dataclasses.asdict(self)


class Adam:
    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()


@dataclass
class RegionModel:
    """Trained parameters plus everything needed to reproduce its inputs."""

    params: ConvLSTMParams
    config: TrainConfig
    scale: float
    feature_names: List[str]
    feature_mean: np.ndarray
    feature_std: np.ndarray
    validation_mse: float
    loss_history: List[float] = field(default_factory=list)


@dataclass
class SkippedRegion:
    reason: str


def _target_scale(values):
    """Positive divisor for the target: std, else mean, else 1."""
    if values.size == 0:
        return 1.0
    std = float(values.std())
    if std > 1e-12:
        return std
    mean = float(values.mean())
    return mean if mean > 1e-12 else 1.0


def _normalized_features(cube: SpaceTimeCube, names, mean, std):
    mask = cube.grid.road_mask
    if not names:
        return np.zeros((0,) + mask.shape)
    stack = np.stack([cube.features[n] for n in names])
    out = (stack - mean[:, None, None]) / std[:, None, None]
    out[:, ~mask] = 0.0
    return out


def _input_frames(cube: SpaceTimeCube, model_scale, feats):
    """``(T, 1 + m, H, W)`` channel stack: scaled EPDO then static features."""
    y = np.nan_to_num(cube.target / model_scale, nan=0.0)
    T = cube.T
    frames = np.empty((T, 1 + feats.shape[0]) + y.shape[1:])
    frames[:, 0] = y
    frames[:, 1:] = feats[None]
    return frames


def _batch_inputs(frames, weeks, lookback):
    weeks = np.asarray(weeks)
    return [frames[weeks - lookback + j] for j in range(lookback)]


def train_region(cube: SpaceTimeCube, split: SplitIndex, cfg: TrainConfig, progress=None):
    """Fit one ConvLSTM on ``cube`` (already cut to the region).

    Returns a RegionModel, or SkippedRegion when the region has no road cell
    or too few weeks.
    """
    mask = cube.grid.road_mask
    if not mask.any():
        return SkippedRegion("no road cells")
    L = cfg.lookback
    train_weeks = np.arange(max(L, split.train_weeks.start), split.train_weeks.stop)
    if train_weeks.size == 0:
        return SkippedRegion(f"training range has no week with {L} weeks of history")
    if split.T > cube.T:
        raise ConvLSTMError(f"split covers {split.T} weeks but cube has {cube.T}")

    train_vals = cube.target[split.train_weeks.start:split.train_weeks.stop][:, mask]
    scale = _target_scale(train_vals)
    names = cube.feature_names
    if names:
        stack = np.stack([cube.features[n][mask] for n in names])
        fmean = stack.mean(axis=1)
        fstd = stack.std(axis=1)
        fstd[fstd < 1e-12] = 1.0
    else:
        fmean = np.zeros(0)
        fstd = np.ones(0)
    feats = _normalized_features(cube, names, fmean, fstd)
    frames = _input_frames(cube, scale, feats)
    scaled_target = cube.target / scale

    rng = np.random.default_rng(cfg.seed)
    mean_scaled = float(np.nanmean(scaled_target[train_weeks][:, mask]))
    readout_bias = math.log(math.expm1(max(mean_scaled, 1e-3)))
    params = ConvLSTMParams.initialize(frames.shape[1], cfg.hidden_channels, cfg.kernel_size, rng,
                                       forget_bias=1.0, readout_bias=readout_bias)
    opt = Adam(params.tensors(), cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    bs = cfg.batch_size if cfg.batch_size and cfg.batch_size > 0 else train_weeks.size

    history = []
    for epoch in range(cfg.epochs):
        order = train_weeks[rng.permutation(train_weeks.size)]
        total = 0.0
        for lo in range(0, order.size, bs):
            weeks = order[lo:lo + bs]
            truth = scaled_target[weeks][:, None]
            pred = forward_sequence(_batch_inputs(frames, weeks, L), params)
            loss = masked_mse(pred, truth, mask)
            opt.zero_grad()
            ad.backward(loss)
            if cfg.grad_clip:
                norm = math.sqrt(sum(float((p.grad ** 2).sum()) for p in opt.params))
                if norm > cfg.grad_clip:
                    for p in opt.params:
                        p.grad *= cfg.grad_clip / norm
            opt.step()
            total += float(loss.data) * weeks.size
        history.append(total / order.size)
        if progress is not None:
            progress(epoch, history[-1])

    model = RegionModel(params, cfg, scale, list(names), fmean, fstd, float("nan"), history)
    val_weeks = [t for t in split.validation_weeks if t >= L]
    if val_weeks:
        pred = predict_region(model, cube, val_weeks)
        model.validation_mse = masked_mse(pred, cube.target[val_weeks], mask)
    else:
        # no validation weeks: fall back to in-sample error in data units
        pred = predict_region(model, cube, train_weeks)
        model.validation_mse = masked_mse(pred, cube.target[train_weeks], mask)
    return model


def predict_region(model: RegionModel, cube: SpaceTimeCube, weeks, batch_size=64):
    """One-step-ahead forecasts for ``weeks`` from observed history.

    Returns ``(len(weeks), H, W)`` in data units with NaN on roadless cells.
    """
    weeks = np.asarray(list(weeks), dtype=int)
    L = model.config.lookback
    if weeks.size and weeks.min() < L:
        raise ConvLSTMError(f"week {weeks.min()} has fewer than {L} weeks of history")
    if weeks.size and weeks.max() > cube.T:
        raise ConvLSTMError(f"week {weeks.max()} is beyond the cube")
    if list(model.feature_names) != cube.feature_names:
        raise ConvLSTMError(f"model expects features {model.feature_names}, cube has {cube.feature_names}")
    mask = cube.grid.road_mask
    feats = _normalized_features(cube, model.feature_names, model.feature_mean, model.feature_std)
    # frames only for observed weeks; forecasting week T itself is allowed
    frames = _input_frames(cube, model.scale, feats)
    params = ConvLSTMParams.from_arrays(model.params.arrays(), requires_grad=False)
    out = np.empty((weeks.size,) + mask.shape)
    for lo in range(0, weeks.size, batch_size):
        wk = weeks[lo:lo + batch_size]
        pred = forward_sequence(_batch_inputs(frames, wk, L), params)
        out[lo:lo + wk.size] = pred.data[:, 0] * model.scale
    out[:, ~mask] = np.nan
    return out


# ---------------------------------------------------------------------------
# archive

def save_region_model(path, model: RegionModel, extra_meta=None):
    arrays = model.params.arrays()
    arrays["feature_mean"] = model.feature_mean
    arrays["feature_std"] = model.feature_std
    meta = {
        "config": model.config.to_dict(),
        "scale": model.scale,
        "feature_names": list(model.feature_names),
        "validation_mse": model.validation_mse,
        "loss_history": list(model.loss_history),
    }
    if extra_meta:
        meta.update(extra_meta)
    return write_archive(path, arrays, meta, kind="convlstm")


def load_region_model(path) -> RegionModel:
    arrays, meta = read_archive(path, kind="convlstm")
    params = ConvLSTMParams.from_arrays(arrays, requires_grad=True)
    return RegionModel(
        params,
        TrainConfig(**meta["config"]),
        float(meta["scale"]),
        list(meta["feature_names"]),
        arrays["feature_mean"],
        arrays["feature_std"],
        float(meta["validation_mse"]),
        list(meta.get("loss_history", [])),
    )
