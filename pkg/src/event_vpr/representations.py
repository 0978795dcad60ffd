"""Dense tensor representations of event bins.

Every builder works on an :class:`EventBatch`, i.e. the events of several
bins concatenated with an index column naming the source bin, and returns a
``(B, channels, H, W)`` tensor. Single-bin helpers wrap the batched path.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ParameterError, ShapeError
from .events import EventBin

POLARITY_MODES = ("split", "signed")
ACTIVATIONS = {"tanh": nn.Tanh, "sigmoid": nn.Sigmoid, "softsign": nn.Softsign}


@dataclass
class EventBatch:
    """Events of ``batch_size`` bins flattened into columns.

    ``index`` holds the source-bin position (0..B-1) of every event.
    ``t`` stays float64 regardless of model dtype: microsecond timestamps
    overflow float32 precision.
    """

    x: torch.Tensor
    y: torch.Tensor
    t: torch.Tensor
    p: torch.Tensor
    index: torch.Tensor
    batch_size: int
    height: int
    width: int

    @classmethod
    def from_bins(cls, bins: Sequence[EventBin]) -> EventBatch:
        if not bins:
            raise ParameterError("empty batch")
        w, h = bins[0].geometry
        for b in bins:
            if b.geometry != (w, h):
                raise ShapeError(f"bin {b.id} has geometry {b.geometry}, expected {(w, h)}")

        def cat(f):
            return torch.from_numpy(np.concatenate([getattr(b, f) for b in bins]).astype(np.int64))

        counts = torch.tensor([len(b) for b in bins], dtype=torch.int64)
        return cls(
            x=cat("x"),
            y=cat("y"),
            t=cat("t").to(torch.float64),
            p=cat("p"),
            index=torch.repeat_interleave(torch.arange(len(bins)), counts),
            batch_size=len(bins),
            height=h,
            width=w,
        )

    @property
    def boundaries(self) -> torch.Tensor:
        """Start offsets of each bin's events, plus the total, shape (B + 1,)."""
        counts = torch.bincount(self.index, minlength=self.batch_size)
        return torch.cat([torch.zeros(1, dtype=torch.int64), counts.cumsum(0)])

    def __len__(self):
        return len(self.t)


# ---------------------------------------------------------------------------
# kernels


class TrilinearKernel(nn.Module):
    """max(0, 1 - |tau|); compact support |tau| < 1, no parameters."""

    kind = "trilinear"
    support = 1.0

    def forward(self, tau):
        return torch.clamp(1.0 - tau.abs(), min=0.0)


class MLPKernel(nn.Module):
    """Scalar-in, scalar-out perceptron with two hidden layers.

    With ``init="trilinear"`` the weights are pre-fitted to the trilinear
    kernel on ``[-tau_max, tau_max]`` so training starts from the
    hand-designed voting scheme.
    """

    kind = "mlp"

    def __init__(self, hidden: int = 30, activation: str = "tanh", tau_max: float = 1.5,
                 init: str = "trilinear", seed: int = 0):
        super().__init__()
        if activation not in ACTIVATIONS:
            raise ParameterError(f"activation must be one of {sorted(ACTIVATIONS)}")
        if tau_max <= 0:
            raise ParameterError("tau_max must be positive")
        self.hidden = hidden
        self.activation = activation
        self.support = float(tau_max)
        act = ACTIVATIONS[activation]
        self.net = nn.Sequential(
            nn.Linear(1, hidden), act(),
            nn.Linear(hidden, hidden), act(),
            nn.Linear(hidden, 1),
        )
        if init == "trilinear":
            state = _trilinear_fit(hidden, activation, self.support, seed)
            self.net.load_state_dict({k: v.clone() for k, v in state.items()})
        elif init == "random":
            g = torch.Generator().manual_seed(seed)
            with torch.no_grad():
                for prm in self.net.parameters():
                    prm.copy_(torch.empty_like(prm).uniform_(-1.0, 1.0, generator=g))
        else:
            raise ParameterError(f"unknown MLP kernel init {init!r}")

    def forward(self, tau):
        tau = tau.to(self.net[0].weight.dtype)
        return self.net(tau.unsqueeze(-1)).squeeze(-1)


@functools.lru_cache(maxsize=None)
def _trilinear_fit(hidden: int, activation: str, tau_max: float, seed: int):
    """Least-squares fit of the MLP to the trilinear kernel (float64, L-BFGS)."""
    torch.manual_seed(seed)
    act = ACTIVATIONS[activation]
    net = nn.Sequential(
        nn.Linear(1, hidden), act(), nn.Linear(hidden, hidden), act(), nn.Linear(hidden, 1)
    ).double()
    tau = torch.linspace(-tau_max, tau_max, 121, dtype=torch.float64).unsqueeze(-1)
    target = torch.clamp(1.0 - tau.abs(), min=0.0)
    opt = torch.optim.LBFGS(net.parameters(), lr=1.0, max_iter=300, tolerance_grad=1e-10,
                            tolerance_change=1e-14, history_size=50, line_search_fn="strong_wolfe")

    def closure():
        opt.zero_grad()
        loss = ((net(tau) - target) ** 2).mean()
        loss.backward()
        return loss

    opt.step(closure)
    return {k: v.detach().float() for k, v in net.state_dict().items()}


def make_kernel(kind: str = "trilinear", **kwargs) -> nn.Module:
    if kind == "trilinear":
        return TrilinearKernel()
    if kind == "mlp":
        return MLPKernel(**kwargs)
    raise ParameterError(f"unknown kernel kind {kind!r}")


def kernel_value(kernel: nn.Module, tau) -> torch.Tensor:
    """Evaluate a kernel at normalised time offsets (differentiable)."""
    if not torch.is_tensor(tau):
        tau = torch.as_tensor(tau, dtype=torch.float64)
    return kernel(tau)


# ---------------------------------------------------------------------------
# builders


@dataclass
class ESTVoxelGrid:
    values: torch.Tensor  # (channels, H, W)
    C: int
    t0: float
    dt: float
    polarity_mode: str

    @property
    def shape(self):
        return tuple(self.values.shape)


def _time_frame(batch: EventBatch, t0=None, dt=None, C: int = 1):
    """Per-bin start time and block size; ``dt`` is 0 for degenerate bins."""
    B = batch.batch_size
    if t0 is not None:
        t0 = torch.as_tensor(t0, dtype=torch.float64).expand(B).clone()
        dt = torch.as_tensor(dt, dtype=torch.float64).expand(B).clone()
        return t0, dt
    inf = torch.full((B,), float("inf"), dtype=torch.float64)
    first = inf.scatter_reduce(0, batch.index, batch.t, "amin", include_self=True)
    last = (-inf).scatter_reduce(0, batch.index, batch.t, "amax", include_self=True)
    empty = torch.isinf(first)
    first = torch.where(empty, torch.zeros_like(first), first)
    last = torch.where(empty, torch.zeros_like(last), last)
    dt = (last - first) / (C - 1) if C > 1 else torch.zeros_like(first)
    return first, dt


def _offsets(batch: EventBatch, C: int, t0, dt):
    """Normalised offsets tau[k, n] = (t_n - t_k) / dt, shape (N, C).

    Bins with C == 1 or zero span put every event at tau = 0 of channel 0.
    """
    t0_e, dt_e = t0[batch.index], dt[batch.index]
    n = torch.arange(C, dtype=torch.float64)
    degenerate = (dt_e <= 0).unsqueeze(1)
    safe_dt = torch.where(dt_e > 0, dt_e, torch.ones_like(dt_e)).unsqueeze(1)
    tau = (t0_e.unsqueeze(1) + n * safe_dt - batch.t.unsqueeze(1)) / safe_dt
    fallback = torch.full_like(tau, float("inf"))
    fallback[:, 0] = 0.0
    return torch.where(degenerate, fallback, tau)


def est_batch(batch: EventBatch, C: int, kernel: nn.Module, polarity_mode: str = "split",
              t0=None, dt=None, unit_polarity: bool = False, dtype=None) -> torch.Tensor:
    """Sampled, kernel-convolved event field for each bin of the batch.

    For every event k and time sample t_n = t0 + n*dt, adds
    ``p_k * kernel((t_n - t_k) / dt)`` at ``(n, y_k, x_k)``. ``split`` mode
    routes ON events to channels [0, C) and OFF events to [C, 2C) with unit
    magnitude. ``unit_polarity`` replaces every p_k by 1.
    """
    if C < 1:
        raise ParameterError("channel count C must be >= 1")
    if polarity_mode not in POLARITY_MODES:
        raise ParameterError(f"polarity_mode must be one of {POLARITY_MODES}")
    if dtype is None:
        params = list(kernel.parameters())
        dtype = params[0].dtype if params else torch.get_default_dtype()
    B, H, W = batch.batch_size, batch.height, batch.width
    n_ch = 2 * C if polarity_mode == "split" else C
    out = torch.zeros(B * n_ch * H * W, dtype=dtype)
    if len(batch) == 0:
        return out.view(B, n_ch, H, W)

    t0, dt = _time_frame(batch, t0, dt, C)
    tau = _offsets(batch, C, t0, dt)
    inside = tau.abs() < kernel.support if kernel.kind == "trilinear" else tau.abs() <= kernel.support
    ev, ch = inside.nonzero(as_tuple=True)
    tau_in = tau[ev, ch]
    if kernel.kind == "mlp":
        # one forward pass per distinct offset; bins repeat offsets heavily
        uniq, inverse = torch.unique(tau_in, return_inverse=True)
        weight = kernel(uniq).to(dtype)[inverse]
    else:
        weight = kernel(tau_in).to(dtype)
    if polarity_mode == "split":
        ch = ch + C * (batch.p[ev] < 0).long()
    elif not unit_polarity:
        weight = weight * batch.p[ev].to(dtype)
    flat = ((batch.index[ev] * n_ch + ch) * H + batch.y[ev]) * W + batch.x[ev]
    out = out.index_add(0, flat, weight)
    return out.view(B, n_ch, H, W)


def build_est(bin: EventBin, C: int, kernel: nn.Module | None = None, polarity_mode: str = "split",
              t0: float | None = None, dt: float | None = None, dtype=None) -> ESTVoxelGrid:
    """EST voxel grid of a single bin.

    Without explicit ``t0``/``dt`` the samples span the bin: t0 is the first
    timestamp and dt = (t_last - t_first) / (C - 1).
    """
    if C < 1:
        raise ParameterError("channel count C must be >= 1")
    kernel = kernel or TrilinearKernel()
    if (t0 is None) != (dt is None):
        raise ParameterError("give both t0 and dt or neither")
    if dt is not None and dt <= 0:
        raise ParameterError("dt must be positive")
    batch = EventBatch.from_bins([bin])
    values = est_batch(batch, C, kernel, polarity_mode, t0=t0, dt=dt, dtype=dtype)[0]
    if t0 is None:
        t0_b, dt_b = _time_frame(batch, None, None, C)
        t0, dt = float(t0_b[0]), float(dt_b[0])
    return ESTVoxelGrid(values, C, float(t0), float(dt), polarity_mode)


def ef_batch(batch: EventBatch, dtype=torch.float32) -> torch.Tensor:
    """Event frame: per-pixel signed polarity sum, shape (B, 1, H, W)."""
    B, H, W = batch.batch_size, batch.height, batch.width
    flat = (batch.index * H + batch.y) * W + batch.x
    out = torch.zeros(B * H * W, dtype=dtype).index_add(0, flat, batch.p.to(dtype))
    return out.view(B, 1, H, W)


def evg_batch(batch: EventBatch, C: int, kernel: nn.Module | None = None, dtype=torch.float32):
    """Unipolar voxel grid: the signed EST with every polarity replaced by +1."""
    return est_batch(batch, C, kernel or TrilinearKernel(), "signed", unit_polarity=True, dtype=dtype)


def four_channel_batch(batch: EventBatch, dtype=torch.float32) -> torch.Tensor:
    """[ON count, OFF count, last ON time, last OFF time] per pixel.

    Times are normalised to [0, 1] over each bin's span; a bin whose events
    share one timestamp maps them to 1. Pixels without events stay 0.
    """
    B, H, W = batch.batch_size, batch.height, batch.width
    out = torch.zeros(B, 4, H * W, dtype=torch.float64)
    if len(batch) == 0:
        return out.view(B, 4, H, W).to(dtype)
    first, dt = _time_frame(batch, C=2)  # with C=2, dt is the full span
    span = dt[batch.index]
    t_norm = torch.where(span > 0, (batch.t - first[batch.index]) / torch.where(span > 0, span, 1.0),
                         torch.ones_like(span))
    pix = batch.y * W + batch.x
    for ch, pol in ((0, 1), (1, -1)):
        sel = batch.p == pol
        flat = batch.index[sel] * (H * W) + pix[sel]
        count = torch.zeros(B * H * W, dtype=torch.float64).index_add(0, flat, torch.ones(int(sel.sum()), dtype=torch.float64))
        last = torch.zeros(B * H * W, dtype=torch.float64).scatter_reduce(
            0, flat, t_norm[sel], "amax", include_self=True)
        out[:, ch] = count.view(B, H * W)
        out[:, ch + 2] = last.view(B, H * W)
    return out.view(B, 4, H, W).to(dtype)


def build_ef(bin: EventBin, dtype=torch.float64) -> torch.Tensor:
    return ef_batch(EventBatch.from_bins([bin]), dtype)[0]


def build_evg(bin: EventBin, C: int, kernel: nn.Module | None = None, dtype=torch.float64) -> torch.Tensor:
    return evg_batch(EventBatch.from_bins([bin]), C, kernel, dtype)[0]


def build_4ch(bin: EventBin, dtype=torch.float64) -> torch.Tensor:
    return four_channel_batch(EventBatch.from_bins([bin]), dtype)[0]


# ---------------------------------------------------------------------------
# representation layer used by the model


REPRESENTATIONS = ("est", "ef", "evg", "4ch")


class Representation(nn.Module):
    """Maps an :class:`EventBatch` to the backbone input tensor.

    ``scale`` multiplies the output; event counts per voxel are O(1..10) and
    a fixed rescale keeps the first convolution in a sane range.
    """

    def __init__(self, kind: str = "est", channels: int = 5, kernel: str = "mlp",
                 polarity_mode: str = "split", tau_max: float = 1.5, activation: str = "tanh",
                 scale: float = 1.0, seed: int = 0):
        super().__init__()
        if kind not in REPRESENTATIONS:
            raise ParameterError(f"representation must be one of {REPRESENTATIONS}")
        if channels < 1:
            raise ParameterError("channels must be >= 1")
        if polarity_mode not in POLARITY_MODES:
            raise ParameterError(f"polarity_mode must be one of {POLARITY_MODES}")
        self.kind = kind
        self.C = channels
        self.polarity_mode = polarity_mode
        self.scale = scale
        if kind == "est":
            self.kernel = make_kernel(kernel, tau_max=tau_max, activation=activation, seed=seed) \
                if kernel == "mlp" else make_kernel(kernel)
        else:
            self.kernel = TrilinearKernel()

    @property
    def out_channels(self) -> int:
        if self.kind == "est":
            return 2 * self.C if self.polarity_mode == "split" else self.C
        if self.kind == "evg":
            return self.C
        return {"ef": 1, "4ch": 4}[self.kind]

    def forward(self, batch: EventBatch, dtype=None) -> torch.Tensor:
        if dtype is None:
            dtype = torch.get_default_dtype()
        if self.kind == "est":
            out = est_batch(batch, self.C, self.kernel, self.polarity_mode, dtype=dtype)
        elif self.kind == "evg":
            out = evg_batch(batch, self.C, dtype=dtype)
        elif self.kind == "ef":
            out = ef_batch(batch, dtype=dtype)
        else:
            out = four_channel_batch(batch, dtype=dtype)
        return out * self.scale if self.scale != 1.0 else out
