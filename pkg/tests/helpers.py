"""Independent oracles shared by the test modules."""

import math
from fractions import Fraction

import numpy as np
import torch


def reference_walk(frames, timestamps, thresholds):
    """Per-pixel scalar simulation: step the reference one threshold at a time."""
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    h, w = frames[0].shape
    out = []
    for y in range(h):
        for x in range(w):
            theta = float(thresholds[y, x])
            ref = math.log(frames[0][y, x])
            for k in range(1, len(frames)):
                level = math.log(frames[k][y, x])
                fired = []
                while abs(level - ref) >= theta:
                    s = 1 if level > ref else -1
                    ref += s * theta
                    fired.append(s)
                n = len(fired)
                span = timestamps[k] - timestamps[k - 1]
                for j, s in enumerate(fired, start=1):
                    t = timestamps[k - 1] + math.floor(Fraction(j * span, n) + Fraction(1, 2))
                    out.append((t, y, x, s))
    out.sort()
    return out


def est_reference(events, C, H, W, kernel_fn, support, strict, split, t0=None, dt=None):
    """Event-by-event scalar accumulation of the sampled kernel-convolved field."""
    n_ch = 2 * C if split else C
    grid = np.zeros((n_ch, H, W))
    if not events:
        return grid
    ts = [e[2] for e in events]
    if t0 is None:
        t0 = min(ts)
        dt = (max(ts) - min(ts)) / (C - 1) if C > 1 else 0.0
    for x, y, t, p in events:
        for n in range(C):
            if dt > 0:
                tau = (t0 + n * dt - t) / dt
            else:
                tau = 0.0 if n == 0 else math.inf
            inside = abs(tau) < support if strict else abs(tau) <= support
            if not inside:
                continue
            v = kernel_fn(tau)
            if split:
                grid[n + (C if p < 0 else 0), y, x] += v
            else:
                grid[n, y, x] += p * v
    return grid


def mlp_scalar(net, tau):
    """Forward pass of an nn.Sequential MLP on one float, in plain Python float64."""
    layers = [m for m in net if isinstance(m, torch.nn.Linear)]
    acts = [m for m in net if not isinstance(m, torch.nn.Linear)]
    h = np.array([tau], dtype=np.float64)
    for i, lin in enumerate(layers):
        W = lin.weight.detach().double().numpy()
        b = lin.bias.detach().double().numpy()
        h = W @ h + b
        if i < len(acts):
            name = type(acts[i]).__name__
            h = {"Tanh": np.tanh, "Sigmoid": lambda z: 1 / (1 + np.exp(-z)),
                 "Softsign": lambda z: z / (1 + np.abs(z))}[name](h)
    return float(h[0])


def fd_check(fn, params, step=1e-4, n_dirs=3, seed=0):
    """Worst relative error between autograd and central differences along random unit directions.

    ``fn`` maps the list of tensors ``params`` (float64, requires_grad) to a scalar.
    """
    g = torch.Generator().manual_seed(seed)
    out = fn(params)
    grads = torch.autograd.grad(out, params, allow_unused=True)
    grads = [torch.zeros_like(p) if gr is None else gr for p, gr in zip(params, grads)]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        total = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / total for d in dirs]  # unit length, so ``step`` is the actual move
        analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
        with torch.no_grad():
            plus = fn([p + step * d for p, d in zip(params, dirs)]).item()
            minus = fn([p - step * d for p, d in zip(params, dirs)]).item()
        numeric = (plus - minus) / (2 * step)
        denom = max(abs(analytic), abs(numeric), 1e-12)
        worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def mlp_fn(net):
    """Scalar float64 closure over a frozen copy of the MLP weights (faster than ``mlp_scalar``)."""
    layers = [(m.weight.detach().double().numpy().copy(), m.bias.detach().double().numpy().copy())
              for m in net if isinstance(m, torch.nn.Linear)]
    act = {"Tanh": np.tanh, "Sigmoid": lambda z: 1 / (1 + np.exp(-z)),
           "Softsign": lambda z: z / (1 + np.abs(z))}[type(net[1]).__name__]

    def fn(tau):
        h = np.array([tau])
        for i, (W, b) in enumerate(layers):
            h = W @ h + b
            if i < len(layers) - 1:
                h = act(h)
        return float(h[0])

    return fn


ACCEPTANCE = {}


def record(criterion, ok, detail=""):
    """Remember one acceptance outcome; the terminal summary prints them all."""
    line = f"criterion {criterion:>2}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
    ACCEPTANCE[criterion] = line
    print(line)
    return ok
