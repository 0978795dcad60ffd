"""VLAD pooling: soft assignment, residual aggregation, normalisation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
from sklearn.cluster import KMeans

from .errors import ClusterInitError, ParameterError, ShapeError

DEFAULT_EPS = 1e-12


@dataclass
class VladParams:
    centroids: torch.Tensor  # (K, D)
    weight: torch.Tensor  # (K, D)
    bias: torch.Tensor  # (K,)
    alpha: float

    @classmethod
    def from_centroids(cls, centroids, alpha: float) -> VladParams:
        if not alpha > 0:
            raise ParameterError("alpha must be > 0")
        c = torch.as_tensor(centroids)
        return cls(c.clone(), 2.0 * alpha * c, -alpha * (c * c).sum(1), float(alpha))

    @property
    def K(self) -> int:
        return self.centroids.shape[0]

    @property
    def D(self) -> int:
        return self.centroids.shape[1]


def _safe_normalize(v: torch.Tensor, dim: int, eps: float) -> torch.Tensor:
    # vectors with norm <= eps are passed through untouched
    sq = (v * v).sum(dim, keepdim=True)
    big = sq > eps * eps
    norm = torch.where(big, sq, torch.ones_like(sq)).sqrt()
    return torch.where(big, v / norm, v)


def soft_assign(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor) -> torch.Tensor:
    """Softmax over clusters of the logits ``w_k . x_i + b_k``; x is (..., M, D)."""
    return torch.softmax(x @ weight.T + bias, dim=-1)


def aggregate(x: torch.Tensor, centroids: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor,
              eps: float = DEFAULT_EPS) -> torch.Tensor:
    """Global descriptor from local descriptors x of shape (M, D) or (B, M, D).

    Per-cluster sums of soft-weighted residuals are intra-normalised, then
    the flattened (K * D) vector is L2-normalised. Output layout is K blocks
    of D. Zero columns, and an all-zero result, pass through as zeros.
    """
    single = x.dim() == 2
    if single:
        x = x.unsqueeze(0)
    if x.shape[-1] != centroids.shape[1]:
        raise ShapeError(f"descriptor depth {x.shape[-1]} != cluster depth {centroids.shape[1]}")
    a = soft_assign(x, weight, bias)  # (B, M, K)
    vlad = torch.einsum("bmk,bmd->bkd", a, x) - a.sum(1).unsqueeze(-1) * centroids
    vlad = _safe_normalize(vlad, -1, eps)
    vlad = _safe_normalize(vlad.flatten(1), -1, eps)
    return vlad[0] if single else vlad


class NetVLAD(nn.Module):
    """Trainable VLAD layer with decoupled centroids, weights and biases."""

    def __init__(self, num_clusters: int = 64, dim: int = 128, alpha: float = 100.0,
                 eps: float = DEFAULT_EPS, normalize_input: bool = True):
        super().__init__()
        if num_clusters < 1:
            raise ParameterError("num_clusters must be >= 1")
        if not alpha > 0:
            raise ParameterError("alpha must be > 0")
        self.num_clusters = num_clusters
        self.dim = dim
        self.alpha = alpha
        self.eps = eps
        self.normalize_input = normalize_input
        self.centroids = nn.Parameter(torch.rand(num_clusters, dim))
        self.weight = nn.Parameter(torch.empty(num_clusters, dim))
        self.bias = nn.Parameter(torch.empty(num_clusters))
        self.set_params(VladParams.from_centroids(self.centroids.detach(), alpha))

    @torch.no_grad()
    def set_params(self, params: VladParams) -> None:
        if params.centroids.shape != (self.num_clusters, self.dim):
            raise ShapeError(f"expected {(self.num_clusters, self.dim)} centroids, got {tuple(params.centroids.shape)}")
        self.centroids.copy_(params.centroids)
        self.weight.copy_(params.weight)
        self.bias.copy_(params.bias)
        self.alpha = params.alpha

    @property
    def output_dim(self) -> int:
        return self.num_clusters * self.dim

    def local_descriptors(self, fmap: torch.Tensor) -> torch.Tensor:
        """(B, D, h, w) feature map -> (B, h*w, D) descriptors fed to the pooling."""
        x = fmap.flatten(2).transpose(1, 2)
        if self.normalize_input:
            x = _safe_normalize(x, -1, self.eps)
        return x

    def forward(self, fmap: torch.Tensor) -> torch.Tensor:
        if fmap.shape[1] != self.dim:
            raise ShapeError(f"feature depth {fmap.shape[1]} != VLAD depth {self.dim}")
        return aggregate(self.local_descriptors(fmap), self.centroids, self.weight, self.bias, self.eps)


def kmeans_objective(samples: np.ndarray, centers: np.ndarray) -> float:
    d2 = ((samples[:, None, :] - centers[None, :, :]) ** 2).sum(-1)
    return float(d2.min(1).sum())


def init_clusters(samples, K: int, alpha: float = 100.0, seed: int = 0, max_iter: int = 100) -> VladParams:
    """k-means centres over sampled local descriptors, then w_k = 2*alpha*c_k, b_k = -alpha*|c_k|^2."""
    if K < 1:
        raise ParameterError("K must be >= 1")
    if not alpha > 0:
        raise ParameterError("alpha must be > 0")
    x = torch.as_tensor(samples).detach().cpu().double().numpy()
    if x.ndim != 2:
        raise ShapeError("samples must be (N, D)")
    n_distinct = len(np.unique(x, axis=0))
    if n_distinct < K:
        raise ClusterInitError(f"need at least {K} distinct samples, got {n_distinct}")
    km = KMeans(n_clusters=K, n_init=1, max_iter=max_iter, random_state=seed, tol=0.0)
    km.fit(x)
    return VladParams.from_centroids(torch.from_numpy(km.cluster_centers_), alpha)
