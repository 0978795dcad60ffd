"""End-to-end network: event bins -> representation -> backbone -> VLAD descriptor."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone
from .events import EventBin
from .representations import EventBatch, Representation
from .vlad import NetVLAD


class EventVPRNet(nn.Module):
    def __init__(self, representation: Representation, backbone: Backbone, pool: NetVLAD):
        super().__init__()
        self.representation = representation
        self.backbone = backbone
        self.pool = pool

    @property
    def dtype(self) -> torch.dtype:
        return next(self.backbone.parameters()).dtype

    @property
    def output_dim(self) -> int:
        return self.pool.output_dim

    def feature_maps(self, batch: EventBatch) -> torch.Tensor:
        return self.backbone(self.representation(batch, dtype=self.dtype))

    def forward(self, batch: EventBatch) -> torch.Tensor:
        """One unit-norm descriptor row per bin of the batch, in index order."""
        return self.pool(self.feature_maps(batch))

    @torch.no_grad()
    def describe(self, bins: Sequence[EventBin], batch_size: int = 32) -> np.ndarray:
        """Descriptors of many bins in eval mode; restores the previous mode."""
        was_training = self.training
        self.eval()
        try:
            out = [
                self(EventBatch.from_bins(bins[i:i + batch_size])).double().numpy()
                for i in range(0, len(bins), batch_size)
            ]
        finally:
            self.train(was_training)
        if not out:
            return np.zeros((0, self.output_dim))
        return np.concatenate(out)

    @torch.no_grad()
    def local_descriptors(self, bins: Sequence[EventBin], batch_size: int = 32) -> np.ndarray:
        """All pre-pooling local descriptors of ``bins``, shape (sum of h*w, D)."""
        was_training = self.training
        self.eval()
        try:
            out = [
                self.pool.local_descriptors(self.feature_maps(EventBatch.from_bins(bins[i:i + batch_size])))
                .flatten(0, 1).double().numpy()
                for i in range(0, len(bins), batch_size)
            ]
        finally:
            self.train(was_training)
        return np.concatenate(out)
