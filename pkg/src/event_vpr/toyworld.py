"""Synthetic mini-world: places on a loop, each observed through simulated events.

Every place owns a procedural texture. A bin is produced by sliding a camera
window over that texture for a few frames and running the frame-to-event
simulator. Observations of one place differ in window offset, motion
direction and speed, contrast, threshold and background noise, so retrieval
has to key on scene structure rather than on exact pixels.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .events import CameraModel, EventBin, ManifestRecord, simulate_events, write_events, write_manifest
from .mining import DbEntry, GeoTaggedDatabase


@dataclass(frozen=True)
class ToyWorldConfig:
    n_places: int = 96
    bins_per_place: int = 6
    width: int = 64
    height: int = 64
    spacing_m: float = 30.0  # arc length between neighbouring places
    coord_jitter_m: float = 2.0
    n_frames: int = 5
    frame_dt_us: int = 4000
    offset_px: float = 3.0  # max window offset between observations
    speed_px: tuple[float, float] = (1.5, 2.0)  # per-frame motion range
    heading_jitter_deg: float = 5.0  # spread of the travel direction around +x
    threshold: tuple[float, float] = (0.2, 0.3)
    contrast: tuple[float, float] = (0.9, 1.1)  # log-intensity gain
    noise_events: int = 200  # background activity per bin
    seed: int = 0

    @property
    def radius_m(self) -> float:
        return self.n_places * self.spacing_m / (2 * np.pi)


def place_texture(rng: np.random.Generator, size: int) -> np.ndarray:
    """Log-intensity texture in roughly [-1.5, 1.5]: bars, blobs and a smooth field."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    img = ndimage.gaussian_filter(rng.standard_normal((size, size)), 6.0)
    img *= 0.6 / (img.std() + 1e-9)
    for _ in range(rng.integers(4, 8)):  # oriented bars
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0, size, 2)
        u = (xx - c[0]) * np.cos(theta) + (yy - c[1]) * np.sin(theta)
        v = -(xx - c[0]) * np.sin(theta) + (yy - c[1]) * np.cos(theta)
        half_len, half_w = rng.uniform(8, 30), rng.uniform(1.5, 4)
        img += rng.choice([-1, 1]) * rng.uniform(0.6, 1.2) * ((np.abs(u) < half_len) & (np.abs(v) < half_w))
    for _ in range(rng.integers(3, 7)):  # blobs
        c = rng.uniform(0, size, 2)
        r = rng.uniform(3, 9)
        img += rng.choice([-1, 1]) * rng.uniform(0.5, 1.0) * np.exp(-((xx - c[0]) ** 2 + (yy - c[1]) ** 2) / (2 * r * r))
    return ndimage.gaussian_filter(img, 0.8)


def observe(texture: np.ndarray, cfg: ToyWorldConfig, rng: np.random.Generator, id: str) -> EventBin:
    """Simulate one pass of the camera over ``texture``."""
    size = texture.shape[0]
    margin = (size - max(cfg.width, cfg.height)) / 2
    angle = np.deg2rad(rng.normal(0.0, cfg.heading_jitter_deg))
    speed = rng.uniform(*cfg.speed_px)
    vel = speed * np.array([np.cos(angle), np.sin(angle)])
    travel = vel * (cfg.n_frames - 1)
    start = margin + rng.uniform(-cfg.offset_px, cfg.offset_px, 2) - travel / 2
    gain = rng.uniform(*cfg.contrast)
    brightness = rng.uniform(-1.0, 1.0)  # global log offset; invisible to the sensor
    yy, xx = np.mgrid[0:cfg.height, 0:cfg.width].astype(np.float64)
    frames = []
    for k in range(cfg.n_frames):
        ox, oy = start + vel * k
        logi = ndimage.map_coordinates(texture, [yy + oy, xx + ox], order=1, mode="reflect")
        frames.append(np.exp(gain * logi + brightness))
    ts = [k * cfg.frame_dt_us for k in range(cfg.n_frames)]
    cam = CameraModel(rng.uniform(*cfg.threshold), threshold_jitter=0.05, seed=int(rng.integers(2**31)))
    ev = simulate_events(frames, ts, cam, id=id)
    if cfg.noise_events:
        n = cfg.noise_events
        x = np.concatenate([ev.x, rng.integers(0, cfg.width, n)])
        y = np.concatenate([ev.y, rng.integers(0, cfg.height, n)])
        t = np.concatenate([ev.t, rng.integers(ts[0], ts[-1] + 1, n)])
        p = np.concatenate([ev.p, rng.choice([-1, 1], n)])
        order = np.lexsort((x, y, t))
        ev = EventBin(x[order], y[order], t[order], p[order], cfg.width, cfg.height, id)
    return ev


def place_coords(cfg: ToyWorldConfig) -> np.ndarray:
    ang = 2 * np.pi * np.arange(cfg.n_places) / cfg.n_places
    return cfg.radius_m * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def generate(cfg: ToyWorldConfig = ToyWorldConfig()) -> GeoTaggedDatabase:
    """In-memory database of ``n_places * bins_per_place`` simulated bins."""
    rng = np.random.default_rng(cfg.seed)
    size = int(max(cfg.width, cfg.height) + 2 * cfg.offset_px + 2 * cfg.speed_px[1] * cfg.n_frames + 8)
    centers = place_coords(cfg)
    entries, bins = [], []
    for i in range(cfg.n_places):
        texture = place_texture(rng, size)
        for j in range(cfg.bins_per_place):
            bin_id = f"p{i:03d}_b{j:02d}"
            r = cfg.coord_jitter_m * np.sqrt(rng.uniform())
            a = rng.uniform(0, 2 * np.pi)
            xy = centers[i] + r * np.array([np.cos(a), np.sin(a)])
            bins.append(observe(texture, cfg, rng, bin_id))
            entries.append(DbEntry(bin_id, f"p{i:03d}", (float(xy[0]), float(xy[1]))))
    return GeoTaggedDatabase(entries, bins)


def write_world(db: GeoTaggedDatabase, out_dir) -> Path:
    """Write every bin as an event file plus ``manifest.csv``; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "bins").mkdir(parents=True, exist_ok=True)
    records = []
    for i, e in enumerate(db.entries):
        rel = f"bins/{e.bin_id}.txt"
        write_events(db.bin(i), out_dir / rel)
        records.append(ManifestRecord(rel, e.place_id, *e.coords))
    path = out_dir / "manifest.csv"
    write_manifest(records, path)
    return path
