"""Seeded generator of radar-like precipitation sequences.

Each event is a (T_total, 1, H, W) byte-scale intensity field built
from two components with deliberately different predictability:

* a mesoscale component: a few large smooth blobs advected across a
  periodic domain by one constant-per-event velocity, so the context
  frames fully determine its future;
* a convective component: small short-lived cells born stochastically
  (preferentially inside the mesoscale envelope), carried by the same
  flow, whose birth times/locations are genuinely unpredictable.

Everything is a pure function of (config, seed).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class GeneratorConfig:
    height: int = 64
    width: int = 64
    t_in: int = 13
    t_out: int = 12
    n_blobs: int = 3
    blob_scale_min: float = 5.5
    blob_scale_max: float = 10.0
    blob_peak_min: float = 110.0
    blob_peak_max: float = 185.0
    velocity_max: float = 1.2           # px/frame, per-event constant
    cell_birth_rate: float = 3.0        # expected births per frame
    cell_lifetime_mean: float = 4.0     # frames, exponential
    cell_scale_min: float = 1.3
    cell_scale_max: float = 2.6
    cell_peak_min: float = 90.0
    cell_peak_max: float = 210.0
    master_seed: int = 0

    @property
    def t_total(self) -> int:
        return self.t_in + self.t_out

    def validate(self) -> None:
        if self.t_in < 1 or self.t_out < 1:
            raise ValueError(f"t_in/t_out must be >= 1, got {self.t_in}/{self.t_out}")
        if self.height < 8 or self.width < 8:
            raise ValueError(f"grid too small: {self.height}x{self.width}")
        for name in ("cell_birth_rate", "cell_lifetime_mean", "velocity_max"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        # keep blobs resolvable: they must not cross the domain in one sequence
        if self.velocity_max * self.t_total > min(self.height, self.width):
            raise ValueError("velocity_max too large for the grid and sequence length")


@dataclass
class RadarSequence:
    frames: np.ndarray          # (T_total, 1, H, W) float32 in [0, 255]
    event_id: int
    seed: int


@dataclass
class DatasetSplit:
    train: list[int] = field(default_factory=list)
    val: list[int] = field(default_factory=list)
    test: list[int] = field(default_factory=list)

    def all_seeds(self) -> list[int]:
        return list(self.train) + list(self.val) + list(self.test)


def _wrapped_gauss(h: int, w: int, cy: float, cx: float, sigma: float) -> np.ndarray:
    """Isotropic Gaussian bump on a periodic h x w grid."""
    yy = np.arange(h, dtype=np.float64)[:, None]
    xx = np.arange(w, dtype=np.float64)[None, :]
    dy = (yy - cy + h / 2.0) % h - h / 2.0
    dx = (xx - cx + w / 2.0) % w - w / 2.0
    return np.exp(-(dy * dy + dx * dx) / (2.0 * sigma * sigma))


def generate_event(config: GeneratorConfig, seed: int, return_components: bool = False):
    """Generate one event; returns a RadarSequence.

    With return_components=True, also returns a dict holding the raw
    (unclipped) mesoscale and convective components plus the sampled
    event parameters, for diagnostics.
    """
    config.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w, t_total = config.height, config.width, config.t_total

    vel = rng.uniform(-config.velocity_max, config.velocity_max, size=2)

    blob_cy = rng.uniform(0, h, size=config.n_blobs)
    blob_cx = rng.uniform(0, w, size=config.n_blobs)
    blob_sigma = rng.uniform(config.blob_scale_min, config.blob_scale_max, size=config.n_blobs)
    blob_peak = rng.uniform(config.blob_peak_min, config.blob_peak_max, size=config.n_blobs)

    meso = np.zeros((t_total, h, w), dtype=np.float64)
    for t in range(t_total):
        for b in range(config.n_blobs):
            meso[t] += blob_peak[b] * _wrapped_gauss(
                h, w, blob_cy[b] + t * vel[0], blob_cx[b] + t * vel[1], blob_sigma[b])

    # convective cells: births per frame are Poisson, positions drawn
    # proportionally to the current mesoscale intensity (plus a floor so
    # the whole domain stays reachable)
    cells = []
    for t in range(t_total):
        n_births = rng.poisson(config.cell_birth_rate)
        if n_births == 0:
            continue
        prob = meso[t].reshape(-1) + 1e-3 * meso[t].max() + 1e-12
        prob = prob / prob.sum()
        pos = rng.choice(h * w, size=n_births, p=prob)
        for p in pos:
            cells.append({
                "birth": t,
                "life": max(1, int(round(rng.exponential(config.cell_lifetime_mean)))),
                "cy": float(p // w) + rng.uniform(-0.5, 0.5),
                "cx": float(p % w) + rng.uniform(-0.5, 0.5),
                "sigma": rng.uniform(config.cell_scale_min, config.cell_scale_max),
                "peak": rng.uniform(config.cell_peak_min, config.cell_peak_max),
            })

    conv = np.zeros_like(meso)
    for c in cells:
        for t in range(c["birth"], min(c["birth"] + c["life"], t_total)):
            age = t - c["birth"]
            envelope = np.sin(np.pi * (age + 0.5) / c["life"])
            dy = (t - c["birth"]) * vel[0]
            dx = (t - c["birth"]) * vel[1]
            conv[t] += c["peak"] * envelope * _wrapped_gauss(
                h, w, c["cy"] + dy, c["cx"] + dx, c["sigma"])

    frames = np.clip(meso + conv, 0.0, 255.0).astype(np.float32)[:, None, :, :]
    seq = RadarSequence(frames=frames, event_id=seed, seed=seed)
    if return_components:
        components = {
            "mesoscale": meso.astype(np.float32),
            "convective": conv.astype(np.float32),
            "velocity": vel,
            "blob_centers": np.stack([blob_cy, blob_cx], axis=1),
            "blob_sigma": blob_sigma,
        }
        return seq, components
    return seq


def make_dataset(config: GeneratorConfig, counts: tuple[int, int, int]) -> DatasetSplit:
    """Draw pairwise-disjoint event seed pools for train/val/test."""
    n_train, n_val, n_test = counts
    if min(counts) <= 0:
        raise ValueError(f"split counts must be positive, got {counts}")
    total = n_train + n_val + n_test
    rng = np.random.Generator(np.random.PCG64(config.master_seed))
    seeds: list[int] = []
    seen: set[int] = set()
    while len(seeds) < total:
        s = int(rng.integers(1, 2**31 - 1))
        if s not in seen:
            seen.add(s)
            seeds.append(s)
    return DatasetSplit(
        train=seeds[:n_train],
        val=seeds[n_train:n_train + n_val],
        test=seeds[n_train + n_val:],
    )


def split_context_target(frames: np.ndarray, t_in: int, t_out: int) -> tuple[np.ndarray, np.ndarray]:
    """Split (T_total,1,H,W) into context (first t_in) and target (last t_out)."""
    if frames.shape[0] != t_in + t_out:
        raise ValueError(
            f"sequence length {frames.shape[0]} != t_in+t_out = {t_in + t_out}")
    return frames[:t_in], frames[t_in:]


def normalize(frames: np.ndarray) -> np.ndarray:
    """Byte scale [0,255] -> [0,1]."""
    arr = np.asarray(frames)
    if arr.size and (arr.min() < 0.0 or arr.max() > 255.0):
        raise ValueError(f"values outside [0,255]: min={arr.min()}, max={arr.max()}")
    return (arr / np.float32(255.0)).astype(np.float32)


def denormalize(frames: np.ndarray) -> np.ndarray:
    """[0,1] -> byte scale [0,255]."""
    return (np.asarray(frames, dtype=np.float32) * np.float32(255.0)).astype(np.float32)


def event_file_hash(config_hash: str, split: DatasetSplit) -> str:
    payload = config_hash + ";" + ";".join(
        ",".join(str(s) for s in pool) for pool in (split.train, split.val, split.test))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


def save_manifest(path: str | Path, split: DatasetSplit, config_hash: str) -> None:
    lines = ["# nowcastlab dataset manifest v1", f"config_hash = {config_hash}"]
    for name, pool in (("train", split.train), ("val", split.val), ("test", split.test)):
        lines.append(f"[{name}]")
        lines.extend(str(s) for s in pool)
    Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path: str | Path) -> tuple[DatasetSplit, str]:
    split = DatasetSplit()
    config_hash = ""
    current: list[int] | None = None
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("config_hash"):
            config_hash = line.split("=", 1)[1].strip()
        elif line == "[train]":
            current = split.train
        elif line == "[val]":
            current = split.val
        elif line == "[test]":
            current = split.test
        else:
            if current is None:
                raise ValueError(f"manifest line outside any split section: {line!r}")
            current.append(int(line))
    return split, config_hash


def save_raw_sequence(path: str | Path, frames: np.ndarray) -> None:
    """Write frames as the raw ingestion format: 'T H W' header + LE float32."""
    arr = np.asarray(frames, dtype=np.float32)
    if arr.ndim == 4:
        if arr.shape[1] != 1:
            raise ValueError(f"expected single-channel frames, got C={arr.shape[1]}")
        arr = arr[:, 0]
    if arr.ndim != 3:
        raise ValueError(f"expected (T,H,W) or (T,1,H,W), got shape {arr.shape}")
    t, h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"{t} {h} {w}\n".encode("ascii"))
        fh.write(arr.astype("<f4").tobytes())


def load_raw_sequence(path: str | Path) -> np.ndarray:
    """Read the raw ingestion format back as (T,1,H,W) float32."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii").split()
        if len(header) != 3:
            raise ValueError(f"malformed raster header: {header!r}")
        t, h, w = (int(x) for x in header)
        payload = fh.read()
    expected = t * h * w * 4
    if len(payload) != expected:
        raise ValueError(f"raster payload is {len(payload)} bytes, expected {expected}")
    arr = np.frombuffer(payload, dtype="<f4").reshape(t, h, w).astype(np.float32)
    return arr[:, None, :, :]


def config_key_values(config: GeneratorConfig) -> dict[str, str]:
    return {f.name: repr(getattr(config, f.name)) for f in fields(config)}
