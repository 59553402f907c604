"""Observed/target mask bookkeeping.

Training needs synthetic imputation targets carved out of the observed
entries; evaluation needs whole-scenario observation masks. Boolean grids
are [..., nodes, time] with True marking an available value. All draws go
through an explicit numpy Generator so every mask is replayable from its
seed.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAX_RESAMPLES = 16

MASK_MAGIC = b"MFMASK\x00"
MASK_FORMAT_VERSION = 1


class MaskError(ValueError):
    pass


class EmptyTargetsError(MaskError):
    """Every resample attempt produced an empty target set."""


@dataclass(frozen=True)
class MaskPair:
    """Observed entries split into conditioning and imputation targets.

    Targets are always a subset of the observed entries; conditioning is
    the remainder, so the two partition the observed set.
    """

    observed: np.ndarray
    target: np.ndarray

    def __post_init__(self):
        obs = np.asarray(self.observed, dtype=bool)
        tgt = np.asarray(self.target, dtype=bool)
        if obs.shape != tgt.shape:
            raise MaskError(f"mask shapes differ: {obs.shape} vs {tgt.shape}")
        if np.any(tgt & ~obs):
            raise MaskError("targets must lie inside the observed set")
        object.__setattr__(self, "observed", obs)
        object.__setattr__(self, "target", tgt)

    @property
    def conditioning(self) -> np.ndarray:
        return self.observed & ~self.target


def _resample(draw, what: str) -> MaskPair:
    for _ in range(MAX_RESAMPLES):
        pair = draw()
        if pair.target.any():
            return pair
    raise EmptyTargetsError(
        f"{what}: no targets after {MAX_RESAMPLES} resamples; "
        "observed set may be too sparse")


def mask_point(observed: np.ndarray, rng: np.random.Generator) -> MaskPair:
    """Point strategy: one shared rate r ~ U[0,1], then iid Bernoulli(r)."""
    observed = np.asarray(observed, dtype=bool)
    if not observed.any():
        raise MaskError("point strategy: observed mask is empty")

    def draw() -> MaskPair:
        r = rng.random()
        target = observed & (rng.random(observed.shape) < r)
        return MaskPair(observed, target)

    return _resample(draw, "point strategy")


def mask_block(observed: np.ndarray, rng: np.random.Generator,
               point_rate: float = 0.05) -> MaskPair:
    """Block strategy: contiguous per-node spans plus sparse point targets.

    Each node row independently receives, with probability p ~ U[0, 0.15],
    one span of length uniform in [ceil(L/2), L] at a uniform valid start;
    ``point_rate`` additional entries are targeted pointwise. Everything is
    intersected with the observed set.
    """
    observed = np.asarray(observed, dtype=bool)
    length = observed.shape[-1]
    if length < 2:
        raise MaskError(f"block strategy: need time length >= 2, got {length}")
    rows = observed.reshape(-1, length)

    def draw() -> MaskPair:
        target_rows = np.zeros_like(rows)
        min_len = -(-length // 2)
        for i in range(rows.shape[0]):
            p = rng.uniform(0.0, 0.15)
            if rng.random() < p:
                span = int(rng.integers(min_len, length + 1))
                start = int(rng.integers(0, length - span + 1))
                target_rows[i, start:start + span] = True
        target = target_rows.reshape(observed.shape)
        target |= rng.random(observed.shape) < point_rate
        return MaskPair(observed, target & observed)

    return _resample(draw, "block strategy")


def mask_historical(observed: np.ndarray, pool: list[np.ndarray],
                    rng: np.random.Generator) -> MaskPair:
    """Historical strategy: replay a real missing pattern as targets.

    Pool entries are boolean grids (True = missing in the historical record)
    matching the trailing [nodes, time] shape of ``observed``.
    """
    observed = np.asarray(observed, dtype=bool)
    if not pool:
        raise MaskError("historical strategy: empty pattern pool")

    def draw() -> MaskPair:
        pattern = np.asarray(pool[int(rng.integers(len(pool)))], dtype=bool)
        if pattern.shape != observed.shape[-pattern.ndim:]:
            raise MaskError(f"pool pattern {pattern.shape} does not match "
                            f"observed {observed.shape}")
        return MaskPair(observed, observed & pattern)

    return _resample(draw, "historical strategy")


def mask_hybrid(observed: np.ndarray, rng: np.random.Generator,
                secondary: str = "block",
                pool: list[np.ndarray] | None = None) -> MaskPair:
    """Hybrid strategy: a fair coin picks point vs the secondary strategy."""
    if secondary not in ("block", "historical"):
        raise MaskError(f"hybrid secondary must be block or historical, "
                        f"got {secondary!r}")
    if rng.random() < 0.5:
        return mask_point(observed, rng)
    if secondary == "block":
        return mask_block(observed, rng)
    return mask_historical(observed, pool or [], rng)


def draw_training_masks(strategy: str, observed: np.ndarray,
                        rng: np.random.Generator,
                        pool: list[np.ndarray] | None = None) -> MaskPair:
    """Dispatch by strategy name; 'hybrid_hist' uses the historical branch."""
    if strategy == "point":
        return mask_point(observed, rng)
    if strategy == "block":
        return mask_block(observed, rng)
    if strategy == "historical":
        return mask_historical(observed, pool or [], rng)
    if strategy == "hybrid":
        return mask_hybrid(observed, rng, secondary="block")
    if strategy == "hybrid_hist":
        return mask_hybrid(observed, rng, secondary="historical", pool=pool)
    raise MaskError(f"unknown mask strategy {strategy!r}")


# ---------------------------------------------------------------------------
# evaluation scenarios


def scenario_masks(kind: str, shape: tuple[int, ...], rng: np.random.Generator,
                   *, rate: float = 0.25, block_prob: float = 0.0015,
                   block_hours: tuple[int, int] = (1, 4), steps_per_hour: int = 1,
                   pool: list[np.ndarray] | None = None) -> np.ndarray:
    """Evaluation-time observed mask (True = kept) over a complete grid.

    point: remove ``rate`` of all entries at random.
    block: remove 5% at random, plus per-sensor outage spans starting with
        probability ``block_prob`` per step, lasting 1-4 hours scaled by
        ``steps_per_hour``.
    simulated_failure: remove the pattern of one pool entry.
    """
    if kind == "point":
        return rng.random(shape) >= rate
    if kind == "block":
        observed = rng.random(shape) >= 0.05
        length = shape[-1]
        lo = block_hours[0] * steps_per_hour
        hi = block_hours[1] * steps_per_hour
        rows = observed.reshape(-1, length)
        for i in range(rows.shape[0]):
            starts = np.flatnonzero(rng.random(length) < block_prob)
            for s in starts:
                span = int(rng.integers(lo, hi + 1))
                rows[i, s:s + span] = False
        return rows.reshape(shape)
    if kind == "simulated_failure":
        if not pool:
            raise MaskError("simulated_failure scenario needs a pattern pool")
        pattern = np.asarray(pool[int(rng.integers(len(pool)))], dtype=bool)
        if pattern.shape != shape[-pattern.ndim:]:
            raise MaskError(f"pool pattern {pattern.shape} does not match {shape}")
        return ~(np.zeros(shape, dtype=bool) | pattern)
    raise MaskError(f"unknown scenario {kind!r}")


def simulate_failure_masks(count: int, n_nodes: int, length: int,
                           rng: np.random.Generator, outage_rate: float = 0.02,
                           mean_outage: float = 6.0) -> list[np.ndarray]:
    """Bursty per-node outage patterns (True = missing).

    Stands in for real sensor-failure records: outages start as a Bernoulli
    process per step and last a geometric number of steps.
    """
    pool = []
    for _ in range(count):
        missing = np.zeros((n_nodes, length), dtype=bool)
        for node in range(n_nodes):
            starts = np.flatnonzero(rng.random(length) < outage_rate)
            for s in starts:
                span = int(rng.geometric(1.0 / mean_outage))
                missing[node, s:s + span] = True
        pool.append(missing)
    return pool


# ---------------------------------------------------------------------------
# audit serialization


def save_mask(path: str | Path, mask: np.ndarray, meta: dict | None = None) -> None:
    """Bit-exact mask file: header, JSON metadata, packed boolean grid."""
    mask = np.asarray(mask, dtype=bool)
    payload = json.dumps(meta or {}, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC)
        fh.write(struct.pack("<I", MASK_FORMAT_VERSION))
        fh.write(struct.pack("<I", len(payload)))
        fh.write(payload)
        fh.write(struct.pack("<B", mask.ndim))
        fh.write(struct.pack(f"<{mask.ndim}Q", *mask.shape))
        fh.write(np.packbits(mask.reshape(-1)).tobytes())


def load_mask(path: str | Path) -> tuple[np.ndarray, dict]:
    with open(path, "rb") as fh:
        if fh.read(len(MASK_MAGIC)) != MASK_MAGIC:
            raise MaskError(f"{path}: not a mask file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != MASK_FORMAT_VERSION:
            raise MaskError(f"{path}: unsupported mask format {version}")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode())
        (ndim,) = struct.unpack("<B", fh.read(1))
        shape = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim))
        size = int(np.prod(shape))
        bits = np.frombuffer(fh.read(), dtype=np.uint8)
        mask = np.unpackbits(bits, count=size).astype(bool).reshape(shape)
    return mask, meta
