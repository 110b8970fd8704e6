"""Probabilistic dynamic OD demand and reparameterized sampling.

Demand for OD pair ``rs`` in interval ``h`` is Gaussian with mean ``q`` and
standard deviation ``sigma`` per entry of the flat (interval-major) OD
vector.  Samples are drawn as ``Q = max(0, q + sigma * nu)`` with ``nu``
standard normal, which keeps the sample differentiable in ``(q, sigma)``
everywhere the nonnegativity clamp is inactive.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_MIN = 1e-6


def substream(seed: int, *key: int) -> np.random.Generator:
    """Independent generator derived from a master seed and an integer key.

    The same ``(seed, key)`` always yields the same stream, so sampling is
    reproducible regardless of call order elsewhere.
    """
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


@dataclass(frozen=True)
class PDOD:
    """Mean and standard deviation of OD demand per (OD pair, interval)."""

    q: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "q", np.asarray(self.q, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))
        if self.q.ndim != 1 or self.sigma.ndim != 1:
            raise ValueError("q and sigma must be 1-D vectors")
        if self.q.shape != self.sigma.shape:
            raise ValueError("q and sigma must have equal length")
        if np.any(self.q < 0):
            raise ValueError("q must be nonnegative elementwise")
        if np.any(self.sigma < SIGMA_MIN):
            raise ValueError(f"sigma must be >= {SIGMA_MIN} elementwise")

    @property
    def size(self) -> int:
        return self.q.size


@dataclass(frozen=True)
class NoiseDraw:
    """One standard-normal draw, tagged with the stream key that produced it."""

    nu: np.ndarray
    stream_key: tuple[int, ...] | None = None


@dataclass(frozen=True)
class DemandSample:
    """Realized demand ``Q = max(0, q + sigma * nu)`` plus its noise draw.

    ``active`` is True where the clamp did not bind; gradients are zeroed
    on clamped entries (subgradient of ``max(0, .)`` below zero).
    """

    Q: np.ndarray
    nu_ref: NoiseDraw
    active: np.ndarray


def sample_demand(
    pdod: PDOD,
    rng: np.random.Generator,
    stream_key: tuple[int, ...] | None = None,
) -> DemandSample:
    """Draw one demand realization via the reparameterized form."""
    nu = rng.standard_normal(pdod.size)
    raw = pdod.q + pdod.sigma * nu
    active = raw >= 0.0
    return DemandSample(
        Q=np.maximum(raw, 0.0),
        nu_ref=NoiseDraw(nu=nu, stream_key=stream_key),
        active=active,
    )


def sample_demand_batch(
    pdod: PDOD, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Matrix of ``count`` independent demand draws, one per row."""
    nu = rng.standard_normal((count, pdod.size))
    return np.maximum(pdod.q + pdod.sigma * nu, 0.0)


def demand_gradients(
    sample: DemandSample, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Pull a loss gradient w.r.t. Q back to (q, sigma).

    With fixed noise, Q is affine in (q, sigma): the Jacobians are the
    identity and diag(nu), masked to zero where the clamp was active.
    """
    upstream = np.asarray(upstream, dtype=float)
    if upstream.shape != sample.Q.shape:
        raise ValueError(
            f"upstream gradient length {upstream.shape} != sample length {sample.Q.shape}"
        )
    mask = sample.active.astype(float)
    grad_q = upstream * mask
    grad_sigma = sample.nu_ref.nu * upstream * mask
    return grad_q, grad_sigma


def pdod_to_csv(pdod: PDOD, num_od_pairs: int, out_file) -> None:
    """Serialize as CSV rows (od_index, interval, mean, std); interval is 1-based."""
    if pdod.size % num_od_pairs != 0:
        raise ValueError("PDOD length is not a multiple of the OD pair count")
    num_intervals = pdod.size // num_od_pairs
    with open(out_file, "w", newline="", encoding="utf-8") as fh:
        fh.write("od_index,interval,mean,std\n")
        for h in range(num_intervals):
            for k in range(num_od_pairs):
                i = h * num_od_pairs + k
                fh.write(f"{k},{h + 1},{pdod.q[i]:.6g},{pdod.sigma[i]:.6g}\n")


def pdod_from_csv(in_file) -> PDOD:
    """Read a PDOD written by :func:`pdod_to_csv`."""
    rows = []
    with open(in_file, newline="", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header != "od_index,interval,mean,std":
            raise ValueError(f"{in_file}: unexpected PDOD header {header!r}")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ValueError(f"{in_file}: line {lineno}: expected 4 fields")
            rows.append((int(parts[0]), int(parts[1]), float(parts[2]), float(parts[3])))
    if not rows:
        raise ValueError(f"{in_file}: empty PDOD file")
    num_od = max(r[0] for r in rows) + 1
    num_h = max(r[1] for r in rows)
    q = np.full(num_h * num_od, np.nan)
    sigma = np.full(num_h * num_od, np.nan)
    for k, h, mean, std in rows:
        q[(h - 1) * num_od + k] = mean
        sigma[(h - 1) * num_od + k] = std
    if np.any(np.isnan(q)):
        raise ValueError(f"{in_file}: missing (od_index, interval) entries")
    return PDOD(q=q, sigma=sigma)
