"""Deterministic seeded sampling with splittable keys.

Keys hold 128 bits of state and feed numpy's counter-based Philox generator,
so any draw is a pure function of (key, draw index). Splitting hashes the
parent state with the child index, which makes parallel rollout grids
reproducible regardless of evaluation order.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RngKey",
    "key_from_seed",
    "split",
    "DistributionSpec",
    "gaussian",
    "uniform",
    "sample",
    "sample_batch",
    "CompositeSpec",
    "Segment",
]


@dataclass(frozen=True)
class RngKey:
    """128 bits of seed material for a counter-based generator."""

    state: int

    def __post_init__(self):
        if not 0 <= self.state < 1 << 128:
            raise ValueError("key state must fit in 128 bits")

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.state))


def key_from_seed(seed):
    """Expand a 64-bit integer seed into key material by hashing."""
    digest = hashlib.blake2b(
        int(seed).to_bytes(8, "little", signed=False), digest_size=16
    ).digest()
    return RngKey(int.from_bytes(digest, "little"))


def split(key, n):
    """Derive n pairwise-distinct child keys from `key`."""
    if n < 1:
        raise ValueError("split requires n >= 1")
    parent = key.state.to_bytes(16, "little")
    children = []
    for i in range(n):
        digest = hashlib.blake2b(
            parent + i.to_bytes(8, "little"), digest_size=16
        ).digest()
        children.append(RngKey(int.from_bytes(digest, "little")))
    return children


@dataclass(frozen=True)
class DistributionSpec:
    """Either gaussian(mean, covariance) or uniform(lo, hi), fixed dimension."""

    kind: str
    dim: int
    mean: np.ndarray = None
    cov: np.ndarray = None
    lo: np.ndarray = None
    hi: np.ndarray = None
    # Cholesky factor of cov, computed lazily with jitter fallback
    _chol: list = field(default_factory=list, repr=False, compare=False)

    def validate(self):
        if self.kind == "gaussian":
            if self.mean.shape != (self.dim,) or self.cov.shape != (
                self.dim,
                self.dim,
            ):
                raise ValueError("gaussian spec dimensions inconsistent")
            if not np.allclose(self.cov, self.cov.T, atol=1e-12):
                raise ValueError("covariance must be symmetric")
            eigmin = float(np.linalg.eigvalsh(self.cov).min())
            if eigmin < -1e-10:
                raise ValueError(
                    f"covariance not positive semi-definite (min eig {eigmin:g})"
                )
        elif self.kind == "uniform":
            if self.lo.shape != (self.dim,) or self.hi.shape != (self.dim,):
                raise ValueError("uniform spec dimensions inconsistent")
            if np.any(self.lo > self.hi):
                raise ValueError("uniform spec requires lo <= hi elementwise")
        else:
            raise ValueError(f"unknown distribution kind {self.kind!r}")
        return self

    def cholesky(self):
        if not self._chol:
            if not self.cov.any():
                c = np.zeros_like(self.cov)  # degenerate point mass
            else:
                try:
                    c = np.linalg.cholesky(self.cov)
                except np.linalg.LinAlgError:
                    # PSD-but-singular covariance: retry with tiny jitter
                    c = np.linalg.cholesky(
                        self.cov + 1e-12 * np.eye(self.dim)
                    )
            self._chol.append(c)
        return self._chol[0]

    def nominal(self):
        if self.kind == "gaussian":
            return self.mean.copy()
        return 0.5 * (self.lo + self.hi)

    def draw(self, rng, n=None):
        """One draw (n is None) or an (n, dim) batch from generator `rng`."""
        shape = (self.dim,) if n is None else (n, self.dim)
        if self.kind == "gaussian":
            z = rng.standard_normal(shape)
            return z @ self.cholesky().T + self.mean
        u = rng.random(shape)
        return self.lo + u * (self.hi - self.lo)


def gaussian(mean, cov):
    mean = np.asarray(mean, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return DistributionSpec(
        kind="gaussian", dim=mean.size, mean=mean, cov=cov
    ).validate()


def uniform(lo, hi):
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    return DistributionSpec(kind="uniform", dim=lo.size, lo=lo, hi=hi).validate()


def sample(spec, key):
    """One draw from `spec`, a pure function of the key."""
    return spec.draw(key.generator())


def sample_batch(spec, key, n):
    """(n, dim) draws; row j is a deterministic function of (key, j)."""
    return spec.draw(key.generator(), n=n)


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    spec: DistributionSpec
    nominal_override: np.ndarray = None

    @property
    def length(self):
        return self.spec.dim

    def nominal(self):
        if self.nominal_override is not None:
            return np.asarray(self.nominal_override, dtype=float)
        return self.spec.nominal()


class CompositeSpec:
    """Concatenation of named distribution segments tiling one flat vector."""

    def __init__(self, parts):
        """parts: list of (name, DistributionSpec) or (name, spec, nominal)."""
        self.segments = []
        offset = 0
        seen = set()
        for part in parts:
            name, spec = part[0], part[1]
            nominal = part[2] if len(part) > 2 else None
            if name in seen:
                raise ValueError(f"duplicate segment name {name!r}")
            seen.add(name)
            self.segments.append(Segment(name, offset, spec, nominal))
            offset += spec.dim
        self.dim = offset

    def segment(self, name):
        for seg in self.segments:
            if seg.name == name:
                return seg
        raise KeyError(f"no segment named {name!r}")

    def slice(self, name, phi):
        seg = self.segment(name)
        return phi[seg.offset : seg.offset + seg.length]

    def segment_names(self):
        return [seg.name for seg in self.segments]

    def nominal(self):
        return np.concatenate([seg.nominal() for seg in self.segments])

    def sample(self, key):
        rng = key.generator()
        return np.concatenate([seg.spec.draw(rng) for seg in self.segments])

    def sample_batch(self, key, n):
        rng = key.generator()
        return np.concatenate(
            [seg.spec.draw(rng, n=n) for seg in self.segments], axis=1
        )

    def varying_mask(self, frozen_names):
        """Boolean mask of coordinates outside the frozen segments."""
        mask = np.ones(self.dim, dtype=bool)
        for name in frozen_names:
            seg = self.segment(name)
            mask[seg.offset : seg.offset + seg.length] = False
        return mask

    def freeze(self, phi_rows, frozen_names):
        """Overwrite frozen segments with their nominal values (in place)."""
        for name in frozen_names:
            seg = self.segment(name)
            phi_rows[..., seg.offset : seg.offset + seg.length] = seg.nominal()
        return phi_rows
