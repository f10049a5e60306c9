"""Deterministic random-number plumbing.

Two mechanisms, used for two different jobs:

* ``substream`` derives an independent ``numpy.random.Generator`` from a root
  seed plus string/int tokens (stage name, slide id, epoch, ...).  Token
  hashing is SHA-256 based, so streams are stable across processes and
  platforms and never depend on dict iteration order.

* ``counter_uniform`` / ``counter_randint`` are stateless counter-based
  generators (SplitMix64-style finalizer).  Draw ``j`` of replicate ``i`` is a
  pure function of ``(seed, i, j)``, so bootstrap replicates can be computed
  in any order, in any chunking, on any number of workers, and still produce
  identical results.
"""

from __future__ import annotations

import hashlib

import numpy as np

__all__ = [
    "stable_token_hash",
    "substream",
    "substream_seed",
    "derive_seed",
    "counter_uniform",
    "counter_randint",
]

_MASK = 0xFFFFFFFFFFFFFFFF
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def stable_token_hash(token) -> int:
    """Map a str/int token to a stable 64-bit integer (not Python's salted hash)."""
    if isinstance(token, (int, np.integer)):
        data = b"i" + int(token).to_bytes(16, "little", signed=True)
    elif isinstance(token, str):
        data = b"s" + token.encode("utf-8")
    else:
        raise TypeError(f"unsupported substream token type: {type(token).__name__}")
    return int.from_bytes(hashlib.sha256(data).digest()[:8], "little")


def substream_seed(seed: int, *tokens) -> np.random.SeedSequence:
    """SeedSequence for the named substream of ``seed``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF] + [stable_token_hash(t) for t in tokens]
    return np.random.SeedSequence(entropy)


def substream(seed: int, *tokens) -> np.random.Generator:
    """Independent Generator for the named substream of ``seed``."""
    return np.random.default_rng(substream_seed(seed, *tokens))


def derive_seed(seed: int, *tokens) -> int:
    """Collapse a named substream to a plain 63-bit integer seed."""
    h = hashlib.sha256()
    h.update(int(seed).to_bytes(16, "little", signed=True))
    for t in tokens:
        h.update(stable_token_hash(t).to_bytes(8, "little"))
    return int.from_bytes(h.digest()[:8], "little") >> 1


def _mix64(x: np.ndarray) -> np.ndarray:
    # SplitMix64 finalizer; array uint64 ops wrap silently.
    x = (x ^ (x >> np.uint64(30))) * _MIX1
    x = (x ^ (x >> np.uint64(27))) * _MIX2
    return x ^ (x >> np.uint64(31))


def _mix64_int(x: int) -> int:
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _counter_bits(seed: int, replicate: np.ndarray, draw: np.ndarray) -> np.ndarray:
    # seed mixing stays in exact Python ints; numpy scalars would warn on wrap
    h0 = np.uint64(_mix64_int(int(seed) + 0x9E3779B97F4A7C15))
    h = _mix64(h0 ^ (replicate.astype(np.uint64) * _GOLDEN))
    return _mix64(h ^ (draw.astype(np.uint64) * _MIX2))


def counter_uniform(seed: int, replicates, draws) -> np.ndarray:
    """Uniform [0, 1) floats indexed by (replicate, draw).

    ``replicates`` and ``draws`` are 1-D integer arrays; the result has shape
    ``(len(replicates), len(draws))`` and cell (i, j) depends only on
    ``(seed, replicates[i], draws[j])``.
    """
    rep = np.asarray(replicates, dtype=np.uint64)[:, None]
    drw = np.asarray(draws, dtype=np.uint64)[None, :]
    bits = _counter_bits(seed, rep, drw)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def counter_randint(seed: int, replicates, draws, n: int) -> np.ndarray:
    """Integers in [0, n) indexed by (replicate, draw); same contract as counter_uniform."""
    if n <= 0:
        raise ValueError("n must be positive")
    rep = np.asarray(replicates, dtype=np.uint64)[:, None]
    drw = np.asarray(draws, dtype=np.uint64)[None, :]
    bits = _counter_bits(seed, rep, drw)
    return (bits % np.uint64(n)).astype(np.int64)
