"""Index-keyed splitmix64 hashing.

Every random decision in the phantom generator is a pure function of
``(seed, stream, index)``, so output never depends on call order or on how
generation is split across workers.
"""
import numpy as np

GOLDEN_GAMMA = np.uint64(0x9E3779B97F4A7C15)
MIX1 = np.uint64(0xBF58476D1CE4E5B9)
MIX2 = np.uint64(0x94D049BB133111EB)
_INV_2_53 = 1.0 / float(1 << 53)


def splitmix64(x):
    """Finalizer of the splitmix64 generator, applied elementwise (mod 2**64)."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + GOLDEN_GAMMA
        z = (z ^ (z >> np.uint64(30))) * MIX1
        z = (z ^ (z >> np.uint64(27))) * MIX2
    return z ^ (z >> np.uint64(31))


def stream_key(seed: int, stream: int) -> np.uint64:
    s = splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF))
    return splitmix64(s ^ np.uint64(stream & 0xFFFFFFFFFFFFFFFF))


def uniform(seed: int, stream: int, index) -> np.ndarray:
    """Uniform doubles in [0, 1) keyed by integer ``index`` (any shape)."""
    key = stream_key(seed, stream)
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = splitmix64(key + idx * GOLDEN_GAMMA)
    return (h >> np.uint64(11)).astype(np.float64) * _INV_2_53
