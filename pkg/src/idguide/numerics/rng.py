"""Counter-based random stream.

Every draw builds a fresh Philox4x64-10 generator (numpy's implementation of
the Salmon et al. counter-based bit generator) keyed by ``seed`` with the
stream ``counter`` placed in the most significant 64-bit word of the 256-bit
Philox counter, then advances ``counter`` by one. A draw is therefore a pure
function of ``(seed, counter, shape)``: no global state, and the result does
not depend on how many draws happened in other streams. Normal variates use
numpy's ziggurat sampler on top of those bits, which is platform independent.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


@dataclass
class SeededRng:
    seed: int
    counter: int = 0

    def generator(self) -> np.random.Generator:
        bits = np.random.Philox(key=self.seed & ((1 << 128) - 1),
                                counter=(self.counter & _MASK64) << 192)
        self.counter += 1
        return np.random.Generator(bits)

    def fork(self, stream: int) -> "SeededRng":
        """Independent child stream, e.g. one per clip or worker."""
        mixed = np.random.SeedSequence([self.seed & _MASK64, stream & _MASK64]).generate_state(2, np.uint64)
        return SeededRng(int(mixed[0]) | (int(mixed[1]) << 64))

    def uniform(self, low: float = 0.0, high: float = 1.0, size=None) -> np.ndarray:
        return self.generator().uniform(low, high, size)

    def integers(self, low: int, high: int, size=None) -> np.ndarray:
        return self.generator().integers(low, high, size)


def gaussian_sample(rng: SeededRng, shape, scale: float = 1.0) -> np.ndarray:
    """I.i.d. N(0, scale^2) draws; consumes one counter step."""
    if scale < 0:
        raise ValueError("scale must be non-negative")
    z = rng.generator().standard_normal(shape)
    return z * scale if scale != 0 else np.zeros(shape)
