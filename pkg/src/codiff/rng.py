"""Counter-based noise streams.

Every random draw in the library comes from a Philox counter-based
generator addressed by (seed, stream, step, particle).  The stream id
separates logical purposes (joint cloud noise, contrastive cloud noise,
resampling uniforms, ...), the step index is the loop or diffusion time
index, and the particle offset lets a single particle's row be
regenerated without drawing the whole block.  Normals are produced by
inverse-CDF transform of raw counter words, so the number of words
consumed per value is fixed and rows of a block can be addressed by
advancing the counter.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

# Stream ids used across the library.  Values are arbitrary but stable;
# changing them changes every sampled trajectory.
JOINT_THETA = 1
JOINT_Y = 2
CONTRASTIVE = 3
POOLED = 4
RESAMPLE = 5
DIGS = 6
DIFFUSION_INIT = 7
DIFFUSION_STEP = 8
OBS_PATH = 9
SEQ_OUTCOME = 10
BASELINE_DESIGN = 11
EVAL_ROLLOUT = 12
EVAL_CONTRAST = 13
DESIGN_INIT = 14

_INV_2_53 = 1.0 / (1 << 53)
_HALF_STEP = 0.5 * _INV_2_53

# Words per 128-bit Philox counter block.
_WORDS_PER_BLOCK = 4


def _pad_width(width: int) -> int:
    """Round a row width up to a whole number of counter blocks."""
    return _WORDS_PER_BLOCK * ((width + _WORDS_PER_BLOCK - 1) // _WORDS_PER_BLOCK)


class NoiseStreams:
    """Addressable source of uniforms and normals for one run seed."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)

    def _raw(self, stream: int, step: int, offset_blocks: int, n_words: int) -> np.ndarray:
        bitgen = Philox(counter=[0, 0, int(step), 0], key=[self.seed, int(stream)])
        if offset_blocks:
            bitgen.advance(offset_blocks)
        return bitgen.random_raw(n_words)

    def uniforms(self, stream: int, step: int, shape) -> np.ndarray:
        """Uniform draws in (0, 1), one counter word per value."""
        shape = np.atleast_1d(np.asarray(shape, dtype=np.int64))
        n = int(np.prod(shape))
        raw = self._raw(stream, step, 0, n)
        u = (raw >> np.uint64(11)) * _INV_2_53 + _HALF_STEP
        return u.reshape(tuple(shape))

    def normals(self, stream: int, step: int, shape) -> np.ndarray:
        """Standard normal draws via inverse CDF of the raw words."""
        return ndtri(self.uniforms(stream, step, shape))

    def normal_block(self, stream: int, step: int, n_particles: int, width: int) -> np.ndarray:
        """(n_particles, width) block where row i belongs to particle i.

        Rows are laid out on counter-block boundaries so that
        normal_for_particle can regenerate any single row.
        """
        padded = _pad_width(width)
        raw = self._raw(stream, step, 0, n_particles * padded)
        u = (raw >> np.uint64(11)) * _INV_2_53 + _HALF_STEP
        return ndtri(u.reshape(n_particles, padded)[:, :width])

    def normal_for_particle(self, stream: int, step: int, particle: int, width: int) -> np.ndarray:
        """Row `particle` of the corresponding normal_block call."""
        padded = _pad_width(width)
        offset = particle * (padded // _WORDS_PER_BLOCK)
        raw = self._raw(stream, step, offset, padded)
        u = (raw >> np.uint64(11)) * _INV_2_53 + _HALF_STEP
        return ndtri(u[:width])

    def generator(self, stream: int, step: int) -> np.random.Generator:
        """A full numpy Generator on the (stream, step) substream.

        Used where variable-consumption sampling is fine (model outcome
        draws and other block-at-once uses); not row-addressable.
        """
        return np.random.Generator(Philox(counter=[0, 0, int(step), 0], key=[self.seed, int(stream)]))
