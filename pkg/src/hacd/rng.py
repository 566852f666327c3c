"""Named, reproducible random substreams derived from a single base seed."""

import zlib

import numpy as np

__all__ = ["substream"]


def substream(seed: int, name: str, *indices: int) -> np.random.Generator:
    """Generator for the substream ``name`` (plus optional integer indices).

    Every source of randomness in the pipeline draws from a substream so that
    one ``--seed`` reproduces a whole run. The same (seed, name, indices)
    always yields an identical generator; distinct names decorrelate.
    """
    key = zlib.crc32(name.encode("utf-8"))
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, key, *[int(i) for i in indices]])
    return np.random.default_rng(ss)
