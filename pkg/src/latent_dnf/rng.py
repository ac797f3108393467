"""Keyed random substreams.

A stream is identified by (master seed, purpose tag, *integer keys), e.g.
(seed, "posterior", step, example index). Draws therefore do not depend on
batch composition or evaluation order.
"""

import zlib

import numpy as np


def tag_code(tag: str) -> int:
    return zlib.crc32(tag.encode("utf-8"))


def substream(seed, tag, *keys):
    return np.random.default_rng([int(seed), tag_code(tag), *(int(k) for k in keys)])


def keyed_uniforms(seed, tag, step, example_ids, shape):
    """Uniforms of shape ``(len(example_ids), *shape)``; row i comes from the
    stream keyed by ``(seed, tag, step, example_ids[i])``."""
    out = np.empty((len(example_ids), *shape))
    for i, idx in enumerate(example_ids):
        out[i] = substream(seed, tag, step, idx).random(shape)
    return out
