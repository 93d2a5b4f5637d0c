import json
import os
import zlib
from concurrent.futures import ProcessPoolExecutor

import numpy as np
from threadpoolctl import threadpool_limits


def stream_rng(seed, name, *extra):
    """Generator for a named sub-stream of a run seed.

    Streams with different names (``"sampling"``, ``"data"``, ``"init"``, ...)
    are independent, so changing how much one consumes never shifts another.
    """
    key = [int(seed) & 0xFFFFFFFFFFFFFFFF, zlib.crc32(name.encode()), *(int(e) for e in extra)]
    return np.random.default_rng(np.random.SeedSequence(key))


def stream_seed(seed, name, *extra):
    return int(stream_rng(seed, name, *extra).integers(2 ** 63))


def _default(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serializable: {type(o)}")


def dumps(obj, **kw):
    return json.dumps(obj, default=_default, **kw)


class JsonlLog:
    """Append-only line-delimited JSON log."""

    def __init__(self, path):
        self.path = path
        self._f = open(path, "a")

    def write(self, record):
        self._f.write(dumps(record) + "\n")

    def close(self):
        self._f.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_jsonl(path):
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def default_workers():
    """Worker count from ``RCP_WORKERS`` (default 1).  Never changes results."""
    return max(1, int(os.environ.get("RCP_WORKERS", "1")))


def _single_threaded(args):
    fn, item = args
    with threadpool_limits(1):
        return fn(item)


def parallel_map(fn, items, workers=1):
    """``[fn(x) for x in items]`` in input order, optionally across processes.

    Each call runs with single-threaded BLAS so results do not depend on the
    worker count.
    """
    items = list(items)
    jobs = [(fn, x) for x in items]
    if workers <= 1 or len(items) <= 1:
        return [_single_threaded(j) for j in jobs]
    with ProcessPoolExecutor(min(workers, len(items))) as pool:
        return list(pool.map(_single_threaded, jobs))
