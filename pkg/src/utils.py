import hashlib
import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from tqdm import tqdm

logger = logging.getLogger(__name__)


def load_config(config_path):
    with open(config_path, "r") as f:
        return json.load(f)


def write_json(obj, path):
    """Write `obj` as pretty JSON with sorted keys so reruns are byte-identical."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as out:
        json.dump(obj, out, indent=2, sort_keys=True)
        out.write("\n")


def component_id(name):
    # stable across interpreter runs, unlike hash()
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little")


def derive_rng(seed, component, *indices):
    """
    Build an independent generator for one named consumer of randomness.

    Args:
        seed (int): Top-level seed of the run.
        component (str): Name of the consumer, e.g. "resample" or "cv-folds".
        *indices (int): Replicate indices (bootstrap b, simulated h, rep, ...).

    Returns:
        numpy.random.Generator
    """
    key = (component_id(component),) + tuple(int(i) for i in indices)
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=key))


def content_hash(*payloads):
    """sha256 over files (by path) and JSON-able objects, in the order given."""
    sha = hashlib.sha256()
    for payload in payloads:
        if isinstance(payload, str) and os.path.isfile(payload):
            with open(payload, "rb") as f:
                for block in iter(lambda: f.read(1 << 16), b""):
                    sha.update(block)
        else:
            sha.update(json.dumps(payload, sort_keys=True).encode("utf-8"))
    return sha.hexdigest()


def parallel_map(func, items, threads=1, desc=None, progress=False):
    """
    Apply `func` to every item with a bounded thread pool.

    Results come back in the order of `items`, independent of scheduling.
    """
    items = list(items)
    threads = max(1, int(threads or 1))
    bar = tqdm(total=len(items), desc=desc, disable=not progress)
    try:
        if threads == 1 or len(items) <= 1:
            results = []
            for item in items:
                results.append(func(item))
                bar.update(1)
            return results
        with ThreadPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(func, item) for item in items]
            results = []
            for future in futures:
                results.append(future.result())
                bar.update(1)
            return results
    finally:
        bar.close()


def default_threads():
    return os.cpu_count() or 1
