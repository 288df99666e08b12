import hashlib
import json
import math
from typing import Any

import numpy as np


def sanitize_obj(obj: Any) -> Any:
    """
    Recursively convert all numbers to Python float/int/bool, replace NaN/Inf with None,
    convert NumPy arrays to nested lists and pydantic models to dicts.
    """
    if obj is None:
        return None
    # Pydantic models
    if hasattr(obj, "model_dump"):
        return sanitize_obj(obj.model_dump())
    # Booleans first, bool is a subclass of int
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    # Integers keep their type, they are always finite
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    # Floats (python and numpy)
    if isinstance(obj, (float, np.floating)):
        val = float(obj)
        if not math.isfinite(val):
            return None
        return val
    # NumPy arrays
    if isinstance(obj, np.ndarray):
        return sanitize_obj(obj.tolist())
    # Dict
    if isinstance(obj, dict):
        return {str(k): sanitize_obj(v) for k, v in obj.items()}
    # List / tuple
    if isinstance(obj, (list, tuple)):
        return [sanitize_obj(x) for x in obj]
    # Other types (str, Enum values, paths)
    if hasattr(obj, "value") and not isinstance(obj, str):
        return sanitize_obj(obj.value)
    if not isinstance(obj, str):
        return str(obj)
    return obj


def stable_hash(obj: Any) -> str:
    """SHA-256 of the canonical (sorted, sanitized) JSON form of ``obj``."""
    canonical = json.dumps(sanitize_obj(obj), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; independent streams come from distinct seeds."""
    return np.random.Generator(np.random.Philox(int(seed)))


def spawn_seeds(seed: int, n: int) -> list:
    """Derive ``n`` independent integer seeds from one master seed."""
    children = np.random.SeedSequence(int(seed)).spawn(n)
    return [int(c.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1)) for c in children]
