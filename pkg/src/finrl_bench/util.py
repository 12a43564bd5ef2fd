import dataclasses
import json
import zlib
from pathlib import Path
from typing import Dict

import numpy as np
import yaml


def load_config() -> Dict:
    """Loads the packaged default config file.

    Returns:
        dict: The configuration.
    """
    project_dir = Path(__file__).resolve().parents[0]
    config_file_path = project_dir / "config.yml"
    with open(str(config_file_path), "r") as config_file:
        return yaml.safe_load(config_file)


def derive_seed(seed: int, stream: str) -> int:
    """Derives the seed of a named random sub-stream from the top-level seed.

    Args:
        seed (int): The run seed.
        stream (str): Name of the sub-stream, e.g. 'rollout' or 'agent-2'.

    Returns:
        int: A 32 bit seed that only depends on (seed, stream).
    """
    sequence = np.random.SeedSequence([seed, zlib.crc32(stream.encode("utf-8"))])
    return int(sequence.generate_state(1)[0])


def deep_merge(base: Dict, override: Dict) -> Dict:
    """Recursively merges override into a copy of base."""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


class EnhancedJSONEncoder(json.JSONEncoder):
    def default(self, o):
        if dataclasses.is_dataclass(o):
            return dataclasses.asdict(o)
        if isinstance(o, np.ndarray):
            return o.tolist()
        if isinstance(o, np.integer):
            return int(o)
        if isinstance(o, np.floating):
            return float(o)
        if isinstance(o, Path):
            return str(o)
        return super().default(o)
