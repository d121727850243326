"""Counter-based random streams keyed by (master seed, tag, grid, replica)."""
import numpy as np

TAGS = {
    "capacity": 1,
    "harmonic": 2,
    "range": 3,
    "window": 4,
    "interlace": 5,
    "vacancy": 6,
    "bernoulli": 7,
    "confine": 8,
    "obstacle": 9,
    "ratio_ri": 10,
    "ratio_ri_reduced": 11,
    "ratio_rw": 12,
    "ratio_bernoulli": 13,
    "lln": 14,
    "pilot": 15,
    "test": 16,
    "volume": 17,
}


def tag_id(tag) -> int:
    if isinstance(tag, (int, np.integer)):
        return int(tag)
    return TAGS[tag]


def stream(seed: int, tag="test", grid: int = 0, replica: int = 0) -> np.random.Generator:
    """Independent Philox generator for one task; identical keys give identical draws."""
    ss = np.random.SeedSequence(entropy=int(seed) & ((1 << 64) - 1),
                                spawn_key=(tag_id(tag), int(grid), int(replica)))
    return np.random.Generator(np.random.Philox(ss))
