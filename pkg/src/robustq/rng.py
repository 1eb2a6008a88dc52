"""Per-replication random streams.

Replication ``k`` of a run with master seed ``s`` is driven by the 32-bit
seed ``SeedSequence(s).spawn(k + 1)[k].generate_state(1)[0]``. Streams
depend only on (s, k), so results do not depend on how replications are
split across workers.
"""
import numpy as np


def replication_seeds(seed: int, count: int, start: int = 0) -> np.ndarray:
    children = np.random.SeedSequence(int(seed)).spawn(start + count)[start:]
    return np.array([c.generate_state(1, np.uint32)[0] for c in children], dtype=np.uint32)


def replication_seed(seed: int, index: int) -> int:
    return int(replication_seeds(seed, 1, start=index)[0])
