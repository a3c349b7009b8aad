"""Counter-based random stream splitting.

Every random draw in a run comes from a Philox generator keyed by
``(master_seed, purpose, *counters)``; for example the noise for trajectory
``j`` of iteration ``i`` is ``stream(seed, "action", i, j)``.  Streams do not
depend on execution order or worker count, and two algorithms run with the
same seed see the same rollout randomness.
"""

from __future__ import annotations

import numpy as np

PURPOSES = {
    "policy_init": 1,
    "baseline_init": 2,
    "inverse_init": 3,
    "disc_init": 4,
    "reset": 10,
    "action": 11,
    "baseline_fit": 20,
    "inverse_batch": 21,
    "disc_fit": 22,
    "demo_reset": 30,
    "eval_reset": 31,
    "imitation_subsample": 32,
}


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    key = (PURPOSES[purpose], *(int(c) for c in counters))
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(ss))
