"""Counter-based random streams for reproducible, parallel-safe simulation.

Every draw in a simulation is addressed by ``(seed, rollout, channel, step)``
and produced by a Philox4x64 bit generator with

    key     = (seed mod 2**64, rollout mod 2**64)
    counter = (0, channel, step, 0)

Channel 0 carries the initial-state draw of a rollout, channel 1 the
per-step disturbance draws. Within one ``(channel, step)`` cell values are
consumed in the order documented by each environment (the draw position is
the disturbance slot). Distinct rollout ids never touch the same Philox
block, so rollouts can be generated concurrently without shared state, and
re-running any configuration reproduces every draw bit for bit.

Rollout ids below ``EVAL_ID_BASE`` are reserved for training; held-out
evaluation rollouts live at ``EVAL_ID_BASE`` and above. Instance data
(random system matrices, return-model calibration) uses ids in a third,
even higher region via :func:`instance_rng`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1

INIT_CHANNEL = 0
STEP_CHANNEL = 1

#: First rollout id of the held-out evaluation range.
EVAL_ID_BASE = 1 << 48

#: Rollout-id region reserved for instance-data generation.
DATA_ID_BASE = 1 << 56


@dataclass(frozen=True)
class RolloutStream:
    """Addressable randomness for one simulated rollout."""

    seed: int
    rollout: int

    def rng(self, channel: int, step: int = 0) -> np.random.Generator:
        """Fresh generator for one (channel, step) cell of this rollout."""
        bitgen = np.random.Philox(
            key=[self.seed & _MASK64, self.rollout & _MASK64],
            counter=[0, channel & _MASK64, step & _MASK64, 0],
        )
        return np.random.Generator(bitgen)

    def initial_rng(self) -> np.random.Generator:
        return self.rng(INIT_CHANNEL, 0)

    def step_rng(self, step: int) -> np.random.Generator:
        return self.rng(STEP_CHANNEL, step)


def instance_rng(seed: int, tag: int = 0) -> np.random.Generator:
    """Generator for instance data (system matrices, calibration draws).

    Lives in the rollout-id region above DATA_ID_BASE so it can never
    collide with training or evaluation rollout streams.
    """
    return RolloutStream(seed, DATA_ID_BASE + tag).rng(INIT_CHANNEL, 0)
