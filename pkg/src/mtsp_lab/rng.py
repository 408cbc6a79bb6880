"""Deterministic random numbers.

All randomness in the lab flows through :class:`Rng`, a thin wrapper around
numpy's Philox counter-based bit generator.  The same (seed, spawn_key) and
the same call sequence produce the same stream on every machine, and child
streams derived with :meth:`Rng.derive` are independent and reproducible
without consuming the parent stream.
"""

from __future__ import annotations

import numpy as np

ALGORITHM = "philox-4x64"


class Rng:
    def __init__(self, seed: int, spawn_key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=self.spawn_key)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def derive(self, *key: int) -> "Rng":
        """A child stream addressed by integers, e.g. rng.derive(iteration, i)."""
        return Rng(self.seed, self.spawn_key + tuple(int(k) for k in key))

    # pass-throughs for the draw shapes the lab uses
    def random(self, size=None):
        return self.generator.random(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self.generator.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.generator.integers(low, high, size=size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.generator.normal(loc, scale, size)

    def state(self) -> dict:
        """JSON-safe snapshot of the full generator state."""
        s = self.generator.bit_generator.state
        return {
            "algorithm": ALGORITHM,
            "seed": self.seed,
            "spawn_key": list(self.spawn_key),
            "counter": [int(x) for x in s["state"]["counter"]],
            "key": [int(x) for x in s["state"]["key"]],
            "buffer": [int(x) for x in s["buffer"]],
            "buffer_pos": int(s["buffer_pos"]),
            "has_uint32": int(s["has_uint32"]),
            "uinteger": int(s["uinteger"]),
        }

    @classmethod
    def from_state(cls, state: dict) -> "Rng":
        if state.get("algorithm") != ALGORITHM:
            raise ValueError(f"unsupported rng algorithm {state.get('algorithm')!r}")
        rng = cls(state["seed"], tuple(state["spawn_key"]))
        bg_state = rng.generator.bit_generator.state
        bg_state["state"]["counter"] = np.array(state["counter"], dtype=np.uint64)
        bg_state["state"]["key"] = np.array(state["key"], dtype=np.uint64)
        bg_state["buffer"] = np.array(state["buffer"], dtype=np.uint64)
        bg_state["buffer_pos"] = state["buffer_pos"]
        bg_state["has_uint32"] = state["has_uint32"]
        bg_state["uinteger"] = state["uinteger"]
        rng.generator.bit_generator.state = bg_state
        return rng
