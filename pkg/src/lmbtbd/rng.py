"""Named random substreams.

A :class:`Streams` wraps a ``SeedSequence`` and hands out generators keyed by
tuples of non-negative ints, e.g. ``(run, step, stage, label_set, target)``.
The same key always yields the same stream, independently of the order in
which streams are requested, so results do not depend on scheduling.
"""
import numpy as np


class Streams:
    def __init__(self, seed=None, key=()):
        if isinstance(seed, np.random.SeedSequence):
            self._entropy = seed.entropy
            self._key = tuple(seed.spawn_key) + tuple(key)
        else:
            self._entropy = np.random.SeedSequence(seed).entropy
            self._key = tuple(key)
        self._generator = None

    @classmethod
    def wrap(cls, rng) -> "Streams":
        """Accept a Streams, a seed, or a Generator.

        A plain Generator is shared by every key; this keeps ad-hoc calls
        simple but gives up key-addressed reproducibility.
        """
        if isinstance(rng, Streams):
            return rng
        if isinstance(rng, np.random.Generator):
            return _SharedStream(rng)
        return cls(rng)

    @property
    def key(self):
        return self._key

    def child(self, *key) -> "Streams":
        s = Streams.__new__(Streams)
        s._entropy = self._entropy
        s._key = self._key + tuple(int(k) for k in key)
        s._generator = None
        return s

    def seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(self._entropy, spawn_key=self._key)

    def get(self, *key) -> np.random.Generator:
        return np.random.default_rng(self.child(*key).seed_sequence())

    def seed_int(self, *key) -> int:
        """A 32-bit integer seed for libraries that do not take generators."""
        return int(self.child(*key).seed_sequence().generate_state(1)[0])


class _SharedStream(Streams):
    def __init__(self, generator):
        self._generator = generator
        self._key = ()
        self._entropy = None

    def child(self, *key):
        return self

    def get(self, *key):
        return self._generator

    def seed_int(self, *key):
        return int(self._generator.integers(2 ** 31))
