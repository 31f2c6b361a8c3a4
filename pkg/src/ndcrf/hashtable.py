"""Open-addressing hash table mapping short integer vectors to dense indices.

Insertion and lookup are batched: every pending key advances one probe per
round, so the whole table is built with a handful of vectorized passes instead
of a Python loop per key. New keys are numbered in order of first appearance.
"""

import numpy as np

KEY_LIMIT = 32768
_HASH_MULT = np.uint64(2531011)


class CapacityError(RuntimeError):
    """Raised when a table cannot hold another distinct key."""


class KeyRangeError(ValueError):
    """Raised when a key coordinate does not fit in int16 storage."""


def _next_pow2(n):
    cap = 1
    while cap < n:
        cap <<= 1
    return cap


class VectorHashTable:
    """Linear-probing table of fixed-width int16 keys.

    Parameters
    ----------
    key_size : int
        Number of coordinates per key.
    capacity : int
        Minimum number of slots; rounded up to a power of two.
    """

    def __init__(self, key_size, capacity):
        if key_size < 1:
            raise ValueError("key_size must be >= 1")
        self.key_size = int(key_size)
        self.capacity = _next_pow2(max(int(capacity), 1))
        self._mask = np.uint64(self.capacity - 1)
        self._slot_keys = np.zeros((self.capacity, self.key_size), dtype=np.int16)
        self._slot_index = np.full(self.capacity, -1, dtype=np.int64)
        self._keys = np.zeros((0, self.key_size), dtype=np.int16)

    def __len__(self):
        return self._keys.shape[0]

    @property
    def keys(self):
        """Stored keys, row ``i`` holding the key with index ``i``."""
        return self._keys

    def _check(self, keys):
        keys = np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.key_size:
            raise ValueError(f"keys must have shape (n, {self.key_size}), got {keys.shape}")
        if keys.size and np.abs(keys.astype(np.int64)).max() >= KEY_LIMIT:
            raise KeyRangeError(f"key coordinate out of int16 range (|k| < {KEY_LIMIT})")
        return keys.astype(np.int16)

    def _hash(self, keys):
        h = np.zeros(keys.shape[0], dtype=np.uint64)
        for j in range(self.key_size):
            h = (h + keys[:, j].astype(np.int64).astype(np.uint64)) * _HASH_MULT
        return h & self._mask

    def insert(self, keys):
        """Insert every row of ``keys`` (duplicates allowed); return their indices."""
        keys = self._check(keys)
        n = keys.shape[0]
        out = np.full(n, -1, dtype=np.int64)
        pending = np.arange(n)
        slot = self._hash(keys)
        new_keys = []
        count = len(self)
        probes = 0
        while pending.size:
            if probes > self.capacity:
                raise CapacityError(f"hash table full at capacity {self.capacity}")
            probes += 1
            s = slot[pending].astype(np.int64)
            empty = self._slot_index[s] < 0
            if empty.any():
                cand = pending[empty]
                uniq, first = np.unique(s[empty], return_index=True)
                claimers = cand[first]
                order = np.argsort(claimers, kind="stable")
                claimers, uniq = claimers[order], uniq[order]
                if count + claimers.size > self.capacity:
                    raise CapacityError(
                        f"hash table full: {count + claimers.size} keys > capacity {self.capacity}")
                ids = np.arange(count, count + claimers.size)
                self._slot_keys[uniq] = keys[claimers]
                self._slot_index[uniq] = ids
                new_keys.append(keys[claimers])
                count += claimers.size
            hit = np.all(self._slot_keys[s] == keys[pending], axis=1)
            out[pending[hit]] = self._slot_index[s[hit]]
            pending = pending[~hit]
            slot[pending] = (slot[pending] + np.uint64(1)) & self._mask
        if new_keys:
            added = np.concatenate(new_keys)
            base = len(self)
            # renumber this batch's new entries by first appearance in ``keys``
            first = np.full(added.shape[0], n, dtype=np.int64)
            fresh = out >= base
            np.minimum.at(first, out[fresh] - base, np.flatnonzero(fresh))
            order = np.argsort(first, kind="stable")
            remap = np.empty_like(order)
            remap[order] = np.arange(order.size)
            out[fresh] = remap[out[fresh] - base] + base
            used = self._slot_index >= base
            self._slot_index[used] = remap[self._slot_index[used] - base] + base
            self._keys = np.concatenate([self._keys, added[order]])
        return out

    def lookup(self, keys):
        """Return the index of each row of ``keys``, or -1 where absent."""
        keys = np.asarray(keys)
        n = keys.shape[0]
        out = np.full(n, -1, dtype=np.int64)
        if n == 0:
            return out
        # keys outside int16 can never have been stored
        wide = keys.astype(np.int64)
        ok = np.all(np.abs(wide) < KEY_LIMIT, axis=1)
        keys = np.where(ok[:, None], wide, 0).astype(np.int16)
        pending = np.flatnonzero(ok)
        slot = self._hash(keys)
        probes = 0
        while pending.size and probes <= self.capacity:
            s = slot[pending].astype(np.int64)
            idx = self._slot_index[s]
            empty = idx < 0
            hit = ~empty & np.all(self._slot_keys[s] == keys[pending], axis=1)
            out[pending[hit]] = idx[hit]
            pending = pending[~(hit | empty)]
            slot[pending] = (slot[pending] + np.uint64(1)) & self._mask
            probes += 1
        return out
