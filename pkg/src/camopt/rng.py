"""Deterministic, component-scoped random number generation.

Every source of randomness in the package flows through a counter-based
Philox generator. Component generators are derived from a single run seed
by hashing the component name, so adding a component never perturbs the
streams of existing ones.
"""

import hashlib

import numpy as np

# Philox serialized-state layout: counter(4) + key(2) + buffer(4)
# + buffer_pos + has_uint32 + uinteger, all as uint64.
STATE_WORDS = 13


def derive_seed(run_seed, component):
    """Map (run seed, component name) to an independent 64-bit seed."""
    digest = hashlib.sha256(f"{int(run_seed)}:{component}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def make_generator(run_seed, component):
    """Philox generator for one named component of a seeded run."""
    return np.random.Generator(np.random.Philox(key=derive_seed(run_seed, component)))


def state_to_array(gen):
    """Serialize a Philox generator's full state to a uint64 vector."""
    st = gen.bit_generator.state
    if st["bit_generator"] != "Philox":
        raise ValueError(f"expected a Philox generator, got {st['bit_generator']}")
    words = np.empty(STATE_WORDS, dtype=np.uint64)
    words[0:4] = st["state"]["counter"]
    words[4:6] = st["state"]["key"]
    words[6:10] = st["buffer"]
    words[10] = st["buffer_pos"]
    words[11] = st["has_uint32"]
    words[12] = st["uinteger"]
    return words


def state_from_array(words):
    """Rebuild a Philox generator from a vector made by state_to_array."""
    words = np.asarray(words, dtype=np.uint64)
    if words.shape != (STATE_WORDS,):
        raise ValueError(f"expected {STATE_WORDS} state words, got shape {words.shape}")
    bg = np.random.Philox()
    bg.state = {
        "bit_generator": "Philox",
        "state": {"counter": words[0:4].copy(), "key": words[4:6].copy()},
        "buffer": words[6:10].copy(),
        "buffer_pos": int(words[10]),
        "has_uint32": int(words[11]),
        "uinteger": int(words[12]),
    }
    return np.random.Generator(bg)
