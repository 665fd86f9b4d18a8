"""Deterministic RNG streams keyed by integer paths.

Every stochastic component draws from its own stream derived from
``(root_seed, domain, *indices)``, so adding work units (years, epochs,
samples, trials, tiles) never perturbs the draws of existing ones.
"""

from __future__ import annotations

import numpy as np

# Domain tags, one per stochastic subsystem.
DOMAIN_LAYOUT = 0      # field layout and churn
DOMAIN_BASE = 1        # base reflectance texture and per-field jitter
DOMAIN_NOISE = 2       # per-year pixel noise
DOMAIN_ORDER = 3       # epoch shuffling
DOMAIN_AUGMENT = 4     # per-sample augmentation
DOMAIN_INIT = 5        # parameter initialization
DOMAIN_DROPOUT = 6     # training dropout masks
DOMAIN_MC = 7          # MC-dropout trials

_MASK64 = (1 << 64) - 1


def stream(*keys: int) -> np.random.Generator:
    """Generator for the integer key path; identical keys, identical stream."""
    return np.random.default_rng(np.random.SeedSequence([int(k) & _MASK64 for k in keys]))


def derive_seed(*keys: int) -> int:
    """Collapse a key path into a single 64-bit seed (for nested configs)."""
    ss = np.random.SeedSequence([int(k) & _MASK64 for k in keys])
    return int(ss.generate_state(2, np.uint32).view(np.uint64)[0])
