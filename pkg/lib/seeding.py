"""Named random substreams derived from one root seed."""

import hashlib

import torch

_SEED_BITS = 63


def derive_seed(root: int, *names: object) -> int:
    """Derive a reproducible sub-seed for the stream named by ``names``.

    Example:
        >>> derive_seed(0, "train", "epoch", 3) == derive_seed(0, "train", "epoch", 3)
        True
    """
    key = "/".join([str(root), *(str(name) for name in names)])
    digest = hashlib.sha256(key.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big") % (1 << _SEED_BITS)


def generator_for(root: int, *names: object) -> torch.Generator:
    """Return a CPU torch generator seeded from a named substream."""
    return torch.Generator().manual_seed(derive_seed(root, *names))
