import hashlib


def derive_seed(seed, *names):
    """Child seed from a root seed and role names; stable across runs and platforms."""
    key = "/".join([str(int(seed))] + [str(n) for n in names]).encode()
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")
