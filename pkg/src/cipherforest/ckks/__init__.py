"""Self-contained leveled CKKS: RNS ring arithmetic, canonical-embedding
encoding, RLWE encryption, relinearized multiplication, rescaling and
Galois rotations."""
