"""Bitmask bookkeeping for Z-string operators on N qubits.

A Z string is labeled by a mask: bit (l-1) set means qubit l carries a Z
factor. Mask 0 is the identity. Products compose by XOR: Z_a Z_b = Z_{a^b}.
"""

from __future__ import annotations

import numpy as np


def zstring_masks(n_qubits, include_identity=True):
    """All Z-string labels for n qubits (identity mask 0 optional)."""
    start = 0 if include_identity else 1
    return list(range(start, 1 << n_qubits))


def single_qubit_masks(n_qubits):
    """Masks of weight one, in qubit order 1..N."""
    return [1 << (ell - 1) for ell in range(1, n_qubits + 1)]


def parity(mask):
    """Popcount mod 2."""
    return bin(mask).count("1") & 1


def is_single(mask):
    return mask != 0 and (mask & (mask - 1)) == 0


def qubit_of(mask):
    """Qubit number (1-based) of a weight-one mask."""
    if not is_single(mask):
        raise ValueError(f"mask {mask} is not a single-qubit label")
    return mask.bit_length()


def observable_sign(support, mask):
    """Sign relating left and right action of Z_mask on an observable.

    `support` is the mask of qubits where the observable acts with X or Y.
    The sign is -1 when the overlap has odd weight, else +1.
    """
    return -1 if parity(support & mask) else 1


def z_diagonal(mask, n_qubits):
    """Computational-basis diagonal of the Z string `mask`."""
    states = np.arange(1 << n_qubits)
    signs = np.array([parity(mask & int(s)) for s in states])
    return 1.0 - 2.0 * signs


def swap_bits(mask, qa, qb):
    """Relabel a mask under exchange of qubits qa and qb (1-based)."""
    ba, bb = 1 << (qa - 1), 1 << (qb - 1)
    rest = mask & ~(ba | bb)
    out = rest
    if mask & ba:
        out |= bb
    if mask & bb:
        out |= ba
    return out
