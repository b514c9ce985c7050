"""Exact modular arithmetic for 2x2 matrix ciphers over residue rings.

Everything here works on plain Python integers, so intermediate products
are exact at any bit width.  Values that are nominally twice the modulus
width travel as big-endian (hi, lo) limb pairs; with a limb width of at
most ``modulus_bits - 1`` every limb stays below every session modulus,
which is what makes decryption exact.
"""

from __future__ import annotations

from typing import NamedTuple, Optional

DEFAULT_LIMB_BITS = 63


class Vec2(NamedTuple):
    """Two-component column vector (residues or limb coordinates)."""

    c1: int
    c2: int


class Mat2(NamedTuple):
    """2x2 integer matrix with entries addressed row-major."""

    m11: int
    m12: int
    m21: int
    m22: int


def mod_mul(a: int, b: int, q: int) -> int:
    """Exact (a * b) mod q."""
    if q < 2:
        raise ValueError(f"modulus must be >= 2, got {q}")
    return (a * b) % q


def mod_inv(a: int, q: int) -> Optional[int]:
    """Inverse of a modulo q via extended Euclid, or None when gcd(a, q) != 1.

    None is a normal outcome ("skip this equation"), never an error.
    """
    if q < 2:
        raise ValueError(f"modulus must be >= 2, got {q}")
    a %= q
    old_r, r = a, q
    old_s, s = 1, 0
    while r:
        k = old_r // r
        old_r, r = r, old_r - k * r
        old_s, s = s, old_s - k * s
    if old_r != 1:
        return None
    return old_s % q


def mat_vec_mod(m: Mat2, t: Vec2, q: int) -> Vec2:
    """(m @ t) mod q, computed exactly.

    Components of t must already lie in [0, q); a component at or above q
    could not be recovered by decryption, so it is rejected here.
    """
    t1, t2 = t
    if not (0 <= t1 < q and 0 <= t2 < q):
        raise ValueError(f"vector component outside [0, {q})")
    return Vec2((m.m11 * t1 + m.m12 * t2) % q, (m.m21 * t1 + m.m22 * t2) % q)


def mat_mul_mod(x: Mat2, y: Mat2, q: int) -> Mat2:
    """(x @ y) mod q entrywise-exact."""
    if q < 2:
        raise ValueError(f"modulus must be >= 2, got {q}")
    return Mat2(
        (x.m11 * y.m11 + x.m12 * y.m21) % q,
        (x.m11 * y.m12 + x.m12 * y.m22) % q,
        (x.m21 * y.m11 + x.m22 * y.m21) % q,
        (x.m21 * y.m12 + x.m22 * y.m22) % q,
    )


def transpose(m: Mat2) -> Mat2:
    return Mat2(m.m11, m.m21, m.m12, m.m22)


def mat_det(m: Mat2) -> int:
    return m.m11 * m.m22 - m.m12 * m.m21


def mat_inv_mod(m: Mat2, q: int) -> Optional[Mat2]:
    """Inverse of m modulo q, or None when det(m) is not invertible mod q."""
    d = mod_inv(mat_det(m) % q, q)
    if d is None:
        return None
    return Mat2(
        (m.m22 * d) % q,
        (-m.m12 * d) % q,
        (-m.m21 * d) % q,
        (m.m11 * d) % q,
    )


def encode128(x: int, limb_bits: int = DEFAULT_LIMB_BITS) -> Vec2:
    """Split x into big-endian limbs (hi, lo), each below 2**limb_bits.

    Rejects x outside [0, 2**(2*limb_bits)): such a value has no exact
    two-coordinate representation and could only be recovered as a
    residue class.
    """
    if not 0 <= x < (1 << (2 * limb_bits)):
        raise ValueError(f"value needs more than {2 * limb_bits} bits: {x}")
    return Vec2(x >> limb_bits, x & ((1 << limb_bits) - 1))


def decode128(v: Vec2, limb_bits: int = DEFAULT_LIMB_BITS) -> int:
    """Inverse of encode128; rejects limbs outside [0, 2**limb_bits)."""
    hi, lo = v
    bound = 1 << limb_bits
    if not (0 <= hi < bound and 0 <= lo < bound):
        raise ValueError(f"limb outside [0, 2**{limb_bits})")
    return (hi << limb_bits) | lo
