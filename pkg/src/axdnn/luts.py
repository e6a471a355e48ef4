"""Behavioral models of unsigned integer multipliers as exhaustive lookup tables.

A w-bit multiplier is represented by its full truth table: a flat uint32 array
of length 2**(2w) where entry ``(a << w) | b`` holds the product the circuit
returns for operands a and b. Routing inference through such a table
reproduces the hardware bit-for-bit without simulating any gates.

Generator families
------------------
exact            plain a*b
operand_trunc:k  both operands with their k low bits zeroed before multiplying
pp_trunc:k       partial products of column weight below 2**k dropped
mitchell_log     Mitchell's logarithmic multiplier (piecewise-linear mantissa)
"""

from __future__ import annotations

import csv
import os
import struct
from dataclasses import dataclass

import numpy as np

LUT_MAGIC = b"AXM1"
LUT_VERSION = 1

MIN_BIT_WIDTH = 2
MAX_BIT_WIDTH = 8


class LutError(ValueError):
    """Malformed LUT file, table, or generator parameters."""


@dataclass(frozen=True)
class ErrorMetrics:
    """Aggregate deviation of a LUT from the exact product table.

    mae_pct is the mean absolute error over all 2**(2w) operand pairs,
    normalized by the maximum exact product (2**w - 1)**2 and expressed
    in percent. error_rate_pct is the share of operand pairs with any
    deviation at all; worst_case_error the largest absolute deviation.
    """

    mae_pct: float
    error_rate_pct: float
    worst_case_error: int


def _exact_table(bit_width: int) -> np.ndarray:
    ops = np.arange(1 << bit_width, dtype=np.uint32)
    return np.multiply.outer(ops, ops).reshape(-1)


def _operand_trunc_table(bit_width: int, k: int) -> np.ndarray:
    if not 0 <= k < bit_width:
        raise LutError(f"operand_trunc needs 0 <= k < bit_width, got k={k}")
    ops = np.arange(1 << bit_width, dtype=np.uint32)
    trunc = ops & ~np.uint32((1 << k) - 1)
    return np.multiply.outer(trunc, trunc).reshape(-1)


def _pp_trunc_table(bit_width: int, k: int) -> np.ndarray:
    # Keep only partial-product bits a_i * b_j * 2**(i+j) with i + j >= k.
    if not 0 <= k <= 2 * bit_width - 2:
        raise LutError(f"pp_trunc needs 0 <= k <= {2 * bit_width - 2}, got k={k}")
    ops = np.arange(1 << bit_width, dtype=np.uint32)
    table = np.zeros((1 << bit_width, 1 << bit_width), dtype=np.uint32)
    for i in range(bit_width):
        a_bit = (ops >> i) & 1
        for j in range(bit_width):
            if i + j < k:
                continue
            b_bit = (ops >> j) & 1
            table += np.multiply.outer(a_bit, b_bit) << (i + j)
    return table.reshape(-1)


def _mitchell_table(bit_width: int) -> np.ndarray:
    # log2(a) ~ k_a + A/2**k_a with k_a the index of the leading one and
    # A = a - 2**k_a the mantissa remainder. Adding the approximate logs and
    # exponentiating with the same linear interpolation gives, all in exact
    # integer arithmetic (c = A*2**k_b + B*2**k_a, K = k_a + k_b):
    #   p = 2**K + c        if c <  2**K
    #   p = 2*c             otherwise (mantissa sum carried into the exponent)
    n = 1 << bit_width
    lead = np.array([max(v.bit_length() - 1, 0) for v in range(n)], dtype=np.int64)
    vals = np.arange(n, dtype=np.int64)
    mant = vals - (np.int64(1) << lead)

    ka = lead[:, None]
    kb = lead[None, :]
    cross = mant[:, None] * (np.int64(1) << kb) + mant[None, :] * (np.int64(1) << ka)
    base = np.int64(1) << (ka + kb)
    prod = np.where(cross < base, base + cross, 2 * cross)
    prod = np.where((vals[:, None] == 0) | (vals[None, :] == 0), 0, prod)
    return prod.astype(np.uint32).reshape(-1)


def generate(family: str, bit_width: int, k: int | None = None,
             name: str | None = None) -> "MultiplierLUT":
    """Build a LUT for one of the generator families.

    family is "exact", "operand_trunc", "pp_trunc" or "mitchell_log";
    the truncation families require the parameter k.
    """
    if not MIN_BIT_WIDTH <= bit_width <= MAX_BIT_WIDTH:
        raise LutError(f"bit_width must be in [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}], "
                       f"got {bit_width}")
    if family == "exact":
        table = _exact_table(bit_width)
        default = "exact"
    elif family == "operand_trunc":
        if k is None:
            raise LutError("operand_trunc requires k")
        table = _operand_trunc_table(bit_width, k)
        default = f"operand_trunc:{k}"
    elif family == "pp_trunc":
        if k is None:
            raise LutError("pp_trunc requires k")
        table = _pp_trunc_table(bit_width, k)
        default = f"pp_trunc:{k}"
    elif family == "mitchell_log":
        table = _mitchell_table(bit_width)
        default = "mitchell_log"
    else:
        raise LutError(f"unknown multiplier family {family!r}")
    return MultiplierLUT(name or default, bit_width, table)


@dataclass
class MultiplierLUT:
    """Exhaustive w-bit x w-bit unsigned product table."""

    name: str
    bit_width: int
    table: np.ndarray

    def __post_init__(self) -> None:
        w = self.bit_width
        if not MIN_BIT_WIDTH <= w <= MAX_BIT_WIDTH:
            raise LutError(f"bit_width must be in [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}], "
                           f"got {w}")
        table = np.ascontiguousarray(self.table, dtype=np.uint32)
        if table.shape != ((1 << w) ** 2,):
            raise LutError(f"table must have 2**(2*{w}) = {(1 << w) ** 2} entries, "
                           f"got shape {self.table.shape}")
        limit = ((1 << w) - 1) ** 2
        if int(table.max(initial=0)) > limit:
            raise LutError(f"table entry {int(table.max())} exceeds the maximum "
                           f"{w}-bit product {limit}")
        self.table = table
        self.table.flags.writeable = False

    def multiply(self, a: int, b: int) -> int:
        """Product of two operands via table lookup."""
        hi = (1 << self.bit_width) - 1
        if not (0 <= a <= hi and 0 <= b <= hi):
            raise LutError(f"operands must be in [0, {hi}], got ({a}, {b})")
        return int(self.table[(a << self.bit_width) | b])

    @property
    def is_exact(self) -> bool:
        return bool(np.array_equal(self.table, _exact_table(self.bit_width)))

    def error_metrics(self) -> ErrorMetrics:
        return error_metrics(self)


def error_metrics(lut: MultiplierLUT) -> ErrorMetrics:
    """MAE (percent of max product), error rate, worst-case absolute error."""
    w = lut.bit_width
    diff = np.abs(lut.table.astype(np.int64) - _exact_table(w).astype(np.int64))
    n_pairs = (1 << w) ** 2
    max_prod = ((1 << w) - 1) ** 2
    return ErrorMetrics(
        mae_pct=100.0 * float(diff.sum()) / (n_pairs * max_prod),
        error_rate_pct=100.0 * int(np.count_nonzero(diff)) / n_pairs,
        worst_case_error=int(diff.max()),
    )


def save_lut(lut: MultiplierLUT, path: str | os.PathLike) -> None:
    """Write magic | version u8 | bit_width u8 | name_len u16 LE | name | table u32 LE."""
    name_bytes = lut.name.encode("utf-8")
    if len(name_bytes) > 0xFFFF:
        raise LutError("LUT name too long to serialize")
    with open(path, "wb") as fh:
        fh.write(LUT_MAGIC)
        fh.write(struct.pack("<BBH", LUT_VERSION, lut.bit_width, len(name_bytes)))
        fh.write(name_bytes)
        fh.write(lut.table.astype("<u4").tobytes())


def load_lut(path: str | os.PathLike) -> MultiplierLUT:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != LUT_MAGIC:
        raise LutError(f"{path}: not a LUT file (bad magic {blob[:4]!r})")
    if len(blob) < 8:
        raise LutError(f"{path}: truncated header")
    version, bit_width, name_len = struct.unpack("<BBH", blob[4:8])
    if version != LUT_VERSION:
        raise LutError(f"{path}: unsupported LUT version {version}")
    body = blob[8:]
    if len(body) < name_len:
        raise LutError(f"{path}: truncated name field")
    name = body[:name_len].decode("utf-8")
    payload = body[name_len:]
    expect = ((1 << bit_width) ** 2) * 4 if MIN_BIT_WIDTH <= bit_width <= MAX_BIT_WIDTH else -1
    if len(payload) != expect:
        raise LutError(f"{path}: payload holds {len(payload)} bytes, expected {expect} "
                       f"for bit_width {bit_width}")
    table = np.frombuffer(payload, dtype="<u4").astype(np.uint32)
    return MultiplierLUT(name, bit_width, table)


def import_lut_csv(path: str | os.PathLike, name: str | None = None) -> MultiplierLUT:
    """Import an exhaustive a,b,product table from CSV.

    The file must carry the header ``a,b,product`` and exactly one row per
    operand pair of some supported bit width (inferred from the row count).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise LutError(f"{path}: empty CSV") from None
        if [h.strip().lower() for h in header] != ["a", "b", "product"]:
            raise LutError(f"{path}: expected header a,b,product, got {header}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 3:
                raise LutError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            try:
                rows.append((int(row[0]), int(row[1]), int(row[2])))
            except ValueError:
                raise LutError(f"{path}:{lineno}: non-integer field in {row}") from None

    for w in range(MIN_BIT_WIDTH, MAX_BIT_WIDTH + 1):
        if len(rows) == (1 << w) ** 2:
            bit_width = w
            break
    else:
        raise LutError(f"{path}: {len(rows)} data rows do not form an exhaustive "
                       f"table for any bit width in [{MIN_BIT_WIDTH}, {MAX_BIT_WIDTH}]")

    n = 1 << bit_width
    table = np.zeros(n * n, dtype=np.int64)
    seen = np.zeros(n * n, dtype=bool)
    for a, b, product in rows:
        if not (0 <= a < n and 0 <= b < n):
            raise LutError(f"{path}: operand pair ({a}, {b}) out of range for "
                           f"bit_width {bit_width}")
        idx = (a << bit_width) | b
        if seen[idx]:
            raise LutError(f"{path}: duplicate row for operands ({a}, {b})")
        seen[idx] = True
        table[idx] = product
    # Row-count match plus no duplicates implies full coverage.
    if name is None:
        name = os.path.splitext(os.path.basename(path))[0]
    return MultiplierLUT(name, bit_width, table.astype(np.uint32))


def from_spec(spec: str, bit_width: int = 8) -> MultiplierLUT:
    """Resolve a multiplier description string to a LUT.

    Accepts generator specs ("exact", "operand_trunc:3", "pp_trunc:9",
    "mitchell_log") and paths to .axm1 or .csv files.
    """
    spec = spec.strip()
    if spec.endswith(".axm1"):
        return load_lut(spec)
    if spec.endswith(".csv"):
        return import_lut_csv(spec)
    family, _, arg = spec.partition(":")
    k = None
    if arg:
        try:
            k = int(arg)
        except ValueError:
            raise LutError(f"bad multiplier spec {spec!r}: parameter {arg!r} "
                           f"is not an integer") from None
    return generate(family, bit_width, k=k)
