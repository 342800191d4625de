"""Binary trainable-tensor masks indexed by backward depth (1 = nearest the loss)."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence


@dataclass(frozen=True)
class SelectionMask:
    """Selection bits; ``bits[k - 1]`` is the tensor at depth ``k``."""

    bits: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "bits", tuple(bool(b) for b in self.bits))

    @classmethod
    def empty(cls, n: int) -> "SelectionMask":
        return cls((False,) * n)

    @classmethod
    def full(cls, n: int) -> "SelectionMask":
        return cls((True,) * n)

    @classmethod
    def from_depths(cls, n: int, depths: Iterable[int]) -> "SelectionMask":
        bits = [False] * n
        for k in depths:
            if not 1 <= k <= n:
                raise ValueError(f"depth {k} outside 1..{n}")
            bits[k - 1] = True
        return cls(tuple(bits))

    @classmethod
    def from_forward_bits(cls, bits: Sequence[int | bool]) -> "SelectionMask":
        """Build from input-to-output order, the orientation used in logs."""
        return cls(tuple(bool(b) for b in reversed(bits)))

    def __len__(self) -> int:
        return len(self.bits)

    @property
    def depths(self) -> tuple[int, ...]:
        return tuple(k for k, b in enumerate(self.bits, start=1) if b)

    @property
    def deepest(self) -> int:
        """Largest selected depth, 0 for an empty mask."""
        for k in range(len(self.bits), 0, -1):
            if self.bits[k - 1]:
                return k
        return 0

    @property
    def count(self) -> int:
        return sum(self.bits)

    def forward_bits(self) -> list[int]:
        return [int(b) for b in reversed(self.bits)]

    def depth_bits(self) -> list[int]:
        return [int(b) for b in self.bits]

    def issubset(self, other: "SelectionMask") -> bool:
        return all(b <= o for b, o in zip(self.bits, other.bits))

    def __str__(self) -> str:
        return "".join("1" if b else "0" for b in self.forward_bits())
