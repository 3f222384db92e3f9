"""Fixed-granularity device-memory model.

A worker's GPU memory is an ordered set of fixed-size pages (2 MiB by
default, the CUDA virtual-memory allocation granularity). Every other
module charges its weight, KV-cache and staging allocations against a
PageSpace, so memory accounting and high-water marks fall out of page
state transitions instead of real driver calls.

Unit convention: model sizes quoted in GB are decimal (1e9 bytes); page
math is binary (MiB). A capacity that is not a page multiple is rounded
down to whole pages.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

from .errors import InvalidRange, OutOfMemory

PAGE_SIZE_2MIB = 2 * 1024 * 1024


class PageState(Enum):
    FREE = "free"
    WEIGHTS = "weights"
    KV = "kv"
    RESERVED = "reserved"


@dataclass(frozen=True)
class PageRange:
    """A contiguous run of pages owned by one tag (layer, tensor or KV block id)."""

    start_page: int
    length: int
    owner_tag: str

    def __post_init__(self):
        if self.length < 1:
            raise ValueError("PageRange length must be >= 1")

    def pages(self) -> range:
        return range(self.start_page, self.start_page + self.length)


def pages_needed(nbytes: int, page_size: int) -> int:
    return -(-nbytes // page_size)


class PageSpace:
    """A worker's device memory as pages in states free/weights/kv/reserved.

    Allocation policy is first-fit over contiguous free runs with
    lowest-index tie-breaking, which keeps replays deterministic.
    """

    def __init__(self, capacity_bytes: int, page_size: int = PAGE_SIZE_2MIB):
        if page_size <= 0 or capacity_bytes < page_size:
            raise ValueError("capacity must hold at least one page")
        self.page_size = page_size
        self.page_count = capacity_bytes // page_size
        self._states: list[PageState] = [PageState.FREE] * self.page_count
        self._tags: list[str | None] = [None] * self.page_count
        self._free_count = self.page_count
        self.high_water_mark = 0
        # live internal fragmentation, keyed by (start, length)
        self._fragmentation: dict[tuple[int, int], int] = {}

    @property
    def capacity_bytes(self) -> int:
        return self.page_count * self.page_size

    @property
    def used_bytes(self) -> int:
        return (self.page_count - self._free_count) * self.page_size

    @property
    def free_bytes(self) -> int:
        return self._free_count * self.page_size

    @property
    def fragmentation_bytes(self) -> int:
        return sum(self._fragmentation.values())

    def state_of(self, page: int) -> PageState:
        return self._states[page]

    def _find_free_run(self, length: int) -> int | None:
        run = 0
        for i, st in enumerate(self._states):
            if st is PageState.FREE:
                run += 1
                if run == length:
                    return i - length + 1
            else:
                run = 0
        return None

    def alloc(self, nbytes: int, tag: str, state: PageState = PageState.WEIGHTS) -> PageRange:
        """Map ceil(nbytes / page_size) contiguous pages for `tag`.

        Raises OutOfMemory when no contiguous free run is large enough
        (a fragmented space can OOM before it is byte-full).
        """
        if nbytes <= 0:
            raise ValueError("alloc needs a positive byte count")
        if state is PageState.FREE:
            raise ValueError("cannot alloc pages into the FREE state")
        length = pages_needed(nbytes, self.page_size)
        start = self._find_free_run(length)
        if start is None:
            raise OutOfMemory(
                f"need {length} contiguous pages for {tag!r}, "
                f"{self._free_count} free of {self.page_count}"
            )
        for p in range(start, start + length):
            self._states[p] = state
            self._tags[p] = tag
        self._free_count -= length
        self.high_water_mark = max(self.high_water_mark, self.used_bytes)
        rng = PageRange(start, length, tag)
        self._fragmentation[(start, length)] = length * self.page_size - nbytes
        return rng

    def reserve(self, nbytes: int, tag: str) -> PageRange:
        """Reserve transformation headroom: counts against capacity, holds no data."""
        return self.alloc(nbytes, tag, state=PageState.RESERVED)

    def unmap(self, rng: PageRange) -> int:
        """Free every page of `rng`; returns the freed page count.

        Raises InvalidRange on double-free or tag mismatch (planner bug).
        """
        if rng.start_page < 0 or rng.start_page + rng.length > self.page_count:
            raise InvalidRange(f"range {rng} out of bounds")
        for p in rng.pages():
            if self._states[p] is PageState.FREE:
                raise InvalidRange(f"page {p} already free")
            if self._tags[p] != rng.owner_tag:
                raise InvalidRange(
                    f"page {p} owned by {self._tags[p]!r}, not {rng.owner_tag!r}"
                )
        for p in rng.pages():
            self._states[p] = PageState.FREE
            self._tags[p] = None
        self._free_count += rng.length
        self._fragmentation.pop((rng.start_page, rng.length), None)
        return rng.length

    def memory_report(self) -> dict[str, int]:
        """Byte counts per state; the four state counters sum to capacity."""
        counts = {st: 0 for st in PageState}
        for st in self._states:
            counts[st] += 1
        return {
            "mapped_weights": counts[PageState.WEIGHTS] * self.page_size,
            "mapped_kv": counts[PageState.KV] * self.page_size,
            "reserved": counts[PageState.RESERVED] * self.page_size,
            "free": counts[PageState.FREE] * self.page_size,
            "high_water_mark": self.high_water_mark,
        }
