"""KV-cache layouts, stride-order mapping, block append and migration planning.

Three layouts are modeled, differing only in axis hierarchy:

  raw              [K/V, Block, Token, Header]   (token-first, contiguous K and V)
  page-friendly    [Block, K/V, Token, Header]   (append never shifts existing pages)
  header-centric   [Block, Header, K/V, Token]   (head-partitioned migration frees
                                                  contiguous, reusable segments)

KV contents are symbolic cells (request, token, header, K/V flag); migration
correctness is multiset equality over cells, while byte counts come from the
layout arithmetic. Scale-up migration from N x TP1 to TPN is planned either as
the single-stage migrate-and-trim baseline or as phased in-place all-to-all.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from enum import Enum

from .errors import IncompatibleLayouts, IndivisibleHeads
from .page_store import PAGE_SIZE_2MIB, PageSpace, PageState, pages_needed


class Axis(Enum):
    BLOCK = "Block"
    KV = "K/V"
    TOKEN = "Token"
    HEADER = "Header"


RAW_ORDER = (Axis.KV, Axis.BLOCK, Axis.TOKEN, Axis.HEADER)
PAGE_FRIENDLY_ORDER = (Axis.BLOCK, Axis.KV, Axis.TOKEN, Axis.HEADER)
HEADER_CENTRIC_ORDER = (Axis.BLOCK, Axis.HEADER, Axis.KV, Axis.TOKEN)


@dataclass(frozen=True)
class KvLayout:
    axis_order: tuple[Axis, Axis, Axis, Axis]
    tokens_per_block: int
    num_headers: int
    head_dim: int
    element_bytes: int = 2

    def __post_init__(self):
        if sorted(a.value for a in self.axis_order) != sorted(a.value for a in Axis):
            raise ValueError("axis_order must be a permutation of the four axes")

    @property
    def cell_bytes(self) -> int:
        """One K or V vector of one header for one token."""
        return self.head_dim * self.element_bytes

    @property
    def token_bytes(self) -> int:
        """K and V across all headers for one token."""
        return 2 * self.num_headers * self.cell_bytes

    @property
    def block_bytes(self) -> int:
        return self.tokens_per_block * self.token_bytes

    @property
    def is_page_friendly(self) -> bool:
        return self.axis_order[0] is Axis.BLOCK

    @property
    def is_header_centric(self) -> bool:
        return self.axis_order == HEADER_CENTRIC_ORDER

    def with_order(self, order: tuple[Axis, Axis, Axis, Axis]) -> "KvLayout":
        return KvLayout(order, self.tokens_per_block, self.num_headers,
                        self.head_dim, self.element_bytes)


def stride_order(stored: KvLayout, kernel_expected: KvLayout) -> tuple[int, ...]:
    """Permutation p such that permuting the stored axes by p yields the
    kernel-expected axis order (usable directly as transpose axes)."""
    if set(stored.axis_order) != set(kernel_expected.axis_order):
        raise IncompatibleLayouts("axis sets differ")
    for attr in ("num_headers", "head_dim", "tokens_per_block"):
        if getattr(stored, attr) != getattr(kernel_expected, attr):
            raise IncompatibleLayouts(f"layouts disagree on {attr}")
    return tuple(stored.axis_order.index(ax) for ax in kernel_expected.axis_order)


def retained_headers(worker_index: int, num_headers: int, tp: int) -> range:
    """1-based header range worker i keeps locally at target TP degree."""
    if tp <= 0 or num_headers % tp != 0:
        raise IndivisibleHeads(f"tp={tp} does not divide H={num_headers}")
    if not 1 <= worker_index <= tp:
        raise ValueError(f"worker_index {worker_index} out of 1..{tp}")
    width = num_headers // tp
    start = width * (worker_index - 1) + 1
    return range(start, start + width)


# A cell is (request_id, token_index, header, "K"|"V").
Cell = tuple[str, int, int, str]


@dataclass
class BlockRecord:
    index: int
    tokens: list[tuple[str, int]]  # (request_id, token_index)
    page_range: object | None = None


class KvStore:
    """Per-worker KV contents under one layout, optionally page-backed."""

    def __init__(self, layout: KvLayout, space: PageSpace | None = None,
                 worker_id: int = 0):
        self.layout = layout
        self.space = space
        self.worker_id = worker_id
        self.blocks: list[BlockRecord] = []
        self.entries: set[Cell] = set()
        self.total_shift_bytes = 0
        self._next_token: dict[str, int] = {}

    @property
    def tokens(self) -> list[tuple[str, int]]:
        return [t for b in self.blocks for t in b.tokens]

    @property
    def token_count(self) -> int:
        return sum(len(b.tokens) for b in self.blocks)

    @property
    def bytes_stored(self) -> int:
        return len(self.entries) * self.layout.cell_bytes

    def append_block(self, request_id: str, new_tokens: int) -> dict[str, int]:
        """Add one block of up to tokens_per_block tokens for a request.

        Under the raw layout, keeping K and V each contiguous slides the
        whole V region past every existing block; page-friendly layouts
        append without touching existing pages.
        """
        if not 1 <= new_tokens <= self.layout.tokens_per_block:
            raise ValueError("new_tokens must be in 1..tokens_per_block")
        if self.layout.is_page_friendly:
            shift = 0
        else:
            shift = len(self.blocks) * self.layout.block_bytes // 2
        self.total_shift_bytes += shift

        start = self._next_token.get(request_id, 0)
        toks = [(request_id, start + k) for k in range(new_tokens)]
        self._next_token[request_id] = start + new_tokens

        page_range = None
        if self.space is not None:
            page_range = self.space.alloc(
                self.layout.block_bytes,
                f"kvblock.{self.worker_id}.{len(self.blocks)}",
                state=PageState.KV)
        new_pages = (page_range.length if page_range is not None
                     else pages_needed(self.layout.block_bytes, PAGE_SIZE_2MIB))
        self.blocks.append(BlockRecord(len(self.blocks), toks, page_range))
        for req, tok in toks:
            for h in range(1, self.layout.num_headers + 1):
                self.entries.add((req, tok, h, "K"))
                self.entries.add((req, tok, h, "V"))
        return {"new_pages": new_pages, "shift_bytes": shift}

    def add_request(self, request_id: str, tokens: int) -> None:
        """Append a request's tokens across as many blocks as needed."""
        left = tokens
        while left > 0:
            take = min(left, self.layout.tokens_per_block)
            self.append_block(request_id, take)
            left -= take


@dataclass(frozen=True)
class Transfer:
    src: int  # 1-based worker index
    dst: int
    headers: frozenset[int]
    tokens: tuple[tuple[str, int], ...]
    nbytes: int


@dataclass
class Stage:
    transfers: list[Transfer]
    freed_after: dict[int, int]  # worker -> bytes reusable from the next stage on


@dataclass
class MigrationPlan:
    kind: str  # "trim" | "inplace" | "identity"
    tp_from: int
    tp_to: int
    num_headers: int
    stages: list[Stage]
    trim_copies: int
    peak_extra_bytes: dict[int, int]

    @property
    def total_moved_bytes(self) -> int:
        return sum(t.nbytes for st in self.stages for t in st.transfers)

    @property
    def stage_count(self) -> int:
        return len(self.stages)

    def serialize(self) -> str:
        lines = [
            f"plan kind={self.kind} tp={self.tp_from}->{self.tp_to} "
            f"H={self.num_headers} stages={len(self.stages)} "
            f"trim_copies={self.trim_copies}"
        ]
        for k, st in enumerate(self.stages, 1):
            lines.append(f"stage {k}:")
            for t in st.transfers:
                hs = ",".join(f"H{h}" for h in sorted(t.headers))
                lines.append(
                    f"  W{t.src}->W{t.dst} tokens={len(t.tokens)} "
                    f"headers=[{hs}] bytes={t.nbytes}")
            freed = " ".join(f"W{w}:{b}" for w, b in sorted(st.freed_after.items()))
            lines.append(f"  freed_after: {freed if freed else '-'}")
        peaks = " ".join(f"W{w}:{b}" for w, b in sorted(self.peak_extra_bytes.items()))
        lines.append(f"peak_extra: {peaks if peaks else '-'}")
        return "\n".join(lines)


def _pair_bytes(layout: KvLayout) -> int:
    """K plus V of one header for one token."""
    return 2 * layout.cell_bytes


def _stage_transfers(stores: list[KvStore], chunk: list[list[tuple[str, int]]],
                     tp_to: int) -> list[Transfer]:
    layout = stores[0].layout
    pair = _pair_bytes(layout)
    transfers = []
    for i in range(1, len(stores) + 1):
        toks = tuple(chunk[i - 1])
        if not toks:
            continue
        for j in range(1, tp_to + 1):
            if j == i:
                continue
            headers = frozenset(retained_headers(j, layout.num_headers, tp_to))
            transfers.append(Transfer(
                i, j, headers, toks, len(toks) * len(headers) * pair))
    transfers.sort(key=lambda t: (t.src, t.dst))
    return transfers


def _check_merge_preconditions(stores: list[KvStore], tp_from: int, tp_to: int):
    if tp_from != 1:
        raise ValueError("migration planning starts from TP1 workers")
    if len(stores) != tp_to:
        raise ValueError(f"need {tp_to} TP1 workers, got {len(stores)}")
    layout = stores[0].layout
    if layout.num_headers % tp_to != 0:
        raise IndivisibleHeads(f"tp={tp_to} does not divide H={layout.num_headers}")
    for s in stores:
        if s.layout != layout:
            raise IncompatibleLayouts("workers disagree on layout")


def plan_migration_trim(stores: list[KvStore], tp_from: int, tp_to: int) -> MigrationPlan:
    """Single-stage migrate-and-trim baseline.

    Every worker sends all non-retained headers at once; retained local
    headers are left 'full of holes' and must be compacted, so trim copy
    volume grows with the local token count. Peak extra memory is the
    full receive volume plus the not-yet-reclaimed holes.
    """
    layout = stores[0].layout
    if tp_to == tp_from == 1 or len(stores) == 1 and tp_to == 1:
        return MigrationPlan("identity", tp_from, tp_to, layout.num_headers,
                             [], 0, {1: 0})
    _check_merge_preconditions(stores, tp_from, tp_to)
    pair = _pair_bytes(layout)
    h = layout.num_headers
    per_worker = h // tp_to

    chunk = [list(s.tokens) for s in stores]
    transfers = _stage_transfers(stores, chunk, tp_to)
    trim = sum(s.token_count * per_worker * pair for s in stores)
    peak = {}
    for j in range(1, tp_to + 1):
        recv = sum(t.nbytes for t in transfers if t.dst == j)
        holes = stores[j - 1].token_count * (h - per_worker) * pair
        peak[j] = recv + holes
    freed = {j: stores[j - 1].token_count * (h - per_worker) * pair
             for j in range(1, tp_to + 1)}
    return MigrationPlan("trim", tp_from, tp_to, h,
                         [Stage(transfers, freed)], trim, peak)


def _chunks(tokens: list[tuple[str, int]], s: int) -> list[list[tuple[str, int]]]:
    n = len(tokens)
    out, at = [], 0
    for k in range(s):
        take = n // s + (1 if k < n % s else 0)
        out.append(tokens[at:at + take])
        at += take
    return out


def plan_migration_inplace(stores: list[KvStore], tp_from: int, tp_to: int,
                           stage_count: int | None = None) -> MigrationPlan:
    """Phased all-to-all migration over the header-centric layout.

    Tokens split into `stage_count` chunks; space freed by the headers a
    worker ships in stage k is advertised and reused as receive space in
    stage k+1, so fresh extra memory stays near one stage's receive
    volume. No trimming is ever needed (freed segments are contiguous).
    """
    layout = stores[0].layout
    if tp_to == tp_from:
        return MigrationPlan("identity", tp_from, tp_to, layout.num_headers,
                             [], 0, {i + 1: 0 for i in range(len(stores))})
    _check_merge_preconditions(stores, tp_from, tp_to)
    if not layout.is_header_centric:
        raise IncompatibleLayouts("in-place migration requires the header-centric layout")
    s = stage_count if stage_count is not None else tp_to * 2
    if s < 1:
        raise ValueError("stage_count must be >= 1")

    pair = _pair_bytes(layout)
    h = layout.num_headers
    per_worker = h // tp_to
    worker_chunks = [_chunks(list(st.tokens), s) for st in stores]

    stages: list[Stage] = []
    for k in range(s):
        chunk = [worker_chunks[i][k] for i in range(tp_to)]
        transfers = _stage_transfers(stores, chunk, tp_to)
        freed = {i + 1: len(worker_chunks[i][k]) * (h - per_worker) * pair
                 for i in range(tp_to)}
        stages.append(Stage(transfers, freed))

    peak = {}
    for j in range(1, tp_to + 1):
        avail = 0
        fresh = 0
        for st in stages:
            recv = sum(t.nbytes for t in st.transfers if t.dst == j)
            reuse = min(avail, recv)
            fresh += recv - reuse
            avail -= reuse
            avail += st.freed_after[j]
        peak[j] = fresh
    return MigrationPlan("inplace", tp_from, tp_to, h, stages, 0, peak)


def apply_migration(plan: MigrationPlan, stores: list[KvStore]) -> list[KvStore]:
    """Execute a plan's transfers stage by stage on symbolic cell sets.

    Returns new stores; after a merge plan, worker i holds exactly its
    retained header slice for every token of every request.
    """
    if plan.kind == "identity":
        return [copy.deepcopy(s) for s in stores]
    sets = [set(s.entries) for s in stores]
    for st in plan.stages:
        moves: list[tuple[int, int, Cell]] = []
        for t in st.transfers:
            for req, tok in t.tokens:
                for hdr in t.headers:
                    for kv in ("K", "V"):
                        moves.append((t.src - 1, t.dst - 1, (req, tok, hdr, kv)))
        for src, dst, cell in moves:
            sets[src].remove(cell)
            sets[dst].add(cell)
    out = []
    for i, s in enumerate(stores):
        ns = KvStore(s.layout, space=None, worker_id=s.worker_id)
        ns.entries = sets[i]
        out.append(ns)
    return out
