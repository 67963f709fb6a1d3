"""Approximate nearest-neighbor search over unit vectors.

HnswIndex is a from-scratch hierarchical navigable small-world graph: every
node lives on layer 0, exponentially fewer on each layer above, and queries
greedily descend the hierarchy before running a beam search on the bottom
layer. Cosine distance (1 - dot) over unit vectors is the only metric.

ShardManager holds one index per (fine class, gender) pair; shards below a
size threshold use exact flat scans instead of a graph. Vectors are
quantized to float32 on insert (the on-disk precision), so a saved and
reloaded index answers queries identically to the in-memory original.
"""

from __future__ import annotations

import heapq
import math
import os
import struct
import threading
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

from .taxonomy import Gender, Taxonomy

DIM_DEFAULT = 512
#: Shards smaller than this are stored flat and scanned exactly.
FLAT_SHARD_THRESHOLD = 32
_MAX_LEVEL_CAP = 48


class IndexFileError(ValueError):
    """Base class for index persistence failures."""


class IndexFormatError(IndexFileError):
    """Bad magic bytes, unsupported version, or malformed structure."""


class IndexChecksumError(IndexFileError):
    """File parsed but its checksum does not match the payload."""


class IndexTruncatedError(IndexFileError):
    """File ended before the declared contents."""


@dataclass(frozen=True)
class HnswParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 100
    level_lambda: float | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.m < 2:
            raise ValueError("m must be >= 2")
        if self.ef_construction < self.m:
            raise ValueError("ef_construction must be >= m")
        if self.ef_search < 1:
            raise ValueError("ef_search must be >= 1")
        if self.level_lambda is None:
            object.__setattr__(self, "level_lambda", 1.0 / math.log(self.m))


def _check_unit(vector: np.ndarray, dim: int) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    if v.shape != (dim,):
        raise ValueError(f"expected a {dim}-D vector, got shape {v.shape}")
    n = float(np.linalg.norm(v))
    if abs(n - 1.0) > 1e-4:
        raise ValueError(f"vector must be unit norm (|v| = {n})")
    # Quantize to storage precision so persistence is lossless.
    return v.astype(np.float32).astype(np.float64)


class FlatIndex:
    """Exact brute-force index with the same query interface as HnswIndex."""

    kind = "flat"

    def __init__(self, dim: int = DIM_DEFAULT):
        self.dim = dim
        self.item_ids: list[str] = []
        self._rows: list[np.ndarray] = []
        self._matrix: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.item_ids)

    def insert(self, item_id: str, vector: np.ndarray) -> None:
        if item_id in set(self.item_ids):
            raise ValueError(f"duplicate item id {item_id!r}")
        self._rows.append(_check_unit(vector, self.dim))
        self._matrix = None
        self.item_ids.append(item_id)

    def vector(self, node: int) -> np.ndarray:
        return self._rows[node]

    @property
    def matrix(self) -> np.ndarray:
        if self._matrix is None or len(self._matrix) != len(self._rows):
            self._matrix = np.vstack(self._rows) if self._rows else np.zeros((0, self.dim))
        return self._matrix

    def search(
        self, query: np.ndarray, k: int, ef_search: int | None = None
    ) -> list[tuple[str, float]]:
        if not self.item_ids:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        dists = 1.0 - (self.matrix * q).sum(axis=1)
        order = sorted(range(len(dists)), key=lambda i: (dists[i], self.item_ids[i]))
        return [(self.item_ids[i], float(dists[i])) for i in order[:k]]


class HnswIndex:
    kind = "hnsw"

    def __init__(self, params: HnswParams | None = None, dim: int = DIM_DEFAULT):
        self.params = params or HnswParams()
        self.dim = dim
        self.item_ids: list[str] = []
        self._id_set: set[str] = set()
        self.levels: list[int] = []
        # neighbors[node][level] is a list of node ids; index 0 is layer 0.
        self.neighbors: list[list[list[int]]] = []
        self.entry_point: int = -1
        self.max_level: int = -1
        self._matrix = np.zeros((0, dim), dtype=np.float64)
        # float32 twin of _matrix, used by the construction-only fast kernel
        self._matrix32 = np.zeros((0, dim), dtype=np.float32)
        # per-thread token-stamped visited marks, reused across beam searches
        # so concurrent readers never share scratch state
        self._tls = threading.local()
        self._count = 0
        self._rng = np.random.default_rng(self.params.seed)

    def __len__(self) -> int:
        return self._count

    # -- storage -----------------------------------------------------------

    def _grow(self, needed: int) -> None:
        cap = self._matrix.shape[0]
        if needed <= cap:
            return
        new_cap = max(needed, 64, int(cap * 1.5))
        grown = np.zeros((new_cap, self.dim), dtype=np.float64)
        grown[:self._count] = self._matrix[:self._count]
        self._matrix = grown
        grown32 = np.zeros((new_cap, self.dim), dtype=np.float32)
        grown32[:self._count] = self._matrix32[:self._count]
        self._matrix32 = grown32

    def _visited_marks(self) -> tuple[np.ndarray, int]:
        tls = self._tls
        marks = getattr(tls, "marks", None)
        if marks is None or len(marks) < self._count:
            tls.marks = np.zeros(max(64, self._matrix.shape[0]), dtype=np.int64)
            tls.token = 0
            marks = tls.marks
        tls.token += 1
        return marks, tls.token

    def vector(self, node: int) -> np.ndarray:
        if not 0 <= node < self._count:
            raise IndexError(f"node {node} out of range")
        return self._matrix[node]

    def _dists(self, nodes, q: np.ndarray) -> np.ndarray:
        # Row-local multiply-sum rather than a BLAS matvec: its reduction
        # order does not depend on how many rows are batched, so distances
        # are bit-identical however the beam groups its candidates (and
        # equal to an exact scan computing the same expression).
        return 1.0 - (self._matrix[nodes] * q).sum(axis=1)

    def _dists_fast(self, nodes, q: np.ndarray) -> np.ndarray:
        # Single-precision BLAS kernel for construction, where only
        # determinism matters; queries stick to _dists so results match an
        # exact scan bit for bit.
        return 1.0 - self._matrix32[nodes] @ np.asarray(q, dtype=np.float32)

    def _draw_level(self) -> int:
        u = 1.0 - float(self._rng.random())  # in (0, 1]
        return min(int(-math.log(u) * self.params.level_lambda), _MAX_LEVEL_CAP)

    # -- construction --------------------------------------------------------

    def insert(self, item_id: str, vector: np.ndarray) -> None:
        """Add one item. Level is drawn from the seeded exponential; links are
        chosen by beam search plus the keep-if-closer-to-query-than-to-any-
        selected pruning rule; overfull neighbors are re-pruned to their cap.
        """
        if item_id in self._id_set:
            raise ValueError(f"duplicate item id {item_id!r}")
        q = _check_unit(vector, self.dim)
        node = self._count
        level = self._draw_level()
        self._grow(node + 1)
        self._matrix[node] = q
        self._matrix32[node] = q
        self._count += 1
        self.item_ids.append(item_id)
        self._id_set.add(item_id)
        self.levels.append(level)
        self.neighbors.append([[] for _ in range(level + 1)])

        if self.entry_point < 0:
            self.entry_point = node
            self.max_level = level
            return

        eps = [self.entry_point]
        for lc in range(self.max_level, level, -1):
            eps = [n for _, n in self._search_layer(q, eps, lc, 1, fast=True)]
        for lc in range(min(level, self.max_level), -1, -1):
            candidates = self._search_layer(
                q, eps, lc, self.params.ef_construction, fast=True
            )
            selected = self._select_neighbors(candidates, self.params.m)
            cap = 2 * self.params.m if lc == 0 else self.params.m
            for d, nb in selected:
                self.neighbors[node][lc].append(nb)
                back = self.neighbors[nb][lc]
                back.append(node)
                if len(back) > cap:
                    dists = self._dists_fast(back, self._matrix[nb])
                    repruned = self._select_neighbors(
                        sorted(zip(dists, back)), cap
                    )
                    self.neighbors[nb][lc] = [n for _, n in repruned]
            eps = [n for _, n in candidates]
        if level > self.max_level:
            self.entry_point = node
            self.max_level = level

    def _select_neighbors(
        self, candidates: list[tuple[float, int]], m: int
    ) -> list[tuple[float, int]]:
        """Diversity-pruned neighbor choice over distance-sorted candidates.

        A candidate is kept iff it is closer to the query than to every
        already-kept node; pruned candidates backfill remaining slots. The
        running minimum distance to the kept set is updated with one batched
        product per kept node.
        """
        if len(candidates) <= m:
            return list(candidates)
        rows = self._matrix32[[c for _, c in candidates]]
        dist_to_query = np.fromiter((d for d, _ in candidates), dtype=np.float64)
        min_to_kept = np.full(len(candidates), np.inf)
        keep: list[int] = []
        pruned: list[int] = []
        for i in range(len(candidates)):
            if len(keep) >= m:
                break
            if min_to_kept[i] < dist_to_query[i]:
                pruned.append(i)
                continue
            keep.append(i)
            np.minimum(min_to_kept, 1.0 - rows @ rows[i], out=min_to_kept)
        for i in pruned:
            if len(keep) >= m:
                break
            keep.append(i)
        return [candidates[i] for i in keep]

    def _search_layer(
        self, q: np.ndarray, entry_points: list[int], layer: int, ef: int,
        fast: bool = False,
    ) -> list[tuple[float, int]]:
        """Beam search on one layer; returns (distance, node) ascending."""
        kernel = self._dists_fast if fast else self._dists
        visited, token = self._visited_marks()
        eps = np.fromiter(entry_points, np.intp, len(entry_points))
        visited[eps] = token
        dists = kernel(eps, q)
        candidates = sorted(zip(dists.tolist(), eps.tolist()))
        heapq.heapify(candidates)
        best = [(-d, n) for d, n in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heapq.heappop(best)
        while candidates:
            d, current = heapq.heappop(candidates)
            if d > -best[0][0] and len(best) >= ef:
                break
            nbrs = self.neighbors[current][layer]
            if not nbrs:
                continue
            arr = np.fromiter(nbrs, np.intp, len(nbrs))
            fresh = arr[visited[arr] != token]
            if fresh.size == 0:
                continue
            visited[fresh] = token
            dists = kernel(fresh, q)
            if len(best) >= ef:
                # The worst kept distance only shrinks, so anything already
                # at or beyond it can be dropped without the sequential check.
                inside = dists < -best[0][0]
                if not inside.any():
                    continue
                dists, fresh = dists[inside], fresh[inside]
            for dn, n in zip(dists.tolist(), fresh.tolist()):
                if len(best) < ef:
                    heapq.heappush(candidates, (dn, n))
                    heapq.heappush(best, (-dn, n))
                elif dn < -best[0][0]:
                    heapq.heappush(candidates, (dn, n))
                    heapq.heapreplace(best, (-dn, n))
        return sorted((-nd, n) for nd, n in best)

    # -- queries -------------------------------------------------------------

    def search(
        self, query: np.ndarray, k: int, ef_search: int | None = None
    ) -> list[tuple[str, float]]:
        """k nearest items by cosine distance, ascending; ties break on item id.

        With ef_search at least the corpus size the beam covers every node
        reachable on layer 0, so results match an exact scan.
        """
        if self._count == 0:
            raise ValueError("cannot search an empty index")
        if k < 1:
            raise ValueError("k must be >= 1")
        q = np.asarray(query, dtype=np.float64)
        if q.shape != (self.dim,):
            raise ValueError(f"query must be {self.dim}-D")
        ef = max(self.params.ef_search if ef_search is None else ef_search, k)
        eps = [self.entry_point]
        for lc in range(self.max_level, 0, -1):
            eps = [n for _, n in self._search_layer(q, eps, lc, 1)]
        found = self._search_layer(q, eps, 0, ef)
        ranked = sorted((d, self.item_ids[n]) for d, n in found)
        return [(item, float(d)) for d, item in ranked[:k]]


# -- shards ------------------------------------------------------------------


@dataclass(frozen=True)
class ShardKey:
    fine_class: int
    gender: Gender

    def __post_init__(self) -> None:
        if self.gender is Gender.UNKNOWN:
            raise ValueError("stored shards never use the unknown gender")


class ShardManager:
    """One ANN index per (fine class, gender) pair."""

    def __init__(self, shards: dict[ShardKey, HnswIndex | FlatIndex] | None = None):
        self.shards: dict[ShardKey, HnswIndex | FlatIndex] = dict(shards or {})

    def __len__(self) -> int:
        return len(self.shards)

    def get(self, key: ShardKey) -> HnswIndex | FlatIndex | None:
        return self.shards.get(key)

    def total_items(self) -> int:
        return sum(len(s) for s in self.shards.values())

    def search(
        self, key: ShardKey, query: np.ndarray, k: int, ef_search: int | None = None
    ) -> list[tuple[str, float]]:
        shard = self.shards.get(key)
        if shard is None or len(shard) == 0:
            return []
        return shard.search(query, k, ef_search)


def build_shards(
    items: Iterable,
    params: HnswParams | None = None,
    taxonomy: Taxonomy | None = None,
    flat_threshold: int = FLAT_SHARD_THRESHOLD,
) -> ShardManager:
    """Group catalog items into per-(fine class, gender) indices.

    Items need item_id, fine_class, gender, and embedding attributes. Inserts
    run in item-id order, so rebuilding from the same catalog reproduces the
    same graphs. Items with unknown gender or (when a taxonomy is given) an
    invalid fine class are rejected.
    """
    params = params or HnswParams()
    groups: dict[ShardKey, list] = {}
    for item in items:
        if item.gender is Gender.UNKNOWN:
            raise ValueError(f"item {item.item_id!r} has unknown gender")
        if taxonomy is not None:
            taxonomy.fine_class(item.fine_class)  # raises on invalid ids
        groups.setdefault(ShardKey(item.fine_class, item.gender), []).append(item)
    shards: dict[ShardKey, HnswIndex | FlatIndex] = {}
    for key in sorted(groups, key=lambda k: (k.fine_class, k.gender.value)):
        members = sorted(groups[key], key=lambda it: it.item_id)
        dim = len(members[0].embedding)
        if len(members) < flat_threshold:
            shard: HnswIndex | FlatIndex = FlatIndex(dim=dim)
        else:
            shard = HnswIndex(params=params, dim=dim)
        for it in members:
            shard.insert(it.item_id, it.embedding)
        shards[key] = shard
    return ShardManager(shards)


# -- persistence ---------------------------------------------------------------
#
# One index per file: magic "STIX", version u16, kind u8 (1 hnsw / 0 flat),
# dim u16, count u64, params (m u16, ef_construction u32, ef_search u32,
# level_lambda f64, seed u64), entry point i64, max level i16, node levels
# (u16 each), vectors (count*dim float32 LE), adjacency (per node, per level:
# degree u16 + that many u32 ids; hnsw only), id table (u16 length + utf8
# per id), then crc32 of everything before it.

_INDEX_MAGIC = b"STIX"
_INDEX_VERSION = 1


def save_index(index: HnswIndex | FlatIndex, path: str | Path) -> None:
    """Write one index; the file is replaced atomically."""
    is_hnsw = isinstance(index, HnswIndex)
    count = len(index)
    parts = [_INDEX_MAGIC, struct.pack("<HBHQ", _INDEX_VERSION, 1 if is_hnsw else 0,
                                       index.dim, count)]
    p = index.params if is_hnsw else HnswParams()
    parts.append(struct.pack("<HIIdQ", p.m, p.ef_construction, p.ef_search,
                             p.level_lambda, p.seed))
    if is_hnsw:
        parts.append(struct.pack("<qh", index.entry_point, index.max_level))
        parts.append(np.asarray(index.levels, dtype="<u2").tobytes())
        parts.append(index._matrix[:count].astype("<f4").tobytes())
        for node in range(count):
            for level_links in index.neighbors[node]:
                parts.append(struct.pack("<H", len(level_links)))
                parts.append(np.asarray(level_links, dtype="<u4").tobytes())
    else:
        parts.append(struct.pack("<qh", -1, -1))
        parts.append(np.zeros(count, dtype="<u2").tobytes())
        parts.append(index.matrix.astype("<f4").tobytes())
    for item_id in index.item_ids:
        encoded = item_id.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
    payload = b"".join(parts)
    payload += struct.pack("<I", zlib.crc32(payload))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


class _Cursor:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.off + size > len(self.raw):
            raise IndexTruncatedError(f"{self.path}: file ends inside a {fmt} field")
        out = struct.unpack_from(fmt, self.raw, self.off)
        self.off += size
        return out

    def take(self, size: int) -> bytes:
        if self.off + size > len(self.raw):
            raise IndexTruncatedError(f"{self.path}: file ends {size} bytes early")
        out = self.raw[self.off:self.off + size]
        self.off += size
        return out


def load_index(path: str | Path) -> HnswIndex | FlatIndex:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise IndexTruncatedError(f"{path}: too short to hold a header")
    if raw[:4] != _INDEX_MAGIC:
        raise IndexFormatError(f"{path}: bad magic bytes {raw[:4]!r}")
    cur = _Cursor(raw[:-4], path)
    cur.off = 4
    version, kind, dim, count = cur.unpack("<HBHQ")
    if version != _INDEX_VERSION:
        raise IndexFormatError(f"{path}: unsupported version {version}")
    if kind not in (0, 1):
        raise IndexFormatError(f"{path}: unknown index kind {kind}")
    m, efc, efs, lam, seed = cur.unpack("<HIIdQ")
    entry_point, max_level = cur.unpack("<qh")
    levels = np.frombuffer(cur.take(2 * count), dtype="<u2").astype(int)
    vectors = np.frombuffer(cur.take(4 * count * dim), dtype="<f4").reshape(count, dim)
    if kind == 1:
        params = HnswParams(m=m, ef_construction=efc, ef_search=efs,
                            level_lambda=lam, seed=seed)
        index: HnswIndex | FlatIndex = HnswIndex(params=params, dim=dim)
        index.entry_point = entry_point
        index.max_level = max_level
        index.levels = levels.tolist()
        index._grow(count)
        index._matrix[:count] = vectors.astype(np.float64)
        index._matrix32[:count] = vectors
        index._count = count
        for node in range(count):
            per_level = []
            for _ in range(levels[node] + 1):
                (degree,) = cur.unpack("<H")
                ids = np.frombuffer(cur.take(4 * degree), dtype="<u4")
                per_level.append(ids.astype(int).tolist())
            index.neighbors.append(per_level)
    else:
        index = FlatIndex(dim=dim)
        index._rows = [row.astype(np.float64) for row in vectors]
    ids = []
    for _ in range(count):
        (length,) = cur.unpack("<H")
        try:
            ids.append(cur.take(length).decode("utf-8"))
        except UnicodeDecodeError:
            raise IndexFormatError(f"{path}: undecodable item id") from None
    if cur.off != len(cur.raw):
        raise IndexFormatError(f"{path}: {len(cur.raw) - cur.off} unexpected trailing bytes")
    (stored_crc,) = struct.unpack("<I", raw[-4:])
    if zlib.crc32(raw[:-4]) != stored_crc:
        raise IndexChecksumError(f"{path}: checksum mismatch")
    index.item_ids = ids
    if kind == 1:
        index._id_set = set(ids)
    return index


_MANIFEST = "shards.tsv"


def save_shards(manager: ShardManager, directory: str | Path) -> None:
    """Persist every shard plus a manifest into a directory."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for key in sorted(manager.shards, key=lambda k: (k.fine_class, k.gender.value)):
        shard = manager.shards[key]
        filename = f"shard_{key.fine_class}_{key.gender.value}.stix"
        save_index(shard, directory / filename)
        lines.append(f"{key.fine_class}\t{key.gender.value}\t{filename}\t{len(shard)}\n")
    tmp = directory / (_MANIFEST + ".tmp")
    tmp.write_text("".join(lines), encoding="utf-8")
    os.replace(tmp, directory / _MANIFEST)


def load_shards(directory: str | Path) -> ShardManager:
    directory = Path(directory)
    manifest = directory / _MANIFEST
    if not manifest.is_file():
        raise IndexFormatError(f"{directory}: missing {_MANIFEST}")
    shards: dict[ShardKey, HnswIndex | FlatIndex] = {}
    for lineno, line in enumerate(manifest.read_text("utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        fields = line.split("\t")
        if len(fields) != 4:
            raise IndexFormatError(f"{manifest}:{lineno}: expected 4 fields")
        key = ShardKey(int(fields[0]), Gender(fields[1]))
        shards[key] = load_index(directory / fields[2])
        if len(shards[key]) != int(fields[3]):
            raise IndexFormatError(
                f"{manifest}:{lineno}: shard holds {len(shards[key])} items, "
                f"manifest says {fields[3]}"
            )
    return ShardManager(shards)
