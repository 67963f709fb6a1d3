import numpy as np
import pytest

from conftest import random_unit
from oracles import knn_linear_scan
from stitch.dedup import CatalogItem
from stitch.index import (
    FlatIndex,
    HnswIndex,
    HnswParams,
    IndexChecksumError,
    IndexFormatError,
    IndexTruncatedError,
    ShardKey,
    ShardManager,
    build_shards,
    load_index,
    load_shards,
    save_index,
    save_shards,
)
from stitch.taxonomy import Gender


def build_index(vectors, params=None, dim=None):
    idx = HnswIndex(params or HnswParams(seed=0), dim=dim or vectors.shape[1])
    for i, v in enumerate(vectors):
        idx.insert(f"item-{i:05d}", v)
    return idx


def layer0_reachable(idx) -> set[int]:
    seen = {idx.entry_point}
    frontier = [idx.entry_point]
    while frontier:
        node = frontier.pop()
        for nb in idx.neighbors[node][0]:
            if nb not in seen:
                seen.add(nb)
                frontier.append(nb)
    return seen


class TestInsert:
    def test_first_node_becomes_entry(self, rng):
        idx = HnswIndex(HnswParams(seed=0), dim=16)
        idx.insert("a", random_unit(rng, 16))
        assert idx.entry_point == 0
        assert len(idx) == 1

    def test_duplicate_id_rejected(self, rng):
        idx = HnswIndex(HnswParams(seed=0), dim=16)
        idx.insert("a", random_unit(rng, 16))
        with pytest.raises(ValueError, match="duplicate"):
            idx.insert("a", random_unit(rng, 16))

    def test_non_unit_rejected(self):
        idx = HnswIndex(HnswParams(seed=0), dim=16)
        with pytest.raises(ValueError, match="unit"):
            idx.insert("a", np.ones(16))

    def test_dimension_mismatch_rejected(self, rng):
        idx = HnswIndex(HnswParams(seed=0), dim=16)
        with pytest.raises(ValueError, match="16"):
            idx.insert("a", random_unit(rng, 8))

    def test_self_retrieval(self, rng):
        vectors = np.stack([random_unit(rng, 32) for _ in range(3)])
        idx = build_index(vectors)
        for i, v in enumerate(vectors):
            item, dist = idx.search(v, k=1)[0]
            assert item == f"item-{i:05d}"
            assert dist == pytest.approx(0.0, abs=1e-6)

    def test_connected_and_degree_bounded(self, rng):
        params = HnswParams(m=8, ef_construction=40, seed=3)
        vectors = np.stack([random_unit(rng, 32) for _ in range(200)])
        idx = build_index(vectors, params)
        assert layer0_reachable(idx) == set(range(200))
        for node in range(200):
            for level, links in enumerate(idx.neighbors[node]):
                cap = 2 * params.m if level == 0 else params.m
                assert len(links) <= cap
                assert node not in links

    def test_levels_monotone_storage(self, rng):
        vectors = np.stack([random_unit(rng, 16) for _ in range(100)])
        idx = build_index(vectors)
        for node in range(100):
            assert len(idx.neighbors[node]) == idx.levels[node] + 1

    def test_determinism(self, rng):
        vectors = np.stack([random_unit(rng, 32) for _ in range(80)])
        a = build_index(vectors, HnswParams(seed=11))
        b = build_index(vectors, HnswParams(seed=11))
        assert a.levels == b.levels
        assert a.neighbors == b.neighbors
        assert a.entry_point == b.entry_point


class TestSearch:
    def test_orthogonal_pair(self):
        e1 = np.zeros(512); e1[0] = 1.0
        e2 = np.zeros(512); e2[1] = 1.0
        idx = HnswIndex(HnswParams(seed=0))
        idx.insert("e1", e1)
        idx.insert("e2", e2)
        assert idx.search(e1, k=1) == [("e1", 0.0)]

    def test_empty_index_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            HnswIndex(HnswParams(seed=0)).search(np.zeros(512), k=1)

    def test_exact_at_full_ef(self, rng):
        vectors = np.stack([random_unit(rng) for _ in range(64)])
        idx = build_index(vectors)
        ids = [f"item-{i:05d}" for i in range(64)]
        for _ in range(20):
            q = random_unit(rng)
            got = idx.search(q, k=10, ef_search=64)
            expected = knn_linear_scan(idx._matrix[:64], ids, q, 10)
            assert got == expected

    def test_results_strictly_sorted(self, rng):
        vectors = np.stack([random_unit(rng, 64) for _ in range(50)])
        idx = build_index(vectors)
        out = idx.search(random_unit(rng, 64), k=10, ef_search=50)
        for (i1, d1), (i2, d2) in zip(out, out[1:]):
            assert (d1, i1) < (d2, i2)

    def test_recall_on_medium_corpus(self, rng):
        vectors = np.stack([random_unit(rng, 64) for _ in range(1000)])
        idx = build_index(vectors, HnswParams(m=16, ef_construction=100, seed=0), dim=64)
        ids = [f"item-{i:05d}" for i in range(1000)]
        hits = total = 0
        for _ in range(20):
            q = random_unit(rng, 64)
            got = {item for item, _ in idx.search(q, k=10, ef_search=80)}
            want = {item for item, _ in knn_linear_scan(idx._matrix[:1000], ids, q, 10)}
            hits += len(got & want)
            total += 10
        assert hits / total >= 0.9

    def test_concurrent_readers_match_serial(self, rng):
        from concurrent.futures import ThreadPoolExecutor

        vectors = np.stack([random_unit(rng, 64) for _ in range(300)])
        idx = build_index(vectors, HnswParams(m=8, ef_construction=50, seed=2), dim=64)
        queries = [random_unit(rng, 64) for _ in range(40)]
        serial = [idx.search(q, k=5) for q in queries]
        with ThreadPoolExecutor(max_workers=8) as pool:
            threaded = list(pool.map(lambda q: idx.search(q, k=5), queries))
        assert threaded == serial

    def test_recall_monotone_in_ef(self, rng):
        vectors = np.stack([random_unit(rng, 32) for _ in range(400)])
        idx = build_index(vectors, HnswParams(m=8, ef_construction=60, seed=1), dim=32)
        ids = [f"item-{i:05d}" for i in range(400)]
        queries = [random_unit(rng, 32) for _ in range(30)]
        recalls = []
        for ef in (10, 40, 400):
            hits = 0
            for q in queries:
                got = {item for item, _ in idx.search(q, k=10, ef_search=ef)}
                want = {item for item, _ in knn_linear_scan(idx._matrix[:400], ids, q, 10)}
                hits += len(got & want)
            recalls.append(hits / (10 * len(queries)))
        assert recalls[0] <= recalls[1] <= recalls[2]
        assert recalls[2] == 1.0


class TestFlatIndex:
    def test_exact_search(self, rng):
        idx = FlatIndex(dim=32)
        vectors = [random_unit(rng, 32) for _ in range(10)]
        for i, v in enumerate(vectors):
            idx.insert(f"item-{i:05d}", v)
        q = random_unit(rng, 32)
        ids = [f"item-{i:05d}" for i in range(10)]
        assert idx.search(q, k=3) == knn_linear_scan(idx.matrix, ids, q, 3)

    def test_duplicate_rejected(self, rng):
        idx = FlatIndex(dim=8)
        idx.insert("a", random_unit(rng, 8))
        with pytest.raises(ValueError, match="duplicate"):
            idx.insert("a", random_unit(rng, 8))


class TestPersistence:
    def test_round_trip_answers_identically(self, tmp_path, rng):
        vectors = np.stack([random_unit(rng, 64) for _ in range(300)])
        idx = build_index(vectors, HnswParams(m=8, ef_construction=50, seed=5), dim=64)
        path = tmp_path / "index.stix"
        save_index(idx, path)
        loaded = load_index(path)
        assert isinstance(loaded, HnswIndex)
        assert loaded.neighbors == idx.neighbors
        assert loaded.levels == idx.levels
        for _ in range(50):
            q = random_unit(rng, 64)
            assert loaded.search(q, k=5) == idx.search(q, k=5)

    def test_empty_round_trip(self, tmp_path):
        idx = HnswIndex(HnswParams(seed=0), dim=16)
        path = tmp_path / "empty.stix"
        save_index(idx, path)
        loaded = load_index(path)
        assert len(loaded) == 0

    def test_flat_round_trip(self, tmp_path, rng):
        idx = FlatIndex(dim=16)
        for i in range(5):
            idx.insert(f"f{i}", random_unit(rng, 16))
        path = tmp_path / "flat.stix"
        save_index(idx, path)
        loaded = load_index(path)
        assert isinstance(loaded, FlatIndex)
        q = random_unit(rng, 16)
        assert loaded.search(q, k=3) == idx.search(q, k=3)

    def test_corrupt_magic_is_format_error(self, tmp_path, rng):
        path = tmp_path / "index.stix"
        save_index(build_index(np.stack([random_unit(rng, 16)]), dim=16), path)
        raw = bytearray(path.read_bytes())
        raw[:4] = b"JUNK"
        path.write_bytes(bytes(raw))
        with pytest.raises(IndexFormatError):
            load_index(path)

    def test_corrupt_payload_is_checksum_error(self, tmp_path, rng):
        vectors = np.stack([random_unit(rng, 16) for _ in range(10)])
        path = tmp_path / "index.stix"
        save_index(build_index(vectors, dim=16), path)
        raw = bytearray(path.read_bytes())
        # flip one byte inside the vector block (header is 53 bytes, then
        # 2 bytes of level per node; vectors follow)
        raw[53 + 2 * 10 + 8] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(IndexChecksumError):
            load_index(path)

    def test_truncated_file_is_truncation_error(self, tmp_path, rng):
        vectors = np.stack([random_unit(rng, 16) for _ in range(10)])
        path = tmp_path / "index.stix"
        save_index(build_index(vectors, dim=16), path)
        raw = path.read_bytes()
        path.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(IndexTruncatedError):
            load_index(path)

    def test_error_types_are_distinct(self):
        kinds = {IndexFormatError, IndexChecksumError, IndexTruncatedError}
        assert len(kinds) == 3


def make_items(rng, spec):
    """spec: list of (fine_class, gender, count)."""
    items = []
    n = 0
    for fine, gender, count in spec:
        for _ in range(count):
            items.append(
                CatalogItem(
                    item_id=f"it-{n:04d}", image_name=f"img-{n}.png", fine_class=fine,
                    gender=gender, priority=1.0, embedding=random_unit(rng, 32),
                )
            )
            n += 1
    return items


class TestShards:
    def test_two_by_two_gives_four_shards(self, rng):
        items = make_items(rng, [
            (0, Gender.MAN, 3), (0, Gender.WOMAN, 3),
            (1, Gender.MAN, 3), (1, Gender.WOMAN, 3),
        ])
        manager = build_shards(items, HnswParams(seed=0))
        assert len(manager) == 4

    def test_empty_input(self):
        assert len(build_shards([], HnswParams(seed=0))) == 0

    def test_shard_census_matches_items(self, rng):
        spec = [(f, g, 2 + f) for f in range(3) for g in (Gender.MAN, Gender.WOMAN)]
        items = make_items(rng, spec)
        manager = build_shards(items, HnswParams(seed=0))
        expected = {(f, g): c for f, g, c in spec}
        assert len(manager) == len(expected)
        for key, shard in manager.shards.items():
            assert len(shard) == expected[(key.fine_class, key.gender)]
        assert manager.total_items() == len(items)

    def test_unknown_gender_rejected(self, rng):
        items = make_items(rng, [(0, Gender.UNKNOWN, 1)])
        with pytest.raises(ValueError, match="unknown gender"):
            build_shards(items, HnswParams(seed=0))

    def test_small_shards_flat_large_hnsw(self, rng):
        items = make_items(rng, [(0, Gender.MAN, 5), (1, Gender.MAN, 40)])
        manager = build_shards(items, HnswParams(seed=0), flat_threshold=32)
        assert isinstance(manager.get(ShardKey(0, Gender.MAN)), FlatIndex)
        assert isinstance(manager.get(ShardKey(1, Gender.MAN)), HnswIndex)

    def test_no_cross_shard_leakage(self, rng):
        items = make_items(rng, [(0, Gender.MAN, 10), (1, Gender.WOMAN, 10)])
        manager = build_shards(items, HnswParams(seed=0))
        members = {it.item_id for it in items if it.fine_class == 0}
        out = manager.search(ShardKey(0, Gender.MAN), random_unit(rng, 32), k=10)
        assert {item for item, _ in out} <= members

    def test_shardkey_rejects_unknown(self):
        with pytest.raises(ValueError):
            ShardKey(0, Gender.UNKNOWN)

    def test_missing_shard_returns_empty(self, rng):
        manager = ShardManager({})
        assert manager.search(ShardKey(0, Gender.MAN), random_unit(rng, 32), 5) == []

    def test_save_load_shards(self, tmp_path, rng):
        items = make_items(rng, [(0, Gender.MAN, 40), (2, Gender.WOMAN, 6)])
        manager = build_shards(items, HnswParams(seed=0))
        save_shards(manager, tmp_path / "shards")
        loaded = load_shards(tmp_path / "shards")
        assert set(loaded.shards) == set(manager.shards)
        q = random_unit(rng, 32)
        for key in manager.shards:
            assert loaded.search(key, q, 5) == manager.search(key, q, 5)

    def test_missing_manifest(self, tmp_path):
        with pytest.raises(IndexFormatError, match="manifest|shards.tsv"):
            load_shards(tmp_path)
