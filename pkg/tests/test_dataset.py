import os
from pathlib import Path

import pytest
from hypothesis import given, strategies as st

from gatrec.dataset import (
    Dataset,
    FileCatalogClient,
    Interaction,
    ItemMeta,
    MetadataCache,
    MetadataMissingError,
    ParseError,
    RatingValidationError,
    TMDBCatalogClient,
    build_item_text,
    fetch_all_metadata,
    fetch_item_metadata,
    load_item_titles,
    parse_interactions,
    read_metadata_file,
    serialize_interactions,
    split_title_year,
)

ML100K = os.environ.get("GATREC_ML100K")


def test_parse_ml100k_line():
    assert parse_interactions(b"196\t242\t3\t881250949\n", "ML100K") == [Interaction(196, 242, 3, 881250949)]


def test_parse_ml1m_line():
    assert parse_interactions(b"1::1193::5::978300760\n", "ML1M") == [Interaction(1, 1193, 5, 978300760)]


@pytest.mark.skipif(not ML100K, reason="set GATREC_ML100K to an extracted ml-100k directory")
def test_first_line_of_distributed_100k_file():
    with open(Path(ML100K) / "u.data", "rb") as fh:
        first = parse_interactions(fh.readline(), "ML100K")
    assert first == [Interaction(196, 242, 3, 881250949)]


def test_parse_empty():
    assert parse_interactions(b"", "ML100K") == []


def test_parse_skips_blank_lines_but_counts_them():
    raw = b"1\t2\t3\t4\n\n5\t6\tx\t8\n"
    with pytest.raises(ParseError) as exc:
        parse_interactions(raw, "ML100K")
    assert exc.value.line_no == 3


@pytest.mark.parametrize("raw", [b"1\t2\t3\n", b"1::2::3::4\n", b"1\t2\t3\t4\t5\n"])
def test_parse_malformed(raw):
    with pytest.raises(ParseError):
        parse_interactions(raw, "ML100K")


def test_parse_rating_out_of_range():
    with pytest.raises(RatingValidationError) as exc:
        parse_interactions(b"1\t2\t5\t4\n1\t3\t6\t4\n", "ML100K")
    assert exc.value.line_no == 2


interaction = st.builds(
    Interaction,
    st.integers(1, 10**6),
    st.integers(1, 10**6),
    st.integers(1, 5),
    st.integers(0, 2**31),
)


@given(st.lists(interaction, max_size=30), st.sampled_from(["ML100K", "ML1M"]))
def test_round_trip(xs, fmt):
    raw = serialize_interactions(xs, fmt)
    parsed = parse_interactions(raw, fmt)
    assert parsed == xs
    assert serialize_interactions(parsed, fmt) == raw
    assert len(parsed) == sum(1 for line in raw.split(b"\n") if line.strip())


def test_duplicates_keep_last():
    xs = [Interaction(1, 2, 5, 10), Interaction(3, 4, 1, 11), Interaction(1, 2, 2, 12)]
    ds = Dataset.from_interactions(xs)
    assert ds.interactions == (Interaction(3, 4, 1, 11), Interaction(1, 2, 2, 12))
    assert ds.user_ids == (1, 3)
    assert ds.item_ids == (2, 4)


def test_build_item_text():
    meta = ItemMeta(1, "Toy Story", ("Animation", "Comedy"), "A cowboy doll...")
    assert build_item_text(meta) == "Toy Story. Genres: Animation, Comedy. Overview: A cowboy doll..."
    assert build_item_text(ItemMeta(1, "Toy Story")) == "Toy Story. Genres: . Overview: "
    assert build_item_text(meta) == build_item_text(ItemMeta(1, "Toy Story", ["Animation", "Comedy"], "A cowboy doll..."))


def test_item_meta_requires_title():
    with pytest.raises(ValueError):
        ItemMeta(1, "")


class CountingCatalog:
    remote = True

    def __init__(self, entries):
        self.entries = entries
        self.calls = 0

    def lookup(self, item_id, title=None):
        self.calls += 1
        return self.entries.get(item_id)


def test_cache_hit_makes_no_remote_call(tmp_path):
    cache = MetadataCache(tmp_path / "meta.tsv")
    cache.put(ItemMeta(7, "Heat", ("Crime",), "Cops and robbers."))
    client = CountingCatalog({})
    assert fetch_item_metadata(7, client, cache).title == "Heat"
    assert client.calls == 0


def test_fetch_persists_before_return_and_is_idempotent(tmp_path):
    path = tmp_path / "meta.tsv"
    client = CountingCatalog({5: ItemMeta(5, "Alien", ("Horror", "Sci-Fi"), "In\tspace.")})
    cache = MetadataCache(path)
    first = fetch_item_metadata(5, client, cache)
    assert read_metadata_file(path)[5] == first
    second = fetch_item_metadata(5, client, cache)
    assert first == second
    assert client.calls == 1
    # tabs inside the overview are flattened to spaces in the cache record
    assert first.overview == "In space."
    assert path.read_text().count("\t") == 3
    # a fresh cache instance serves the same record from disk
    assert fetch_item_metadata(5, CountingCatalog({}), MetadataCache(path)) == first


def test_missing_metadata(tmp_path):
    cache = MetadataCache(tmp_path / "m.tsv")
    with pytest.raises(MetadataMissingError):
        fetch_item_metadata(9, CountingCatalog({}), cache)
    sub = fetch_item_metadata(9, CountingCatalog({}), cache, title="Nowhere (1990)", substitute=True)
    assert sub == ItemMeta(9, "Nowhere (1990)", (), "")
    assert 9 not in cache


def test_fetch_all_concurrent_cache_file(tmp_path):
    entries = {i: ItemMeta(i, f"T{i}", ("Drama",), f"o{i}") for i in range(1, 41) if i % 5}
    cache = MetadataCache(tmp_path / "m.tsv")
    metas = fetch_all_metadata(list(range(1, 41)), CountingCatalog(entries), cache,
                               {i: f"T{i}" for i in range(1, 41)}, workers=8)
    assert len(metas) == 40
    assert metas[5].genres == ()
    assert read_metadata_file(tmp_path / "m.tsv") == entries


def test_file_catalog_and_titles(synthetic_dir):
    titles = load_item_titles(synthetic_dir / "items.tsv", "ML100K")
    client = FileCatalogClient(synthetic_dir / "catalog.tsv")
    assert len(titles) == 200
    some = next(iter(client.entries.values()))
    assert some.title == titles[some.item_id]


def test_split_title_year():
    assert split_title_year("Toy Story (1995)") == ("Toy Story", 1995)
    assert split_title_year("Godfather, The (1972)") == ("The Godfather", 1972)
    assert split_title_year("Untitled") == ("Untitled", None)


class FakeResponse:
    def __init__(self, payload, status=200):
        self.payload = payload
        self.status = status

    def raise_for_status(self):
        if self.status >= 400:
            raise RuntimeError(f"HTTP {self.status}")

    def json(self):
        return self.payload


class FakeTMDB:
    def __init__(self):
        self.requests = []

    def get(self, url, params=None, timeout=None):
        self.requests.append((url, dict(params)))
        if url.endswith("/search/movie"):
            return FakeResponse({"results": [{"id": 862}]})
        return FakeResponse({"genres": [{"name": "Animation"}, {"name": "Comedy"}], "overview": "Toys."})


def test_tmdb_client_search_then_details():
    session = FakeTMDB()
    client = TMDBCatalogClient(api_key="k", session=session, backoff=0)
    meta = client.lookup(1, "Toy Story (1995)")
    assert meta == ItemMeta(1, "Toy Story (1995)", ("Animation", "Comedy"), "Toys.")
    assert session.requests[0][1] == {"query": "Toy Story", "year": 1995, "api_key": "k"}
    assert session.requests[1][0].endswith("/movie/862")


def test_tmdb_client_needs_key(monkeypatch):
    monkeypatch.delenv("GATREC_TMDB_API_KEY", raising=False)
    with pytest.raises(ValueError):
        TMDBCatalogClient(session=FakeTMDB())
