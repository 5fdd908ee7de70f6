"""MovieLens-format ratings parsing, item metadata enrichment and unified item text."""
from __future__ import annotations

import logging
import os
import re
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import BinaryIO, Iterable, Mapping, Optional, Sequence, Union

log = logging.getLogger(__name__)

TMDB_API_KEY_ENV = "GATREC_TMDB_API_KEY"


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    def __init__(self, line_no: int, line: str, reason: str = "malformed line"):
        super().__init__(f"line {line_no}: {reason}: {line!r}")
        self.line_no = line_no


class RatingValidationError(DatasetError):
    def __init__(self, line_no: int, rating: int):
        super().__init__(f"line {line_no}: rating {rating} outside 1..5")
        self.line_no = line_no


class MetadataMissingError(LookupError):
    pass


class RatingsFormat(str, Enum):
    ML100K = "ML100K"
    ML1M = "ML1M"

    @property
    def delimiter(self) -> str:
        return "\t" if self is RatingsFormat.ML100K else "::"


@dataclass(frozen=True)
class Interaction:
    user_id: int
    item_id: int
    rating: int
    timestamp: int


@dataclass(frozen=True)
class ItemMeta:
    item_id: int
    title: str
    genres: tuple[str, ...] = ()
    overview: str = ""

    def __post_init__(self):
        if not self.title:
            raise DatasetError(f"item {self.item_id}: empty title")
        object.__setattr__(self, "genres", tuple(self.genres))


@dataclass(frozen=True)
class Dataset:
    interactions: tuple[Interaction, ...]
    items: Mapping[int, ItemMeta] = field(default_factory=dict)
    user_ids: tuple[int, ...] = ()
    item_ids: tuple[int, ...] = ()

    @classmethod
    def from_interactions(
        cls, interactions: Iterable[Interaction], items: Optional[Mapping[int, ItemMeta]] = None
    ) -> "Dataset":
        """Resolve duplicate (user, item) pairs (last one in file order wins) and index ids."""
        latest: dict[tuple[int, int], Interaction] = {}
        for x in interactions:
            latest.pop((x.user_id, x.item_id), None)
            latest[(x.user_id, x.item_id)] = x
        # dict keeps insertion order of the surviving (last) occurrence
        kept = tuple(latest.values())
        items = dict(items or {})
        item_ids = sorted({x.item_id for x in kept} | set(items))
        user_ids = sorted({x.user_id for x in kept})
        return cls(kept, items, tuple(user_ids), tuple(item_ids))


def _read_bytes(raw: Union[bytes, str, BinaryIO]) -> bytes:
    if isinstance(raw, bytes):
        return raw
    if isinstance(raw, str):
        return raw.encode("utf-8")
    return raw.read()


def parse_interactions(raw, fmt: RatingsFormat | str = RatingsFormat.ML100K) -> list[Interaction]:
    fmt = RatingsFormat(fmt)
    text = _read_bytes(raw).decode("utf-8")
    delim = fmt.delimiter
    out = []
    for line_no, line in enumerate(text.split("\n"), start=1):
        line = line.rstrip("\r")
        if not line.strip():
            continue
        parts = line.split(delim)
        if len(parts) != 4:
            raise ParseError(line_no, line, f"expected 4 fields, got {len(parts)}")
        try:
            user, item, rating, ts = (int(p) for p in parts)
        except ValueError:
            raise ParseError(line_no, line, "non-integer field") from None
        if user <= 0 or item <= 0:
            raise ParseError(line_no, line, "ids must be positive")
        if rating not in (1, 2, 3, 4, 5):
            raise RatingValidationError(line_no, rating)
        out.append(Interaction(user, item, rating, ts))
    return out


def serialize_interactions(interactions: Iterable[Interaction], fmt: RatingsFormat | str) -> bytes:
    delim = RatingsFormat(fmt).delimiter
    lines = [delim.join(str(v) for v in (x.user_id, x.item_id, x.rating, x.timestamp)) for x in interactions]
    return "".join(line + "\n" for line in lines).encode("utf-8")


def load_interactions(path, fmt: RatingsFormat | str) -> list[Interaction]:
    with open(path, "rb") as fh:
        return parse_interactions(fh, fmt)


def load_item_titles(path, fmt: RatingsFormat | str) -> dict[int, str]:
    """Titles from ``u.item`` (pipe-delimited, latin-1) or ``movies.dat`` (``::``, latin-1)."""
    fmt = RatingsFormat(fmt)
    delim = "|" if fmt is RatingsFormat.ML100K else "::"
    titles = {}
    with open(path, "rb") as fh:
        for line in fh.read().decode("latin-1").splitlines():
            if not line.strip():
                continue
            parts = line.split(delim)
            titles[int(parts[0])] = parts[1]
    return titles


# ---------------------------------------------------------------------------
# Unified item text


def build_item_text(meta: ItemMeta) -> str:
    return f"{meta.title}. Genres: {', '.join(meta.genres)}. Overview: {meta.overview}"


# ---------------------------------------------------------------------------
# Metadata cache + catalog clients


def _clean_field(s: str) -> str:
    return s.replace("\t", " ").replace("\r", " ").replace("\n", " ")


def format_meta_record(meta: ItemMeta) -> str:
    genres = "|".join(_clean_field(g) for g in meta.genres)
    return "\t".join([str(meta.item_id), _clean_field(meta.title), genres, _clean_field(meta.overview)])


def parse_meta_record(line: str) -> ItemMeta:
    parts = line.rstrip("\n").split("\t")
    if len(parts) != 4:
        raise DatasetError(f"bad metadata record: {line!r}")
    item_id, title, genres, overview = parts
    return ItemMeta(int(item_id), title, tuple(g for g in genres.split("|") if g), overview)


def read_metadata_file(path) -> dict[int, ItemMeta]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                meta = parse_meta_record(line)
                out[meta.item_id] = meta
    return out


def write_metadata_file(path, metas: Iterable[ItemMeta]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for meta in sorted(metas, key=lambda m: m.item_id):
            fh.write(format_meta_record(meta) + "\n")


class MetadataCache:
    """Line-delimited on-disk metadata cache; appends are serialized by a lock."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._entries: dict[int, ItemMeta] = {}
        if self.path.exists():
            self._entries = read_metadata_file(self.path)

    def get(self, item_id: int) -> Optional[ItemMeta]:
        return self._entries.get(item_id)

    def put(self, meta: ItemMeta) -> None:
        with self._lock:
            self._entries[meta.item_id] = meta
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, "a", encoding="utf-8", newline="\n") as fh:
                fh.write(format_meta_record(meta) + "\n")

    def compact(self) -> None:
        """Rewrite the file sorted by item id, dropping superseded records."""
        with self._lock:
            write_metadata_file(self.path, self._entries.values())

    def __contains__(self, item_id: int) -> bool:
        return item_id in self._entries

    def __len__(self):
        return len(self._entries)


class FileCatalogClient:
    """Offline catalog backed by a metadata file in the cache format."""

    def __init__(self, path):
        self.entries = read_metadata_file(path)
        self.calls = 0

    def lookup(self, item_id: int, title: Optional[str] = None) -> Optional[ItemMeta]:
        self.calls += 1
        return self.entries.get(item_id)


_YEAR_RE = re.compile(r"\s*\((\d{4})\)\s*$")


def split_title_year(title: str) -> tuple[str, Optional[int]]:
    """``"Toy Story (1995)"`` -> ``("Toy Story", 1995)``; MovieLens also moves articles: ``"Godfather, The"``."""
    m = _YEAR_RE.search(title)
    year = int(m.group(1)) if m else None
    name = title[: m.start()] if m else title
    for article in ("The", "A", "An"):
        suffix = f", {article}"
        if name.endswith(suffix):
            name = f"{article} {name[: -len(suffix)]}"
    return name.strip(), year


class TMDBCatalogClient:
    """Live catalog lookup against a TMDB-compatible HTTP API (search by title, then details)."""

    remote = True

    BASE_URL = "https://api.themoviedb.org/3"

    def __init__(self, api_key: Optional[str] = None, base_url: Optional[str] = None, session=None,
                 timeout: float = 10.0, retries: int = 3, backoff: float = 0.5):
        self.api_key = api_key or os.environ.get(TMDB_API_KEY_ENV)
        if not self.api_key:
            raise ValueError(f"TMDB client requires an API key (set {TMDB_API_KEY_ENV})")
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.base_url = (base_url or self.BASE_URL).rstrip("/")
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.calls = 0

    def _get(self, path: str, **params):
        params["api_key"] = self.api_key
        last_exc = None
        for attempt in range(self.retries):
            self.calls += 1
            try:
                resp = self.session.get(f"{self.base_url}{path}", params=params, timeout=self.timeout)
                resp.raise_for_status()
                return resp.json()
            except Exception as exc:  # network / HTTP errors are retried alike
                last_exc = exc
                time.sleep(self.backoff * 2**attempt)
        raise last_exc

    def lookup(self, item_id: int, title: Optional[str] = None) -> Optional[ItemMeta]:
        if not title:
            return None
        name, year = split_title_year(title)
        query = {"query": name}
        if year:
            query["year"] = year
        results = self._get("/search/movie", **query).get("results") or []
        if not results:
            return None
        details = self._get(f"/movie/{results[0]['id']}")
        genres = tuple(g["name"] for g in details.get("genres") or [])
        return ItemMeta(item_id, title, genres, details.get("overview") or "")


def fetch_item_metadata(
    item_id: int,
    catalog_client,
    cache: MetadataCache,
    title: Optional[str] = None,
    substitute: bool = False,
) -> ItemMeta:
    cached = cache.get(item_id)
    if cached is not None:
        return cached
    meta = catalog_client.lookup(item_id, title) if catalog_client is not None else None
    if meta is not None:
        # normalized through the record format so cached and fresh results are identical
        meta = parse_meta_record(format_meta_record(ItemMeta(item_id, meta.title, meta.genres, meta.overview)))
        cache.put(meta)
        return meta
    if substitute and title:
        return ItemMeta(item_id, title, (), "")
    raise MetadataMissingError(f"no metadata for item {item_id}")


def fetch_all_metadata(
    item_ids: Sequence[int],
    catalog_client,
    cache: MetadataCache,
    titles: Mapping[int, str],
    workers: int = 1,
) -> dict[int, ItemMeta]:
    """Fetch metadata for many items, degrading to title-only records when unresolvable."""

    def one(item_id):
        title = titles.get(item_id) or f"Item {item_id}"
        return fetch_item_metadata(item_id, catalog_client, cache, title=title, substitute=True)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            metas = list(pool.map(one, item_ids))
    else:
        metas = [one(i) for i in item_ids]
    missing = sum(1 for m in metas if m.item_id not in cache)
    if missing:
        log.info("%d of %d items fell back to title-only metadata", missing, len(metas))
    return {m.item_id: m for m in metas}
