"""Seeded synthetic MovieLens-style fixture with planted genre preferences.

Every user loves two genres and dislikes two others; ratings follow those
preferences plus item quality and noise, so item texts (which name the
genres) carry real signal. A handful of users are kept sparse so the
cold-start slice is populated.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import Interaction, ItemMeta, RatingsFormat, serialize_interactions, write_metadata_file

SEED = 20240613
N_USERS = 100
N_ITEMS = 200
N_SPARSE_USERS = 10

GENRES = {
    "Action": (["Iron", "Rogue", "Final", "Steel", "Rapid"], ["Strike", "Pursuit", "Showdown", "Heist", "Fury"],
               "a mercenary fights through explosive chases and a brutal showdown"),
    "Comedy": (["Silly", "Crazy", "Lucky", "Awkward", "Happy"], ["Wedding", "Roommates", "Vacation", "Mixup", "Party"],
               "a clumsy family stumbles into hilarious mishaps and slapstick pranks"),
    "Drama": (["Quiet", "Broken", "Distant", "Silent", "Bitter"], ["Harvest", "Letters", "Winter", "Promise", "Inheritance"],
              "a grieving widow confronts loss, regret and a fractured family"),
    "Horror": (["Hollow", "Cursed", "Bleeding", "Haunted", "Rotten"], ["Cellar", "Ritual", "Asylum", "Woods", "Doll"],
               "a cursed ghost stalks terrified teenagers through a haunted asylum"),
    "Romance": (["Sweet", "Endless", "Secret", "Paris", "Summer"], ["Kiss", "Affair", "Serenade", "Valentine", "Embrace"],
                "two lovers fall for each other during a tender summer courtship"),
    "Sci-Fi": (["Quantum", "Orbital", "Stellar", "Cyber", "Galactic"], ["Colony", "Android", "Nebula", "Protocol", "Wormhole"],
               "astronauts and androids explore a distant galaxy aboard a starship"),
    "Documentary": (["True", "Hidden", "Wild", "Untold", "Real"], ["Ocean", "Economy", "Expedition", "Archive", "Chronicle"],
                    "filmmakers interview experts and archival witnesses about real history"),
    "Animation": (["Little", "Magic", "Brave", "Tiny", "Fluffy"], ["Bunny", "Dragon", "Kingdom", "Robot", "Meadow"],
                  "cartoon animals sing through a colorful animated fairytale adventure"),
}
GENRE_NAMES = list(GENRES)


def generate(seed: int = SEED):
    """Return (interactions, titles, catalog) for the synthetic fixture."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_genres = len(GENRE_NAMES)

    items: dict[int, ItemMeta] = {}
    item_genres = {}
    titles = {}
    for item_id in range(1, N_ITEMS + 1):
        k = 1 if rng.random() < 0.6 else 2
        gs = sorted(rng.choice(n_genres, size=k, replace=False).tolist())
        main = GENRE_NAMES[gs[0]]
        adjs, nouns, blurb = GENRES[main]
        year = int(rng.integers(1970, 2000))
        title = f"{adjs[rng.integers(len(adjs))]} {nouns[rng.integers(len(nouns))]} {item_id} ({year})"
        extra = f" Also: {GENRES[GENRE_NAMES[gs[1]]][2]}." if k == 2 else ""
        names = [GENRE_NAMES[g] for g in gs]
        items[item_id] = ItemMeta(item_id, title, tuple(names), f"In this film {blurb}.{extra}")
        item_genres[item_id] = set(gs)
        titles[item_id] = title
    # about 8% of items have no catalog match and degrade to title-only text
    missing = set(rng.choice(np.arange(1, N_ITEMS + 1), size=N_ITEMS // 12, replace=False).tolist())
    catalog = {i: m for i, m in items.items() if i not in missing}

    popularity = 1.0 / np.arange(1, N_ITEMS + 1) ** 0.7
    popularity = popularity[rng.permutation(N_ITEMS)]
    quality = rng.normal(0.0, 0.4, N_ITEMS)

    interactions = []
    t0 = 880_000_000
    for user_id in range(1, N_USERS + 1):
        perm = rng.permutation(n_genres)
        liked, disliked = set(perm[:2].tolist()), set(perm[2:4].tolist())
        sparse = user_id > N_USERS - N_SPARSE_USERS
        n = int(rng.integers(4, 8)) if sparse else int(rng.integers(20, 46))
        p = popularity / popularity.sum()
        chosen = rng.choice(np.arange(1, N_ITEMS + 1), size=n, replace=False, p=p)
        stamps = np.sort(rng.integers(0, 10_000_000, size=n)) + t0
        for item_id, ts in zip(chosen.tolist(), stamps.tolist()):
            g = item_genres[item_id]
            raw = 3.0 + 1.6 * bool(g & liked) - 1.8 * bool(g & disliked) + quality[item_id - 1] + rng.normal(0, 0.6)
            rating = int(np.clip(np.rint(raw), 1, 5))
            interactions.append(Interaction(user_id, item_id, rating, int(ts)))
    return interactions, titles, catalog


def write_fixture(directory, seed: int = SEED) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    interactions, titles, catalog = generate(seed)
    (directory / "ratings.tsv").write_bytes(serialize_interactions(interactions, RatingsFormat.ML100K))
    with open(directory / "items.tsv", "w", encoding="latin-1", newline="\n") as fh:
        for item_id, title in sorted(titles.items()):
            fh.write(f"{item_id}|{title}|01-Jan-1995||\n")
    write_metadata_file(directory / "catalog.tsv", catalog.values())


def fixture_dir() -> Path:
    """Directory of the bundled copy (``ratings.tsv``, ``items.tsv``, ``catalog.tsv``)."""
    return Path(str(resources.files("gatrec") / "data" / "synthetic"))


if __name__ == "__main__":
    write_fixture(fixture_dir())
