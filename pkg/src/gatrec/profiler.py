"""Per-user preference profiles built from extreme ratings."""
from __future__ import annotations

import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

from .dataset import Interaction, ItemMeta, build_item_text

log = logging.getLogger(__name__)

LLM_API_KEY_ENV = "GATREC_LLM_API_KEY"
LLM_ENDPOINT_ENV = "GATREC_LLM_ENDPOINT"
LLM_MODEL_ENV = "GATREC_LLM_MODEL"

PROFILE_ITEMS = 5
EMPTY_PROFILE = "No strong preferences recorded."
PROMPT_VERSION = "v1"


class Provenance(str, Enum):
    REMOTE = "Remote"
    FALLBACK = "Fallback"


@dataclass(frozen=True)
class ProfileSeed:
    user_id: int
    loved: tuple[ItemMeta, ...] = ()
    disliked: tuple[ItemMeta, ...] = ()

    @property
    def empty(self) -> bool:
        return not self.loved and not self.disliked


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    text: str
    provenance: Provenance


def _top_recent(xs: list[Interaction], n: int) -> list[Interaction]:
    # most recent first; equal timestamps resolved by ascending item id
    return sorted(xs, key=lambda x: (-x.timestamp, x.item_id))[:n]


def select_profile_items(
    user_interactions: Sequence[Interaction], items: Mapping[int, ItemMeta], limit: int = PROFILE_ITEMS
) -> ProfileSeed:
    if not user_interactions:
        raise ValueError("select_profile_items needs at least one interaction to know the user")
    users = {x.user_id for x in user_interactions}
    if len(users) != 1:
        raise ValueError(f"interactions span several users: {sorted(users)}")
    loved = _top_recent([x for x in user_interactions if x.rating == 5], limit)
    disliked = _top_recent([x for x in user_interactions if x.rating <= 2], limit)

    def meta(x):
        return items.get(x.item_id) or ItemMeta(x.item_id, f"Item {x.item_id}")

    seed = ProfileSeed(users.pop(), tuple(meta(x) for x in loved), tuple(meta(x) for x in disliked))
    assert not {m.item_id for m in seed.loved} & {m.item_id for m in seed.disliked}
    return seed


def _describe(metas: Iterable[ItemMeta]) -> str:
    parts = []
    for m in metas:
        parts.append(f"{m.title} ({', '.join(m.genres)})" if m.genres else m.title)
    return "; ".join(parts) if parts else "none"


class FallbackProfileGenerator:
    """Deterministic template profile; keeps title and genre tokens for the hashing embedder."""

    provenance = Provenance.FALLBACK

    def generate(self, seed: ProfileSeed) -> str:
        if seed.empty:
            return EMPTY_PROFILE
        return f"Enjoys: {_describe(seed.loved)}. Dislikes: {_describe(seed.disliked)}."


def load_prompt_template(version: str = PROMPT_VERSION) -> str:
    return resources.files("gatrec.assets").joinpath(f"profile_prompt_{version}.txt").read_text("utf-8")


class RemoteProfileGenerator:
    """Chat-completion client (OpenAI-compatible ``/chat/completions``)."""

    remote = True

    provenance = Provenance.REMOTE

    def __init__(self, endpoint: Optional[str] = None, model: Optional[str] = None, api_key: Optional[str] = None,
                 session=None, timeout: float = 30.0, retries: int = 3, backoff: float = 1.0,
                 max_concurrency: int = 4, prompt_version: str = PROMPT_VERSION):
        self.endpoint = (endpoint or os.environ.get(LLM_ENDPOINT_ENV) or "https://api.openai.com/v1").rstrip("/")
        self.model = model or os.environ.get(LLM_MODEL_ENV) or "gpt-4o-mini"
        self.api_key = api_key or os.environ.get(LLM_API_KEY_ENV)
        if not self.api_key:
            raise ValueError(f"remote profile generator requires an API key (set {LLM_API_KEY_ENV})")
        if session is None:
            import requests

            session = requests.Session()
        self.session = session
        self.timeout = timeout
        self.retries = retries
        self.backoff = backoff
        self.max_concurrency = max_concurrency
        self.template = load_prompt_template(prompt_version)
        self.calls = 0

    def prompt(self, seed: ProfileSeed) -> str:
        def block(metas):
            return "\n".join(f"- {build_item_text(m)}" for m in metas) or "- none"

        return self.template.format(loved=block(seed.loved), disliked=block(seed.disliked))

    def generate(self, seed: ProfileSeed) -> str:
        body = {"model": self.model, "messages": [{"role": "user", "content": self.prompt(seed)}],
                "temperature": 0}
        headers = {"Authorization": f"Bearer {self.api_key}"}
        last_exc = None
        for attempt in range(self.retries):
            self.calls += 1
            try:
                resp = self.session.post(f"{self.endpoint}/chat/completions", json=body, headers=headers,
                                         timeout=self.timeout)
                resp.raise_for_status()
                text = resp.json()["choices"][0]["message"]["content"].strip()
                if text:
                    return text
                last_exc = ValueError("empty completion")
            except Exception as exc:
                last_exc = exc
            if attempt + 1 < self.retries:
                time.sleep(self.backoff * 2**attempt)
        raise last_exc


_FALLBACK = FallbackProfileGenerator()


def generate_profile(seed: ProfileSeed, generator=None) -> UserProfile:
    generator = generator or _FALLBACK
    if seed.empty:
        return UserProfile(seed.user_id, EMPTY_PROFILE, Provenance.FALLBACK)
    if generator.provenance is Provenance.FALLBACK:
        return UserProfile(seed.user_id, generator.generate(seed), Provenance.FALLBACK)
    try:
        # whitespace collapsed so the profile cache round-trips exactly
        return UserProfile(seed.user_id, " ".join(generator.generate(seed).split()), Provenance.REMOTE)
    except Exception as exc:
        log.warning("profile for user %d fell back to template: %s", seed.user_id, exc)
        return UserProfile(seed.user_id, _FALLBACK.generate(seed), Provenance.FALLBACK)


def build_profiles(
    interactions: Sequence[Interaction],
    items: Mapping[int, ItemMeta],
    generator=None,
    cache: Optional[Mapping[int, UserProfile]] = None,
    user_ids: Iterable[int] = (),
) -> dict[int, UserProfile]:
    """Profile every user, reusing cached profiles; remote calls run under the generator's concurrency cap.

    Users listed in ``user_ids`` without any interaction get the empty profile.
    """
    by_user: dict[int, list[Interaction]] = {}
    for x in interactions:
        by_user.setdefault(x.user_id, []).append(x)
    cache = cache or {}
    todo = [u for u in sorted(by_user) if u not in cache]
    seeds = [select_profile_items(by_user[u], items) for u in todo]
    workers = getattr(generator, "max_concurrency", 1)
    if workers > 1 and len(seeds) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            fresh = list(pool.map(lambda s: generate_profile(s, generator), seeds))
    else:
        fresh = [generate_profile(s, generator) for s in seeds]
    out = {u: cache[u] for u in sorted(by_user) if u in cache}
    out.update({p.user_id: p for p in fresh})
    for u in user_ids:
        out.setdefault(u, UserProfile(u, EMPTY_PROFILE, Provenance.FALLBACK))
    return dict(sorted(out.items()))


def write_profiles(path, profiles: Iterable[UserProfile]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for p in sorted(profiles, key=lambda p: p.user_id):
            text = " ".join(p.text.split())
            fh.write(f"{p.user_id}\t{p.provenance.value}\t{text}\n")


def read_profiles(path) -> dict[int, UserProfile]:
    out = {}
    path = Path(path)
    if not path.exists():
        return out
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            user_id, prov, text = line.rstrip("\n").split("\t", 2)
            out[int(user_id)] = UserProfile(int(user_id), text, Provenance(prov))
    return out
