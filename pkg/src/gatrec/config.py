"""Run configuration: an INI file plus command-line overrides (flags win)."""
from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

from .dataset import TMDB_API_KEY_ENV, RatingsFormat
from .embedder import EMBED_ENDPOINT_ENV
from .evaluator import EvalConfig
from .model import InitMode, ModelConfig
from .profiler import LLM_API_KEY_ENV
from .trainer import TrainConfig

PROVIDERS = ("fallback", "remote")


class ConfigError(ValueError):
    def __init__(self, violations: list[str]):
        super().__init__("; ".join(violations))
        self.violations = violations


@dataclass
class RunConfig:
    ratings: Path
    format: RatingsFormat = RatingsFormat.ML100K
    items: Optional[Path] = None
    catalog: Optional[Path] = None
    offline: bool = False
    profile_provider: str = "fallback"
    embed_provider: str = "fallback"
    embed_dim: int = 384
    profile_scope: str = "train"
    workers: int = 1
    cache_dir: Path = Path("cache")
    out_dir: Path = Path("out")
    init_mode: InitMode = InitMode.TEXT
    positive_only_edges: bool = False
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def effective_profile_provider(self) -> str:
        return "fallback" if self.offline else self.profile_provider

    def effective_embed_provider(self) -> str:
        return "fallback" if self.offline else self.embed_provider

    def validate(self) -> list[str]:
        problems = []
        for name in ("ratings", "items", "catalog"):
            path = getattr(self, name)
            if path is not None and not Path(path).exists():
                problems.append(f"{name}: {path} does not exist")
        if self.profile_provider not in PROVIDERS:
            problems.append(f"profile provider must be one of {PROVIDERS}")
        if self.embed_provider not in PROVIDERS:
            problems.append(f"embed provider must be one of {PROVIDERS}")
        if self.profile_scope not in ("train", "all"):
            problems.append("profile_scope must be 'train' or 'all'")
        if self.model.input_dim != self.embed_dim:
            problems.append(f"model input_dim {self.model.input_dim} != embedding dim {self.embed_dim}")
        if self.model.hidden_dim % self.model.heads:
            problems.append("hidden_dim must be divisible by heads")
        if not self.offline:
            if self.profile_provider == "remote" and not os.environ.get(LLM_API_KEY_ENV):
                problems.append(f"remote profiles need {LLM_API_KEY_ENV}")
            if self.embed_provider == "remote" and not os.environ.get(EMBED_ENDPOINT_ENV):
                problems.append(f"remote embeddings need {EMBED_ENDPOINT_ENV}")
            if self.catalog is None and not os.environ.get(TMDB_API_KEY_ENV):
                problems.append(f"online metadata needs {TMDB_API_KEY_ENV} (or a catalog file, or --offline)")
        return problems


def _bool(s: str) -> bool:
    return s.strip().lower() in ("1", "true", "yes", "on")


def _ks(s: str) -> tuple[int, ...]:
    return tuple(int(k) for k in s.replace(",", " ").split())


def load_config(path, **overrides) -> RunConfig:
    """Parse an INI run file; relative paths resolve against the file's directory."""
    path = Path(path)
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError([f"cannot read config {path}"])
    base = path.parent

    def p(section, key, default=None):
        raw = cp.get(section, key, fallback=None)
        if raw is None or not raw.strip():
            return default
        q = Path(raw.strip()).expanduser()
        return q if q.is_absolute() else base / q

    if not cp.has_option("data", "ratings"):
        raise ConfigError(["[data] ratings is required"])
    m = ModelConfig()
    mc = cp["model"] if cp.has_section("model") else {}
    model = ModelConfig(
        input_dim=cp.getint("providers", "dim", fallback=m.input_dim),
        hidden_dim=int(mc.get("hidden_dim", m.hidden_dim)),
        heads=int(mc.get("heads", m.heads)),
        n_layers=int(mc.get("layers", m.n_layers)),
        dropout=float(mc.get("dropout", m.dropout)),
        attn_slope=float(mc.get("attn_slope", m.attn_slope)),
        act_slope=float(mc.get("act_slope", m.act_slope)),
    )
    t = TrainConfig()
    tc = cp["train"] if cp.has_section("train") else {}
    train = TrainConfig(
        alpha=float(tc.get("alpha", t.alpha)),
        lr_init=float(tc.get("lr_init", t.lr_init)),
        lr_factor=float(tc.get("lr_factor", t.lr_factor)),
        lr_patience=int(tc.get("lr_patience", t.lr_patience)),
        early_stop_patience=int(tc.get("early_stop_patience", t.early_stop_patience)),
        weight_decay=float(tc.get("weight_decay", t.weight_decay)),
        batch_size=int(tc.get("batch_size", t.batch_size)),
        max_epochs=int(tc.get("max_epochs", t.max_epochs)),
        seed=int(tc.get("seed", t.seed)),
        epsilon_neg=float(tc.get("epsilon_neg", t.epsilon_neg)),
        val_fraction=float(tc.get("val_fraction", t.val_fraction)),
        train_features=_bool(tc.get("train_features", "false")),
    )
    e = EvalConfig()
    ec = cp["eval"] if cp.has_section("eval") else {}
    ev = EvalConfig(
        k_values=_ks(ec.get("k_values", " ".join(map(str, e.k_values)))),
        relevance_threshold=int(ec.get("relevance_threshold", e.relevance_threshold)),
        cold_start_max=int(ec.get("cold_start_max", e.cold_start_max)),
        folds=int(ec.get("folds", e.folds)),
        split_seed=int(ec.get("split_seed", e.split_seed)),
    )
    cfg = RunConfig(
        ratings=p("data", "ratings"),
        format=RatingsFormat(cp.get("data", "format", fallback="ML100K").strip().upper()),
        items=p("data", "items"),
        catalog=p("data", "catalog"),
        offline=cp.getboolean("providers", "offline", fallback=False),
        profile_provider=cp.get("providers", "profile", fallback="fallback").strip(),
        embed_provider=cp.get("providers", "embed", fallback="fallback").strip(),
        embed_dim=model.input_dim,
        profile_scope=cp.get("providers", "profile_scope", fallback="train").strip(),
        workers=cp.getint("providers", "workers", fallback=1),
        cache_dir=p("paths", "cache_dir", base / "cache"),
        out_dir=p("paths", "out_dir", base / "out"),
        init_mode=InitMode(cp.get("model", "init", fallback="text").strip()),
        positive_only_edges=cp.getboolean("model", "positive_only_edges", fallback=False),
        model=model,
        train=train,
        eval=ev,
    )
    return apply_overrides(cfg, **overrides)


def apply_overrides(cfg: RunConfig, offline=None, seed=None, alpha=None, k=None, ablate=False, out=None) -> RunConfig:
    if offline:
        cfg = replace(cfg, offline=True)
    if seed is not None:
        cfg = replace(cfg, train=replace(cfg.train, seed=seed))
    if alpha is not None:
        cfg = replace(cfg, train=replace(cfg.train, alpha=alpha))
    if k:
        cfg = replace(cfg, eval=replace(cfg.eval, k_values=tuple(k)))
    if ablate:
        cfg = replace(cfg, init_mode=InitMode.RANDOM, train=replace(cfg.train, alpha=0.0))
    if out is not None:
        cfg = replace(cfg, out_dir=Path(out))
    return cfg
