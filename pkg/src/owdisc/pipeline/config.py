"""Run configuration loaded from a JSON document.

Every block is optional and falls back to the library defaults::

    {
      "seed": 0,
      "world": {"n_images": 500, "aware": {...}, "agnostic": {...}},
      "drm": {"alpha1": 0.9, "beta1": 0.2, ...},
      "contrastive": {"tau": 0.2, "lambda": 0.5, ...},
      "cluster": {"k_base": null, "k_over": null, "method": "minibatch", ...},
      "metrics": {"auc_thresholds": [0.5, 0.2], ...},
      "bench": {"n_values": [10000, 50000, 100000], ...}
    }

Unknown keys are rejected. ``k_base`` and ``k_over`` default to the number
of unknown classes and five times that number. Stage seeds are derived from
the single top-level ``seed``.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from owdisc.drm import DrmParams
from owdisc.embed import ContrastiveParams
from owdisc.synth import DetectorProfile, WorldConfig, agnostic_profile, aware_profile


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ClusterSettings:
    k_base: Optional[int] = None
    k_over: Optional[int] = None
    method: str = "minibatch"
    batch_size: int = 256
    max_iters: Optional[int] = None
    init_subset_size: Optional[int] = None
    init_max_iters: int = 100
    tol: float = 1e-4

    def __post_init__(self):
        if self.method not in ("minibatch", "full"):
            raise ValueError(f"unknown clustering method {self.method!r}")
        for name in ("k_base", "k_over"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ValueError(f"{name} must be positive")


@dataclass(frozen=True)
class MetricSettings:
    auc_thresholds: tuple = (0.5, 0.2)
    disc_iou: float = 0.5
    purity_min: float = 0.5
    known_label_iou: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "auc_thresholds", tuple(float(t) for t in self.auc_thresholds))
        for t in self.auc_thresholds + (self.disc_iou, self.purity_min, self.known_label_iou):
            if not 0.0 < t <= 1.0:
                raise ValueError(f"threshold {t} outside (0, 1]")


@dataclass(frozen=True)
class BenchSettings:
    n_values: tuple = (10_000, 50_000, 100_000)
    k_values: tuple = (80, 1000)
    dim: int = 128
    n_centers: int = 80
    noise: float = 0.08
    methods: tuple = ("full", "minibatch")

    def __post_init__(self):
        object.__setattr__(self, "n_values", tuple(int(n) for n in self.n_values))
        object.__setattr__(self, "k_values", tuple(int(k) for k in self.k_values))
        object.__setattr__(self, "methods", tuple(self.methods))
        if not set(self.methods) <= {"full", "minibatch"}:
            raise ValueError(f"unknown methods in {self.methods}")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    drm: DrmParams = field(default_factory=DrmParams)
    contrastive: ContrastiveParams = field(default_factory=ContrastiveParams)
    cluster: ClusterSettings = field(default_factory=ClusterSettings)
    metrics: MetricSettings = field(default_factory=MetricSettings)
    bench: BenchSettings = field(default_factory=BenchSettings)

    @property
    def k_base(self) -> int:
        return self.cluster.k_base or self.world.n_unknown

    @property
    def k_over(self) -> int:
        return self.cluster.k_over or 5 * self.world.n_unknown

    def stage_seed(self, stage: str) -> int:
        """Seed of one stage, split deterministically from the run seed."""
        order = ("world", "embed", "cluster", "bench")
        child = np.random.SeedSequence(self.seed).spawn(len(order))[order.index(stage)]
        return int(child.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed).resolved()

    def resolved(self) -> "RunConfig":
        """Copy whose world and embedder seeds come from the run seed."""
        world = dataclasses.replace(self.world, seed=self.stage_seed("world"))
        contrastive = dataclasses.replace(
            self.contrastive, seed=self.stage_seed("embed"), d_in=self.world.d_in
        )
        return dataclasses.replace(self, world=world, contrastive=contrastive)


def _build(cls, block, where: str, renames: Optional[dict] = None, extra: Optional[dict] = None):
    if block is None:
        block = {}
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    renames = renames or {}
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in block.items():
        name = renames.get(key, key)
        if name not in names:
            raise ConfigError(f"unknown key {where}.{key}")
        kwargs[name] = value
    kwargs.update(extra or {})
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {where}: {exc}") from None


def _profile(block, where, default: DetectorProfile) -> DetectorProfile:
    if block is None:
        return default
    if not isinstance(block, dict):
        raise ConfigError(f"{where} must be a JSON object")
    merged = {**dataclasses.asdict(default), **block}
    return _build(DetectorProfile, merged, where)


def config_from_dict(doc: dict) -> RunConfig:
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    allowed = {"seed", "world", "drm", "contrastive", "cluster", "metrics", "bench"}
    for key in doc:
        if key not in allowed:
            raise ConfigError(f"unknown key {key}")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed < 2**63:
        raise ConfigError("seed must be a non-negative 64-bit integer")
    world_doc = dict(doc.get("world") or {})
    if "seed" in world_doc:
        raise ConfigError("world.seed is derived from the top-level seed")
    aware = _profile(world_doc.pop("aware", None), "world.aware", aware_profile())
    agnostic = _profile(world_doc.pop("agnostic", None), "world.agnostic", agnostic_profile())
    world = _build(WorldConfig, world_doc, "world", extra={"aware": aware, "agnostic": agnostic})
    contrastive_doc = doc.get("contrastive") or {}
    if "lam" in contrastive_doc or "seed" in contrastive_doc or "d_in" in contrastive_doc:
        raise ConfigError("contrastive accepts 'lambda'; seed and d_in are derived")
    cfg = RunConfig(
        seed=seed,
        world=world,
        drm=_build(DrmParams, doc.get("drm"), "drm"),
        contrastive=_build(
            ContrastiveParams, contrastive_doc, "contrastive", renames={"lambda": "lam"},
            extra={"d_in": world.d_in},
        ),
        cluster=_build(ClusterSettings, doc.get("cluster"), "cluster"),
        metrics=_build(MetricSettings, doc.get("metrics"), "metrics"),
        bench=_build(BenchSettings, doc.get("bench"), "bench"),
    )
    if cfg.k_base >= cfg.k_over:
        raise ConfigError(f"k_base={cfg.k_base} must be smaller than k_over={cfg.k_over}")
    return cfg.resolved()


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig().resolved()
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"missing config file {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    return config_from_dict(doc)
