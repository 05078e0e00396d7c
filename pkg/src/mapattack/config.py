"""Run configuration: one YAML (or JSON) file plus environment overrides for secrets.

Schema (all sections optional except ``seed``)::

    seed: 0
    out: runs/demo
    suite: {n_asym: 6, n_sym: 4, asym_kinds: [fork, merge, split], sym_kinds: [straight, intersection]}
    scenes: [path/to/scene_dir, ...]          # instead of suite
    classifier: {dk_thre: 0.3, kbar_thre: 0.15, window_len: 5, spacing: 0.5}
    ranking: {phi_max_deg: null, top_n: 20, longitudinal_step: 2.0}
    objective: {kind: straighten, alpha: 1.0, beta: 1.0}
    attack: {vector: blinding, strategy: ranked, budget: 400, symmetric: skip, pgd: {...}}
    oracle: {kind: surrogate, command: [...], timeout: 30}
    vlm: {enabled: false, endpoint: null, model: vlm, token_env: MAPATTACK_VLM_TOKEN}
    eval: {thresholds: [0.5, 1.0, 1.5], overlays: true}
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .attack.objectives import KINDS as OBJECTIVE_KINDS
from .attack.pgd import PgdParams
from .attack.ranking import RankingParams, default_phi_max
from .classify import RuleThresholds
from .errors import ConfigError, MapAttackError
from .scene import ASYMMETRIC_KINDS
from .suite import SYMMETRIC_KINDS

VECTORS = ("blinding", "patch")
STRATEGIES = ("ranked", "random", "pso")
SYMMETRIC_MODES = ("skip", "scene_flip", "untargeted")


class UsageError(MapAttackError, ValueError):
    """Invalid user choice (unknown verb, kind or objective); exit code 2."""


DEFAULTS = {
    "out": "runs/default",
    "suite": {"n_asym": 6, "n_sym": 4, "asym_kinds": list(ASYMMETRIC_KINDS), "sym_kinds": list(SYMMETRIC_KINDS)},
    "scenes": None,
    "classifier": {},
    "ranking": {"phi_max_deg": None, "top_n": 20, "longitudinal_step": 2.0},
    "objective": {"kind": "straighten", "alpha": 1.0, "beta": 1.0},
    "attack": {"vector": "blinding", "strategy": "ranked", "budget": 400, "symmetric": "skip", "pgd": {}},
    "oracle": {"kind": "surrogate", "command": None, "timeout": 30.0},
    "vlm": {"enabled": False, "endpoint": None, "model": "vlm", "token_env": "MAPATTACK_VLM_TOKEN"},
    "eval": {"thresholds": [0.5, 1.0, 1.5], "overlays": True},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    seed: int
    data: dict = field(default_factory=dict)
    source: str | None = None

    @classmethod
    def from_dict(cls, raw: dict, source: str | None = None) -> "RunConfig":
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping")
        unknown = set(raw) - set(DEFAULTS) - {"seed"}
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        if "seed" not in raw or raw["seed"] is None:
            raise ConfigError("config must set 'seed'")
        try:
            seed = int(raw["seed"])
        except (TypeError, ValueError):
            raise ConfigError(f"seed must be an integer, got {raw['seed']!r}") from None
        data = _merge(DEFAULTS, {k: v for k, v in raw.items() if k != "seed"})
        cfg = cls(seed, data, source)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            raw = yaml.safe_load(p.read_text(encoding="utf-8"))
        except yaml.YAMLError as e:
            raise ConfigError(f"{p}: cannot parse config ({e})") from None
        cfg = cls.from_dict(raw or {}, str(p))
        scenes = cfg.data.get("scenes")
        if scenes:
            # scene paths are relative to the config file
            cfg.data["scenes"] = [str((p.parent / s).resolve()) if not Path(s).is_absolute() else s
                                  for s in scenes]
            cfg.validate()
        return cfg

    def with_overrides(self, **kw) -> "RunConfig":
        data = copy.deepcopy(self.data)
        seed = self.seed
        if kw.get("seed") is not None:
            seed = int(kw["seed"])
        if kw.get("out") is not None:
            data["out"] = str(kw["out"])
        if kw.get("oracle") is not None:
            data["oracle"]["kind"] = kw["oracle"]
        if kw.get("vlm") is not None:
            data["vlm"]["enabled"] = kw["vlm"] == "on"
        cfg = RunConfig(seed, data, self.source)
        cfg.validate()
        return cfg

    def validate(self):
        d = self.data
        suite = d["suite"]
        for k in suite.get("asym_kinds", []):
            if k not in ASYMMETRIC_KINDS:
                raise UsageError(f"unknown asymmetric road kind {k!r}; choose from {ASYMMETRIC_KINDS}")
        for k in suite.get("sym_kinds", []):
            if k not in SYMMETRIC_KINDS:
                raise UsageError(f"unknown symmetric road kind {k!r}; choose from {SYMMETRIC_KINDS}")
        if int(suite.get("n_asym", 0)) < 0 or int(suite.get("n_sym", 0)) < 0:
            raise ConfigError("suite counts must be >= 0")
        if d["scenes"]:
            for s in d["scenes"]:
                if not Path(s).exists():
                    raise ConfigError(f"scene path does not exist: {s}")
        if d["objective"]["kind"] not in OBJECTIVE_KINDS:
            raise UsageError(f"unknown objective kind {d['objective']['kind']!r}; choose from {OBJECTIVE_KINDS}")
        a = d["attack"]
        if a["vector"] not in VECTORS:
            raise UsageError(f"unknown attack vector {a['vector']!r}; choose from {VECTORS}")
        if a["strategy"] not in STRATEGIES:
            raise UsageError(f"unknown strategy {a['strategy']!r}; choose from {STRATEGIES}")
        if a["symmetric"] not in SYMMETRIC_MODES:
            raise UsageError(f"attack.symmetric must be one of {SYMMETRIC_MODES}")
        if int(a["budget"]) < 1:
            raise ConfigError("attack.budget must be >= 1")
        if d["oracle"]["kind"] not in ("surrogate", "external"):
            raise UsageError(f"unknown oracle kind {d['oracle']['kind']!r}")
        if d["oracle"]["kind"] == "external" and not d["oracle"].get("command"):
            raise ConfigError("oracle.kind=external needs oracle.command")
        if d["vlm"]["enabled"] and not d["vlm"].get("endpoint"):
            raise ConfigError("vlm.enabled needs vlm.endpoint")
        th = list(d["eval"]["thresholds"])
        if not th or th != sorted(th) or th[0] <= 0:
            raise ConfigError("eval.thresholds must be positive and ascending")
        # constructing the parameter objects runs their own checks
        self.thresholds()
        self.ranking_params()
        self.pgd_params()

    # typed views
    @property
    def out(self) -> Path:
        return Path(self.data["out"])

    def thresholds(self) -> RuleThresholds:
        try:
            return RuleThresholds(**self.data["classifier"])
        except TypeError as e:
            raise ConfigError(f"classifier: {e}") from None

    def ranking_params(self) -> RankingParams:
        r = dict(self.data["ranking"])
        deg = r.pop("phi_max_deg", None)
        phi = math.radians(deg) if deg is not None else default_phi_max(self.data["attack"]["vector"])
        for k in ("lateral_offsets", "heights"):
            if k in r:
                r[k] = tuple(r[k])
        try:
            return RankingParams(phi_max=phi, **r)
        except TypeError as e:
            raise ConfigError(f"ranking: {e}") from None

    def pgd_params(self) -> PgdParams:
        p = dict(self.data["attack"].get("pgd") or {})
        if "cell_grid" in p:
            p["cell_grid"] = tuple(p["cell_grid"])
        p.setdefault("seed", self.seed)
        try:
            return PgdParams(**p)
        except TypeError as e:
            raise ConfigError(f"attack.pgd: {e}") from None

    def snapshot(self) -> dict:
        return {"seed": self.seed, **self.data}

    def dumps(self) -> str:
        return json.dumps(self.snapshot(), indent=1, sort_keys=True)
