"""JSON configuration schema: parsing, validation, and component building."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .forest import ForestMatching
from .outcome import Adjuster, PolynomialAdjuster, ZeroAdjuster
from .smoothers import KernelMatching, LocalLinearMatching, Smoother, WnnMatching


class ConfigError(ValueError):
    """Configuration rejected; the message carries a JSON-pointer-style path."""


COMMANDS = ("estimate", "simulate", "weights", "bound", "forest-diag")
SMOOTHERS = ("kernel", "wnn", "local-linear", "forest")


@dataclass(frozen=True)
class SmootherConfig:
    type: str = "kernel"
    bandwidth: Optional[object] = None  # scalar h, per-axis list, or full matrix
    scale: float = 1.0
    family: str = "gaussian"
    gamma: Optional[tuple] = None
    n_neighbors: Optional[int] = None
    trees: Optional[int] = None
    subsample: Optional[int] = None
    min_leaf: int = 8
    alpha: float = 0.25
    phi: float = 0.9


@dataclass(frozen=True)
class AdjusterConfig:
    type: str = "polynomial"
    degree: int = 2


@dataclass(frozen=True)
class ModeConfig:
    type: str = "full"
    folds: Optional[int] = None
    variance: str = "full"


@dataclass(frozen=True)
class RunConfig:
    """Validated run description shared by all CLI commands."""

    command: Optional[str] = None
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    adjuster: AdjusterConfig = field(default_factory=AdjusterConfig)
    mode: ModeConfig = field(default_factory=ModeConfig)
    seed: int = 0
    dgp: Optional[str] = None
    n_grid: Optional[tuple] = None
    replications: Optional[int] = None
    forest_diag: Optional[dict] = None
    data_path: Optional[str] = None
    out_path: Optional[str] = None

    def to_dict(self) -> dict:
        out = asdict(self)
        fields_by_type = {
            "kernel": ("type", "bandwidth", "scale", "family"),
            "local-linear": ("type", "bandwidth", "scale", "family"),
            "wnn": ("type", "gamma", "n_neighbors"),
            "forest": ("type", "trees", "subsample", "min_leaf", "alpha", "phi"),
        }
        keep = fields_by_type[self.smoother.type]
        out["smoother"] = {
            k: v for k, v in out["smoother"].items() if k in keep and v is not None
        }
        if self.smoother.gamma is not None:
            out["smoother"]["gamma"] = list(self.smoother.gamma)
        out["n_grid"] = list(self.n_grid) if self.n_grid else None
        return {k: v for k, v in out.items() if v is not None}


def _reject_unknown(obj: dict, allowed: set, path: str) -> None:
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"{path}/{sorted(unknown)[0]}: unknown key")


def _need(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigError(f"{path}/{key}: missing required key")
    return obj[key]


def _as_int(value, path: str, minimum: Optional[int] = None) -> int:
    if not isinstance(value, int) or isinstance(value, bool):
        raise ConfigError(f"{path}: must be an integer")
    if minimum is not None and value < minimum:
        raise ConfigError(f"{path}: must be >= {minimum}")
    return value


def _as_number(value, path: str, positive: bool = False) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: must be a number")
    if positive and value <= 0:
        raise ConfigError(f"{path}: must be positive")
    return float(value)


def _parse_smoother(obj, path: str) -> SmootherConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: must be an object")
    kind = _need(obj, "type", path)
    if kind not in SMOOTHERS:
        raise ConfigError(f"{path}/type: must be one of {list(SMOOTHERS)}")
    if kind in ("kernel", "local-linear"):
        _reject_unknown(obj, {"type", "bandwidth", "scale", "family"}, path)
        bandwidth = obj.get("bandwidth")
        if bandwidth is not None:
            arr = np.asarray(bandwidth, dtype=float)
            if arr.ndim > 2 or not np.isfinite(arr).all() or (arr.ndim == 0 and arr <= 0):
                raise ConfigError(f"{path}/bandwidth: must be a positive length or matrix")
            bandwidth = arr.tolist()
        scale = _as_number(obj.get("scale", 1.0), f"{path}/scale", positive=True)
        family = obj.get("family", "gaussian")
        if family not in ("gaussian", "epanechnikov-product", "uniform-box"):
            raise ConfigError(f"{path}/family: unknown kernel family {family!r}")
        return SmootherConfig(type=kind, bandwidth=bandwidth, scale=scale, family=family)
    if kind == "wnn":
        _reject_unknown(obj, {"type", "M", "gamma"}, path)
        gamma = obj.get("gamma")
        m = obj.get("M")
        if gamma is None and m is None:
            raise ConfigError(f"{path}: wnn needs M or gamma")
        if gamma is not None:
            if not isinstance(gamma, list) or not gamma:
                raise ConfigError(f"{path}/gamma: must be a nonempty array")
            g = [
                _as_number(v, f"{path}/gamma/{i}")
                for i, v in enumerate(gamma)
            ]
            if any(v < 0 for v in g):
                raise ConfigError(f"{path}/gamma: entries must be nonnegative")
            if abs(math.fsum(g) - 1.0) > 1e-12:
                raise ConfigError(f"{path}/gamma: gamma must sum to 1")
            if m is not None and m != len(g):
                raise ConfigError(f"{path}/M: disagrees with len(gamma)")
            return SmootherConfig(type=kind, gamma=tuple(g), n_neighbors=len(g))
        m = _as_int(m, f"{path}/M", minimum=1)
        return SmootherConfig(type=kind, gamma=tuple([1.0 / m] * m), n_neighbors=m)
    # forest
    _reject_unknown(
        obj, {"type", "trees", "subsample", "min_leaf", "alpha", "phi"}, path
    )
    trees = obj.get("trees")
    if trees is not None:
        trees = _as_int(trees, f"{path}/trees", minimum=1)
    subsample = obj.get("subsample")
    if subsample is not None:
        subsample = _as_int(subsample, f"{path}/subsample", minimum=1)
    min_leaf = _as_int(obj.get("min_leaf", 8), f"{path}/min_leaf", minimum=1)
    alpha = _as_number(obj.get("alpha", 0.25), f"{path}/alpha", positive=True)
    if alpha > 0.5:
        raise ConfigError(f"{path}/alpha: must lie in (0, 0.5]")
    phi = _as_number(obj.get("phi", 0.9), f"{path}/phi", positive=True)
    if phi >= 1.0:
        raise ConfigError(f"{path}/phi: must lie in (0, 1)")
    return SmootherConfig(
        type=kind,
        trees=trees,
        subsample=subsample,
        min_leaf=min_leaf,
        alpha=alpha,
        phi=phi,
    )


def _parse_adjuster(obj, path: str) -> AdjusterConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: must be an object")
    kind = _need(obj, "type", path)
    if kind == "polynomial":
        _reject_unknown(obj, {"type", "degree"}, path)
        return AdjusterConfig(type=kind, degree=_as_int(obj.get("degree", 2), f"{path}/degree", minimum=0))
    if kind == "zero":
        _reject_unknown(obj, {"type"}, path)
        return AdjusterConfig(type=kind, degree=0)
    raise ConfigError(f"{path}/type: must be 'polynomial' or 'zero'")


def _parse_mode(obj, path: str) -> ModeConfig:
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: must be an object")
    kind = _need(obj, "type", path)
    if kind == "full":
        _reject_unknown(obj, {"type"}, path)
        return ModeConfig(type="full")
    if kind == "crossfit":
        _reject_unknown(obj, {"type", "folds", "variance"}, path)
        folds = _as_int(_need(obj, "folds", path), f"{path}/folds", minimum=2)
        variance = obj.get("variance", "full")
        if variance not in ("full", "foldwise"):
            raise ConfigError(f"{path}/variance: must be 'full' or 'foldwise'")
        return ModeConfig(type="crossfit", folds=folds, variance=variance)
    raise ConfigError(f"{path}/type: must be 'full' or 'crossfit'")


def parse_config(text: str) -> RunConfig:
    """Parse and validate a JSON configuration document.

    Unknown keys are rejected; defaults are filled in so the returned config
    echoes the complete effective settings.
    """
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"/: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError("/: top level must be an object")
    _reject_unknown(
        raw,
        {
            "command",
            "smoother",
            "adjuster",
            "mode",
            "seed",
            "dgp",
            "n_grid",
            "replications",
            "forest_diag",
        },
        "",
    )
    command = raw.get("command")
    if command is not None and command not in COMMANDS:
        raise ConfigError(f"/command: must be one of {list(COMMANDS)}")
    smoother = _parse_smoother(raw.get("smoother", {"type": "kernel"}), "/smoother")
    adjuster = _parse_adjuster(raw.get("adjuster", {"type": "polynomial"}), "/adjuster")
    mode = _parse_mode(raw.get("mode", {"type": "full"}), "/mode")
    seed = _as_int(raw.get("seed", 0), "/seed", minimum=0)
    dgp = raw.get("dgp")
    if dgp is not None and not isinstance(dgp, str):
        raise ConfigError("/dgp: must be a string id")
    n_grid = raw.get("n_grid")
    if n_grid is not None:
        if not isinstance(n_grid, list) or not n_grid:
            raise ConfigError("/n_grid: must be a nonempty array")
        n_grid = tuple(_as_int(v, f"/n_grid/{i}", minimum=2) for i, v in enumerate(n_grid))
    replications = raw.get("replications")
    if replications is not None:
        replications = _as_int(replications, "/replications", minimum=1)
    forest_diag = raw.get("forest_diag")
    if forest_diag is not None:
        if not isinstance(forest_diag, dict):
            raise ConfigError("/forest_diag: must be an object")
        _reject_unknown(
            forest_diag,
            {"n", "dim", "s_grid", "trees", "min_leaf", "alpha", "phi", "n_query"},
            "/forest_diag",
        )
    return RunConfig(
        command=command,
        smoother=smoother,
        adjuster=adjuster,
        mode=mode,
        seed=seed,
        dgp=dgp,
        n_grid=n_grid,
        replications=replications,
        forest_diag=forest_diag,
    )


def serialize_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_dict(), indent=2)


def build_smoother(cfg: RunConfig) -> Smoother:
    sc = cfg.smoother
    if sc.type == "kernel":
        return KernelMatching(bandwidth=sc.bandwidth, scale=sc.scale, family=sc.family)
    if sc.type == "local-linear":
        return LocalLinearMatching(bandwidth=sc.bandwidth, scale=sc.scale, family=sc.family)
    if sc.type == "wnn":
        return WnnMatching(n_neighbors=sc.n_neighbors, gamma=list(sc.gamma))
    return ForestMatching(
        n_trees=sc.trees,
        subsample_size=sc.subsample,
        min_leaf=sc.min_leaf,
        split_balance=sc.alpha,
        axis_balance=sc.phi,
        seed=cfg.seed,
    )


def build_adjuster(cfg: RunConfig) -> Adjuster:
    if cfg.adjuster.type == "zero":
        return ZeroAdjuster()
    return PolynomialAdjuster(cfg.adjuster.degree)
