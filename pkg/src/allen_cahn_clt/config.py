"""Strict YAML run configuration and the run manifest."""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .grid import GridSpec
from .propagators import StepScheme
from .rescaling import SimParams, TestFunction


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class GridBlock(_Strict):
    d: int = 3
    n: int = 32
    L: float = 0.64
    laplacian: Literal["lattice", "spectral"] = "lattice"


class SimBlock(_Strict):
    lam: Union[float, List[float]] = 1.0
    eps: Union[float, List[float]] = 0.1
    base_width: float = 0.4
    dt: float = 5e-5
    dt_max: Optional[float] = 4e-4
    growth: float = 0.1
    truncation: Optional[float] = None
    dealias: bool = False
    t_list: List[float] = Field(default_factory=lambda: [0.0064, 0.0128, 0.0256])
    s_list: List[float] = Field(default_factory=lambda: [0.0, 1.0, 2.0])
    phi_kind: Literal["gaussian_bump", "bump"] = "gaussian_bump"
    phi_width: float = 0.08

    @field_validator("t_list")
    @classmethod
    def _positive_times(cls, v):
        if not v or min(v) <= 0:
            raise ValueError("t_list must be non-empty and strictly positive")
        return sorted(v)

    @property
    def lams(self):
        return list(self.lam) if isinstance(self.lam, list) else [self.lam]

    @property
    def epss(self):
        return list(self.eps) if isinstance(self.eps, list) else [self.eps]


class EnsembleBlock(_Strict):
    n_replicas: int = 512
    seed: int = Field(default=0, ge=0, lt=2**64)
    n_batches: int = 32
    workers: int = 1
    chunk: int = 16


class RunConfig(_Strict):
    name: str = "experiment"
    grid: GridBlock = GridBlock()
    sim: SimBlock = SimBlock()
    ensemble: EnsembleBlock = EnsembleBlock()
    suites: List[str] = Field(default_factory=list)
    output: str = "results"

    def to_yaml(self):
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True)

    def digest(self):
        blob = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def with_overrides(self, seed=None, workers=None, output=None, suites=None):
        data = self.model_dump()
        if seed is not None:
            data["ensemble"]["seed"] = seed
        if workers is not None:
            data["ensemble"]["workers"] = workers
        if output is not None:
            data["output"] = output
        if suites is not None:
            data["suites"] = list(suites)
        return RunConfig.model_validate(data)

    def grid_spec(self):
        g = self.grid
        return GridSpec(g.d, g.n, g.L, laplacian=g.laplacian)

    def scheme(self):
        s = self.sim
        return StepScheme(s.dt, s.dt_max, s.growth, s.truncation, s.dealias)

    def params(self, lam=None, eps=None):
        s = self.sim
        lam = s.lams[0] if lam is None else lam
        eps = s.epss[0] if eps is None else eps
        return SimParams(self.grid_spec(), lam, eps, s.base_width, self.scheme(),
                         tuple(s.t_list), tuple(s.s_list))

    def test_function(self):
        return TestFunction.make(self.grid_spec(), self.sim.phi_kind, self.sim.phi_width)


def parse_config(text):
    try:
        data = yaml.safe_load(text) if text.strip() else {}
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a mapping")
        return RunConfig.model_validate(data)
    except (yaml.YAMLError, ValidationError) as exc:
        raise ConfigError(str(exc)) from None


def load_config(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text)


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out_dir, config, command, verdicts=None, timing=None, version="0.1.0"):
    """Write ``manifest.json`` last; it lists every other file with its digest."""
    out_dir = Path(out_dir)
    files = {}
    for p in sorted(out_dir.rglob("*")):
        if p.is_file() and p.name != "manifest.json":
            files[str(p.relative_to(out_dir))] = file_digest(p)
    manifest = {"command": command, "config": config.model_dump(mode="json"),
                "config_hash": config.digest(), "version": version,
                "verdicts": verdicts or {}, "files": files, "timing": timing or {}}
    tmp = out_dir / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / "manifest.json")
    return manifest
