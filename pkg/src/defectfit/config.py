"""TOML run configuration: parsing, strict validation, and hashing.

Every artifact the CLI writes embeds the SHA-256 of the config file it was
produced from, so outputs can always be traced back to their inputs.
Unknown keys are rejected with the offending key named.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

try:
    import tomllib  # py >= 3.11
except ModuleNotFoundError:  # pragma: no cover
    import tomli as tomllib

from .errors import DefectFitError
from .fit import LossWeights
from .lattice import BravaisSpec, INTERSTITIAL, VACANCY
from .potential import EamToyPotential, calibrate_r0
from .surrogate import BasisSpec

__all__ = ["ConfigError", "RunConfig", "load_config", "config_hash"]


class ConfigError(DefectFitError):
    pass


_SCHEMA = {
    "schema_version": None,
    "lattice": {"dimension", "cell_matrix", "N", "defects"},
    "potential": {"pair_depth", "pair_stiffness", "pair_length", "density_decay",
                  "embed_sqrt", "embed_quad", "cutoff_factor", "taper_width_factor"},
    "basis": {"n_radial", "m_max", "r_cut", "ladder"},
    "training": {"n_train", "n_test", "delta", "seed", "L_values"},
    "weights": {"energy", "force", "per_kind"},
    "fit": {"rtol"},
    "minimizer": {"g_tol", "max_iter"},
    "study": {"simulation_N", "core_N", "defect_cases"},
    "output": {"directory"},
}


@dataclass
class TrainingConfig:
    n_train: int = 200
    n_test: int = 50
    delta: float = 0.01
    seed: int = 42
    L_values: tuple = (4, 5, 6, 7, 8)


@dataclass
class StudyConfig:
    simulation_N: int = 60
    core_N: int = 40
    defect_cases: tuple = ((VACANCY, VACANCY),)


@dataclass
class LatticeConfig:
    N: int = 10
    defects: tuple = ()          # (kind, (i, j)) pairs


@dataclass
class RunConfig:
    potential: EamToyPotential
    bravais: BravaisSpec
    basis_ladder: tuple
    training: TrainingConfig
    weights: LossWeights
    fit_rtol: float
    minimizer_g_tol: float
    minimizer_max_iter: int
    study: StudyConfig
    lattice: LatticeConfig
    output_directory: str
    sha256: str
    raw: dict = field(repr=False, default_factory=dict)


def config_hash(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def _check_keys(doc: dict):
    for section, content in doc.items():
        if section not in _SCHEMA:
            raise ConfigError(f"unknown config section: {section!r}")
        allowed = _SCHEMA[section]
        if allowed is None:
            continue
        if not isinstance(content, dict):
            raise ConfigError(f"section {section!r} must be a table")
        for key in content:
            if key not in allowed:
                raise ConfigError(f"unknown config key: {section}.{key}")


def _defect_list(entries):
    out = []
    for e in entries:
        kind = e.get("kind")
        if kind not in (VACANCY, INTERSTITIAL):
            raise ConfigError(f"unknown defect kind in lattice.defects: {kind!r}")
        cell = e.get("cell", (0, 0))
        if len(e.keys() - {"kind", "cell"}) > 0:
            raise ConfigError(
                f"unknown config key in lattice.defects entry: {sorted(e.keys() - {'kind', 'cell'})[0]}")
        out.append((kind, (int(cell[0]), int(cell[1]))))
    return tuple(out)


def load_config(path) -> RunConfig:
    """Parse and validate a TOML run configuration."""
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config parse error: {exc}") from exc
    _check_keys(doc)
    if doc.get("schema_version", 1) != 1:
        raise ConfigError(f"unsupported schema_version {doc.get('schema_version')}")

    p = doc.get("potential", {})
    cutoff_factor = p.get("cutoff_factor", 1.9)
    taper_factor = p.get("taper_width_factor", 0.4)
    pair_length = p.get("pair_length", 1.0)
    potential = EamToyPotential(
        pair_depth=p.get("pair_depth", 1.0),
        pair_stiffness=p.get("pair_stiffness", 4.0),
        pair_length=pair_length,
        density_decay=p.get("density_decay", 3.0),
        embed_sqrt=p.get("embed_sqrt", -1.5),
        embed_quad=p.get("embed_quad", 1.0),
        r_cut=cutoff_factor * pair_length,
        taper_width=taper_factor * pair_length,
    )

    lat = doc.get("lattice", {})
    if lat.get("dimension", 2) != 2:
        raise ConfigError("lattice.dimension must be 2")
    r0 = calibrate_r0(potential)
    if "cell_matrix" in lat:
        bravais = BravaisSpec(np.array(lat["cell_matrix"], dtype=float), r0)
    else:
        bravais = BravaisSpec.triangular(r0)
    lattice_cfg = LatticeConfig(N=int(lat.get("N", 10)),
                                defects=_defect_list(lat.get("defects", [])))

    b = doc.get("basis", {})
    r_cut = float(b.get("r_cut", potential.r_cut))
    ladder = []
    for order, degree in b.get("ladder", [[3, 12]]):
        ladder.append(BasisSpec(order=int(order), max_degree=int(degree),
                                n_radial=int(b.get("n_radial", 8)),
                                r_cut=r_cut, m_max=int(b.get("m_max", 6))))

    t = doc.get("training", {})
    training = TrainingConfig(
        n_train=int(t.get("n_train", 200)),
        n_test=int(t.get("n_test", 50)),
        delta=float(t.get("delta", 0.01)),
        seed=int(t.get("seed", 42)),
        L_values=tuple(int(v) for v in t.get("L_values", (4, 5, 6, 7, 8))),
    )

    w = doc.get("weights", {})
    per_kind = {}
    for kind, entry in w.get("per_kind", {}).items():
        if kind not in (VACANCY, INTERSTITIAL):
            raise ConfigError(f"unknown config key: weights.per_kind.{kind}")
        for k in entry.keys() - {"energy", "force"}:
            raise ConfigError(f"unknown config key: weights.per_kind.{kind}.{k}")
        per_kind[kind] = (float(entry["energy"]), float(entry["force"]))
    weights = LossWeights(energy=float(w.get("energy", 100.0)),
                          force=float(w.get("force", 1.0)), per_kind=per_kind)

    s = doc.get("study", {})
    cases = []
    for case in s.get("defect_cases", [[VACANCY, VACANCY]]):
        kinds = tuple(case)
        for k in kinds:
            if k not in (VACANCY, INTERSTITIAL):
                raise ConfigError(f"unknown defect kind in study.defect_cases: {k!r}")
        cases.append(kinds)
    study = StudyConfig(simulation_N=int(s.get("simulation_N", 60)),
                        core_N=int(s.get("core_N", 40)),
                        defect_cases=tuple(cases))

    m = doc.get("minimizer", {})
    f = doc.get("fit", {})
    return RunConfig(
        potential=potential,
        bravais=bravais,
        basis_ladder=tuple(ladder),
        training=training,
        weights=weights,
        fit_rtol=float(f.get("rtol", 1e-6)),
        minimizer_g_tol=float(m.get("g_tol", 1e-8)),
        minimizer_max_iter=int(m.get("max_iter", 20000)),
        study=study,
        lattice=lattice_cfg,
        output_directory=str(doc.get("output", {}).get("directory", "out")),
        sha256=config_hash(path),
        raw=doc,
    )
