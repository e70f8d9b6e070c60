"""On-disk formats: draw matrices, timing sidecars and the flat run config.

Draw files hold one row per retained iteration with the unconstrained
parameter names as header; floats are written with 17 significant digits so
files round-trip exactly and repeated runs are byte-identical.

The run config is plain ``key = value`` text, one key per line, ``#``
comments allowed. Lists are comma separated. Keys::

    longitudinal, survival, out_dir           input and output paths
    splits, cores, seed, methods              run layout (cores 0 = unlimited)
    model.ns_df, model.longitudinal_covariates, model.random_effects,
    model.survival_covariates, model.association, model.baseline,
    model.n_basis, model.survival
    prior.<field>                             any field of Priors
    chains.n_chains, chains.n_iter, chains.n_warmup, chains.thin,
    chains.adapt_window, chains.keep_random_effects
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .consensus import ConsensusResult, WeightTable
from .model import ModelSpec, Priors
from .sampler import ChainConfig, ChainDraws

__all__ = [
    "ConfigError",
    "RunConfig",
    "read_config",
    "write_config",
    "parse_config",
    "format_config",
    "write_draws",
    "read_draws",
    "write_random_effects",
    "write_timing_sidecar",
    "find_draw_files",
    "load_draw_grid",
    "write_consensus",
    "write_weights",
]

FLOAT_FMT = "%.17g"
_DRAW_RE = re.compile(r"^draws_s(\d+)_c(\d+)\.csv$")


class ConfigError(ValueError):
    """Malformed or inconsistent run configuration."""


@dataclass(frozen=True)
class RunConfig:
    longitudinal: str = "longitudinal.csv"
    survival: str = "survival.csv"
    out_dir: str = "fit"
    splits: int = 1
    cores: int | None = None
    seed: int = 0
    methods: tuple[str, ...] = ("union", "equal", "precision")
    model: ModelSpec = field(default_factory=ModelSpec)
    chains: ChainConfig = field(default_factory=ChainConfig)

    def __post_init__(self):
        if self.splits < 1:
            raise ConfigError("splits must be >= 1")
        if self.cores is not None and self.cores < 1:
            raise ConfigError("cores must be >= 1 (or 0 for unlimited)")
        bad = [m for m in self.methods if m not in ("union", "equal", "precision")]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from union, equal, precision")

    def chain_config(self) -> ChainConfig:
        """Chain settings with the master seed applied."""
        return replace(self.chains, seed=self.seed)


def _as_list(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _as_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


_MODEL_KEYS = {
    "ns_df": int,
    "longitudinal_covariates": _as_list,
    "random_effects": lambda t: None if t.strip().lower() in ("", "none") else _as_list(t),
    "survival_covariates": _as_list,
    "association": str,
    "baseline": str,
    "n_basis": int,
    "survival": _as_bool,
}
_CHAIN_KEYS = {"n_chains": int, "n_iter": int, "n_warmup": int, "thin": int,
               "adapt_window": int, "keep_random_effects": _as_bool}
_PRIOR_KEYS = {f.name: (lambda t: None if t.strip().lower() in ("", "none") else float(t))
               if f.name == "re_df" else float for f in fields(Priors)}
_RUN_KEYS = {"longitudinal": str, "survival": str, "out_dir": str, "splits": int,
             "cores": lambda t: int(t) or None, "seed": int, "methods": _as_list}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    run, model, prior, chains = {}, {}, {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.rpartition(".")
        table = {"": (_RUN_KEYS, run), "model": (_MODEL_KEYS, model),
                 "prior": (_PRIOR_KEYS, prior), "chains": (_CHAIN_KEYS, chains)}.get(section)
        if table is None or name not in table[0]:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            table[1][name] = table[0][name](value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    try:
        spec = ModelSpec(priors=Priors(**prior), **model)
        return RunConfig(model=spec, chains=ChainConfig(**chains), **run)
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def read_config(path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(), str(path))


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_config(cfg: RunConfig) -> str:
    lines = [f"{k} = {_fmt(getattr(cfg, k))}" for k in _RUN_KEYS if k != "cores"]
    lines.insert(4, f"cores = {cfg.cores or 0}")
    lines += [f"model.{k} = {_fmt(getattr(cfg.model, k))}" for k in _MODEL_KEYS]
    lines += [f"prior.{k} = {_fmt(getattr(cfg.model.priors, k))}" for k in _PRIOR_KEYS]
    lines += [f"chains.{k} = {_fmt(getattr(cfg.chains, k))}" for k in _CHAIN_KEYS]
    return "\n".join(lines) + "\n"


def write_config(cfg: RunConfig, path) -> Path:
    path = Path(path)
    path.write_text(format_config(cfg))
    return path


# draws ----------------------------------------------------------------------
def _write_matrix(path: Path, names: Sequence[str], matrix: np.ndarray) -> Path:
    with path.open("w") as fh:
        fh.write(",".join(names) + "\n")
        np.savetxt(fh, np.atleast_2d(matrix), fmt=FLOAT_FMT, delimiter=",")
    return path


def write_draws(draws: ChainDraws, directory) -> Path:
    path = Path(directory) / f"draws_s{draws.subsample}_c{draws.chain}.csv"
    return _write_matrix(path, draws.names, draws.draws)


def read_draws(path) -> tuple[tuple[str, ...], np.ndarray]:
    path = Path(path)
    with path.open() as fh:
        header = fh.readline().strip()
        if not header:
            raise ValueError(f"{path}: empty draw file")
        names = tuple(header.split(","))
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if body.size == 0:
        body = body.reshape(0, len(names))
    if body.shape[1] != len(names):
        raise ValueError(f"{path}: {body.shape[1]} columns for {len(names)} names")
    return names, body


def write_random_effects(draws: ChainDraws, directory) -> Path | None:
    """Posterior mean and SD of every subject's random effects."""
    if draws.re_mean is None or not draws.re_ids:
        return None
    q = draws.re_mean.shape[1]
    path = Path(directory) / f"random_effects_s{draws.subsample}_c{draws.chain}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id"] + [f"mean_b{j + 1}" for j in range(q)] + [f"sd_b{j + 1}" for j in range(q)])
        for i, sid in enumerate(draws.re_ids):
            w.writerow([sid] + [FLOAT_FMT % v for v in draws.re_mean[i]]
                       + [FLOAT_FMT % v for v in draws.re_sd[i]])
    return path


def write_timing_sidecar(chains: Iterable[ChainDraws], directory, subsample: int) -> Path:
    """``timing_s{s}.csv``: wall seconds and block acceptance per chain."""
    chains = list(chains)
    blocks = sorted({k for c in chains for k in c.acceptance})
    path = Path(directory) / f"timing_s{subsample}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "seconds"] + [f"accept_{b}" for b in blocks])
        for c in chains:
            w.writerow([c.chain, repr(float(c.seconds))]
                       + [repr(float(c.acceptance.get(b, float("nan")))) for b in blocks])
    return path


def find_draw_files(directory) -> dict[tuple[int, int], Path]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"draws directory not found: {directory}")
    out = {}
    for p in directory.iterdir():
        m = _DRAW_RE.match(p.name)
        if m:
            out[(int(m.group(1)), int(m.group(2)))] = p
    return dict(sorted(out.items()))


def load_draw_grid(directory) -> list[list[ChainDraws]]:
    """All ``draws_s*_c*.csv`` of ``directory`` as ``[s][k]``; the grid must be
    complete and every file must share names and shape."""
    files = find_draw_files(directory)
    if not files:
        raise ValueError(f"no draw files in {directory}")
    S = 1 + max(s for s, _ in files)
    K = 1 + max(k for _, k in files)
    missing = [(s, k) for s in range(S) for k in range(K) if (s, k) not in files]
    if missing:
        raise ValueError(f"draw files missing for (subsample, chain) {missing}")
    grid = []
    for s in range(S):
        row = []
        for k in range(K):
            names, mat = read_draws(files[(s, k)])
            row.append(ChainDraws(names, mat, s, k))
        grid.append(row)
    return grid


def write_consensus(result: ConsensusResult, directory) -> list[Path]:
    directory = Path(directory)
    return [_write_matrix(directory / f"consensus_{result.method}_c{k}.csv", result.names, chain)
            for k, chain in enumerate(result.chains)]


def write_weights(table: WeightTable, directory) -> list[Path]:
    """``weights_{method}.csv`` and, for chain-pooled precision weights,
    ``weights_{method}_pooled.csv``."""
    directory = Path(directory)
    path = directory / f"weights_{table.method}.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["subsample", "chain", "parameter", "weight"])
        for s, k, name, weight in table.rows():
            w.writerow([s, k, name, FLOAT_FMT % weight])
    out = [path]
    if table.pooled is not None:
        pooled = directory / f"weights_{table.method}_pooled.csv"
        with pooled.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["subsample", "parameter", "weight"])
            for s in range(table.pooled.shape[0]):
                for p, name in enumerate(table.names):
                    w.writerow([s, name, FLOAT_FMT % table.pooled[s, p]])
        out.append(pooled)
    return out
