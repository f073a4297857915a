"""Dataset loading/validation, sample persistence, and run manifests.

All real values are rendered with 17 significant digits so CSV round-trips
are bit-exact for 64-bit floats. The manifest is written last; a missing
manifest entry marks a partial write.
"""

from __future__ import annotations

import csv
import gzip
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import Adjacency, GridGeometry, build_adjacency
from .mcmc import PosteriorSamples, SamplerConfig
from .model import PriorConfig, SpeciesDataset, dataset_from_records

log = logging.getLogger(__name__)


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.17g}"
    return str(x)


class LoadError(ValueError):
    """Dataset validation failure, carrying file and line context."""

    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")


def _open_text(path, mode="rt"):
    path = str(path)
    if path.endswith(".gz"):
        return gzip.open(path, mode)
    return open(path, mode, newline="" if "w" in mode else None)


def write_csv(path, header: list[str], rows, gzip_output: bool = False) -> Path:
    path = Path(str(path) + (".gz" if gzip_output and not str(path).endswith(".gz") else ""))
    with _open_text(path, "wt") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def _read_rows(path, expected_header: list[str]):
    with _open_text(path) as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise LoadError(path, 1, "empty file")
        if [h.strip() for h in header[:len(expected_header)]] != expected_header:
            raise LoadError(path, 1,
                            f"expected header {expected_header}, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if row:
                yield lineno, row


# ---- dataset files -----------------------------------------------------------

def load_grid(path) -> GridGeometry:
    """CSV `site_id,x,y,region_id`, 0-based contiguous site ids."""
    sites = {}
    for lineno, row in _read_rows(path, ["site_id", "x", "y", "region_id"]):
        try:
            sid, x, y, rid = int(row[0]), float(row[1]), float(row[2]), int(row[3])
        except ValueError as exc:
            raise LoadError(path, lineno, f"bad grid row: {exc}") from None
        if sid in sites:
            raise LoadError(path, lineno, f"duplicate site_id {sid}")
        sites[sid] = (x, y, rid)
    m = len(sites)
    if sorted(sites) != list(range(m)):
        raise LoadError(path, 0, "site_ids must be contiguous 0..m-1")
    centroids = np.array([[sites[j][0], sites[j][1]] for j in range(m)])
    region = np.array([sites[j][2] for j in range(m)], dtype=np.int64)
    return GridGeometry(centroids=centroids, site_region=region)


def load_edges(path) -> np.ndarray:
    edges = []
    for lineno, row in _read_rows(path, ["site_a", "site_b"]):
        try:
            edges.append((int(row[0]), int(row[1])))
        except ValueError as exc:
            raise LoadError(path, lineno, f"bad edge row: {exc}") from None
    return np.array(edges, dtype=np.int64).reshape(-1, 2)


def _load_covariates(path, prefix: str, m: int) -> np.ndarray:
    rows: dict[int, list[float]] = {}
    width = None
    for lineno, row in _read_rows(path, ["site_id"]):
        try:
            sid = int(row[0])
            vals = [float(v) for v in row[1:]]
        except ValueError as exc:
            raise LoadError(path, lineno, f"bad covariate row: {exc}") from None
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise LoadError(path, lineno, "ragged covariate row")
        if not (0 <= sid < m):
            raise LoadError(path, lineno, f"unknown site_id {sid}")
        if abs(sum(vals) - 1.0) > 1e-6:
            raise LoadError(path, lineno,
                            f"{prefix} row sums to {sum(vals)!r}, tolerance 1e-6")
        rows[sid] = vals
    if len(rows) != m:
        raise LoadError(path, 0, f"covariates present for {len(rows)} of {m} sites")
    return np.array([rows[j] for j in range(m)])


def load_dataset(grid_path, obs_path, culls_path, x_path, g_path,
                 edges_path=None) -> tuple[GridGeometry, Adjacency, SpeciesDataset]:
    """Load and cross-validate all dataset files; all-or-nothing."""
    grid = load_grid(grid_path)
    m = grid.n_sites
    if edges_path:
        adj = build_adjacency(grid, rule="explicit-edge-list",
                              edges=load_edges(edges_path))
    else:
        adj = build_adjacency(grid, rule="rook-lattice")
    observations = []
    max_species = -1
    for lineno, row in _read_rows(obs_path, ["species", "site_id", "visit", "count"]):
        try:
            sp, sid, _visit, count = (int(row[0]), int(row[1]), int(row[2]), int(row[3]))
        except ValueError as exc:
            raise LoadError(obs_path, lineno, f"bad observation row: {exc}") from None
        if not (0 <= sid < m):
            raise LoadError(obs_path, lineno, f"unknown site_id {sid}")
        if count < 0:
            raise LoadError(obs_path, lineno, "negative count")
        max_species = max(max_species, sp)
        observations.append((sp, sid, count))
    culls = []
    region_lut = {int(r): i for i, r in enumerate(grid.region_ids)}
    for lineno, row in _read_rows(culls_path, ["species", "region_id", "cull_count"]):
        try:
            sp, rid, count = int(row[0]), int(row[1]), int(row[2])
        except ValueError as exc:
            raise LoadError(culls_path, lineno, f"bad cull row: {exc}") from None
        if rid not in region_lut:
            raise LoadError(culls_path, lineno, f"unknown region_id {rid}")
        max_species = max(max_species, sp)
        culls.append((sp, region_lut[rid], count))
    n_species = max_species + 1
    if n_species < 1:
        raise LoadError(obs_path, 0, "no species present in observations or culls")
    X = _load_covariates(x_path, "X", m)
    G = _load_covariates(g_path, "G", m)
    try:
        dataset = dataset_from_records(n_species, m, grid.n_regions,
                                       observations, culls, X, G)
    except ValueError as exc:
        raise LoadError(culls_path, 0, str(exc)) from None
    return grid, adj, dataset


def save_dataset(outdir, grid: GridGeometry, adj: Adjacency,
                 dataset: SpeciesDataset) -> list[Path]:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    files = []
    files.append(write_csv(
        outdir / "grid.csv", ["site_id", "x", "y", "region_id"],
        ((j, grid.centroids[j, 0], grid.centroids[j, 1], grid.site_region[j])
         for j in range(grid.n_sites))))
    files.append(write_csv(outdir / "edges.csv", ["site_a", "site_b"],
                           adj.edge_list()))
    def obs_rows():
        for i in range(dataset.n_species):
            for j in range(dataset.n_sites):
                lo, hi = dataset.obs_ptr[i, j], dataset.obs_ptr[i, j + 1]
                for t, c in enumerate(dataset.obs_counts[lo:hi]):
                    yield (i, j, t, c)
    files.append(write_csv(outdir / "observations.csv",
                           ["species", "site_id", "visit", "count"], obs_rows()))
    files.append(write_csv(
        outdir / "culls.csv", ["species", "region_id", "cull_count"],
        ((i, grid.region_ids[k], dataset.culls[i, k])
         for i in range(dataset.n_species) for k in range(dataset.n_regions))))
    p, q = dataset.X.shape[1], dataset.G.shape[1]
    files.append(write_csv(outdir / "covariates_x.csv",
                           ["site_id"] + [f"X{c+1}" for c in range(p)],
                           ((j, *dataset.X[j]) for j in range(dataset.n_sites))))
    files.append(write_csv(outdir / "covariates_g.csv",
                           ["site_id"] + [f"G{c+1}" for c in range(q)],
                           ((j, *dataset.G[j]) for j in range(dataset.n_sites))))
    return files


# ---- posterior sample persistence -------------------------------------------

def _flat_columns(samples: PosteriorSamples) -> list[tuple[str, str, tuple]]:
    cols = []
    for name, arr in samples.draws.items():
        for idx in np.ndindex(arr.shape[2:]):
            label = name if not idx else f"{name}[{','.join(map(str, idx))}]"
            cols.append((label, name, idx))
    return cols


def save_samples(outdir, samples: PosteriorSamples,
                 gzip_output: bool = False) -> list[Path]:
    """One CSV per chain (`iteration,<param columns>`) plus a JSON sidecar."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    cols = _flat_columns(samples)
    files = []
    for c in range(samples.n_chains):
        def rows(chain=c):
            for t in range(samples.n_kept):
                yield [t] + [samples.draws[name][chain, t][idx] if idx
                             else samples.draws[name][chain, t]
                             for _, name, idx in cols]
        files.append(write_csv(outdir / f"chain{c}.csv",
                               ["iteration"] + [lbl for lbl, _, _ in cols],
                               rows(), gzip_output=gzip_output))
    shapes = {name: list(arr.shape[2:]) for name, arr in samples.draws.items()}
    dtypes = {name: str(arr.dtype) for name, arr in samples.draws.items()}
    meta = dict(samples.meta)
    meta.pop("scenario_per_draw", None)
    sidecar = outdir / "metadata.json"
    with open(sidecar, "w") as fh:
        json.dump({"n_chains": samples.n_chains, "n_kept": samples.n_kept,
                   "shapes": shapes, "dtypes": dtypes, "meta": _jsonable(meta)},
                  fh, indent=2, sort_keys=True)
    files.append(sidecar)
    return files


def load_samples(indir) -> PosteriorSamples:
    indir = Path(indir)
    with open(indir / "metadata.json") as fh:
        info = json.load(fh)
    shapes = {k: tuple(v) for k, v in info["shapes"].items()}
    draws = {name: np.zeros((info["n_chains"], info["n_kept"], *shape),
                            dtype=info["dtypes"][name])
             for name, shape in shapes.items()}
    for c in range(info["n_chains"]):
        path = indir / f"chain{c}.csv"
        if not path.exists():
            path = indir / f"chain{c}.csv.gz"
        with _open_text(path) as fh:
            reader = csv.reader(fh)
            header = next(reader)
            # header labels ("name" or "name[i,j]") define the column layout
            targets = []
            for label in header[1:]:
                if label.endswith("]"):
                    name, _, rest = label.partition("[")
                    idx = tuple(int(v) for v in rest[:-1].split(","))
                else:
                    name, idx = label, ()
                targets.append((name, idx))
            for row in reader:
                t = int(row[0])
                for (name, idx), val in zip(targets, row[1:]):
                    draws[name][(c, t, *idx)] = float(val)
    return PosteriorSamples(draws=draws, meta=info["meta"])


# ---- run config and manifest -------------------------------------------------

@dataclass(frozen=True)
class RunConfig:
    grid: str
    observations: str
    culls: str
    covariates_x: str
    covariates_g: str
    edges: str | None = None
    priors: PriorConfig = field(default_factory=PriorConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    bands: dict = field(default_factory=dict)
    assignment: list = field(default_factory=list)
    kappa_file: str | None = None
    species_names: list = field(default_factory=list)
    n_workers: int = 1
    gzip_samples: bool = False

    @classmethod
    def from_json(cls, path) -> "RunConfig":
        base = Path(path).parent
        with open(path) as fh:
            raw = json.load(fh)
        if "seed" not in raw.get("sampler", {}):
            raise ValueError("config must set sampler.seed (no wall-clock seeding)")
        priors = PriorConfig(**raw.get("priors", {}))
        sampler = SamplerConfig(**raw["sampler"])
        def respath(p):
            return p if p is None or os.path.isabs(p) else str(base / p)
        for key in ("grid", "observations", "culls", "covariates_x", "covariates_g"):
            if key not in raw:
                raise ValueError(f"config missing required path {key!r}")
        cfg = cls(grid=respath(raw["grid"]), observations=respath(raw["observations"]),
                  culls=respath(raw["culls"]), covariates_x=respath(raw["covariates_x"]),
                  covariates_g=respath(raw["covariates_g"]),
                  edges=respath(raw.get("edges")), priors=priors, sampler=sampler,
                  bands=raw.get("bands", {}), assignment=raw.get("assignment", []),
                  kappa_file=respath(raw.get("kappa_file")),
                  species_names=raw.get("species_names", []),
                  n_workers=int(raw.get("n_workers", 1)),
                  gzip_samples=bool(raw.get("gzip_samples", False)))
        for key in ("grid", "observations", "culls", "covariates_x", "covariates_g"):
            if not Path(getattr(cfg, key)).exists():
                raise ValueError(f"config path {key}={getattr(cfg, key)} does not exist")
        return cfg


def load_kappa(path, n_species: int, region_ids: np.ndarray) -> np.ndarray:
    """CSV `species,region_id,kappa` -> (S, r) matrix."""
    lut = {int(r): i for i, r in enumerate(region_ids)}
    kappa = np.full((n_species, len(region_ids)), np.nan)
    for lineno, row in _read_rows(path, ["species", "region_id", "kappa"]):
        try:
            sp, rid, val = int(row[0]), int(row[1]), float(row[2])
        except ValueError as exc:
            raise LoadError(path, lineno, f"bad kappa row: {exc}") from None
        if rid not in lut:
            raise LoadError(path, lineno, f"unknown region_id {rid}")
        kappa[sp, lut[rid]] = val
    if np.any(np.isnan(kappa)):
        raise LoadError(path, 0, "kappa missing for some (species, region) cells")
    return kappa


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    return obj


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(outdir, files: list[Path], config_hash: str = "",
                   status: dict | None = None) -> Path:
    """Checksum inventory, written atomically last."""
    outdir = Path(outdir)
    entries = {str(Path(f).relative_to(outdir)): sha256_file(f)
               for f in files}
    manifest = {"config_hash": config_hash, "files": entries,
                "status": status or {"ok": True}}
    tmp = outdir / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    final = outdir / "manifest.json"
    os.replace(tmp, final)
    return final


def verify_manifest(outdir) -> list[str]:
    """Names of files whose checksum no longer matches (or are missing)."""
    outdir = Path(outdir)
    with open(outdir / "manifest.json") as fh:
        manifest = json.load(fh)
    bad = []
    for rel, digest in manifest["files"].items():
        p = outdir / rel
        if not p.exists() or sha256_file(p) != digest:
            bad.append(rel)
    return bad


def config_hash(path) -> str:
    return sha256_file(path)
