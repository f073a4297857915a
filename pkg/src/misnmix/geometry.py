"""Fine-grid lattice geometry, adjacency graphs, and site-to-region assignment."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GridGeometry:
    """Fine-scale sites with centroids plus the map onto coarse regions.

    Site ids must be the contiguous integers 0..m-1. Every site belongs to
    exactly one region.
    """

    centroids: np.ndarray            # (m, 2) float
    site_region: np.ndarray          # (m,) int, region id per site
    region_ids: np.ndarray = field(default=None)  # sorted unique region ids

    def __post_init__(self):
        centroids = np.asarray(self.centroids, dtype=float)
        site_region = np.asarray(self.site_region, dtype=np.int64)
        if centroids.ndim != 2 or centroids.shape[1] != 2:
            raise ValueError("centroids must be an (m, 2) array")
        m = centroids.shape[0]
        if m < 2:
            raise ValueError("need at least 2 sites (single-site ICAR is degenerate)")
        if site_region.shape != (m,):
            raise ValueError("site_region length must equal number of sites")
        object.__setattr__(self, "centroids", centroids)
        object.__setattr__(self, "site_region", site_region)
        if self.region_ids is None:
            object.__setattr__(self, "region_ids", np.unique(site_region))
        else:
            region_ids = np.asarray(self.region_ids, dtype=np.int64)
            missing = np.setdiff1d(site_region, region_ids)
            if missing.size:
                raise ValueError(f"site_region references unknown regions {missing.tolist()}")
            object.__setattr__(self, "region_ids", region_ids)

    @property
    def n_sites(self) -> int:
        return self.centroids.shape[0]

    @property
    def n_regions(self) -> int:
        return len(self.region_ids)

    def region_index(self) -> np.ndarray:
        """site -> 0-based dense region index (region_ids order)."""
        lut = {rid: i for i, rid in enumerate(self.region_ids.tolist())}
        return np.array([lut[r] for r in self.site_region.tolist()], dtype=np.int64)


@dataclass(frozen=True)
class Adjacency:
    """Symmetric 0/1 neighbour graph in CSR form.

    indptr/indices encode sorted per-site neighbour lists; degrees is the
    diagonal of D. n_components counts connected components of the graph.
    """

    indptr: np.ndarray       # (m+1,) int64
    indices: np.ndarray      # (n_edges*2,) int64
    degrees: np.ndarray      # (m,) int64
    n_components: int
    component_labels: np.ndarray  # (m,) int64

    @property
    def n_sites(self) -> int:
        return len(self.degrees)

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    def neighbors(self, j: int) -> np.ndarray:
        return self.indices[self.indptr[j]:self.indptr[j + 1]]

    def edge_list(self) -> np.ndarray:
        """(n_edges, 2) array with j < k per row; cached after first call."""
        cached = self.__dict__.get("_edge_list")
        if cached is not None:
            return cached
        src = np.repeat(np.arange(self.n_sites), np.diff(self.indptr))
        mask = src < self.indices
        edges = np.column_stack([src[mask], self.indices[mask]])
        object.__setattr__(self, "_edge_list", edges)
        return edges

    def dense_laplacian(self) -> np.ndarray:
        """Dense D - A; only for small graphs (tests, PCAR normalizer)."""
        m = self.n_sites
        L = np.zeros((m, m))
        for j in range(m):
            L[j, j] = self.degrees[j]
            L[j, self.neighbors(j)] = -1.0
        return L


def _components(neighbor_sets: list[set[int]]) -> tuple[int, np.ndarray]:
    m = len(neighbor_sets)
    labels = np.full(m, -1, dtype=np.int64)
    n_comp = 0
    for start in range(m):
        if labels[start] >= 0:
            continue
        stack = [start]
        labels[start] = n_comp
        while stack:
            j = stack.pop()
            for k in neighbor_sets[j]:
                if labels[k] < 0:
                    labels[k] = n_comp
                    stack.append(k)
        n_comp += 1
    return n_comp, labels


def _from_neighbor_sets(neighbor_sets: list[set[int]]) -> Adjacency:
    m = len(neighbor_sets)
    degrees = np.array([len(s) for s in neighbor_sets], dtype=np.int64)
    indptr = np.zeros(m + 1, dtype=np.int64)
    indptr[1:] = np.cumsum(degrees)
    indices = np.empty(indptr[-1], dtype=np.int64)
    for j, s in enumerate(neighbor_sets):
        indices[indptr[j]:indptr[j + 1]] = sorted(s)
    n_comp, labels = _components(neighbor_sets)
    isolated = np.nonzero(degrees == 0)[0]
    if isolated.size:
        log.warning("isolated sites (degree 0) present: %s", isolated.tolist())
    return Adjacency(indptr=indptr, indices=indices, degrees=degrees,
                     n_components=n_comp, component_labels=labels)


def build_adjacency(grid: GridGeometry, rule: str = "rook-lattice",
                    edges: np.ndarray | None = None) -> Adjacency:
    """Build the neighbour graph for a grid.

    rule="rook-lattice" links sites whose centroids differ by one grid step
    along exactly one axis (step inferred from centroid spacing).
    rule="explicit-edge-list" takes an (n, 2) array of site id pairs;
    duplicate edges and self-loops are errors.
    """
    m = grid.n_sites
    if rule == "rook-lattice":
        xy = grid.centroids
        # infer grid step from the smallest positive coordinate gap
        def step(vals):
            u = np.unique(vals)
            d = np.diff(u)
            d = d[d > 1e-12]
            return d.min() if d.size else 1.0
        sx, sy = step(xy[:, 0]), step(xy[:, 1])
        index = {(round(x / sx), round(y / sy)): j for j, (x, y) in enumerate(xy)}
        if len(index) != m:
            raise ValueError("duplicate centroids under rook-lattice rule")
        neighbor_sets = [set() for _ in range(m)]
        for (gx, gy), j in index.items():
            for nb in ((gx + 1, gy), (gx - 1, gy), (gx, gy + 1), (gx, gy - 1)):
                k = index.get(nb)
                if k is not None:
                    neighbor_sets[j].add(k)
                    neighbor_sets[k].add(j)
        return _from_neighbor_sets(neighbor_sets)
    if rule == "explicit-edge-list":
        if edges is None:
            raise ValueError("explicit-edge-list rule requires an edges array")
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        neighbor_sets = [set() for _ in range(m)]
        seen = set()
        for a, b in edges:
            if a == b:
                raise ValueError(f"self-loop on site {a}")
            if not (0 <= a < m and 0 <= b < m):
                raise ValueError(f"edge ({a},{b}) references unknown site")
            key = (min(a, b), max(a, b))
            if key in seen:
                raise ValueError(f"duplicate edge {key}")
            seen.add(key)
            neighbor_sets[a].add(int(b))
            neighbor_sets[b].add(int(a))
        return _from_neighbor_sets(neighbor_sets)
    raise ValueError(f"unknown neighbour rule {rule!r}")


def lattice_grid(side_x: int, side_y: int | None = None,
                 n_regions: int = 1) -> GridGeometry:
    """Regular lattice with unit spacing, regions as vertical strips of columns.

    Strips split the x-axis as evenly as possible; with side divisible by
    n_regions every strip holds side_y * (side_x / n_regions) sites.
    """
    if side_y is None:
        side_y = side_x
    xs, ys = np.meshgrid(np.arange(side_x), np.arange(side_y), indexing="ij")
    centroids = np.column_stack([xs.ravel().astype(float), ys.ravel().astype(float)])
    cols_per = side_x / n_regions
    region = np.minimum((centroids[:, 0] // cols_per).astype(np.int64), n_regions - 1)
    return GridGeometry(centroids=centroids, site_region=region)


def assign_regions(centroids: np.ndarray, region_bounds: list[tuple[int, float, float, float, float]]) -> np.ndarray:
    """Assign each centroid to a rectangular region (region_id, x0, x1, y0, y1).

    A centroid strictly inside one rectangle gets that region. Boundary ties
    go to the lowest region_id and are logged. A centroid in no region is an
    error.
    """
    centroids = np.asarray(centroids, dtype=float)
    out = np.full(len(centroids), -1, dtype=np.int64)
    for j, (x, y) in enumerate(centroids):
        hits = sorted(rid for rid, x0, x1, y0, y1 in region_bounds
                      if x0 <= x <= x1 and y0 <= y <= y1)
        if not hits:
            raise ValueError(f"centroid {j} at ({x}, {y}) falls in no region")
        if len(hits) > 1:
            log.info("centroid %d on shared boundary of regions %s; tie-break -> %d",
                     j, hits, hits[0])
        out[j] = hits[0]
    return out
