"""Interaction graph and Laplacian coordinates of agent points.

The source object points and agent points are tetrahedralized together.
Every agent point keeps the Delaunay edges incident to it, split into agent
neighbours and object neighbours, weighted in inverse proportion to the edge
lengths so the weights of each agent point sum to one.  The Laplacian
coordinate of agent point i is

    delta_i = a_i - sum_{j in agent nbrs} w_ij a_j - sum_{j in object nbrs} w_ij o_j

Neighbourhoods and weights are frozen from the source configuration.
"""

import logging
from dataclasses import dataclass

import numpy as np
import torch
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from interxfer.diffcore import DTYPE
from interxfer.geomkit import delaunay_edges
from interxfer.util import GeometryError, ShapeMismatchError

logger = logging.getLogger(__name__)

# Points closer than this are merged before tetrahedralization.
MERGE_TOL = 1e-9

# Shortest edge length used when forming inverse-length weights.
MIN_LENGTH = 1e-8


@dataclass
class InteractionGraph:
    """Frozen neighbourhoods, weights and source Laplacian coordinates.

    Column indices address the stacked array [object points; agent points],
    so column j < n_object is object point j and column n_object + k is agent
    point k.
    """

    n_object: int
    n_agent: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    delta: np.ndarray
    source_normals: np.ndarray

    def neighbors(self, i):
        """(agent neighbour indices, their weights, object neighbour indices, their weights)."""
        if not (0 <= i < self.n_agent):
            raise IndexError(f"agent index {i} out of range")
        mask = self.rows == i
        cols, weights = self.cols[mask], self.weights[mask]
        agent = cols >= self.n_object
        return (
            cols[agent] - self.n_object,
            weights[agent],
            cols[~agent],
            weights[~agent],
        )

    def dense(self):
        """Dense (n_agent, n_object + n_agent) operator with delta = L @ [O; A]."""
        matrix = np.zeros((self.n_agent, self.n_object + self.n_agent))
        np.add.at(matrix, (self.rows, self.cols), -self.weights)
        matrix[np.arange(self.n_agent), self.n_object + np.arange(self.n_agent)] += 1.0
        return matrix

    def stats(self):
        """Degree histogram and weight extrema, for debugging."""
        degrees = np.bincount(self.rows, minlength=self.n_agent)
        values, counts = np.unique(degrees, return_counts=True)
        return {
            "agent_points": int(self.n_agent),
            "object_points": int(self.n_object),
            "edges": int(len(self.rows)),
            "degree_histogram": {int(v): int(c) for v, c in zip(values, counts)},
            "object_neighbor_fraction": float(np.mean(self.cols < self.n_object)),
            "weight_min": float(self.weights.min()),
            "weight_max": float(self.weights.max()),
        }


def normalized_weights(lengths):
    """Inverse-length weights that sum to one."""
    inverse = 1.0 / np.maximum(np.asarray(lengths, dtype=float), MIN_LENGTH)
    return inverse / inverse.sum()


def _merge_duplicates(points):
    """Representative (lowest) index of each point after merging near-duplicates."""
    pairs = cKDTree(points).query_pairs(MERGE_TOL, output_type="ndarray")
    if len(pairs) == 0:
        return np.arange(len(points))
    n = len(points)
    adjacency = csr_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, component = connected_components(adjacency, directed=False)
    first = np.full(component.max() + 1, n)
    np.minimum.at(first, component, np.arange(n))
    return first[component]


def build_interaction_graph(object_points, agent_points, agent_normals, seed=0):
    """Tetrahedralize object and agent points together and freeze the neighbourhoods."""
    object_points = np.asarray(object_points, dtype=float).reshape(-1, 3)
    agent_points = np.asarray(agent_points, dtype=float).reshape(-1, 3)
    agent_normals = np.asarray(agent_normals, dtype=float).reshape(-1, 3)
    if len(agent_points) != len(agent_normals):
        raise ShapeMismatchError("agent points and normals differ in length")
    n_object, n_agent = len(object_points), len(agent_points)
    stacked = np.concatenate([object_points, agent_points])
    rep = _merge_duplicates(stacked)
    keep = np.unique(rep)
    if len(keep) < len(stacked):
        logger.debug("merged %d duplicate points", len(stacked) - len(keep))
    edges = delaunay_edges(stacked[keep], seed=seed)
    pairs = keep[edges.pairs]

    # A merged agent point inherits the neighbourhood of its representative.
    both = np.concatenate([pairs, pairs[:, ::-1]])
    neighbor_lists = _adjacency(both, len(stacked))
    rows, cols, weights = [], [], []
    for i in range(n_agent):
        nbrs = neighbor_lists[rep[n_object + i]]
        if len(nbrs) == 0:
            raise GeometryError(f"agent point {i} has no neighbours")
        lengths = np.linalg.norm(stacked[nbrs] - agent_points[i], axis=1)
        rows.append(np.full(len(nbrs), i))
        cols.append(nbrs)
        weights.append(normalized_weights(lengths))
    graph = InteractionGraph(
        n_object=n_object,
        n_agent=n_agent,
        rows=np.concatenate(rows),
        cols=np.concatenate(cols),
        weights=np.concatenate(weights),
        delta=np.zeros((n_agent, 3)),
        source_normals=agent_normals.copy(),
    )
    graph.delta = laplacian_coordinates(graph, agent_points, object_points)
    return graph


def _adjacency(directed, n):
    """Sorted neighbour array per vertex from a directed edge list."""
    order = np.lexsort((directed[:, 1], directed[:, 0]))
    directed = directed[order]
    starts = np.searchsorted(directed[:, 0], np.arange(n + 1))
    return [directed[starts[v] : starts[v + 1], 1] for v in range(n)]


def laplacian_coordinate(graph, i, agent_points, object_points):
    """Laplacian coordinate of one agent point."""
    agent_points = np.asarray(agent_points, dtype=float)
    object_points = np.asarray(object_points, dtype=float)
    a_idx, a_w, o_idx, o_w = graph.neighbors(i)
    return (
        agent_points[i]
        - (a_w[:, None] * agent_points[a_idx]).sum(axis=0)
        - (o_w[:, None] * object_points[o_idx]).sum(axis=0)
    )


def laplacian_coordinates(graph, agent_points, object_points):
    """Laplacian coordinates of every agent point."""
    stacked = np.concatenate(
        [np.asarray(object_points, dtype=float), np.asarray(agent_points, dtype=float)]
    )
    if len(stacked) != graph.n_object + graph.n_agent:
        raise ShapeMismatchError("positions do not match the graph")
    combined = np.zeros((graph.n_agent, 3))
    np.add.at(combined, graph.rows, graph.weights[:, None] * stacked[graph.cols])
    return stacked[graph.n_object :] - combined


def laplacian_tensor(graph, agent_points, object_points):
    """Differentiable Laplacian coordinates; `object_points` may be constant."""
    stacked = torch.cat([torch.as_tensor(object_points, dtype=DTYPE), agent_points])
    weights = torch.as_tensor(graph.weights, dtype=DTYPE)[:, None]
    rows = torch.as_tensor(graph.rows)
    combined = torch.zeros((graph.n_agent, 3), dtype=DTYPE).index_add(
        0, rows, weights * stacked[torch.as_tensor(graph.cols)]
    )
    return agent_points - combined
