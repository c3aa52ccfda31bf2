"""Prototype-routed perfect binary tree.

Nodes use heap addressing: root 1, children ``2i`` and ``2i + 1``. Branch
nodes own one prototype (a row of the shared prototype store) plus a left
and a right attention edge; leaves own an affine classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import AttentionParams, attention_apply
from .params import ParamStore
from .tensor import Tensor

SIMILARITY_EPS = 1e-4


class TreeError(ValueError):
    pass


@dataclass
class BranchNode:
    index: int
    chunk: int  # row of the prototype store (preorder position)
    edge_left: AttentionParams | None
    edge_right: AttentionParams | None


@dataclass
class LeafNode:
    index: int
    weight: Tensor  # (D, M)
    bias: Tensor  # (M,)


@dataclass
class Tree:
    depth: int
    num_classes: int
    proto_size: int
    prototypes: Tensor  # (2^d - 1, k)
    proj_w: Tensor  # (D, 1): patch grid -> 1-channel signal
    proj_b: Tensor  # (1,)
    branches: dict[int, BranchNode] = field(default_factory=dict)
    leaves: dict[int, LeafNode] = field(default_factory=dict)

    @property
    def leaf_indices(self) -> list[int]:
        return list(range(2 ** self.depth, 2 ** (self.depth + 1)))

    @property
    def branch_indices(self) -> list[int]:
        return list(range(1, 2 ** self.depth))

    def prototype(self, i: int) -> Tensor:
        """Prototype of branch ``i`` as a (1, 1, k) tensor."""
        row = T.getitem(self.prototypes, (slice(self.branches[i].chunk, self.branches[i].chunk + 1),))
        return T.reshape(row, (1, 1, self.proto_size))


def preorder_layout(depth: int) -> list[tuple[int, int, int]]:
    """Recursive construction with preorder indices.

    Returns ``(preorder_index, heap_index, level)`` triples in construction
    order. The right subtree of preorder node ``i`` starts at
    ``i + left.size + 1``.
    """
    out = []

    def build(i, heap, d):
        out.append((i, heap, d))
        if d == depth:
            return 1
        left_size = build(i + 1, 2 * heap, d + 1)
        right_size = build(i + left_size + 1, 2 * heap + 1, d + 1)
        return 1 + left_size + right_size

    build(0, 1, 0)
    return out


def init_tree(store: ParamStore, depth: int, num_classes: int, proto_size: int,
              embed_dim: int, use_attention: bool = True, attention_kernel: int = 3,
              prefix: str = "tree") -> Tree:
    """Build a perfect tree of ``depth`` levels and register its parameters."""
    if depth < 1:
        raise TreeError(f"degenerate tree: depth must be >= 1, got {depth}")
    if proto_size < 1:
        raise TreeError("proto_size must be >= 1")
    layout = preorder_layout(depth)
    branch_order = [heap for _, heap, lvl in layout if lvl < depth]
    n_branch = 2 ** depth - 1
    prototypes = store.uniform(f"{prefix}.prototypes", (n_branch, proto_size), 0.0, 1.0)
    # Features entering the tree lie in (0, 1); offsetting the projection so a
    # typical window sits ~1.5 away from a U(0,1) prototype keeps the initial
    # max-similarity inside the unclamped (0, 1) band.
    proj_w = store.fan_in(f"{prefix}.proj.weight", (embed_dim, 1), embed_dim)
    centre = 0.5 * float(proj_w.data.sum())
    proj_b = store.constant(f"{prefix}.proj.bias", (1,), _projection_offset(proto_size) - centre)
    tree = Tree(depth, num_classes, proto_size, prototypes, proj_w, proj_b)
    for chunk, heap in enumerate(branch_order):
        edges = [
            AttentionParams.create(store, f"{prefix}.node{heap}.edge_{side}", attention_kernel)
            if use_attention else None
            for side in ("left", "right")
        ]
        tree.branches[heap] = BranchNode(heap, chunk, *edges)
    for heap in sorted(h for _, h, lvl in layout if lvl == depth):
        tree.leaves[heap] = LeafNode(
            heap,
            store.fan_in(f"{prefix}.leaf{heap}.weight", (embed_dim, num_classes), embed_dim),
            store.fan_in(f"{prefix}.leaf{heap}.bias", (num_classes,), embed_dim),
        )
    return tree


def _projection_offset(k: int, target: float = 1.5) -> float:
    # solve k * E[(c - U)^2] = target^2 for c, with E[(c-U)^2] = c^2 - c + 1/3
    disc = 1.0 - 4.0 * (1.0 / 3.0 - target * target / k)
    return 0.5 * (1.0 + np.sqrt(max(disc, 0.0)))


# ---------------------------------------------------------------------------
# similarity and routing


def proto_l2_distance_map(z: Tensor, proto: Tensor) -> Tensor:
    """Sliding L2 distance between ``z`` (B, 1, P') and ``proto`` (1, 1, k).

    Expands ||w - p||^2 = sum(w^2) + sum(p^2) - 2 w.p with two convolutions.
    """
    k = proto.shape[-1]
    x2_patch_sum = T.conv1d(T.square(z), Tensor(np.ones((1, 1, k))))
    p2 = T.sum_(T.square(proto))
    xp = T.conv1d(z, proto)
    d2 = T.sub(T.add(x2_patch_sum, p2), T.mul(xp, 2.0))
    return T.sqrt(T.relu(d2))


def similarity_map(distances: Tensor, eps: float = SIMILARITY_EPS) -> Tensor:
    """log(1 + 1 / (d + eps)), strictly decreasing in d."""
    return T.log(T.add(T.div(1.0, T.add(distances, eps)), 1.0))


@dataclass
class RoutingScore:
    similarity: Tensor  # (B,) max similarity, pre-clamp
    to_left: Tensor  # (B,)
    to_right: Tensor  # (B,)
    best_patch_index: np.ndarray  # (B,) int
    signal: np.ndarray  # (B, P') node signal the prototype was matched against


def node_signal(z: Tensor, tree: Tree) -> Tensor:
    """(B, P, D) patch grid -> (B, 1, P) matching signal."""
    s = T.linear(z, tree.proj_w, tree.proj_b)  # (B, P, 1)
    return T.transpose(s, (0, 2, 1))


def routing(signal: Tensor, proto: Tensor) -> RoutingScore:
    sim = similarity_map(proto_l2_distance_map(signal, proto))  # (B, 1, P'-k+1)
    b = sim.shape[0]
    n = T.reshape(T.maxpool1d(sim, "global"), (b,))
    to_left = T.clamp(n, 0.0, 1.0)
    to_right = T.sub(1.0, to_left)
    best = T.argmax(T.reshape(sim, (b, sim.shape[-1])), axis=1)
    return RoutingScore(n, to_left, to_right, best, signal.data.reshape(b, -1).copy())


def edge_transform(z: Tensor, side: str, branch: BranchNode) -> Tensor:
    """Attention edge on (B, P, D) patches; features act as channels."""
    params = branch.edge_left if side == "left" else branch.edge_right
    if params is None:
        return z
    return T.transpose(attention_apply(T.transpose(z, (0, 2, 1)), params), (0, 2, 1))


def leaf_predict(z_leaf: Tensor, logits: Tensor, leaf: LeafNode) -> Tensor:
    """softmax(classifier(max over positions of z_leaf) + logits)."""
    pooled = T.max_(z_leaf, axis=1)  # (B, D)
    return T.softmax(T.add(T.linear(pooled, leaf.weight, leaf.bias), logits), axis=-1)


# ---------------------------------------------------------------------------
# traversal


@dataclass
class Traversal:
    y_hat: Tensor  # (B, M) recursive mixture
    rho: dict[int, Tensor]  # leaf index -> (B,) cumulative routing score
    leaf_probs: dict[int, Tensor]  # leaf index -> (B, M)
    routes: dict[int, RoutingScore]  # branch index -> routing record

    def rho_matrix(self) -> np.ndarray:
        return np.stack([self.rho[l].data for l in sorted(self.rho)], axis=1)


def traverse(tree: Tree, patches: Tensor, logits: Tensor) -> Traversal:
    """Soft recursive descent.

    Each branch routes on the feature it received, recurses into both
    children with edge-transformed features, and mixes the child
    distributions by its left/right scores. Path products are tracked on the
    side so the flat ``sum_l rho_l * g_l`` form is available too.
    """
    rho: dict[int, Tensor] = {}
    leaf_probs: dict[int, Tensor] = {}
    routes: dict[int, RoutingScore] = {}

    def visit(i: int, z: Tensor, path: Tensor | None) -> Tensor:
        if i in tree.leaves:
            g = leaf_predict(z, logits, tree.leaves[i])
            leaf_probs[i] = g
            rho[i] = path if path is not None else Tensor(np.ones(z.shape[0]))
            return g
        r = routing(node_signal(z, tree), tree.prototype(i))
        routes[i] = r
        branch = tree.branches[i]
        lpath = r.to_left if path is None else T.mul(path, r.to_left)
        rpath = r.to_right if path is None else T.mul(path, r.to_right)
        left = visit(2 * i, edge_transform(z, "left", branch), lpath)
        right = visit(2 * i + 1, edge_transform(z, "right", branch), rpath)
        tl = T.reshape(r.to_left, (-1, 1))
        tr = T.reshape(r.to_right, (-1, 1))
        return T.add(T.mul(tl, left), T.mul(tr, right))

    y_hat = visit(1, T.sigmoid(patches), None)
    return Traversal(y_hat, rho, leaf_probs, routes)


def mixture(trav: Traversal) -> Tensor:
    """Flat form: sum over leaves of rho_l * g_l."""
    terms = [T.mul(T.reshape(trav.rho[l], (-1, 1)), trav.leaf_probs[l]) for l in sorted(trav.rho)]
    out = terms[0]
    for t in terms[1:]:
        out = T.add(out, t)
    return out
