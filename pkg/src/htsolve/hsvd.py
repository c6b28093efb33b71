"""Hierarchical tensor format with certified truncation and coarsening.

A tensor of order ``d`` is stored on a dimension tree: one *frame* per leaf
(``n_i x r_i``, columns spanning the mode-``i`` matricization), one *transfer
tensor* per interior non-root node (``r_left x r_right x r_node``), and a
single square *root transfer* matrix coupling the two root children.  Stored
ranks are per effective edge (see :mod:`htsolve.htree`).

The format supports exact arithmetic (addition concatenates ranks, scalar
multiplication touches the root transfer only, inner products contract the
tree without densification) and accuracy-controlled reduction:

* :func:`recompress` - hard rank truncation based on the hierarchical SVD.
  The per-edge singular-value tails give a certified bound: truncating edge
  ``e`` to rank ``r_e`` changes the tensor by at most
  ``sqrt(sum_e tail_e(r_e)^2)``, and the truncated tensor is quasi-optimal
  among all tensors of the same ranks up to ``sqrt(2d - 3)``.
* :func:`coarsen` - support reduction based on mode-frame contractions.
  Dropping index slices whose combined contraction mass is ``s_N`` changes
  the tensor by at most ``s_N``, quasi-optimally up to ``sqrt(d)``.

Everything is plain float64 numpy; instances are immutable (arrays are stored
read-only) and all reductions are deterministic, including tie-breaking.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from htsolve.errors import InvalidDimensionError
from htsolve.htree import DimensionTree, EdgeList, Node, effective_edges

__all__ = [
    "HTensor",
    "EdgeSpectrum",
    "ContractionSet",
    "zero_htensor",
    "random_htensor",
    "max_ranks",
    "from_dense",
    "to_dense",
    "eval_entry",
    "add",
    "scale",
    "inner",
    "norm",
    "orthogonalize",
    "edge_spectra",
    "recompress",
    "plan_recompression",
    "truncate_to_ranks",
    "contractions",
    "coarsen",
    "plan_coarsening",
    "select_support",
    "restrict_support",
    "as_quasinorm",
    "rank_quasinorm",
]

#: Relative cutoff below which singular values count as numerically zero.
ZERO_CUTOFF = 1e-14


def _ro(a: np.ndarray) -> np.ndarray:
    """Own a C-contiguous float64 copy and mark it read-only."""
    out = np.array(a, dtype=np.float64, order="C")
    out.setflags(write=False)
    return out


def _svd(a: np.ndarray):
    """SVD with a divide-and-conquer -> QR-iteration fallback."""
    try:
        return np.linalg.svd(a, full_matrices=False)
    except np.linalg.LinAlgError:
        import scipy.linalg

        return scipy.linalg.svd(a, full_matrices=False, lapack_driver="gesvd")


@dataclass(frozen=True)
class HTensor:
    """Immutable hierarchical-format tensor on a dimension tree.

    Attributes
    ----------
    tree : DimensionTree
    dims : tuple[int, ...]
        Mode sizes ``n_0, ..., n_{d-1}``.
    frames : dict[int, ndarray]
        Leaf frames, ``frames[i]`` of shape ``(n_i, r_{i})``.
    transfer : dict[Node, ndarray]
        Transfer tensors for interior non-root nodes, shape
        ``(r_left, r_right, r_node)``.
    root_transfer : ndarray
        Square coupling matrix between the two root children.
    orthogonal : bool
        If set, all leaf frames and matricized transfer tensors have
        orthonormal columns (the root transfer is unconstrained).

    Stored ranks satisfy ``r_node <= r_left * r_right`` at interior nodes and
    the two root children share the root edge rank.  Orthogonalized reduction
    outputs additionally satisfy the matricization cap
    ``r_node <= min(prod dims(node), prod dims(complement))``; stored ranks of
    intermediate arithmetic results (sums, operator applications) may exceed
    that cap.
    """

    tree: DimensionTree
    dims: tuple[int, ...]
    frames: dict[int, np.ndarray]
    transfer: dict[Node, np.ndarray]
    root_transfer: np.ndarray
    orthogonal: bool = False

    def __post_init__(self):
        tree = self.tree
        object.__setattr__(self, "dims", tuple(int(n) for n in self.dims))
        if len(self.dims) != tree.d:
            raise ValueError(f"got {len(self.dims)} mode sizes for order {tree.d}")
        if any(n < 1 for n in self.dims):
            raise ValueError(f"mode sizes must be positive: {self.dims}")
        frames = {int(i): _ro(u) for i, u in self.frames.items()}
        transfer = {tuple(k): _ro(b) for k, b in self.transfer.items()}
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "transfer", transfer)
        object.__setattr__(self, "root_transfer", _ro(self.root_transfer))
        if sorted(frames) != list(range(tree.d)):
            raise ValueError("frames must be keyed by every mode exactly once")
        for i in range(tree.d):
            if frames[i].ndim != 2 or frames[i].shape[0] != self.dims[i]:
                raise ValueError(
                    f"frame {i} has shape {frames[i].shape}, expected ({self.dims[i]}, r)"
                )
        interior = [n for n in tree.interior_nodes() if n != tree.root]
        if sorted(transfer) != sorted(interior):
            raise ValueError("transfer must be keyed by the interior non-root nodes")
        for node in interior:
            left, right = tree.child_pair(node)
            b = transfer[node]
            want = (self._stored_rank(left), self._stored_rank(right))
            if b.ndim != 3 or b.shape[:2] != want:
                raise ValueError(
                    f"transfer at {node} has shape {b.shape}, expected {want} + (r,)"
                )
            if b.shape[2] > b.shape[0] * b.shape[1]:
                raise ValueError(
                    f"rank {b.shape[2]} at {node} exceeds the child product "
                    f"{b.shape[0]}*{b.shape[1]}"
                )
        left, right = tree.child_pair(tree.root)
        want = (self._stored_rank(left), self._stored_rank(right))
        if self.root_transfer.ndim != 2 or self.root_transfer.shape != want:
            raise ValueError(
                f"root transfer has shape {self.root_transfer.shape}, expected {want}"
            )
        if want[0] != want[1]:
            raise ValueError(f"root ranks must be equal, got {want}")

    def _stored_rank(self, node: Node) -> int:
        if len(node) == 1:
            return self.frames[node[0]].shape[1]
        return self.transfer[node].shape[2]

    # -- ranks -------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.tree.d

    @property
    def edge_list(self) -> EdgeList:
        return effective_edges(self.tree)

    def node_rank(self, node: Node) -> int:
        node = tuple(sorted(node))
        if node == self.tree.root:
            raise KeyError("the root carries no edge rank")
        if node == self.tree.child_pair(self.tree.root)[1]:
            return self.root_transfer.shape[1]
        return self._stored_rank(node)

    @property
    def ranks(self) -> tuple[int, ...]:
        """Stored rank per effective edge, in edge enumeration order."""
        return tuple(self._stored_rank(n) for n in self.edge_list)

    @property
    def max_rank(self) -> int:
        return max(self.ranks, default=0)

    # -- operator sugar ------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(-1.0, other))

    def __neg__(self):
        return scale(-1.0, self)

    def __mul__(self, c):
        return scale(c, self)

    __rmul__ = __mul__

    def norm(self) -> float:
        return norm(self)


def _node_rank_map(tree: DimensionTree, edge_ranks) -> dict[Node, int]:
    """Per-node ranks from a per-edge rank vector (root children share)."""
    edges = effective_edges(tree)
    if len(edge_ranks) != len(edges):
        raise ValueError(f"expected {len(edges)} edge ranks, got {len(edge_ranks)}")
    out = {node: int(edge_ranks[i]) for i, node in enumerate(edges.edges)}
    left, right = tree.child_pair(tree.root)
    out[right] = out[left]
    return out


def max_ranks(tree: DimensionTree, dims) -> tuple[int, ...]:
    """Matricization rank caps ``min(prod dims(node), prod dims(rest))``
    per effective edge."""
    dims = tuple(int(n) for n in dims)
    total = int(np.prod(dims))

    def cap(node: Node) -> int:
        inside = int(np.prod([dims[i] for i in node]))
        return min(inside, total // inside)

    return tuple(cap(node) for node in effective_edges(tree))


def zero_htensor(tree: DimensionTree, dims) -> HTensor:
    """The canonical zero tensor: every stored rank is 0."""
    dims = tuple(int(n) for n in dims)
    frames = {i: np.zeros((dims[i], 0)) for i in range(tree.d)}
    transfer = {
        n: np.zeros((0, 0, 0)) for n in tree.interior_nodes() if n != tree.root
    }
    return HTensor(tree=tree, dims=dims, frames=frames, transfer=transfer,
                   root_transfer=np.zeros((0, 0)), orthogonal=True)


def random_htensor(tree: DimensionTree, dims, rank, rng) -> HTensor:
    """Random tensor with edge ranks ``min(rank_e, matricization cap)``.

    ``rank`` is an int or a per-edge sequence.  Entries are scaled so the
    result has norm of order one.
    """
    dims = tuple(int(n) for n in dims)
    edges = effective_edges(tree)
    caps = max_ranks(tree, dims)
    if np.isscalar(rank):
        want = [int(rank)] * len(edges)
    else:
        want = [int(r) for r in rank]
    ranks = [min(w, c) for w, c in zip(want, caps)]
    r = _node_rank_map(tree, ranks)
    # honor the child-product bound bottom-up
    for node in tree.bottom_up():
        if node == tree.root or tree.is_leaf(node):
            continue
        left, right = tree.child_pair(node)
        r[node] = min(r[node], r[left] * r[right])
    left, right = tree.child_pair(tree.root)
    r_root = min(r[left], r[right])
    r[left] = r[right] = r_root
    frames = {i: rng.standard_normal((dims[i], r[(i,)])) / np.sqrt(dims[i])
              for i in range(tree.d)}
    transfer = {}
    for node in tree.interior_nodes():
        if node == tree.root:
            continue
        lft, rgt = tree.child_pair(node)
        b = rng.standard_normal((r[lft], r[rgt], r[node]))
        transfer[node] = b / np.sqrt(max(r[lft] * r[rgt], 1))
    root = rng.standard_normal((r_root, r_root))
    return HTensor(tree=tree, dims=dims, frames=frames, transfer=transfer,
                   root_transfer=root)


# -- dense conversion --------------------------------------------------------


def _matricize(data: np.ndarray, tree: DimensionTree, node: Node) -> np.ndarray:
    """Rows indexed by the node's axis order, columns by the complement."""
    order = tree.axis_order(node)
    rest = tuple(i for i in range(tree.d) if i not in node)
    moved = np.transpose(data, order + rest)
    n_in = int(np.prod([data.shape[i] for i in order], initial=1))
    return moved.reshape(n_in, -1)


def from_dense(data, tree: DimensionTree, tol: float = 0.0) -> HTensor:
    """Hierarchical SVD of a dense array.

    With ``tol = 0`` the stored ranks are the numerical matricization ranks
    (singular values below ``1e-14 * sigma_1`` count as zero) and the result
    reproduces ``data`` to roundoff.  With ``tol > 0`` the exact decomposition
    is recompressed to the certified accuracy ``tol``.  The result is
    orthogonalized either way.
    """
    data = np.asarray(data, dtype=np.float64)
    if data.ndim != tree.d:
        raise ValueError(f"data has order {data.ndim}, tree has order {tree.d}")
    if tol < 0:
        raise ValueError(f"tol must be >= 0, got {tol}")
    dims = data.shape
    if not np.isfinite(data).all():
        raise ValueError("data contains non-finite entries")
    if np.all(data == 0.0):
        return zero_htensor(tree, dims)

    bases: dict[Node, np.ndarray] = {}
    # the two root children share one matricization; factor it jointly so the
    # root coupling is exactly diagonal
    left, right = tree.child_pair(tree.root)
    u, s, vt = _svd(_matricize(data, tree, left))
    r_root = max(1, int(np.count_nonzero(s > ZERO_CUTOFF * s[0])))
    bases[left] = u[:, :r_root]
    bases[right] = vt[:r_root].T
    root_sigma = s[:r_root]

    for node in tree.nodes:
        if node in (tree.root, left, right):
            continue
        u, s, _ = _svd(_matricize(data, tree, node))
        rank = int(np.count_nonzero(s > ZERO_CUTOFF * s[0])) if s.size else 0
        bases[node] = u[:, :max(rank, 1)]

    frames = {i: bases[(i,)] for i in range(tree.d)}
    transfer = {}
    for node in tree.interior_nodes():
        if node == tree.root:
            continue
        lft, rgt = tree.child_pair(node)
        n_l = int(np.prod([dims[i] for i in lft]))
        t = bases[node].reshape(n_l, -1, bases[node].shape[1])
        transfer[node] = np.einsum("ia,jb,ijk->abk", bases[lft], bases[rgt], t,
                                   optimize=True)
    out = HTensor(tree=tree, dims=dims, frames=frames, transfer=transfer,
                  root_transfer=np.diag(root_sigma), orthogonal=True)
    if tol > 0:
        out = recompress(out, tol)
    return out


def to_dense(h: HTensor, max_entries: float = 1e8) -> np.ndarray:
    """Materialize the full array; guarded against accidental blowups."""
    total = float(np.prod(h.dims))
    if total > max_entries:
        raise ValueError(
            f"dense tensor would have {total:.3g} entries (> {max_entries:.3g}); "
            "raise max_entries to override"
        )
    tree = h.tree

    def expand(node: Node) -> np.ndarray:
        if tree.is_leaf(node):
            return h.frames[node[0]]
        left, right = tree.child_pair(node)
        a, b = expand(left), expand(right)
        t = np.einsum("ia,jb,abk->ijk", a, b, h.transfer[node], optimize=True)
        return t.reshape(a.shape[0] * b.shape[0], -1)

    left, right = tree.child_pair(tree.root)
    mat = expand(left) @ h.root_transfer @ expand(right).T
    order = tree.axis_order(left) + tree.axis_order(right)
    shaped = mat.reshape([h.dims[i] for i in order])
    return np.transpose(shaped, np.argsort(order))


def eval_entry(h: HTensor, index) -> float:
    """Evaluate one entry without densifying."""
    index = tuple(int(i) for i in index)
    if len(index) != h.d:
        raise ValueError(f"index has length {len(index)}, expected {h.d}")
    for i, (k, n) in enumerate(zip(index, h.dims)):
        if not 0 <= k < n:
            raise IndexError(f"index {k} out of range for mode {i} of size {n}")
    tree = h.tree

    def vec(node: Node) -> np.ndarray:
        if tree.is_leaf(node):
            return h.frames[node[0]][index[node[0]], :]
        left, right = tree.child_pair(node)
        return np.einsum("a,b,abk->k", vec(left), vec(right), h.transfer[node])

    left, right = tree.child_pair(tree.root)
    return float(vec(left) @ h.root_transfer @ vec(right))


# -- exact arithmetic --------------------------------------------------------


def _check_same_space(a: HTensor, b: HTensor):
    if a.tree != b.tree:
        raise ValueError("tensors live on different dimension trees")
    if a.dims != b.dims:
        raise ValueError(f"mode sizes differ: {a.dims} vs {b.dims}")


def add(a: HTensor, b: HTensor) -> HTensor:
    """Exact sum; every stored edge rank is the sum of the operands' ranks."""
    _check_same_space(a, b)
    tree = a.tree
    frames = {i: np.hstack([a.frames[i], b.frames[i]]) for i in range(tree.d)}
    transfer = {}
    for node in tree.interior_nodes():
        if node == tree.root:
            continue
        ta, tb = a.transfer[node], b.transfer[node]
        out = np.zeros((ta.shape[0] + tb.shape[0], ta.shape[1] + tb.shape[1],
                        ta.shape[2] + tb.shape[2]))
        out[:ta.shape[0], :ta.shape[1], :ta.shape[2]] = ta
        out[ta.shape[0]:, ta.shape[1]:, ta.shape[2]:] = tb
        transfer[node] = out
    ra, rb = a.root_transfer, b.root_transfer
    root = np.zeros((ra.shape[0] + rb.shape[0], ra.shape[1] + rb.shape[1]))
    root[:ra.shape[0], :ra.shape[1]] = ra
    root[ra.shape[0]:, ra.shape[1]:] = rb
    return HTensor(tree=tree, dims=a.dims, frames=frames, transfer=transfer,
                   root_transfer=root)


def scale(c: float, h: HTensor) -> HTensor:
    """Scalar multiple; only the root transfer changes."""
    return HTensor(tree=h.tree, dims=h.dims, frames=h.frames, transfer=h.transfer,
                   root_transfer=float(c) * h.root_transfer, orthogonal=h.orthogonal)


def inner(a: HTensor, b: HTensor) -> float:
    """Euclidean inner product via a single bottom-up tree contraction."""
    _check_same_space(a, b)
    tree = a.tree
    w: dict[Node, np.ndarray] = {}
    for node in tree.bottom_up():
        if node == tree.root:
            continue
        if tree.is_leaf(node):
            w[node] = a.frames[node[0]].T @ b.frames[node[0]]
        else:
            left, right = tree.child_pair(node)
            w[node] = np.einsum("abk,ac,bd,cdl->kl", a.transfer[node], w[left],
                                w[right], b.transfer[node], optimize=True)
    left, right = tree.child_pair(tree.root)
    return float(np.einsum("kl,kK,lL,KL->", a.root_transfer, w[left], w[right],
                           b.root_transfer, optimize=True))


def norm(h: HTensor) -> float:
    return float(np.sqrt(max(inner(h, h), 0.0)))


# -- orthogonalization -------------------------------------------------------


def orthogonalize(h: HTensor) -> HTensor:
    """Equivalent representation with orthonormal frames and transfers.

    A QR sweep from the leaves absorbs all triangular factors towards the
    root; an SVD of the root coupling is then absorbed into the root children,
    which restores equal root ranks (a rank-deficient side would otherwise
    leave a rectangular root transfer) and leaves the root transfer diagonal
    with the root-edge singular values on it.  Entrywise the tensor is
    unchanged up to roundoff.
    """
    if h.orthogonal:
        return h
    tree = h.tree
    frames = dict(h.frames)
    transfer = dict(h.transfer)
    rfac: dict[Node, np.ndarray] = {}
    for node in tree.bottom_up():
        if node == tree.root:
            continue
        if tree.is_leaf(node):
            q, r = np.linalg.qr(frames[node[0]])
            frames[node[0]] = q
        else:
            left, right = tree.child_pair(node)
            b = np.einsum("xa,yb,abk->xyk", rfac[left], rfac[right],
                          transfer[node], optimize=True)
            q1, q2 = b.shape[0], b.shape[1]
            q, r = np.linalg.qr(b.reshape(q1 * q2, -1))
            transfer[node] = q.reshape(q1, q2, -1)
        rfac[node] = r

    left, right = tree.child_pair(tree.root)
    core = rfac[left] @ h.root_transfer @ rfac[right].T
    u, s, vt = _svd(core)

    def absorb(node: Node, basis: np.ndarray):
        if tree.is_leaf(node):
            frames[node[0]] = frames[node[0]] @ basis
        else:
            transfer[node] = np.einsum("abk,kK->abK", transfer[node], basis)

    absorb(left, u)
    absorb(right, vt.T)
    return HTensor(tree=tree, dims=h.dims, frames=frames, transfer=transfer,
                   root_transfer=np.diag(s), orthogonal=True)


def _gram_matrices(ho: HTensor) -> dict[Node, np.ndarray]:
    """Root-to-leaves Gram recursion on an orthogonalized representation.

    ``G[node]`` is the Gram matrix of the coefficient environment of the
    node's basis: the matricization at ``node`` equals ``U_node G U_node^T``
    up to a basis change, so its singular values are the square roots of
    ``G``'s eigenvalues.
    """
    if not ho.orthogonal:
        raise ValueError("gram recursion requires an orthogonalized tensor")
    tree = ho.tree
    g: dict[Node, np.ndarray] = {}
    left, right = tree.child_pair(tree.root)
    b = ho.root_transfer
    g[left] = b @ b.T
    g[right] = b.T @ b
    for node in tree.nodes:
        if node == tree.root or tree.is_leaf(node):
            continue
        t = ho.transfer[node]
        gn = g[node]
        l, r = tree.child_pair(node)
        g[l] = np.einsum("abk,kl,cbl->ac", t, gn, t, optimize=True)
        g[r] = np.einsum("abk,kl,adl->bd", t, gn, t, optimize=True)
    return {node: (m + m.T) / 2.0 for node, m in g.items()}


# -- spectra and hard truncation ----------------------------------------------


@dataclass(frozen=True)
class EdgeSpectrum:
    """Singular values of every effective matricization, with tail sums.

    ``sigmas[e]`` is the nonincreasing spectrum of edge ``e``;
    ``tail(e, r) = sqrt(sum_{k > r} sigma_k^2)`` is the certified error of
    truncating that edge alone to rank ``r``.
    """

    edges: EdgeList
    sigmas: tuple[np.ndarray, ...]
    _tails: tuple[np.ndarray, ...] = field(repr=False, default=())

    def __post_init__(self):
        sig = tuple(_ro(np.asarray(s, dtype=np.float64)) for s in self.sigmas)
        object.__setattr__(self, "sigmas", sig)
        tails = []
        for s in sig:
            sq = np.cumsum(s[::-1] ** 2)[::-1]  # ascending accumulation
            tails.append(_ro(np.sqrt(np.concatenate([sq, [0.0]]))))
        object.__setattr__(self, "_tails", tuple(tails))

    def __len__(self):
        return len(self.sigmas)

    def tail(self, e: int, r: int) -> float:
        t = self._tails[e]
        return float(t[min(int(r), len(t) - 1)])

    def tails(self, e: int) -> np.ndarray:
        return self._tails[e]

    def total_tail(self, ranks) -> float:
        """Certified error of truncating every edge ``e`` to ``ranks[e]``."""
        return float(np.sqrt(sum(self.tail(e, r) ** 2
                                 for e, r in enumerate(ranks))))

    @property
    def max_rank(self) -> int:
        return max((len(s) for s in self.sigmas), default=0)


def edge_spectra(h: HTensor) -> EdgeSpectrum:
    """Exact edge singular values, computed without densification.

    The root edge uses the SVD of the root transfer — the same path the
    truncation routines take — so planned and realized ranks agree even when
    a singular value sits exactly at the numerical-zero cutoff.
    """
    ho = orthogonalize(h)
    grams = _gram_matrices(ho)
    root_pair = ho.tree.child_pair(ho.tree.root)
    s_root = _svd(ho.root_transfer)[1]
    sigmas = []
    for node in ho.edge_list:
        if node in root_pair:
            sigmas.append(s_root)
        else:
            w = np.linalg.eigvalsh(grams[node])[::-1]
            sigmas.append(np.sqrt(np.clip(w, 0.0, None)))
    return EdgeSpectrum(edges=ho.edge_list, sigmas=tuple(sigmas))


def _projection_data(ho: HTensor):
    """Per-edge spectra plus the truncation bases for every non-root node.

    The two root children are factored jointly (SVD of the root transfer) so
    their bases stay consistently paired; every other node uses the
    eigenvectors of its Gram matrix, ordered by descending eigenvalue.
    """
    tree = ho.tree
    grams = _gram_matrices(ho)
    vectors: dict[Node, np.ndarray] = {}
    left, right = tree.child_pair(tree.root)
    u, s, vt = _svd(ho.root_transfer)
    vectors[left] = u
    vectors[right] = vt.T
    sig_node: dict[Node, np.ndarray] = {left: s}
    for node in grams:
        if node in (left, right):
            continue
        w, q = np.linalg.eigh(grams[node])
        w, q = w[::-1], q[:, ::-1]
        vectors[node] = q
        sig_node[node] = np.sqrt(np.clip(w, 0.0, None))
    edges = ho.edge_list
    spectrum = EdgeSpectrum(edges=edges, sigmas=tuple(sig_node[n] for n in edges))
    return spectrum, vectors


def _project(ho: HTensor, vectors: dict[Node, np.ndarray], node_ranks: dict[Node, int]) -> HTensor:
    """Apply the per-edge rank-``r`` truncation projections in one pass.

    ``node_ranks`` may violate the child-product bound (the certified error
    bound does not need it); any overcomplete transfer is repaired afterwards
    by absorbing a QR factor into its parent, which changes nothing
    entrywise.
    """
    tree = ho.tree

    def basis(node: Node) -> np.ndarray:
        v = vectors[node]
        return v[:, :min(node_ranks[node], v.shape[1])]

    frames = {}
    for i in range(tree.d):
        frames[i] = ho.frames[i] @ basis((i,))
    transfer = {}
    for node in tree.interior_nodes():
        if node == tree.root:
            continue
        left, right = tree.child_pair(node)
        transfer[node] = np.einsum("abk,aA,bB,kK->ABK", ho.transfer[node],
                                   basis(left), basis(right), basis(node),
                                   optimize=True)
    left, right = tree.child_pair(tree.root)
    root = basis(left).T @ ho.root_transfer @ basis(right)

    # repair pass: restore r <= r_left * r_right where the requested ranks
    # overshoot, absorbing the redundancy upward (exact)
    parents = tree.parent_map()
    for node in tree.bottom_up():
        if node == tree.root or tree.is_leaf(node):
            continue
        b = transfer[node]
        r1, r2, r = b.shape
        if r <= r1 * r2:
            continue
        q, rr = np.linalg.qr(b.reshape(r1 * r2, r))
        transfer[node] = q.reshape(r1, r2, -1)
        parent = parents[node]
        pleft, _ = tree.child_pair(parent)
        if parent == tree.root:
            root = rr @ root if node == pleft else root @ rr.T
        elif node == pleft:
            transfer[parent] = np.einsum("xa,abk->xbk", rr, transfer[parent])
        else:
            transfer[parent] = np.einsum("xb,abk->axk", rr, transfer[parent])
    if root.shape[0] != root.shape[1]:
        u, s, vt = _svd(root)
        for node, bb in ((left, u), (right, vt.T)):
            if tree.is_leaf(node):
                frames[node[0]] = frames[node[0]] @ bb
            else:
                transfer[node] = np.einsum("abk,kK->abK", transfer[node], bb)
        root = np.diag(s)
    return HTensor(tree=tree, dims=ho.dims, frames=frames, transfer=transfer,
                   root_transfer=root)


def _cleaned_tails(spectrum: EdgeSpectrum):
    """Spectra with numerically-zero singular values removed from the tails.

    Returns per-edge (cleaned sigma, squared-tail array, numerical rank).
    Excluding sub-roundoff values from the tail sums keeps certified tails
    from being polluted by floating-point noise.
    """
    out = []
    for s in spectrum.sigmas:
        cutoff = ZERO_CUTOFF * s[0] if s.size else 0.0
        sc = np.where(s > cutoff, s, 0.0)
        sq = np.cumsum(sc[::-1] ** 2)[::-1]
        tails2 = np.concatenate([sq, [0.0]])
        out.append((sc, tails2, int(np.count_nonzero(sc))))
    return out


def _choose_ranks(cleaned, eta: float) -> tuple[list[int], float]:
    """Rank vector for a certified total tail <= eta.

    Among feasible vectors the maximal rank is minimal; ties are broken by an
    even per-edge split of the budget, repaired upward where needed, then a
    deterministic greedy trim minimizing the total stored parameters, and
    finally groups of equal singular values are never split when the cap
    permits keeping them together.
    """
    E = len(cleaned)
    num_ranks = [c[2] for c in cleaned]
    if eta == 0.0:
        ranks = num_ranks
        bound = float(np.sqrt(sum(c[1][r] for c, r in zip(cleaned, ranks))))
        return ranks, bound
    eta2 = (eta * (1.0 - 1e-12)) ** 2

    def total2(ranks) -> float:
        return float(sum(c[1][min(r, c[2])] for c, r in zip(cleaned, ranks)))

    # minimal feasible maximal rank
    m_star = 0
    while total2([m_star] * E) > eta2:
        m_star += 1
    caps = [min(m_star, nr) for nr in num_ranks]

    # even split of the budget, capped
    per_edge = eta2 / E
    ranks = []
    for (sc, tails2, nr), cap in zip(cleaned, caps):
        r = int(np.argmax(tails2 <= per_edge))
        ranks.append(min(r, cap))
    # repair upward until certified
    cur = total2(ranks)
    while cur > eta2:
        best, best_tail = -1, -1.0
        for e in range(E):
            if ranks[e] < caps[e]:
                t = cleaned[e][1][ranks[e]]
                if t > best_tail:
                    best, best_tail = e, t
        cur += cleaned[best][1][ranks[best] + 1] - cleaned[best][1][ranks[best]]
        ranks[best] += 1
    # greedy trim: drop ranks while the certificate still holds
    changed = True
    while changed:
        changed = False
        for e in range(E):
            tails2 = cleaned[e][1]
            while ranks[e] > 0 and cur - tails2[ranks[e]] + tails2[ranks[e] - 1] <= eta2:
                cur += tails2[ranks[e] - 1] - tails2[ranks[e]]
                ranks[e] -= 1
                changed = True
    # never split a group of equal singular values when the cap permits
    for e in range(E):
        sc = cleaned[e][0]
        while 0 < ranks[e] < caps[e] and sc[ranks[e]] >= sc[ranks[e] - 1] * (1.0 - 1e-12):
            cur += cleaned[e][1][ranks[e] + 1] - cleaned[e][1][ranks[e]]
            ranks[e] += 1
    return ranks, float(np.sqrt(max(cur, 0.0)))


def _stored_ranks_after_repair(tree: DimensionTree, edge_ranks) -> tuple[int, ...]:
    """Edge ranks actually stored once :func:`_project` repairs overshoots.

    A requested rank above the child product is reduced to it (the repair is
    exact, so the certified bound is unaffected), and the two root children
    end up sharing the smaller of their repaired ranks.
    """
    node_ranks = _node_rank_map(tree, edge_ranks)
    for node in tree.bottom_up():
        if node == tree.root or tree.is_leaf(node):
            continue
        left, right = tree.child_pair(node)
        node_ranks[node] = min(node_ranks[node],
                               node_ranks[left] * node_ranks[right])
    left, right = tree.child_pair(tree.root)
    node_ranks[left] = min(node_ranks[left], node_ranks[right])
    return tuple(node_ranks[n] for n in effective_edges(tree))


def plan_recompression(h: HTensor, eta: float):
    """Rank vector and certified error bound that :func:`recompress` realizes."""
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    nh = norm(h)
    edges = h.edge_list
    if nh == 0.0 or (eta > 0 and eta >= nh):
        return (0,) * len(edges), nh
    spectrum = edge_spectra(h)
    ranks, bound = _choose_ranks(_cleaned_tails(spectrum), eta)
    return _stored_ranks_after_repair(h.tree, ranks), bound


def recompress(h: HTensor, eta: float) -> HTensor:
    """Certified hard truncation: ``norm(h - recompress(h, eta)) <= eta``.

    The result is orthogonalized.  ``eta >= norm(h)`` yields the canonical
    zero tensor (its true error is exactly ``norm(h)``); ``eta = 0`` trims
    exactly the numerically-zero singular values, changing the tensor only at
    roundoff level.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    nh = norm(h)
    if nh == 0.0 or (eta > 0 and eta >= nh):
        return zero_htensor(h.tree, h.dims)
    ho = orthogonalize(h)
    spectrum, vectors = _projection_data(ho)
    ranks, _ = _choose_ranks(_cleaned_tails(spectrum), eta)
    if tuple(ranks) == ho.ranks:
        return ho
    node_ranks = _node_rank_map(ho.tree, ranks)
    return orthogonalize(_project(ho, vectors, node_ranks))


def truncate_to_ranks(h: HTensor, ranks) -> HTensor:
    """Hard truncation to a fixed edge-rank vector.

    The error is at most the total singular-value tail at ``ranks`` (see
    :meth:`EdgeSpectrum.total_tail`).  The target vector must be entrywise at
    most ``h.ranks`` and respect the child-product bound.
    """
    edges = h.edge_list
    ranks = [int(r) for r in ranks]
    if len(ranks) != len(edges):
        raise ValueError(f"expected {len(edges)} edge ranks, got {len(ranks)}")
    stored = h.ranks
    for e, (r, s) in enumerate(zip(ranks, stored)):
        if not 0 <= r <= s:
            raise ValueError(
                f"target rank {r} at edge {e} outside [0, {s}]"
            )
    node_ranks = _node_rank_map(h.tree, ranks)
    for node in h.tree.interior_nodes():
        if node == h.tree.root:
            continue
        left, right = h.tree.child_pair(node)
        if node_ranks[node] > node_ranks[left] * node_ranks[right]:
            raise ValueError(
                f"rank {node_ranks[node]} at {node} exceeds the child product "
                f"{node_ranks[left]}*{node_ranks[right]}"
            )
    ho = orthogonalize(h)
    _, vectors = _projection_data(ho)
    return _project(ho, vectors, node_ranks)


# -- contractions and coarsening ----------------------------------------------


@dataclass(frozen=True)
class ContractionSet:
    """Per-mode contraction values ``pi^(i)``.

    ``pis[i][k]`` is the norm of the slice of the tensor at mode-``i`` index
    ``k``; in particular ``norm(pis[i]) = norm(h)`` for every mode, and
    zeroing a set of slices changes the tensor by exactly the combined mass
    of the removed values of any single mode (and at most the combined mass
    across modes when several modes are restricted at once).
    """

    pis: tuple[np.ndarray, ...]

    def __post_init__(self):
        object.__setattr__(self, "pis",
                           tuple(_ro(np.asarray(p, dtype=np.float64)) for p in self.pis))

    def __len__(self):
        return len(self.pis)

    def __getitem__(self, i: int) -> np.ndarray:
        return self.pis[i]


def contractions(h: HTensor) -> ContractionSet:
    """Mode-frame contraction values, computed without densification."""
    ho = orthogonalize(h)
    grams = _gram_matrices(ho)
    pis = []
    for i in range(ho.d):
        u = ho.frames[i]
        g = grams[(i,)]
        vals = np.einsum("nk,kl,nl->n", u, g, u, optimize=True)
        pis.append(np.sqrt(np.clip(vals, 0.0, None)))
    return ContractionSet(pis=tuple(pis))


def select_support(pis, eta: float):
    """Support selection rule on raw contraction values.

    Keeps the ``N`` largest values across all modes (ties broken by mode then
    index), with ``N`` minimal such that the combined discarded mass ``s_N``
    is at most ``eta``.  Returns ``(sets, N, s_N)``.
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    pis = [np.asarray(p, dtype=np.float64) for p in pis]
    entries = [(p[k], i, k) for i, p in enumerate(pis) for k in range(len(p))]
    entries.sort(key=lambda t: (-t[0], t[1], t[2]))
    vals = np.array([t[0] for t in entries])
    suffix2 = np.concatenate([np.cumsum(vals[::-1] ** 2)[::-1], [0.0]])
    n_keep = int(np.argmax(suffix2 <= eta * eta))
    kept = entries[:n_keep]
    sets = tuple(tuple(sorted(k for _, i, k in kept if i == mode))
                 for mode in range(len(pis)))
    return sets, n_keep, float(np.sqrt(suffix2[n_keep]))


def plan_coarsening(h: HTensor, eta: float):
    """Support sets, kept count ``N`` and discarded mass for :func:`coarsen`.

    Delegates to :func:`select_support` on the tensor's contraction values;
    ``eta >= norm(h)`` short-circuits to the empty support with certificate
    ``norm(h)`` (the blockwise tail certificate is pessimistic there, while
    the true error of dropping everything is exactly the norm).
    """
    if eta < 0:
        raise ValueError(f"eta must be >= 0, got {eta}")
    nh = norm(h)
    if eta > 0 and eta >= nh:
        return tuple(() for _ in range(h.d)), 0, nh
    return select_support(contractions(h).pis, eta)


def coarsen(h: HTensor, eta: float) -> HTensor:
    """Certified support reduction: ``norm(h - coarsen(h, eta)) <= eta``.

    ``eta >= norm(h)`` yields the canonical zero tensor.  With ``eta = 0``
    only index slices of exactly zero contraction mass are removed, so the
    tensor is unchanged.
    """
    nh = norm(h)
    if eta > 0 and eta >= nh:
        return zero_htensor(h.tree, h.dims)
    sets, _, _ = plan_coarsening(h, eta)
    if all(len(s) == n for s, n in zip(sets, h.dims)):
        return h
    return restrict_support(h, sets)


def restrict_support(h: HTensor, sets) -> HTensor:
    """Zero all frame rows outside the given per-mode index sets (exact)."""
    if len(sets) != h.d:
        raise ValueError(f"expected {h.d} index sets, got {len(sets)}")
    frames = {}
    for i in range(h.d):
        keep = np.zeros(h.dims[i], dtype=bool)
        idx = np.asarray(sorted(int(k) for k in sets[i]), dtype=int)
        if idx.size:
            if idx[0] < 0 or idx[-1] >= h.dims[i]:
                raise IndexError(f"support set for mode {i} out of range")
            keep[idx] = True
        frames[i] = np.where(keep[:, None], h.frames[i], 0.0)
    return HTensor(tree=h.tree, dims=h.dims, frames=frames, transfer=h.transfer,
                   root_transfer=h.root_transfer)


# -- approximation-class diagnostics -----------------------------------------


def as_quasinorm(seq, s: float) -> float:
    """Quasi-norm ``sup_N (N+1)^s * tail_N`` of a nonnegative sequence,
    where ``tail_N`` is the l2 mass beyond the ``N`` largest entries."""
    if s <= 0:
        raise ValueError(f"decay exponent must be positive, got s={s}")
    a = np.sort(np.abs(np.asarray(seq, dtype=np.float64).ravel()))[::-1]
    tails = np.sqrt(np.concatenate([np.cumsum(a[::-1] ** 2)[::-1], [0.0]]))
    n = np.arange(len(tails), dtype=np.float64) + 1.0
    return float(np.max(n**s * tails))


def rank_quasinorm(spectrum: EdgeSpectrum, gamma) -> float:
    """Growth-weighted rank quasi-norm ``sup_r gamma(r) * t(r)`` where
    ``t(r)`` is the certified tail of the uniform rank-``r`` truncation.
    ``gamma`` is a callable or an array over ``r = 0, 1, ...``."""
    rmax = spectrum.max_rank
    if callable(gamma):
        g = np.array([float(gamma(r)) for r in range(rmax + 1)])
    else:
        g = np.asarray(gamma, dtype=np.float64)
        if len(g) < rmax + 1:
            raise ValueError(f"gamma must cover ranks 0..{rmax}")
        g = g[:rmax + 1]
    t = np.array([spectrum.total_tail([r] * len(spectrum)) for r in range(rmax + 1)])
    return float(np.max(g * t))
