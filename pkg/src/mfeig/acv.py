"""Approximate control variate estimators.

An estimator combines a high-fidelity mean with weighted differences of
low-fidelity means,

    Q = Q_0(z_0) + sum_m alpha_m (Q_m(z*_m) - Q_m(z_m)),

where the sample sets are unions of disjoint sample groups. For i.i.d.
samples the covariance of two sample means is ``C_mn |A & B| / (|A| |B|)``,
so the estimator variance depends on the allocation only through pairwise
intersection sizes of the sets.

Allocation families are parametrized by block sizes ``B_0..B_M`` and a tree
``gamma`` (``gamma[m-1]`` is the parent of model ``m``, rooted at 0):

GMF  nested prefixes, ``z*_m = z_parent``, ``z_m`` = prefix of length
     ``|z_parent| + B_m``. The chain tree is MFMC and the star tree ACVMF.
GRD  disjoint blocks, ``z*_m`` = block of the parent, ``z_m`` = block m. The
     chain tree with ``alpha = -1`` is MLMC.
GIS  ``z*_m = z_parent``, ``z_m = z_parent`` plus an independent block. The
     star tree is ACVIS.
"""

import itertools
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

COND_LIMIT = 1e12
RIDGE_SCALE = 1e-10

FAMILY_KINDS = {"MFMC": "GMF", "ACVMF": "GMF", "GMF": "GMF", "MLMC": "GRD", "GRD": "GRD", "ACVIS": "GIS", "GIS": "GIS"}
ALL_FAMILIES = ("MC", "MFMC", "MLMC", "ACVMF", "ACVIS", "GMF", "GRD", "GIS")


class SingularCovarianceError(np.linalg.LinAlgError):
    """The difference covariance is singular even after regularization."""


@dataclass(frozen=True, eq=False)
class AllocationMatrix:
    """Sample groups and their membership in each estimator set.

    Parameters
    ----------
    sizes : array (G,) of int
    z0 : array (G,) of bool
    zstar, z : array (G, M) of bool
        Column ``m-1`` flags the groups of ``z*_m`` and ``z_m``.

    A model whose two columns are both empty is excluded from the estimator.
    """

    sizes: np.ndarray
    z0: np.ndarray
    zstar: np.ndarray
    z: np.ndarray

    def __post_init__(self):
        sizes = np.asarray(self.sizes).reshape(-1)
        if np.issubdtype(sizes.dtype, np.floating) and np.all(sizes == np.floor(sizes)):
            sizes = sizes.astype(np.int64)
        z0 = np.asarray(self.z0, dtype=bool).reshape(-1)
        G = sizes.size
        zstar = np.asarray(self.zstar, dtype=bool).reshape(G, -1)
        z = np.asarray(self.z, dtype=bool).reshape(G, -1)
        if z0.size != G or zstar.shape != z.shape:
            raise ValueError("membership flags do not match the number of groups")
        if np.any(sizes < 0):
            raise ValueError("group sizes must be nonnegative")
        for name, val in (("sizes", sizes), ("z0", z0), ("zstar", zstar), ("z", z)):
            object.__setattr__(self, name, val)

    @property
    def n_low(self):
        return self.zstar.shape[1]

    @property
    def n_groups(self):
        return self.sizes.size

    def active_models(self):
        """Low-fidelity models (1-based) that take part in the estimator."""
        used = (self.zstar | self.z) & (self.sizes > 0)[:, None]
        return [m + 1 for m in range(self.n_low) if used[:, m].any()]

    def set_membership(self):
        """(G, 2M+1) membership: columns z0, z*_1, z_1, z*_2, z_2, ..."""
        cols = [self.z0]
        for m in range(self.n_low):
            cols += [self.zstar[:, m], self.z[:, m]]
        return np.stack(cols, axis=1)

    def intersections(self):
        b = self.set_membership().astype(float)
        return b.T @ (self.sizes[:, None] * b)

    def samples_per_model(self):
        """Distinct samples each model evaluates: (M+1,)."""
        out = [int(self.sizes[self.z0].sum())]
        for m in range(self.n_low):
            out.append(int(self.sizes[self.zstar[:, m] | self.z[:, m]].sum()))
        return np.array(out, dtype=np.int64)

    def evaluated_groups(self, m):
        """Boolean mask of the groups model ``m`` evaluates."""
        if m == 0:
            return self.z0.copy()
        return self.zstar[:, m - 1] | self.z[:, m - 1]

    def total_samples(self):
        used = self.z0 | self.zstar.any(axis=1) | self.z.any(axis=1)
        return int(self.sizes[used].sum())

    def validate(self, models=None):
        """Check the allocation invariants for ``models`` (default: active)."""
        if self.sizes[self.z0].sum() <= 0:
            raise ValueError("z0 is empty")
        for m in models if models is not None else self.active_models():
            zs = self.zstar[:, m - 1] & (self.sizes > 0)
            zm = self.z[:, m - 1] & (self.sizes > 0)
            if not zs.any():
                raise ValueError(f"z*_{m} is empty")
            if not zm.any():
                raise ValueError(f"z_{m} is empty")
            if np.array_equal(zs, zm):
                raise ValueError(f"z*_{m} and z_{m} are identical")

    def select(self, models):
        """Allocation restricted to low-fidelity ``models`` (1-based), in order."""
        idx = [m - 1 for m in models]
        return AllocationMatrix(self.sizes, self.z0, self.zstar[:, idx], self.z[:, idx])

    def to_groups(self):
        return [
            {
                "size": int(self.sizes[g]),
                "z0": bool(self.z0[g]),
                "zstar": [bool(v) for v in self.zstar[g]],
                "z": [bool(v) for v in self.z[g]],
            }
            for g in range(self.n_groups)
        ]

    @classmethod
    def from_groups(cls, groups, n_low=None):
        if not groups:
            raise ValueError("allocation has no groups")
        if n_low is None:
            n_low = len(groups[0]["zstar"])
        sizes = np.array([int(g["size"]) for g in groups], dtype=np.int64)
        z0 = [bool(g["z0"]) for g in groups]
        zstar = np.array([list(g["zstar"]) for g in groups], dtype=bool).reshape(len(groups), n_low)
        z = np.array([list(g["z"]) for g in groups], dtype=bool).reshape(len(groups), n_low)
        return cls(sizes, z0, zstar, z)


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """Utility-model covariance ``C`` and the sample count behind it."""

    matrix: np.ndarray
    n_samples: int = 0

    def __post_init__(self):
        c = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        if c.shape[0] != c.shape[1]:
            raise ValueError("covariance must be square")
        if not np.allclose(c, c.T, rtol=1e-12, atol=0.0):
            raise ValueError("covariance must be symmetric")
        if np.any(np.diag(c) < 0):
            raise ValueError("covariance diagonal must be nonnegative")
        object.__setattr__(self, "matrix", 0.5 * (c + c.T))

    def correlation(self):
        s = np.sqrt(np.diag(self.matrix))
        with np.errstate(invalid="ignore", divide="ignore"):
            return self.matrix / np.outer(s, s)


def _matrix(C):
    return C.matrix if isinstance(C, CovarianceEstimate) else np.atleast_2d(np.asarray(C, dtype=float))


def _covariances_from_intersections(C, inter):
    s = np.diag(inter)
    R = inter / np.outer(s, s)
    M = (inter.shape[0] - 1) // 2
    S = np.arange(1, 2 * M + 1, 2)
    Z = S + 1
    var0 = C[0, 0] * R[0, 0]
    cov_d0 = C[1:, 0] * (R[S, 0] - R[Z, 0])
    cov_dd = C[1:, 1:] * (R[np.ix_(S, S)] - R[np.ix_(S, Z)] - R[np.ix_(Z, S)] + R[np.ix_(Z, Z)])
    return cov_dd, cov_d0, var0


def component_covariances(C, A):
    """Covariances of the estimator components.

    Returns
    -------
    cov_dd : array (M, M)
        ``Cov[Delta_m, Delta_n]`` with ``Delta_m = Q_m(z*_m) - Q_m(z_m)``.
    cov_d0 : array (M,)
        ``Cov[Delta_m, Q_0(z_0)]``.
    var0 : float
        ``Var[Q_0(z_0)]``.
    """
    C = _matrix(C)
    if C.shape[0] != A.n_low + 1:
        raise ValueError("covariance and allocation disagree on the number of models")
    A.validate(models=range(1, A.n_low + 1))
    return _covariances_from_intersections(C, A.intersections())


def optimal_weights(cov_dd, cov_d0):
    """Variance-minimizing weights ``alpha* = -cov_dd^-1 cov_d0``.

    A badly conditioned ``cov_dd`` gets a ridge of ``1e-10 * trace / M`` with a
    warning; if it is still singular :class:`SingularCovarianceError` is raised
    so the caller can drop a model.
    """
    cov_dd = np.atleast_2d(np.asarray(cov_dd, dtype=float))
    cov_d0 = np.atleast_1d(np.asarray(cov_d0, dtype=float))
    M = cov_d0.size
    if M == 0:
        return np.zeros(0)
    if not np.all(np.isfinite(cov_dd)) or not np.all(np.isfinite(cov_d0)):
        raise SingularCovarianceError("non-finite component covariance")
    cond = np.linalg.cond(cov_dd)
    if not cond <= COND_LIMIT:
        ridge = RIDGE_SCALE * np.trace(cov_dd) / M
        warnings.warn(f"ill-conditioned difference covariance (cond={cond:.3g}); adding ridge {ridge:.3g}", RuntimeWarning, stacklevel=2)
        cov_dd = cov_dd + ridge * np.eye(M)
        if not ridge > 0 or not np.linalg.cond(cov_dd) <= COND_LIMIT:
            raise SingularCovarianceError("difference covariance is singular; drop a redundant model")
    return -np.linalg.solve(cov_dd, cov_d0)


def estimator_variance(C, A, alpha=None):
    """Variance of the estimator with weights ``alpha`` (default: optimal).

    Excluded models (no samples) are ignored; ``alpha`` then holds weights
    for the active models only or for all M models.
    """
    C = _matrix(C)
    active = A.active_models()
    idx = [0] + active
    sub = A.select(active)
    cov_dd, cov_d0, var0 = component_covariances(C[np.ix_(idx, idx)], sub)
    if alpha is None:
        if not active:
            return float(var0)
        a = optimal_weights(cov_dd, cov_d0)
        return float(max(var0 + a @ cov_d0, 0.0))
    a = np.atleast_1d(np.asarray(alpha, dtype=float))
    if a.size == A.n_low and a.size != len(active):
        a = a[[m - 1 for m in active]]
    return float(var0 + 2.0 * a @ cov_d0 + a @ cov_dd @ a)


def weights_for(C, A):
    """Optimal weights for all M models (zero for excluded models)."""
    C = _matrix(C)
    alpha = np.zeros(A.n_low)
    active = A.active_models()
    if active:
        idx = [0] + active
        cov_dd, cov_d0, _ = component_covariances(C[np.ix_(idx, idx)], A.select(active))
        alpha[[m - 1 for m in active]] = optimal_weights(cov_dd, cov_d0)
    return alpha


def _set_mean(values, mask, sizes):
    total = 0.0
    count = 0
    for g in np.flatnonzero(mask):
        if sizes[g] == 0:
            continue
        v = values[g]
        if v is None:
            raise ValueError(f"missing evaluations for group {g}")
        v = np.asarray(v, dtype=float)
        if v.shape[0] != sizes[g]:
            raise ValueError(f"group {g} has {v.shape[0]} values, expected {sizes[g]}")
        total = total + v.sum(axis=0)
        count += sizes[g]
    return total / count


def evaluate_acv(u_values, alpha, A):
    """Assemble the estimate from per-group utility values.

    Parameters
    ----------
    u_values : sequence
        ``u_values[m][g]`` holds model ``m``'s values on group ``g`` (leading
        axis the group's samples; trailing axes, e.g. designs, broadcast), or
        ``None`` for groups the model does not evaluate.
    alpha : array (M,)
    A : AllocationMatrix
    """
    alpha = np.atleast_1d(np.asarray(alpha, dtype=float))
    est = _set_mean(u_values[0], A.z0, A.sizes)
    for m in range(1, A.n_low + 1):
        a = alpha[m - 1] if alpha.size else 0.0
        if a == 0.0 or m not in A.active_models():
            continue
        star = _set_mean(u_values[m], A.zstar[:, m - 1], A.sizes)
        plain = _set_mean(u_values[m], A.z[:, m - 1], A.sizes)
        est = est + a * (star - plain)
    return est


# ---------------------------------------------------------------- families


def valid_trees(M):
    """All parent vectors of trees on nodes ``0..M`` rooted at 0."""
    out = []
    for gamma in itertools.product(range(M + 1), repeat=M):
        ok = True
        for m in range(1, M + 1):
            seen, node = set(), m
            while node != 0:
                if node in seen or gamma[node - 1] == node:
                    ok = False
                    break
                seen.add(node)
                node = gamma[node - 1]
            if not ok:
                break
        if ok:
            out.append(tuple(gamma))
    return out


def _path(gamma, m):
    """Nodes from ``m`` up to and including the root 0."""
    nodes = [m]
    while m != 0:
        m = gamma[m - 1]
        nodes.append(m)
    return nodes


@dataclass(frozen=True)
class FamilyStructure:
    """Block parametrization of one allocation family and tree."""

    kind: str
    tree: tuple
    eval_matrix: np.ndarray = field(repr=False)
    block_sets: np.ndarray = field(repr=False, default=None)

    @property
    def n_low(self):
        return len(self.tree)

    def prefix_lengths(self, blocks):
        # sets z0, z*_1, z_1, ... as prefix lengths (GMF only)
        n = self.eval_matrix @ blocks
        lengths = [n[0]]
        for m in range(1, self.n_low + 1):
            lengths += [n[self.tree[m - 1]], n[m]]
        return np.array(lengths)

    def intersections(self, blocks):
        blocks = np.asarray(blocks, dtype=float)
        if self.kind == "GMF":
            L = self.prefix_lengths(blocks)
            return np.minimum.outer(L, L)
        b = self.block_sets
        return (b * blocks[None, :]) @ b.T

    def eval_counts(self, blocks):
        return self.eval_matrix @ np.asarray(blocks, dtype=float)

    def allocation(self, blocks):
        """Integer block sizes to an :class:`AllocationMatrix`."""
        blocks = np.asarray(blocks, dtype=np.int64)
        M = self.n_low
        if self.kind == "GMF":
            L = self.prefix_lengths(blocks).astype(np.int64)
            bounds = np.unique(np.concatenate([[0], L]))
            lo, hi = bounds[:-1], bounds[1:]
            member = hi[:, None] <= L[None, :]
            sizes = hi - lo
        else:
            member = self.block_sets.T.astype(bool)
            sizes = blocks
        return AllocationMatrix(sizes, member[:, 0], member[:, 1::2][:, :M], member[:, 2::2][:, :M])


def family_structure(kind, tree):
    tree = tuple(int(t) for t in tree)
    M = len(tree)
    E = np.zeros((M + 1, M + 1))
    E[0, 0] = 1.0
    if kind in ("GMF", "GIS"):
        for m in range(1, M + 1):
            E[m, _path(tree, m)] = 1.0
    elif kind == "GRD":
        for m in range(1, M + 1):
            E[m, m] = 1.0
            E[m, tree[m - 1]] = 1.0
    else:
        raise ValueError(f"unknown family kind {kind!r}")
    sets = None
    if kind == "GRD":
        sets = np.zeros((2 * M + 1, M + 1))
        sets[0, 0] = 1.0
        for m in range(1, M + 1):
            sets[2 * m - 1, tree[m - 1]] = 1.0
            sets[2 * m, m] = 1.0
    elif kind == "GIS":
        sets = np.zeros((2 * M + 1, M + 1))
        sets[0, 0] = 1.0
        for m in range(1, M + 1):
            parent = tree[m - 1]
            sets[2 * m - 1, _path(tree, parent)] = 1.0
            sets[2 * m, _path(tree, m)] = 1.0
    return FamilyStructure(kind, tree, E, sets)


def family_candidates(M, families=ALL_FAMILIES):
    """(label, structure, fixed_alpha) for every requested family on M models."""
    chain = tuple(range(M))
    star = (0,) * M
    seen = set()
    out = []

    def add(label, kind, tree, fixed):
        key = (kind, tree, fixed is not None)
        if key in seen:
            return
        seen.add(key)
        out.append((label, family_structure(kind, tree), fixed))

    if M == 0:
        return out
    for fam in families:
        if fam == "MC":
            continue
        if fam not in FAMILY_KINDS:
            raise ValueError(f"unknown family {fam!r}")
        if fam == "MFMC":
            add(fam, "GMF", chain, None)
        elif fam == "MLMC":
            add(fam, "GRD", chain, -np.ones(M))
        elif fam == "ACVMF":
            add(fam, "GMF", star, None)
        elif fam == "ACVIS":
            add(fam, "GIS", star, None)
        else:
            for tree in valid_trees(M):
                add(fam, fam, tree, None)
    return out


def special_case_allocation(family, sizes):
    """MFMC or MLMC allocation from per-model sample counts.

    MFMC: ``sizes`` are the nested set sizes ``N_0 < N_1 < ... < N_M``.
    MLMC: ``sizes`` are the level sample counts; returns ``alpha = -1``.

    Returns
    -------
    allocation : AllocationMatrix
    alpha : array or None
        Fixed weights for MLMC, ``None`` for MFMC.
    """
    sizes = np.asarray(sizes, dtype=np.int64).reshape(-1)
    M = sizes.size - 1
    if M < 0 or np.any(sizes < 1):
        raise ValueError("sizes must be positive")
    chain = tuple(range(M))
    if family == "MFMC":
        if np.any(np.diff(sizes) <= 0):
            raise ValueError("MFMC sizes must be strictly increasing")
        blocks = np.concatenate([[sizes[0]], np.diff(sizes)])
        return family_structure("GMF", chain).allocation(blocks), None
    if family == "MLMC":
        return family_structure("GRD", chain).allocation(sizes), -np.ones(M)
    raise ValueError(f"unknown special-case family {family!r}")


# ---------------------------------------------------------------- design record


@dataclass(eq=False)
class EstimatorDesign:
    """Frozen estimator hyperparameters.

    Attributes
    ----------
    allocation : AllocationMatrix
    alpha : array (M,)
    n_in : array (M+1,)
        Inner-loop sizes of the utility models.
    projected_variance : float
    family : str
    costs : array (M+1,)
        Cost of one utility evaluation per model.
    covariance : array (M+1, M+1)
        The covariance the design was optimized for.
    tree : tuple
        Parent vector of the family.
    fixed_alpha : bool
        True when ``alpha`` is prescribed (MLMC) rather than optimal.
    """

    allocation: AllocationMatrix
    alpha: np.ndarray
    n_in: np.ndarray
    projected_variance: float
    family: str
    costs: np.ndarray
    covariance: np.ndarray
    tree: tuple = ()
    fixed_alpha: bool = False
    reuse_inner: bool = False
    budget: float = float("nan")

    @property
    def n_models(self):
        return self.allocation.n_low + 1

    @property
    def cost(self):
        return float(np.dot(self.costs, self.allocation.samples_per_model()))

    def recompute_variance(self):
        return estimator_variance(self.covariance, self.allocation, self.alpha if self.fixed_alpha else None)

    def to_dict(self):
        return {
            "family": self.family,
            "tree": list(self.tree),
            "groups": self.allocation.to_groups(),
            "alpha": [float(a) for a in self.alpha],
            "fixed_alpha": self.fixed_alpha,
            "n_in": [int(n) for n in self.n_in],
            "reuse_inner": self.reuse_inner,
            "costs": [float(c) for c in self.costs],
            "covariance": [[float(v) for v in row] for row in self.covariance],
            "projected_variance": float(self.projected_variance),
            "cost": self.cost,
            "budget": float(self.budget) if np.isfinite(self.budget) else None,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, allow_nan=False)

    @classmethod
    def from_dict(cls, d):
        n_low = len(d["n_in"]) - 1
        return cls(
            allocation=AllocationMatrix.from_groups(d["groups"], n_low),
            alpha=np.array(d["alpha"], dtype=float).reshape(n_low),
            n_in=np.array(d["n_in"], dtype=np.int64),
            projected_variance=float(d["projected_variance"]),
            family=str(d["family"]),
            costs=np.array(d["costs"], dtype=float),
            covariance=np.array(d["covariance"], dtype=float),
            tree=tuple(d.get("tree", ())),
            fixed_alpha=bool(d.get("fixed_alpha", False)),
            reuse_inner=bool(d.get("reuse_inner", False)),
            budget=float("nan") if d.get("budget") is None else float(d["budget"]),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))
