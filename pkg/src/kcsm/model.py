"""Finite topologies, constraint rules, boundary conditions and models.

Vertices of a volume are dense ids ``0..n-1`` (segments left to right,
trees breadth first, boxes row major).  Vertices outside the volume that
some constraint reads are *frozen*: they get ids ``n..n_ext-1`` and carry
fixed spins given by the boundary condition.  For a rooted binary tree of
depth ``D`` the frozen layer is the breadth-first layer ``D+1``, so
``children(x) == (2x+1, 2x+2)`` holds uniformly on the extended index
space.
"""

from __future__ import annotations

import graphlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import BoundaryError, EmptyVolume, InvalidVertex, RuleError, ShapeError

SEGMENT = "segment"
TREE = "tree"
BOX = "box"
MAX_RADIUS = 3


@dataclass(frozen=True)
class Topology:
    kind: str
    shape: tuple[int, ...]
    origin: int = 0  # absolute coordinate of vertex 0 (segments only)

    def __post_init__(self):
        if self.kind not in (SEGMENT, TREE, BOX):
            raise ShapeError(f"unknown topology kind {self.kind!r}")
        if self.kind == SEGMENT and (len(self.shape) != 1 or self.shape[0] < 1):
            raise EmptyVolume("segment length must be >= 1")
        if self.kind == TREE and (len(self.shape) != 1 or self.shape[0] < 0):
            raise ShapeError("tree depth must be >= 0")
        if self.kind == BOX and (len(self.shape) != 2 or min(self.shape) < 1):
            raise EmptyVolume("box sides must be >= 1")

    @classmethod
    def segment(cls, length, origin=0):
        return cls(SEGMENT, (int(length),), int(origin))

    @classmethod
    def tree(cls, depth):
        return cls(TREE, (int(depth),))

    @classmethod
    def box(cls, nx, ny):
        return cls(BOX, (int(nx), int(ny)))

    @property
    def n_vertices(self):
        if self.kind == SEGMENT:
            return self.shape[0]
        if self.kind == TREE:
            return 2 ** (self.shape[0] + 1) - 1
        return self.shape[0] * self.shape[1]

    @property
    def depth(self):
        if self.kind != TREE:
            raise ShapeError("depth is defined for trees only")
        return self.shape[0]

    def check(self, x):
        if not 0 <= x < self.n_vertices:
            raise InvalidVertex(f"vertex {x} outside volume of size {self.n_vertices}")
        return x

    # segments
    def right(self, x):
        self.check(x)
        return x + 1 if x + 1 < self.n_vertices else None

    # trees (ids on the extended breadth-first index space)
    @staticmethod
    def children(x):
        return (2 * x + 1, 2 * x + 2)

    @staticmethod
    def parent(x):
        return None if x == 0 else (x - 1) // 2

    @staticmethod
    def level(x):
        return (x + 1).bit_length() - 1

    def subtree(self, x, max_level=None):
        """Breadth-first ids of the subtree rooted at ``x`` down to ``max_level``.

        ``max_level`` defaults to the frozen layer below the leaves.
        """
        if max_level is None:
            max_level = self.depth + 1
        out = []
        lo = hi = x
        for _ in range(self.level(x), max_level + 1):
            out.extend(range(lo, hi + 1))
            lo, hi = 2 * lo + 1, 2 * hi + 2
        return out

    def is_ancestor_or_self(self, a, b):
        """True iff ``b`` lies in the subtree rooted at ``a``."""
        while b > a:
            b = (b - 1) // 2
        return a == b


@dataclass(frozen=True)
class ConstraintRule:
    """Constraint indicator as a truth table over a neighbourhood template.

    Bit ``j`` of the table index is the spin at ``template[j]``; the rule
    is legal iff ``table[index] == 1``.  Segment templates are integer
    offsets, box templates ``(dx, dy)`` offsets, tree templates a subset
    of ``("left", "right")``.  The site itself is never in the template.
    """

    name: str
    template: tuple
    table: tuple[int, ...]

    def __post_init__(self):
        k = len(self.template)
        if len(self.table) != 2**k or any(v not in (0, 1) for v in self.table):
            raise RuleError("table must hold 2**len(template) entries in {0, 1}")
        if len(set(self.template)) != k:
            raise RuleError("template entries must be distinct")
        for off in self.template:
            if isinstance(off, str):
                if off not in ("left", "right"):
                    raise RuleError(f"unknown tree template entry {off!r}")
            elif isinstance(off, tuple):
                if off == (0, 0) or max(abs(off[0]), abs(off[1])) > MAX_RADIUS:
                    raise RuleError(f"box offset {off} invalid (radius <= {MAX_RADIUS}, nonzero)")
            elif off == 0 or abs(off) > MAX_RADIUS:
                raise RuleError(f"segment offset {off} invalid (radius <= {MAX_RADIUS}, nonzero)")

    @property
    def radius(self):
        r = 0
        for off in self.template:
            if isinstance(off, str):
                r = max(r, 1)
            elif isinstance(off, tuple):
                r = max(r, abs(off[0]), abs(off[1]))
            else:
                r = max(r, abs(off))
        return r

    def legal(self, neighbour_spins):
        code = 0
        for j, s in enumerate(neighbour_spins):
            code |= int(s) << j
        return bool(self.table[code])

    @classmethod
    def custom(cls, template, table, name="custom"):
        return cls(name, tuple(template), tuple(int(v) for v in table))

    @classmethod
    def from_predicate(cls, template, predicate, name="custom"):
        """Tabulate ``predicate(spins)`` over all neighbour assignments."""
        k = len(template)
        table = [int(bool(predicate(tuple((c >> j) & 1 for j in range(k))))) for c in range(2**k)]
        return cls(name, tuple(template), tuple(table))


EAST = ConstraintRule("east", (1,), (1, 0))
AD = ConstraintRule("ad", ("left", "right"), (1, 0, 0, 0))
FA1F = ConstraintRule("fa1f", (-1, 1), (1, 1, 1, 0))
NORTH_EAST = ConstraintRule("north-east", ((0, 1), (1, 0)), (1, 0, 0, 0))
UNCONSTRAINED = ConstraintRule("free", (1,), (1, 1))
RULES = {r.name: r for r in (EAST, AD, FA1F, NORTH_EAST, UNCONSTRAINED)}


@dataclass(frozen=True)
class BoundaryCondition:
    """Frozen spins outside the volume.

    ``values`` maps a frozen position to its spin; unlisted positions get
    ``default``.  Positions are absolute coordinates for segments,
    extended breadth-first ids for trees and ``(i, j)`` for boxes.  A
    sequence may be given instead of a mapping: it then lists the frozen
    spins in frozen-id order and its length must match exactly.
    """

    default: int = 0
    values: Mapping | Sequence | None = field(default=None, hash=False)

    def __post_init__(self):
        if self.default not in (0, 1):
            raise BoundaryError("default frozen spin must be 0 or 1")

    @classmethod
    def zeros(cls):
        return cls(0)

    @classmethod
    def ones(cls):
        return cls(1)

    def resolve(self, positions):
        if self.values is None:
            return np.full(len(positions), self.default, dtype=np.uint8)
        if isinstance(self.values, Mapping):
            unknown = set(self.values) - set(positions)
            if unknown:
                raise BoundaryError(f"boundary values at non-frozen positions {sorted(unknown)}")
            out = [self.values.get(pos, self.default) for pos in positions]
        else:
            if len(self.values) != len(positions):
                raise BoundaryError(
                    f"boundary lists {len(self.values)} spins, model has {len(positions)} frozen vertices"
                )
            out = list(self.values)
        if any(v not in (0, 1) for v in out):
            raise BoundaryError("frozen spins must be 0 or 1")
        return np.asarray(out, dtype=np.uint8)


@dataclass(frozen=True)
class Model:
    topology: Topology
    rule: ConstraintRule
    p: float
    bc: BoundaryCondition = BoundaryCondition()

    def __post_init__(self):
        if not 0.0 < self.p < 1.0:
            raise ValueError(f"density p must lie in (0, 1), got {self.p}")
        tree_rule = all(isinstance(o, str) for o in self.rule.template)
        if (self.topology.kind == TREE) != tree_rule:
            raise RuleError(f"rule {self.rule.name!r} does not fit a {self.topology.kind} topology")
        _ = self.frozen  # validate the boundary condition eagerly

    @property
    def q(self):
        return 1.0 - self.p

    @property
    def n(self):
        return self.topology.n_vertices

    def with_p(self, p):
        return replace(self, p=p)

    # -- compiled arrays -------------------------------------------------

    @cached_property
    def _layout(self):
        topo, rule = self.topology, self.rule
        n = topo.n_vertices
        k = len(rule.template)
        nbr = np.empty((n, k), dtype=np.int64)
        if topo.kind == TREE:
            positions = list(range(n, 2 * n + 1)) if k else []
            side = {"left": 1, "right": 2}
            for x in range(n):
                for j, off in enumerate(rule.template):
                    nbr[x, j] = 2 * x + side[off]
            return nbr, positions
        coords = {}
        if topo.kind == SEGMENT:
            for x in range(n):
                for j, off in enumerate(rule.template):
                    coords[(x, j)] = x + off
            inside = lambda c: 0 <= c < n
            to_id = lambda c: c
            absolute = lambda c: c + topo.origin
        else:
            nx, ny = topo.shape
            for x in range(n):
                i, jj = divmod(x, ny)
                for j, off in enumerate(rule.template):
                    coords[(x, j)] = (i + off[0], jj + off[1])
            inside = lambda c: 0 <= c[0] < nx and 0 <= c[1] < ny
            to_id = lambda c: c[0] * ny + c[1]
            absolute = lambda c: c
        outside = sorted({c for c in coords.values() if not inside(c)})
        frozen_id = {c: n + i for i, c in enumerate(outside)}
        for (x, j), c in coords.items():
            nbr[x, j] = to_id(c) if inside(c) else frozen_id[c]
        return nbr, [absolute(c) for c in outside]

    @property
    def neighbours(self):
        """(n, k) array of extended ids read by each site's constraint."""
        return self._layout[0]

    @cached_property
    def table(self):
        return np.asarray(self.rule.table, dtype=np.uint8)

    @property
    def frozen_positions(self):
        return self._layout[1]

    @cached_property
    def frozen(self):
        return self.bc.resolve(self.frozen_positions)

    @property
    def n_ext(self):
        return self.n + len(self.frozen_positions)

    @cached_property
    def labels(self):
        """Global labels (RNG stream ids) of every extended vertex."""
        topo = self.topology
        if topo.kind == SEGMENT:
            lab = [topo.origin + x for x in range(self.n)] + list(self.frozen_positions)
        elif topo.kind == TREE:
            lab = list(range(self.n_ext))
        else:
            lab = list(range(self.n)) + [
                (1 << 40) + (i + 64) * 4096 + (j + 64) for i, j in self.frozen_positions
            ]
        return np.asarray(lab, dtype=np.int64)

    def extend(self, config):
        """Volume configuration -> extended configuration with frozen spins appended."""
        config = np.asarray(config, dtype=np.uint8)
        if config.shape != (self.n,):
            raise ShapeError(f"configuration length {config.shape} != volume {self.n}")
        return np.concatenate([config, self.frozen])

    # -- serialisation ---------------------------------------------------

    def to_descriptor(self):
        topo = self.topology
        fields = [
            f"kind={topo.kind}",
            "shape=" + ",".join(map(str, topo.shape)),
            f"origin={topo.origin}",
            f"rule={self.rule.name}",
            f"p={self.p!r}",
            f"bc_default={self.bc.default}",
            "bc=" + ",".join(str(int(v)) for v in self.frozen),
        ]
        if self.rule.name not in RULES or RULES[self.rule.name] != self.rule:
            fields.append("template=" + ";".join(_format_offset(o) for o in self.rule.template))
            fields.append("table=" + "".join(map(str, self.rule.table)))
        return " ".join(fields)

    @classmethod
    def from_descriptor(cls, text):
        kv = dict(item.split("=", 1) for item in text.split())
        shape = tuple(int(v) for v in kv["shape"].split(","))
        topo = Topology(kv["kind"], shape, int(kv.get("origin", 0)))
        if "template" in kv:
            template = tuple(_parse_offset(o) for o in kv["template"].split(";"))
            rule = ConstraintRule(kv["rule"], template, tuple(int(c) for c in kv["table"]))
        else:
            rule = RULES[kv["rule"]]
        spins = [int(v) for v in kv["bc"].split(",")] if kv.get("bc") else []
        bc = BoundaryCondition(int(kv.get("bc_default", 0)), spins)
        return cls(topo, rule, float(kv["p"]), bc)


def _format_offset(o):
    if isinstance(o, tuple):
        return f"{o[0]}:{o[1]}"
    return str(o)


def _parse_offset(text):
    if text in ("left", "right"):
        return text
    if ":" in text:
        a, b = text.split(":")
        return (int(a), int(b))
    return int(text)


# -- builders -------------------------------------------------------------


def build_east_chain(length, bc=None, p=0.5, origin=0):
    """East model on ``length`` sites; site ``length-1`` reads the frozen spin at ``length``."""
    if length < 1:
        raise EmptyVolume("East chain needs at least one site")
    return Model(Topology.segment(length, origin), EAST, p, bc or BoundaryCondition.zeros())


def build_ad_tree(depth, bc=None, p=0.5):
    """AD model on the rooted binary tree of the given depth; leaves read the frozen layer."""
    if depth < 0:
        raise ShapeError("tree depth must be >= 0")
    return Model(Topology.tree(depth), AD, p, bc or BoundaryCondition.zeros())


def build_fa1f_chain(length, bc=None, p=0.5):
    if length < 1:
        raise EmptyVolume("FA-1f chain needs at least one site")
    return Model(Topology.segment(length), FA1F, p, bc or BoundaryCondition.zeros())


def build_segment(length, rule, bc=None, p=0.5, origin=0):
    if length < 1:
        raise EmptyVolume("segment needs at least one site")
    return Model(Topology.segment(length, origin), rule, p, bc or BoundaryCondition.zeros())


# -- queries --------------------------------------------------------------


def is_legal(model, config, x):
    """Constraint indicator at ``x`` on ``config`` extended by the boundary."""
    model.topology.check(x)
    ext = model.extend(config)
    return bool(model.table[_code(ext, model.neighbours[x])])


def legal_mask(model, config):
    ext = model.extend(config)
    return np.array([bool(model.table[_code(ext, row)]) for row in model.neighbours])


def _code(ext, row):
    code = 0
    for j, y in enumerate(row):
        code |= int(ext[y]) << j
    return code


def dependency_graph(model):
    """Edges x -> y (y in the volume) whenever the constraint at x reads y."""
    n = model.n
    return {x: sorted({int(y) for y in model.neighbours[x] if y < n}) for x in range(n)}


def orientedness_check(model):
    """True iff the constraint-dependency digraph over the volume is acyclic."""
    try:
        tuple(graphlib.TopologicalSorter(dependency_graph(model)).static_order())
    except graphlib.CycleError:
        return False
    return True
