"""Cell topologies, candidate-op menus and genotype derivation."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

__all__ = [
    "DARTS_OPS", "NB201_OPS", "REGISTERED_OPS", "ZERO_OP", "SPACE_NAMES",
    "CellSpec", "SearchSpace", "Genotype", "GenoEdge",
    "build_space", "derive_genotype", "count_op", "edge_key",
    "init_alpha", "alpha_weights",
]

ZERO_OP = "none"
# the DARTS menu as published for this method: seven ops, no zero op
DARTS_OPS = ("max_pool_3x3", "avg_pool_3x3", "skip_connect",
             "sep_conv_3x3", "sep_conv_5x5", "dil_conv_3x3", "dil_conv_5x5")
NB201_OPS = ("none", "skip_connect", "nor_conv_1x1", "nor_conv_3x3", "avg_pool_3x3")
REGISTERED_OPS = tuple(dict.fromkeys(("none",) + DARTS_OPS + NB201_OPS + ("noise",)))
SPACE_NAMES = ("darts", "nasbench201", "s1", "s2", "s3", "s4", "custom")
RULES = ("darts", "nasbench201")


def edge_key(kind: str, src: int, dst: int) -> str:
    return f"{kind}.{src}-{dst}"


@dataclass(frozen=True)
class CellSpec:
    num_input_nodes: int
    num_intermediate_nodes: int
    edges: tuple[tuple[int, int], ...]
    ops: tuple[tuple[str, ...], ...]
    reduction: bool = False

    def __post_init__(self):
        if len(self.edges) != len(self.ops):
            raise ValueError("one op list per edge required")
        n_nodes = self.num_input_nodes + self.num_intermediate_nodes
        for (src, dst), menu in zip(self.edges, self.ops):
            if not 0 <= src < dst < n_nodes or dst < self.num_input_nodes:
                raise ValueError(f"edge {src}->{dst} violates topological numbering")
            if not menu:
                raise ValueError(f"edge {src}->{dst} has no candidate ops")
            bad = [o for o in menu if o not in REGISTERED_OPS]
            if bad:
                raise ValueError(f"unknown op name(s) {bad} on edge {src}->{dst}")

    @property
    def num_nodes(self) -> int:
        return self.num_input_nodes + self.num_intermediate_nodes

    def incoming(self, dst: int) -> list[int]:
        return [e for e, (_, d) in enumerate(self.edges) if d == dst]


@dataclass(frozen=True)
class SearchSpace:
    name: str
    rule: str
    cells: Mapping[str, CellSpec] = field(hash=False)

    @property
    def kinds(self) -> list[str]:
        return list(self.cells)

    def ops_of(self, kind: str, src: int, dst: int) -> tuple[str, ...]:
        cell = self.cells[kind]
        return cell.ops[cell.edges.index((src, dst))]

    def alpha_shapes(self) -> dict[str, int]:
        out = {}
        for kind, cell in self.cells.items():
            for (src, dst), menu in zip(cell.edges, cell.ops):
                out[edge_key(kind, src, dst)] = len(menu)
        return out

    @property
    def num_logits(self) -> int:
        return sum(self.alpha_shapes().values())


def _dag_edges(n_in: int, n_mid: int) -> tuple[tuple[int, int], ...]:
    return tuple((i, j) for j in range(n_in, n_in + n_mid) for i in range(j))


def _darts_cells(menus: Sequence[Sequence[str]] | Sequence[str], n_mid: int = 4,
                 per_kind: Mapping[str, Sequence[Sequence[str]]] | None = None) -> dict[str, CellSpec]:
    edges = _dag_edges(2, n_mid)
    cells = {}
    for kind, red in (("normal", False), ("reduce", True)):
        if per_kind is not None:
            ops = tuple(tuple(m) for m in per_kind[kind])
        else:
            ops = tuple(tuple(menus) for _ in edges)
        cells[kind] = CellSpec(2, n_mid, edges, ops, red)
    return cells


def build_space(name: str, overrides: Mapping | None = None) -> SearchSpace:
    """Construct one of the named search spaces.

    ``overrides`` may contain ``remove`` (op names dropped from every edge),
    ``ops`` (replacement uniform menu), ``intermediate_nodes``, and for
    ``s1``/``custom`` an ``edge_ops`` table: either a list of per-edge menus
    used for every cell kind or a ``{kind: [menus]}`` mapping. ``custom``
    also reads ``topology`` (``darts`` or ``nasbench201``).
    """
    ov = dict(overrides or {})
    if name not in SPACE_NAMES:
        raise ValueError(f"unknown search space {name!r}; expected one of {SPACE_NAMES}")
    nb_topology = name == "nasbench201" or (name == "custom" and ov.get("topology") == "nasbench201")
    n_mid_default = 3 if nb_topology else 4
    n_mid = int(ov.get("intermediate_nodes", n_mid_default))

    if name == "nasbench201":
        menu = tuple(ov.get("ops", NB201_OPS))
        edges = _dag_edges(1, n_mid)
        cells = {"cell": CellSpec(1, n_mid, edges, tuple(menu for _ in edges))}
        rule = "nasbench201"
    elif name in ("darts", "s2", "s3", "s4"):
        default = {
            "darts": DARTS_OPS,
            "s2": ("sep_conv_3x3", "skip_connect"),
            "s3": ("none", "sep_conv_3x3", "skip_connect"),
            "s4": ("sep_conv_3x3", "noise"),
        }[name]
        cells = _darts_cells(tuple(ov.get("ops", default)), n_mid)
        rule = "darts"
    else:
        topology = ov.get("topology", "darts") if name == "custom" else "darts"
        table = ov.get("edge_ops")
        if table is None:
            raise ValueError(f"space {name!r} needs per-edge op lists in overrides['edge_ops']")
        if topology == "nasbench201":
            edges = _dag_edges(1, n_mid)
            menus = table["cell"] if isinstance(table, Mapping) else table
            if len(menus) != len(edges):
                raise ValueError(f"expected {len(edges)} edge menus, got {len(menus)}")
            cells = {"cell": CellSpec(1, n_mid, edges, tuple(tuple(m) for m in menus))}
            rule = "nasbench201"
        elif topology == "darts":
            n_edges = len(_dag_edges(2, n_mid))
            per_kind = table if isinstance(table, Mapping) else {"normal": table, "reduce": table}
            for kind in ("normal", "reduce"):
                if len(per_kind[kind]) != n_edges:
                    raise ValueError(f"expected {n_edges} edge menus for {kind}, got {len(per_kind[kind])}")
            cells = _darts_cells((), n_mid, per_kind)
            rule = "darts"
        else:
            raise ValueError(f"unknown topology {topology!r}")

    remove = set(ov.get("remove", ()))
    if remove:
        unknown = remove - set(REGISTERED_OPS)
        if unknown:
            raise ValueError(f"unknown op name(s) to remove: {sorted(unknown)}")
        cells = {
            k: CellSpec(c.num_input_nodes, c.num_intermediate_nodes, c.edges,
                        tuple(tuple(o for o in m if o not in remove) for m in c.ops), c.reduction)
            for k, c in cells.items()
        }
    return SearchSpace(name, rule, cells)


# --- architecture parameters ------------------------------------------------

def init_alpha(space: SearchSpace, rng: np.random.Generator, scale: float = 1e-3) -> dict[str, np.ndarray]:
    """Zero logits plus small Gaussian jitter, one vector per edge."""
    return {k: scale * rng.standard_normal(m) for k, m in sorted(space.alpha_shapes().items())}


def alpha_weights(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


# --- genotypes --------------------------------------------------------------

@dataclass(frozen=True, order=True)
class GenoEdge:
    cell: str
    src: int
    dst: int
    op: str


@dataclass(frozen=True)
class Genotype:
    space: str
    rule: str
    edges: tuple[GenoEdge, ...]

    def to_dict(self) -> dict:
        multi = len({e.cell for e in self.edges}) > 1 or any(e.cell != "cell" for e in self.edges)
        rows = []
        for e in self.edges:
            row = {"from": e.src, "to": e.dst, "op": e.op}
            if multi:
                row["cell"] = e.cell
            rows.append(row)
        return {"space": self.space, "rule": self.rule, "edges": rows}

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Genotype":
        edges = tuple(sorted(
            GenoEdge(str(r.get("cell", "cell")), int(r["from"]), int(r["to"]), str(r["op"]))
            for r in d["edges"]))
        return cls(str(d["space"]), str(d["rule"]), edges)

    @classmethod
    def from_json(cls, text: str) -> "Genotype":
        return cls.from_dict(json.loads(text))

    def ops(self, cell: str | None = None) -> list[str]:
        return [e.op for e in self.edges if cell is None or e.cell == cell]

    def arch_string(self) -> str:
        """NAS-Bench-201 style ``|op~0|+|op~0|op~1|+...`` for single-cell genotypes."""
        if self.rule != "nasbench201":
            raise ValueError("arch strings exist only for nasbench201 genotypes")
        by_dst: dict[int, list[GenoEdge]] = {}
        for e in self.edges:
            by_dst.setdefault(e.dst, []).append(e)
        groups = []
        for dst in sorted(by_dst):
            groups.append("|" + "|".join(f"{e.op}~{e.src}" for e in sorted(by_dst[dst], key=lambda e: e.src)) + "|")
        return "+".join(groups)

    @classmethod
    def from_arch_string(cls, text: str, space: str = "nasbench201") -> "Genotype":
        edges = []
        for dst, group in enumerate(text.strip().split("+"), start=1):
            for token in filter(None, group.split("|")):
                op, src = token.rsplit("~", 1)
                edges.append(GenoEdge("cell", int(src), dst, op))
        return cls(space, "nasbench201", tuple(sorted(edges)))

    def canonical(self) -> str:
        if self.rule == "nasbench201":
            return self.arch_string()
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def derive_genotype(alpha: Mapping[str, np.ndarray], space: SearchSpace) -> Genotype:
    """Discretize edge logits.

    nasbench201 rule: argmax op per edge. darts rule: per intermediate node
    keep the two incoming edges whose best non-zero op weight is largest,
    then that op. Ties go to the lowest op index, then the lowest source.
    """
    chosen: list[GenoEdge] = []
    for kind, cell in space.cells.items():
        weights = {}
        for (src, dst), menu in zip(cell.edges, cell.ops):
            a = np.asarray(alpha[edge_key(kind, src, dst)], dtype=np.float64)
            if a.shape != (len(menu),) or not np.all(np.isfinite(a)):
                raise ValueError(f"alpha for {edge_key(kind, src, dst)} must be {len(menu)} finite logits")
            weights[(src, dst)] = alpha_weights(a)

        if space.rule == "nasbench201":
            for (src, dst), menu in zip(cell.edges, cell.ops):
                w = weights[(src, dst)]
                chosen.append(GenoEdge(kind, src, dst, menu[int(np.argmax(w))]))
            continue

        for dst in range(cell.num_input_nodes, cell.num_nodes):
            scored = []
            for e in cell.incoming(dst):
                src = cell.edges[e][0]
                menu = cell.ops[e]
                w = weights[(src, dst)]
                best_k, best_w = -1, -np.inf
                for k, op in enumerate(menu):
                    if op != ZERO_OP and w[k] > best_w:
                        best_k, best_w = k, w[k]
                if best_k < 0:
                    continue
                scored.append((-best_w, src, menu[best_k]))
            scored.sort(key=lambda t: (t[0], t[1]))
            for _, src, op in scored[:2]:
                chosen.append(GenoEdge(kind, src, dst, op))
    return Genotype(space.name, space.rule, tuple(sorted(chosen)))


def count_op(genotype: Genotype, op_name: str, cell: str | None = None) -> int:
    if op_name not in REGISTERED_OPS:
        raise ValueError(f"unknown op name {op_name!r}")
    return sum(1 for e in genotype.edges if e.op == op_name and (cell is None or e.cell == cell))
