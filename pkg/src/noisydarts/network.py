"""Supernets and discrete networks built from :mod:`noisydarts.searchspace` cells.

Two macro layouts are supported. The ``nasbench201`` rule stacks single-input
cells in stages separated by residual reduction blocks; the ``darts`` rule
stacks two-input cells whose output concatenates the intermediate nodes, with
reduction cells at one and two thirds of the depth.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

import noisydarts.functional as F
from .noise import SKIP_OP as SKIP
from .noise import NoiseStream
from .searchspace import ZERO_OP, CellSpec, Genotype, SearchSpace, alpha_weights, edge_key
from .tensor import ShapeError, Tensor, no_grad

__all__ = [
    "Context", "ParamStore", "Supernet", "DiscreteNet", "mixed_edge_forward",
    "node_aggregate", "make_op",
]


@dataclass
class Context:
    """Forward-pass switches.

    ``training`` selects batch statistics in batch norm; ``perturb`` (if set)
    is called on every candidate-op output as ``perturb(op_name, out, edge)``;
    ``observe`` sees the unperturbed outputs. ``noise_stream`` feeds the
    ``noise`` candidate op, which emits zeros when it is ``None``.
    """

    training: bool = True
    update_stats: bool = True
    perturb: Callable[[str, Tensor, str], Tensor] | None = None
    observe: Callable[[str, str, Tensor], None] | None = None
    noise_stream: NoiseStream | None = None
    noise_op_sigma: float = 1.0

    @classmethod
    def eval(cls) -> "Context":
        return cls(training=False, update_stats=False)

    @classmethod
    def probe(cls, **kw) -> "Context":
        """Batch statistics without touching running buffers; no noise."""
        return cls(training=True, update_stats=False, **kw)


class ParamStore:
    """Named weight tensors plus non-trainable buffers."""

    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def _add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter {name}")
        t = Tensor(data, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def conv(self, name: str, c_out: int, c_in_per_group: int, k: int) -> Tensor:
        fan_in = c_in_per_group * k * k
        return self._add(name, self.rng.standard_normal((c_out, c_in_per_group, k, k)) * np.sqrt(2.0 / fan_in))

    def linear(self, name: str, c_out: int, c_in: int) -> tuple[Tensor, Tensor]:
        bound = 1.0 / np.sqrt(c_in)
        w = self._add(name + ".w", self.rng.uniform(-bound, bound, (c_out, c_in)))
        b = self._add(name + ".b", np.zeros(c_out))
        return w, b

    def bn(self, name: str, c: int, affine: bool) -> "BatchNorm":
        gamma = beta = None
        if affine:
            gamma = self._add(name + ".gamma", np.ones(c))
            beta = self._add(name + ".beta", np.zeros(c))
        self.buffers[name + ".mean"] = np.zeros(c)
        self.buffers[name + ".var"] = np.ones(c)
        return BatchNorm(self, name, gamma, beta)


class BatchNorm:
    def __init__(self, store: ParamStore, name: str, gamma, beta):
        self.store, self.name, self.gamma, self.beta = store, name, gamma, beta

    def __call__(self, x: Tensor, ctx: Context) -> Tensor:
        b = self.store.buffers
        return F.batch_norm(x, self.gamma, self.beta, b[self.name + ".mean"], b[self.name + ".var"],
                            training=ctx.training, update_stats=ctx.update_stats)


# --- candidate operations -----------------------------------------------------

class ReLUConvBN:
    def __init__(self, store, name, c_in, c_out, k, stride, pad, affine, dilation=1):
        self.w = store.conv(name + ".conv", c_out, c_in, k)
        self.bn = store.bn(name + ".bn", c_out, affine)
        self.stride, self.pad, self.dilation = stride, pad, dilation

    def __call__(self, x, ctx):
        return self.bn(F.conv2d(F.relu(x), self.w, self.stride, self.pad, self.dilation), ctx)


class DilConv:
    def __init__(self, store, name, c_in, c_out, k, stride, pad, dilation, affine):
        self.dw = store.conv(name + ".dw", c_in, 1, k)
        self.pw = store.conv(name + ".pw", c_out, c_in, 1)
        self.bn = store.bn(name + ".bn", c_out, affine)
        self.c_in, self.stride, self.pad, self.dilation = c_in, stride, pad, dilation

    def __call__(self, x, ctx):
        y = F.conv2d(F.relu(x), self.dw, self.stride, self.pad, self.dilation, groups=self.c_in)
        return self.bn(F.conv2d(y, self.pw), ctx)


class SepConv:
    def __init__(self, store, name, c_in, c_out, k, stride, pad, affine):
        self.a = DilConv(store, name + ".a", c_in, c_in, k, stride, pad, 1, affine)
        self.b = DilConv(store, name + ".b", c_in, c_out, k, 1, pad, 1, affine)

    def __call__(self, x, ctx):
        return self.b(self.a(x, ctx), ctx)


class FactorizedReduce:
    def __init__(self, store, name, c_in, c_out, affine):
        if c_out % 2:
            raise ShapeError(f"FactorizedReduce needs even output channels, got {c_out}")
        self.w1 = store.conv(name + ".conv1", c_out // 2, c_in, 1)
        self.w2 = store.conv(name + ".conv2", c_out // 2, c_in, 1)
        self.bn = store.bn(name + ".bn", c_out, affine)

    def __call__(self, x, ctx):
        x = F.relu(x)
        y = F.concat([F.conv2d(x, self.w1, 2), F.conv2d(F.crop(x, 1), self.w2, 2)], axis=1)
        return self.bn(y, ctx)


class Pool:
    def __init__(self, store, name, kind, stride, bn_after, c, affine):
        self.kind, self.stride = kind, stride
        self.bn = store.bn(name + ".bn", c, affine) if bn_after else None

    def __call__(self, x, ctx):
        fn = F.avg_pool2d if self.kind == "avg" else F.max_pool2d
        y = fn(x, 3, self.stride, 1)
        return self.bn(y, ctx) if self.bn is not None else y


class Identity:
    def __call__(self, x, ctx):
        return x


class Zero:
    def __init__(self, stride):
        self.stride = stride

    def __call__(self, x, ctx):
        return F.zero(x, self.stride)


class NoiseOp:
    """Pure Gaussian noise scaled to the input RMS; zeros outside training."""

    def __init__(self, stride):
        self.stride = stride

    def __call__(self, x, ctx):
        shape = x.data[:, :, ::self.stride, ::self.stride].shape
        if ctx.noise_stream is None:
            return F.zero(x, self.stride)
        gen, _ = ctx.noise_stream.next_generator()
        rms = float(np.sqrt(np.mean(x.data ** 2)))
        return Tensor(ctx.noise_op_sigma * rms * gen.standard_normal(shape))


def make_op(store: ParamStore, name: str, op: str, c: int, stride: int, affine: bool,
            rule: str = "darts"):
    """Instantiate candidate op ``op`` mapping ``c`` channels to ``c`` channels."""
    if op == ZERO_OP:
        return Zero(stride)
    if op == SKIP:
        return Identity() if stride == 1 else FactorizedReduce(store, name, c, c, affine)
    if op == "noise":
        return NoiseOp(stride)
    if op == "avg_pool_3x3":
        return Pool(store, name, "avg", stride, rule == "darts", c, False)
    if op == "max_pool_3x3":
        return Pool(store, name, "max", stride, rule == "darts", c, False)
    if op == "sep_conv_3x3":
        return SepConv(store, name, c, c, 3, stride, 1, affine)
    if op == "sep_conv_5x5":
        return SepConv(store, name, c, c, 5, stride, 2, affine)
    if op == "dil_conv_3x3":
        return DilConv(store, name, c, c, 3, stride, 2, 2, affine)
    if op == "dil_conv_5x5":
        return DilConv(store, name, c, c, 5, stride, 4, 2, affine)
    if op == "nor_conv_1x1":
        return ReLUConvBN(store, name, c, c, 1, stride, 0, affine)
    if op == "nor_conv_3x3":
        return ReLUConvBN(store, name, c, c, 3, stride, 1, affine)
    raise ValueError(f"unknown op name {op!r}")


def node_aggregate(inputs: Sequence[Tensor]) -> Tensor:
    """Intermediate node value: elementwise sum of incoming edge outputs."""
    return F.add(*inputs)


def mixed_edge_forward(x: Tensor, ops: Sequence, names: Sequence[str], weights: Tensor,
                       ctx: Context, edge: str = "") -> Tensor:
    """Softmax-weighted sum of candidate outputs, with per-op perturbation.

    ``weights`` is the softmax of the edge logits; noise (if any) is applied
    to each op output before it is scaled by its weight.
    """
    terms = []
    for k, (op, name) in enumerate(zip(ops, names)):
        out = op(x, ctx)
        if ctx.observe is not None:
            ctx.observe(edge, name, out)
        if ctx.perturb is not None:
            out = ctx.perturb(name, out, edge)
        terms.append(out)
    return F.weighted_sum(terms, weights)


# --- cells --------------------------------------------------------------------

class Cell:
    """One cell instance. With ``fixed`` it realizes a genotype instead of mixed edges."""

    def __init__(self, store: ParamStore, name: str, kind: str, spec: CellSpec, c: int,
                 rule: str, affine: bool, fixed: Mapping[tuple[int, int], str] | None = None,
                 c_pp: int | None = None, c_p: int | None = None, reduction_prev: bool = False):
        self.kind, self.spec, self.rule = kind, spec, rule
        self.fixed = fixed
        self.edges = []
        if rule == "darts":
            if reduction_prev:
                self.pre0 = FactorizedReduce(store, name + ".pre0", c_pp, c, affine)
            else:
                self.pre0 = ReLUConvBN(store, name + ".pre0", c_pp, c, 1, 1, 0, affine)
            self.pre1 = ReLUConvBN(store, name + ".pre1", c_p, c, 1, 1, 0, affine)
        for (src, dst), menu in zip(spec.edges, spec.ops):
            stride = 2 if spec.reduction and src < spec.num_input_nodes else 1
            key = edge_key(kind, src, dst)
            if fixed is not None:
                if (src, dst) not in fixed:
                    continue
                menu = (fixed[(src, dst)],)
            ops = [make_op(store, f"{name}.{src}-{dst}.{op}", op, c, stride, affine, rule) for op in menu]
            self.edges.append((src, dst, key, tuple(menu), ops))

    def __call__(self, inputs: Sequence[Tensor], weights: Mapping[str, Tensor] | None, ctx: Context) -> Tensor:
        spec = self.spec
        if self.rule == "darts":
            nodes = [self.pre0(inputs[0], ctx), self.pre1(inputs[1], ctx)]
        else:
            nodes = [inputs[0]]
        incoming: dict[int, list[Tensor]] = {}
        by_dst: dict[int, list] = {}
        for e in self.edges:
            by_dst.setdefault(e[1], []).append(e)
        for dst in range(spec.num_input_nodes, spec.num_nodes):
            outs = incoming.setdefault(dst, [])
            for src, _, key, menu, ops in by_dst.get(dst, []):
                x = nodes[src]
                if self.fixed is None:
                    outs.append(mixed_edge_forward(x, ops, menu, weights[key], ctx, key))
                else:
                    outs.append(ops[0](x, ctx))
            if not outs:
                # node with no selected inputs
                ref = nodes[0]
                stride = 2 if spec.reduction else 1
                outs.append(F.zero(ref, stride))
            nodes.append(node_aggregate(outs))
        if self.rule == "darts":
            return F.concat(nodes[spec.num_input_nodes:], axis=1)
        return nodes[-1]


class ResBlock:
    """Stride-2 residual block used between nasbench201 stages."""

    def __init__(self, store, name, c_in, c_out, affine=True):
        self.a = ReLUConvBN(store, name + ".a", c_in, c_out, 3, 2, 1, affine)
        self.b = ReLUConvBN(store, name + ".b", c_out, c_out, 3, 1, 1, affine)
        self.short = store.conv(name + ".short", c_out, c_in, 1)

    def __call__(self, x, ctx):
        y = self.b(self.a(x, ctx), ctx)
        return F.add(y, F.conv2d(F.avg_pool2d(x, 2, 2), self.short))


# --- networks -----------------------------------------------------------------

class _Net:
    """Shared macro skeleton for supernets and discrete nets."""

    def __init__(self, space: SearchSpace, c: int, num_classes: int, layers: int,
                 stages: Sequence[int] | None, in_channels: int, seed: int, affine: bool,
                 genotype: Genotype | None):
        self.space = space
        self.num_classes = num_classes
        self.store = ParamStore(np.random.default_rng(seed))
        st = self.store
        self.cells: list = []
        fixed_by_kind = None
        if genotype is not None:
            fixed_by_kind = {}
            for e in genotype.edges:
                fixed_by_kind.setdefault(e.cell, {})[(e.src, e.dst)] = e.op

        if space.rule == "nasbench201":
            stages = list(stages or [2, 2, 1])
            self.stem = store_stem(st, in_channels, c)
            cur = c
            blocks = []
            for si, n in enumerate(stages):
                if si > 0:
                    blocks.append(("res", ResBlock(st, f"res{si}", cur, cur * 2)))
                    cur *= 2
                for ci in range(n):
                    fixed = None if fixed_by_kind is None else fixed_by_kind.get("cell", {})
                    blocks.append(("cell", Cell(st, f"s{si}c{ci}", "cell", space.cells["cell"], cur,
                                                "nasbench201", affine, fixed)))
            self.blocks = blocks
            self.head_bn = st.bn("head.bn", cur, True)
            c_out = cur
        else:
            c_stem = 3 * c
            self.stem = store_stem(st, in_channels, c_stem)
            c_pp, c_p, cur = c_stem, c_stem, c
            red_prev = False
            n_mid = space.cells["normal"].num_intermediate_nodes
            blocks = []
            for i in range(layers):
                red = layers >= 3 and i in (layers // 3, 2 * layers // 3)
                if red:
                    cur *= 2
                kind = "reduce" if red else "normal"
                fixed = None if fixed_by_kind is None else fixed_by_kind.get(kind, {})
                cell = Cell(st, f"c{i}", kind, space.cells[kind], cur, "darts", affine, fixed,
                            c_pp, c_p, red_prev)
                blocks.append(("cell", cell))
                red_prev = red
                c_pp, c_p = c_p, n_mid * cur
            self.blocks = blocks
            self.head_bn = None
            c_out = c_p
        self.classifier = st.linear("classifier", num_classes, c_out)

    @property
    def params(self) -> dict[str, Tensor]:
        return self.store.params

    @property
    def buffers(self) -> dict[str, np.ndarray]:
        return self.store.buffers

    def _forward(self, x: Tensor, weights, ctx: Context) -> Tensor:
        s = self.stem[1](F.conv2d(x, self.stem[0], 1, 1), ctx)
        if self.space.rule == "nasbench201":
            for kind, block in self.blocks:
                s = block([s], weights, ctx) if kind == "cell" else block(s, ctx)
            s = F.relu(self.head_bn(s, ctx))
        else:
            s0 = s1 = s
            for _, cell in self.blocks:
                s0, s1 = s1, cell([s0, s1], weights, ctx)
            s = s1
        return F.dense(F.global_avg_pool(s), *self.classifier)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"param:{k}": v.data.copy() for k, v in self.params.items()}
        out.update({f"buffer:{k}": v.copy() for k, v in self.buffers.items()})
        return out

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        for k, v in state.items():
            kind, name = k.split(":", 1)
            if kind == "param":
                self.params[name].data = np.array(v, dtype=np.float64)
            else:
                self.buffers[name][...] = v

    def checksum(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.params):
            h.update(k.encode())
            h.update(self.params[k].data.tobytes())
        for k in sorted(self.buffers):
            h.update(k.encode())
            h.update(self.buffers[k].tobytes())
        return h.hexdigest()


def store_stem(st: ParamStore, c_in: int, c_out: int):
    return st.conv("stem.conv", c_out, c_in, 3), st.bn("stem.bn", c_out, True)


class Supernet(_Net):
    """Over-parameterized network with a mixed op on every edge.

    Architecture logits live in :attr:`alpha` (one vector per edge key, shared
    by every cell of the same kind).
    """

    def __init__(self, space: SearchSpace, c: int = 8, num_classes: int = 10, layers: int = 5,
                 stages: Sequence[int] | None = None, in_channels: int = 3, seed: int = 0,
                 affine: bool = False, alpha_init: Mapping[str, np.ndarray] | None = None,
                 alpha_jitter: float = 1e-3):
        super().__init__(space, c, num_classes, layers, stages, in_channels, seed, affine, None)
        if alpha_init is None:
            rng = np.random.default_rng([seed, 1])
            alpha_init = {k: alpha_jitter * rng.standard_normal(m)
                          for k, m in sorted(space.alpha_shapes().items())}
        self.alpha: dict[str, Tensor] = {
            k: Tensor(np.array(v, dtype=np.float64), requires_grad=True, name=k)
            for k, v in sorted(alpha_init.items())}

    def edge_weights(self, alpha: Mapping[str, Tensor] | None = None) -> dict[str, Tensor]:
        alpha = self.alpha if alpha is None else alpha
        return {k: F.softmax(a) for k, a in alpha.items()}

    def forward(self, x, ctx: Context, alpha: Mapping[str, Tensor] | None = None) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._forward(x, self.edge_weights(alpha), ctx)

    def loss(self, x, y, ctx: Context, alpha: Mapping[str, Tensor] | None = None) -> Tensor:
        return F.cross_entropy(self.forward(x, ctx, alpha), y)

    def alpha_numpy(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.alpha.items()}

    def alpha_softmax(self) -> dict[str, np.ndarray]:
        return {k: alpha_weights(v.data) for k, v in self.alpha.items()}


class DiscreteNet(_Net):
    """Stand-alone network realizing a genotype: no mixed edges, no noise."""

    def __init__(self, genotype: Genotype, space: SearchSpace, c: int = 8, num_classes: int = 10,
                 layers: int = 5, stages: Sequence[int] | None = None, in_channels: int = 3,
                 seed: int = 0):
        if genotype.rule != space.rule:
            raise ValueError(f"genotype rule {genotype.rule!r} does not match space rule {space.rule!r}")
        for e in genotype.edges:
            if e.cell not in space.cells:
                raise ValueError(f"genotype cell {e.cell!r} not in space {space.name!r}")
            cell = space.cells[e.cell]
            if (e.src, e.dst) not in cell.edges:
                raise ValueError(f"genotype edge {e.src}->{e.dst} not in space {space.name!r}")
            if e.op not in cell.ops[cell.edges.index((e.src, e.dst))]:
                raise ValueError(f"op {e.op!r} not a candidate on edge {e.src}->{e.dst}")
        super().__init__(space, c, num_classes, layers, stages, in_channels, seed, True, genotype)
        self.genotype = genotype

    def forward(self, x, ctx: Context) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._forward(x, None, ctx)

    def loss(self, x, y, ctx: Context) -> Tensor:
        return F.cross_entropy(self.forward(x, ctx), y)


def predict_logits(net, x: np.ndarray, batch_size: int = 256, ctx: Context | None = None,
                   **kw) -> np.ndarray:
    ctx = ctx or Context.eval()
    outs = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            outs.append(net.forward(x[i:i + batch_size], ctx, **kw).data)
    return np.concatenate(outs) if outs else np.zeros((0, net.num_classes))
