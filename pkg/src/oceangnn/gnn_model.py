"""Encode-process-decode step model on the two-mesh ocean graph."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diff_core import (
    Index,
    MlpSpec,
    ParamStore,
    Tape,
    Var,
    init_mlp,
    mlp_forward,
    output_layer_names,
)
from .graph_build import MESHES, OceanGraph
from .ocean_grid import (
    ChannelSchema,
    FieldSet,
    NormStats,
    STD_FLOOR,
    check_consecutive,
)


class NumericalError(FloatingPointError):
    """Non-finite values detected; the message names the stage."""


@dataclass(frozen=True)
class ModelConfig:
    latent: int = 192
    hidden: int = 192
    hidden_layers: int = 1
    processor_steps: int = 16
    finest_level: int = 3
    radius_factor: float = 0.6
    grid_links: str = "both"
    share_iterations: bool = False
    share_meshes: bool = False
    decode_order: tuple[str, ...] = ("coarse", "fine")
    activation: str = "silu"
    dtype: str = "float32"

    def __post_init__(self):
        if self.processor_steps < 1:
            raise ValueError("processor_steps must be >= 1")
        if self.latent < 1 or self.hidden < 1:
            raise ValueError("widths must be >= 1")
        if sorted(self.decode_order) != sorted(MESHES):
            raise ValueError("decode_order must list each mesh once")
        object.__setattr__(self, "decode_order", tuple(self.decode_order))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decode_order"] = list(self.decode_order)
        return d


@dataclass
class LatentState:
    v_grid: Var
    v_mesh: dict[str, Var]
    e: dict[str, Var] = field(default_factory=dict)  # keyed like graph edge sets

    def arrays(self) -> dict[str, np.ndarray]:
        out = {"v_grid": self.v_grid.value}
        out.update({f"v_{m}": v.value for m, v in self.v_mesh.items()})
        out.update({f"e_{k}": v.value for k, v in self.e.items()})
        return out


@dataclass(frozen=True)
class EdgeIndex:
    senders: Index
    receivers: Index

    @classmethod
    def from_edge_set(cls, es) -> "EdgeIndex":
        return cls(Index(es.senders, es.n_senders), Index(es.receivers, es.n_receivers))


def _guard(v: Var, stage: str) -> None:
    if not np.isfinite(v.value).all():
        raise NumericalError(f"non-finite latent after {stage}")


def gnn_block(tape: Tape, prefix: str, edge_spec: MlpSpec, node_spec: MlpSpec, v_s: Var, v_r: Var, e: Var, idx: EdgeIndex) -> tuple[Var, Var]:
    """One round of edge then node residual updates; returns (edges, receivers)."""
    e_new = tape.add(e, mlp_forward(edge_spec, f"{prefix}.edge", [e, (v_s, idx.senders), (v_r, idx.receivers)], tape))
    agg = tape.segment_sum(e_new, idx.receivers)
    v_new = tape.add(v_r, mlp_forward(node_spec, f"{prefix}.node", [v_r, agg], tape))
    return e_new, v_new


class MultiScaleGNN:
    """Step function X(t+1) = F(X(t-1), X(t), A(t-1), A(t), A(t+1), S) on a fixed graph."""

    def __init__(self, config: ModelConfig, schema: ChannelSchema, graph: OceanGraph, stats: NormStats, statics: FieldSet):
        self.config = config
        self.schema = schema
        self.graph = graph
        self.stats = stats
        self.dtype = np.dtype(config.dtype)
        if statics.grid.shape != graph.grid_shape or not np.array_equal(statics.grid.ocean_index, graph.grid_cells):
            raise ValueError("statics grid does not match the graph's ocean cells")
        self.grid = statics.grid

        self.x_mean, self.x_std = stats.arrays(schema.ocean)
        self.diff_std = stats.diff_array(schema.ocean)
        self.a_mean, self.a_std = stats.arrays(schema.forcing)
        s_mean, s_std = stats.arrays(schema.statics)
        self.static_rows = (statics.select(schema.statics).rows() - s_mean) / s_std

        self.index = {k: EdgeIndex.from_edge_set(es) for k, es in graph.edges.items()}
        self.edge_inputs = {}
        for kind in ("g2m", "m2m", "m2g"):
            feats = [graph.edges[f"{kind}_{m}"].features.astype(np.float64) for m in MESHES]
            pooled = np.concatenate(feats)
            mu = pooled.mean(axis=0) if len(pooled) else np.zeros(4)
            sd = np.maximum(pooled.std(axis=0), STD_FLOOR) if len(pooled) else np.ones(4)
            for m, f in zip(MESHES, feats):
                self.edge_inputs[f"{kind}_{m}"] = (f - mu) / sd
        self.mesh_inputs = {m: graph.mesh_features[m].astype(np.float64) for m in MESHES}

    # parameters -----------------------------------------------------------
    def specs(self) -> dict[str, MlpSpec]:
        c = self.config
        L, H, k, act = c.latent, c.hidden, c.hidden_layers, c.activation

        def mlp(width_in, out=L, ln=True):
            return MlpSpec(width_in, H, out, k, ln, act)

        return {
            "embed.grid": mlp(self.schema.c_in),
            "embed.mesh": mlp(3),
            "embed.edge": mlp(4),
            "edge": mlp(3 * L),
            "node": mlp(2 * L),
            "grid": mlp(L),
            "out": mlp(L, out=self.schema.c_x, ln=False),
        }

    def block_prefixes(self) -> list[str]:
        c = self.config
        names = [f"enc.g2m.{m}" for m in MESHES]
        for m in MESHES:
            for i in range(c.processor_steps):
                names.append(self.processor_prefix(m, i))
        names += [f"dec.m2g.{m}" for m in MESHES]
        return list(dict.fromkeys(names))

    def processor_prefix(self, mesh: str, i: int) -> str:
        c = self.config
        who = "shared" if c.share_meshes else mesh
        it = "all" if c.share_iterations else str(i)
        return f"proc.{who}.{it}"

    def mlp_names(self) -> dict[str, MlpSpec]:
        s = self.specs()
        out = {
            "embed.grid": s["embed.grid"],
            "embed.mesh": s["embed.mesh"],
            "embed.g2m": s["embed.edge"],
            "embed.m2m": s["embed.edge"],
            "embed.m2g": s["embed.edge"],
        }
        for p in self.block_prefixes():
            out[f"{p}.edge"] = s["edge"]
            out[f"{p}.node"] = s["node"]
        out["enc.grid"] = s["grid"]
        out["dec.out"] = s["out"]
        return out

    def init_params(self, seed: int = 0) -> ParamStore:
        rng = np.random.default_rng(seed)
        store = ParamStore(self.dtype, seed)
        for name, spec in self.mlp_names().items():
            init_mlp(store, spec, name, rng)
        return store

    # stages ---------------------------------------------------------------
    def grid_input(self, tape: Tape, x_prev: Var, x_cur: Var, a_prev, a_cur, a_next) -> Var:
        xs = [tape.affine(x, 1.0 / self.x_std, -self.x_mean / self.x_std) for x in (x_prev, x_cur)]
        forc = [tape.const((np.asarray(a, np.float64) - self.a_mean) / self.a_std) for a in (a_prev, a_cur, a_next)]
        return tape.concat(xs + forc + [tape.const(self.static_rows)])

    def encode(self, tape: Tape, grid_in: Var) -> LatentState:
        s = self.specs()
        v_grid = mlp_forward(s["embed.grid"], "embed.grid", grid_in, tape)
        v_mesh = {m: mlp_forward(s["embed.mesh"], "embed.mesh", tape.const(self.mesh_inputs[m]), tape) for m in MESHES}
        e = {
            k: mlp_forward(s["embed.edge"], f"embed.{k.split('_')[0]}", tape.const(x), tape)
            for k, x in self.edge_inputs.items()
        }
        for m in MESHES:
            key = f"g2m_{m}"
            e[key], v_mesh[m] = gnn_block(tape, f"enc.g2m.{m}", s["edge"], s["node"], v_grid, v_mesh[m], e[key], self.index[key])
        v_grid = tape.add(v_grid, mlp_forward(s["grid"], "enc.grid", v_grid, tape))
        state = LatentState(v_grid, v_mesh, e)
        for name, v in state.arrays().items():
            if not np.isfinite(v).all():
                raise NumericalError(f"non-finite latent after encode ({name})")
        return state

    def process(self, tape: Tape, state: LatentState) -> LatentState:
        s = self.specs()
        v_mesh, e = dict(state.v_mesh), dict(state.e)
        for m in MESHES:
            key = f"m2m_{m}"
            for i in range(self.config.processor_steps):
                e[key], v_mesh[m] = gnn_block(
                    tape, self.processor_prefix(m, i), s["edge"], s["node"], v_mesh[m], v_mesh[m], e[key], self.index[key]
                )
            _guard(v_mesh[m], f"process ({m} mesh)")
        return LatentState(state.v_grid, v_mesh, e)

    def decode(self, tape: Tape, state: LatentState) -> Var:
        """Normalized tendency rows [n_ocean, C_X]."""
        s = self.specs()
        v_grid, e = state.v_grid, dict(state.e)
        for m in self.config.decode_order:
            key = f"m2g_{m}"
            e[key], v_grid = gnn_block(tape, f"dec.m2g.{m}", s["edge"], s["node"], state.v_mesh[m], v_grid, e[key], self.index[key])
        _guard(v_grid, "decode")
        delta = mlp_forward(s["out"], "dec.out", v_grid, tape)
        _guard(delta, "output")
        return delta

    def forward(self, tape: Tape, x_prev: Var, x_cur: Var, a_prev, a_cur, a_next) -> Var:
        """Next-state rows in physical units: x_cur + tendency * difference std."""
        grid_in = self.grid_input(tape, x_prev, x_cur, a_prev, a_cur, a_next)
        _guard(grid_in, "preprocess")
        delta = self.decode(tape, self.process(tape, self.encode(tape, grid_in)))
        return tape.add(x_cur, tape.affine(delta, self.diff_std))

    # field-level API -------------------------------------------------------
    def step(self, params: ParamStore, x_prev: FieldSet, x_cur: FieldSet, a_prev: FieldSet, a_cur: FieldSet, a_next: FieldSet) -> FieldSet:
        check_consecutive(x_prev, x_cur, a_prev, a_cur, a_next)
        tape = Tape(params, record=False)
        out = self.forward(
            tape,
            tape.const(x_prev.rows(self.dtype)),
            tape.const(x_cur.rows(self.dtype)),
            a_prev.rows(),
            a_cur.rows(),
            a_next.rows(),
        )
        return FieldSet.from_rows(self.grid, x_cur.channels, out.value, x_cur.day + 1)


def zero_output_layer(model: MultiScaleGNN, params: ParamStore) -> ParamStore:
    """Zero the decoder's output layer so the step reduces to persistence."""
    for n in output_layer_names(model.specs()["out"], "dec.out"):
        params[n] = np.zeros_like(params[n])
    return params


def zero_all_output_layers(model: MultiScaleGNN, params: ParamStore) -> ParamStore:
    for name, spec in model.mlp_names().items():
        for n in output_layer_names(spec, name):
            params[n] = np.zeros_like(params[n])
    return params
