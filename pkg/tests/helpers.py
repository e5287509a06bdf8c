"""Small shared builders for tests."""

import numpy as np

from oceangnn.dataset import DayDataset
from oceangnn.gnn_model import ModelConfig, MultiScaleGNN
from oceangnn.graph_build import build_ocean_graph
from oceangnn.ocean_grid import compute_norm_stats
from oceangnn.sphere_mesh import build_hierarchy
from oceangnn.synthetic import GeneratorConfig, SyntheticOcean


def tiny_world(n_lat=18, n_lon=36, days=range(0, 40), land="continents", **gen_kwargs):
    gen = SyntheticOcean(GeneratorConfig(n_lat=n_lat, n_lon=n_lon, land=land, **gen_kwargs))
    data = DayDataset.from_generator(gen, days)
    stats = compute_norm_stats([data.ocean(d) for d in data.days], [data.forcing(d) for d in data.days], gen.statics())
    return gen, data, stats


def tiny_model(gen, stats, latent=8, processor_steps=2, finest_level=2, dtype="float64", **kwargs):
    cfg = ModelConfig(latent=latent, hidden=latent, processor_steps=processor_steps, finest_level=finest_level, dtype=dtype, **kwargs)
    coarse, fine = build_hierarchy(finest_level)
    graph = build_ocean_graph(gen.grid, coarse, fine, cfg.radius_factor, cfg.grid_links)
    return MultiScaleGNN(cfg, gen.schema, graph, stats, gen.statics())


def perturb(params, scale=0.1, seed=1):
    """Make every parameter non-trivial (output layers start small but nonzero)."""
    rng = np.random.default_rng(seed)
    for name in params.names():
        params[name] = params[name] + scale * rng.standard_normal(params[name].shape)
    return params
