"""Small shared builders for model tests."""
import numpy as np

from truckcast import features as F, gridding as G, models as M, tensor as T

MONDAY = 1_659_312_000


def samples(labels, k=4, horizon=1, cell_ids=None):
    labels = np.asarray(labels)
    ids = cell_ids or list(range(labels.shape[0]))
    return F.make_windows(G.ClassTensor(labels, (0, 4), MONDAY, 1800, ids), k, horizon)


MICRO = dict(hidden=4, kernel=2, dilations=(1, 2), heads=2, kappa=1)


def micro_instance(kind, seed=0):
    """3 cells, k=4, two target slots; spatial inputs wired per model."""
    rng = np.random.default_rng(seed)
    s = samples(rng.integers(0, 3, (3, 7)))
    cfg = M.ModelConfig(kind=kind, **MICRO)
    adj = np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]])
    sem = np.array([[0, 2.0, 1.0], [2.0, 0, 3.0], [1.0, 3.0, 0]])
    ctx = M.context_for(cfg, adj, sem)
    params = M.init_params(cfg, s.n_features, seed)
    # move off the symmetric init so every path carries gradient
    params = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in params.items()}
    batch = s.batch(s.targets[:2])
    return cfg, params, batch, ctx


def loss_fn(cfg, batch, ctx, weights=M.DEFAULT_CLASS_WEIGHTS):
    return lambda p: M.weighted_cross_entropy(M.FORWARD[cfg.kind](cfg, p, batch, ctx), batch["y"], weights)


def gradient_error(kind, seed=0):
    cfg, params, batch, ctx = micro_instance(kind, seed)
    n = sum(v.size for v in params.values())
    return T.finite_diff_check(loss_fn(cfg, batch, ctx), params, eps=1e-5, n_coords=n)


# -- fixture pipeline runs ---------------------------------------------------

STAGE_DIRS = {"synth": "data", "ingest": "ingest", "features": "features"}


def fixture_config(seeds=range(10), **overrides):
    from truckcast import config as C
    return C.default_fixture(seeds=list(seeds), **overrides)


def run_full(cfg, out):
    import json
    from truckcast import pipeline as P
    P.run_pipeline(cfg, out)
    return json.loads((out / "eval" / "metrics.json").read_text())


def run_from(src, out, cfg, first):
    """Reuse ``src``'s artifacts for the stages before ``first`` and run the rest with ``cfg``."""
    import json
    import shutil
    from truckcast import config as C, pipeline as P
    out.mkdir(parents=True, exist_ok=True)
    C.dump(cfg, out / "config.yaml")
    stages = list(P.STAGES)
    for stage in stages[:stages.index(first)]:
        shutil.copytree(src / STAGE_DIRS[stage], out / STAGE_DIRS[stage])
    for stage in stages[stages.index(first):]:
        P.run_stage(stage, cfg, out)
    return json.loads((out / "eval" / "metrics.json").read_text())
