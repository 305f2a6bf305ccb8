from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from covmoe.cov_smoe import MoEConfig, MoELayer, RouteInputs
from covmoe.numkit import Rng, const

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def make_layer(seed: int = 0, **kw) -> MoELayer:
    cfg = MoEConfig(**{"h": 8, "h_z": 4, "h_ff": 8, "S": 1, "C": 2, "M": 4, "k": 2, **kw})
    return MoELayer.init(cfg, Rng(seed, "layer"))


def make_inputs(layer: MoELayer, n: int, seed: int = 0, usable=True, regions=None):
    rng = Rng(seed, "inputs")
    cfg = layer.cfg
    tokens = rng.normal(size=(n, cfg.h))
    emb = const(np.tanh(rng.normal(size=(n, cfg.h_z))))
    if regions is None:
        regions = rng.integers(0, max(cfg.C, 1), n)
    hours = rng.integers(0, 24, n)
    ok = np.full(n, usable, dtype=bool) if np.isscalar(usable) else np.asarray(usable, dtype=bool)
    keys = np.arange(n, dtype=np.uint64) + np.uint64(seed) * np.uint64(1000)
    return tokens, RouteInputs(emb, np.asarray(regions, dtype=np.int64), hours, ok, keys)


@pytest.fixture(scope="session")
def desk():
    """Default desk config with the model widths resolved against its synthetic data."""
    from covmoe.config import ExperimentConfig
    from covmoe.experiment import load_frames, resolve

    cfg = ExperimentConfig()
    frames = load_frames(cfg)
    return resolve(cfg, frames), frames


@pytest.fixture(scope="session")
def desk_federation(desk):
    from covmoe.experiment import federation

    cfg, frames = desk
    fed = federation(cfg, frames)
    fed.train_clients()
    fed.upload()
    fed.build_pool()
    before = [e.fingerprint(base_only=False) for e in fed.server.pool]
    fed.train_gate()
    after = [e.fingerprint(base_only=False) for e in fed.server.pool]
    fed.deploy()
    fed.pool_fingerprints = (before, after)
    return fed


def toy_task(seed: int = 0):
    """Seeded single-region task: 200 hourly windows, normalised on themselves."""
    from covmoe.datahub import Scaler, make_windows, synthetic_frames
    from covmoe.model import CovMoEModel, ModelConfig
    from covmoe.trainer import TrainConfig

    frame = synthetic_frames(1, 260, seed=seed)[0]
    raw = make_windows(frame, 48, 4, stride=24)[:200]
    sc = Scaler.fit(raw, frame.covariate_names)
    windows = [sc.transform_window(w) for w in raw]
    model = CovMoEModel.build(ModelConfig(H=4, moe=MoEConfig(C=1), seed=seed))
    cfg = TrainConfig(lr=1e-2, batch_size=16, epochs=4, max_steps=50, optimizer="adam",
                      trainable_scope="moe+tokenizer", seed=seed)
    return model, windows, cfg
