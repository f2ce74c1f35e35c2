import numpy as np
import pytest

from oodflow import conformal, localization, opticflow, synthdata, trainer, vae


@pytest.fixture(scope="session")
def flow_params():
    return opticflow.FlowParams()


@pytest.fixture(scope="session")
def trained32(flow_params):
    """A small trained pipeline (32x32) shared by cross-module tests.

    Four ID episodes supply the flow dataset; 8 epochs are enough for the
    nonconformity score to separate the synthetic anomalies from ID motion.
    """
    arch = vae.VaeArchitecture(input_size=32)
    flows = []
    for ep_i in range(4):
        cfg = synthdata.SceneConfig(size=32, seed=2000 + ep_i)
        ep = synthdata.gen_id_episode(cfg)
        for a, b in zip(ep.frames, ep.frames[1:]):
            flows.append(vae.preprocess(opticflow.lucas_kanade(a, b, flow_params), arch))
    train_part, cal_part = trainer.split_calibration(flows, 0.2, seed=3)
    weights, log = trainer.train(
        train_part, trainer.TrainConfig(epochs=8, seed=3), arch)
    cal = trainer.build_calibration(weights, cal_part)
    stats = localization.activation_stats(weights, cal_part)
    return {
        "arch": arch,
        "weights": weights,
        "cal": cal,
        "stats": stats,
        "cal_flows": cal_part,
        "log": log,
        "detector": conformal.DetectorConfig(),
    }


@pytest.fixture()
def tiny_arch():
    return vae.VaeArchitecture(input_size=16, latent_dim=6)
