import json
import logging

import numpy as np
import pytest
import torch
from starlette.testclient import TestClient

from robust_mapf.grid_env import EnvConfig, generate_instance, observe_all
from robust_mapf.policy_net import PolicyNet, init_params
from robust_mapf.progress import LOG_FILENAME, ServerStatus, create_app

_log = logging.getLogger(__name__)
log_fmt = r"%(asctime)-15s %(levelname)s %(name)s %(funcName)s:%(lineno)d %(message)s"
datefmt = "%Y-%m-%d %H:%M:%S"
logging.basicConfig(format=log_fmt, level=logging.DEBUG, datefmt=datefmt)

logging.getLogger("httpx").setLevel(logging.INFO)
logging.getLogger("httpcore").setLevel(logging.INFO)
logging.getLogger("matplotlib").setLevel(logging.INFO)


@pytest.fixture
def anyio_backend():
    """Exclude trio from tests"""
    return "asyncio"


@pytest.fixture
def env():
    return EnvConfig()


@pytest.fixture
def small_env():
    """Short episodes on a small map for tests that train or evaluate."""
    return EnvConfig(side=6, density=0.1, num_agents=2, horizon=12)


@pytest.fixture
def net():
    return init_params(0)


@pytest.fixture(scope="session")
def sampled_states():
    """1000 agent observations from 250 default instances."""
    return torch.as_tensor(np.concatenate([observe_all(generate_instance(seed)) for seed in range(250)]))


def constant_net(logits) -> PolicyNet:
    """Network whose output ignores the observation."""
    model = PolicyNet()
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
        model.actor.bias.copy_(torch.tensor(logits, dtype=torch.float32))
    return model


@pytest.fixture
def confident_net():
    return constant_net([3.0, 0.0, 0.0, 0.0, 0.0])


@pytest.fixture
def uniform_net():
    return constant_net([0.0] * 5)


@pytest.fixture
def reset_server_status():
    # avoid: RuntimeError: <asyncio.locks.Event ...> is bound to a different event loop
    ServerStatus.should_exit_event = None
    ServerStatus.should_exit = False


@pytest.fixture
def run_dir(tmp_path):
    records = [
        {"iter": i, "clean_success": 0.25 * i, "entropy": 1.5, "losses": {}, "kappa": 0.0,
         "score": None, "env_steps": 100 * (i + 1), "entropy_collapse": False}
        for i in range(3)
    ]
    (tmp_path / LOG_FILENAME).write_text("".join(json.dumps(r) + "\n" for r in records))
    _log.debug("run dir %s", tmp_path)
    return tmp_path


@pytest.fixture
def client(reset_server_status, run_dir):
    with TestClient(app=create_app(run_dir, poll_interval=0.05), base_url="http://localhost:8000") as client:
        yield client
