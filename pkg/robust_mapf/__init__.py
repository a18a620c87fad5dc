from robust_mapf.grid_env import EnvConfig, generate_instance, observe, step
from robust_mapf.policy_net import PolicyNet, init_params, load_checkpoint, save_checkpoint

__all__ = [
    "EnvConfig",
    "PolicyNet",
    "generate_instance",
    "init_params",
    "load_checkpoint",
    "observe",
    "save_checkpoint",
    "step",
]
__version__ = "0.1.0"
