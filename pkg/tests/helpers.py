"""Small run configurations shared by the slower tests."""
import copy

TINY = {
    "env": {"width": 5, "height": 5, "obstacle_density": 0.1, "depth_res": [8, 8],
            "audio_bins": 8, "max_range": 4, "max_steps": 40},
    "policy": {"fusion": "fsa", "feature_dim": 4, "hidden_size": 4, "fsa": {"d": 4},
               "visual_conv": [[3, 3, 2, 2], [2, 2, 1, 2], [2, 2, 1, 2]],
               "audio_conv": [[1, 3, 2, 2], [1, 2, 1, 2], [1, 2, 1, 2]]},
    "ppo": {"num_envs": 2, "rollout_steps": 6, "num_updates": 3},
    "seeds": {"env": 1, "init": 2, "action": 3, "noise": 4},
}


def tiny(**sections):
    """TINY with per-section overrides, e.g. tiny(ppo={"num_updates": 0})."""
    raw = copy.deepcopy(TINY)
    for name, over in sections.items():
        raw.setdefault(name, {}).update(over)
    return raw
