import pytest

from dmdlab.config import config_from_dict


def tiny_config(out, **overrides):
    """A few-second experiment: small nets, short budgets, eval at every iteration."""
    raw = {
        "net": {"width": 12, "depth": 2, "time_dim": 8, "cond_dim": 4},
        "disc": {"backbone_width": 16, "head_width": 8},
        "teacher": {"iters": 30, "batch": 32},
        "train": {"iters": 20, "batch": 16, "ttur_f": 2},
        "eval": {"every": 1, "n": 64},
        "track": {"n": 16, "keep_every": 5, "n_probes": 1},
        "seeds": [0, 1, 2],
        "out": str(out),
    }
    for key, value in overrides.items():
        if isinstance(value, dict):
            raw.setdefault(key, {}).update(value)
        else:
            raw[key] = value
    return config_from_dict(raw)


@pytest.fixture
def tiny(tmp_path):
    return tiny_config(tmp_path / "runs")
