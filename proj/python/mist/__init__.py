"""Python bindings for the mist video QA core.

Configs are plain dicts; missing keys take their defaults and unknown keys
raise ValueError.
"""

import json as _json

from . import _mist

__all__ = [
    "default_config",
    "tiny_config",
    "resolve_config",
    "synth",
    "gumbel_topk",
    "score_answers",
    "cost",
    "grad_check",
    "train",
    "evaluate",
    "trace",
    "validate_trace",
    "save_features",
    "load_features",
    "run_cli",
]


def _dump(config):
    return _json.dumps(config or {})


def default_config():
    return _json.loads(_mist.default_config())


def tiny_config():
    """The small config used for end-to-end gradient checks."""
    return _json.loads(_mist.tiny_config())


def resolve_config(config=None):
    return _json.loads(_mist.resolve_config(_dump(config)))


def synth(config=None, seed=0):
    """One synthetic sample as numpy arrays plus its label."""
    return _mist.synth(_dump(config), seed)


def gumbel_topk(scores, k, with_replacement=True, temperature=1.0, seed=0):
    return list(_mist.gumbel_topk(list(scores), k, with_replacement, temperature, seed))


def score_answers(x, bank, cosine=False):
    return _mist.score_answers(x, bank, cosine)


def cost(config=None):
    """Closed-form cost report plus the measured MAC count of one forward pass."""
    return _json.loads(_mist.cost(_dump(config)))


def grad_check(config=None):
    return _json.loads(_mist.grad_check(_dump(config if config is not None else tiny_config())))


def train(config=None, params_path=None):
    return _json.loads(_mist.train(_dump(config), params_path))


def evaluate(params_path, n=200, seed=1000003):
    return _json.loads(_mist.evaluate(params_path, n, seed))


def trace(params_path, sample_seed=0):
    return _json.loads(_mist.trace(params_path, sample_seed))


def validate_trace(trace_obj, config=None):
    """Empty string when the trace matches the config, else the first problem."""
    return _mist.validate_trace(_json.dumps(trace_obj), _dump(config))


def save_features(video, question, answers, path):
    _mist.save_features(video, question, answers, path)


def load_features(path):
    return _mist.load_features(path)


def run_cli(args):
    """Runs the command line in-process; returns (exit code, stdout, stderr)."""
    return _mist.run_cli([str(a) for a in args])
