"""Hot-loop dispatch: the compiled extension when it was built, else pure Python.

Set ``MDTLAB_PURE_PYTHON=1`` to force the fallback. ``BACKEND`` names the
implementation in use.
"""
from __future__ import annotations

import os

import numpy as np

from . import _kernels_py

_compiled = None
if os.environ.get("MDTLAB_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        _compiled = None

BACKEND = "cython" if _compiled is not None else "python"


def _pack(graph, config):
    succ = graph.successor_array().astype(np.int64)
    stage = np.asarray(graph.stage_of, dtype=np.int64)
    payoff = np.ascontiguousarray(graph.reward_table(), dtype=float)
    cfg = np.array([config.spe_threshold, config.rpe_threshold, config.forget, config.prior,
                    config.max_clusters, config.concentration, config.window, config.w0, config.gamma],
                   dtype=float)
    return succ, stage, payoff, cfg


class SessionArrays:
    """A dataset flattened to contiguous arrays, built once per fit."""

    __slots__ = ("goal", "s1", "a1", "s2", "a2", "s3", "reward", "n")

    def __init__(self, ds):
        recs = ds.records
        self.n = len(recs)
        col = lambda f: np.ascontiguousarray([getattr(r, f) for r in recs], dtype=np.int64)
        self.goal, self.s1, self.a1 = col("goal"), col("s1"), col("a1")
        self.s2, self.a2, self.s3 = col("s2"), col("a2"), col("s3")
        self.reward = np.ascontiguousarray([r.reward for r in recs], dtype=float)


def pfc_choice_probs(params, config, graph, session, backend: str | None = None) -> np.ndarray:
    """Probabilities an arbitration agent assigns to the recorded choices, shape ``(n, 2)``.

    ``params`` is the 7-vector of ``PfcParams.to_array``; ``session`` a
    ``SessionArrays`` (or a dataset, converted on the fly).
    """
    if not isinstance(session, SessionArrays):
        session = SessionArrays(session)
    succ, stage, payoff, cfg = _pack(graph, config)
    out = np.empty((session.n, 2))
    impl = _select(backend)
    impl.pfc_choice_probs(np.ascontiguousarray(params, dtype=float), int(config.variant), cfg, succ, stage,
                          payoff, session.goal, session.s1, session.a1, session.s2, session.a2, session.s3,
                          session.reward, out)
    return out


def pfc_log_likelihood(params, config, graph, session, backend: str | None = None) -> float:
    p = pfc_choice_probs(params, config, graph, session, backend)
    return float(np.log(np.maximum(p, 1e-300)).sum())


def _select(backend):
    if backend is None:
        return _compiled or _kernels_py
    if backend == "python":
        return _kernels_py
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {backend!r}")
