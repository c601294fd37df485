import os
import subprocess
import sys

import numpy as np
import pytest

from mdtlab import kernels
from mdtlab.arbitration import PfcAgent, PfcConfig, PfcParams
from mdtlab.env import original_task
from mdtlab.simulate import run_session


def test_pure_python_forced_by_environment():
    env = dict(os.environ, MDTLAB_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "from mdtlab import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_unknown_backend_rejected():
    spec = original_task(5)
    ds = run_session(PfcAgent(), spec, np.random.default_rng(0))
    with pytest.raises(ValueError):
        kernels.pfc_choice_probs(PfcParams().to_array(), PfcConfig(), spec.task_graph(), ds, backend="fortran")


def test_session_arrays_accepts_dataset_or_arrays():
    spec = original_task(30, 1)
    ds = run_session(PfcAgent(), spec, np.random.default_rng(0))
    x, cfg, g = PfcParams().to_array(), PfcConfig(variant=2), spec.task_graph()
    a = kernels.pfc_choice_probs(x, cfg, g, ds)
    b = kernels.pfc_choice_probs(x, cfg, g, kernels.SessionArrays(ds))
    assert np.array_equal(a, b)
    assert kernels.pfc_log_likelihood(x, cfg, g, ds) == pytest.approx(float(np.log(a).sum()))


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled kernels not built")
@pytest.mark.parametrize("variant", [1, 2])
def test_backends_agree_on_long_session(variant):
    spec = original_task(400, 17)
    ds = run_session(PfcAgent(config=PfcConfig(variant=variant)), spec, np.random.default_rng(2))
    x, cfg, g = PfcParams(alpha=0.15, b_beta=3.0).to_array(), PfcConfig(variant=variant), spec.task_graph()
    py = kernels.pfc_choice_probs(x, cfg, g, ds, backend="python")
    cy = kernels.pfc_choice_probs(x, cfg, g, ds, backend="cython")
    assert np.max(np.abs(py - cy)) < 1e-12
