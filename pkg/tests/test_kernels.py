import json
import os
import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from bayeseg import _pykernels, kernels

try:
    from bayeseg import _ckernels
except ImportError:  # pragma: no cover
    _ckernels = None

needs_compiled = pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
ROOT = Path(__file__).resolve().parents[1]


def _cases(rng):
    logw = rng.normal(0.0, 3.0, (5000, 31))
    logw[:, ::5] = -np.inf
    logw[7] = -np.inf
    u = rng.random(5000)
    u[:3] = [0.0, 1.0 - 2.0 ** -53, 0.5]
    mask = np.ascontiguousarray((rng.random((9, 7, 11)) < 0.4).astype(np.uint8))
    a = rng.normal(size=(300, 3))
    b = rng.normal(size=(257, 3))
    return logw, u, mask, a, b


def test_counter_uniform_range_and_offsets():
    u = _pykernels.counter_uniform(99, 0, 1000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert np.array_equal(_pykernels.counter_uniform(99, 400, 600), u[400:])
    assert not np.array_equal(_pykernels.counter_uniform(100, 0, 1000), u)


def test_python_categorical_inverse_cdf():
    with np.errstate(divide="ignore"):
        logw = np.log(np.array([[0.2, 0.0, 0.8], [1.0, 1.0, 0.0]]))
        got = _pykernels.categorical(logw, np.array([0.19, 0.99]))
    assert got.tolist() == [0, 1]
    assert _pykernels.categorical(np.full((1, 3), -np.inf), np.array([0.5])).tolist() == [-1]


@needs_compiled
@pytest.mark.parametrize("threads", [1, 3])
def test_backends_agree(threads):
    logw, u, mask, a, b = _cases(np.random.default_rng(1))
    assert np.array_equal(_ckernels.counter_uniform(0xABC, 17, 4096, threads),
                          _pykernels.counter_uniform(0xABC, 17, 4096))
    assert np.array_equal(np.asarray(_ckernels.categorical(logw, u, threads)), _pykernels.categorical(logw, u))
    assert np.array_equal(np.asarray(_ckernels.neighbor_count26(mask, threads)), _pykernels.neighbor_count26(mask))
    assert np.allclose(np.asarray(_ckernels.min_distances(a, b, threads)), _pykernels.min_distances(a, b),
                       rtol=0, atol=1e-12)


def test_dispatch_contiguity_and_dtype():
    mask = np.zeros((4, 5, 6), dtype=bool)[:, ::-1]
    assert kernels.neighbor_count26(mask).shape == (4, 5, 6)
    assert kernels.categorical(np.zeros((3, 2))[:, ::-1], np.full(3, 0.7)).tolist() == [1, 1, 1]


_CHAIN = """
import json, numpy as np
from bayeseg import kernels, phantom
from bayeseg.pipeline import RunConfig, segment
ph = phantom.generate_phantom(phantom.PhantomSpec(shape=(10, 10, 10), seed=1, per_axis=2, tumor_scale=1.7))
res = segment(ph.image, ph.atlas.voxels(), RunConfig(burn_in=2, samples=2, per_axis=2, gem_max_iter=4, seed=3))
print(json.dumps({"backend": kernels.BACKEND, "trace": res.chain.trace_csv(),
                  "l": res.chain.state.l.reshape(-1).tolist()}))
"""


def _run_chain(pure):
    env = {**os.environ, "BAYESEG_PURE_PYTHON": "1" if pure else "0"}
    out = subprocess.run([sys.executable, "-c", _CHAIN], env=env, capture_output=True, text=True, check=True)
    return json.loads(out.stdout.strip().splitlines()[-1])


def test_forced_fallback_reports_python_backend():
    assert _run_chain(True)["backend"] == "python"


@needs_compiled
def test_chain_identical_on_both_backends():
    a, b = _run_chain(False), _run_chain(True)
    assert a["backend"] == "cython"
    assert a["trace"] == b["trace"] and a["l"] == b["l"]


def test_benchmark_smoke():
    out = subprocess.run([sys.executable, str(ROOT / "benchmarks" / "bench_kernels.py"), "--repeat", "1"],
                         capture_output=True, text=True, check=True).stdout
    lines = out.strip().splitlines()
    assert len([ln for ln in lines if "(" in ln]) == 4
    if _ckernels is not None:
        assert all(ln.rstrip().endswith("True") for ln in lines[1:])
