import json
import os
import subprocess
import sys

import numpy as np
import pytest

from fvlab.kernels import BACKEND, get_backend
from fvlab.rng import stream

try:
    CY = get_backend("cython")
except ImportError:  # extension not built in this environment
    CY = None
PY = get_backend("python")

needs_cython = pytest.mark.skipif(CY is None, reason="compiled kernel not built")

RATES = np.array([0.0, np.log(4.0), 2.5])


def _states(n, seed):
    return np.random.default_rng(seed).integers(0, 3, n).astype(np.int64)


@needs_cython
class TestBitIdentity:
    @pytest.mark.parametrize("seed", range(5))
    def test_fv_finite_state(self, seed):
        snaps = np.linspace(0, 1, 9)
        outs = []
        for mod in (CY, PY):
            st = _states(200, seed)
            g = stream(seed, 0)
            B, log, ss, sb = mod.fv_finite_state(RATES, st, 1.0, g, snap_times=snaps, log=True)
            outs.append((B, log, ss, sb, st, g.random()))
        a, b = outs
        assert a[0] == b[0]
        for x, y in zip(a[1], b[1]):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a[2], b[2])
        np.testing.assert_array_equal(a[3], b[3])
        np.testing.assert_array_equal(a[4], b[4])
        # the generator is left in the same state by both backends
        assert a[5] == b[5]

    @pytest.mark.parametrize("seed", range(5))
    def test_fv_ruin_exp(self, seed):
        snaps = np.array([0.25, 0.5, 1.0])
        outs = []
        for mod in (CY, PY):
            x0 = np.full(150, 1.0)
            g = stream(seed, 1)
            outs.append(mod.fv_ruin_exp(x0, 1.0, 1.0, 1.0, 1.0, g, snap_times=snaps, log=True) + (g.random(),))
        a, b = outs
        np.testing.assert_array_equal(a[0], b[0])
        assert a[1] == b[1]
        for x, y in zip(a[2], b[2]):
            np.testing.assert_array_equal(x, y)
        np.testing.assert_array_equal(a[3], b[3])
        np.testing.assert_array_equal(a[4], b[4])
        assert a[5] == b[5]

    @pytest.mark.parametrize("seed", range(5))
    def test_discrete_finite_state(self, seed):
        levels = np.linspace(0, 1, 21)
        outs = []
        for mod in (CY, PY):
            st = _states(300, seed)
            g = stream(seed, 2)
            counts, alive, ext = mod.discrete_finite_state(RATES, st, levels, g)
            outs.append((counts, alive, ext, st, g.random()))
        a, b = outs
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_discrete_extinction_identical(self):
        levels = np.array([0.0, 1.0, 2.0])
        outs = []
        for mod in (CY, PY):
            st = np.ones(3, dtype=np.int64)
            outs.append(mod.discrete_finite_state(np.array([0.0, 50.0]), st, levels, stream(0, 0)))
        assert outs[0][2] == outs[1][2] == 0
        np.testing.assert_array_equal(outs[0][0], outs[1][0])


class TestBackendSelection:
    def test_active_backend(self):
        assert BACKEND in ("cython", "python")
        if CY is not None:
            assert BACKEND == "cython"

    def test_unknown_backend(self):
        with pytest.raises(ValueError):
            get_backend("fortran")

    def test_pure_python_override(self):
        code = (
            "import json, fvlab\n"
            "from fvlab import run_fleming_viot, two_state_model, stream\n"
            "r = run_fleming_viot(two_state_model(0.5, 1.3862943611198906), 100, 1.0, rng=stream(7, 0))\n"
            "print(json.dumps([fvlab.BACKEND, r.B]))\n"
        )
        env = dict(os.environ, FVLAB_PURE_PYTHON="1")
        out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
        backend, B = json.loads(out.stdout)
        assert backend == "python"
        # same draws regardless of the backend
        from fvlab import run_fleming_viot, two_state_model

        assert B == run_fleming_viot(two_state_model(0.5, 1.3862943611198906), 100, 1.0, rng=stream(7, 0)).B


@needs_cython
def test_benchmark_script_runs(capsys):
    import importlib.util
    from pathlib import Path

    path = Path(__file__).resolve().parent.parent / "benchmarks" / "bench_kernels.py"
    spec = importlib.util.spec_from_file_location("bench_kernels", path)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    assert mod.main(["--N", "50", "--repeat", "1", "--json"]) == 0
    rows = json.loads(capsys.readouterr().out)
    assert {r["kernel"] for r in rows} == {"fv_finite_state", "fv_ruin_exp", "discrete_finite_state"}
    assert all(r["identical"] for r in rows)
