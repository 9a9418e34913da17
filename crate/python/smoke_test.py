"""Smoke test for the kamtori Python bindings.

Builds the extension with cargo (unless --no-build is given), copies it next
to this file and exercises the main entry points.
"""

import json
import math
import shutil
import subprocess
import sys
import sysconfig
from pathlib import Path

HERE = Path(__file__).resolve().parent
ROOT = HERE.parent


def build():
    subprocess.run(
        ["cargo", "build", "--release", "-p", "kamtori-py", "--features", "extension-module"],
        cwd=ROOT,
        check=True,
    )
    src = ROOT / "target" / "release" / "libkamtori_py.so"
    dst = HERE / ("kamtori_py" + sysconfig.get_config_var("EXT_SUFFIX"))
    shutil.copyfile(src, dst)


def main():
    if "--no-build" not in sys.argv:
        build()
    sys.path.insert(0, str(HERE))
    import kamtori_py as kt

    assert "twist-1-1" in kt.PRESETS

    model = kt.TestModel("twist-1-1", 1e-6, 0.1)
    assert (model.n, model.m) == (1, 1)
    xi = model.default_xi
    assert abs(model.omega(xi)[0] - xi[0]) < 1e-15

    x, u, y, v = model.apply_map([0.3], [0.01], xi, [0.0])
    assert len(x) == 1 and math.isfinite(x[0])
    assert model.symplecticity_defect([0.3], [0.01], xi, [0.0]) < 1e-9
    model.scheme_step([0.3], [0.01], xi, [0.0], 0.1)

    run = model.kam_run()
    assert run.converged and run.steps >= 3
    eps = run.eps_trace
    assert all(b <= a ** 1.25 for a, b in zip(eps, eps[1:]))
    assert run.invariance_residual() <= 1e-9
    rot, _ = run.rotation(5000)
    assert abs(rot[0] - 0.1 * run.omega_inf[0]) < 1e-10
    manifest = json.loads(run.manifest_json())
    assert manifest["converged"] and len(manifest["trace"]) == run.steps

    lo = kt.excluded_measure("twist-1-1", 0.1, 0.01, grid_res=512)
    hi = kt.excluded_measure("twist-1-1", 0.1, 0.1, grid_res=512)
    slope = math.log(hi["measure"] / lo["measure"]) / math.log(10.0)
    assert 0.9 <= slope <= 1.1, slope

    csv = kt.survival_sweep(json.dumps({"eps_grid": [0.0], "samples": 2}))
    assert csv.startswith("eps,t,screen_pass,converged,residual_ok,fraction\n")

    try:
        kt.TestModel("no-such-preset", 0.0, 0.1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown preset accepted")

    resonant = kt.TestModel("twist-2-1", 1e-6, 0.1)
    try:
        resonant.kam_run([resonant.theta[0] / 0.1, 0.381966011250105])
    except kt.KamFailure:
        pass
    else:
        raise AssertionError("resonant parameter converged")

    print("smoke test passed")


if __name__ == "__main__":
    main()
