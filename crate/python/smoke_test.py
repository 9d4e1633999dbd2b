"""Builds the extension with cargo, imports it and runs a few checks.

Usage: python3 python/smoke_test.py [--release]
"""

import importlib
import math
import shutil
import subprocess
import sys
import sysconfig
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def build(release: bool) -> Path:
    cmd = ["cargo", "build", "-p", "guided-admm-python"]
    if release:
        cmd.append("--release")
    subprocess.run(cmd, cwd=ROOT, check=True)
    profile = "release" if release else "debug"
    lib = ROOT / "target" / profile / "libguided_admm.so"
    if not lib.exists():
        lib = lib.with_suffix(".dylib")
    out = Path(tempfile.mkdtemp()) / ("guided_admm" + (sysconfig.get_config_var("EXT_SUFFIX") or ".so"))
    shutil.copy(lib, out)
    return out.parent


def close(a, b, tol):
    return all(abs(x - y) <= tol * (1 + abs(y)) for x, y in zip(a, b))


def main() -> int:
    sys.path.insert(0, str(build("--release" in sys.argv)))
    ga = importlib.import_module("guided_admm")

    assert {"inpaint-8", "trajectory-32"} <= set(ga.presets())

    sched = ga.Schedule.linear(1000)
    assert sched.steps == 1000 and len(sched.alpha_bars()) == 1000

    # Reverse step on a unit Gaussian equals the rescaled quadratic prox.
    prior = ga.Prior.gaussian([0.0, 0.0], 1.0)
    v = [0.7, -1.3]
    betas = sched.betas()
    for t in (1, 500, 1000):
        b = betas[t - 1]
        p = ga.prox_quadratic([0.0, 0.0], 1.0, v, b / (1 - b))
        expect = [x / math.sqrt(1 - b) for x in p]
        assert close(ga.diffusion_prox_step(sched, prior, v, t), expect, 1e-12)

    guidance = ga.LinearGaussianGuidance([[1.0, 0.0]], [0.5], 0.3)
    exact = ga.exact_gaussian_posterior([0.0, 0.0], 1.0, [[1.0, 0.0]], [0.5], 0.3)
    approx = ga.importance_posterior(prior, guidance, 50000, 1)
    for m, a, se in zip(exact["mean"], approx["mean"], approx["mean_se"]):
        assert abs(m - a) <= 4 * se, (m, a, se)

    run = ga.run_admm(ga.Schedule.linear(200), prior, guidance, rho=200.0, chains=64, noise=True, seed=3)
    assert run.failed_chains == 0 and len(run.samples()) == 64
    assert run.step_summary()[-1]["t"] == 1

    a = ga.run_unconditional(sched, prior, chains=8, seed=4).samples()
    b = ga.run_admm(sched, prior, rho=1e4, inner_iters=0, noise=True, chains=8, seed=4).samples()
    assert all(close(x, y, 1e-6) for x, y in zip(a, b))

    res = ga.run_preset("inpaint-8", steps=50, chains=16)
    assert len(res.samples()) == 16
    assert ga.preset_oracle("inpaint-8")["method"] == "conjugate_exact"
    assert ga.psnr([0.0], [0.0]) == math.inf
    assert abs(ga.wasserstein2_gaussian([0.0], [[1.0]], [1.0], [[1.0]]) - 1.0) < 1e-9

    try:
        ga.Prior.gaussian([0.0], -1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative variance accepted")

    print("python smoke test: ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
