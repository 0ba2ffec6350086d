"""Smoke test for the ilab extension module.

Build and run from the repository root:

    cargo build -p ilab-py --release --features extension-module
    cp target/release/libilab.so python/ilab.so
    python3 python/smoke_test.py
"""

import json
import os
import sys

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import ilab  # noqa: E402


def bimodal():
    return ilab.GaussianMixture.from_json(
        json.dumps(
            {
                "dim": 1,
                "components": [
                    {"weight": 0.5, "mean": [-2.0], "cov": {"iso": 0.25}},
                    {"weight": 0.5, "mean": [2.0], "cov": {"iso": 0.25}},
                ],
            }
        )
    )


def main():
    rho0 = ilab.GaussianMixture.standard_normal(1)
    rho1 = bimodal()
    field = ilab.MixtureField(rho0, rho1)
    assert field.dim == 1

    # Closed form against the Monte-Carlo oracle.
    t, x = 0.4, [0.8]
    b = field.velocity(t, x)
    b_hat, se, ess = field.oracle(t, x, n=400_000, seed=1)
    assert abs(b[0] - b_hat[0]) < 4 * se[0], (b, b_hat, se)
    assert ess > 100

    ev = field.evaluate(t, x)
    assert abs(ev["divergence"] - ev["jacobian"][0][0]) < 1e-12

    # Straight transport between unit Gaussians moves at the mean gap.
    shift = ilab.MixtureField(rho0, ilab.GaussianMixture.isotropic([2.0], 1.0))
    assert abs(shift.velocity(0.3, [0.1])[0] - 2.0) < 1e-12

    sched = ilab.Schedule("geometric-mid", 0.2, 0.01, 0.01)
    assert sched.n_steps > 0 and sched.times[0] == 0.01

    times, states = field.integrate(sched, [0.3], "heun")
    assert len(times) == len(states) == sched.n_steps + 1

    tvs = {}
    for name in ("euler", "heun"):
        ens = field.push(sched, 20_000, name, seed=3)
        assert len(ens) + ens.dropped == 20_000
        target = field.marginal(sched.times[-1])
        tvs[name], _ = ens.tv_density_ratio(target)
        hist, _ = ilab.tv_histogram(ens.points, target.sample(20_000, 4), 1)
        assert 0.0 <= hist <= 1.0
    assert tvs["heun"] < tvs["euler"], tvs

    slope, _, r2 = ilab.fit_loglog_slope([(h, 3 * h * h) for h in (0.2, 0.1, 0.05)])
    assert abs(slope - 2.0) < 1e-12 and r2 > 0.999999

    try:
        ilab.Schedule("bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad schedule kind accepted")

    print("smoke test ok: euler TV %.4f, heun TV %.5f" % (tvs["euler"], tvs["heun"]))


if __name__ == "__main__":
    main()
