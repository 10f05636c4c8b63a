"""Smoke test for the pymucio extension module."""

import json
import math

import pymucio


def main():
    n, t = 200, 115.0
    oracle = pymucio.ThresholdOracle.fair_majority(n, t)
    eps = oracle.probability()
    assert 0.01 < eps < 0.05, eps
    assert oracle.contains([1.0] * n)
    assert not oracle.contains([0.0] * n)

    params = pymucio.TamperParams.average_case(n, eps, 0.1).with_mode("mucio")
    assert math.isclose(params.lambda_, math.sqrt(2 * math.log(1 / eps) / n))
    run = oracle.tamper(params, seed=3)
    assert run["success"], "exact oracle runs always succeed"
    assert run["budget"] == pymucio.hamming(run["u"], run["v"])

    worst = pymucio.TamperParams.worst_case(n, eps, 0.1)
    capped = oracle.tamper(worst, seed=4)
    assert capped["budget"] <= worst.k_cap

    mc = oracle.tamper(params.with_mode("mucio-abort"), seed=5, oracle="mc", m_eval=200)
    assert mc["queries"] > 0

    assert pymucio.sample_counts(0.1, 0.0, 1.0) == (8000, 100)
    rate, lo, hi = pymucio.wilson(900, 1000)
    assert abs(lo - 0.880) < 1e-3 and abs(hi - 0.917) < 1e-3

    config = {
        "experiment": {"kind": "cointoss", "parties": 51, "epsilon": 0.5, "delta": 0.1,
                       "cap_factor": 3.0, "oracle": {"kind": "threshold"}},
        "trials": 40,
        "seed": 1,
        "wall_time": False,
    }
    records, summary = pymucio.run_experiment(json.dumps(config))
    assert len(records) == 40 and summary["trials"] == 40
    again, _ = pymucio.run_experiment(json.dumps(config))
    assert records == again
    print(f"ok: eps={eps:.4f} budget={run['budget']} coin bias={summary['success']['rate']:.2f}")


if __name__ == "__main__":
    main()
