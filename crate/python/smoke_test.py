"""Smoke test for the irregrid Python bindings.

Build and install first:  pip install maturin && maturin develop -m crates/py/Cargo.toml --release
"""

import json
import math
import os
import random
import tempfile

import irregrid


def main():
    grid = irregrid.GridSpec(0.0, 2.0, 0.0, 3.0, 0.1)
    assert (grid.n_rows, grid.n_cols) == (21, 31)

    times = [0, 1, 2]
    values = [
        math.sin(2 * grid.lat(i)) * math.cos(grid.lon(j)) + 0.1 * d
        for d in times
        for i in range(grid.n_rows)
        for j in range(grid.n_cols)
    ]
    truth = irregrid.FieldStack(grid, times, values)
    assert abs(truth.sample(1.0, grid.lat(4), grid.lon(7)) - values[grid.n_rows * grid.n_cols + 4 * grid.n_cols + 7]) < 1e-12
    assert len(truth.patch(1.5, 1.0, 1.0, 1)) == 9

    rng = random.Random(3)
    recs = []
    for _ in range(400):
        t, lat, lon = rng.uniform(0, 2), rng.uniform(0, 2), rng.uniform(0, 3)
        recs.append((t, lat, lon, truth.sample(t, lat, lon)))
    obs = irregrid.TrackObservations(recs)
    assert len(obs) == 400

    lr_grid = irregrid.GridSpec(0.0, 2.0, 0.0, 3.0, 0.25)
    var = sum(r[3] ** 2 for r in recs) / len(recs) - (sum(r[3] for r in recs) / len(recs)) ** 2
    lr = irregrid.oi_reconstruct(obs, lr_grid, times, var, l_s=0.5, l_t=2.0)
    up = irregrid.upsample(lr, grid)
    per_day, mean = irregrid.evaluate_rmse(up, truth)
    assert len(per_day) == 3 and 0.0 < mean < 1.0, mean
    assert irregrid.evaluate_rmse(truth, truth)[1] == 0.0

    samples = [[rng.uniform(-1, 1) for _ in range(18)] for _ in range(60)]
    for method in ("pca", "ksvd", "nn"):
        d = irregrid.fit_dictionary(method, samples, 4, t0=2, iters=5, seed=1)
        assert (d.kind, d.k, d.m) == (method, 4, 18)
        alpha = d.code(samples[0])
        assert len(d.decode(alpha)) == 18
        assert irregrid.OperatorDictionary.from_json(d.to_json()).atoms() == d.atoms()
        if method == "nn":
            assert min(alpha) >= 0.0

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "truth.fld")
        irregrid.write_fld(truth, path)
        assert irregrid.read_fld(path).values() == truth.values()

    try:
        irregrid.GridSpec(1.0, 0.0, 0.0, 1.0, 0.1)
    except ValueError as e:
        assert str(e).startswith("E_"), e
    else:
        raise AssertionError("inverted grid accepted")

    cfg = {
        "truth": {"n_days": 6, "n_eddies": 5, "grid": {"lat_min": 36.5, "lat_max": 37.5, "lon_min": 1.5, "lon_max": 3.0, "step": 0.05}},
        "harvest": {"n_target": 40},
        "methods": [{"method": "global"}, {"method": "nn", "k": [2]}],
    }
    report = json.loads(irregrid.run_experiment(json.dumps(cfg)))
    labels = [s["label"] for s in report["series"]]
    assert labels == ["global", "nn"], labels
    assert all(math.isfinite(v) for s in report["series"] for v in s["per_day"])
    print("irregrid smoke test ok: baseline %.4f, nn %.4f" % (report["baseline"]["mean"], report["series"][1]["mean"]))


if __name__ == "__main__":
    main()
