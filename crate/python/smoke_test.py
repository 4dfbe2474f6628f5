"""Exercise the stgdat Python module end to end on a tiny synthetic set.

Build and install first:  maturin develop --release -m crates/python/Cargo.toml
"""

import json
import math
import os
import sys
import tempfile

import stgdat


def main() -> int:
    scenes = stgdat.generate_scenes("intersection", 8, n_agents=4, steps=60, seed=1)
    assert len(scenes) == 8
    s = scenes[0]
    ids = s.agent_ids
    assert len(s.positions(ids[0])) == len(s.truth_positions(ids[0])) == 60
    assert stgdat.Scene.from_json(s.to_json()).to_json() == s.to_json()

    model = stgdat.Model(preset="compact", ablation="T+C+K", seed=0)
    data = stgdat.Dataset.from_scenes(scenes, model, seed=0)
    n_train, n_val, n_test = data.sizes()
    assert n_train > 0 and n_test > 0, data.sizes()
    print("windows", data.sizes(), "maps", data.locations(), "params", model.num_parameters)

    report = model.fit(data, epochs=2, seed=0)
    assert len(report["epochs"]) == 2
    ade, fde = model.evaluate(data)
    assert math.isfinite(ade) and math.isfinite(fde)
    print(f"test ade={ade:.3f} m fde={fde:.3f} m")

    forecasts = model.forecast(data, k=3, seed=7)
    assert len(forecasts) == n_test
    assert all(len(a["draws"]) == 3 for f in forecasts for a in f["agents"])
    assert forecasts == model.forecast(data, k=3, seed=7)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.json")
        digest = model.save(path)
        again = stgdat.Model.load(path)
        assert again.save(os.path.join(d, "copy.json")) == digest
        assert again.evaluate(data) == (ade, fde)

    cfg = json.dumps({"occlusions": [{"start": 25, "len": 5}]})
    for mode in ("cvm", "cam", "model"):
        r = stgdat.track(scenes[-1], mode, model=model, dataset=data, config=cfg)
        print(f"track {mode}: position rmse {r['position_rmse']:.3f} m")
        assert math.isfinite(r["position_rmse"])

    gc = stgdat.grad_check("T", seed=0)
    worst = max(p["max_rel_error"] for p in gc["params"])
    print(f"grad check T: max relative error {worst:.2e}")
    assert worst < 1e-4

    try:
        stgdat.generate_scenes("canal", 1)
    except ValueError:
        pass
    else:
        raise AssertionError("unknown archetype accepted")
    print("ok")
    return 0


if __name__ == "__main__":
    sys.exit(main())
