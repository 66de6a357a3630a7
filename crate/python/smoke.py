"""Smoke test for the subeq_py extension.

Build first with `cargo build -p subeq-py --release` (or `maturin develop`
inside crates/py), then run `python python/smoke.py`.
"""

import importlib.util
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        import subeq_py
        return subeq_py
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsubeq_py.so"
        if lib.exists():
            break
    else:
        sys.exit("libsubeq_py.so not found; run `cargo build -p subeq-py --release`")
    dst = Path(tempfile.mkdtemp()) / "subeq_py.so"
    shutil.copy(lib, dst)
    spec = importlib.util.spec_from_file_location("subeq_py", dst)
    mod = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(mod)
    return mod


def main():
    sq = load_module()
    names = sq.morphologies()
    assert "3d_hopper_5_full" in names, names
    name, limbs, edges = sq.morph_check("3d_hopper_5_full")
    assert limbs == 5 and edges == 4, (name, limbs, edges)

    ok, table = sq.verify("SET", trials=3, seed=1)
    assert ok, table

    policy = sq.Policy("SET", seed=3)
    actions = policy.act_on_reset("3d_hopper_5_full", seed=2)
    assert len(actions) == 5 and all(abs(x) <= 1 for a in actions for x in a)

    base = policy.evaluate("3d_hopper_5_full", episodes=2, seed=4)
    turned = policy.evaluate("3d_hopper_5_full", episodes=2, seed=4, rotate_deg=137.0)
    for a, b in zip(base, turned):
        assert math.isclose(a, b, rel_tol=1e-6, abs_tol=1e-6), (a, b)

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "p.ckpt")
        policy.save(path)
        again = sq.Policy.load(path)
        assert again.variant == "SET"
        assert again.act_on_reset("3d_hopper_5_full", seed=2) == actions

    try:
        sq.Policy("SET_nope")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown variant accepted")

    rnd = sq.random_baseline("3d_hopper_5_full", episodes=3, seed=0)
    print(f"ok: {policy.num_parameters()} parameters, returns {base}, random {rnd:.3f}")


if __name__ == "__main__":
    main()
