"""Quick end-to-end check of the Python bindings.

    maturin develop -m crates/python/Cargo.toml --release
    python python/smoke.py [--pipeline]

Without --pipeline this takes a few seconds; with it, a desk-scale run of
the double integrator is trained and verified (minutes).
"""

import math
import sys
import tempfile
from pathlib import Path

import zubov_py as z


def check(cond, what):
    print(("ok   " if cond else "FAIL ") + what)
    if not cond:
        sys.exit(1)


def main():
    vdp = z.System("van_der_pol")
    check(vdp.state_dim == 2 and vdp.control_dim == 1, "van_der_pol dimensions")
    check(all(abs(v) < 1e-12 for v in vdp.eval(vdp.x_star, [0.0])), "x* is an equilibrium")

    try:
        z.System("warp_drive")
        check(False, "unknown system raises")
    except z.ZubovError:
        check(True, "unknown system raises")

    al, bl, au, bu = z.relax("tanh", -0.5, 1.5)
    for i in range(101):
        x = -0.5 + 2.0 * i / 100
        y = math.tanh(x)
        if not (al * x + bl <= y + 1e-12 and y <= au * x + bu + 1e-12):
            check(False, f"tanh relaxation at {x}")
    check(True, "tanh relaxation encloses the function")

    spot = z.verify_planted_spot()
    check(spot["status"] == "VERIFIED", f"planted spot verified at c1={spot['c1']:.4f}, c2={spot['c2']:.4f}")
    check((spot["c1"], spot["c2"]) != (spot["initial_c1"], spot["initial_c2"]), "adaptive thresholds stepped around the planted violation")

    if "--pipeline" in sys.argv:
        verdict, ck = z.run_desk_pipeline("double_integrator", 0)
        check(verdict["status"] == "VERIFIED", f"double integrator pipeline: {verdict['status']}")
        with tempfile.TemporaryDirectory() as d:
            p = Path(d) / "ck.json"
            ck.save(p)
            again = z.Checkpoint.load(p)
            check(again.sha256() == ck.sha256(), "checkpoint round trip keeps its hash")
        pgd = ck.pgd_verify(verdict["c1"], verdict["c2"], restarts=500)
        check(pgd["pass"], f"pgd found {pgd['violations']} violations")
        vol = ck.volume(verdict["c2"], samples=50_000)
        check(vol["volume"] > 0, f"ROA volume {vol['volume']:.3f}")
        states, converged = ck.simulate([0.1, 0.0])
        check(converged and len(states) > 1, "rollout from near x* converges")

    print("smoke passed")


if __name__ == "__main__":
    main()
