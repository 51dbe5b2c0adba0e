"""Smoke test for the `pfm` extension module. Build it first with
`pip install maturin && maturin develop -m crates/py/Cargo.toml --release`."""

import math
import tempfile
from pathlib import Path

import pfm


def main():
    # three-point total order with a uniform reference
    prefs = [[0.5, 0.0, 0.0], [1.0, 0.5, 0.0], [1.0, 1.0, 0.5]]
    ref = [1 / 3] * 3
    p1 = pfm.marginal_positive(ref, prefs)
    p0 = pfm.marginal_negative(ref, prefs)
    assert all(abs(a - b) < 1e-12 for a, b in zip(p1, [1 / 9, 3 / 9, 5 / 9])), p1
    assert all(abs(a - b) < 1e-12 for a, b in zip(p0, [5 / 9, 3 / 9, 1 / 9])), p0
    assert pfm.iterate_marginal(ref, prefs, 200)[2] > 0.999

    ds = pfm.Dataset.generate(300, seed=1)
    assert len(ds) == 300 and ds.y_dim == 2
    field, losses = pfm.FlowField.train(ds, hidden=[32, 32], epochs=20, seed=1)
    assert len(losses) == 20 and all(math.isfinite(l) for l in losses)

    with tempfile.TemporaryDirectory() as d:
        ds.save(Path(d) / "data.csv")
        field.save(Path(d) / "flow.ckpt")
        again = pfm.FlowField.load(Path(d) / "flow.ckpt")
        assert len(pfm.Dataset.load(Path(d) / "data.csv")) == 300
        assert again.push([[0.0, 0.0]]) == field.push([[0.0, 0.0]])

        cfg = Path(d) / "cfg.toml"
        cfg.write_text("[data]\nn = 100\n[train]\nepochs = 2\n")
        pfm.run_command("train", str(cfg), seed=3, out=str(Path(d) / "run"))
        assert (Path(d) / "run" / "manifest.json").exists()

    samples = field.sample(200, seed=2)
    ref_cloud = pfm.reference_samples(200, seed=3)
    assert pfm.energy_distance(ref_cloud, ref_cloud) == 0.0
    w = pfm.win_rate(samples, ref_cloud, seed=4)
    assert abs(w + pfm.win_rate(ref_cloud, samples, seed=4) - 1.0) < 1e-12
    print(f"ok: final loss {losses[-1]:.3f}, win rate vs reference {w:.3f}")


if __name__ == "__main__":
    main()
