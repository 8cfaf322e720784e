"""Smoke test for the dmd extension module.

Build and install first:

    pip install maturin
    maturin develop -m crates/python/Cargo.toml

then run `python crates/python/python/smoke_test.py`.
"""

import math
import tempfile

import dmd


def main():
    cfg = dmd.Config()
    for key, value in {
        "gen_hidden": "16,16",
        "disc_hidden": "12,12,12,12,12",
        "steps": "64",
        "batch": "32",
        "cadence": "8",
        "probe_size": "16",
        "snapshot_every": "16",
        "keep_every": "32",
        "eval_samples": "128",
    }.items():
        cfg.set(key, value)
    cfg.validate()
    print(cfg)

    trainer = dmd.Trainer(cfg, 0)
    detections = []
    for _ in range(16):
        out = trainer.step()
        assert math.isfinite(out["d_loss"]) and math.isfinite(out["g_loss"])
        if "detection" in out:
            detections.append(out["detection"]["R_t"])
    print(f"16 steps, R_t = {[round(r, 4) for r in detections]}")

    # Checkpoint round trip: the resumed trainer continues identically.
    resumed = dmd.Trainer.resume(cfg, trainer.checkpoint())
    trainer.run_until(48)
    resumed.run_until(48)
    assert trainer.param_hash() == resumed.param_hash()

    samples = trainer.samples(256, 1)
    assert len(samples) == 256 and len(samples[0]) == 2
    probs = trainer.probabilities(samples[:8])
    assert all(0.0 <= p <= 1.0 for p in probs)

    assert dmd.frechet(samples, samples) == 0.0
    assert abs(dmd.cosine([1.0, 1.0], [1.0, 0.0]) - 1 / math.sqrt(2)) < 1e-12
    mask = dmd.sample_mask([4, 8], 0.25, 7)
    assert mask.count(0.0) == 8

    try:
        cfg.set("ratio", "1.5")
        cfg.validate()
    except ValueError as e:
        print(f"rejected as expected: {e}")
    else:
        raise AssertionError("invalid ratio accepted")
    cfg.set("ratio", "0.3")

    with tempfile.TemporaryDirectory() as out:
        cfg.out = out
        summary = dmd.run_experiment(cfg, 0)
        print(f"run: Fréchet {summary['final_frechet']:.4f}, mask fraction {summary['mask_fraction']:.3f}")
        report = dmd.report([out], out)
        assert [row["label"] for row in report["rows"]] == ["dmd"]

    print("smoke test passed")


if __name__ == "__main__":
    main()
