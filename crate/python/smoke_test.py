"""Smoke test for the goldmark extension module.

Build the module and run this script with:

    cargo build --release -p goldmark-py --features extension-module
    cp target/release/libgoldmark_py.so python/goldmark.so
    python3 python/smoke_test.py
"""

import pathlib
import sys
import tempfile

sys.path.insert(0, str(pathlib.Path(__file__).resolve().parent))

import goldmark  # noqa: E402


def main():
    assert goldmark.tile_size(0.5) == 256
    assert goldmark.tile_size(0.25) == 512
    assert goldmark.auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75
    mean, std, lo, hi = goldmark.split_summary([0.7, 0.72, 0.74, 0.76, 0.78])
    assert abs(mean - 0.74) < 1e-12 and lo < mean < hi

    hist = [0] * 256
    hist[40], hist[200] = 500, 500
    t = goldmark.otsu_threshold(hist)
    assert 40 <= t < 200, t

    with tempfile.TemporaryDirectory() as tmp:
        config = goldmark.synth(pathlib.Path(tmp) / "cohort")
        run_dir, version, stages = goldmark.run(config)
        assert version.startswith(goldmark.PIPELINE_VERSION)
        print(f"run {version}")
        for name, executed, skipped in stages:
            print(f"  {name:<6} executed={executed} skipped={skipped}")
        _, _, again = goldmark.run(config)
        assert all(executed == 0 for _, executed, _ in again)

        run_dir = pathlib.Path(run_dir)
        emb = sorted((run_dir / "embeddings" / "stub-v1").glob("*.emb"))
        artifacts = [goldmark.EmbeddingArtifact.read(p) for p in emb]
        manifest = goldmark.TileManifest.read(run_dir / "tiles" / f"{artifacts[0].slide_id}.tiles.csv")
        assert len(manifest) == artifacts[0].n_tiles

        weights = next((run_dir / "weights" / "stub-v1").rglob("split0.best_auc.gmw"))
        model = goldmark.Model.load(weights)
        probs, attention = model.predict(artifacts)
        assert len(probs) == len(artifacts)
        assert all(0.0 < p < 1.0 for _, p in probs)
        per_slide = {}
        for slide, _, a in attention:
            per_slide[slide] = per_slide.get(slide, 0.0) + a
        assert all(abs(s - 1.0) < 1e-6 for s in per_slide.values())
        for slide, p in probs:
            print(f"  {slide} p={p:.3f}")
    print("ok")


if __name__ == "__main__":
    main()
