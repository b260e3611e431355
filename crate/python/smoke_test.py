"""Exercises the Python bindings end to end. Run after
`pip install -e crates/python --no-build-isolation`."""

import os
import tempfile

import numpy as np

import hybridsplat_py as hs


def as_array(img):
    return np.frombuffer(img.to_bytes(), dtype="<f8").reshape(img.shape)


def main():
    r = hs.Renderer(threads=2)

    empty = hs.Scene.empty()
    cam = hs.Camera([0, -3, 1], [0, 0, 0], [0, 0, 1], 60.0, 32, 24)
    black = as_array(r.render(empty, cam))
    assert black.shape == (24, 32, 3) and not black.any()

    scene, views = hs.Scene.mirror_probe(seed=1, dust=20, n_views=2, width=48, height=48)
    assert len(scene) == scene.n_base + scene.n_reflective
    images = r.render_all(scene, views[0])
    final = as_array(images["final"])
    assert final.max() > 0.05
    beta = as_array(images["beta"])
    assert beta.min() >= 0.0 and beta.max() <= 1.0 + 1e-12

    stats = r.trace_stats(scene, views[0])
    assert 0 < stats["rays_traced"] <= scene.n_reflective
    print(f"rays traced {stats['rays_traced']} vs {stats['pixel_count']} pixels")

    serial = hs.Renderer(threads=1, pipelined=False).render(scene, views[0])
    assert serial.max_abs_diff(images["final"]) == 0.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "scene.hspl")
        scene.save(path)
        again = hs.Scene.load(path)
        assert r.render(again, views[0]).max_abs_diff(images["final"]) == 0.0
        hs.save_views(views, os.path.join(d, "views.json"))
        assert len(hs.load_views(os.path.join(d, "views.json"))) == 2
        images["final"].save(os.path.join(d, "final.png"))

    base_scores, ref_scores = r.prune_scores(scene, views)
    assert len(base_scores) == scene.n_base and len(ref_scores) == scene.n_reflective
    pruned, rounds = r.prune(scene, views, rounds=2, ratio=0.3)
    assert len(rounds) == 3 and len(pruned) < len(scene)
    print("prune psnr per round", [round(row[3], 2) for row in rounds])

    targets = [r.render(scene, v) for v in views]
    start = hs.Scene.random(seed=2, base=30, reflective=5)
    fitted, losses = r.fit(start, views, targets, iterations=10)
    assert len(losses) == 11 and losses[-1] < losses[0]
    assert r.mean_psnr(fitted, views, targets) > r.mean_psnr(start, views, targets)
    print(f"fit loss {losses[0]:.5f} -> {losses[-1]:.5f}")

    try:
        hs.Scene.load("/nonexistent/scene.hspl")
    except OSError:
        pass
    else:
        raise AssertionError("missing file should raise")

    print("smoke test ok")


if __name__ == "__main__":
    main()
