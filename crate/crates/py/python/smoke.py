"""Smoke test for the gtsa_py extension.

Build and install first:  maturin develop --release  (from crates/py)
Then run:                 python python/smoke.py
"""

import math
import tempfile

import gtsa_py as g


def main():
    # geometry
    assert g.rotate_point(1.0, 2.0, 8.0, 1) == (2.0, 7.0)
    a, b = g.Rect(0, 0, 4, 4), g.Rect(2, 1, 6, 3)
    assert a.intersect(b).area() == 4.0
    fm = g.FeatureMap([float(i) for i in range(4)], 1, 2, 2)
    assert g.rotate_map(fm, 1).data == [1.0, 3.0, 0.0, 2.0]
    assert abs(g.roi_align(fm, g.Rect(0, 0, 2, 2), 1, 1).data[0] - 1.5) < 1e-12

    # losses
    z = g.FeatureMap([0.3, -1.0, 2.0, 0.5, 0.1, 0.7, -0.2, 1.1], 2, 2, 2)
    full = g.Rect(0, 0, 2, 2)
    assert abs(g.overlap_loss(z, z, full, full, 0) + 1.0) < 1e-6
    assert abs(g.patch_corr_loss(z, z, 4) + 1.0) < 1e-6
    assert abs(g.rotation_loss([[0.0] * 4] * 3, [0, 1, 2]) - math.log(4)) < 1e-9
    pairs = g.match_topk(z, z, 2)
    assert len(pairs) == 2 and all(s == t for s, t, _ in pairs)

    # model, probe and a tiny training run
    cfg = g.TrainConfig("dim = 16\nheads = 2\ndepth = 1\nbatch_size = 4\nepochs = 1\n")
    cfg.set("global_size", "32")
    cfg.set("local_size", "16")
    assert cfg.get("dim") == "16"
    img = g.synth_image(0, 64)
    assert len(img) == 64 * 64 * 3
    model = g.Model.init(cfg)
    feats = model.encode(img, 64)
    assert feats.shape == (16, 8, 8)
    assert len(model.rotation_logits(img, 64)) == 4
    assert model.probe("four_fold_rotation", n_images=2, n_views=3, disabled=True) == 0.0

    with tempfile.TemporaryDirectory() as out:
        ckpt = g.pretrain(cfg, 8, out)
        trained = g.Model.load(ckpt)
        assert trained.step == 2
        assert trained.config.to_text() == cfg.to_text()

    try:
        g.TrainConfig("no_such_key = 1")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    print("gtsa_py smoke test passed")


if __name__ == "__main__":
    main()
