"""Smoke test for the `vptm` extension module.

Build first with `cargo build -p vptm-py --release` (or a debug build), then
run `python3 python/smoke_test.py`. The shared library is copied next to a
temporary `vptm.so` so no install step is needed.
"""

import importlib
import math
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module(workdir):
    candidates = [os.environ.get("VPTM_LIB", "")]
    candidates += [os.path.join(ROOT, "target", p, "libvptm.so") for p in ("release", "debug")]
    for lib in candidates:
        if lib and os.path.exists(lib):
            shutil.copy(lib, os.path.join(workdir, "vptm.so"))
            sys.path.insert(0, workdir)
            return importlib.import_module("vptm")
    sys.exit("libvptm.so not found; run `cargo build -p vptm-py` first")


def main():
    work = tempfile.mkdtemp()
    vptm = load_module(work)

    tuned, total, ratio = vptm.count_parameters(5, 64, 102)
    assert tuned == 5 * 768 + 768 * 64 + 64 + 102 * 64, tuned
    assert abs(ratio - 100.0 * tuned / total) < 1e-9
    assert vptm.gflops(198) > vptm.gflops(197) > 0.0
    assert vptm.sequence_layout("CXPM", 196, 5) == (203, 202)
    assert vptm.sequence_layout("CMPX", 196, 5) == (203, 1)

    masked = vptm.block_mask(14, 14, 0.4, 3)
    assert 79 <= len(masked) <= 88 and len(set(masked)) == len(masked)

    train = vptm.Dataset.synthetic(3, 6, 1, image_size=16, noise_std=10.0)
    test = vptm.Dataset.synthetic(3, 4, 2, image_size=16, noise_std=10.0)
    assert len(train) == 18 and train.n_classes == 3
    assert train.shape == (16, 16, 1)
    assert train.class_histogram() == [6, 6, 6]
    assert len(train.image(0)) == 256

    path = os.path.join(work, "train.vptmdata")
    train.save(path)
    assert vptm.Dataset.load(path).labels == train.labels

    codebook = vptm.Codebook.fit(train, 16, seed=1)
    assert len(codebook) == 16 and codebook.mode == "pixel" and codebook.dim == 16
    assert 0 <= codebook.tokenize([0.0] * 16) < 16

    trace = os.path.join(work, "trace.csv")
    backbone = vptm.Backbone.pretrain(train, codebook, epochs=2, batch_size=8, trace=trace)
    with open(trace) as f:
        assert f.readline().strip() == "step,lr,loss"
    tokens = backbone.tokenize(train, 0, codebook)
    assert len(tokens) == 16 and all(0 <= t < 16 for t in tokens)

    ckpt = os.path.join(work, "backbone.ckpt")
    backbone.save(ckpt)
    assert vptm.Backbone.load(ckpt).checkpoint_bytes() == backbone.checkpoint_bytes()

    before = backbone.checkpoint_bytes()
    model, acc = vptm.TunedModel.train(backbone, train, test, n_prompts=2, proto_dim=8, epochs=2, batch_size=6)
    assert backbone.checkpoint_bytes() == before
    assert 0.0 <= acc <= 1.0 and model.regime == "vptm" and model.layout == "CXPM"
    assert model.trainable_count() == 2 * 64 + 64 * 8 + 8 + 3 * 8
    assert math.isclose(model.evaluate(test), acc)
    assert 0 <= model.predict(test, 0) < 3

    rows = model.embeddings(test)
    assert [r[0] for r in rows[:3]] == ["proto"] * 3
    assert len(rows) == 3 + len(test) and all(len(r[2]) == 8 for r in rows)

    try:
        vptm.Codebook.fit(vptm.Dataset.synthetic(2, 2, 0, image_size=15), 8)
    except ValueError:
        pass
    else:
        raise AssertionError("15x15 images accepted for 4x4 patches")

    shutil.rmtree(work)
    print("python smoke test passed")


if __name__ == "__main__":
    main()
