"""Smoke test for the Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
Then run:                 python3 python/smoke_test.py
"""

import os
import sys
import tempfile

import diffstyle


def main() -> int:
    # A tiny run keeps the test fast; quality is not checked here.
    base = diffstyle.BaseModel.pretrain(steps=20, seed=1)
    face = diffstyle.Image.toy_face(3)
    style = diffstyle.Image.toy_style(0)
    assert face.shape == [3, 32, 32], face.shape

    z = base.encode(face)
    assert len(z) > 0 and all(v == v for v in z)

    digest = base.frozen_digest()
    model = diffstyle.Finetuned.finetune(base, style, iterations=3, seed=0)
    assert base.frozen_digest() == digest, "finetuning changed the frozen base"
    assert len(model.total_losses()) == 3

    again = diffstyle.Finetuned.finetune(base, style, iterations=3, seed=0)
    assert model.digest() == again.digest(), "same seed gave different checkpoints"

    out = model.stylize(face)
    assert out.shape == face.shape
    assert 0.0 <= base.structure_distance(face, out)
    assert -1.0 <= base.id_similarity(face, out) <= 1.0

    assert diffstyle.directional_loss([1.0, 0.0], [1.0, 0.0]) == 0.0
    assert diffstyle.directional_loss([1.0, 0.0], [-1.0, 0.0]) == 2.0
    assert diffstyle.auc([0.9, 0.1], [True, False]) == 1.0

    corpus = diffstyle.toy_artifact_corpus(4, 0)
    rows = base.density_rank([img for img, _ in corpus], k=1, seed=0)
    assert sorted(r[2] for r in rows) == [0, 1, 2, 3]

    try:
        diffstyle.Image([3, 2, 2], [0.0])
    except diffstyle.DiffstyleError:
        pass
    else:
        raise AssertionError("bad image shape was accepted")

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "ft.ckpt")
        model.save(path)
        assert diffstyle.Finetuned.load(path).digest() == model.digest()
        png = os.path.join(tmp, "out.png")
        out.write_png(png)
        assert diffstyle.Image.read_png(png).shape == out.shape
        assert diffstyle.cli(["--help"]) == 0
        assert diffstyle.cli(["stylize", "--checkpoint", os.path.join(tmp, "missing.ckpt"), "--out", tmp]) != 0

    print("python smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
