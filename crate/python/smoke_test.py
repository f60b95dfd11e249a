"""Smoke test for the splatedit_py extension module.

Build it first:

    cargo build -p splatedit-py --release --features extension-module

then run `python3 python/smoke_test.py`. The script imports an installed
`splatedit_py` if there is one, otherwise the freshly built library from
target/.
"""

import importlib
import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    try:
        return importlib.import_module("splatedit_py")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = ROOT / "target" / profile / "libsplatedit_py.so"
        if lib.exists():
            tmp = Path(tempfile.mkdtemp())
            shutil.copy(lib, tmp / "splatedit_py.so")
            sys.path.insert(0, str(tmp))
            return importlib.import_module("splatedit_py")
    sys.exit("splatedit_py not built; see the module docstring")


def main():
    sp = load_module()

    # A floor brighter on one side and a small object.
    scene = sp.Scene()
    for i in range(10):
        for j in range(10):
            x, z = -1.8 + 0.4 * i, -1.8 + 0.4 * j
            b = 0.2 + 0.6 * (x + 1.8) / 3.6
            scene.add((x, -0.6, z), (0.25, 0.25, 0.25), 0.9, (b, b, b))
    for k in range(6):
        a = 2 * math.pi * k / 6
        scene.add((0.25 * math.cos(a), 0.0, 0.25 * math.sin(a)), (0.12,) * 3, 0.8, (0.9, 0.2, 0.2))
    assert len(scene) == 106

    box = sp.BoundingBox((0, 0, 0), (1, 1, 1))
    assert len(scene.excise(box)) == 100

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "scene.ply")
        scene.save(path)
        assert len(sp.Scene.load(path)) == len(scene)

    cam = sp.Camera.look_at(32, 32, 40.0, (0.0, 0.6, -3.0), (0.0, 0.0, 0.0))
    out = sp.render(scene, cam)
    assert out.color.shape == (32, 32, 3)
    assert 0.0 < out.mask.mean() <= 1.0

    anchor = sp.propose_anchor(scene, (0, 0, 0), 3.0, count=12, width=32, height=32)
    assert 0 <= anchor["view_index"] < 12
    assert abs(anchor["azimuth_deg"] - 30.0 * anchor["view_index"]) < 1e-9

    a = sp.Image(2, 2, 1, [1.0, 2.0, 3.0, 4.0])
    b = sp.Image(2, 2, 1, [0.0, 0.0, 0.0, 0.0])
    assert sp.cfg_combine(a, b, 2.0).data() == [3.0, 6.0, 9.0, 12.0]

    prior = sp.AnalyticPrior(out.color)
    grad, t = prior.sds_grad(out.color, guidance_scale=1.0, seed=3)
    assert grad.shape == out.color.shape and t > 0
    mean, _ = prior.sds_moments(out.color, guidance_scale=1.0)
    assert max(abs(v) for v in mean.data()) < 1e-12

    # Lift a sphere to the object's anchor render.
    obj = sp.Scene()
    for k in range(6):
        a = 2 * math.pi * k / 6
        obj.add((0.25 * math.cos(a), 0.0, 0.25 * math.sin(a)), (0.12,) * 3, 0.8, (0.9, 0.2, 0.2), object=True)
    target = sp.render(obj, cam)
    mask = sp.Image(32, 32, 1, [1.0 if v >= 0.5 else 0.0 for v in target.mask.data()])
    init = sp.Scene.init_sphere(150, (0, 0, 0), 0.5, seed=1)
    lifted, history = sp.lift(init, cam, target.color, mask, (0, 0, 0), iterations=120, seed=1)
    assert len(history) == 120 and history[-1]["rgb"] < history[0]["rgb"]
    assert lifted.object_count() == len(lifted)

    try:
        sp.lift(init, cam, target.color, sp.Image(32, 32, 1), (0, 0, 0), iterations=1)
    except sp.DegenerateError:
        pass
    else:
        raise AssertionError("empty mask should be degenerate")

    print(f"ok: anchor view {anchor['view_index']}, lift rgb {history[0]['rgb']:.4f} -> {history[-1]['rgb']:.4f}")


if __name__ == "__main__":
    main()
