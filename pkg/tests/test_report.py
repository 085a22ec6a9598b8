import numpy as np
from PIL import Image

from splatgrid import report


def test_figures_are_deterministic_pngs(tmp_path):
    rng = np.random.default_rng(0)
    imgs = [rng.uniform(size=(3, 8, 8)), rng.uniform(size=(8, 8))]

    def draw(d):
        d.mkdir()
        return [report.curves(d / "c.png", {"a": ([0, 1, 2], [3.0, 2.0, 1.5])}, "t", "step", "loss", logy=True),
                report.image_grid(d / "g.png", [imgs], ["row"], ["rgb", "mask"]),
                report.bars(d / "b.png", ["x", "y"], [1.0, 2.0], "v")]

    a, b = draw(tmp_path / "a"), draw(tmp_path / "b")
    for p, q in zip(a, b):
        assert p.read_bytes() == q.read_bytes()
        with Image.open(p) as im:
            assert im.format == "PNG" and im.size[0] > 50
