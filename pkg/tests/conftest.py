import numpy as np
import pytest
from scipy import ndimage

from crowdcell.evaluate import BlobSpec, ScenarioSpec


def textured_image(shape, seed=0, blur=2.0):
    """Smooth random texture in uint8 range."""
    rng = np.random.default_rng(seed)
    g = ndimage.gaussian_filter(rng.standard_normal(shape), blur)
    g = 128 + 100 * g / (3 * g.std())
    return np.clip(np.floor(g + 0.5), 0, 255).astype(np.uint8)


def translated_pair(dx, dy, size=96, pad=20, seed=0):
    """Two frames where the content of the second is the first moved by (dx, dy)."""
    big = textured_image((size + 2 * pad, size + 2 * pad), seed)
    a = big[pad : pad + size, pad : pad + size]
    b = big[pad - dy : pad + size - dy, pad - dx : pad + size - dx]
    return a, b


# -- synthetic scenes shared by acceptance and integration tests -------------

SPEED_W, SPEED_H = 160, 128


def speed_scene(frames, offset, extra=()):
    """Ten noise-textured blobs walking at 1 px/frame in three lanes."""
    blobs = []
    for li, y in enumerate([12, 52, 92]):
        for p in range(4 if li < 1 else 3):
            d = 0 if (li + p) % 2 == 0 else 180
            blobs.append(
                BlobSpec(
                    x=10 + p * 40 + li * 7, y=y, size=20, speed=1.0, direction=d, texture="noise",
                    period=4, intensity=170, contrast=60, bounce=True,
                )
            )
    blobs.extend(extra)
    return ScenarioSpec(width=SPEED_W, height=SPEED_H, frames=frames, seed=3, time_offset=offset,
                        blobs=blobs, noise=1.0)


def fast_blob(start):
    return BlobSpec(x=5, y=52, size=20, speed=5.0, direction=0, texture="noise", period=4,
                    intensity=170, contrast=60, anomalous=True, start=start)


SMALL = 20
LANES = [4, 24, 44, 64, 84, 104]


def striped(x, y, d, **kw):
    args = dict(x=x, y=y, size=SMALL, speed=1.0, direction=d, texture="stripes", orientation=0,
                period=6, intensity=160, contrast=60, bounce=True)
    args.update(kw)
    return BlobSpec(**args)


def lane_scene(frames, offset, extra=(), skip=()):
    """Two striped blobs per lane, six lanes covering every cell row."""
    blobs = []
    for li, y in enumerate(LANES):
        for p in range(2):
            blobs.append(striped(10 + p * 70 + li * 11, y, 0 if (li + p) % 2 == 0 else 180))
    blobs = [b for k, b in enumerate(blobs) if k not in skip]
    blobs.extend(extra)
    return ScenarioSpec(width=160, height=128, frames=frames, seed=5, time_offset=offset,
                        blobs=blobs, noise=1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import test_acceptance

    if test_acceptance.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in test_acceptance.RESULTS:
            terminalreporter.write_line(line)
