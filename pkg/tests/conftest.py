"""Shared fixtures. The expensive ones are session-scoped and lazy, so a
targeted `pytest tests/test_geometry.py` never pays for a render."""

import numpy as np
import pytest

from corrfield import dataio, evalsynth
from corrfield.field import COLOR_RGB, RadianceField, softplus_inverse


def make_random_field(resolution=(5, 4, 6), seed=0, color_model=COLOR_RGB,
                      bbox=((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0)),
                      sigma_scale=1.5):
    """Small field with positive densities and colors clear of 0/1 saturation."""
    rng = np.random.default_rng(seed)
    nx, ny, nz = resolution
    density = softplus_inverse(sigma_scale * rng.random((nx, ny, nz)) + 0.05)
    if color_model == COLOR_RGB:
        from corrfield.field import logit
        color = logit(0.1 + 0.8 * rng.random((nx, ny, nz, 3)))
    else:
        color = 0.5 * rng.standard_normal((nx, ny, nz, 3, 4))
    return RadianceField(resolution=resolution, bbox_min=np.array(bbox[0]),
                         bbox_max=np.array(bbox[1]), density_raw=density,
                         color_raw=color, color_model=color_model)


def render_scene_images(scene, k, threads=4):
    """PosedImage list for every view of an analytic scene (no sparse depth)."""
    images = []
    for view in range(len(scene.poses)):
        rgb, _, mask = evalsynth.render_view(scene, view, k=k, threads=threads)
        images.append(dataio.PosedImage(
            image_id=evalsynth.view_id(view), pixels=rgb,
            intrinsics=scene.intrinsics, pose=scene.poses[view], mask=mask,
            sparse_depth=[], near=scene.near, far=scene.far))
    return images


@pytest.fixture(scope="session")
def slab_scene():
    return evalsynth.make_slab_scene(n_views=12)


@pytest.fixture(scope="session")
def slab_images(slab_scene):
    """12 rendered slab views at the quality the descriptor tests need."""
    return render_scene_images(slab_scene, k=1024)


@pytest.fixture(scope="session")
def slab_baked(slab_scene):
    return evalsynth.bake(slab_scene, (96, 96, 96))


@pytest.fixture(scope="session")
def sheets_scene():
    return evalsynth.make_paired_sheets_scene(n_views=8)


@pytest.fixture(scope="session")
def sheets_images(sheets_scene):
    return render_scene_images(sheets_scene, k=2048)


@pytest.fixture(scope="session")
def sheets_baked(sheets_scene):
    return evalsynth.bake(sheets_scene, evalsynth.PAIRED_SHEETS_BAKE)
