"""Shared builders for tests."""
import numpy as np

from ctseverity.lesions import RegionParams
from ctseverity.phantom import LesionSpec, PhantomSpec, default_lungs, generate_phantom, random_phantom_spec
from ctseverity.volgrid import RegionLabels, Spacing, VoxelVolume


def lungs_case(dims=(32, 32, 32), spacing=(4.0, 4.0, 4.0), lesions=(), seed=0, params=RegionParams(), **kw):
    sp = Spacing.of(spacing)
    spec = PhantomSpec(dims, sp, default_lungs(dims, sp), tuple(lesions), **kw)
    return generate_phantom(spec, seed, params)


def ball(center_idx, radius_mm, texture="ggo", spacing=(4.0, 4.0, 4.0), **kw):
    return LesionSpec(tuple(float(i * s) for i, s in zip(center_idx, spacing)), radius_mm, texture, **kw)


def random_case(seed, cohort=None, dims=(32, 32, 32), spacing=(4.0, 4.0, 4.0), params=RegionParams()):
    rng = np.random.default_rng(seed)
    cohort = cohort or ("covid", "pneumonia", "ild", "healthy")[seed % 4]
    spec = random_phantom_spec(rng, cohort, dims, spacing)
    return generate_phantom(spec, seed, params)


def random_mask_case(seed, dims=(20, 20, 20)):
    """Lungs with an unstructured random disease mask and random HU."""
    ct, lobes, *_ = lungs_case(dims, (5.0, 5.0, 5.0))
    r = np.random.default_rng(seed)
    disease = (r.random(dims) < r.uniform(0.02, 0.3)).astype(np.uint8)
    hu = r.integers(-1000, 200, size=dims).astype(np.int16)
    return VoxelVolume(hu, ct.spacing), lobes, RegionLabels(disease, ct.spacing)
