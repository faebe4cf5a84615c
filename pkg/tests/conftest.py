import numpy as np
import pytest

from photonfield import synth
from photonfield.photon_map import PhotonMap
from photonfield.photons import LightSource, TraceConfig, trace_photons
from photonfield.render import Scene
from photonfield.scenes import occupancy_tf, slab_scene
from photonfield.volume import TransferFunction


@pytest.fixture(scope="session")
def small_slab():
    return slab_scene(dims=16, density_scale=10.0, albedo=0.9, intensity=10.0)


@pytest.fixture(scope="session")
def small_photons(small_slab):
    return trace_photons(small_slab.medium, small_slab.lights, TraceConfig(30_000, seed=5))


@pytest.fixture(scope="session")
def small_map(small_photons):
    return PhotonMap(small_photons)


@pytest.fixture
def empty_scene():
    grid = synth.constant((8, 8, 8), 1.0)
    tf = TransferFunction.constant((0.7, 0.5, 0.3, 0.0))
    return Scene(grid, tf, (LightSource((0.5, 0.5, 2.0), (5.0, 5.0, 5.0)),), 10.0, (0.2, 0.3, 0.4))


def homogeneous_scene(density_scale=2.0, albedo=0.8, light=(0.5, 0.5, 1.5), intensity=4.0):
    grid = synth.constant((4, 4, 4), 1.0)
    return Scene(grid, occupancy_tf(albedo), (LightSource(light, (intensity,) * 3),), density_scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
