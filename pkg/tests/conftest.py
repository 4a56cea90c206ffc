import numpy as np
import pytest

from featsplat.scene import CameraView, FeatureDecoder, Scene, axis_angle_quat, logit, num_sh_coeffs


def make_scene(num, feature_dim=4, seed=0, sh_degree=1, radius=0.5, scale=(0.08, 0.25), opacity=(0.3, 0.9)):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-radius, radius, size=(num, 3))
    log_scales = np.log(rng.uniform(*scale, size=(num, 3)))
    quats = rng.normal(size=(num, 4))
    op = logit(rng.uniform(*opacity, size=num))
    sh = rng.normal(0, 0.3, size=(num, num_sh_coeffs(sh_degree), 3))
    feats = rng.normal(size=(num, feature_dim))
    return Scene(means, log_scales, quats, op, sh, feats, FeatureDecoder.identity(feature_dim), sh_degree)


def front_camera(width=32, height=32, distance=2.5, fov=50.0):
    return CameraView.look_at((0.0, 0.0, -distance), (0.0, 0.0, 0.0), width, height, fov_deg=fov)


def single_splat(mean=(0.0, 0.0, 0.0), scale=0.2, opacity=0.5, feature=(1.0, 2.0), color_dc=None):
    sh = np.zeros((1, 1, 3))
    if color_dc is not None:
        sh[0, 0] = color_dc
    D = len(feature)
    return Scene(np.array([mean], dtype=float), np.log(np.full((1, 3), scale)), np.array([[1.0, 0, 0, 0]]),
                 np.array([logit(opacity)]), sh, np.array([feature], dtype=float), FeatureDecoder.identity(D), 0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


__all__ = ["make_scene", "front_camera", "single_splat", "axis_angle_quat"]


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
