"""Procedural synthetic stereo face generation."""

from .dataset import Dataset, GenConfig, gen_dataset, render_random, sample_light, sample_pose, stream
from .render import (Background, CameraRig, LightCondition, LightDir, Pose, StereoSample, project,
                     render_passport, render_stereo, to_camera, to_pixels)
from .surface import FaceSurface, IdentityParams, build_surface, sample_identity

__all__ = [
    "Background", "CameraRig", "Dataset", "FaceSurface", "GenConfig", "IdentityParams", "LightCondition",
    "LightDir", "Pose", "StereoSample", "build_surface", "gen_dataset", "project", "render_passport",
    "render_random", "render_stereo", "sample_identity", "sample_light", "sample_pose", "stream",
    "to_camera", "to_pixels",
]
