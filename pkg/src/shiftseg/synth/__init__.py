from .io import DatasetCorruptionError, read_dataset, read_manifest, read_pgm, write_dataset, write_pgm
from .rng import SplitMix64, stream_seed
from .scene import (
    InstanceAnnotation,
    Scene,
    SceneGenerationError,
    SceneSpec,
    generate_dataset,
    generate_scene,
    rasterize_instance,
)

__all__ = [
    "DatasetCorruptionError",
    "InstanceAnnotation",
    "Scene",
    "SceneGenerationError",
    "SceneSpec",
    "SplitMix64",
    "generate_dataset",
    "generate_scene",
    "rasterize_instance",
    "read_dataset",
    "read_manifest",
    "read_pgm",
    "stream_seed",
    "write_dataset",
    "write_pgm",
]
