from .io import FormatError, decode_volume, encode_volume, load_dataset, read_volume, save_dataset, write_volume
from .rotate import AXES, STANDARD_ANGLES, NonStandardAngleWarning, rotate_array, rotate_volume, rotation_matrix
from .synth import Dataset, SegSample, centered_blob_3d, gen_blobs_3d, gen_shapes_2d, sphere_mask
from .transforms import TransformKind, UnsupportedTransform, apply_transform, standard_transforms

__all__ = [
    "AXES", "Dataset", "FormatError", "NonStandardAngleWarning", "STANDARD_ANGLES", "SegSample",
    "TransformKind", "UnsupportedTransform", "apply_transform", "centered_blob_3d", "decode_volume",
    "encode_volume", "gen_blobs_3d", "gen_shapes_2d", "load_dataset", "read_volume", "rotate_array",
    "rotate_volume", "rotation_matrix", "save_dataset", "sphere_mask", "standard_transforms",
    "write_volume",
]
