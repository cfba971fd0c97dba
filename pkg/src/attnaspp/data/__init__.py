from .nifti import NiftiError, NiftiVolume, parse_nifti, read_nifti, write_nifti
from .samples import (
    FormatError, ManifestEntry, SliceSample, dataset_split, decode_pgm, decode_tensor,
    encode_pgm, encode_tensor, iter_batches, load_samples, read_manifest, read_mask,
    read_tensor, write_manifest, write_mask, write_samples, write_tensor,
)
from .slices import extract_axial, normalize_slice
from .synth import PCG32, SynthConfig, gen_synthetic, make_sample
