#pragma once

#include <string>

#include "harmon/volume.hpp"

namespace harmon {

// Reads a single-frame 3D NIfTI-1 volume (little-endian, one .nii file,
// datatype uint8/int16/float32). scl_slope/scl_inter are applied on load
// (slope 0 means no scaling, per convention). The 348-byte header is kept
// verbatim on the returned volume.
Volume read_nifti(const std::string& path);

// Writes a float32 single-file NIfTI-1 volume, vox_offset 352 (348-byte
// header + empty extension flag). When the volume carries a header loaded
// from disk, orientation and free-form fields are written back verbatim;
// geometry, datatype, and scaling fields are owned by the writer.
void write_nifti(const Volume& v, const std::string& path);

}  // namespace harmon
