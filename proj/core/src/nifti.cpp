#include "harmon/nifti.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <vector>

#include "harmon/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "NIfTI I/O assumes a little-endian host");

namespace harmon {

namespace {

#pragma pack(push, 1)
struct NiftiHeader {
  int32_t sizeof_hdr;
  char data_type[10];
  char db_name[18];
  int32_t extents;
  int16_t session_error;
  char regular;
  char dim_info;
  int16_t dim[8];
  float intent_p1, intent_p2, intent_p3;
  int16_t intent_code;
  int16_t datatype;
  int16_t bitpix;
  int16_t slice_start;
  float pixdim[8];
  float vox_offset;
  float scl_slope;
  float scl_inter;
  int16_t slice_end;
  char slice_code;
  char xyzt_units;
  float cal_max;
  float cal_min;
  float slice_duration;
  float toffset;
  int32_t glmax;
  int32_t glmin;
  char descrip[80];
  char aux_file[24];
  int16_t qform_code;
  int16_t sform_code;
  float quatern_b, quatern_c, quatern_d;
  float qoffset_x, qoffset_y, qoffset_z;
  float srow_x[4];
  float srow_y[4];
  float srow_z[4];
  char intent_name[16];
  char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(NiftiHeader) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2;
constexpr int16_t kDtInt16 = 4;
constexpr int16_t kDtFloat32 = 16;

}  // namespace

Volume read_nifti(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);

  NiftiHeader hdr{};
  in.read(reinterpret_cast<char*>(&hdr), sizeof(hdr));
  if (in.gcount() != static_cast<std::streamsize>(sizeof(hdr))) {
    throw FormatError(path + ": truncated header (need 348 bytes)");
  }
  bool magic_ok = std::memcmp(hdr.magic, "n+1", 4) == 0;
  bool magic_pair = std::memcmp(hdr.magic, "ni1", 4) == 0;
  if (!magic_ok && !magic_pair) {
    throw FormatError(path + ": not NIfTI-1 (bad magic)");
  }
  if (hdr.sizeof_hdr != 348) {
    int32_t swapped = static_cast<int32_t>(__builtin_bswap32(
        static_cast<uint32_t>(hdr.sizeof_hdr)));
    if (swapped == 348) {
      throw FormatError(path + ": big-endian NIfTI-1 is not supported");
    }
    throw FormatError(path + ": not NIfTI-1 (sizeof_hdr != 348)");
  }
  if (magic_pair) {
    throw FormatError(path + ": two-file NIfTI (hdr/img) is not supported");
  }
  if (hdr.dim[0] < 3 || hdr.dim[0] > 7) {
    throw FormatError(path + ": expected a 3D volume, dim[0]=" +
                      std::to_string(hdr.dim[0]));
  }
  for (int i = 4; i <= hdr.dim[0]; ++i) {
    if (hdr.dim[i] > 1) {
      throw FormatError(path + ": not a single 3D frame (dim[" +
                        std::to_string(i) + "]=" + std::to_string(hdr.dim[i]) +
                        ")");
    }
  }
  int64_t nx = hdr.dim[1], ny = hdr.dim[2], nz = hdr.dim[3];
  if (nx <= 0 || ny <= 0 || nz <= 0) {
    throw FormatError(path + ": non-positive spatial extent");
  }
  size_t elem_size = 0;
  switch (hdr.datatype) {
    case kDtUint8: elem_size = 1; break;
    case kDtInt16: elem_size = 2; break;
    case kDtFloat32: elem_size = 4; break;
    default:
      throw FormatError(path + ": unsupported datatype " +
                        std::to_string(hdr.datatype) +
                        " (need uint8, int16, or float32)");
  }

  auto offset = static_cast<int64_t>(hdr.vox_offset);
  if (offset < static_cast<int64_t>(sizeof(hdr))) {
    throw FormatError(path + ": vox_offset " + std::to_string(offset) +
                      " overlaps the header");
  }
  in.seekg(offset, std::ios::beg);
  int64_t n = nx * ny * nz;
  std::vector<uint8_t> raw(static_cast<size_t>(n) * elem_size);
  in.read(reinterpret_cast<char*>(raw.data()),
          static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) {
    throw FormatError(path + ": truncated payload (expected " +
                      std::to_string(raw.size()) + " bytes)");
  }

  float slope = hdr.scl_slope;
  float inter = hdr.scl_inter;
  bool scale = slope != 0.0f && std::isfinite(slope) && std::isfinite(inter);

  Volume v;
  v.depth = nz;
  v.height = ny;
  v.width = nx;
  for (int i = 0; i < 3; ++i) {
    float p = hdr.pixdim[i + 1];
    v.spacing[static_cast<size_t>(i)] = (p > 0.0f && std::isfinite(p)) ? p : 1.0f;
  }
  v.voxels.resize(static_cast<size_t>(n));
  // File order is x-fastest, which matches row-major [D][H][W] directly.
  for (int64_t i = 0; i < n; ++i) {
    float x = 0.0f;
    switch (hdr.datatype) {
      case kDtUint8:
        x = static_cast<float>(raw[static_cast<size_t>(i)]);
        break;
      case kDtInt16: {
        int16_t s;
        std::memcpy(&s, raw.data() + i * 2, 2);
        x = static_cast<float>(s);
        break;
      }
      default: {
        std::memcpy(&x, raw.data() + i * 4, 4);
        break;
      }
    }
    if (scale) x = slope * x + inter;
    if (!std::isfinite(x)) {
      throw NumericError(path + ": non-finite voxel value in payload");
    }
    v.voxels[static_cast<size_t>(i)] = x;
  }
  v.raw_header.assign(reinterpret_cast<uint8_t*>(&hdr),
                      reinterpret_cast<uint8_t*>(&hdr) + sizeof(hdr));
  v.update_range();
  return v;
}

void write_nifti(const Volume& v, const std::string& path) {
  if (v.numel() <= 0 ||
      v.voxels.size() != static_cast<size_t>(v.numel())) {
    throw ShapeError("write_nifti: malformed volume");
  }
  for (float x : v.voxels) {
    if (!std::isfinite(x)) {
      throw NumericError("write_nifti: non-finite voxel value");
    }
  }

  NiftiHeader hdr{};
  if (v.raw_header.size() == sizeof(hdr)) {
    std::memcpy(&hdr, v.raw_header.data(), sizeof(hdr));
  } else {
    hdr.regular = 'r';
    hdr.pixdim[0] = 1.0f;
    hdr.xyzt_units = 2;  // millimetres
  }
  if (v.width > 32767 || v.height > 32767 || v.depth > 32767) {
    throw ShapeError("write_nifti: extent exceeds NIfTI-1 int16 dim field");
  }
  hdr.sizeof_hdr = 348;
  for (int i = 0; i < 8; ++i) hdr.dim[i] = 1;
  hdr.dim[0] = 3;
  hdr.dim[1] = static_cast<int16_t>(v.width);
  hdr.dim[2] = static_cast<int16_t>(v.height);
  hdr.dim[3] = static_cast<int16_t>(v.depth);
  hdr.datatype = kDtFloat32;
  hdr.bitpix = 32;
  hdr.pixdim[1] = v.spacing[0];
  hdr.pixdim[2] = v.spacing[1];
  hdr.pixdim[3] = v.spacing[2];
  hdr.vox_offset = 352.0f;
  hdr.scl_slope = 1.0f;
  hdr.scl_inter = 0.0f;
  hdr.cal_min = v.intensity_range.first;
  hdr.cal_max = v.intensity_range.second;
  std::memcpy(hdr.magic, "n+1", 4);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(&hdr), sizeof(hdr));
  const char pad[4] = {0, 0, 0, 0};  // no header extensions
  out.write(pad, 4);
  out.write(reinterpret_cast<const char*>(v.voxels.data()),
            static_cast<std::streamsize>(v.voxels.size() * sizeof(float)));
  if (!out) throw IoError("short write to " + path);
}

}  // namespace harmon
