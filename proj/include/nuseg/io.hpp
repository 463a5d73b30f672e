#pragma once

#include <filesystem>
#include <string>

#include "nuseg/grid.hpp"

namespace nuseg {

/// JSON sidecar contents stored next to every NUSEG1 volume file.
struct VolumeMeta {
  std::string image_id;
  std::string annotator_id;  // empty for non-annotation volumes
  std::string kind;          // "intensity" | "annotation" | "rpmap" | "prediction"
};

// NUSEG1 binary volume format:
//   6-byte magic "NUSEG1"
//   u8 dtype code: 0 = f32, 1 = u8 mask
//   three little-endian u32 extents (D, H, W)
//   raw little-endian voxel payload, row-major
// The sidecar (same basename, .json) carries {image_id, annotator_id, kind}.

void save_volume(const std::filesystem::path& path, const VoxelGrid& g,
                 const VolumeMeta& meta);
void save_volume(const std::filesystem::path& path, const BinaryMask& m,
                 const VolumeMeta& meta);

/// dtype of the file at `path` (0 = f32, 1 = u8) without loading the payload.
int peek_dtype(const std::filesystem::path& path);

/// Load an f32 volume. Throws FormatError on bad magic, truncation,
/// or a u8 payload.
VoxelGrid load_volume(const std::filesystem::path& path, VolumeMeta* meta = nullptr);

/// Load a u8 mask volume.
BinaryMask load_mask(const std::filesystem::path& path, VolumeMeta* meta = nullptr);

VolumeMeta load_sidecar(const std::filesystem::path& volume_path);

/// `path` is the volume file; the sidecar lands at the same basename + ".json".
std::filesystem::path sidecar_path(const std::filesystem::path& volume_path);

}  // namespace nuseg
