#include "nuseg/io.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace nuseg {

namespace {

constexpr char kMagic[6] = {'N', 'U', 'S', 'E', 'G', '1'};
constexpr std::uint8_t kDtypeF32 = 0;
constexpr std::uint8_t kDtypeU8 = 1;

static_assert(std::endian::native == std::endian::little,
              "NUSEG1 IO assumes a little-endian host");

void write_u32(std::ostream& os, std::uint32_t v) {
  os.write(reinterpret_cast<const char*>(&v), 4);
}

std::uint32_t read_u32(std::istream& is) {
  std::uint32_t v = 0;
  is.read(reinterpret_cast<char*>(&v), 4);
  return v;
}

void write_header(std::ostream& os, std::uint8_t dtype, const GridShape& s) {
  os.write(kMagic, 6);
  os.write(reinterpret_cast<const char*>(&dtype), 1);
  write_u32(os, s.d);
  write_u32(os, s.h);
  write_u32(os, s.w);
}

struct Header {
  std::uint8_t dtype;
  GridShape shape;
};

Header read_header(std::istream& is, const std::filesystem::path& path) {
  char magic[6] = {};
  is.read(magic, 6);
  if (!is || std::memcmp(magic, kMagic, 6) != 0) {
    throw FormatError("not a NUSEG1 file: " + path.string());
  }
  std::uint8_t dtype = 0;
  is.read(reinterpret_cast<char*>(&dtype), 1);
  const std::uint32_t d = read_u32(is);
  const std::uint32_t h = read_u32(is);
  const std::uint32_t w = read_u32(is);
  if (!is) {
    throw FormatError("truncated NUSEG1 header: " + path.string());
  }
  if (dtype != kDtypeF32 && dtype != kDtypeU8) {
    throw FormatError("unsupported dtype code " + std::to_string(dtype) +
                      " in " + path.string());
  }
  if (d == 0 || h == 0 || w == 0) {
    throw FormatError("zero extent in NUSEG1 header: " + path.string());
  }
  return {dtype, GridShape(d, h, w)};
}

void write_sidecar(const std::filesystem::path& volume_path,
                   const VolumeMeta& meta) {
  nlohmann::json j;
  j["image_id"] = meta.image_id;
  j["annotator_id"] = meta.annotator_id;
  j["kind"] = meta.kind;
  std::ofstream os(sidecar_path(volume_path));
  if (!os) {
    throw FormatError("cannot write sidecar for " + volume_path.string());
  }
  os << j.dump(2) << "\n";
}

}  // namespace

std::filesystem::path sidecar_path(const std::filesystem::path& volume_path) {
  std::filesystem::path p = volume_path;
  p.replace_extension(".json");
  return p;
}

void save_volume(const std::filesystem::path& path, const VoxelGrid& g,
                 const VolumeMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  write_header(os, kDtypeF32, g.shape);
  std::vector<float> buf(g.values.size());
  for (std::size_t i = 0; i < buf.size(); ++i) {
    buf[i] = static_cast<float>(g.values[i]);
  }
  os.write(reinterpret_cast<const char*>(buf.data()),
           static_cast<std::streamsize>(buf.size() * sizeof(float)));
  if (!os) throw FormatError("write failed: " + path.string());
  write_sidecar(path, meta);
}

void save_volume(const std::filesystem::path& path, const BinaryMask& m,
                 const VolumeMeta& meta) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open for writing: " + path.string());
  write_header(os, kDtypeU8, m.shape);
  os.write(reinterpret_cast<const char*>(m.values.data()),
           static_cast<std::streamsize>(m.values.size()));
  if (!os) throw FormatError("write failed: " + path.string());
  write_sidecar(path, meta);
}

int peek_dtype(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  return read_header(is, path).dtype;
}

VoxelGrid load_volume(const std::filesystem::path& path, VolumeMeta* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  const Header hdr = read_header(is, path);
  if (hdr.dtype != kDtypeF32) {
    throw FormatError("expected f32 volume, found u8 mask: " + path.string());
  }
  const std::size_t n = hdr.shape.voxels();
  std::vector<float> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n * sizeof(float)));
  if (static_cast<std::size_t>(is.gcount()) != n * sizeof(float)) {
    throw FormatError("truncated payload in " + path.string());
  }
  VoxelGrid g(hdr.shape);
  for (std::size_t i = 0; i < n; ++i) {
    g.values[i] = static_cast<double>(buf[i]);
  }
  g.check_finite(path.string().c_str());
  if (meta) *meta = load_sidecar(path);
  return g;
}

BinaryMask load_mask(const std::filesystem::path& path, VolumeMeta* meta) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open: " + path.string());
  const Header hdr = read_header(is, path);
  if (hdr.dtype != kDtypeU8) {
    throw FormatError("expected u8 mask, found f32 volume: " + path.string());
  }
  const std::size_t n = hdr.shape.voxels();
  std::vector<std::uint8_t> buf(n);
  is.read(reinterpret_cast<char*>(buf.data()),
          static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(is.gcount()) != n) {
    throw FormatError("truncated payload in " + path.string());
  }
  for (std::uint8_t b : buf) {
    if (b > 1) {
      throw FormatError("mask payload contains non-binary byte in " +
                        path.string());
    }
  }
  if (meta) *meta = load_sidecar(path);
  return BinaryMask(hdr.shape, std::move(buf));
}

VolumeMeta load_sidecar(const std::filesystem::path& volume_path) {
  const auto p = sidecar_path(volume_path);
  std::ifstream is(p);
  if (!is) throw FormatError("missing sidecar: " + p.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("bad sidecar json " + p.string() + ": " + e.what());
  }
  VolumeMeta meta;
  meta.image_id = j.value("image_id", "");
  meta.annotator_id = j.value("annotator_id", "");
  meta.kind = j.value("kind", "");
  return meta;
}

}  // namespace nuseg
