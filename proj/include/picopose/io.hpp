#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "picopose/grid.hpp"

namespace picopose {

struct Mesh;

// Little-endian byte buffer builder.
class ByteWriter {
 public:
  void bytes(std::string_view s) { buf_.insert(buf_.end(), s.begin(), s.end()); }
  void u8(std::uint8_t v) { buf_.push_back(static_cast<char>(v)); }
  void u32(std::uint32_t v);
  void f32(float v);
  const std::vector<char>& data() const { return buf_; }
  void write_to(const std::filesystem::path& path) const;

 private:
  std::vector<char> buf_;
};

// Little-endian reader over a whole file; failures raise kFormat with the
// byte offset where reading stopped.
class ByteReader {
 public:
  explicit ByteReader(const std::filesystem::path& path);
  explicit ByteReader(std::vector<char> data) : buf_(std::move(data)) {}

  void expect_magic(std::string_view magic);
  std::uint8_t u8();
  std::uint32_t u32();
  float f32();
  void need(std::uint64_t count, const char* what) const;
  std::uint64_t offset() const { return pos_; }
  std::uint64_t remaining() const { return buf_.size() - pos_; }

 private:
  std::vector<char> buf_;
  std::uint64_t pos_ = 0;
};

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);
nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
// Throws kInvalidParameter for any object key of `j` absent from `reference`,
// recursing into objects present in both.
void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where);

// Binary PGM (P5), 255 where set.
void save_mask_pgm(const Mask& m, const std::filesystem::path& path);
Mask load_mask_pgm(const std::filesystem::path& path);

// PICOXYZ: "PICOXYZ\0", u32 rows, u32 cols, f32 xyz triples row-major.
void save_xyz(const Grid<Vec3f>& xyz, const std::filesystem::path& path);
Grid<Vec3f> load_xyz(const std::filesystem::path& path);

// PICOFLOW: "PICOFLOW", u32 rows, u32 cols, f32 (u, v) pairs row-major.
void save_flow(const PositionMap& p, const std::filesystem::path& path);
PositionMap load_flow(const std::filesystem::path& path);

// PICOCERT: "PICOCERT", u32 rows, u32 cols, f32 values row-major.
void save_certainty(const CertaintyMap& c, const std::filesystem::path& path);
CertaintyMap load_certainty(const std::filesystem::path& path);

// ASCII OBJ, v and f records only (1-based indices; f may carry /vt/vn).
Mesh load_obj(const std::filesystem::path& path);
void save_obj(const Mesh& mesh, const std::filesystem::path& path);

struct RgbImage {
  int rows = 0;
  int cols = 0;
  std::vector<std::uint8_t> rgb;  // rows * cols * 3
  void set(int r, int c, std::uint8_t red, std::uint8_t green, std::uint8_t blue);
};

void save_ppm(const RgbImage& img, const std::filesystem::path& path);

// Middlebury color-wheel encoding of P minus the identity grid, normalized
// by the largest displacement on the mask.
RgbImage flow_to_color(const PositionMap& p, const Mask& mask);

}  // namespace picopose
