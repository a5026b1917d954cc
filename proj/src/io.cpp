#include "picopose/io.hpp"

#include <algorithm>
#include <bit>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <sstream>

#include "picopose/error.hpp"
#include "picopose/synth.hpp"

namespace picopose {

static_assert(std::endian::native == std::endian::little, "little-endian host required");

void ByteWriter::u32(std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf_.insert(buf_.end(), b, b + 4);
}

void ByteWriter::f32(float v) {
  char b[4];
  std::memcpy(b, &v, 4);
  buf_.insert(buf_.end(), b, b + 4);
}

void ByteWriter::write_to(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out.write(buf_.data(), static_cast<std::streamsize>(buf_.size()));
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

ByteReader::ByteReader(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  buf_.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void ByteReader::need(std::uint64_t count, const char* what) const {
  if (remaining() < count) {
    throw Error(ErrorKind::kFormat, std::string("truncated data reading ") + what, pos_);
  }
}

void ByteReader::expect_magic(std::string_view magic) {
  need(magic.size(), "magic");
  if (std::memcmp(buf_.data() + pos_, magic.data(), magic.size()) != 0) {
    throw Error(ErrorKind::kFormat, "bad magic, expected " + std::string(magic.substr(0, 8)), pos_);
  }
  pos_ += magic.size();
}

std::uint8_t ByteReader::u8() {
  need(1, "u8");
  return static_cast<std::uint8_t>(buf_[pos_++]);
}

std::uint32_t ByteReader::u32() {
  need(4, "u32");
  std::uint32_t v;
  std::memcpy(&v, buf_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

float ByteReader::f32() {
  need(4, "f32");
  float v;
  std::memcpy(&v, buf_.data() + pos_, 4);
  pos_ += 4;
  return v;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorKind::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const std::filesystem::path& path, std::string_view text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorKind::kIo, "cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw Error(ErrorKind::kIo, "write failed: " + path.string());
}

nlohmann::json read_json(const std::filesystem::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::parse_error& e) {
    throw Error(ErrorKind::kFormat, path.string() + ": " + e.what(), e.byte);
  }
}

void reject_unknown_keys(const nlohmann::json& j, const nlohmann::json& reference, const std::string& where) {
  if (!j.is_object() || !reference.is_object()) return;
  for (const auto& [key, value] : j.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!reference.contains(key)) throw Error(ErrorKind::kInvalidParameter, "unknown config key '" + path + "'");
    reject_unknown_keys(value, reference[key], path);
  }
}

void write_json(const std::filesystem::path& path, const nlohmann::json& j) {
  write_text(path, j.dump(2) + "\n");
}

void save_mask_pgm(const Mask& m, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes("P5\n" + std::to_string(m.cols()) + " " + std::to_string(m.rows()) + "\n255\n");
  for (auto v : m.values()) w.u8(v ? 255 : 0);
  w.write_to(path);
}

Mask load_mask_pgm(const std::filesystem::path& path) {
  const std::string text = read_text(path);
  std::istringstream in(text);
  std::string magic;
  int cols = 0, rows = 0, maxval = 0;
  in >> magic >> cols >> rows >> maxval;
  if (magic != "P5" || !in || cols <= 0 || rows <= 0 || maxval != 255) {
    throw Error(ErrorKind::kFormat, "bad PGM header in " + path.string(), 0);
  }
  const auto offset = static_cast<std::uint64_t>(in.tellg()) + 1;
  if (text.size() < offset + static_cast<std::uint64_t>(rows) * cols) {
    throw Error(ErrorKind::kFormat, "truncated PGM " + path.string(), text.size());
  }
  Mask m(rows, cols);
  for (size_t i = 0; i < m.size(); ++i) m.values()[i] = static_cast<unsigned char>(text[offset + i]) > 127;
  return m;
}

namespace {

void check_dims(std::uint32_t rows, std::uint32_t cols, ByteReader& r, std::uint64_t per_cell) {
  if (rows == 0 || cols == 0 || rows > (1u << 16) || cols > (1u << 16)) {
    throw Error(ErrorKind::kFormat, "implausible grid size", r.offset());
  }
  r.need(static_cast<std::uint64_t>(rows) * cols * per_cell, "payload");
}

}  // namespace

void save_xyz(const Grid<Vec3f>& xyz, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(std::string_view("PICOXYZ\0", 8));
  w.u32(xyz.rows());
  w.u32(xyz.cols());
  for (const auto& p : xyz.values()) {
    w.f32(p.x());
    w.f32(p.y());
    w.f32(p.z());
  }
  w.write_to(path);
}

Grid<Vec3f> load_xyz(const std::filesystem::path& path) {
  ByteReader r(path);
  r.expect_magic(std::string_view("PICOXYZ\0", 8));
  const auto rows = r.u32(), cols = r.u32();
  check_dims(rows, cols, r, 12);
  Grid<Vec3f> g(rows, cols);
  for (auto& p : g.values()) {
    const float x = r.f32(), y = r.f32(), z = r.f32();
    p = Vec3f(x, y, z);
  }
  return g;
}

void save_flow(const PositionMap& p, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes("PICOFLOW");
  w.u32(p.rows());
  w.u32(p.cols());
  for (const auto& v : p.values()) {
    w.f32(static_cast<float>(v.x()));
    w.f32(static_cast<float>(v.y()));
  }
  w.write_to(path);
}

PositionMap load_flow(const std::filesystem::path& path) {
  ByteReader r(path);
  r.expect_magic("PICOFLOW");
  const auto rows = r.u32(), cols = r.u32();
  check_dims(rows, cols, r, 8);
  PositionMap p(rows, cols);
  for (auto& v : p.values()) {
    const float x = r.f32(), y = r.f32();
    v = Vec2(x, y);
  }
  return p;
}

void save_certainty(const CertaintyMap& c, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes("PICOCERT");
  w.u32(c.rows());
  w.u32(c.cols());
  for (double v : c.values()) w.f32(static_cast<float>(v));
  w.write_to(path);
}

CertaintyMap load_certainty(const std::filesystem::path& path) {
  ByteReader r(path);
  r.expect_magic("PICOCERT");
  const auto rows = r.u32(), cols = r.u32();
  check_dims(rows, cols, r, 4);
  CertaintyMap c(rows, cols);
  for (auto& v : c.values()) v = r.f32();
  return c;
}

Mesh load_obj(const std::filesystem::path& path) {
  std::istringstream in(read_text(path));
  std::vector<Vec3> v;
  std::vector<std::array<int, 3>> f;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag)) continue;
    if (tag == "v") {
      double x, y, z;
      if (!(ls >> x >> y >> z)) {
        throw Error(ErrorKind::kFormat, path.string() + ": bad vertex on line " + std::to_string(line_no));
      }
      v.emplace_back(x, y, z);
    } else if (tag == "f") {
      std::vector<int> idx;
      std::string tok;
      bool ok = true;
      while (ok && ls >> tok) {
        const std::string head = tok.substr(0, tok.find('/'));
        int i = 0;
        const auto [end, ec] = std::from_chars(head.data(), head.data() + head.size(), i);
        const int j = i > 0 ? i - 1 : static_cast<int>(v.size()) + i;
        ok = ec == std::errc() && end == head.data() + head.size() && i != 0 && j >= 0 &&
             j < static_cast<int>(v.size());
        idx.push_back(j);
      }
      if (!ok || idx.size() < 3) {
        throw Error(ErrorKind::kFormat, path.string() + ": bad face on line " + std::to_string(line_no));
      }
      for (size_t k = 1; k + 1 < idx.size(); ++k) f.push_back({idx[0], idx[k], idx[k + 1]});
    }
  }
  return make_mesh(std::move(v), std::move(f));
}

void save_obj(const Mesh& mesh, const std::filesystem::path& path) {
  std::ostringstream out;
  out.precision(17);
  for (const auto& p : mesh.vertices) out << "v " << p.x() << " " << p.y() << " " << p.z() << "\n";
  for (const auto& t : mesh.triangles) out << "f " << t[0] + 1 << " " << t[1] + 1 << " " << t[2] + 1 << "\n";
  write_text(path, out.str());
}

void RgbImage::set(int r, int c, std::uint8_t red, std::uint8_t green, std::uint8_t blue) {
  if (r < 0 || c < 0 || r >= rows || c >= cols) return;
  const size_t i = (static_cast<size_t>(r) * cols + c) * 3;
  rgb[i] = red;
  rgb[i + 1] = green;
  rgb[i + 2] = blue;
}

void save_ppm(const RgbImage& img, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes("P6\n" + std::to_string(img.cols) + " " + std::to_string(img.rows) + "\n255\n");
  for (auto b : img.rgb) w.u8(b);
  w.write_to(path);
}

namespace {

// Middlebury color wheel (RY, YG, GC, CB, BM, MR segments).
std::vector<std::array<double, 3>> color_wheel() {
  constexpr int kRY = 15, kYG = 6, kGC = 4, kCB = 11, kBM = 13, kMR = 6;
  std::vector<std::array<double, 3>> w;
  for (int i = 0; i < kRY; ++i) w.push_back({255, 255.0 * i / kRY, 0});
  for (int i = 0; i < kYG; ++i) w.push_back({255 - 255.0 * i / kYG, 255, 0});
  for (int i = 0; i < kGC; ++i) w.push_back({0, 255, 255.0 * i / kGC});
  for (int i = 0; i < kCB; ++i) w.push_back({0, 255 - 255.0 * i / kCB, 255});
  for (int i = 0; i < kBM; ++i) w.push_back({255.0 * i / kBM, 0, 255});
  for (int i = 0; i < kMR; ++i) w.push_back({255, 0, 255 - 255.0 * i / kMR});
  return w;
}

}  // namespace

RgbImage flow_to_color(const PositionMap& p, const Mask& mask) {
  RgbImage img{p.rows(), p.cols(), std::vector<std::uint8_t>(static_cast<size_t>(p.rows()) * p.cols() * 3, 0)};
  const auto wheel = color_wheel();
  const int ncols = static_cast<int>(wheel.size());
  double max_rad = 1e-9;
  for (int r = 0; r < p.rows(); ++r) {
    for (int c = 0; c < p.cols(); ++c) {
      if (mask.empty() || mask(r, c)) max_rad = std::max(max_rad, (p(r, c) - Vec2(c + 0.5, r + 0.5)).norm());
    }
  }
  for (int r = 0; r < p.rows(); ++r) {
    for (int c = 0; c < p.cols(); ++c) {
      if (!mask.empty() && !mask(r, c)) continue;
      const Vec2 f = (p(r, c) - Vec2(c + 0.5, r + 0.5)) / max_rad;
      const double rad = std::min(1.0, f.norm());
      const double a = std::atan2(-f.y(), -f.x()) / std::numbers::pi;
      const double fk = (a + 1.0) / 2.0 * (ncols - 1);
      const int k0 = static_cast<int>(std::floor(fk));
      const int k1 = (k0 + 1) % ncols;
      const double t = fk - k0;
      std::uint8_t out[3];
      for (int ch = 0; ch < 3; ++ch) {
        double col = ((1 - t) * wheel[k0][ch] + t * wheel[k1][ch]) / 255.0;
        col = 1 - rad * (1 - col);
        out[ch] = static_cast<std::uint8_t>(std::lround(255.0 * col));
      }
      img.set(r, c, out[0], out[1], out[2]);
    }
  }
  return img;
}

}  // namespace picopose
