#include "pdr/imageio.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace pdr::io {

namespace {

static_assert(std::endian::native == std::endian::little,
              "binary formats assume a little-endian host");

std::ifstream open_in(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("cannot open '" + path + "' for reading");
  return in;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ImageError("cannot open '" + path + "' for writing");
  return out;
}

// Next whitespace-delimited PNM header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
  std::string tok;
  int c;
  while ((c = in.get()) != EOF) {
    if (c == '#') {
      while ((c = in.get()) != EOF && c != '\n') {
      }
      continue;
    }
    if (std::isspace(c)) {
      if (!tok.empty()) break;
      continue;
    }
    tok.push_back(static_cast<char>(c));
  }
  return tok;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const std::string& path) {
  T v{};
  if (!in.read(reinterpret_cast<char*>(&v), sizeof(T))) {
    throw ImageError("'" + path + "': truncated file");
  }
  return v;
}

void expect_magic(std::istream& in, const char* magic, const std::string& path) {
  char buf[4];
  if (!in.read(buf, 4) || std::memcmp(buf, magic, 4) != 0) {
    throw ImageError("'" + path + "': bad magic, expected " + std::string(magic, 4));
  }
}

}  // namespace

Image read_pgm(const std::string& path) {
  std::ifstream in = open_in(path);
  const std::string magic = pnm_token(in);
  if (magic != "P5" && magic != "P2") throw ImageError("'" + path + "': not a PGM file");
  const int w = std::stoi(pnm_token(in));
  const int h = std::stoi(pnm_token(in));
  const int maxval = std::stoi(pnm_token(in));
  if (w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    throw ImageError("'" + path + "': unsupported PGM header");
  }
  Image img(w, h);
  if (magic == "P5") {
    std::vector<unsigned char> raw(img.size());
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()))) {
      throw ImageError("'" + path + "': truncated pixel data");
    }
    for (std::size_t i = 0; i < raw.size(); ++i) img.data()[i] = raw[i];
  } else {
    for (auto& v : img.data()) {
      const std::string tok = pnm_token(in);
      if (tok.empty()) throw ImageError("'" + path + "': truncated pixel data");
      v = std::stoi(tok);
    }
  }
  if (maxval != 255) {
    for (auto& v : img.data()) v = v * 255.0 / maxval;
  }
  return img;
}

void write_pgm(const std::string& path, const Image& img) {
  std::ofstream out = open_out(path);
  out << "P5\n" << img.width() << " " << img.height() << "\n255\n";
  std::vector<unsigned char> raw(img.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const double v = img.data()[i];
    raw[i] = static_cast<unsigned char>(std::isfinite(v) ? std::clamp(std::lround(v), 0L, 255L) : 0);
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

Mask read_mask_pgm(const std::string& path) {
  const Image img = read_pgm(path);
  Mask m(img.width(), img.height());
  for (std::size_t i = 0; i < m.size(); ++i) m.data()[i] = img.data()[i] > 0.0 ? 1 : 0;
  return m;
}

void write_mask_pgm(const std::string& path, const Mask& mask) {
  Image img(mask.width(), mask.height());
  for (std::size_t i = 0; i < img.size(); ++i) img.data()[i] = mask.data()[i] ? 255.0 : 0.0;
  write_pgm(path, img);
}

DisplacementField read_field(const std::string& path) {
  std::ifstream in = open_in(path);
  expect_magic(in, "DFLD", path);
  const auto w = get<std::uint32_t>(in, path);
  const auto h = get<std::uint32_t>(in, path);
  const auto scale = get<float>(in, path);
  DisplacementField f(static_cast<int>(w), static_cast<int>(h), scale);
  for (std::size_t i = 0; i < f.dx.size(); ++i) {
    f.dx.data()[i] = get<float>(in, path);
    f.dy.data()[i] = get<float>(in, path);
  }
  return f;
}

void write_field(const std::string& path, const DisplacementField& field) {
  std::ofstream out = open_out(path);
  out.write("DFLD", 4);
  put(out, static_cast<std::uint32_t>(field.width()));
  put(out, static_cast<std::uint32_t>(field.height()));
  put(out, static_cast<float>(field.scale));
  for (std::size_t i = 0; i < field.dx.size(); ++i) {
    put(out, static_cast<float>(field.dx.data()[i]));
    put(out, static_cast<float>(field.dy.data()[i]));
  }
}

ScalarMap read_phase(const std::string& path) {
  std::ifstream in = open_in(path);
  expect_magic(in, "PHAS", path);
  const auto w = get<std::uint32_t>(in, path);
  const auto h = get<std::uint32_t>(in, path);
  ScalarMap m{Grid<double>(static_cast<int>(w), static_cast<int>(h)), get<float>(in, path)};
  for (auto& v : m.values.data()) v = get<float>(in, path);
  return m;
}

void write_phase(const std::string& path, const Grid<double>& phase, double scale) {
  std::ofstream out = open_out(path);
  out.write("PHAS", 4);
  put(out, static_cast<std::uint32_t>(phase.width()));
  put(out, static_cast<std::uint32_t>(phase.height()));
  put(out, static_cast<float>(scale));
  for (double v : phase.data()) put(out, static_cast<float>(v));
}

}  // namespace pdr::io
