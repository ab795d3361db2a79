#include "uconv/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "uconv/error.hpp"

namespace uconv::io {

namespace {

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

std::ifstream open_in(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open " + path + " for reading");
  return is;
}

std::ofstream open_out(const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  return os;
}

}  // namespace

void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw IoError("write failed");
}

void read_bytes(std::istream& is, void* p, size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(is.gcount()) != n) {
    throw IoError("unexpected end of file");
  }
}

void write_u16(std::ostream& os, uint16_t v) {
  const unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>(v >> 8)};
  write_bytes(os, b, 2);
}

void write_u32(std::ostream& os, uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                              static_cast<unsigned char>((v >> 8) & 0xff),
                              static_cast<unsigned char>((v >> 16) & 0xff),
                              static_cast<unsigned char>(v >> 24)};
  write_bytes(os, b, 4);
}

void write_f32(std::ostream& os, float v) {
  write_u32(os, std::bit_cast<uint32_t>(v));
}

void write_f64(std::ostream& os, double v) {
  const uint64_t u = std::bit_cast<uint64_t>(v);
  write_u32(os, static_cast<uint32_t>(u & 0xffffffffu));
  write_u32(os, static_cast<uint32_t>(u >> 32));
}

uint16_t read_u16(std::istream& is) {
  unsigned char b[2];
  read_bytes(is, b, 2);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  read_bytes(is, b, 4);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

float read_f32(std::istream& is) {
  return std::bit_cast<float>(read_u32(is));
}

double read_f64(std::istream& is) {
  const uint32_t lo = read_u32(is);
  const uint32_t hi = read_u32(is);
  return std::bit_cast<double>(static_cast<uint64_t>(lo) |
                               (static_cast<uint64_t>(hi) << 32));
}

// ---------------------------------------------------------------------------
// WAV
// ---------------------------------------------------------------------------

namespace {

uint32_t u32_at(const std::string& d, size_t off) {
  if (off + 4 > d.size()) throw IoError("truncated wav file");
  const auto* b = reinterpret_cast<const unsigned char*>(d.data() + off);
  return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
         (static_cast<uint32_t>(b[2]) << 16) |
         (static_cast<uint32_t>(b[3]) << 24);
}

uint16_t u16_at(const std::string& d, size_t off) {
  if (off + 2 > d.size()) throw IoError("truncated wav file");
  const auto* b = reinterpret_cast<const unsigned char*>(d.data() + off);
  return static_cast<uint16_t>(b[0] | (b[1] << 8));
}

}  // namespace

std::vector<double> read_wav_mono16k(const std::string& path) {
  std::ifstream is = open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  const std::string d = ss.str();

  if (d.size() < 12 || d.compare(0, 4, "RIFF") != 0 ||
      d.compare(8, 4, "WAVE") != 0) {
    throw ParseError(path + ": not a RIFF/WAVE file");
  }
  bool have_fmt = false;
  size_t data_off = 0, data_len = 0;
  bool have_data = false;
  size_t off = 12;
  while (off + 8 <= d.size()) {
    const std::string id = d.substr(off, 4);
    const uint32_t sz = u32_at(d, off + 4);
    const size_t body = off + 8;
    if (body + sz > d.size()) throw IoError(path + ": truncated wav chunk");
    if (id == "fmt ") {
      if (sz < 16) throw ParseError(path + ": fmt chunk too small");
      const uint16_t format = u16_at(d, body);
      const uint16_t channels = u16_at(d, body + 2);
      const uint32_t rate = u32_at(d, body + 4);
      const uint16_t bits = u16_at(d, body + 14);
      if (format != 1) {
        throw ParseError(path + ": only PCM wav supported, format tag " +
                         std::to_string(format));
      }
      if (channels != 1) {
        throw ParseError(path + ": only mono wav supported, got " +
                         std::to_string(channels) + " channels");
      }
      if (rate != 16000) {
        throw ParseError(path + ": expected 16000 Hz, got " +
                         std::to_string(rate));
      }
      if (bits != 16) {
        throw ParseError(path + ": expected 16-bit samples, got " +
                         std::to_string(bits));
      }
      have_fmt = true;
    } else if (id == "data") {
      data_off = body;
      data_len = sz;
      have_data = true;
    }
    off = body + sz + (sz & 1);
  }
  if (!have_fmt) throw ParseError(path + ": missing fmt chunk");
  if (!have_data) throw ParseError(path + ": missing data chunk");
  if (data_len % 2 != 0) throw ParseError(path + ": odd data chunk size");

  const size_t n = data_len / 2;
  std::vector<double> out(n);
  const auto* b = reinterpret_cast<const unsigned char*>(d.data() + data_off);
  for (size_t i = 0; i < n; ++i) {
    const auto v =
        static_cast<int16_t>(static_cast<uint16_t>(b[2 * i]) |
                             (static_cast<uint16_t>(b[2 * i + 1]) << 8));
    out[i] = static_cast<double>(v) / 32768.0;
  }
  return out;
}

void write_wav_pcm16(const std::string& path,
                     const std::vector<double>& samples,
                     int64_t sample_rate) {
  std::ofstream os = open_out(path);
  const auto n = static_cast<uint32_t>(samples.size());
  const uint32_t data_bytes = n * 2;
  write_bytes(os, "RIFF", 4);
  write_u32(os, 36 + data_bytes);
  write_bytes(os, "WAVE", 4);
  write_bytes(os, "fmt ", 4);
  write_u32(os, 16);
  write_u16(os, 1);  // PCM
  write_u16(os, 1);  // mono
  write_u32(os, static_cast<uint32_t>(sample_rate));
  write_u32(os, static_cast<uint32_t>(sample_rate * 2));
  write_u16(os, 2);
  write_u16(os, 16);
  write_bytes(os, "data", 4);
  write_u32(os, data_bytes);
  for (const double s : samples) {
    const auto q = static_cast<int64_t>(std::lrint(s * 32768.0));
    const auto v = static_cast<int16_t>(std::clamp<int64_t>(q, -32768, 32767));
    write_u16(os, static_cast<uint16_t>(v));
  }
}

// ---------------------------------------------------------------------------
// FEAT
// ---------------------------------------------------------------------------

Tensor<double> read_feat(const std::string& path) {
  std::ifstream is = open_in(path);
  char magic[4];
  read_bytes(is, magic, 4);
  if (std::string(magic, 4) != "FEAT") {
    throw ParseError(path + ": bad feature file magic");
  }
  const uint32_t t = read_u32(is);
  const uint32_t dim = read_u32(is);
  if (t < 1) throw ParseError(path + ": empty feature matrix");
  if (dim != 80) {
    throw ParseError(path + ": expected 80 feature dims, got " +
                     std::to_string(dim));
  }
  Tensor<double> out(Shape{static_cast<int64_t>(t), static_cast<int64_t>(dim)});
  for (int64_t i = 0; i < out.numel(); ++i) {
    out[i] = static_cast<double>(read_f32(is));
  }
  return out;
}

void write_feat(const std::string& path, const Tensor<double>& feats) {
  if (feats.rank() != 2) {
    throw ShapeError("write_feat: want rank 2, got " +
                     shape_str(feats.shape()));
  }
  std::ofstream os = open_out(path);
  write_bytes(os, "FEAT", 4);
  write_u32(os, static_cast<uint32_t>(feats.dim(0)));
  write_u32(os, static_cast<uint32_t>(feats.dim(1)));
  for (int64_t i = 0; i < feats.numel(); ++i) {
    write_f32(os, static_cast<float>(feats[i]));
  }
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

const std::string& Vocab::unit(int64_t id) const {
  if (id < 1 || id >= size()) {
    throw StateError("label id " + std::to_string(id) +
                     " outside vocabulary of size " + std::to_string(size()));
  }
  return units[static_cast<size_t>(id - 1)];
}

std::vector<int64_t> Vocab::encode(const std::string& text) const {
  std::unordered_map<std::string, int64_t> by_unit;
  size_t max_len = 0;
  for (size_t i = 0; i < units.size(); ++i) {
    by_unit.emplace(units[i], static_cast<int64_t>(i) + 1);
    max_len = std::max(max_len, units[i].size());
  }
  std::vector<int64_t> out;
  size_t pos = 0;
  while (pos < text.size()) {
    int64_t hit = 0;
    for (size_t len = std::min(max_len, text.size() - pos); len >= 1; --len) {
      const auto it = by_unit.find(text.substr(pos, len));
      if (it != by_unit.end()) {
        hit = it->second;
        pos += len;
        break;
      }
    }
    if (hit == 0) {
      throw ParseError("cannot encode transcript at position " +
                       std::to_string(pos) + ": \"" + text.substr(pos, 8) +
                       "\"");
    }
    out.push_back(hit);
  }
  return out;
}

std::string Vocab::join(const std::vector<int64_t>& ids) const {
  std::string out;
  for (const int64_t id : ids) out += unit(id);
  return out;
}

Vocab read_vocab(const std::string& path) {
  std::ifstream is = open_in(path);
  Vocab v;
  std::string line;
  int64_t lineno = 0;
  std::unordered_map<std::string, int64_t> seen;
  while (std::getline(is, line)) {
    ++lineno;
    if (lineno == 1 && line.size() >= 3 && line.compare(0, 3, "\xef\xbb\xbf") == 0) {
      line.erase(0, 3);
    }
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": empty vocabulary entry");
    }
    if (!seen.emplace(line, lineno).second) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": duplicate vocabulary entry \"" + line + "\"");
    }
    v.units.push_back(line);
  }
  if (v.units.empty()) throw ParseError(path + ": empty vocabulary");
  return v;
}

void write_vocab(const std::string& path, const Vocab& vocab) {
  std::ofstream os = open_out(path);
  for (const auto& u : vocab.units) os << u << "\n";
  if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// Manifest and text
// ---------------------------------------------------------------------------

std::vector<std::pair<std::string, std::string>> read_manifest(
    const std::string& path) {
  std::ifstream is = open_in(path);
  const std::filesystem::path base = std::filesystem::path(path).parent_path();
  auto resolve = [&base](const std::string& p) {
    const std::filesystem::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };
  std::vector<std::pair<std::string, std::string>> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (trim(line).empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos || tab == 0 || tab + 1 >= line.size()) {
      throw ParseError(path + ":" + std::to_string(lineno) +
                       ": want \"features<TAB>transcript\"");
    }
    out.emplace_back(resolve(line.substr(0, tab)),
                     resolve(line.substr(tab + 1)));
  }
  if (out.empty()) throw ParseError(path + ": empty manifest");
  return out;
}

std::string read_text(const std::string& path) {
  std::ifstream is = open_in(path);
  std::stringstream ss;
  ss << is.rdbuf();
  std::string s = ss.str();
  const auto b = s.find_last_not_of(" \t\r\n");
  s.erase(b == std::string::npos ? 0 : b + 1);
  return s;
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream os = open_out(path);
  os << text;
  if (!os) throw IoError("write failed: " + path);
}

// ---------------------------------------------------------------------------
// key=value configuration
// ---------------------------------------------------------------------------

std::map<std::string, std::string> parse_kv(const std::string& text) {
  std::map<std::string, std::string> kv;
  std::istringstream is(text);
  std::string line;
  int64_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("line " + std::to_string(lineno) +
                        ": want key=value, got \"" + t + "\"");
    }
    const std::string key = trim(t.substr(0, eq));
    const std::string val = trim(t.substr(eq + 1));
    if (key.empty()) {
      throw ConfigError("line " + std::to_string(lineno) + ": empty key");
    }
    if (!kv.emplace(key, val).second) {
      throw ConfigError("duplicate key \"" + key + "\"");
    }
  }
  return kv;
}

std::string kv_to_string(const std::map<std::string, std::string>& kv) {
  std::string out;
  for (const auto& [k, v] : kv) {
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

std::map<std::string, std::string> read_kv(const std::string& path) {
  try {
    return parse_kv(read_text(path));
  } catch (const ConfigError& e) {
    throw ConfigError(path + ": " + e.what());
  }
}

}  // namespace uconv::io
