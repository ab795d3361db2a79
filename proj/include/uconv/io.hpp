#pragma once

#include <cstdint>
#include <istream>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include "uconv/tensor.hpp"

namespace uconv::io {

// Little-endian primitives shared by the FEAT and checkpoint formats.
// Readers throw IoError on truncation.
void write_u16(std::ostream& os, uint16_t v);
void write_u32(std::ostream& os, uint32_t v);
void write_f32(std::ostream& os, float v);
void write_f64(std::ostream& os, double v);
uint16_t read_u16(std::istream& is);
uint32_t read_u32(std::istream& is);
float read_f32(std::istream& is);
double read_f64(std::istream& is);
void write_bytes(std::ostream& os, const void* p, size_t n);
void read_bytes(std::istream& is, void* p, size_t n);

// WAV, restricted to RIFF/WAVE PCM16 mono 16 kHz. Samples map to
// [-1, 1) via division by 32768.
std::vector<double> read_wav_mono16k(const std::string& path);
void write_wav_pcm16(const std::string& path,
                     const std::vector<double>& samples,
                     int64_t sample_rate = 16000);

// FEAT: magic "FEAT", u32 T, u32 dim (must be 80), then T*dim float32
// little-endian, row-major.
Tensor<double> read_feat(const std::string& path);
void write_feat(const std::string& path, const Tensor<double>& feats);

// Vocabulary: one unit per line, line i holds the unit for label id i+1;
// id 0 is the blank and has no line. encode is greedy longest-match over the
// text; join concatenates units.
struct Vocab {
  std::vector<std::string> units;

  int64_t size() const { return static_cast<int64_t>(units.size()) + 1; }
  const std::string& unit(int64_t id) const;
  std::vector<int64_t> encode(const std::string& text) const;
  std::string join(const std::vector<int64_t>& ids) const;
};

Vocab read_vocab(const std::string& path);
void write_vocab(const std::string& path, const Vocab& vocab);

// Manifest: one utterance per line, "features_or_wav_path<TAB>transcript_path".
// Relative paths resolve against the manifest's directory.
std::vector<std::pair<std::string, std::string>> read_manifest(
    const std::string& path);

// Whole file as text with trailing whitespace trimmed (transcripts).
std::string read_text(const std::string& path);
void write_text(const std::string& path, const std::string& text);

// key=value configuration text: one pair per line, blank lines and
// #-comments ignored, duplicate keys rejected.
std::map<std::string, std::string> parse_kv(const std::string& text);
std::string kv_to_string(const std::map<std::string, std::string>& kv);
std::map<std::string, std::string> read_kv(const std::string& path);

}  // namespace uconv::io
