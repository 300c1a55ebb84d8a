#include "bodyloop/wav.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "bodyloop/error.hpp"

namespace bodyloop {

namespace {

constexpr std::uint16_t kFormatPcm = 1;
constexpr std::uint16_t kFormatFloat = 3;
constexpr std::uint16_t kFormatExtensible = 0xFFFE;

static_assert(std::endian::native == std::endian::little, "WAV codec assumes a little-endian host");

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& origin)
      : bytes_(bytes), origin_(origin) {}

  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::size_t pos() const { return pos_; }
  void seek(std::size_t p) { pos_ = p; }

  void need(std::size_t n) const {
    if (remaining() < n) fail(ErrorCode::format, "truncated WAV data", origin_);
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint16_t u16() {
    need(2);
    std::uint16_t v = 0;
    std::memcpy(&v, bytes_.data() + pos_, 2);
    pos_ += 2;
    return v;
  }
  std::string tag() {
    need(4);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), 4);
    pos_ += 4;
    return s;
  }
  const std::uint8_t* data() const { return bytes_.data() + pos_; }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const std::filesystem::path& origin_;
  std::size_t pos_ = 0;
};

float decode_sample(const std::uint8_t* p, std::uint16_t format, std::uint16_t bits) {
  if (format == kFormatFloat) {
    if (bits == 32) {
      float f = 0.0f;
      std::memcpy(&f, p, 4);
      return f;
    }
    double d = 0.0;
    std::memcpy(&d, p, 8);
    return static_cast<float>(d);
  }
  switch (bits) {
    case 16: {
      std::int16_t v = 0;
      std::memcpy(&v, p, 2);
      return static_cast<float>(v) / 32768.0f;
    }
    case 24: {
      std::int32_t v = (static_cast<std::int32_t>(p[2]) << 24) | (static_cast<std::int32_t>(p[1]) << 16) |
                       (static_cast<std::int32_t>(p[0]) << 8);
      return static_cast<float>(static_cast<double>(v) / 2147483648.0);
    }
    default: {
      std::int32_t v = 0;
      std::memcpy(&v, p, 4);
      return static_cast<float>(static_cast<double>(v) / 2147483648.0);
    }
  }
}

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
}
void put_tag(std::vector<std::uint8_t>& out, const char* tag) { out.insert(out.end(), tag, tag + 4); }

}  // namespace

WavAudio decode_wav(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& origin) {
  if (bytes.empty()) fail(ErrorCode::format, "zero-length file", origin);
  Reader r(bytes, origin);
  if (r.tag() != "RIFF") fail(ErrorCode::format, "not a RIFF file", origin);
  r.u32();
  if (r.tag() != "WAVE") fail(ErrorCode::format, "not a WAVE file", origin);

  std::uint16_t format = 0;
  std::uint16_t channels = 0;
  std::uint32_t rate = 0;
  std::uint16_t bits = 0;
  bool have_fmt = false;
  const std::uint8_t* payload = nullptr;
  std::size_t payload_size = 0;

  while (r.remaining() >= 8) {
    const std::string id = r.tag();
    const std::uint32_t size = r.u32();
    const std::size_t body = r.pos();
    if (id == "fmt ") {
      r.need(16);
      format = r.u16();
      channels = r.u16();
      rate = r.u32();
      r.u32();  // byte rate
      r.u16();  // block align
      bits = r.u16();
      if (format == kFormatExtensible && size >= 40) {
        r.u16();  // cbSize
        r.u16();  // valid bits
        r.u32();  // channel mask
        format = r.u16();  // first two bytes of the sub-format GUID
      }
      have_fmt = true;
    } else if (id == "data") {
      payload = r.data();
      payload_size = std::min<std::size_t>(size, r.remaining());
    }
    std::size_t next = body + size + (size & 1u);
    if (next > bytes.size()) next = bytes.size();
    r.seek(next);
  }

  if (!have_fmt) fail(ErrorCode::format, "missing fmt chunk", origin);
  if (payload == nullptr) fail(ErrorCode::format, "missing data chunk", origin);
  if (channels == 0) fail(ErrorCode::format, "zero channels", origin);
  if (rate == 0) fail(ErrorCode::format, "zero sample rate", origin);

  const bool pcm_ok = format == kFormatPcm && (bits == 16 || bits == 24 || bits == 32);
  const bool float_ok = format == kFormatFloat && (bits == 32 || bits == 64);
  if (!pcm_ok && !float_ok) {
    fail(ErrorCode::format,
         "unsupported bit depth/format: format " + std::to_string(format) + ", " + std::to_string(bits) + " bits",
         origin);
  }

  const std::size_t bytes_per_sample = bits / 8;
  const std::size_t frame_bytes = bytes_per_sample * channels;
  const std::size_t frames = payload_size / frame_bytes;
  if (frames == 0) fail(ErrorCode::format, "zero-length audio data", origin);

  WavAudio audio;
  audio.sample_rate = rate;
  audio.channels.assign(channels, std::vector<float>(frames));
  for (std::size_t n = 0; n < frames; ++n) {
    const std::uint8_t* frame = payload + n * frame_bytes;
    for (std::size_t c = 0; c < channels; ++c) {
      audio.channels[c][n] = decode_sample(frame + c * bytes_per_sample, format, bits);
    }
  }
  return audio;
}

WavAudio read_wav(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::io, "cannot open file: " + path.string(), path);
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return decode_wav(bytes, path);
}

std::vector<std::uint8_t> encode_wav_float32(double sample_rate, const std::vector<std::vector<float>>& channels) {
  require(!channels.empty(), "WAV output needs at least one channel");
  const std::size_t frames = channels.front().size();
  for (const auto& ch : channels) require(ch.size() == frames, "WAV channels must have equal length");

  const auto nch = static_cast<std::uint16_t>(channels.size());
  const auto rate = static_cast<std::uint32_t>(std::lround(sample_rate));
  const std::uint32_t data_bytes = static_cast<std::uint32_t>(frames * nch * 4);

  std::vector<std::uint8_t> out;
  out.reserve(44 + data_bytes);
  put_tag(out, "RIFF");
  put_u32(out, 36 + data_bytes);
  put_tag(out, "WAVE");
  put_tag(out, "fmt ");
  put_u32(out, 16);
  put_u16(out, kFormatFloat);
  put_u16(out, nch);
  put_u32(out, rate);
  put_u32(out, rate * nch * 4);
  put_u16(out, static_cast<std::uint16_t>(nch * 4));
  put_u16(out, 32);
  put_tag(out, "data");
  put_u32(out, data_bytes);
  for (std::size_t n = 0; n < frames; ++n) {
    for (const auto& ch : channels) {
      std::uint32_t bits = std::bit_cast<std::uint32_t>(ch[n]);
      put_u32(out, bits);
    }
  }
  return out;
}

void write_wav_float32(const std::filesystem::path& path, double sample_rate,
                       const std::vector<std::vector<float>>& channels) {
  const auto bytes = encode_wav_float32(sample_rate, channels);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::io, "cannot write file: " + path.string(), path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::io, "write failed: " + path.string(), path);
}

}  // namespace bodyloop
