#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace bodyloop {

// Decoded RIFF/WAVE audio, one vector per channel, samples as stored
// (float formats unscaled, integer PCM scaled to [-1, 1)).
struct WavAudio {
  double sample_rate = 0.0;
  std::vector<std::vector<float>> channels;

  std::size_t frames() const { return channels.empty() ? 0 : channels.front().size(); }
};

// Accepts PCM integer (16/24/32 bit) and IEEE float (32/64 bit), including
// WAVE_FORMAT_EXTENSIBLE. Throws Error{format} for anything else.
WavAudio read_wav(const std::filesystem::path& path);
WavAudio decode_wav(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& origin = {});

// Always writes 32-bit IEEE float, interleaved.
std::vector<std::uint8_t> encode_wav_float32(double sample_rate, const std::vector<std::vector<float>>& channels);
void write_wav_float32(const std::filesystem::path& path, double sample_rate,
                       const std::vector<std::vector<float>>& channels);

}  // namespace bodyloop
