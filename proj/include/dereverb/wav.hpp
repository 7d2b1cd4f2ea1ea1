#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "dereverb/types.hpp"

// Minimal RIFF/WAVE reader and writer: PCM16, PCM24, PCM32 and IEEE float32,
// any channel count.

namespace dereverb::wav {

enum class SampleFormat { Pcm16, Float32 };

namespace detail {

inline std::uint32_t read_u32(const unsigned char* p) {
    return std::uint32_t(p[0]) | (std::uint32_t(p[1]) << 8) | (std::uint32_t(p[2]) << 16) |
           (std::uint32_t(p[3]) << 24);
}
inline std::uint16_t read_u16(const unsigned char* p) {
    return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}
inline void put_u32(std::vector<unsigned char>& b, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) b.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
inline void put_u16(std::vector<unsigned char>& b, std::uint16_t v) {
    b.push_back(static_cast<unsigned char>(v & 0xff));
    b.push_back(static_cast<unsigned char>(v >> 8));
}

}  // namespace detail

inline AudioBuffer decode(const std::vector<unsigned char>& bytes) {
    using namespace detail;
    if (bytes.size() < 12 || std::memcmp(bytes.data(), "RIFF", 4) != 0 ||
        std::memcmp(bytes.data() + 8, "WAVE", 4) != 0)
        throw IoError("not a RIFF/WAVE file");

    std::uint16_t format = 0, channels = 0, bits = 0;
    std::uint32_t rate = 0;
    const unsigned char* data = nullptr;
    std::size_t data_len = 0;

    std::size_t pos = 12;
    while (pos + 8 <= bytes.size()) {
        const unsigned char* chunk = bytes.data() + pos;
        const std::uint32_t len = read_u32(chunk + 4);
        const std::size_t body = pos + 8;
        if (body + len > bytes.size() && std::memcmp(chunk, "data", 4) != 0)
            throw IoError("truncated WAV chunk");
        if (std::memcmp(chunk, "fmt ", 4) == 0) {
            if (len < 16) throw IoError("malformed fmt chunk");
            format = read_u16(bytes.data() + body);
            channels = read_u16(bytes.data() + body + 2);
            rate = read_u32(bytes.data() + body + 4);
            bits = read_u16(bytes.data() + body + 14);
            if (format == 0xfffe && len >= 26) format = read_u16(bytes.data() + body + 24);
        } else if (std::memcmp(chunk, "data", 4) == 0) {
            data = bytes.data() + body;
            data_len = std::min<std::size_t>(len, bytes.size() - body);
            break;
        }
        pos = body + len + (len & 1u);
    }
    if (channels == 0 || data == nullptr) throw IoError("WAV file lacks fmt or data chunk");

    const std::size_t width = bits / 8;
    const bool is_float = format == 3;
    if (!((format == 1 && (bits == 16 || bits == 24 || bits == 32)) || (is_float && bits == 32)))
        throw IoError("unsupported WAV encoding (format " + std::to_string(format) + ", " +
                      std::to_string(bits) + " bits)");

    const std::size_t frames = data_len / (width * channels);
    AudioBuffer out(channels, static_cast<Eigen::Index>(frames), static_cast<int>(rate));
    for (std::size_t n = 0; n < frames; ++n) {
        for (std::size_t c = 0; c < channels; ++c) {
            const unsigned char* p = data + (n * channels + c) * width;
            double v = 0.0;
            if (is_float) {
                float f;
                std::uint32_t u = read_u32(p);
                std::memcpy(&f, &u, 4);
                v = f;
            } else if (bits == 16) {
                v = static_cast<std::int16_t>(read_u16(p)) / 32768.0;
            } else if (bits == 24) {
                std::int32_t s = (p[0] << 8) | (p[1] << 16) | (p[2] << 24);
                v = (s >> 8) / 8388608.0;
            } else {
                v = static_cast<std::int32_t>(read_u32(p)) / 2147483648.0;
            }
            out.samples(static_cast<Eigen::Index>(c), static_cast<Eigen::Index>(n)) = v;
        }
    }
    return out;
}

inline std::vector<unsigned char> encode(const AudioBuffer& audio, SampleFormat fmt = SampleFormat::Float32) {
    using namespace detail;
    const auto channels = static_cast<std::uint16_t>(audio.channels());
    const std::uint16_t bits = fmt == SampleFormat::Pcm16 ? 16 : 32;
    const std::uint32_t block = channels * (bits / 8u);
    const auto frames = static_cast<std::uint32_t>(audio.length());
    const std::uint32_t data_len = frames * block;

    std::vector<unsigned char> b;
    b.reserve(44 + data_len);
    b.insert(b.end(), {'R', 'I', 'F', 'F'});
    put_u32(b, 36 + data_len);
    b.insert(b.end(), {'W', 'A', 'V', 'E', 'f', 'm', 't', ' '});
    put_u32(b, 16);
    put_u16(b, fmt == SampleFormat::Pcm16 ? 1 : 3);
    put_u16(b, channels);
    put_u32(b, static_cast<std::uint32_t>(audio.sample_rate));
    put_u32(b, static_cast<std::uint32_t>(audio.sample_rate) * block);
    put_u16(b, static_cast<std::uint16_t>(block));
    put_u16(b, bits);
    b.insert(b.end(), {'d', 'a', 't', 'a'});
    put_u32(b, data_len);

    for (Eigen::Index n = 0; n < audio.length(); ++n) {
        for (Eigen::Index c = 0; c < audio.channels(); ++c) {
            const double v = audio.samples(c, n);
            if (fmt == SampleFormat::Pcm16) {
                const double s = std::clamp(std::round(v * 32768.0), -32768.0, 32767.0);
                put_u16(b, static_cast<std::uint16_t>(static_cast<std::int16_t>(s)));
            } else {
                const float f = static_cast<float>(v);
                std::uint32_t u;
                std::memcpy(&u, &f, 4);
                put_u32(b, u);
            }
        }
    }
    return b;
}

inline AudioBuffer read(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open '" + path + "' for reading");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode(bytes);
    } catch (const IoError& e) {
        throw IoError(path + ": " + e.what());
    }
}

inline void write(const std::string& path, const AudioBuffer& audio, SampleFormat fmt = SampleFormat::Float32) {
    const auto bytes = encode(audio, fmt);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace dereverb::wav
