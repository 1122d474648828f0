#pragma once

// WAV I/O (RIFF PCM16 / float32 read, PCM16 write) and band-limited
// resampling.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "koshur/common.hpp"

namespace koshur::audio {

struct UnsupportedFormat : Error {
    using Error::Error;
};
struct CorruptHeader : Error {
    using Error::Error;
};

struct AudioBuffer {
    std::vector<double> samples;
    int sample_rate = 0;

    double duration_s() const {
        return sample_rate > 0 ? static_cast<double>(samples.size()) / sample_rate : 0.0;
    }
};

namespace detail {

inline std::uint32_t rd_u32(const std::string& b, std::size_t off) {
    if (off + 4 > b.size()) throw CorruptHeader("WAV: truncated chunk data");
    return std::uint32_t(static_cast<unsigned char>(b[off])) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 1])) << 8) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 2])) << 16) |
           (std::uint32_t(static_cast<unsigned char>(b[off + 3])) << 24);
}

inline std::uint16_t rd_u16(const std::string& b, std::size_t off) {
    if (off + 2 > b.size()) throw CorruptHeader("WAV: truncated chunk data");
    return std::uint16_t(static_cast<unsigned char>(b[off])) |
           (std::uint16_t(static_cast<unsigned char>(b[off + 1])) << 8);
}

}  // namespace detail

// Reads a RIFF/WAVE file; PCM16 or IEEE float32, mono or first channel.
inline AudioBuffer read_wav(const std::filesystem::path& path) {
    std::string b = read_text_file(path);
    if (b.size() < 12 || b.compare(0, 4, "RIFF") != 0 || b.compare(8, 4, "WAVE") != 0)
        throw CorruptHeader("not a RIFF/WAVE file: " + path.string());

    int format = 0, channels = 0, bits = 0, rate = 0;
    std::size_t data_off = 0, data_len = 0;
    bool have_fmt = false, have_data = false;

    std::size_t pos = 12;
    while (pos + 8 <= b.size()) {
        std::string id = b.substr(pos, 4);
        std::uint32_t len = detail::rd_u32(b, pos + 4);
        std::size_t body = pos + 8;
        if (id == "fmt ") {
            if (len < 16) throw CorruptHeader("WAV: fmt chunk too small");
            format = detail::rd_u16(b, body);
            channels = detail::rd_u16(b, body + 2);
            rate = static_cast<int>(detail::rd_u32(b, body + 4));
            bits = detail::rd_u16(b, body + 14);
            have_fmt = true;
        } else if (id == "data") {
            data_off = body;
            data_len = std::min<std::size_t>(len, b.size() - body);
            have_data = true;
        }
        pos = body + len + (len & 1);  // chunks are word-aligned
    }
    if (!have_fmt || !have_data) throw CorruptHeader("WAV: missing fmt or data chunk");
    if (channels < 1 || rate <= 0) throw CorruptHeader("WAV: bad fmt fields");

    AudioBuffer out;
    out.sample_rate = rate;
    if (format == 1 && bits == 16) {
        std::size_t n_frames = data_len / (2 * channels);
        out.samples.resize(n_frames);
        for (std::size_t i = 0; i < n_frames; ++i) {
            std::int16_t s = static_cast<std::int16_t>(detail::rd_u16(b, data_off + i * 2 * channels));
            out.samples[i] = s / 32768.0;
        }
    } else if (format == 3 && bits == 32) {
        std::size_t n_frames = data_len / (4 * channels);
        out.samples.resize(n_frames);
        for (std::size_t i = 0; i < n_frames; ++i) {
            std::uint32_t u = detail::rd_u32(b, data_off + i * 4 * channels);
            float f;
            std::memcpy(&f, &u, 4);
            out.samples[i] = f;
        }
    } else {
        throw UnsupportedFormat("WAV: only PCM16 and float32 supported (format " +
                                std::to_string(format) + ", " + std::to_string(bits) + " bits)");
    }
    return out;
}

// Writes mono PCM16.
inline void write_wav(const std::filesystem::path& path, const AudioBuffer& buf) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write WAV: " + path.string());
    std::uint32_t data_len = static_cast<std::uint32_t>(buf.samples.size() * 2);
    out.write("RIFF", 4);
    write_u32le(out, 36 + data_len);
    out.write("WAVE", 4);
    out.write("fmt ", 4);
    write_u32le(out, 16);
    // format tag, channels, rates, block align, bits — all little-endian u16/u32
    std::uint8_t fmt_tag[4] = {1, 0, 1, 0};  // PCM, mono
    out.write(reinterpret_cast<const char*>(fmt_tag), 4);
    write_u32le(out, static_cast<std::uint32_t>(buf.sample_rate));
    write_u32le(out, static_cast<std::uint32_t>(buf.sample_rate * 2));  // byte rate
    std::uint8_t align_bits[4] = {2, 0, 16, 0};
    out.write(reinterpret_cast<const char*>(align_bits), 4);
    out.write("data", 4);
    write_u32le(out, data_len);
    for (double s : buf.samples) {
        double clamped = std::min(1.0, std::max(-1.0, s));
        long v = std::lround(clamped * 32768.0);
        v = std::min(32767L, std::max(-32768L, v));
        std::int16_t s16 = static_cast<std::int16_t>(v);
        std::uint8_t bytes[2] = {static_cast<std::uint8_t>(s16 & 0xff),
                                 static_cast<std::uint8_t>((s16 >> 8) & 0xff)};
        out.write(reinterpret_cast<const char*>(bytes), 2);
    }
}

// Windowed-sinc resampling with per-output kernel normalization (preserves
// DC exactly up to window truncation). Same-rate input is returned as-is.
inline AudioBuffer resample(const AudioBuffer& buf, int target_rate) {
    if (target_rate <= 0) throw Error("resample: target rate must be positive");
    if (buf.sample_rate == target_rate) return buf;

    const double ratio = static_cast<double>(target_rate) / buf.sample_rate;
    const double cutoff = 0.5 * std::min(1.0, ratio);   // cycles per source sample
    const int base_taps = 32;
    const double half_width = base_taps / std::min(1.0, ratio);

    AudioBuffer out;
    out.sample_rate = target_rate;
    std::size_t out_len = static_cast<std::size_t>(
        std::llround(static_cast<double>(buf.samples.size()) * ratio));
    out.samples.resize(out_len);

    const auto& x = buf.samples;
    const long n_in = static_cast<long>(x.size());
    for (std::size_t n = 0; n < out_len; ++n) {
        double p = n / ratio;  // position in source samples
        long m0 = static_cast<long>(std::ceil(p - half_width));
        long m1 = static_cast<long>(std::floor(p + half_width));
        double acc = 0.0, norm = 0.0;
        for (long m = std::max(0L, m0); m <= std::min(n_in - 1, m1); ++m) {
            double t = m - p;
            double sinc = (std::abs(t) < 1e-12)
                              ? 2.0 * cutoff
                              : std::sin(2.0 * 3.14159265358979323846 * cutoff * t) /
                                    (3.14159265358979323846 * t);
            double w = 0.5 + 0.5 * std::cos(3.14159265358979323846 * t / half_width);
            acc += x[m] * sinc * w;
            norm += sinc * w;
        }
        out.samples[n] = (std::abs(norm) > 1e-12) ? acc / norm : 0.0;
    }
    return out;
}

}  // namespace koshur::audio
