#pragma once
// Binary mel-spectrogram files ("KSMEL1" format, little-endian):
//   magic "KSMEL1\n" (7 bytes), u32 version=1,
//   u32 frames, u32 n_mels, u8 normalized, f64 norm mean, f64 norm std,
//   u32 n_fft, u32 win_length, u32 hop_length, f64 f_min, f64 f_max,
//   u32 sample_rate, then frames*n_mels f32 values row-major.

#include <cstdint>
#include <fstream>
#include <string>

#include "koshur/common.hpp"
#include "koshur/dsp.hpp"

namespace koshur::melfile {

struct CorruptMelFile : Error {
    using Error::Error;
};

inline constexpr char kMagic[7] = {'K', 'S', 'M', 'E', 'L', '1', '\n'};

inline void write_mel(const std::string& path, const dsp::MelSpectrogram& mel) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot open for writing: " + path);
    os.write(kMagic, sizeof(kMagic));
    write_u32le(os, 1);
    write_u32le(os, static_cast<std::uint32_t>(mel.data.rows()));
    write_u32le(os, static_cast<std::uint32_t>(mel.data.cols()));
    os.put(mel.normalized ? 1 : 0);
    write_f64le(os, mel.stats.mean);
    write_f64le(os, mel.stats.std);
    write_u32le(os, static_cast<std::uint32_t>(mel.params.n_fft));
    write_u32le(os, static_cast<std::uint32_t>(mel.params.win_length));
    write_u32le(os, static_cast<std::uint32_t>(mel.params.hop_length));
    write_f64le(os, mel.params.f_min);
    write_f64le(os, mel.params.f_max);
    write_u32le(os, static_cast<std::uint32_t>(mel.params.sample_rate));
    for (std::size_t i = 0; i < mel.data.rows(); ++i)
        for (std::size_t j = 0; j < mel.data.cols(); ++j)
            write_f32le(os, static_cast<float>(mel.data(i, j)));
    if (!os) throw Error("write failed: " + path);
}

inline dsp::MelSpectrogram read_mel(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open: " + path);
    auto need = [&](bool ok) {
        if (!ok) throw CorruptMelFile("truncated or unreadable mel file: " + path);
    };
    char magic[7];
    need(read_exact(is, magic, sizeof(magic)));
    if (std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
        throw CorruptMelFile("bad magic in mel file: " + path);
    std::uint32_t version = 0;
    need(read_u32le(is, version));
    if (version != 1) throw CorruptMelFile("unsupported mel file version in: " + path);

    std::uint32_t frames = 0, bins = 0;
    need(read_u32le(is, frames));
    need(read_u32le(is, bins));
    int norm_byte = is.get();
    need(norm_byte != EOF);
    dsp::MelSpectrogram mel;
    mel.normalized = norm_byte != 0;
    need(read_f64le(is, mel.stats.mean));
    need(read_f64le(is, mel.stats.std));
    std::uint32_t n_fft = 0, win = 0, hop = 0, rate = 0;
    need(read_u32le(is, n_fft));
    need(read_u32le(is, win));
    need(read_u32le(is, hop));
    need(read_f64le(is, mel.params.f_min));
    need(read_f64le(is, mel.params.f_max));
    need(read_u32le(is, rate));
    mel.params.n_fft = static_cast<int>(n_fft);
    mel.params.win_length = static_cast<int>(win);
    mel.params.hop_length = static_cast<int>(hop);
    mel.params.sample_rate = static_cast<int>(rate);
    mel.params.n_mels = static_cast<int>(bins);
    if (bins == 0 || bins > 4096 || frames > (1u << 24))
        throw CorruptMelFile("implausible mel dimensions in: " + path);
    mel.data = Mat(frames, bins);
    for (std::uint32_t i = 0; i < frames; ++i)
        for (std::uint32_t j = 0; j < bins; ++j) {
            float v = 0.0f;
            need(read_f32le(is, v));
            mel.data(i, j) = v;
        }
    return mel;
}

}  // namespace koshur::melfile
