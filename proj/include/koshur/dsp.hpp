#pragma once

// STFT / mel-spectrogram front end: radix-2 FFT, Hann-windowed non-centered
// framing, HTK-scale peak-normalized mel filterbank, natural-log compression
// with a 1e-5 power floor, affine normalization, and a Griffin-Lim fallback
// for audibility. Mel matrices persist as BBMEL1 files.

#include <cmath>
#include <complex>
#include <cstdint>
#include <sstream>
#include <string>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/common.hpp"
#include "koshur/mat.hpp"

namespace koshur::dsp {

inline constexpr double kPi = 3.14159265358979323846;

struct InputTooShort : Error {
    using Error::Error;
};
struct SampleRateMismatch : Error {
    using Error::Error;
};

struct StftParams {
    int n_fft = 1024;
    int win_length = 1024;
    int hop_length = 256;
    int n_mels = 80;
    double f_min = 0.0;
    double f_max = 8000.0;
    int sample_rate = 22050;

    void validate() const {
        if (win_length > n_fft || hop_length > win_length || f_max > sample_rate / 2.0 ||
            n_fft <= 0 || (n_fft & (n_fft - 1)) != 0)
            throw Error("invalid STFT parameters");
    }
};

struct NormStats {
    double mean = -5.603;
    double std = 2.571;
};

struct MelSpectrogram {
    Mat data;             // frames x n_mels, log-mel
    bool normalized = false;
    StftParams params;
    NormStats stats;
};

// ---------------------------------------------------------------------------
// FFT (iterative radix-2, power-of-two sizes)

inline void fft_inplace(std::vector<std::complex<double>>& a, bool inverse) {
    const std::size_t n = a.size();
    if (n == 0 || (n & (n - 1)) != 0) throw Error("FFT size must be a power of two");
    for (std::size_t i = 1, j = 0; i < n; ++i) {
        std::size_t bit = n >> 1;
        for (; j & bit; bit >>= 1) j ^= bit;
        j ^= bit;
        if (i < j) std::swap(a[i], a[j]);
    }
    for (std::size_t len = 2; len <= n; len <<= 1) {
        double ang = 2.0 * kPi / static_cast<double>(len) * (inverse ? 1.0 : -1.0);
        std::complex<double> wlen(std::cos(ang), std::sin(ang));
        for (std::size_t i = 0; i < n; i += len) {
            std::complex<double> w(1.0, 0.0);
            for (std::size_t k = 0; k < len / 2; ++k) {
                std::complex<double> u = a[i + k];
                std::complex<double> v = a[i + k + len / 2] * w;
                a[i + k] = u + v;
                a[i + k + len / 2] = u - v;
                w *= wlen;
            }
        }
    }
    if (inverse)
        for (auto& v : a) v /= static_cast<double>(n);
}

// Periodic Hann window.
inline std::vector<double> hann_window(int length) {
    std::vector<double> w(length);
    for (int n = 0; n < length; ++n)
        w[n] = 0.5 - 0.5 * std::cos(2.0 * kPi * n / length);
    return w;
}

inline std::size_t frame_count(std::size_t n_samples, const StftParams& p) {
    if (n_samples < static_cast<std::size_t>(p.win_length)) return 0;
    return (n_samples - p.win_length) / p.hop_length + 1;
}

using ComplexMat = std::vector<std::vector<std::complex<double>>>;

// Non-centered framing: frame t covers samples [t*hop, t*hop + win).
inline ComplexMat stft(const audio::AudioBuffer& buf, const StftParams& p) {
    p.validate();
    if (buf.samples.size() < static_cast<std::size_t>(p.win_length))
        throw InputTooShort("stft: signal shorter than the analysis window");
    const std::size_t frames = frame_count(buf.samples.size(), p);
    const std::size_t bins = static_cast<std::size_t>(p.n_fft) / 2 + 1;
    static thread_local std::vector<double> win;
    if (win.size() != static_cast<std::size_t>(p.win_length)) win = hann_window(p.win_length);

    ComplexMat out(frames, std::vector<std::complex<double>>(bins));
    std::vector<std::complex<double>> fft_buf(p.n_fft);
    for (std::size_t t = 0; t < frames; ++t) {
        const double* x = buf.samples.data() + t * p.hop_length;
        for (int n = 0; n < p.win_length; ++n) fft_buf[n] = x[n] * win[n];
        for (int n = p.win_length; n < p.n_fft; ++n) fft_buf[n] = 0.0;
        fft_inplace(fft_buf, false);
        for (std::size_t k = 0; k < bins; ++k) out[t][k] = fft_buf[k];
    }
    return out;
}

// ---------------------------------------------------------------------------
// Mel filterbank

inline double hz_to_mel(double f) { return 2595.0 * std::log10(1.0 + f / 700.0); }
inline double mel_to_hz(double m) { return 700.0 * (std::pow(10.0, m / 2595.0) - 1.0); }

// n_mels x (n_fft/2+1), triangular filters on the HTK mel scale, peak = 1.
inline Mat mel_filterbank(const StftParams& p) {
    p.validate();
    const int bins = p.n_fft / 2 + 1;
    const double m_lo = hz_to_mel(p.f_min), m_hi = hz_to_mel(p.f_max);
    std::vector<double> edges(p.n_mels + 2);
    for (int i = 0; i < p.n_mels + 2; ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (p.n_mels + 1));

    Mat fb(p.n_mels, bins, 0.0);
    for (int i = 0; i < p.n_mels; ++i) {
        double lo = edges[i], c = edges[i + 1], hi = edges[i + 2];
        for (int k = 0; k < bins; ++k) {
            double f = static_cast<double>(k) * p.sample_rate / p.n_fft;
            double up = (c > lo) ? (f - lo) / (c - lo) : 0.0;
            double down = (hi > c) ? (hi - f) / (hi - c) : 0.0;
            fb(i, k) = std::max(0.0, std::min(up, down));
        }
    }
    return fb;
}

inline std::vector<double> filter_edges(const StftParams& p) {
    const double m_lo = hz_to_mel(p.f_min), m_hi = hz_to_mel(p.f_max);
    std::vector<double> edges(p.n_mels + 2);
    for (int i = 0; i < p.n_mels + 2; ++i)
        edges[i] = mel_to_hz(m_lo + (m_hi - m_lo) * i / (p.n_mels + 1));
    return edges;
}

// ---------------------------------------------------------------------------
// Mel spectrogram

inline constexpr double kLogFloor = 1e-5;  // power floor before the natural log

inline void normalize_mel(MelSpectrogram& mel) {
    if (mel.normalized) return;
    for (double& v : mel.data.data()) v = (v - mel.stats.mean) / mel.stats.std;
    mel.normalized = true;
}

inline void denormalize_mel(MelSpectrogram& mel) {
    if (!mel.normalized) return;
    for (double& v : mel.data.data()) v = v * mel.stats.std + mel.stats.mean;
    mel.normalized = false;
}

inline MelSpectrogram mel_spectrogram(const audio::AudioBuffer& buf, const StftParams& p,
                                      const NormStats& stats, bool normalize) {
    if (buf.sample_rate != p.sample_rate)
        throw SampleRateMismatch("mel_spectrogram: buffer rate " +
                                 std::to_string(buf.sample_rate) + " != params rate " +
                                 std::to_string(p.sample_rate));
    ComplexMat spec = stft(buf, p);
    Mat fb = mel_filterbank(p);
    const std::size_t frames = spec.size();
    const std::size_t bins = static_cast<std::size_t>(p.n_fft) / 2 + 1;

    MelSpectrogram out;
    out.params = p;
    out.stats = stats;
    out.data = Mat(frames, p.n_mels);
    std::vector<double> power(bins);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < bins; ++k) power[k] = std::norm(spec[t][k]);
        for (int i = 0; i < p.n_mels; ++i) {
            double acc = 0.0;
            const double* row = fb.row(i);
            for (std::size_t k = 0; k < bins; ++k) acc += row[k] * power[k];
            out.data(t, i) = std::log(std::max(acc, kLogFloor));
        }
    }
    if (normalize) normalize_mel(out);
    return out;
}

// ---------------------------------------------------------------------------
// Griffin-Lim (audibility fallback)

inline audio::AudioBuffer istft(const ComplexMat& spec, const StftParams& p) {
    const std::size_t frames = spec.size();
    if (frames == 0) return {std::vector<double>{}, p.sample_rate};
    const std::size_t bins = static_cast<std::size_t>(p.n_fft) / 2 + 1;
    std::vector<double> win = hann_window(p.win_length);
    std::size_t out_len = (frames - 1) * p.hop_length + p.win_length;
    std::vector<double> y(out_len, 0.0), norm(out_len, 0.0);
    std::vector<std::complex<double>> fb(p.n_fft);
    for (std::size_t t = 0; t < frames; ++t) {
        for (std::size_t k = 0; k < bins; ++k) fb[k] = spec[t][k];
        for (std::size_t k = bins; k < static_cast<std::size_t>(p.n_fft); ++k)
            fb[k] = std::conj(spec[t][p.n_fft - k]);
        fft_inplace(fb, true);
        for (int n = 0; n < p.win_length; ++n) {
            y[t * p.hop_length + n] += fb[n].real() * win[n];
            norm[t * p.hop_length + n] += win[n] * win[n];
        }
    }
    // Floor the overlap-add normalizer: at sequence edges only a window tail
    // covers a sample, and dividing by w^2 there explodes inconsistent
    // (mid-Griffin-Lim) spectra. Interior samples are untouched.
    for (std::size_t i = 0; i < out_len; ++i) y[i] /= std::max(norm[i], 1e-2);
    return {std::move(y), p.sample_rate};
}

// Inverts the mel projection: normalized-transpose seed followed by
// multiplicative non-negative updates, so that fb * lin reproduces the mel
// power closely (a bare transpose leaks energy into quiet bands, which
// dominates log-domain error).
inline std::vector<std::vector<double>> mel_to_linear_power(const Mat& logmel, const StftParams& p,
                                                            int nnls_iters = 40) {
    Mat fb = mel_filterbank(p);
    const std::size_t bins = static_cast<std::size_t>(p.n_fft) / 2 + 1;

    // sparse row supports: triangles touch only a narrow bin range
    std::vector<std::pair<std::size_t, std::size_t>> support(p.n_mels);
    std::vector<double> colsum(bins, 0.0);
    for (int i = 0; i < p.n_mels; ++i) {
        std::size_t lo = bins, hi = 0;
        for (std::size_t k = 0; k < bins; ++k) {
            if (fb(i, k) > 0.0) {
                lo = std::min(lo, k);
                hi = std::max(hi, k + 1);
                colsum[k] += fb(i, k);
            }
        }
        support[i] = {lo, hi};
    }

    std::vector<std::vector<double>> lin(logmel.rows(), std::vector<double>(bins, 0.0));
    std::vector<double> m(p.n_mels), r(p.n_mels), num(bins);
    for (std::size_t t = 0; t < logmel.rows(); ++t) {
        auto& v = lin[t];
        for (int i = 0; i < p.n_mels; ++i) m[i] = std::exp(logmel(t, i));
        // transpose seed
        for (int i = 0; i < p.n_mels; ++i)
            for (std::size_t k = support[i].first; k < support[i].second; ++k)
                v[k] += fb(i, k) * m[i];
        for (std::size_t k = 0; k < bins; ++k) v[k] = (colsum[k] > 1e-9) ? v[k] / colsum[k] : 0.0;
        // multiplicative updates: v <- v * (fb^T (m / fb v)) / (fb^T 1)
        for (int it = 0; it < nnls_iters; ++it) {
            for (int i = 0; i < p.n_mels; ++i) {
                double acc = 0.0;
                for (std::size_t k = support[i].first; k < support[i].second; ++k)
                    acc += fb(i, k) * v[k];
                r[i] = m[i] / std::max(acc, 1e-30);
            }
            std::fill(num.begin(), num.end(), 0.0);
            for (int i = 0; i < p.n_mels; ++i)
                for (std::size_t k = support[i].first; k < support[i].second; ++k)
                    num[k] += fb(i, k) * r[i];
            for (std::size_t k = 0; k < bins; ++k)
                if (colsum[k] > 1e-9) v[k] *= num[k] / colsum[k];
        }
    }
    return lin;
}

inline audio::AudioBuffer griffin_lim(const MelSpectrogram& mel, int iters, std::uint64_t seed = 0) {
    if (mel.normalized) throw Error("griffin_lim expects a denormalized mel input");
    const StftParams& p = mel.params;
    auto lin = mel_to_linear_power(mel.data, p);
    const std::size_t frames = lin.size();
    const std::size_t bins = static_cast<std::size_t>(p.n_fft) / 2 + 1;

    // Pad with zero-magnitude frames on both sides so every sample of the real
    // signal gets full overlap coverage; edge samples otherwise decay a little
    // more on each iteration and the error stops improving.
    const std::size_t pad = static_cast<std::size_t>((p.win_length + p.hop_length - 1) / p.hop_length) - 1;
    const std::size_t ext = frames + 2 * pad;

    Rng rng(seed ^ 0x6c617567u);
    ComplexMat spec(ext, std::vector<std::complex<double>>(bins));
    std::vector<std::vector<double>> mag(ext, std::vector<double>(bins, 0.0));
    for (std::size_t t = 0; t < frames; ++t)
        for (std::size_t k = 0; k < bins; ++k)
            mag[t + pad][k] = std::sqrt(std::max(0.0, lin[t][k]));
    for (std::size_t t = 0; t < ext; ++t)
        for (std::size_t k = 0; k < bins; ++k)
            spec[t][k] = std::polar(mag[t][k], 2.0 * kPi * rng.uniform());

    audio::AudioBuffer y = istft(spec, p);
    for (int it = 0; it < iters; ++it) {
        ComplexMat re = stft(y, p);
        for (std::size_t t = 0; t < std::min(ext, re.size()); ++t)
            for (std::size_t k = 0; k < bins; ++k) {
                double m = std::abs(re[t][k]);
                spec[t][k] = (m > 1e-12) ? re[t][k] * (mag[t][k] / m)
                                         : std::complex<double>(mag[t][k], 0.0);
            }
        y = istft(spec, p);
    }

    audio::AudioBuffer out;
    out.sample_rate = p.sample_rate;
    std::size_t begin = pad * p.hop_length;
    std::size_t len = (frames - 1) * p.hop_length + p.win_length;
    out.samples.assign(y.samples.begin() + begin, y.samples.begin() + begin + len);
    double peak = 0.0;
    for (double v : out.samples) peak = std::max(peak, std::abs(v));
    if (peak > 1.0)
        for (double& v : out.samples) v /= peak;
    return out;
}

// ---------------------------------------------------------------------------
// BBMEL1 persistence: magic, u32 frames, u32 n_mels, row-major LE f32; a text
// sidecar (<path>.meta) records StftParams and NormStats.

inline void save_mel(const std::filesystem::path& path, const MelSpectrogram& mel) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error("cannot write mel file: " + path.string());
    out.write("BBMEL1", 6);
    write_u32le(out, static_cast<std::uint32_t>(mel.data.rows()));
    write_u32le(out, static_cast<std::uint32_t>(mel.data.cols()));
    for (double v : mel.data.data()) write_f32le(out, static_cast<float>(v));
    out.close();

    std::ostringstream meta;
    meta << "n_fft=" << mel.params.n_fft << "\n"
         << "win_length=" << mel.params.win_length << "\n"
         << "hop_length=" << mel.params.hop_length << "\n"
         << "n_mels=" << mel.params.n_mels << "\n"
         << "f_min=" << mel.params.f_min << "\n"
         << "f_max=" << mel.params.f_max << "\n"
         << "sample_rate=" << mel.params.sample_rate << "\n"
         << "mean=" << mel.stats.mean << "\n"
         << "std=" << mel.stats.std << "\n"
         << "normalized=" << (mel.normalized ? 1 : 0) << "\n";
    write_text_file(path.string() + ".meta", meta.str());
}

inline MelSpectrogram load_mel(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open mel file: " + path.string());
    char magic[6];
    if (!read_exact(in, magic, 6) || std::string(magic, 6) != "BBMEL1")
        throw Error("bad mel file magic: " + path.string());
    std::uint32_t frames = 0, n_mels = 0;
    if (!read_u32le(in, frames) || !read_u32le(in, n_mels))
        throw Error("truncated mel header: " + path.string());
    MelSpectrogram mel;
    mel.data = Mat(frames, n_mels);
    for (double& v : mel.data.data()) {
        float f;
        if (!read_f32le(in, f)) throw Error("truncated mel data: " + path.string());
        v = f;
    }

    std::istringstream meta(read_text_file(path.string() + ".meta"));
    std::string line;
    while (std::getline(meta, line)) {
        auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        std::string k = line.substr(0, eq), v = line.substr(eq + 1);
        if (k == "n_fft") mel.params.n_fft = std::stoi(v);
        else if (k == "win_length") mel.params.win_length = std::stoi(v);
        else if (k == "hop_length") mel.params.hop_length = std::stoi(v);
        else if (k == "n_mels") mel.params.n_mels = std::stoi(v);
        else if (k == "f_min") mel.params.f_min = std::stod(v);
        else if (k == "f_max") mel.params.f_max = std::stod(v);
        else if (k == "sample_rate") mel.params.sample_rate = std::stoi(v);
        else if (k == "mean") mel.stats.mean = std::stod(v);
        else if (k == "std") mel.stats.std = std::stod(v);
        else if (k == "normalized") mel.normalized = (v == "1");
    }
    if (mel.data.cols() != static_cast<std::size_t>(mel.params.n_mels))
        throw Error("mel file width disagrees with sidecar n_mels: " + path.string());
    return mel;
}

}  // namespace koshur::dsp
