#pragma once

// Acoustic enhancement: edge silence trimming (RMS frames vs. 40 dB below
// peak) and integrated loudness measurement / normalization per ITU-R
// BS.1770-4, with K-weighting filters redesigned for arbitrary sample rates
// from the analog prototype via the bilinear transform.

#include <cmath>
#include <complex>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/common.hpp"

namespace koshur::enhance {

inline constexpr double kLoudPi = 3.14159265358979323846;

struct AllSilent : Error {
    using Error::Error;
};
struct TooShort : Error {
    using Error::Error;
};
struct Unmeasurable : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Silence trimming

struct TrimSpec {
    double threshold_db = 40.0;  // below global peak frame RMS
    double frame_ms = 25.0;
    double keep_pad_ms = 10.0;
};

struct TrimResult {
    audio::AudioBuffer buf;
    std::size_t first_sample = 0;  // slice bounds in the input
    std::size_t last_sample = 0;   // exclusive
};

// Removes leading/trailing frames more than threshold_db below the loudest
// frame; interior audio is untouched (the output is a contiguous slice).
inline TrimResult trim_silence_slice(const audio::AudioBuffer& buf, const TrimSpec& spec) {
    if (buf.samples.empty()) throw Error("trim_silence: empty buffer");
    if (spec.threshold_db <= 0 || spec.frame_ms <= 0) throw Error("trim_silence: bad TrimSpec");

    const std::size_t frame_len =
        std::max<std::size_t>(1, static_cast<std::size_t>(spec.frame_ms * buf.sample_rate / 1000.0));
    const std::size_t n_frames = (buf.samples.size() + frame_len - 1) / frame_len;

    std::vector<double> rms(n_frames, 0.0);
    double peak = 0.0;
    for (std::size_t f = 0; f < n_frames; ++f) {
        std::size_t begin = f * frame_len;
        std::size_t end = std::min(buf.samples.size(), begin + frame_len);
        double acc = 0.0;
        for (std::size_t i = begin; i < end; ++i) acc += buf.samples[i] * buf.samples[i];
        rms[f] = std::sqrt(acc / static_cast<double>(end - begin));
        peak = std::max(peak, rms[f]);
    }
    if (peak <= 0.0) throw AllSilent("trim_silence: all frames are digital silence");

    const double cut = peak * std::pow(10.0, -spec.threshold_db / 20.0);
    std::size_t first = n_frames, last = 0;
    for (std::size_t f = 0; f < n_frames; ++f) {
        if (rms[f] >= cut) {
            first = std::min(first, f);
            last = f + 1;
        }
    }
    if (first >= n_frames) throw AllSilent("trim_silence: no frame passes the threshold");

    const std::size_t pad =
        static_cast<std::size_t>(spec.keep_pad_ms * buf.sample_rate / 1000.0);
    std::size_t begin = first * frame_len;
    begin = (begin > pad) ? begin - pad : 0;
    std::size_t end = std::min(buf.samples.size(), last * frame_len + pad);

    TrimResult out;
    out.first_sample = begin;
    out.last_sample = end;
    out.buf.sample_rate = buf.sample_rate;
    out.buf.samples.assign(buf.samples.begin() + begin, buf.samples.begin() + end);
    return out;
}

inline audio::AudioBuffer trim_silence(const audio::AudioBuffer& buf, const TrimSpec& spec) {
    return trim_silence_slice(buf, spec).buf;
}

// ---------------------------------------------------------------------------
// BS.1770-4 loudness

struct LoudnessReading {
    double integrated_lufs = -std::numeric_limits<double>::infinity();
    std::size_t gated_blocks = 0;

    bool measurable() const { return gated_blocks > 0; }
};

struct Biquad {
    double b0 = 1, b1 = 0, b2 = 0, a1 = 0, a2 = 0;  // a0 normalized to 1

    void apply(std::vector<double>& x) const {
        double x1 = 0, x2 = 0, y1 = 0, y2 = 0;
        for (double& v : x) {
            double y = b0 * v + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = v;
            y2 = y1;
            y1 = y;
            v = y;
        }
    }
};

// Stage 1: high-shelf modelling head acoustics. Analog prototype parameters
// as published for the 48 kHz design; the bilinear transform maps them to any
// rate.
inline Biquad k_weight_shelf(double fs) {
    const double db = 3.999843853973347;
    const double f0 = 1681.974450955533;
    const double Q = 0.7071752369554196;

    const double K = std::tan(kLoudPi * f0 / fs);
    const double Vh = std::pow(10.0, db / 20.0);
    const double Vb = std::pow(Vh, 0.4996667741545416);
    const double d = 1.0 + K / Q + K * K;

    Biquad f;
    f.b0 = (Vh + Vb * K / Q + K * K) / d;
    f.b1 = 2.0 * (K * K - Vh) / d;
    f.b2 = (Vh - Vb * K / Q + K * K) / d;
    f.a1 = 2.0 * (K * K - 1.0) / d;
    f.a2 = (1.0 - K / Q + K * K) / d;
    return f;
}

// Stage 2: high-pass modelling the revised low-frequency B-curve.
inline Biquad k_weight_highpass(double fs) {
    const double f0 = 38.13547087602444;
    const double Q = 0.5003270373238773;

    const double K = std::tan(kLoudPi * f0 / fs);
    const double d = 1.0 + K / Q + K * K;

    Biquad f;
    f.b0 = 1.0;
    f.b1 = -2.0;
    f.b2 = 1.0;
    f.a1 = 2.0 * (K * K - 1.0) / d;
    f.a2 = (1.0 - K / Q + K * K) / d;
    return f;
}

// Squared magnitude response of a biquad at frequency f.
inline double biquad_power_gain(const Biquad& q, double f, double fs) {
    const double w = 2.0 * kLoudPi * f / fs;
    const std::complex<double> z1 = std::polar(1.0, -w);
    const std::complex<double> z2 = z1 * z1;
    const std::complex<double> num = q.b0 + q.b1 * z1 + q.b2 * z2;
    const std::complex<double> den = 1.0 + q.a1 * z1 + q.a2 * z2;
    return std::norm(num / den);
}

// Power gain of the full K chain at the 997 Hz calibration tone. The meter is
// calibrated so the chain reads exactly 0 dB there: a mono full-scale 997 Hz
// sine then measures −0.691 + 10·log10(0.5) ≈ −3.70 LUFS. (An uncalibrated
// textbook chain carries +0.691 dB at 997 Hz and would read −3.01; the
// difference is a uniform offset with no effect on gating or relative levels.)
inline double k_chain_997_gain(double fs) {
    return biquad_power_gain(k_weight_shelf(fs), 997.0, fs) *
           biquad_power_gain(k_weight_highpass(fs), 997.0, fs);
}

// Integrated loudness: K-weight, 400 ms blocks at 75% overlap, −70 LUFS
// absolute gate then −10 LU relative gate, −0.691 + 10·log10(mean power).
inline LoudnessReading measure_lufs(const audio::AudioBuffer& buf) {
    if (buf.sample_rate <= 0) throw Error("measure_lufs: bad sample rate");
    const std::size_t block = static_cast<std::size_t>(0.4 * buf.sample_rate);
    const std::size_t hop = block / 4;  // 75% overlap
    if (buf.samples.size() < block)
        throw TooShort("measure_lufs: signal shorter than one 400 ms block");

    std::vector<double> x = buf.samples;
    k_weight_shelf(buf.sample_rate).apply(x);
    k_weight_highpass(buf.sample_rate).apply(x);
    const double cal = std::sqrt(k_chain_997_gain(buf.sample_rate));
    for (double& v : x) v /= cal;

    const std::size_t n_blocks = (x.size() - block) / hop + 1;
    std::vector<double> power(n_blocks);
    for (std::size_t j = 0; j < n_blocks; ++j) {
        double acc = 0.0;
        const double* p = x.data() + j * hop;
        for (std::size_t i = 0; i < block; ++i) acc += p[i] * p[i];
        power[j] = acc / static_cast<double>(block);
    }

    auto lufs_of = [](double p) { return -0.691 + 10.0 * std::log10(p); };

    // absolute gate at −70 LUFS
    std::vector<double> passed;
    for (double p : power)
        if (p > 0.0 && lufs_of(p) > -70.0) passed.push_back(p);
    LoudnessReading out;
    if (passed.empty()) return out;  // −∞ sentinel

    // relative gate at 10 LU below the absolute-gated mean
    double mean = 0.0;
    for (double p : passed) mean += p;
    mean /= static_cast<double>(passed.size());
    double rel_cut = lufs_of(mean) - 10.0;

    double gated_mean = 0.0;
    std::size_t count = 0;
    for (double p : passed) {
        if (lufs_of(p) > rel_cut) {
            gated_mean += p;
            ++count;
        }
    }
    if (count == 0) return out;
    gated_mean /= static_cast<double>(count);
    out.integrated_lufs = lufs_of(gated_mean);
    out.gated_blocks = count;
    return out;
}

struct GainResult {
    audio::AudioBuffer buf;
    double applied_gain_db = 0.0;
    std::size_t clipped_samples = 0;
};

// Applies the uniform gain that moves integrated loudness to target_lufs,
// clipping to [−1, 1] if full scale would be exceeded.
inline GainResult normalize_loudness(const audio::AudioBuffer& buf, double target_lufs = -23.0) {
    LoudnessReading reading;
    try {
        reading = measure_lufs(buf);
    } catch (const TooShort&) {
        throw Unmeasurable("normalize_loudness: signal too short to measure");
    }
    if (!reading.measurable())
        throw Unmeasurable("normalize_loudness: no blocks pass the absolute gate");

    const double gain_db = target_lufs - reading.integrated_lufs;
    const double gain = std::pow(10.0, gain_db / 20.0);

    GainResult out;
    out.applied_gain_db = gain_db;
    out.buf.sample_rate = buf.sample_rate;
    out.buf.samples.resize(buf.samples.size());
    for (std::size_t i = 0; i < buf.samples.size(); ++i) {
        double v = buf.samples[i] * gain;
        if (v > 1.0) {
            v = 1.0;
            ++out.clipped_samples;
        } else if (v < -1.0) {
            v = -1.0;
            ++out.clipped_samples;
        }
        out.buf.samples[i] = v;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Composed pipeline: denoise hook (identity by default) -> trim -> loudness
// -> resample to the target rate.

struct EnhanceResult {
    audio::AudioBuffer buf;
    double original_duration_s = 0.0;
    double trimmed_duration_s = 0.0;
    double measured_lufs = 0.0;
    double applied_gain_db = 0.0;
    std::size_t clipped_samples = 0;
    bool dropped = false;
};

using DenoiseHook = std::function<audio::AudioBuffer(const audio::AudioBuffer&)>;

inline EnhanceResult enhance_pipeline(const audio::AudioBuffer& input, const TrimSpec& spec,
                                      double target_lufs = -23.0, int target_rate = 22050,
                                      const DenoiseHook& denoise = nullptr) {
    EnhanceResult out;
    out.original_duration_s = input.duration_s();

    audio::AudioBuffer buf = denoise ? denoise(input) : input;

    try {
        buf = trim_silence(buf, spec);
    } catch (const AllSilent&) {
        out.dropped = true;
        out.trimmed_duration_s = 0.0;
        return out;
    }
    out.trimmed_duration_s = buf.duration_s();

    try {
        LoudnessReading reading = measure_lufs(buf);
        if (!reading.measurable()) {
            out.dropped = true;
            return out;
        }
        out.measured_lufs = reading.integrated_lufs;
        GainResult g = normalize_loudness(buf, target_lufs);
        out.applied_gain_db = g.applied_gain_db;
        out.clipped_samples = g.clipped_samples;
        buf = std::move(g.buf);
    } catch (const TooShort&) {
        out.dropped = true;
        return out;
    } catch (const Unmeasurable&) {
        out.dropped = true;
        return out;
    }

    out.buf = audio::resample(buf, target_rate);
    return out;
}

}  // namespace koshur::enhance
