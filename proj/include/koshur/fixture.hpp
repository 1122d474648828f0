#pragma once

// Deterministic five-utterance toy corpus built for fast overfitting: each
// utterance is a single steady multitone whose components all sit on the
// analysis-hop grid (multiples of 22050/256 Hz) with phases that never reset,
// so the waveform repeats exactly every hop and every analysis frame inside a
// token is identical. Token identity is carried by a smooth token-specific
// spectral-envelope modulation and by duration; amplitude switches happen only
// at hop-aligned boundaries with a one-hop crossfade. There is no silence and
// no level cliff anywhere.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/common.hpp"
#include "koshur/text.hpp"

namespace koshur::fixture {

struct FixtureUtterance {
    std::string id;
    std::string text;
    std::string speaker;
    std::string source;  // "rasa" studio or "ivr" telephone
    std::string split;   // train / valid / test
    double gain_db;      // pre-normalization level offset
    double base_f0;      // speaker register, Hz (kept for metadata realism)
};

inline const std::vector<FixtureUtterance>& corpus() {
    static const std::vector<FixtureUtterance> utts = {
        {"train_rasa_00", "کٲشُر زبان", "rasa_f1", "rasa", "train", -2.0, 196.0},
        {"train_rasa_01", "سَلام وَن", "rasa_f1", "rasa", "train", 1.5, 196.0},
        {"train_ivr_00", "مِہ دِتو", "ivr_m1", "ivr", "train", -5.0, 128.0},
        {"valid_rasa_00", "شُر گوم", "rasa_f1", "rasa", "valid", 0.0, 196.0},
        {"test_rasa_00", "پٲٹھؠ بول", "rasa_f1", "rasa", "test", -1.0, 196.0},
    };
    return utts;
}

namespace detail {

inline constexpr double kGridHz = 22050.0 / 256.0;  // one component per FFT-hop period
inline constexpr int kGridMin = 1;                   // lowest component, ~86 Hz
inline constexpr int kGridMax = 90;                  // highest, ~7752 Hz

struct Segment {
    int dur_hops;  // duration in analysis hops (256 samples at 22050 Hz)
    double dur_s;
    double amp;     // overall level (level-only changes are metrically benign)
    double mod_f;   // modulation spatial frequency
    double mod_p;   // modulation phase
    double tilt;    // spectral tilt
};

// Duration and the envelope-modulation parameters vary per token; the word
// gap is a quieter segment rather than silence.
inline Segment token_segment(int id, const std::string& symbol, const text::Vocab& vocab,
                             double /*base_f0*/) {
    Segment s;
    if (symbol == " ") {
        s.dur_hops = 8;
        s.amp = 0.5;
        s.mod_f = 1.0;
        s.mod_p = 2.3;
        s.tilt = 0.0;
    } else {
        const bool diacritic = vocab.diacritics.count(symbol) != 0;
        s.dur_hops = (diacritic ? 10 : 12) + (id % 5);
        s.amp = 1.0;
        s.mod_f = 1.5 + (id % 4);
        s.mod_p = 0.7 * (id % 9);
        s.tilt = 0.12 * ((id % 5) - 2);
    }
    s.dur_s = s.dur_hops * 256.0 / 22050.0;
    return s;
}

// Fixed per-speaker envelope: gentle rolloff with two formant-like bumps; the
// telephone variant rolls off steeply but smoothly outside 300-3400 Hz.
inline double speaker_envelope(double f, bool telephone) {
    const double f1 = telephone ? 600.0 : 750.0;
    const double f2 = telephone ? 1800.0 : 2100.0;
    double a = 1.0 / (1.0 + std::pow(f / 1200.0, 2.2));
    const double b1 = (f - f1) / 220.0, b2 = (f - f2) / 320.0;
    a *= 1.0 + 2.2 * std::exp(-b1 * b1) + 1.2 * std::exp(-b2 * b2);
    if (telephone)
        a /= (1.0 + std::pow(300.0 / std::max(f, 1.0), 8.0)) * (1.0 + std::pow(f / 3400.0, 8.0));
    return a;
}

// Smooth low-order token modulation of the envelope, in [0.78, 1.22] times a
// mild tilt: the differences between tokens live in the coarse envelope where
// both the alignment search and the cepstral metric can see them.
inline double token_modulation(double f, const Segment& s) {
    const double x = f / 8000.0;
    const double two_pi = 2.0 * 3.14159265358979323846;
    return (1.0 + 0.22 * std::sin(two_pi * s.mod_f * x + s.mod_p)) *
           (1.0 + s.tilt * (x - 0.5));
}

}  // namespace detail

// Renders the utterance as one phase-continuous hop-periodic multitone whose
// envelope steps at token boundaries (with a one-hop crossfade). sample_rate
// must be a multiple of 22050 so the hop grid stays exact.
inline audio::AudioBuffer render_utterance(const FixtureUtterance& fx, const text::Vocab& vocab,
                                           const text::NormRules& rules, int sample_rate = 44100) {
    if (sample_rate % 22050 != 0)
        throw Error("fixture: sample rate must be a multiple of 22050");
    const std::string norm = text::normalize(fx.text, rules, vocab);
    const text::TokenSeq seq = text::tokenize(norm, vocab);
    const bool telephone = fx.source == "ivr";

    std::vector<detail::Segment> segs;
    segs.reserve(seq.ids.size());
    for (int id : seq.ids)
        segs.push_back(detail::token_segment(id, vocab.symbols[static_cast<std::size_t>(id)],
                                             vocab, fx.base_f0));

    const double two_pi = 2.0 * 3.14159265358979323846;
    const int n_comp = detail::kGridMax - detail::kGridMin + 1;
    const std::size_t hop = static_cast<std::size_t>(sample_rate / 22050) * 256;

    std::vector<double> freq(static_cast<std::size_t>(n_comp));
    std::vector<double> phase(static_cast<std::size_t>(n_comp));
    std::vector<double> base(static_cast<std::size_t>(n_comp));
    for (int k = 0; k < n_comp; ++k) {
        const std::size_t kk = static_cast<std::size_t>(k);
        freq[kk] = (detail::kGridMin + k) * detail::kGridHz;
        phase[kk] = two_pi * 0.6180339887 * (detail::kGridMin + k);
        base[kk] = detail::speaker_envelope(freq[kk], telephone) /
                   std::sqrt(freq[kk] / detail::kGridHz);
    }

    auto segment_amps = [&](const detail::Segment& s) {
        std::vector<double> a(static_cast<std::size_t>(n_comp));
        for (int k = 0; k < n_comp; ++k) {
            const std::size_t kk = static_cast<std::size_t>(k);
            a[kk] = 0.25 * s.amp * base[kk] * detail::token_modulation(freq[kk], s);
        }
        return a;
    };

    audio::AudioBuffer buf;
    buf.sample_rate = sample_rate;
    const std::size_t cross = 3 * hop;  // raised-cosine crossfade, low spectral splatter
    std::vector<double> prev = segment_amps(segs.front());
    for (std::size_t si = 0; si < segs.size(); ++si) {
        const std::vector<double> cur = segment_amps(segs[si]);
        const std::size_t n = static_cast<std::size_t>(segs[si].dur_hops) * hop;
        for (std::size_t i = 0; i < n; ++i) {
            const double mix =
                (si > 0 && i < cross)
                    ? 0.5 - 0.5 * std::cos(3.14159265358979323846 * static_cast<double>(i) /
                                           static_cast<double>(cross))
                    : 1.0;
            double v = 0.035;  // constant bias keeps the lowest analysis band lit
            for (int k = 0; k < n_comp; ++k) {
                const std::size_t kk = static_cast<std::size_t>(k);
                const double a = mix * cur[kk] + (1.0 - mix) * prev[kk];
                v += a * std::sin(phase[kk]);
                phase[kk] += two_pi * freq[kk] / sample_rate;
                if (phase[kk] > 64.0 * two_pi) phase[kk] -= 64.0 * two_pi;
            }
            buf.samples.push_back(v);
        }
        prev = cur;
    }

    const double gain = std::pow(10.0, fx.gain_db / 20.0);
    double peak = 0.0;
    for (auto& v : buf.samples) {
        v *= gain;
        peak = std::max(peak, std::abs(v));
    }
    if (peak > 0.97)
        for (auto& v : buf.samples) v *= 0.97 / peak;
    return buf;
}

// Writes audio/<id>.wav plus manifest.tsv into dir.
inline void write_corpus(const std::filesystem::path& dir, const text::Vocab& vocab,
                         const text::NormRules& rules, int sample_rate = 44100) {
    std::filesystem::create_directories(dir / "audio");
    std::string manifest = "id\taudio_path\ttext\tspeaker\tsource\tsplit\n";
    for (const auto& fx : corpus()) {
        const audio::AudioBuffer buf = render_utterance(fx, vocab, rules, sample_rate);
        const std::string rel = "audio/" + fx.id + ".wav";
        audio::write_wav(dir / rel, buf);
        manifest += fx.id + "\t" + rel + "\t" + fx.text + "\t" + fx.speaker + "\t" + fx.source +
                    "\t" + fx.split + "\n";
    }
    write_text_file(dir / "manifest.tsv", manifest);
}

}  // namespace koshur::fixture
