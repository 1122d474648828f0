#pragma once
// Objective evaluation: DTW-aligned mel-cepstral distortion, word error rate,
// and relative WER under with/without-diacritics conditions.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/common.hpp"
#include "koshur/dsp.hpp"
#include "koshur/manifest.hpp"
#include "koshur/mat.hpp"
#include "koshur/melfile.hpp"
#include "koshur/text.hpp"

namespace koshur::eval {

struct EmptyInput : Error {
    using Error::Error;
};
struct DimensionMismatch : Error {
    using Error::Error;
};
struct OrderTooLarge : Error {
    using Error::Error;
};
struct IdMismatch : Error {
    using Error::Error;
};

// Distortion scale: 10·sqrt(2)/ln(10) ≈ 6.1418, the standard conversion from
// cepstral Euclidean distance to dB.
inline const double kMcdScale = 10.0 * std::sqrt(2.0) / std::log(10.0);

// Frames × D matrix of mel-cepstral coefficients, 0th coefficient excluded.
using McepSeq = Mat;

// Orthonormal DCT-II of each raw log-mel frame, keeping coefficients 1..order.
inline McepSeq mcep(const dsp::MelSpectrogram& mel, int order = 13) {
    if (mel.normalized) throw Error("mcep requires denormalized (raw) log-mel input");
    const int n = static_cast<int>(mel.data.cols());
    if (order < 1) throw OrderTooLarge("mcep order must be >= 1");
    if (order >= n) throw OrderTooLarge("mcep order " + std::to_string(order) + " must be < n_mels " +
                                        std::to_string(n));
    // basis(k, j) for k = 1..order: sqrt(2/N)·cos(pi·(2j+1)·k / (2N))
    Mat basis(order, n);
    const double scale = std::sqrt(2.0 / n);
    for (int k = 1; k <= order; ++k)
        for (int j = 0; j < n; ++j)
            basis(k - 1, j) = scale * std::cos(dsp::kPi * (2.0 * j + 1.0) * k / (2.0 * n));
    McepSeq out(mel.data.rows(), order);
    for (std::size_t i = 0; i < mel.data.rows(); ++i)
        for (int k = 0; k < order; ++k) {
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += basis(k, j) * mel.data(i, j);
            out(i, k) = acc;
        }
    return out;
}

struct DtwResult {
    std::vector<std::pair<int, int>> path;  // (i, j), starts (0,0), ends (N-1, M-1)
    double total_cost = 0.0;                // sum of frame distances over the path
};

namespace detail {

inline double frame_distance(const Mat& a, std::size_t i, const Mat& b, std::size_t j) {
    double acc = 0.0;
    for (std::size_t k = 0; k < a.cols(); ++k) {
        double d = a(i, k) - b(j, k);
        acc += d * d;
    }
    return std::sqrt(acc);
}

}  // namespace detail

// Minimum-total-cost monotone alignment with steps {(1,1),(0,1),(1,0)} and
// deterministic tie-breaking: diagonal, then (0,1), then (1,0).
inline DtwResult dtw(const McepSeq& a, const McepSeq& b) {
    if (a.rows() == 0 || b.rows() == 0) throw EmptyInput("dtw requires non-empty sequences");
    if (a.cols() != b.cols())
        throw DimensionMismatch("dtw dimension mismatch: " + std::to_string(a.cols()) + " vs " +
                                std::to_string(b.cols()));
    const std::size_t n = a.rows(), m = b.rows();
    Mat d(n, m);
    std::vector<std::uint8_t> step(n * m);  // 0 diag, 1 left (0,1), 2 up (1,0)
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double c = detail::frame_distance(a, i, b, j);
            if (i == 0 && j == 0) {
                d(i, j) = c;
                continue;
            }
            double best = std::numeric_limits<double>::infinity();
            std::uint8_t dir = 0;
            if (i > 0 && j > 0) {
                best = d(i - 1, j - 1);
                dir = 0;
            }
            if (j > 0 && d(i, j - 1) < best) {
                best = d(i, j - 1);
                dir = 1;
            }
            if (i > 0 && d(i - 1, j) < best) {
                best = d(i - 1, j);
                dir = 2;
            }
            d(i, j) = c + best;
            step[i * m + j] = dir;
        }
    DtwResult r;
    r.total_cost = d(n - 1, m - 1);
    std::size_t i = n - 1, j = m - 1;
    r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
    while (i > 0 || j > 0) {
        std::uint8_t dir = step[i * m + j];
        if (i == 0) dir = 1;
        if (j == 0) dir = 2;
        if (dir == 0) {
            --i;
            --j;
        } else if (dir == 1) {
            --j;
        } else {
            --i;
        }
        r.path.emplace_back(static_cast<int>(i), static_cast<int>(j));
    }
    std::reverse(r.path.begin(), r.path.end());
    return r;
}

// Mel-cepstral distortion in dB: scaled mean frame distance along the optimal
// DTW path.
inline double mcd(const McepSeq& ref, const McepSeq& syn) {
    if (ref.cols() != syn.cols())
        throw DimensionMismatch("mcd dimension mismatch: " + std::to_string(ref.cols()) + " vs " +
                                std::to_string(syn.cols()));
    DtwResult r = dtw(ref, syn);
    return kMcdScale * r.total_cost / static_cast<double>(r.path.size());
}

// ---------------------------------------------------------------------------
// Word error rate

inline std::vector<std::string> split_words(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v') {
            if (!cur.empty()) out.push_back(std::move(cur));
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

struct WerResult {
    int edits = 0;
    int n_ref_words = 0;
    double rate = 0.0;
};

inline int levenshtein(const std::vector<std::string>& ref, const std::vector<std::string>& hyp) {
    const std::size_t n = ref.size(), m = hyp.size();
    std::vector<int> prev(m + 1), cur(m + 1);
    for (std::size_t j = 0; j <= m; ++j) prev[j] = static_cast<int>(j);
    for (std::size_t i = 1; i <= n; ++i) {
        cur[0] = static_cast<int>(i);
        for (std::size_t j = 1; j <= m; ++j) {
            int sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
            cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
        }
        std::swap(prev, cur);
    }
    return prev[m];
}

// Whitespace-tokenized word error rate. An empty reference against a nonempty
// hypothesis counts every hypothesis word as an insertion and reports
// rate = n_hyp_words.
inline WerResult wer(const std::string& ref_text, const std::string& hyp_text) {
    std::vector<std::string> ref = split_words(ref_text);
    std::vector<std::string> hyp = split_words(hyp_text);
    WerResult r;
    r.n_ref_words = static_cast<int>(ref.size());
    r.edits = levenshtein(ref, hyp);
    if (ref.empty())
        r.rate = static_cast<double>(hyp.size());
    else
        r.rate = static_cast<double>(r.edits) / static_cast<double>(ref.size());
    return r;
}

struct CorpusWer {
    long long edits = 0;
    long long ref_words = 0;
    double rate = 0.0;  // edits / ref_words
};

// Corpus-level WER: total edits over total reference words across pairs.
inline CorpusWer corpus_wer(const std::vector<std::pair<std::string, std::string>>& ref_hyp_pairs) {
    CorpusWer c;
    for (const auto& [ref, hyp] : ref_hyp_pairs) {
        WerResult r = wer(ref, hyp);
        c.edits += r.edits;
        c.ref_words += r.n_ref_words;
    }
    if (c.ref_words > 0)
        c.rate = static_cast<double>(c.edits) / static_cast<double>(c.ref_words);
    else
        c.rate = static_cast<double>(c.edits);
    return c;
}

// ---------------------------------------------------------------------------
// Relative WER

enum class RwerMode { Transcript, Ratio };

// Relative WER in percent. `transcript` mode scores synthesized-speech
// transcripts against ground-truth-speech transcripts as a corpus WER × 100.
// `ratio` mode compares corpus WERs of both transcript sets against the
// reference texts: 100·(WER_tts − WER_gt)/WER_gt.
inline double rwer(const std::map<std::string, std::string>& tts_transcripts,
                   const std::map<std::string, std::string>& gt_transcripts,
                   const std::map<std::string, std::string>& ref_texts, RwerMode mode = RwerMode::Transcript) {
    if (tts_transcripts.size() != gt_transcripts.size() || tts_transcripts.size() != ref_texts.size())
        throw IdMismatch("rwer inputs cover different utterance sets");
    for (const auto& [id, _] : tts_transcripts)
        if (!gt_transcripts.count(id) || !ref_texts.count(id)) throw IdMismatch("rwer id not in all inputs: " + id);
    if (mode == RwerMode::Transcript) {
        std::vector<std::pair<std::string, std::string>> pairs;
        for (const auto& [id, gt] : gt_transcripts) pairs.emplace_back(gt, tts_transcripts.at(id));
        return 100.0 * corpus_wer(pairs).rate;
    }
    std::vector<std::pair<std::string, std::string>> tts_pairs, gt_pairs;
    for (const auto& [id, ref] : ref_texts) {
        tts_pairs.emplace_back(ref, tts_transcripts.at(id));
        gt_pairs.emplace_back(ref, gt_transcripts.at(id));
    }
    double wt = corpus_wer(tts_pairs).rate;
    double wg = corpus_wer(gt_pairs).rate;
    if (wg == 0.0) return wt == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    return 100.0 * (wt - wg) / wg;
}

// ---------------------------------------------------------------------------
// Corpus evaluation

inline const char* kCondWith = "with_diacritics";
inline const char* kCondWithout = "no_diacritics";

struct UttRecord {
    std::string id;
    std::string condition;
    double mcd = std::numeric_limits<double>::quiet_NaN();  // NaN in no-diacritics rows
    int wer_edits = 0;
    int wer_ref_words = 0;
    double wer_rate = 0.0;
    int rw_edits = 0;      // transcript-vs-transcript edit count (rWER numerator share)
    int rw_ref_words = 0;  // ground-truth transcript word count
};

struct ConditionAggregate {
    std::string condition;
    double mean_mcd = std::numeric_limits<double>::quiet_NaN();
    double corpus_wer = 0.0;
    double rwer_transcript = 0.0;
    double rwer_ratio = 0.0;
};

struct EvalReport {
    std::vector<UttRecord> utterances;        // ordered by id, with-diacritics rows first
    std::vector<ConditionAggregate> aggregates;  // [with_diacritics, no_diacritics]
    std::vector<std::string> missing;         // "id: reason" per skipped utterance
};

struct EvalPaths {
    std::string syn_mel_dir;  // <id>.mel synthesized spectrograms
    std::string ref_wav_dir;  // <id>.wav reference recordings (empty: use manifest audio_path)
};

namespace detail {

inline McepSeq mcep_from_audio(const std::string& wav_path, const dsp::StftParams& params, int order) {
    audio::AudioBuffer buf = audio::read_wav(wav_path);
    if (buf.sample_rate != params.sample_rate) buf = audio::resample(buf, params.sample_rate);
    dsp::MelSpectrogram mel = dsp::mel_spectrogram(buf, params, dsp::NormStats{}, false);
    return mcep(mel, order);
}

inline McepSeq mcep_from_melfile(const std::string& path, int order) {
    dsp::MelSpectrogram mel = melfile::read_mel(path);
    if (mel.normalized) dsp::denormalize_mel(mel);
    return mcep(mel, order);
}

}  // namespace detail

// Evaluate synthesized mels against reference recordings and transcripts.
// Missing or unreadable artifacts are reported per id and skipped; the report
// covers the remainder. Transcript maps may cover a superset of the entries.
inline EvalReport evaluate_corpus(const std::vector<manifest::Entry>& entries, const EvalPaths& paths,
                                  const std::map<std::string, std::string>& tts_transcripts,
                                  const std::map<std::string, std::string>& gt_transcripts,
                                  const text::Vocab& vocab, const dsp::StftParams& params = dsp::StftParams{},
                                  int mcep_order = 13) {
    std::vector<manifest::Entry> sorted = entries;
    std::sort(sorted.begin(), sorted.end(),
              [](const manifest::Entry& a, const manifest::Entry& b) { return a.id < b.id; });

    EvalReport report;
    struct Scored {
        const manifest::Entry* e;
        double mcd;
        std::string tts;
        std::string gt;
    };
    std::vector<Scored> scored;
    for (const manifest::Entry& e : sorted) {
        auto tts_it = tts_transcripts.find(e.id);
        auto gt_it = gt_transcripts.find(e.id);
        if (tts_it == tts_transcripts.end()) {
            report.missing.push_back(e.id + ": no synthesized-speech transcript");
            continue;
        }
        if (gt_it == gt_transcripts.end()) {
            report.missing.push_back(e.id + ": no ground-truth transcript");
            continue;
        }
        std::string mel_path = (std::filesystem::path(paths.syn_mel_dir) / (e.id + ".mel")).string();
        std::string wav_path = paths.ref_wav_dir.empty()
                                   ? e.audio_path
                                   : (std::filesystem::path(paths.ref_wav_dir) / (e.id + ".wav")).string();
        double utt_mcd;
        try {
            McepSeq syn = detail::mcep_from_melfile(mel_path, mcep_order);
            McepSeq ref = detail::mcep_from_audio(wav_path, params, mcep_order);
            utt_mcd = mcd(ref, syn);
        } catch (const Error& err) {
            report.missing.push_back(e.id + ": " + err.what());
            continue;
        }
        scored.push_back({&e, utt_mcd, tts_it->second, gt_it->second});
    }

    for (int cond = 0; cond < 2; ++cond) {
        const bool strip = cond == 1;
        const char* cond_name = strip ? kCondWithout : kCondWith;
        double mcd_sum = 0.0;
        long long wer_edits = 0, wer_ref = 0, rw_edits = 0, rw_ref = 0;
        std::map<std::string, std::string> tts_c, gt_c, ref_c;
        for (const Scored& s : scored) {
            std::string ref_text = strip ? text::strip_diacritics(s.e->text, vocab) : s.e->text;
            std::string tts_text = strip ? text::strip_diacritics(s.tts, vocab) : s.tts;
            std::string gt_text = strip ? text::strip_diacritics(s.gt, vocab) : s.gt;
            UttRecord rec;
            rec.id = s.e->id;
            rec.condition = cond_name;
            if (!strip) rec.mcd = s.mcd;
            WerResult w = wer(ref_text, tts_text);
            rec.wer_edits = w.edits;
            rec.wer_ref_words = w.n_ref_words;
            rec.wer_rate = w.rate;
            WerResult rw = wer(gt_text, tts_text);
            rec.rw_edits = rw.edits;
            rec.rw_ref_words = rw.n_ref_words;
            report.utterances.push_back(std::move(rec));
            mcd_sum += s.mcd;
            wer_edits += w.edits;
            wer_ref += w.n_ref_words;
            rw_edits += rw.edits;
            rw_ref += rw.n_ref_words;
            tts_c[s.e->id] = tts_text;
            gt_c[s.e->id] = gt_text;
            ref_c[s.e->id] = ref_text;
        }
        ConditionAggregate agg;
        agg.condition = cond_name;
        if (!strip && !scored.empty()) agg.mean_mcd = mcd_sum / static_cast<double>(scored.size());
        agg.corpus_wer = wer_ref > 0 ? static_cast<double>(wer_edits) / static_cast<double>(wer_ref)
                                     : static_cast<double>(wer_edits);
        agg.rwer_transcript = 100.0 * (rw_ref > 0 ? static_cast<double>(rw_edits) / static_cast<double>(rw_ref)
                                                  : static_cast<double>(rw_edits));
        agg.rwer_ratio = scored.empty() ? 0.0 : rwer(tts_c, gt_c, ref_c, RwerMode::Ratio);
        report.aggregates.push_back(std::move(agg));
    }
    // with-diacritics rows first, each block ordered by id
    std::stable_sort(report.utterances.begin(), report.utterances.end(),
                     [](const UttRecord& a, const UttRecord& b) { return a.condition > b.condition; });
    return report;
}

// Plain-text table: Model, Condition, MCD, rWER, WER.
inline std::string format_table(const EvalReport& report, const std::string& model_name = "koshur") {
    std::ostringstream os;
    os.setf(std::ios::fixed);
    os << "Model\tCondition\tMCD\trWER\tWER\n";
    for (const ConditionAggregate& a : report.aggregates) {
        os << model_name << '\t' << a.condition << '\t';
        if (std::isnan(a.mean_mcd))
            os << "--";
        else {
            os.precision(3);
            os << a.mean_mcd;
        }
        os.precision(4);
        os << '\t' << a.rwer_transcript << '\t' << a.corpus_wer << "\n";
    }
    return os.str();
}

}  // namespace koshur::eval
