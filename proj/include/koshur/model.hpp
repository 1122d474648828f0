#pragma once

// The trainable acoustic model: grapheme encoder with speaker conditioning,
// duration / pitch / energy heads, length regulation, and a conditional
// velocity-field decoder trained with flow matching. All gradients are
// hand-derived through the nn primitives; a finite-difference harness
// (grad_check) validates them end to end.

#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "koshur/audio.hpp"
#include "koshur/cfm.hpp"
#include "koshur/common.hpp"
#include "koshur/dsp.hpp"
#include "koshur/mas.hpp"
#include "koshur/mat.hpp"
#include "koshur/nn.hpp"
#include "koshur/text.hpp"

namespace koshur::model {

struct InvalidToken : Error {
    using Error::Error;
};
struct InvalidSpeaker : Error {
    using Error::Error;
};
struct DurationMismatch : Error {
    using Error::Error;
};
struct ShapeMismatch : Error {
    using Error::Error;
};
struct EmptyText : Error {
    using Error::Error;
};
struct NonFiniteLoss : Error {
    using Error::Error;
};
struct CorruptCheckpoint : Error {
    using Error::Error;
};
struct ConfigMismatch : Error {
    using Error::Error;
};

inline constexpr std::size_t kMelBins = 80;
inline constexpr std::size_t kTimeFeats = 8;
inline constexpr double kModelPi = 3.14159265358979323846;

struct LossWeights {
    double lambda_dur = 0.1;
    double lambda_pitch = 0.1;
    double lambda_energy = 0.1;
};

struct ModelConfig {
    std::size_t vocab_size = 272;
    std::size_t embed_dim = 48;
    std::size_t encoder_layers = 2;
    std::size_t encoder_hidden = 64;
    std::size_t decoder_hidden = 128;
    std::size_t predictor_hidden = 32;
    std::size_t n_speakers = 2;
    std::size_t speaker_embed_dim = 8;
    LossWeights loss_weights;
    double sigma_min = 1e-4;
    double mas_sigma = 1.0;
    // weight of the alignment term inside l_mel: mean squared error between
    // the duration-expanded per-grapheme means and the target mel. Without it
    // the means receive no training signal and the alignment search has
    // nothing meaningful to score, so joint alignment degenerates.
    double prior_weight = 1.0;
    // optimization steps during which alignment uses a uniform frame split
    // instead of the search; seeds the per-grapheme means near their true
    // segments so the joint search starts from a sane basin
    int align_warmup_steps = 0;
    // optional L1 penalty on a short Euler rollout, folded into l_mel when
    // enabled (smoothed near zero so the loss stays differentiable)
    double aux_l1_weight = 0.0;
    int aux_l1_steps = 4;
    // prosody target normalization, estimated from the training corpus
    double pitch_mean = 180.0;
    double pitch_std = 60.0;
    double energy_mean = 1.0;
    double energy_std = 1.0;
    std::vector<std::string> speaker_names;  // optional; size n_speakers when set

    void validate() const {
        if (vocab_size == 0 || embed_dim == 0 || encoder_layers == 0 || encoder_hidden == 0 ||
            decoder_hidden == 0 || predictor_hidden == 0 || n_speakers == 0 ||
            speaker_embed_dim == 0)
            throw Error("ModelConfig: all dimensions must be positive");
        if (loss_weights.lambda_dur < 0 || loss_weights.lambda_pitch < 0 ||
            loss_weights.lambda_energy < 0)
            throw Error("ModelConfig: loss weights must be non-negative");
        if (!(sigma_min >= 0.0 && sigma_min < 1.0)) throw Error("ModelConfig: sigma_min");
        if (!(mas_sigma > 0.0)) throw Error("ModelConfig: mas_sigma");
        if (prior_weight < 0.0) throw Error("ModelConfig: prior_weight must be non-negative");
        if (align_warmup_steps < 0) throw Error("ModelConfig: align_warmup_steps must be >= 0");
        if (aux_l1_weight < 0.0 || aux_l1_steps < 1)
            throw Error("ModelConfig: bad auxiliary L1 settings");
        if (!(pitch_std > 0.0) || !(energy_std > 0.0))
            throw Error("ModelConfig: prosody stds must be positive");
        if (!speaker_names.empty() && speaker_names.size() != n_speakers)
            throw Error("ModelConfig: speaker_names size mismatch");
    }

    std::string to_text() const {
        std::ostringstream os;
        os.precision(17);
        os << "vocab_size=" << vocab_size << "\nembed_dim=" << embed_dim
           << "\nencoder_layers=" << encoder_layers << "\nencoder_hidden=" << encoder_hidden
           << "\ndecoder_hidden=" << decoder_hidden << "\npredictor_hidden=" << predictor_hidden
           << "\nn_speakers=" << n_speakers << "\nspeaker_embed_dim=" << speaker_embed_dim
           << "\nlambda_dur=" << loss_weights.lambda_dur
           << "\nlambda_pitch=" << loss_weights.lambda_pitch
           << "\nlambda_energy=" << loss_weights.lambda_energy << "\nsigma_min=" << sigma_min
           << "\nmas_sigma=" << mas_sigma << "\nprior_weight=" << prior_weight
           << "\nalign_warmup_steps=" << align_warmup_steps
           << "\naux_l1_weight=" << aux_l1_weight
           << "\naux_l1_steps=" << aux_l1_steps << "\npitch_mean=" << pitch_mean
           << "\npitch_std=" << pitch_std << "\nenergy_mean=" << energy_mean
           << "\nenergy_std=" << energy_std;
        if (!speaker_names.empty()) {
            os << "\nspeakers=";
            for (std::size_t i = 0; i < speaker_names.size(); ++i) {
                if (i) os << ',';
                os << speaker_names[i];
            }
        }
        os << "\n";
        return os.str();
    }

    static ModelConfig from_text(const std::string& text) {
        ModelConfig cfg;
        std::istringstream is(text);
        std::string line;
        while (std::getline(is, line)) {
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) throw Error("ModelConfig: bad line: " + line);
            const std::string key = line.substr(0, eq), val = line.substr(eq + 1);
            if (key == "vocab_size") cfg.vocab_size = std::stoul(val);
            else if (key == "embed_dim") cfg.embed_dim = std::stoul(val);
            else if (key == "encoder_layers") cfg.encoder_layers = std::stoul(val);
            else if (key == "encoder_hidden") cfg.encoder_hidden = std::stoul(val);
            else if (key == "decoder_hidden") cfg.decoder_hidden = std::stoul(val);
            else if (key == "predictor_hidden") cfg.predictor_hidden = std::stoul(val);
            else if (key == "n_speakers") cfg.n_speakers = std::stoul(val);
            else if (key == "speaker_embed_dim") cfg.speaker_embed_dim = std::stoul(val);
            else if (key == "lambda_dur") cfg.loss_weights.lambda_dur = std::stod(val);
            else if (key == "lambda_pitch") cfg.loss_weights.lambda_pitch = std::stod(val);
            else if (key == "lambda_energy") cfg.loss_weights.lambda_energy = std::stod(val);
            else if (key == "sigma_min") cfg.sigma_min = std::stod(val);
            else if (key == "mas_sigma") cfg.mas_sigma = std::stod(val);
            else if (key == "prior_weight") cfg.prior_weight = std::stod(val);
            else if (key == "align_warmup_steps") cfg.align_warmup_steps = std::stoi(val);
            else if (key == "aux_l1_weight") cfg.aux_l1_weight = std::stod(val);
            else if (key == "aux_l1_steps") cfg.aux_l1_steps = std::stoi(val);
            else if (key == "pitch_mean") cfg.pitch_mean = std::stod(val);
            else if (key == "pitch_std") cfg.pitch_std = std::stod(val);
            else if (key == "energy_mean") cfg.energy_mean = std::stod(val);
            else if (key == "energy_std") cfg.energy_std = std::stod(val);
            else if (key == "speakers") {
                cfg.speaker_names.clear();
                std::string name;
                std::istringstream names(val);
                while (std::getline(names, name, ',')) cfg.speaker_names.push_back(name);
            } else {
                throw Error("ModelConfig: unknown key: " + key);
            }
        }
        cfg.validate();
        return cfg;
    }
};

struct TrainConfig {
    double learning_rate = 1e-4;
    double weight_decay = 0.0;
    double grad_clip_norm = 5.0;
    std::size_t batch_size = 4;
    std::size_t accumulation_steps = 1;
    std::uint64_t seed = 0;

    void validate() const {
        if (!(learning_rate > 0.0)) throw Error("TrainConfig: learning_rate must be positive");
        if (!(grad_clip_norm > 0.0)) throw Error("TrainConfig: grad_clip_norm must be positive");
        if (batch_size == 0 || accumulation_steps == 0)
            throw Error("TrainConfig: batch_size/accumulation_steps must be >= 1");
    }
};

struct LossBreakdown {
    double l_mel = 0.0;
    double l_dur = 0.0;
    double l_pitch = 0.0;
    double l_energy = 0.0;
    double l_total = 0.0;
};

// Per-grapheme prosody targets in raw units (Hz / mel-magnitude norm).
struct ProsodyTargets {
    std::vector<double> pitch;   // 0 for all-unvoiced graphemes
    std::vector<double> energy;
};

struct TrainUtterance {
    std::string id;
    std::vector<int> token_ids;
    int speaker_id = 0;
    Mat mel;  // normalized log-mel, frames x 80
    std::vector<double> frame_pitch;          // Hz, 0 where unvoiced
    std::vector<std::uint8_t> frame_voiced;
    std::vector<double> frame_energy;         // raw mel-magnitude norm
};
using TrainBatch = std::vector<TrainUtterance>;

// Per-utterance stochastic draw for one loss evaluation; holding it fixed
// makes the loss a pure function of the parameters.
struct FlowDraw {
    double t = 0.5;
    Mat x0;
};

struct TrainState {
    nn::AdamState adam;
    std::uint32_t accum_count = 0;
};

struct StepResult {
    LossBreakdown loss;
    double grad_norm = 0.0;   // pre-clip global norm (0 until an update fires)
    bool applied_update = false;
};

// ---- prosody extraction ------------------------------------------------------

// Frame energy from an unnormalized log-mel: L2 norm of the per-bin mel
// magnitudes, i.e. sqrt(sum of mel power).
inline std::vector<double> frame_energy(const Mat& logmel) {
    std::vector<double> e(logmel.rows());
    for (std::size_t j = 0; j < logmel.rows(); ++j) {
        double acc = 0.0;
        for (std::size_t d = 0; d < logmel.cols(); ++d) acc += std::exp(logmel(j, d));
        e[j] = std::sqrt(acc);
    }
    return e;
}

// Per-frame F0 by normalized autocorrelation over 50-500 Hz with parabolic
// peak refinement; frames use the same non-centered layout as the STFT.
inline std::vector<double> frame_pitch(const audio::AudioBuffer& buf,
                                       const dsp::StftParams& params,
                                       std::vector<std::uint8_t>* voiced_out = nullptr) {
    if (buf.sample_rate != params.sample_rate)
        throw dsp::SampleRateMismatch("frame_pitch: buffer rate " +
                                      std::to_string(buf.sample_rate));
    const std::size_t n_frames = dsp::frame_count(buf.samples.size(), params);
    const std::size_t win = params.win_length, hop = params.hop_length;
    const std::size_t lag_min = static_cast<std::size_t>(buf.sample_rate / 500.0);
    const std::size_t lag_max = static_cast<std::size_t>(buf.sample_rate / 50.0);
    std::vector<double> f0(n_frames, 0.0);
    std::vector<std::uint8_t> voiced(n_frames, 0);

    std::vector<double> x(win);
    for (std::size_t f = 0; f < n_frames; ++f) {
        double mean = 0.0;
        for (std::size_t i = 0; i < win; ++i) mean += buf.samples[f * hop + i];
        mean /= static_cast<double>(win);
        double rms = 0.0;
        for (std::size_t i = 0; i < win; ++i) {
            x[i] = buf.samples[f * hop + i] - mean;
            rms += x[i] * x[i];
        }
        rms = std::sqrt(rms / static_cast<double>(win));
        if (rms < 1e-4) continue;

        const std::size_t hi = std::min(lag_max, win - 1);
        std::vector<double> r(hi + 1, 0.0);
        double best = 0.0;
        for (std::size_t lag = lag_min; lag <= hi; ++lag) {
            double num = 0.0, e0 = 0.0, e1 = 0.0;
            for (std::size_t i = 0; i + lag < win; ++i) {
                num += x[i] * x[i + lag];
                e0 += x[i] * x[i];
                e1 += x[i + lag] * x[i + lag];
            }
            r[lag] = (e0 > 0.0 && e1 > 0.0) ? num / std::sqrt(e0 * e1) : 0.0;
            best = std::max(best, r[lag]);
        }
        if (best < 0.45) continue;

        // smallest lag near the global peak defeats period-multiple picks
        std::size_t lag_pick = 0;
        for (std::size_t lag = lag_min; lag <= hi; ++lag) {
            if (r[lag] >= 0.9 * best && (lag == lag_min || r[lag] >= r[lag - 1]) &&
                (lag == hi || r[lag] >= r[lag + 1])) {
                lag_pick = lag;
                break;
            }
        }
        if (lag_pick == 0) continue;

        double tau = static_cast<double>(lag_pick);
        if (lag_pick > lag_min && lag_pick < hi) {
            const double a = r[lag_pick - 1], b = r[lag_pick], c = r[lag_pick + 1];
            const double den = a - 2.0 * b + c;
            if (std::abs(den) > 1e-12) tau += 0.5 * (a - c) / den;
        }
        f0[f] = static_cast<double>(buf.sample_rate) / tau;
        voiced[f] = 1;
    }
    if (voiced_out) *voiced_out = std::move(voiced);
    return f0;
}

namespace detail {

// Voiced-frame pitch means and all-frame energy means per grapheme.
inline void grapheme_prosody(const std::vector<double>& pitch,
                             const std::vector<std::uint8_t>& voiced,
                             const std::vector<double>& energy,
                             const mas::DurationVector& durations,
                             std::vector<double>& g_pitch, std::vector<double>& g_energy,
                             std::vector<std::uint8_t>& g_voiced) {
    const std::size_t n = durations.size();
    g_pitch.assign(n, 0.0);
    g_energy.assign(n, 0.0);
    g_voiced.assign(n, 0);
    std::size_t j = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double psum = 0.0, esum = 0.0;
        std::size_t pv = 0;
        for (int k = 0; k < durations[i]; ++k, ++j) {
            if (voiced[j]) {
                psum += pitch[j];
                ++pv;
            }
            esum += energy[j];
        }
        if (pv > 0) {
            g_pitch[i] = psum / static_cast<double>(pv);
            g_voiced[i] = 1;
        }
        g_energy[i] = esum / static_cast<double>(durations[i]);
    }
}

}  // namespace detail

inline ProsodyTargets extract_prosody_targets(const audio::AudioBuffer& buf,
                                              const mas::DurationVector& durations,
                                              const dsp::StftParams& params) {
    const std::size_t n_frames = dsp::frame_count(buf.samples.size(), params);
    std::size_t total = 0;
    for (int d : durations) total += static_cast<std::size_t>(d);
    if (total != n_frames)
        throw DurationMismatch("extract_prosody_targets: durations cover " +
                               std::to_string(total) + " frames, audio has " +
                               std::to_string(n_frames));
    std::vector<std::uint8_t> voiced;
    const std::vector<double> pitch = frame_pitch(buf, params, &voiced);
    const dsp::MelSpectrogram mel = dsp::mel_spectrogram(buf, params, dsp::NormStats{}, false);
    const std::vector<double> energy = frame_energy(mel.data);

    ProsodyTargets t;
    std::vector<std::uint8_t> g_voiced;
    detail::grapheme_prosody(pitch, voiced, energy, durations, t.pitch, t.energy, g_voiced);
    return t;
}

// ---- the model ------------------------------------------------------------------

// Canonical digest over the symbol inventory; checkpoints embed it so a model
// is never resurrected against a different vocabulary.
inline std::array<std::uint8_t, 32> vocab_fingerprint(const text::Vocab& vocab) {
    Sha256 h;
    for (const auto& sym : vocab.symbols) {
        h.update(sym);
        if (vocab.diacritics.count(sym)) h.update("\tD", 2);
        h.update("\n", 1);
    }
    return h.digest();
}

inline std::array<double, kTimeFeats> time_features(double t) {
    return {t,
            1.0 - t,
            std::sin(2.0 * kModelPi * t),
            std::cos(2.0 * kModelPi * t),
            std::sin(4.0 * kModelPi * t),
            std::cos(4.0 * kModelPi * t),
            std::sin(8.0 * kModelPi * t),
            std::cos(8.0 * kModelPi * t)};
}

class Model {
public:
    Model(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
        cfg_.validate();
        build_params();
        Rng rng(init_seed ^ 0x6b6f73687572ULL);
        init_params(rng);
    }

    const ModelConfig& config() const { return cfg_; }
    nn::ParamStore& params() { return ps_; }
    const nn::ParamStore& params() const { return ps_; }

    // -- forward pieces (inference-facing) --

    struct EncodeOut {
        Mat states;  // T_text x embed_dim
        Mat mu;      // T_text x 80
    };

    EncodeOut encode(const std::vector<int>& token_ids, int speaker_id) const {
        EncoderCache cache;
        EncodeOut out;
        out.states = encoder_forward(token_ids, speaker_id, cache);
        out.mu = nn::linear_forward(ps_.get("mu.w"), ps_.get("mu.b"), out.states);
        return out;
    }

    std::vector<double> predict_durations(const Mat& states) const {
        return head_forward_vec("dur", states);
    }
    std::vector<double> predict_pitch(const Mat& states) const {
        return head_forward_vec("pitch", states);
    }
    std::vector<double> predict_energy(const Mat& states) const {
        return head_forward_vec("energy", states);
    }

    // max(1, round(exp(log_d)))
    static mas::DurationVector frames_from_log_durations(const std::vector<double>& log_d) {
        mas::DurationVector d(log_d.size());
        for (std::size_t i = 0; i < log_d.size(); ++i)
            d[i] = static_cast<int>(std::max<long>(1, std::lround(std::exp(log_d[i]))));
        return d;
    }

    static Mat length_regulate(const Mat& states, const mas::DurationVector& durations) {
        if (durations.size() != states.rows())
            throw DurationMismatch("length_regulate: " + std::to_string(durations.size()) +
                                   " durations for " + std::to_string(states.rows()) + " states");
        std::size_t total = 0;
        for (int d : durations) {
            if (d < 1) throw DurationMismatch("length_regulate: non-positive duration");
            total += static_cast<std::size_t>(d);
        }
        Mat out(total, states.cols());
        std::size_t j = 0;
        for (std::size_t i = 0; i < states.rows(); ++i)
            for (int k = 0; k < durations[i]; ++k, ++j)
                std::copy(states.row(i), states.row(i) + states.cols(), out.row(j));
        return out;
    }

    static Mat concat_cols(const Mat& a, const Mat& b) {
        if (a.rows() != b.rows()) throw ShapeMismatch("concat_cols: row mismatch");
        Mat out(a.rows(), a.cols() + b.cols());
        for (std::size_t j = 0; j < a.rows(); ++j) {
            std::copy(a.row(j), a.row(j) + a.cols(), out.row(j));
            std::copy(b.row(j), b.row(j) + b.cols(), out.row(j) + a.cols());
        }
        return out;
    }

    Mat decoder_vfield(const Mat& x_t, double t, const Mat& frame_states) const {
        DecoderCache cache;
        return decoder_forward(x_t, t, frame_states, cache);
    }

    // -- alignment --

    mas::DurationVector align_durations(const TrainUtterance& utt) const {
        const EncodeOut enc = encode(utt.token_ids, utt.speaker_id);
        const Mat L = mas::log_likelihood_matrix(enc.mu, utt.mel, cfg_.mas_sigma);
        return mas::durations_from_path(mas::mas_search(L));
    }

    // -- training loss --

    // Pure given fixed durations and flow draws. When accumulate_grads is set,
    // gradients of l_total are added into the parameter store.
    LossBreakdown total_loss(const TrainBatch& batch,
                             const std::vector<mas::DurationVector>& durations,
                             const std::vector<FlowDraw>& draws, bool accumulate_grads) {
        if (batch.empty()) throw Error("total_loss: empty batch");
        if (durations.size() != batch.size() || draws.size() != batch.size())
            throw ShapeMismatch("total_loss: batch/durations/draws size mismatch");

        const double n = static_cast<double>(batch.size());
        LossBreakdown br;
        std::vector<UttForward> fwds(batch.size());
        for (std::size_t u = 0; u < batch.size(); ++u) {
            utt_forward(batch[u], durations[u], draws[u], fwds[u]);
            br.l_mel += fwds[u].l_mel / n;
            br.l_dur += fwds[u].l_dur / n;
            br.l_pitch += fwds[u].l_pitch / n;
            br.l_energy += fwds[u].l_energy / n;
        }
        const LossWeights& w = cfg_.loss_weights;
        br.l_total = br.l_mel + w.lambda_dur * br.l_dur + w.lambda_pitch * br.l_pitch +
                     w.lambda_energy * br.l_energy;
        if (!std::isfinite(br.l_total))
            throw NonFiniteLoss("total_loss: non-finite loss");
        if (accumulate_grads)
            for (std::size_t u = 0; u < batch.size(); ++u)
                utt_backward(batch[u], fwds[u], 1.0 / n);
        return br;
    }

    // One optimization step: recompute MAS from the current encoder means,
    // draw flow points, accumulate gradients; every accumulation_steps calls
    // clip + Adam fire and the parameters move.
    StepResult train_step(const TrainBatch& batch, TrainState& state, const TrainConfig& cfg,
                          Rng& rng) {
        cfg.validate();
        if (state.adam.m.size() != ps_.param_count())
            throw Error("train_step: optimizer state size mismatch");

        const bool warmup =
            state.adam.step < static_cast<std::uint64_t>(cfg_.align_warmup_steps);
        std::vector<mas::DurationVector> durations(batch.size());
        std::vector<FlowDraw> draws(batch.size());
        for (std::size_t u = 0; u < batch.size(); ++u) {
            durations[u] = warmup ? uniform_durations(batch[u]) : align_durations(batch[u]);
            draws[u].t = rng.uniform();
            draws[u].x0 = Mat(batch[u].mel.rows(), kMelBins);
            for (auto& v : draws[u].x0.data()) v = rng.normal();
        }

        StepResult res;
        try {
            res.loss = total_loss(batch, durations, draws, true);
        } catch (const NonFiniteLoss&) {
            ps_.zero_grads();
            state.accum_count = 0;
            throw;
        }

        state.accum_count += 1;
        if (state.accum_count >= cfg.accumulation_steps) {
            if (cfg.accumulation_steps > 1) {
                const double inv = 1.0 / static_cast<double>(cfg.accumulation_steps);
                for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti)
                    for (double& g : ps_.tensor(ti).grad) g *= inv;
            }
            res.grad_norm = nn::clip_global_norm(ps_, cfg.grad_clip_norm);
            nn::AdamConfig ac;
            ac.lr = cfg.learning_rate;
            ac.weight_decay = cfg.weight_decay;
            nn::adam_update(ps_, state.adam, ac);
            ps_.zero_grads();
            state.accum_count = 0;
            res.applied_update = true;
        }
        return res;
    }

    // -- synthesis --

    dsp::MelSpectrogram synthesize(const std::string& raw_text, int speaker_id,
                                   const text::Vocab& vocab, const text::NormRules& rules,
                                   const cfm::SamplerConfig& sampler, std::uint64_t seed,
                                   const dsp::StftParams& stft_params = {}) const {
        const std::string norm = text::normalize(raw_text, rules, vocab);
        std::vector<int> ids = text::tokenize(norm, vocab).ids;
        if (ids.empty()) throw EmptyText("synthesize: text normalizes to nothing");
        ids.insert(ids.begin(), vocab.bos_id);
        ids.push_back(vocab.eos_id);

        const EncodeOut enc = encode(ids, speaker_id);
        const std::vector<double> log_d = predict_durations(enc.states);
        const mas::DurationVector durs = frames_from_log_durations(log_d);
        const std::vector<double> pn = predict_pitch(enc.states);
        const std::vector<double> en = predict_energy(enc.states);
        const Mat cond = concat_cols(condition_states(enc.states, pn, en), enc.mu);
        const Mat frame_states = length_regulate(cond, durs);

        Rng rng(seed ^ 0x73796e7468ULL);
        Mat x0(frame_states.rows(), kMelBins);
        for (auto& v : x0.data()) v = rng.normal();

        cfm::SamplerConfig sc = sampler;
        sc.validate();
        const Mat y = cfm::euler_sample(
            [&](const Mat& x, double t) { return decoder_vfield(x, t, frame_states); }, x0, sc);

        dsp::MelSpectrogram out;
        out.data = y;
        out.normalized = true;
        out.params = stft_params;
        dsp::denormalize_mel(out);
        return out;
    }

    // -- gradient verification --

    // Central finite differences through the f32 master values on a random
    // parameter subset; the relative-error floor keeps near-zero gradients
    // from amplifying benign truncation noise while still flagging any
    // absolute disagreement above ~1e-7.
    double grad_check(const TrainBatch& batch, double epsilon, std::size_t max_probes, Rng& rng,
                      const std::string& tensor_prefix = "") {
        std::vector<mas::DurationVector> durations(batch.size());
        std::vector<FlowDraw> draws(batch.size());
        for (std::size_t u = 0; u < batch.size(); ++u) {
            durations[u] = align_durations(batch[u]);
            draws[u].t = 0.25 + 0.5 * rng.uniform();
            draws[u].x0 = Mat(batch[u].mel.rows(), kMelBins);
            for (auto& v : draws[u].x0.data()) v = rng.normal();
        }

        ps_.zero_grads();
        total_loss(batch, durations, draws, true);
        std::vector<std::vector<double>> analytic(ps_.tensor_count());
        for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti)
            analytic[ti] = ps_.tensor(ti).grad;
        ps_.zero_grads();

        std::vector<std::pair<std::size_t, std::size_t>> pool;
        for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti) {
            if (!tensor_prefix.empty() &&
                ps_.tensor(ti).name.rfind(tensor_prefix, 0) != 0)
                continue;
            for (std::size_t i = 0; i < ps_.tensor(ti).size(); ++i) pool.emplace_back(ti, i);
        }
        if (pool.empty()) throw Error("grad_check: no parameters match prefix");
        for (std::size_t i = pool.size(); i > 1; --i)
            std::swap(pool[i - 1], pool[rng.below(static_cast<std::uint32_t>(i))]);
        if (pool.size() > max_probes) pool.resize(max_probes);

        double max_rel = 0.0;
        for (const auto& [ti, i] : pool) {
            nn::Tensor& t = ps_.tensor(ti);
            const float orig = t.value[i];
            t.value[i] = static_cast<float>(static_cast<double>(orig) + epsilon);
            const double hi = static_cast<double>(t.value[i]);
            const double lhi = total_loss(batch, durations, draws, false).l_total;
            t.value[i] = static_cast<float>(static_cast<double>(orig) - epsilon);
            const double lo = static_cast<double>(t.value[i]);
            const double llo = total_loss(batch, durations, draws, false).l_total;
            t.value[i] = orig;
            const double fd = (lhi - llo) / (hi - lo);
            const double g = analytic[ti][i];
            const double rel = std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-4});
            max_rel = std::max(max_rel, rel);
        }
        return max_rel;
    }

    // -- checkpointing --

    void save_checkpoint(const std::string& path, const TrainState* state, std::uint64_t step,
                         const std::array<std::uint8_t, 32>& vocab_hash) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw Error("save_checkpoint: cannot open " + path);
        os.write("BBCKPT1", 7);
        write_u32le(os, 1);
        const std::string cfg_text = cfg_.to_text();
        write_u32le(os, static_cast<std::uint32_t>(cfg_text.size()));
        os.write(cfg_text.data(), static_cast<std::streamsize>(cfg_text.size()));
        os.write(reinterpret_cast<const char*>(vocab_hash.data()), 32);

        write_u32le(os, static_cast<std::uint32_t>(ps_.tensor_count()));
        for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti) {
            const nn::Tensor& t = ps_.tensor(ti);
            write_u32le(os, static_cast<std::uint32_t>(t.name.size()));
            os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
            write_u32le(os, static_cast<std::uint32_t>(t.shape.size()));
            for (std::size_t d : t.shape) write_u32le(os, static_cast<std::uint32_t>(d));
        }
        for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti)
            for (float v : ps_.tensor(ti).value) write_f32le(os, v);

        write_u64le(os, step);
        os.put(state ? 1 : 0);
        if (state) {
            write_u64le(os, state->adam.step);
            write_u32le(os, state->accum_count);
            for (double m : state->adam.m) write_f64le(os, m);
            for (double v : state->adam.v) write_f64le(os, v);
        }
        if (!os) throw Error("save_checkpoint: write failed for " + path);
    }

    static Model load_checkpoint(const std::string& path,
                                 const std::array<std::uint8_t, 32>& expected_vocab_hash,
                                 TrainState* state_out = nullptr,
                                 std::uint64_t* step_out = nullptr) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw Error("load_checkpoint: cannot open " + path);
        const auto need = [&](bool ok) {
            if (!ok) throw CorruptCheckpoint("load_checkpoint: truncated file " + path);
        };
        char magic[7];
        need(read_exact(is, magic, 7));
        if (std::string(magic, 7) != "BBCKPT1")
            throw CorruptCheckpoint("load_checkpoint: bad magic in " + path);
        std::uint32_t version = 0;
        need(read_u32le(is, version));
        if (version != 1) throw CorruptCheckpoint("load_checkpoint: bad version");
        std::uint32_t cfg_len = 0;
        need(read_u32le(is, cfg_len));
        if (cfg_len > (1u << 20)) throw CorruptCheckpoint("load_checkpoint: config too big");
        std::string cfg_text(cfg_len, '\0');
        need(read_exact(is, cfg_text.data(), cfg_len));
        std::array<std::uint8_t, 32> hash{};
        need(read_exact(is, hash.data(), 32));
        if (hash != expected_vocab_hash)
            throw ConfigMismatch("load_checkpoint: vocabulary hash mismatch");

        ModelConfig cfg;
        try {
            cfg = ModelConfig::from_text(cfg_text);
        } catch (const std::exception& e) {
            throw CorruptCheckpoint(std::string("load_checkpoint: bad config: ") + e.what());
        }
        Model m(cfg, 0);

        std::uint32_t n_tensors = 0;
        need(read_u32le(is, n_tensors));
        if (n_tensors != m.ps_.tensor_count())
            throw ConfigMismatch("load_checkpoint: tensor count mismatch");
        for (std::uint32_t ti = 0; ti < n_tensors; ++ti) {
            std::uint32_t name_len = 0;
            need(read_u32le(is, name_len));
            if (name_len > 4096) throw CorruptCheckpoint("load_checkpoint: name too long");
            std::string name(name_len, '\0');
            need(read_exact(is, name.data(), name_len));
            const nn::Tensor& t = m.ps_.tensor(ti);
            if (name != t.name)
                throw ConfigMismatch("load_checkpoint: tensor " + std::to_string(ti) + " is " +
                                     name + ", expected " + t.name);
            std::uint32_t ndim = 0;
            need(read_u32le(is, ndim));
            if (ndim != t.shape.size())
                throw ConfigMismatch("load_checkpoint: rank mismatch for " + name);
            for (std::uint32_t d = 0; d < ndim; ++d) {
                std::uint32_t dim = 0;
                need(read_u32le(is, dim));
                if (dim != t.shape[d])
                    throw ConfigMismatch("load_checkpoint: shape mismatch for " + name);
            }
        }
        for (std::uint32_t ti = 0; ti < n_tensors; ++ti)
            for (auto& v : m.ps_.tensor(ti).value) need(read_f32le(is, v));

        std::uint64_t step = 0;
        need(read_u64le(is, step));
        if (step_out) *step_out = step;
        const int has_state = is.get();
        if (has_state == std::char_traits<char>::eof())
            throw CorruptCheckpoint("load_checkpoint: truncated file " + path);
        if (has_state == 1) {
            TrainState scratch;
            TrainState& st = state_out ? *state_out : scratch;
            st.adam = nn::AdamState::for_params(m.ps_);
            need(read_u64le(is, st.adam.step));
            need(read_u32le(is, st.accum_count));
            for (auto& v : st.adam.m) need(read_f64le(is, v));
            for (auto& v : st.adam.v) need(read_f64le(is, v));
        } else if (has_state != 0) {
            throw CorruptCheckpoint("load_checkpoint: bad optimizer flag");
        }
        return m;
    }

    // Prosody-conditioned states: states[i] + pitch[i]*w_cp + energy[i]*w_ce.
    Mat condition_states(const Mat& states, const std::vector<double>& pitch_n,
                         const std::vector<double>& energy_n) const {
        if (pitch_n.size() != states.rows() || energy_n.size() != states.rows())
            throw ShapeMismatch("condition_states: prosody length mismatch");
        const nn::Tensor& wp = ps_.get("cond.pitch");
        const nn::Tensor& we = ps_.get("cond.energy");
        Mat out = states;
        for (std::size_t i = 0; i < states.rows(); ++i) {
            double* row = out.row(i);
            for (std::size_t d = 0; d < states.cols(); ++d)
                row[d] += pitch_n[i] * wp.v(d) + energy_n[i] * we.v(d);
        }
        return out;
    }

private:
    ModelConfig cfg_;
    nn::ParamStore ps_;

    // -- construction --

    void build_params() {
        const std::size_t e = cfg_.embed_dim, h = cfg_.encoder_hidden,
                          p = cfg_.predictor_hidden, dh = cfg_.decoder_hidden,
                          es = cfg_.speaker_embed_dim;
        ps_.add("enc.embed", {cfg_.vocab_size, e});
        ps_.add("enc.spk", {cfg_.n_speakers, es});
        ps_.add("enc.spk_proj.w", {e, es});
        ps_.add("enc.spk_proj.b", {e});
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
            const std::string b = "enc.b" + std::to_string(l) + ".";
            ps_.add(b + "conv.w", {h, e, 3});
            ps_.add(b + "conv.b", {h});
            ps_.add(b + "cproj.w", {e, h});
            ps_.add(b + "cproj.b", {e});
            ps_.add(b + "attn.wq", {e, e});
            ps_.add(b + "attn.bq", {e});
            ps_.add(b + "attn.wk", {e, e});
            ps_.add(b + "attn.bk", {e});
            ps_.add(b + "attn.wv", {e, e});
            ps_.add(b + "attn.bv", {e});
            ps_.add(b + "attn.wo", {e, e});
            ps_.add(b + "attn.bo", {e});
        }
        ps_.add("mu.w", {kMelBins, e});
        ps_.add("mu.b", {kMelBins});
        for (const char* head : {"dur", "pitch", "energy"}) {
            const std::string hd(head);
            ps_.add(hd + ".conv.w", {p, e, 3});
            ps_.add(hd + ".conv.b", {p});
            ps_.add(hd + ".out.w", {1, p});
            ps_.add(hd + ".out.b", {1});
        }
        ps_.add("cond.pitch", {e});
        ps_.add("cond.energy", {e});
        ps_.add("dec.in.w", {dh, kMelBins + e + kMelBins + kTimeFeats});
        ps_.add("dec.in.b", {dh});
        ps_.add("dec.conv.w", {dh, dh, 3});
        ps_.add("dec.conv.b", {dh});
        ps_.add("dec.out.w", {kMelBins, dh});
        ps_.add("dec.out.b", {kMelBins});
        ps_.add("dec.skip.w", {kMelBins, kMelBins});
        ps_.add("dec.skip_mu.w", {kMelBins});  // per-bin gate on the mu slice
    }

    void init_params(Rng& rng) {
        for (std::size_t ti = 0; ti < ps_.tensor_count(); ++ti) {
            nn::Tensor& t = ps_.tensor(ti);
            if (t.name == "enc.embed") {
                nn::init_normal(t, rng, 0.3);
            } else if (t.name == "enc.spk") {
                nn::init_normal(t, rng, 0.1);
            } else if (t.name == "cond.pitch" || t.name == "cond.energy") {
                nn::init_normal(t, rng, 0.1);
            } else if (t.name == "dec.out.w" || t.name == "dec.out.b" ||
                       t.name == "dec.skip.w" || t.name == "dec.skip_mu.w") {
                // zero start: the decoder is the identity transport at init
            } else if (t.shape.size() == 3) {
                const double fan = static_cast<double>((t.shape[0] + t.shape[1]) * t.shape[2]);
                nn::init_uniform(t, rng, std::sqrt(6.0 / fan));
            } else if (t.shape.size() == 2) {
                nn::init_linear(t, rng);
            }
            // rank-1 bias tensors stay zero
        }
    }

    // -- forward/backward plumbing --

    struct BlockCache {
        Mat x_in;      // block input
        Mat conv_tanh; // tanh(conv(x_in))
        Mat x_mid;     // x_in + cproj(conv_tanh)
        nn::AttnCache attn;
    };

    struct EncoderCache {
        std::vector<int> ids;
        int speaker = 0;
        Mat spk_vec;   // 1 x speaker_embed_dim
        Mat x0;        // embed + speaker broadcast
        std::vector<BlockCache> blocks;
    };

    struct HeadCache {
        Mat conv_tanh;  // tanh(conv(states))
        std::vector<double> out;
    };

    struct DecoderCache {
        Mat x_t;
        Mat input;    // [x_t | frame_states | time feats]
        Mat h1;       // tanh(linear(input))
        Mat h2;       // tanh(conv(h1))
    };

    Mat encoder_forward(const std::vector<int>& token_ids, int speaker_id,
                        EncoderCache& cache) const {
        if (token_ids.empty()) throw EmptyText("encode: no tokens");
        for (int id : token_ids)
            if (id < 0 || static_cast<std::size_t>(id) >= cfg_.vocab_size)
                throw InvalidToken("encode: token id " + std::to_string(id) + " out of range");
        if (speaker_id < 0 || static_cast<std::size_t>(speaker_id) >= cfg_.n_speakers)
            throw InvalidSpeaker("encode: speaker id " + std::to_string(speaker_id));

        cache.ids = token_ids;
        cache.speaker = speaker_id;
        cache.spk_vec = nn::embed_forward(ps_.get("enc.spk"), {speaker_id});
        const Mat spk =
            nn::linear_forward(ps_.get("enc.spk_proj.w"), ps_.get("enc.spk_proj.b"),
                               cache.spk_vec);
        cache.x0 = nn::embed_forward(ps_.get("enc.embed"), token_ids);
        for (std::size_t t = 0; t < cache.x0.rows(); ++t)
            for (std::size_t d = 0; d < cache.x0.cols(); ++d) cache.x0(t, d) += spk(0, d);

        cache.blocks.resize(cfg_.encoder_layers);
        Mat x = cache.x0;
        for (std::size_t l = 0; l < cfg_.encoder_layers; ++l) {
            BlockCache& bc = cache.blocks[l];
            const std::string b = "enc.b" + std::to_string(l) + ".";
            bc.x_in = x;
            bc.conv_tanh = nn::tanh_forward(
                nn::conv1d_forward(ps_.get(b + "conv.w"), ps_.get(b + "conv.b"), bc.x_in));
            const Mat proj = nn::linear_forward(ps_.get(b + "cproj.w"), ps_.get(b + "cproj.b"),
                                                bc.conv_tanh);
            bc.x_mid = bc.x_in;
            for (std::size_t i = 0; i < bc.x_mid.data().size(); ++i)
                bc.x_mid.data()[i] += proj.data()[i];
            const Mat att = nn::attention_forward(attn_params(l), bc.x_mid, bc.attn);
            x = bc.x_mid;
            for (std::size_t i = 0; i < x.data().size(); ++i) x.data()[i] += att.data()[i];
        }
        return x;
    }

    // dstates -> parameter grads (and nothing to return: inputs are ids)
    void encoder_backward(const EncoderCache& cache, Mat dx) {
        for (std::size_t l = cfg_.encoder_layers; l > 0; --l) {
            const BlockCache& bc = cache.blocks[l - 1];
            const std::string b = "enc.b" + std::to_string(l - 1) + ".";
            const Mat datt = nn::attention_backward(attn_params(l - 1), bc.attn, dx);
            Mat dmid = dx;
            for (std::size_t i = 0; i < dmid.data().size(); ++i)
                dmid.data()[i] += datt.data()[i];
            const Mat dproj_in = nn::linear_backward(ps_.get(b + "cproj.w"),
                                                     ps_.get(b + "cproj.b"), bc.conv_tanh, dmid);
            const Mat dconv = nn::tanh_backward(bc.conv_tanh, dproj_in);
            const Mat dx_conv =
                nn::conv1d_backward(ps_.get(b + "conv.w"), ps_.get(b + "conv.b"), bc.x_in, dconv);
            dx = dmid;
            for (std::size_t i = 0; i < dx.data().size(); ++i) dx.data()[i] += dx_conv.data()[i];
        }
        // speaker broadcast: sum over positions
        Mat dspk(1, cfg_.embed_dim);
        for (std::size_t t = 0; t < dx.rows(); ++t)
            for (std::size_t d = 0; d < dx.cols(); ++d) dspk(0, d) += dx(t, d);
        const Mat dspk_vec = nn::linear_backward(ps_.get("enc.spk_proj.w"),
                                                 ps_.get("enc.spk_proj.b"), cache.spk_vec, dspk);
        nn::embed_backward(ps_.get("enc.spk"), {cache.speaker}, dspk_vec);
        nn::embed_backward(ps_.get("enc.embed"), cache.ids, dx);
    }

    nn::AttnParams attn_params(std::size_t l) const {
        const std::string b = "enc.b" + std::to_string(l) + ".attn.";
        auto& ps = const_cast<nn::ParamStore&>(ps_);
        return {&ps.get(b + "wq"), &ps.get(b + "bq"), &ps.get(b + "wk"), &ps.get(b + "bk"),
                &ps.get(b + "wv"), &ps.get(b + "bv"), &ps.get(b + "wo"), &ps.get(b + "bo")};
    }

    std::vector<double> head_forward(const std::string& head, const Mat& states,
                                     HeadCache& cache) const {
        cache.conv_tanh = nn::tanh_forward(
            nn::conv1d_forward(ps_.get(head + ".conv.w"), ps_.get(head + ".conv.b"), states));
        const Mat out =
            nn::linear_forward(ps_.get(head + ".out.w"), ps_.get(head + ".out.b"), cache.conv_tanh);
        cache.out.resize(out.rows());
        for (std::size_t i = 0; i < out.rows(); ++i) cache.out[i] = out(i, 0);
        return cache.out;
    }

    std::vector<double> head_forward_vec(const std::string& head, const Mat& states) const {
        HeadCache cache;
        return head_forward(head, states, cache);
    }

    // dout (per position) -> accumulates head grads, returns dstates
    Mat head_backward(const std::string& head, const Mat& states, const HeadCache& cache,
                      const std::vector<double>& dout) {
        Mat dy(dout.size(), 1);
        for (std::size_t i = 0; i < dout.size(); ++i) dy(i, 0) = dout[i];
        const Mat dh = nn::linear_backward(ps_.get(head + ".out.w"), ps_.get(head + ".out.b"),
                                           cache.conv_tanh, dy);
        const Mat dconv = nn::tanh_backward(cache.conv_tanh, dh);
        return nn::conv1d_backward(ps_.get(head + ".conv.w"), ps_.get(head + ".conv.b"), states,
                                   dconv);
    }

    // frame conditioning = [state | mu] per frame: the prosody-shifted encoder
    // state plus the grapheme's mel-space mean, both length-regulated
    std::size_t cond_dim() const { return cfg_.embed_dim + kMelBins; }

    Mat decoder_forward(const Mat& x_t, double t, const Mat& frame_states,
                        DecoderCache& cache) const {
        if (x_t.cols() != kMelBins) throw ShapeMismatch("decoder: x_t must have 80 columns");
        if (frame_states.rows() != x_t.rows() || frame_states.cols() != cond_dim())
            throw ShapeMismatch("decoder: frame states " + std::to_string(frame_states.rows()) +
                                "x" + std::to_string(frame_states.cols()));
        if (!(t >= 0.0 && t <= 1.0)) throw Error("decoder: t outside [0,1]");

        const auto tf = time_features(t);
        cache.x_t = x_t;
        cache.input = Mat(x_t.rows(), kMelBins + cond_dim() + kTimeFeats);
        for (std::size_t j = 0; j < x_t.rows(); ++j) {
            double* row = cache.input.row(j);
            std::copy(x_t.row(j), x_t.row(j) + kMelBins, row);
            std::copy(frame_states.row(j), frame_states.row(j) + cond_dim(), row + kMelBins);
            std::copy(tf.begin(), tf.end(), row + kMelBins + cond_dim());
        }
        cache.h1 = nn::tanh_forward(
            nn::linear_forward(ps_.get("dec.in.w"), ps_.get("dec.in.b"), cache.input));
        cache.h2 = nn::tanh_forward(
            nn::conv1d_forward(ps_.get("dec.conv.w"), ps_.get("dec.conv.b"), cache.h1));
        Mat v = nn::linear_forward(ps_.get("dec.out.w"), ps_.get("dec.out.b"), cache.h2);
        const nn::Tensor& skip = ps_.get("dec.skip.w");
        const nn::Tensor& skip_mu = ps_.get("dec.skip_mu.w");
        for (std::size_t j = 0; j < v.rows(); ++j) {
            const double* xr = x_t.row(j);
            const double* fr = frame_states.row(j) + cfg_.embed_dim;  // mu slice
            double* vr = v.row(j);
            for (std::size_t o = 0; o < kMelBins; ++o) {
                const float* srow = skip.value.data() + o * kMelBins;
                double acc = 0.0;
                for (std::size_t i = 0; i < kMelBins; ++i)
                    acc += xr[i] * static_cast<double>(srow[i]);
                vr[o] += acc + skip_mu.v(o) * fr[o];
            }
        }
        return v;
    }

    // dv -> accumulates decoder grads, returns d(frame_states); when dx_out is
    // given it also receives dL/d(x_t) (skip path plus input columns)
    Mat decoder_backward(const DecoderCache& cache, const Mat& dv, Mat* dx_out = nullptr) {
        nn::Tensor& skip = ps_.get("dec.skip.w");
        nn::Tensor& skip_mu = ps_.get("dec.skip_mu.w");
        const std::size_t mu_off = kMelBins + cfg_.embed_dim;
        for (std::size_t j = 0; j < dv.rows(); ++j) {
            const double* xr = cache.x_t.row(j);
            const double* in = cache.input.row(j);
            const double* dvr = dv.row(j);
            for (std::size_t o = 0; o < kMelBins; ++o) {
                double* grow = skip.grad.data() + o * kMelBins;
                const double g = dvr[o];
                for (std::size_t i = 0; i < kMelBins; ++i) grow[i] += g * xr[i];
                skip_mu.grad[o] += g * in[mu_off + o];
            }
        }
        const Mat dh2 =
            nn::linear_backward(ps_.get("dec.out.w"), ps_.get("dec.out.b"), cache.h2, dv);
        const Mat dc2 = nn::tanh_backward(cache.h2, dh2);
        const Mat dh1 =
            nn::conv1d_backward(ps_.get("dec.conv.w"), ps_.get("dec.conv.b"), cache.h1, dc2);
        const Mat dl1 = nn::tanh_backward(cache.h1, dh1);
        const Mat din =
            nn::linear_backward(ps_.get("dec.in.w"), ps_.get("dec.in.b"), cache.input, dl1);
        Mat dfs(dv.rows(), cond_dim());
        for (std::size_t j = 0; j < dv.rows(); ++j) {
            std::copy(din.row(j) + kMelBins, din.row(j) + kMelBins + cond_dim(), dfs.row(j));
            const double* dvr = dv.row(j);
            double* dr = dfs.row(j) + cfg_.embed_dim;
            for (std::size_t o = 0; o < kMelBins; ++o) dr[o] += skip_mu.v(o) * dvr[o];
        }
        if (dx_out) {
            *dx_out = Mat(dv.rows(), kMelBins);
            for (std::size_t j = 0; j < dv.rows(); ++j) {
                double* out = dx_out->row(j);
                std::copy(din.row(j), din.row(j) + kMelBins, out);
                const double* dvr = dv.row(j);
                for (std::size_t i = 0; i < kMelBins; ++i) {
                    double acc = 0.0;
                    for (std::size_t o = 0; o < kMelBins; ++o)
                        acc += dvr[o] * static_cast<double>(skip.value[o * kMelBins + i]);
                    out[i] += acc;
                }
            }
        }
        return dfs;
    }

    struct UttForward {
        EncoderCache enc;
        Mat states;
        Mat mu;  // per-grapheme mel means, also part of the decoder conditioning
        mas::DurationVector durations;
        HeadCache dur_head, pitch_head, energy_head;
        std::vector<double> dur_target;               // log MAS durations
        std::vector<double> pitch_target, energy_target;  // normalized
        std::vector<std::uint8_t> pitch_mask;
        std::vector<double> cond_pitch, cond_energy;  // teacher-forced conditioning
        Mat cond_states;
        Mat frame_states;
        cfm::FlowSample flow;
        DecoderCache dec;
        Mat velocity;
        std::vector<DecoderCache> aux_caches;  // Euler rollout, when enabled
        std::vector<Mat> aux_x;
        double l_mel = 0.0, l_dur = 0.0, l_pitch = 0.0, l_energy = 0.0;
    };

    static constexpr double kAuxL1Smooth = 1e-2;  // Charbonnier knee

    void utt_forward(const TrainUtterance& utt, const mas::DurationVector& durations,
                     const FlowDraw& draw, UttForward& f) {
        const std::size_t t_mel = utt.mel.rows();
        if (utt.mel.cols() != kMelBins) throw ShapeMismatch("train: mel must have 80 columns");
        if (utt.frame_pitch.size() != t_mel || utt.frame_voiced.size() != t_mel ||
            utt.frame_energy.size() != t_mel)
            throw ShapeMismatch("train: frame prosody length mismatch for " + utt.id);
        std::size_t total = 0;
        for (int d : durations) total += static_cast<std::size_t>(d);
        if (durations.size() != utt.token_ids.size() || total != t_mel)
            throw DurationMismatch("train: durations inconsistent for " + utt.id);

        f.durations = durations;
        f.states = encoder_forward(utt.token_ids, utt.speaker_id, f.enc);

        // duration head, log-domain target
        head_forward("dur", f.states, f.dur_head);
        f.dur_target.resize(durations.size());
        for (std::size_t i = 0; i < durations.size(); ++i)
            f.dur_target[i] = std::log(static_cast<double>(durations[i]));
        double dur_acc = 0.0;
        for (std::size_t i = 0; i < durations.size(); ++i) {
            const double r = f.dur_head.out[i] - f.dur_target[i];
            dur_acc += r * r;
        }
        f.l_dur = dur_acc / static_cast<double>(durations.size());

        // prosody targets per grapheme, normalized
        std::vector<double> g_pitch, g_energy;
        std::vector<std::uint8_t> g_voiced;
        detail::grapheme_prosody(utt.frame_pitch, utt.frame_voiced, utt.frame_energy, durations,
                                 g_pitch, g_energy, g_voiced);
        const std::size_t n_text = durations.size();
        f.pitch_target.assign(n_text, 0.0);
        f.energy_target.assign(n_text, 0.0);
        f.pitch_mask = g_voiced;
        f.cond_pitch.assign(n_text, 0.0);
        f.cond_energy.assign(n_text, 0.0);
        for (std::size_t i = 0; i < n_text; ++i) {
            if (g_voiced[i]) {
                f.pitch_target[i] = (g_pitch[i] - cfg_.pitch_mean) / cfg_.pitch_std;
                f.cond_pitch[i] = f.pitch_target[i];
            }
            f.energy_target[i] = (g_energy[i] - cfg_.energy_mean) / cfg_.energy_std;
            f.cond_energy[i] = f.energy_target[i];
        }

        head_forward("pitch", f.states, f.pitch_head);
        std::size_t voiced_n = 0;
        double pitch_acc = 0.0;
        for (std::size_t i = 0; i < n_text; ++i) {
            if (!f.pitch_mask[i]) continue;
            ++voiced_n;
            const double r = f.pitch_head.out[i] - f.pitch_target[i];
            pitch_acc += r * r;
        }
        f.l_pitch = voiced_n ? pitch_acc / static_cast<double>(voiced_n) : 0.0;

        head_forward("energy", f.states, f.energy_head);
        double energy_acc = 0.0;
        for (std::size_t i = 0; i < n_text; ++i) {
            const double r = f.energy_head.out[i] - f.energy_target[i];
            energy_acc += r * r;
        }
        f.l_energy = energy_acc / static_cast<double>(n_text);

        // decoder on the teacher-forced conditioning
        f.mu = nn::linear_forward(ps_.get("mu.w"), ps_.get("mu.b"), f.states);
        f.cond_states = condition_states(f.states, f.cond_pitch, f.cond_energy);
        f.frame_states = length_regulate(concat_cols(f.cond_states, f.mu), durations);
        f.flow = cfm::sample_flow_point(draw.x0, utt.mel, draw.t, cfg_.sigma_min);
        f.velocity = decoder_forward(f.flow.x_t, f.flow.t, f.frame_states, f.dec);
        f.l_mel = cfm::cfm_loss(f.velocity, f.flow);

        if (cfg_.prior_weight > 0.0) {
            // alignment term: the duration-expanded means regress the mel,
            // which is what gives the alignment scoring a trained signal
            double acc = 0.0;
            std::size_t j = 0;
            for (std::size_t i = 0; i < n_text; ++i)
                for (int k = 0; k < durations[i]; ++k, ++j)
                    for (std::size_t d = 0; d < kMelBins; ++d) {
                        const double r = f.mu(i, d) - utt.mel(j, d);
                        acc += r * r;
                    }
            f.l_mel += cfg_.prior_weight * acc /
                       static_cast<double>(t_mel * kMelBins);
        }

        if (cfg_.aux_l1_weight > 0.0) {
            // short Euler rollout from the same draw; smoothed L1 to the target
            const int n = cfg_.aux_l1_steps;
            const double h = 1.0 / static_cast<double>(n);
            f.aux_caches.resize(n);
            f.aux_x.resize(n + 1);
            f.aux_x[0] = draw.x0;
            for (int k = 0; k < n; ++k) {
                const Mat v =
                    decoder_forward(f.aux_x[k], h * k, f.frame_states, f.aux_caches[k]);
                f.aux_x[k + 1] = f.aux_x[k];
                for (std::size_t i = 0; i < v.data().size(); ++i)
                    f.aux_x[k + 1].data()[i] += h * v.data()[i];
            }
            const Mat& xn = f.aux_x[n];
            double acc = 0.0;
            for (std::size_t i = 0; i < xn.data().size(); ++i) {
                const double r = xn.data()[i] - utt.mel.data()[i];
                acc += std::sqrt(r * r + kAuxL1Smooth * kAuxL1Smooth);
            }
            f.l_mel += cfg_.aux_l1_weight * acc / static_cast<double>(xn.data().size());
        }
    }

    void utt_backward(const TrainUtterance& utt, const UttForward& f, double inv_batch) {
        const LossWeights& w = cfg_.loss_weights;
        const std::size_t n_text = f.durations.size();

        // mel/CFM path
        Mat dv = cfm::cfm_loss_grad(f.velocity, f.flow,
                                    std::vector<std::uint8_t>(f.velocity.rows(), 1));
        for (auto& g : dv.data()) g *= inv_batch;
        Mat dframe = decoder_backward(f.dec, dv);

        if (cfg_.aux_l1_weight > 0.0) {
            // adjoint pass through the Euler rollout
            const int n = cfg_.aux_l1_steps;
            const double h = 1.0 / static_cast<double>(n);
            const Mat& xn = f.aux_x[n];
            const double scale = cfg_.aux_l1_weight * inv_batch /
                                 static_cast<double>(xn.data().size());
            Mat dx(xn.rows(), xn.cols());
            for (std::size_t i = 0; i < xn.data().size(); ++i) {
                const double r = xn.data()[i] - utt.mel.data()[i];
                dx.data()[i] = scale * r / std::sqrt(r * r + kAuxL1Smooth * kAuxL1Smooth);
            }
            for (int k = n - 1; k >= 0; --k) {
                Mat dvk = dx;
                for (auto& g : dvk.data()) g *= h;
                Mat dxk;
                const Mat dfk = decoder_backward(f.aux_caches[k], dvk, &dxk);
                for (std::size_t i = 0; i < dframe.data().size(); ++i)
                    dframe.data()[i] += dfk.data()[i];
                for (std::size_t i = 0; i < dx.data().size(); ++i)
                    dx.data()[i] += dxk.data()[i];
            }
        }

        // length regulation: sum frame grads back onto their grapheme, then
        // split the conditioning gradient into its state and mu halves
        Mat dcond(n_text, cfg_.embed_dim);
        Mat dmu(n_text, kMelBins);
        std::size_t j = 0;
        for (std::size_t i = 0; i < n_text; ++i)
            for (int k = 0; k < f.durations[i]; ++k, ++j) {
                for (std::size_t d = 0; d < cfg_.embed_dim; ++d) dcond(i, d) += dframe(j, d);
                for (std::size_t d = 0; d < kMelBins; ++d)
                    dmu(i, d) += dframe(j, cfg_.embed_dim + d);
            }

        // conditioning vectors (prosody scalars are teacher targets: constants)
        nn::Tensor& wp = ps_.get("cond.pitch");
        nn::Tensor& we = ps_.get("cond.energy");
        for (std::size_t i = 0; i < n_text; ++i)
            for (std::size_t d = 0; d < cfg_.embed_dim; ++d) {
                wp.grad[d] += f.cond_pitch[i] * dcond(i, d);
                we.grad[d] += f.cond_energy[i] * dcond(i, d);
            }
        Mat dstates = dcond;

        // head losses
        std::vector<double> ddur(n_text);
        const double dur_scale = w.lambda_dur * inv_batch * 2.0 / static_cast<double>(n_text);
        for (std::size_t i = 0; i < n_text; ++i)
            ddur[i] = dur_scale * (f.dur_head.out[i] - f.dur_target[i]);
        Mat ds = head_backward("dur", f.states, f.dur_head, ddur);
        for (std::size_t i = 0; i < dstates.data().size(); ++i)
            dstates.data()[i] += ds.data()[i];

        std::size_t voiced_n = 0;
        for (auto m : f.pitch_mask) voiced_n += m;
        if (voiced_n > 0) {
            std::vector<double> dpitch(n_text, 0.0);
            const double s = w.lambda_pitch * inv_batch * 2.0 / static_cast<double>(voiced_n);
            for (std::size_t i = 0; i < n_text; ++i)
                if (f.pitch_mask[i])
                    dpitch[i] = s * (f.pitch_head.out[i] - f.pitch_target[i]);
            ds = head_backward("pitch", f.states, f.pitch_head, dpitch);
            for (std::size_t i = 0; i < dstates.data().size(); ++i)
                dstates.data()[i] += ds.data()[i];
        }

        std::vector<double> denergy(n_text);
        const double es = w.lambda_energy * inv_batch * 2.0 / static_cast<double>(n_text);
        for (std::size_t i = 0; i < n_text; ++i)
            denergy[i] = es * (f.energy_head.out[i] - f.energy_target[i]);
        ds = head_backward("energy", f.states, f.energy_head, denergy);
        for (std::size_t i = 0; i < dstates.data().size(); ++i)
            dstates.data()[i] += ds.data()[i];

        // alignment term: residuals fan back from frames onto their grapheme
        if (cfg_.prior_weight > 0.0) {
            const std::size_t t_mel = utt.mel.rows();
            const double s = cfg_.prior_weight * inv_batch * 2.0 /
                             static_cast<double>(t_mel * kMelBins);
            std::size_t jj = 0;
            for (std::size_t i = 0; i < n_text; ++i)
                for (int k = 0; k < f.durations[i]; ++k, ++jj)
                    for (std::size_t d = 0; d < kMelBins; ++d)
                        dmu(i, d) += s * (f.mu(i, d) - utt.mel(jj, d));
        }
        ds = nn::linear_backward(ps_.get("mu.w"), ps_.get("mu.b"), f.states, dmu);
        for (std::size_t i = 0; i < dstates.data().size(); ++i)
            dstates.data()[i] += ds.data()[i];

        encoder_backward(f.enc, dstates);
    }
};

}  // namespace koshur::model
