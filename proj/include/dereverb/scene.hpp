#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "dereverb/signal.hpp"
#include "dereverb/types.hpp"

namespace dereverb {

// Stochastic two-channel RIR: unit direct path, a few sparse early reflections
// and an exponentially decaying Gaussian tail. Stand-in for a geometric room
// simulator; only the decay time and direct-to-reverberant ratio are controlled.
struct RirSpec {
    double t60 = 0.6;
    double propagation_delay_ms = 3.0;
    int n_early_reflections = 5;
    int inter_channel_delay_samples = 4;
    double drr_db = -3.0;  // direct vs. everything else, from tap energies
    std::uint64_t seed = 1;

    void validate() const {
        if (!(t60 >= 0.4 && t60 <= 1.0)) throw ConfigError("t60 must lie in [0.4, 1.0] s");
        if (propagation_delay_ms < 0.0) throw ConfigError("propagation delay must be nonnegative");
        if (inter_channel_delay_samples < 0 || inter_channel_delay_samples > 8)
            throw ConfigError("inter-channel delay must lie in [0, 8] samples");
        if (n_early_reflections < 0 || n_early_reflections > 8)
            throw ConfigError("early reflection count must lie in [0, 8]");
        if (!std::isfinite(drr_db)) throw ConfigError("drr_db must be finite");
    }
};

/// Schroeder backward-integration decay time of one RIR channel: linear fit of
/// the energy decay curve between -5 and -35 dB, extrapolated to 60 dB.
inline double schroeder_t60(const Eigen::VectorXd& taps, int sample_rate = kSampleRate) {
    const Eigen::Index n = taps.size();
    Eigen::VectorXd edc(n);
    double acc = 0.0;
    for (Eigen::Index i = n - 1; i >= 0; --i) {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    if (!(acc > 0.0)) throw NumericError("schroeder_t60: silent impulse response");
    double sx = 0, sy = 0, sxx = 0, sxy = 0;
    int count = 0;
    for (Eigen::Index i = 0; i < n; ++i) {
        const double db = 10.0 * std::log10(std::max(edc[i] / acc, 1e-300));
        if (db > -5.0) continue;
        if (db < -35.0) break;
        const double t = static_cast<double>(i) / sample_rate;
        sx += t;
        sy += db;
        sxx += t * t;
        sxy += t * db;
        ++count;
    }
    if (count < 2) throw NumericError("schroeder_t60: decay does not span -5 to -35 dB");
    const double slope = (count * sxy - sx * sy) / (count * sxx - sx * sx);
    return -60.0 / slope;
}

/// Direct-to-reverberant ratio (dB) from tap energies: the direct tap of each
/// channel (largest magnitude) against all remaining taps.
inline double direct_to_reverberant_db(const RoomImpulseResponse& rir) {
    double direct = 0.0, rest = 0.0;
    for (Eigen::Index d = 0; d < rir.channels(); ++d) {
        Eigen::Index peak;
        rir.taps.row(d).cwiseAbs().maxCoeff(&peak);
        const double dp = rir.taps(d, peak) * rir.taps(d, peak);
        direct += dp;
        rest += rir.taps.row(d).squaredNorm() - dp;
    }
    return 10.0 * std::log10(direct / rest);
}

inline RoomImpulseResponse generate_rir(const RirSpec& spec) {
    spec.validate();
    constexpr double fs = kSampleRate;
    std::mt19937_64 rng(spec.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    const auto pd = static_cast<Eigen::Index>(std::lround(spec.propagation_delay_ms * fs / 1000.0));
    const Eigen::Index icd = spec.inter_channel_delay_samples;
    const auto tail_len = static_cast<Eigen::Index>(std::ceil(1.2 * spec.t60 * fs));
    const Eigen::Index n = pd + icd + tail_len + 1;

    RoomImpulseResponse rir;
    rir.taps = Eigen::MatrixXd::Zero(2, n);
    rir.propagation_delay = pd;
    rir.t60 = spec.t60;
    rir.t30 = spec.t60 / 2.0;  // time to decay by 30 dB

    const Eigen::Index onset[2] = {pd, pd + icd};
    for (int d = 0; d < 2; ++d) rir.taps(d, onset[d]) = 1.0;

    // Early reflections: log-uniform delays in (2, 50] ms, amplitude ~ 1/delay.
    Eigen::MatrixXd early = Eigen::MatrixXd::Zero(2, n);
    for (int r = 0; r < spec.n_early_reflections; ++r) {
        const double delay_ms = 2.0 * std::pow(25.0, unit(rng));
        const double amp = (unit(rng) < 0.5 ? -1.6 : 1.6) / delay_ms;
        const auto lag = static_cast<Eigen::Index>(std::lround(delay_ms * fs / 1000.0));
        for (int d = 0; d < 2; ++d) {
            const Eigen::Index jitter = icd > 0 ? static_cast<Eigen::Index>(unit(rng) * (2 * icd + 1)) - icd : 0;
            const Eigen::Index pos = std::clamp<Eigen::Index>(onset[d] + lag + jitter, onset[d] + 1, n - 1);
            early(d, pos) += amp;
        }
    }

    // Dense tail with amplitude envelope exp(-6.9 t / T60), scaled to the requested DRR.
    Eigen::MatrixXd tail = Eigen::MatrixXd::Zero(2, n);
    for (int d = 0; d < 2; ++d)
        for (Eigen::Index i = 1; onset[d] + i < n && i <= tail_len; ++i)
            tail(d, onset[d] + i) = gauss(rng) * std::exp(-6.9 * (static_cast<double>(i) / fs) / spec.t60);
    // Everything but the direct path carries direct / 10^(drr/10); the early
    // reflections are scaled down to at most half of it so a tail always remains.
    const double direct_energy = 2.0;
    const double reverberant = direct_energy / std::pow(10.0, spec.drr_db / 10.0);
    double early_energy = early.squaredNorm();
    if (early_energy > 0.5 * reverberant) {
        early *= std::sqrt(0.5 * reverberant / early_energy);
        early_energy = 0.5 * reverberant;
    }
    Eigen::MatrixXd rest = early + tail * std::sqrt((reverberant - early_energy) / tail.squaredNorm());
    // Reflections landing on tail samples add cross terms; renormalize so the DRR is exact.
    rest *= std::sqrt(reverberant / rest.squaredNorm());
    rir.taps += rest;
    return rir;
}

/// RMS of the generated dry signal. WPE's epsilon is an absolute floor on the
/// Kalman denominator in the unscaled STFT domain, so only its ratio to the
/// signal PSD matters; at this level the default epsilon of 1e-3 sits near the
/// best oracle-PSD operating point (swept over epsilon on held-out scenes, the
/// optimum lay at 3..10 for an RMS of 0.1, i.e. ~6.4e-4 at this level).
inline constexpr double kSpeechLikeRms = 1.25e-3;

/// AR(2)-resonant noise with a random syllable-rate envelope, a stand-in for
/// dry speech, scaled to kSpeechLikeRms.
inline AudioBuffer speech_like(double seconds, std::uint64_t seed) {
    constexpr double fs = kSampleRate;
    const auto n = static_cast<Eigen::Index>(std::lround(seconds * fs));
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);

    AudioBuffer out(1, n);
    // Syllables of 120-320 ms with a raised-cosine envelope; each has its own resonance.
    Eigen::Index pos = 0;
    double y1 = 0.0, y2 = 0.0;
    while (pos < n) {
        const auto len = static_cast<Eigen::Index>((0.12 + 0.2 * unit(rng)) * fs);
        const double amp = unit(rng) < 0.15 ? 0.02 : 0.2 + 0.8 * unit(rng);
        const double f0 = 300.0 + 1700.0 * unit(rng);
        const double r = 0.9 + 0.08 * unit(rng);
        const double a1 = 2.0 * r * std::cos(2.0 * std::numbers::pi * f0 / fs);
        const double a2 = -r * r;
        for (Eigen::Index i = 0; i < len && pos < n; ++i, ++pos) {
            const double y = gauss(rng) + a1 * y1 + a2 * y2;
            y2 = y1;
            y1 = y;
            const double env = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * (static_cast<double>(i) + 0.5) / len);
            out.samples(0, pos) = amp * env * y;
        }
    }
    const double rms = std::sqrt(out.energy() / static_cast<double>(std::max<Eigen::Index>(n, 1)));
    if (rms > 0.0) out.samples *= kSpeechLikeRms / rms;
    return out;
}

struct SequenceSpec {
    double total_seconds = 20.0;
    double segment_seconds = 4.0;  // L_i
    bool first_segment_is_init = true;

    void validate() const {
        if (!(segment_seconds > 0.0)) throw ConfigError("segment length must be positive");
        if (total_seconds < 2.0 * segment_seconds) throw ConfigError("sequence must span at least two segments");
    }

    Eigen::Index segment_samples() const {
        return static_cast<Eigen::Index>(std::lround(segment_seconds * kSampleRate));
    }
    Eigen::Index total_samples() const { return static_cast<Eigen::Index>(std::lround(total_seconds * kSampleRate)); }
};

struct Sequence {
    AudioBuffer audio;
    std::vector<Eigen::Index> segment_starts;  // multiples of L_i * fs
    bool first_segment_is_init = true;
};

/// Concatenates same-speaker utterances (order permuted by `seed`), looping
/// them when short, and trims to total_seconds.
inline Sequence build_sequence(const std::vector<AudioBuffer>& utterances, const SequenceSpec& spec,
                               std::uint64_t seed) {
    spec.validate();
    if (utterances.empty()) throw ShapeError("build_sequence: no utterances");
    Eigen::Index available = 0;
    for (const auto& u : utterances) {
        if (u.channels() != 1) throw ShapeError("build_sequence: utterances must be mono");
        if (u.sample_rate != kSampleRate) throw ConfigError("build_sequence: utterances must be 16 kHz");
        available += u.length();
    }
    if (available == 0) throw ShapeError("build_sequence: utterances are empty");

    std::vector<std::size_t> order(utterances.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(seed);
    std::shuffle(order.begin(), order.end(), rng);

    const Eigen::Index total = spec.total_samples();
    Sequence seq;
    seq.audio = AudioBuffer(1, total);
    seq.first_segment_is_init = spec.first_segment_is_init;
    Eigen::Index pos = 0;
    for (std::size_t k = 0; pos < total; k = (k + 1) % order.size()) {
        const auto& u = utterances[order[k]];
        const Eigen::Index take = std::min(u.length(), total - pos);
        seq.audio.samples.middleCols(pos, take) = u.samples.leftCols(take);
        pos += take;
    }
    const Eigen::Index seg = spec.segment_samples();
    for (Eigen::Index s = 0; s < total; s += seg) seq.segment_starts.push_back(s);
    return seq;
}

/// Adds i.i.d. Gaussian noise to every channel at an SNR drawn uniformly from
/// [snr_lo, snr_hi] dB; the noise is rescaled so the realized SNR is exact.
inline AudioBuffer add_sensor_noise(const AudioBuffer& audio, double snr_lo, double snr_hi, std::uint64_t seed,
                                    double* drawn_snr_db = nullptr) {
    if (!(snr_lo <= snr_hi) || !std::isfinite(snr_lo) || !std::isfinite(snr_hi))
        throw ConfigError("add_sensor_noise: invalid SNR range");
    const double energy = audio.energy();
    if (!(energy > 0.0)) throw NumericError("add_sensor_noise: silent input, SNR undefined");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> pick(snr_lo, snr_hi);
    const double snr = snr_lo == snr_hi ? snr_lo : pick(rng);
    std::normal_distribution<double> gauss(0.0, 1.0);
    Eigen::MatrixXd noise(audio.channels(), audio.length());
    for (Eigen::Index n = 0; n < noise.cols(); ++n)
        for (Eigen::Index d = 0; d < noise.rows(); ++d) noise(d, n) = gauss(rng);
    noise *= std::sqrt(energy / std::pow(10.0, snr / 10.0) / noise.squaredNorm());
    if (drawn_snr_db) *drawn_snr_db = snr;
    return AudioBuffer(Eigen::MatrixXd(audio.samples + noise), audio.sample_rate);
}

// ---------------------------------------------------------------------------
// Scene manifest: everything needed to regenerate a scene bit-exactly.
// ---------------------------------------------------------------------------

struct SceneSpec {
    RirSpec rir;
    SequenceSpec sequence;
    std::uint64_t dry_seed = 7;
    double dry_seconds = 25.0;
    std::vector<std::string> dry_files;  // when non-empty, used instead of the generator
    std::uint64_t sequence_seed = 11;
    bool noise_enabled = true;
    double snr_lo = 15.0, snr_hi = 25.0;
    std::uint64_t noise_seed = 13;
    std::string profile = "ha";

    nlohmann::json to_json() const {
        return {{"format_version", 1},
                {"rir",
                 {{"t60", rir.t60},
                  {"propagation_delay_ms", rir.propagation_delay_ms},
                  {"n_early_reflections", rir.n_early_reflections},
                  {"inter_channel_delay_samples", rir.inter_channel_delay_samples},
                  {"drr_db", rir.drr_db},
                  {"seed", rir.seed}}},
                {"sequence",
                 {{"total_seconds", sequence.total_seconds},
                  {"segment_seconds", sequence.segment_seconds},
                  {"first_segment_is_init", sequence.first_segment_is_init}}},
                {"dry", {{"seed", dry_seed}, {"seconds", dry_seconds}, {"files", dry_files}}},
                {"sequence_seed", sequence_seed},
                {"noise", {{"enabled", noise_enabled}, {"snr_db_range", {snr_lo, snr_hi}}, {"seed", noise_seed}}},
                {"profile", profile}};
    }

    static SceneSpec from_json(const nlohmann::json& j) {
        SceneSpec s;
        try {
            if (j.contains("rir")) {
                const auto& r = j.at("rir");
                s.rir.t60 = r.value("t60", s.rir.t60);
                s.rir.propagation_delay_ms = r.value("propagation_delay_ms", s.rir.propagation_delay_ms);
                s.rir.n_early_reflections = r.value("n_early_reflections", s.rir.n_early_reflections);
                s.rir.inter_channel_delay_samples =
                    r.value("inter_channel_delay_samples", s.rir.inter_channel_delay_samples);
                s.rir.drr_db = r.value("drr_db", s.rir.drr_db);
                s.rir.seed = r.value("seed", s.rir.seed);
            }
            if (j.contains("sequence")) {
                const auto& q = j.at("sequence");
                s.sequence.total_seconds = q.value("total_seconds", s.sequence.total_seconds);
                s.sequence.segment_seconds = q.value("segment_seconds", s.sequence.segment_seconds);
                s.sequence.first_segment_is_init = q.value("first_segment_is_init", s.sequence.first_segment_is_init);
            }
            if (j.contains("dry")) {
                const auto& d = j.at("dry");
                s.dry_seed = d.value("seed", s.dry_seed);
                s.dry_seconds = d.value("seconds", s.dry_seconds);
                s.dry_files = d.value("files", s.dry_files);
            }
            s.sequence_seed = j.value("sequence_seed", s.sequence_seed);
            if (j.contains("noise")) {
                const auto& n = j.at("noise");
                s.noise_enabled = n.value("enabled", s.noise_enabled);
                if (n.contains("snr_db_range")) {
                    const auto range = n.at("snr_db_range").get<std::vector<double>>();
                    if (range.size() != 2) throw ConfigError("snr_db_range must have two entries");
                    s.snr_lo = range[0];
                    s.snr_hi = range[1];
                }
                s.noise_seed = n.value("seed", s.noise_seed);
            }
            s.profile = j.value("profile", s.profile);
        } catch (const nlohmann::json::exception& e) {
            throw ConfigError(std::string("malformed scene spec: ") + e.what());
        }
        s.rir.validate();
        s.sequence.validate();
        ListenerProfile::from_name(s.profile);
        return s;
    }
};

struct Scene {
    AudioBuffer dry;     // mono sequence
    RoomImpulseResponse rir;
    AudioBuffer reverb;  // D-channel mixture with sensor noise
    AudioBuffer target_ha;
    AudioBuffer target_ci;
    std::vector<Eigen::Index> segment_starts;
    std::optional<double> input_snr_db;  // unset when no sensor noise was added
};

/// Builds a scene from its spec. `utterances` are used when the spec lists
/// dry files (the caller loads them); otherwise the built-in generator is used.
inline Scene build_scene(const SceneSpec& spec, const std::vector<AudioBuffer>& utterances = {}) {
    Scene s;
    s.rir = generate_rir(spec.rir);
    std::vector<AudioBuffer> source = utterances;
    if (source.empty()) source.push_back(speech_like(spec.dry_seconds, spec.dry_seed));
    Sequence seq = build_sequence(source, spec.sequence, spec.sequence_seed);
    s.dry = std::move(seq.audio);
    s.segment_starts = std::move(seq.segment_starts);
    const AudioBuffer clean = convolve(s.rir, s.dry);
    if (spec.noise_enabled) {
        double snr = 0.0;
        s.reverb = add_sensor_noise(clean, spec.snr_lo, spec.snr_hi, spec.noise_seed, &snr);
        s.input_snr_db = snr;
    } else {
        s.reverb = clean;
    }
    s.target_ha = make_target(s.rir, s.dry, ListenerProfile::hearing_aid());
    s.target_ci = make_target(s.rir, s.dry, ListenerProfile::cochlear_implant());
    return s;
}

}  // namespace dereverb
