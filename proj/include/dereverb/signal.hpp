#pragma once

#include <algorithm>
#include <cmath>
#include <iostream>
#include <string>
#include <string_view>

#include <unsupported/Eigen/FFT>

#include "dereverb/types.hpp"

namespace dereverb {

inline constexpr int kHopSamples = 128;

/// Multichannel room impulse response. propagation_delay is the direct-path
/// arrival (in samples) of the earliest channel.
struct RoomImpulseResponse {
    Eigen::MatrixXd taps;  // D x N
    Eigen::Index propagation_delay = 0;
    double t60 = 0.0;
    double t30 = 0.0;

    Eigen::Index channels() const { return taps.rows(); }
    Eigen::Index length() const { return taps.cols(); }

    void validate() const {
        if (taps.rows() < 1 || taps.cols() < 1) throw ShapeError("empty room impulse response");
        if (propagation_delay < 0 || propagation_delay >= taps.cols())
            throw ShapeError("propagation delay outside the impulse response");
        if (!taps.allFinite()) throw NumericError("impulse response contains non-finite taps");
        if (t30 > t60) throw ShapeError("T30 exceeds T60");
    }
};

enum class ProfileKind { HA, CI };

/// Listener category. HA keeps direct path plus early reflections (40 ms),
/// CI keeps only the first 16 ms.
struct ListenerProfile {
    ProfileKind kind = ProfileKind::HA;
    double target_cutoff_ms = 40.0;
    int delta_frames = 5;

    static ListenerProfile hearing_aid() { return {ProfileKind::HA, 40.0, 5}; }
    static ListenerProfile cochlear_implant() { return {ProfileKind::CI, 16.0, 2}; }

    static ListenerProfile from_name(std::string_view name) {
        if (name == "ha" || name == "HA") return hearing_aid();
        if (name == "ci" || name == "CI") return cochlear_implant();
        throw ConfigError("unknown listener profile '" + std::string(name) + "' (expected ha or ci)");
    }

    std::string name() const { return kind == ProfileKind::HA ? "ha" : "ci"; }

    Eigen::Index cutoff_samples() const {
        return static_cast<Eigen::Index>(std::lround(target_cutoff_ms * kSampleRate / 1000.0));
    }
};

enum class PsdMode { Oracle, Smoothed, Neural };

inline std::string to_string(PsdMode m) {
    switch (m) {
        case PsdMode::Oracle: return "oracle";
        case PsdMode::Smoothed: return "smoothed";
        case PsdMode::Neural: return "neural";
    }
    return "?";
}

struct PipelineConfig {
    int taps = 10;             // K, filter length in frames
    int channels = 2;          // D
    double alpha = 0.99;       // forgetting factor
    double epsilon = 1e-3;     // Kalman denominator floor
    int moderate_frames = 10;  // L_m
    ListenerProfile profile = ListenerProfile::hearing_aid();
    PsdMode psd_mode = PsdMode::Smoothed;
    bool postfilter_enabled = false;
    double smoothing_beta = 0.85;  // periodogram smoothing for PsdMode::Smoothed
    double min_gain = 0.0;         // optional post-filter gain floor

    void validate() const {
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        if (!(epsilon > 0.0)) throw ConfigError("epsilon must be positive");
        if (taps < 1) throw ConfigError("filter taps K must be >= 1");
        if (channels < 1) throw ConfigError("channel count D must be >= 1");
        if (moderate_frames < 1) throw ConfigError("moderate range L_m must be >= 1");
        if (profile.delta_frames < 1) throw ConfigError("prediction delay must be >= 1 frame");
        if (!(smoothing_beta >= 0.0 && smoothing_beta < 1.0))
            throw ConfigError("smoothing beta must lie in [0, 1)");
        if (!(min_gain >= 0.0 && min_gain <= 1.0)) throw ConfigError("min_gain must lie in [0, 1]");
    }
};

namespace detail {

inline Eigen::Index next_pow2(Eigen::Index n) {
    Eigen::Index p = 1;
    while (p < n) p <<= 1;
    return p;
}

// Linear convolution of x with h, truncated to out_len samples.
inline Eigen::VectorXd convolve_1d(const Eigen::VectorXd& h, const Eigen::VectorXd& x, Eigen::Index out_len) {
    Eigen::VectorXd y = Eigen::VectorXd::Zero(out_len);
    const Eigen::Index n = h.size();
    const Eigen::Index l = x.size();
    if (n == 0 || l == 0) return y;

    // Direct sum for small problems, FFT otherwise.
    if (static_cast<double>(n) * static_cast<double>(l) < 4.0e6) {
        for (Eigen::Index i = 0; i < out_len; ++i) {
            double acc = 0.0;
            const Eigen::Index k0 = std::max<Eigen::Index>(0, i - l + 1);
            const Eigen::Index k1 = std::min<Eigen::Index>(n - 1, i);
            for (Eigen::Index k = k0; k <= k1; ++k) acc += h[k] * x[i - k];
            y[i] = acc;
        }
        return y;
    }

    const Eigen::Index size = next_pow2(n + l - 1);
    std::vector<double> hp(size, 0.0), xp(size, 0.0), yp;
    std::copy(h.data(), h.data() + n, hp.begin());
    std::copy(x.data(), x.data() + l, xp.begin());
    Eigen::FFT<double> fft;
    std::vector<cplx> hs, xs;
    fft.fwd(hs, hp);
    fft.fwd(xs, xp);
    for (std::size_t i = 0; i < hs.size(); ++i) hs[i] *= xs[i];
    fft.inv(yp, hs);
    for (Eigen::Index i = 0; i < out_len && i < size; ++i) y[i] = yp[i];
    return y;
}

}  // namespace detail

/// Reverberant signal: each RIR channel applied to the mono dry signal,
/// truncated to the dry length.
inline AudioBuffer convolve(const RoomImpulseResponse& rir, const AudioBuffer& dry) {
    if (dry.empty() || rir.taps.size() == 0) throw ShapeError("convolve: empty input");
    if (dry.channels() != 1) throw ShapeError("convolve: dry signal must be single-channel");
    const Eigen::Index len = dry.length();
    AudioBuffer out(rir.channels(), len, dry.sample_rate);
    const Eigen::VectorXd x = dry.samples.row(0).transpose();
    for (Eigen::Index d = 0; d < rir.channels(); ++d)
        out.samples.row(d) = detail::convolve_1d(rir.taps.row(d).transpose(), x, len).transpose();
    return out;
}

/// RIR restricted to taps [0, end) of every channel.
inline RoomImpulseResponse truncate_rir(const RoomImpulseResponse& rir, Eigen::Index end) {
    RoomImpulseResponse out = rir;
    end = std::clamp<Eigen::Index>(end, 0, rir.length());
    out.taps.rightCols(rir.length() - end).setZero();
    return out;
}

/// Training/evaluation target for a listener profile: dry signal convolved with
/// the RIR truncated at propagation_delay + cutoff (HA: d+e, CI: d).
inline AudioBuffer make_target(const RoomImpulseResponse& rir, const AudioBuffer& dry,
                               const ListenerProfile& profile) {
    const Eigen::Index end = rir.propagation_delay + profile.cutoff_samples();
    if (end > rir.length())
        std::clog << "warning: target cutoff (" << end << " samples) exceeds RIR length ("
                  << rir.length() << "); using the full RIR\n";
    return convolve(truncate_rir(rir, end), dry);
}

struct RirParts {
    RoomImpulseResponse target;
    RoomImpulseResponse moderate;
    RoomImpulseResponse final_part;
};

/// Partition the RIR taps into target [0, pd + delta), moderate
/// [pd + delta, pd + delta + L_m) and final [pd + delta + L_m, N) ranges,
/// with boundaries given in frames of `hop` samples.
inline RirParts split_rir(const RoomImpulseResponse& rir, int delta_frames, int moderate_frames,
                          int hop = kHopSamples) {
    const Eigen::Index n = rir.length();
    const Eigen::Index b1 = std::clamp<Eigen::Index>(
        rir.propagation_delay + static_cast<Eigen::Index>(delta_frames) * hop, 0, n);
    const Eigen::Index b2 = std::clamp<Eigen::Index>(
        b1 + static_cast<Eigen::Index>(moderate_frames) * hop, b1, n);

    RirParts parts{rir, rir, rir};
    parts.target.taps.rightCols(n - b1).setZero();
    parts.moderate.taps.leftCols(b1).setZero();
    parts.moderate.taps.rightCols(n - b2).setZero();
    parts.final_part.taps.leftCols(b2).setZero();
    return parts;
}

/// Sum of squared taps in [begin, end) over all channels.
inline double tap_energy(const RoomImpulseResponse& rir, Eigen::Index begin, Eigen::Index end) {
    begin = std::clamp<Eigen::Index>(begin, 0, rir.length());
    end = std::clamp<Eigen::Index>(end, begin, rir.length());
    return rir.taps.middleCols(begin, end - begin).squaredNorm();
}

}  // namespace dereverb
