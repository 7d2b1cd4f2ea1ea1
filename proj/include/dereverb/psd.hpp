#pragma once

#include <optional>

#include "dereverb/types.hpp"

namespace dereverb {

/// Nonnegative per-bin power spectral density estimate.
struct PsdFrame {
    Eigen::ArrayXd lambda;

    Eigen::Index bins() const { return lambda.size(); }

    void validate() const {
        if (!lambda.allFinite()) throw NumericError("PSD frame contains non-finite values");
        if ((lambda < 0.0).any()) throw NumericError("PSD frame contains negative values");
    }
};

/// Real-valued time-frequency mask, elementwise in [0, 1].
struct MaskFrame {
    Eigen::ArrayXd m;

    Eigen::Index bins() const { return m.size(); }

    void validate() const {
        if (!m.allFinite() || (m < 0.0).any() || (m > 1.0).any())
            throw NumericError("mask values must lie in [0, 1]");
    }
};

inline constexpr Eigen::Index kReferenceChannel = 0;

/// Oracle PSD: |v_0|^2 of the reference channel of the target frame.
inline PsdFrame oracle_psd(const Frame& target_frame) {
    return {target_frame.row(kReferenceChannel).array().abs2().transpose()};
}

/// Recursive smoothing of the reference-channel periodogram:
/// lambda_t = beta lambda_{t-1} + (1 - beta) |x_{0,t}|^2, seeded by the first
/// frame's periodogram.
class SmoothedPeriodogram {
public:
    explicit SmoothedPeriodogram(double beta = 0.85) : beta_(beta) {
        if (!(beta >= 0.0 && beta < 1.0)) throw ConfigError("smoothing beta must lie in [0, 1)");
    }

    PsdFrame step(const Frame& x_frame) {
        const Eigen::ArrayXd periodogram = x_frame.row(kReferenceChannel).array().abs2().transpose();
        if (!state_) state_ = periodogram;
        *state_ = beta_ * *state_ + (1.0 - beta_) * periodogram;
        return {*state_};
    }

    void reset() { state_.reset(); }
    double beta() const { return beta_; }
    const std::optional<Eigen::ArrayXd>& state() const { return state_; }
    void set_state(std::optional<Eigen::ArrayXd> s) { state_ = std::move(s); }

private:
    double beta_;
    std::optional<Eigen::ArrayXd> state_;
};

/// PSD by time-frequency masking: (m * |x|)^2.
inline PsdFrame mask_to_psd(const MaskFrame& mask, const Eigen::ArrayXd& magnitude) {
    if (mask.bins() != magnitude.size()) throw ShapeError("mask_to_psd: mask and magnitude sizes differ");
    return {(mask.m * magnitude).square()};
}

}  // namespace dereverb
