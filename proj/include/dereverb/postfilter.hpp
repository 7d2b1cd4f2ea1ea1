#pragma once

#include "dereverb/psd.hpp"
#include "dereverb/types.hpp"

namespace dereverb {

/// Wiener gain lambda_v / (lambda_v + lambda_r), with 0/0 mapped to 0 and an
/// optional lower bound `min_gain` (0 disables it).
inline Eigen::ArrayXd wiener_gain(const PsdFrame& lambda_v, const PsdFrame& lambda_r, double min_gain = 0.0) {
    if (lambda_v.bins() != lambda_r.bins()) throw ShapeError("wiener_gain: PSD sizes differ");
    if ((lambda_v.lambda < 0.0).any() || (lambda_r.lambda < 0.0).any())
        throw NumericError("wiener_gain: negative PSD");
    const Eigen::ArrayXd total = lambda_v.lambda + lambda_r.lambda;
    Eigen::ArrayXd g = (total > 0.0).select(lambda_v.lambda / total, 0.0);
    if (min_gain > 0.0) g = g.max(min_gain);
    return g;
}

/// Target and interference masks of the post-filter network.
struct PostfilterMasks {
    MaskFrame target;
    MaskFrame interference;
};

/// Channel-wise Wiener magnitude filter on a WPE output frame. Both PSDs of
/// channel d are obtained by masking |v_d| with the shared reference-channel
/// masks; the phase is left untouched.
inline Frame postfilter_apply(const PostfilterMasks& masks, const Frame& wpe_frame, double min_gain = 0.0) {
    const Eigen::Index bins = wpe_frame.cols();
    if (masks.target.bins() != bins || masks.interference.bins() != bins)
        throw ShapeError("postfilter: mask size does not match frame");
    masks.target.validate();
    masks.interference.validate();

    Frame out(wpe_frame.rows(), bins);
    for (Eigen::Index d = 0; d < wpe_frame.rows(); ++d) {
        const Eigen::ArrayXd mag = wpe_frame.row(d).array().abs().transpose();
        const PsdFrame lam_v = mask_to_psd(masks.target, mag);
        const PsdFrame lam_r = mask_to_psd(masks.interference, mag);
        const Eigen::ArrayXd g = wiener_gain(lam_v, lam_r, min_gain);
        out.row(d) = wpe_frame.row(d).array() * g.transpose().cast<cplx>();
    }
    return out;
}

/// Single-mask variant: the mask's complement serves as the interference mask,
/// i.e. lambda_v = (m|x|)^2 and lambda_r = ((1 - m)|x|)^2.
inline Frame postfilter_apply_single(const MaskFrame& mask, const Frame& frame, double min_gain = 0.0) {
    return postfilter_apply({mask, {1.0 - mask.m}}, frame, min_gain);
}

}  // namespace dereverb
