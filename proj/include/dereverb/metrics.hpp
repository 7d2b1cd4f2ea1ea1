#pragma once

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>
#include <vector>

#include <unsupported/Eigen/FFT>
#include <json.hpp>

#include "dereverb/signal.hpp"
#include "dereverb/types.hpp"

namespace dereverb {

/// Magnitude bound applied to every reported log-ratio.
inline constexpr double kDbCap = 80.0;

/// 10 log10(num / den), clamped to [-kDbCap, kDbCap]; a zero denominator
/// (or zero numerator) maps to the corresponding cap.
inline double capped_db(double num, double den) {
    if (den <= 0.0) return num > 0.0 ? kDbCap : 0.0;
    if (num <= 0.0) return -kDbCap;
    return std::clamp(10.0 * std::log10(num / den), -kDbCap, kDbCap);
}

/// Per-channel, per-frequency STFT-domain RIR from least-squares regression.
struct EstimatedRir {
    std::vector<Eigen::MatrixXcd> coeffs;  // one P x F matrix per channel
    int order = 0;                         // P
    int delta_star = 0;                    // propagation delay in frames
    int delta_tilde = 5;                   // target range [0, delta_tilde)
    int moderate_frames = 10;              // L_m

    Eigen::Index channels() const { return static_cast<Eigen::Index>(coeffs.size()); }
    Eigen::Index bins() const { return coeffs.empty() ? 0 : coeffs.front().cols(); }

    void validate() const {
        if (order < delta_tilde + moderate_frames)
            throw ShapeError("RIR order P must cover the target and moderate ranges");
        for (const auto& c : coeffs)
            if (!c.allFinite()) throw NumericError("estimated RIR has non-finite coefficients");
    }
};

struct RegressionOptions {
    int order = 40;           // P
    int delta_star = 0;       // frames
    int delta_tilde = 5;
    int moderate_frames = 10;
    std::size_t first_frame = 0;  // frames before this one are excluded from the fit
};

namespace detail {

// Row t of the regression matrix: [S_{t-d*}, S_{t-d*-1}, ..., S_{t-d*-P+1}], zero before the signal.
inline Eigen::MatrixXcd regressors(const Spectrogram& dry, Eigen::Index f, std::size_t t0, std::size_t t1, int order,
                                   int delta_star) {
    const auto rows = static_cast<Eigen::Index>(t1 - t0);
    Eigen::MatrixXcd a = Eigen::MatrixXcd::Zero(rows, order);
    for (Eigen::Index r = 0; r < rows; ++r) {
        const auto t = static_cast<std::ptrdiff_t>(t0) + r;
        for (int tau = 0; tau < order; ++tau) {
            const std::ptrdiff_t src = t - tau - delta_star;
            if (src >= 0 && src < static_cast<std::ptrdiff_t>(dry.num_frames()))
                a(r, tau) = dry[static_cast<std::size_t>(src)](0, f);
        }
    }
    return a;
}

}  // namespace detail

inline constexpr int kRegressionRefinements = 2;

/// Least-squares fit, per channel d and bin f, of
///   Y_{d,t,f} ~ sum_tau H_{d,tau,f} S_{t-tau-delta*,f}
/// over frames t >= first_frame, through the normal equations with ridge
/// jitter 1e-8 trace(Gram) / P and iterative refinement.
inline EstimatedRir estimate_rir(const Spectrogram& dry, const Spectrogram& proc, const RegressionOptions& opt) {
    if (dry.channels != 1) throw ShapeError("estimate_rir: dry spectrogram must be single-channel");
    if (dry.bins != proc.bins) throw ShapeError("estimate_rir: bin counts differ");
    if (opt.order < 1 || opt.delta_star < 0) throw ConfigError("estimate_rir: invalid order or delay");
    const std::size_t t1 = std::min(dry.num_frames(), proc.num_frames());
    if (opt.first_frame >= t1 || t1 - opt.first_frame < 2 * static_cast<std::size_t>(opt.order))
        throw ShapeError("estimate_rir: need at least 2P frames for the regression");

    EstimatedRir rir;
    rir.order = opt.order;
    rir.delta_star = opt.delta_star;
    rir.delta_tilde = opt.delta_tilde;
    rir.moderate_frames = opt.moderate_frames;
    rir.coeffs.assign(static_cast<std::size_t>(proc.channels), Eigen::MatrixXcd::Zero(opt.order, proc.bins));

    const auto rows = static_cast<Eigen::Index>(t1 - opt.first_frame);
    Eigen::MatrixXcd y(rows, proc.channels);
    for (Eigen::Index f = 0; f < proc.bins; ++f) {
        const Eigen::MatrixXcd a = detail::regressors(dry, f, opt.first_frame, t1, opt.order, opt.delta_star);
        Eigen::MatrixXcd gram = Eigen::MatrixXcd::Zero(opt.order, opt.order);
        gram.selfadjointView<Eigen::Lower>().rankUpdate(a.adjoint());
        gram = gram.selfadjointView<Eigen::Lower>();
        const double trace = gram.diagonal().real().sum();
        if (!(trace > 0.0))
            throw NumericError("estimate_rir: dry excitation is silent in frequency bin " + std::to_string(f));
        Eigen::MatrixXcd jittered = gram;
        jittered.diagonal().array() += 1e-8 * trace / opt.order;

        for (Eigen::Index d = 0; d < proc.channels; ++d)
            for (Eigen::Index r = 0; r < rows; ++r) y(r, d) = proc[opt.first_frame + static_cast<std::size_t>(r)](d, f);
        const Eigen::MatrixXcd rhs = a.adjoint() * y;
        Eigen::LDLT<Eigen::MatrixXcd> ldlt(jittered);
        Eigen::MatrixXcd h = ldlt.solve(rhs);
        // The jitter biases well-conditioned directions by ~1e-8 relative; each
        // refinement step against the unjittered system shrinks that bias by the
        // same factor while near-null directions stay regularized.
        for (int k = 0; k < kRegressionRefinements; ++k) h += ldlt.solve(rhs - gram * h);
        if (ldlt.info() != Eigen::Success || !h.allFinite())
            throw NumericError("estimate_rir: rank-deficient regressor in frequency bin " + std::to_string(f));
        for (Eigen::Index d = 0; d < proc.channels; ++d) rir.coeffs[static_cast<std::size_t>(d)].col(f) = h.col(d);
    }
    return rir;
}

struct RirComponents {
    Spectrogram target;    // taps [0, delta_tilde)
    Spectrogram moderate;  // taps [delta_tilde, delta_tilde + L_m)
    Spectrogram final_part;  // taps [delta_tilde + L_m, P)
};

/// Dry signal filtered by each tap range of the estimated RIR, over frames
/// [first_frame, T).
inline RirComponents rir_components(const EstimatedRir& rir, const Spectrogram& dry, std::size_t first_frame = 0) {
    rir.validate();
    if (dry.channels != 1 || dry.bins != rir.bins()) throw ShapeError("rir_components: dry spectrogram shape");
    const std::size_t t1 = dry.num_frames();
    first_frame = std::min(first_frame, t1);
    const auto d_ch = rir.channels();
    const std::size_t count = t1 - first_frame;
    RirComponents out{Spectrogram(d_ch, count, rir.bins()), Spectrogram(d_ch, count, rir.bins()),
                      Spectrogram(d_ch, count, rir.bins())};
    const int b1 = rir.delta_tilde;
    const int b2 = rir.delta_tilde + rir.moderate_frames;
    for (std::size_t i = 0; i < count; ++i) {
        const auto t = static_cast<std::ptrdiff_t>(first_frame + i);
        for (int tau = 0; tau < rir.order; ++tau) {
            const std::ptrdiff_t src = t - tau - rir.delta_star;
            if (src < 0) break;
            const Eigen::RowVectorXcd s = dry[static_cast<std::size_t>(src)].row(0);
            Spectrogram& dst = tau < b1 ? out.target : (tau < b2 ? out.moderate : out.final_part);
            for (Eigen::Index d = 0; d < d_ch; ++d)
                dst[i].row(d).array() +=
                    rir.coeffs[static_cast<std::size_t>(d)].row(tau).array() * s.array();
        }
    }
    return out;
}

struct ComponentEnergies {
    double target = 0.0;    // E_v
    double moderate = 0.0;  // E_m
    double final_part = 0.0;  // E_phi
};

inline double spectrogram_energy(const Spectrogram& s) {
    double e = 0.0;
    for (const auto& fr : s.frames) e += fr.squaredNorm();
    return e;
}

inline ComponentEnergies component_energies(const EstimatedRir& rir, const Spectrogram& dry,
                                            std::size_t first_frame = 0) {
    const RirComponents c = rir_components(rir, dry, first_frame);
    return {spectrogram_energy(c.target), spectrogram_energy(c.moderate), spectrogram_energy(c.final_part)};
}

struct ReverbRatios {
    double elr = 0.0;
    double emr = 0.0;
    double efr = 0.0;
};

/// Early-to-late, early-to-moderate and early-to-final energy ratios in dB.
/// ELR uses E_m + E_phi as the late energy (component cross terms ignored).
inline ReverbRatios elr_emr_efr(const ComponentEnergies& e) {
    if (!(e.target > 0.0)) throw NumericError("elr_emr_efr: target component energy is zero");
    return {capped_db(e.target, e.moderate + e.final_part), capped_db(e.target, e.moderate),
            capped_db(e.target, e.final_part)};
}

struct SnrSdr {
    double snr = 0.0;
    double sdr = 0.0;
};

/// SNR against the target, and SDR after projecting the estimate onto the
/// target (per channel, scale-invariant).
inline SnrSdr snr_sdr(const AudioBuffer& target, const AudioBuffer& estimate) {
    if (target.channels() != estimate.channels() || target.length() != estimate.length())
        throw ShapeError("snr_sdr: target and estimate shapes differ");
    const double te = target.energy();
    if (!(te > 0.0)) throw NumericError("snr_sdr: target signal is zero");

    const double noise = (estimate.samples - target.samples).squaredNorm();
    double proj_energy = 0.0, dist_energy = 0.0;
    for (Eigen::Index d = 0; d < target.channels(); ++d) {
        const Eigen::RowVectorXd v = target.samples.row(d);
        const Eigen::RowVectorXd e = estimate.samples.row(d);
        const double vv = v.squaredNorm();
        if (vv == 0.0) {
            dist_energy += e.squaredNorm();
            continue;
        }
        const double scale = e.dot(v) / vv;
        proj_energy += scale * scale * vv;
        dist_energy += (e - scale * v).squaredNorm();
    }
    return {capped_db(te, noise), capped_db(proj_energy, dist_energy)};
}

/// Lag (samples) maximizing the cross-correlation of proc channel 0 with dry.
inline Eigen::Index estimate_propagation_delay(const AudioBuffer& dry, const AudioBuffer& proc, Eigen::Index max_lag) {
    const Eigen::Index n = std::min(dry.length(), proc.length());
    if (n == 0) throw ShapeError("estimate_propagation_delay: empty input");
    Eigen::Index size = 1;
    while (size < 2 * n) size <<= 1;
    std::vector<double> a(size, 0.0), b(size, 0.0), xc;
    for (Eigen::Index i = 0; i < n; ++i) {
        a[i] = dry.samples(0, i);
        b[i] = proc.samples(0, i);
    }
    Eigen::FFT<double> fft;
    std::vector<cplx> fa, fb;
    fft.fwd(fa, a);
    fft.fwd(fb, b);
    for (std::size_t k = 0; k < fa.size(); ++k) fb[k] *= std::conj(fa[k]);
    fft.inv(xc, fb);
    Eigen::Index best = 0;
    for (Eigen::Index lag = 1; lag <= std::min(max_lag, n - 1); ++lag)
        if (std::abs(xc[lag]) > std::abs(xc[best])) best = lag;
    return best;
}

/// T60 bucket label in the style {0.4-0.55, 0.55-0.7, 0.7-0.85, 0.85-1.0}.
inline std::string t60_bucket(double t60) {
    static const double edges[] = {0.4, 0.55, 0.7, 0.85, 1.0};
    static const char* labels[] = {"0.4-0.55", "0.55-0.7", "0.7-0.85", "0.85-1.0"};
    if (t60 < edges[0]) return "<0.4";
    for (int i = 0; i < 4; ++i)
        if (t60 < edges[i + 1] || (i == 3 && t60 <= edges[4])) return labels[i];
    return ">1.0";
}

struct MetricsReport {
    double elr = 0.0, emr = 0.0, efr = 0.0, snr = 0.0, sdr = 0.0;
    double t60 = 0.0;
    std::string t60_bucket;
    std::string profile;
    std::string mode;
    std::string delay_source = "oracle";
    int segment = -1;  // -1 for the whole post-initialization range

    nlohmann::json to_json() const {
        return {{"elr", elr},       {"emr", emr},         {"efr", efr},       {"snr", snr},
                {"sdr", sdr},       {"t60", t60},         {"t60_bucket", t60_bucket},
                {"profile", profile}, {"mode", mode},     {"delay_source", delay_source},
                {"segment", segment}};
    }

    static std::string csv_header() { return "segment,mode,profile,t60,t60_bucket,elr,emr,efr,snr,sdr,delay_source"; }

    std::string csv_row() const {
        std::ostringstream os;
        os.precision(6);
        os << segment << ',' << mode << ',' << profile << ',' << t60 << ',' << t60_bucket << ',' << elr << ','
           << emr << ',' << efr << ',' << snr << ',' << sdr << ',' << delay_source;
        return os.str();
    }
};

}  // namespace dereverb
