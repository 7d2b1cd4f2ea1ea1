#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <ostream>
#include <vector>

#include "dereverb/psd.hpp"
#include "dereverb/signal.hpp"
#include "dereverb/types.hpp"

namespace dereverb {

struct WpeParams {
    int channels = 2;    // D
    int taps = 10;       // K
    int delay = 5;       // prediction delay in frames
    double alpha = 0.99;
    double epsilon = 1e-3;
    double lambda_floor = 1e-12;

    static WpeParams from_config(const PipelineConfig& cfg) {
        return {cfg.channels, cfg.taps, cfg.profile.delta_frames, cfg.alpha, cfg.epsilon, 1e-12};
    }

    int stacked() const { return channels * taps; }
    int history() const { return delay + taps - 1; }

    // epsilon = 0 is accepted here so the recursion can be compared with an
    // unregularized least-squares solution; PipelineConfig requires epsilon > 0.
    void validate() const {
        if (channels < 1 || taps < 1 || delay < 1) throw ConfigError("WPE needs D, K, delay >= 1");
        if (!(alpha > 0.0 && alpha < 1.0)) throw ConfigError("alpha must lie in (0, 1)");
        if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be nonnegative");
        if (!(lambda_floor >= 0.0)) throw ConfigError("lambda floor must be nonnegative");
    }

    bool operator==(const WpeParams&) const = default;
};

/// Frame-online RLS-WPE dereverberation filter.
///
/// Per frequency bin f the state holds the prediction filter G (DK x D) and the
/// inverse weighted covariance Rinv (DK x DK); a ring buffer keeps the last
/// delay + K - 1 input frames. Each step, with the stacked delayed frames
///   X = [x_{t-delay}; ...; x_{t-delay-K+1}],
/// computes
///   e    = x_t - G^H X                                    (output frame)
///   k    = (1 - a) Rinv X / (a lambda + (1 - a) X^H Rinv X + eps)
///   Rinv = (Rinv - k X^H Rinv) / a
///   G    = G + k e^H
/// The output uses the filter from the previous frame. Frames that predate the
/// stream are zeros, so the first `delay` frames pass through unchanged.
class RlsWpe {
public:
    using PsdSource = std::function<PsdFrame(std::size_t frame_index, const Frame& x)>;

    RlsWpe(WpeParams params, Eigen::Index bins) : p_(params), bins_(bins) {
        p_.validate();
        if (bins < 1) throw ShapeError("WPE needs at least one frequency bin");
        reset();
    }

    RlsWpe(const PipelineConfig& cfg, Eigen::Index bins) : RlsWpe(WpeParams::from_config(cfg), bins) {}

    /// Back to the initial state: G = 0, Rinv = I, empty history.
    void reset() {
        const int dk = p_.stacked();
        filters_.assign(static_cast<std::size_t>(bins_), Eigen::MatrixXcd::Zero(dk, p_.channels));
        inv_cov_.assign(static_cast<std::size_t>(bins_), Eigen::MatrixXcd::Identity(dk, dk));
        history_.assign(static_cast<std::size_t>(p_.history()), Frame::Zero(p_.channels, bins_));
        head_ = 0;
        frame_index_ = 0;
        hermitian_dev_ = 0.0;
    }

    Frame step(const Frame& x, const PsdFrame& lambda) {
        if (x.rows() != p_.channels || x.cols() != bins_) throw ShapeError("WPE step: frame shape mismatch");
        if (lambda.bins() != bins_) throw ShapeError("WPE step: PSD size mismatch");
        if (!x.allFinite()) throw NumericError("WPE step: non-finite input frame");
        lambda.validate();

        const int d_ch = p_.channels;
        const int dk = p_.stacked();
        const double a = p_.alpha;
        Frame out(d_ch, bins_);
        Eigen::VectorXcd stacked(dk);
        double max_dev = 0.0;

        for (Eigen::Index f = 0; f < bins_; ++f) {
            for (int k = 0; k < p_.taps; ++k) {
                const Frame& past = delayed(p_.delay + k);
                stacked.segment(k * d_ch, d_ch) = past.col(f);
            }
            auto& g = filters_[static_cast<std::size_t>(f)];
            auto& rinv = inv_cov_[static_cast<std::size_t>(f)];

            const Eigen::VectorXcd err = x.col(f) - g.adjoint() * stacked;
            const Eigen::VectorXcd rx = rinv * stacked;
            const double lam = std::max(lambda.lambda[f], p_.lambda_floor);
            const double denom = a * lam + (1.0 - a) * stacked.dot(rx).real() + p_.epsilon;
            const Eigen::VectorXcd gain = ((1.0 - a) / denom) * rx;

            const Eigen::RowVectorXcd xr = stacked.adjoint() * rinv;
            rinv = (rinv - gain * xr) / a;

            const double norm = rinv.norm();
            if (norm > 0.0) max_dev = std::max(max_dev, (rinv - rinv.adjoint()).norm() / norm);
            rinv = (0.5 * (rinv + rinv.adjoint())).eval();

            g += gain * err.adjoint();
            out.col(f) = err;
        }

        history_[head_] = x;
        head_ = (head_ + 1) % history_.size();
        ++frame_index_;
        hermitian_dev_ = max_dev;
        return out;
    }

    /// Runs step over every frame of `spec`, continuing from the current state.
    Spectrogram process_sequence(const Spectrogram& spec, const PsdSource& psd) {
        Spectrogram out(spec.channels, spec.bins);
        out.frames.reserve(spec.num_frames());
        for (const auto& fr : spec.frames) {
            const PsdFrame lam = psd(frame_index_, fr);
            out.frames.push_back(step(fr, lam));
        }
        return out;
    }

    const WpeParams& params() const { return p_; }
    Eigen::Index bins() const { return bins_; }
    std::uint64_t frame_index() const { return frame_index_; }
    const Eigen::MatrixXcd& filter(Eigen::Index f) const { return filters_.at(static_cast<std::size_t>(f)); }
    const Eigen::MatrixXcd& inverse_covariance(Eigen::Index f) const {
        return inv_cov_.at(static_cast<std::size_t>(f));
    }
    /// Largest relative anti-Hermitian part of Rinv seen in the last step, before symmetrization.
    double last_hermitian_deviation() const { return hermitian_dev_; }

    bool operator==(const RlsWpe& o) const {
        if (!(p_ == o.p_) || bins_ != o.bins_ || frame_index_ != o.frame_index_) return false;
        for (std::size_t f = 0; f < filters_.size(); ++f)
            if (filters_[f] != o.filters_[f] || inv_cov_[f] != o.inv_cov_[f]) return false;
        for (int lag = 1; lag <= p_.history(); ++lag)
            if (delayed(lag) != o.delayed(lag)) return false;
        return true;
    }

    // Snapshot format (little-endian):
    //   "WPES" u32 version | i32 D K delay | i64 F | f64 alpha eps floor | u64 frame_index
    //   per bin: G (DK x D), Rinv (DK x DK) as column-major complex<f64>
    //   history frames from lag 1 to lag delay+K-1, each D x F column-major complex<f64>
    static constexpr std::uint32_t kSnapshotVersion = 1;

    void save(std::ostream& os) const {
        os.write("WPES", 4);
        put(os, kSnapshotVersion);
        put(os, static_cast<std::int32_t>(p_.channels));
        put(os, static_cast<std::int32_t>(p_.taps));
        put(os, static_cast<std::int32_t>(p_.delay));
        put(os, static_cast<std::int64_t>(bins_));
        put(os, p_.alpha);
        put(os, p_.epsilon);
        put(os, p_.lambda_floor);
        put(os, frame_index_);
        for (std::size_t f = 0; f < filters_.size(); ++f) {
            put_matrix(os, filters_[f]);
            put_matrix(os, inv_cov_[f]);
        }
        for (int lag = 1; lag <= p_.history(); ++lag) put_matrix(os, delayed(lag));
        if (!os) throw IoError("failed to write WPE snapshot");
    }

    static RlsWpe load(std::istream& is) {
        char magic[4];
        is.read(magic, 4);
        if (!is || std::memcmp(magic, "WPES", 4) != 0) throw IoError("not a WPE snapshot");
        if (get<std::uint32_t>(is) != kSnapshotVersion) throw IoError("unsupported WPE snapshot version");
        WpeParams p;
        p.channels = get<std::int32_t>(is);
        p.taps = get<std::int32_t>(is);
        p.delay = get<std::int32_t>(is);
        const auto bins = get<std::int64_t>(is);
        p.alpha = get<double>(is);
        p.epsilon = get<double>(is);
        p.lambda_floor = get<double>(is);
        if (!is || bins < 1 || bins > 65536) throw IoError("corrupt WPE snapshot header");
        RlsWpe w(p, bins);
        w.frame_index_ = get<std::uint64_t>(is);
        for (std::size_t f = 0; f < w.filters_.size(); ++f) {
            get_matrix(is, w.filters_[f]);
            get_matrix(is, w.inv_cov_[f]);
        }
        // Stored from lag 1 upward; rebuild the ring with head at 0.
        const int h = p.history();
        for (int lag = 1; lag <= h; ++lag) get_matrix(is, w.history_[static_cast<std::size_t>(h - lag)]);
        w.head_ = 0;
        if (!is) throw IoError("truncated WPE snapshot");
        return w;
    }

private:
    const Frame& delayed(int lag) const {
        const auto n = history_.size();
        return history_[(head_ + n - static_cast<std::size_t>(lag) % n) % n];
    }

    template <class T>
    static void put(std::ostream& os, T v) {
        static_assert(std::endian::native == std::endian::little, "snapshot I/O assumes little-endian host");
        os.write(reinterpret_cast<const char*>(&v), sizeof(T));
    }
    template <class T>
    static T get(std::istream& is) {
        T v{};
        is.read(reinterpret_cast<char*>(&v), sizeof(T));
        return v;
    }
    static void put_matrix(std::ostream& os, const Eigen::MatrixXcd& m) {
        os.write(reinterpret_cast<const char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(cplx)));
    }
    static void get_matrix(std::istream& is, Eigen::MatrixXcd& m) {
        is.read(reinterpret_cast<char*>(m.data()), static_cast<std::streamsize>(m.size() * sizeof(cplx)));
    }

    WpeParams p_;
    Eigen::Index bins_;
    std::vector<Eigen::MatrixXcd> filters_;
    std::vector<Eigen::MatrixXcd> inv_cov_;
    std::vector<Frame> history_;
    std::size_t head_ = 0;
    std::uint64_t frame_index_ = 0;
    double hermitian_dev_ = 0.0;
};

}  // namespace dereverb
