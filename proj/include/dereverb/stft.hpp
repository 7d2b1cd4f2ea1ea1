#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include <unsupported/Eigen/FFT>

#include "dereverb/types.hpp"

namespace dereverb {

/// Analysis/synthesis filterbank settings: 32 ms square-root Hann frames with
/// 75 % overlap at 16 kHz.
///
/// Normalization: the forward transform is unscaled, the inverse is scaled by
/// 1/fft_size. With pad_leading the signal is prefixed by window - hop zeros so
/// that frame t ends at sample (t + 1) * hop; this lets a streaming analyzer
/// emit exactly one frame per hop of input.
struct StftConfig {
    int window_samples = 512;
    int hop_samples = 128;
    int fft_size = 512;
    bool pad_leading = true;

    Eigen::Index bins() const { return fft_size / 2 + 1; }
    int pad_samples() const { return pad_leading ? window_samples - hop_samples : 0; }

    void validate() const {
        if (window_samples <= 0 || hop_samples <= 0 || fft_size < window_samples)
            throw ConfigError("invalid STFT sizes");
        if (window_samples % hop_samples != 0)
            throw ConfigError("STFT window must be a multiple of the hop");
        if (fft_size % 2 != 0) throw ConfigError("FFT size must be even");
    }

    /// Frames produced by batch analysis of `length` samples.
    std::size_t frame_count(Eigen::Index length) const {
        const Eigen::Index padded = length + pad_samples();
        if (padded < window_samples) return 0;
        return static_cast<std::size_t>((padded - window_samples) / hop_samples + 1);
    }
};

/// Periodic square-root Hann window.
inline Eigen::VectorXd sqrt_hann(int n) {
    Eigen::VectorXd w(n);
    for (int i = 0; i < n; ++i)
        w[i] = std::sqrt(0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * i / n));
    return w;
}

/// Least-squares synthesis window for analysis window w at the given hop:
/// ws[n] = w[n] / sum_k w[n + k hop]^2. For sqrt-Hann at 75 % overlap this is w / 2.
inline Eigen::VectorXd synthesis_window(const Eigen::VectorXd& w, int hop) {
    const Eigen::Index n = w.size();
    Eigen::VectorXd ws(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double denom = 0.0;
        for (Eigen::Index j = i % hop; j < n; j += hop) denom += w[j] * w[j];
        ws[i] = denom > 0.0 ? w[i] / denom : 0.0;
    }
    return ws;
}

/// Streaming STFT analysis for one multichannel stream.
class StftAnalyzer {
public:
    StftAnalyzer(Eigen::Index channels, StftConfig cfg = {})
        : cfg_(cfg), channels_(channels), window_(sqrt_hann(cfg.window_samples)) {
        cfg_.validate();
        if (channels < 1) throw ShapeError("analyzer needs at least one channel");
        fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
        reset();
    }

    void reset() {
        buffer_ = Eigen::MatrixXd::Zero(channels_, cfg_.window_samples);
        filled_ = cfg_.pad_samples();
    }

    const StftConfig& config() const { return cfg_; }
    Eigen::Index channels() const { return channels_; }

    /// Feed D x n samples; returns every frame completed by them, in order.
    std::vector<Frame> push(const Eigen::Ref<const Eigen::MatrixXd>& chunk) {
        if (chunk.rows() != channels_) throw ShapeError("analyzer: channel count mismatch");
        std::vector<Frame> frames;
        const int win = cfg_.window_samples;
        const int keep = win - cfg_.hop_samples;
        for (Eigen::Index n = 0; n < chunk.cols(); ++n) {
            buffer_.col(filled_++) = chunk.col(n);
            if (filled_ == win) {
                frames.push_back(transform());
                buffer_.leftCols(keep) = buffer_.rightCols(keep).eval();
                filled_ = keep;
            }
        }
        return frames;
    }

private:
    Frame transform() {
        Frame out(channels_, cfg_.bins());
        std::vector<double> in(cfg_.fft_size, 0.0);
        std::vector<cplx> spec;
        for (Eigen::Index d = 0; d < channels_; ++d) {
            for (int i = 0; i < cfg_.window_samples; ++i) in[i] = buffer_(d, i) * window_[i];
            fft_.fwd(spec, in);
            for (Eigen::Index f = 0; f < out.cols(); ++f) out(d, f) = spec[static_cast<std::size_t>(f)];
        }
        return out;
    }

    StftConfig cfg_;
    Eigen::Index channels_;
    Eigen::VectorXd window_;
    Eigen::MatrixXd buffer_;
    int filled_ = 0;
    Eigen::FFT<double> fft_;
};

/// Streaming overlap-add synthesis. Each frame yields `hop` finished samples;
/// with pad_leading the first window - hop emitted samples belong to the pad.
class StftSynthesizer {
public:
    StftSynthesizer(Eigen::Index channels, StftConfig cfg = {})
        : cfg_(cfg), channels_(channels),
          window_(synthesis_window(sqrt_hann(cfg.window_samples), cfg.hop_samples)) {
        cfg_.validate();
        fft_.SetFlag(Eigen::FFT<double>::HalfSpectrum);
        reset();
    }

    void reset() { ola_ = Eigen::MatrixXd::Zero(channels_, cfg_.window_samples); }

    /// Overlap-add one D x F frame and return the next `hop` output samples.
    Eigen::MatrixXd push(const Frame& frame) {
        if (frame.rows() != channels_ || frame.cols() != cfg_.bins())
            throw ShapeError("synthesizer: frame shape mismatch");
        std::vector<cplx> spec(static_cast<std::size_t>(cfg_.bins()));
        std::vector<double> time;
        for (Eigen::Index d = 0; d < channels_; ++d) {
            for (Eigen::Index f = 0; f < frame.cols(); ++f) spec[static_cast<std::size_t>(f)] = frame(d, f);
            fft_.inv(time, spec);
            for (int i = 0; i < cfg_.window_samples; ++i) ola_(d, i) += time[i] * window_[i];
        }
        const int hop = cfg_.hop_samples;
        const int keep = cfg_.window_samples - hop;
        Eigen::MatrixXd out = ola_.leftCols(hop);
        ola_.leftCols(keep) = ola_.rightCols(keep).eval();
        ola_.rightCols(hop).setZero();
        return out;
    }

    /// Remaining partially overlapped samples (window - hop of them).
    Eigen::MatrixXd flush() {
        Eigen::MatrixXd out = ola_.leftCols(cfg_.window_samples - cfg_.hop_samples);
        reset();
        return out;
    }

private:
    StftConfig cfg_;
    Eigen::Index channels_;
    Eigen::VectorXd window_;
    Eigen::MatrixXd ola_;
    Eigen::FFT<double> fft_;
};

/// Batch analysis: D x T x F with T = cfg.frame_count(length).
inline Spectrogram analyze(const AudioBuffer& audio, const StftConfig& cfg = {}) {
    if (audio.channels() < 1) throw ShapeError("analyze: no channels");
    if (audio.length() < cfg.window_samples) throw ShapeError("analyze: audio shorter than one window");
    StftAnalyzer an(audio.channels(), cfg);
    Spectrogram spec(audio.channels(), cfg.bins());
    spec.frames = an.push(audio.samples);
    return spec;
}

/// Batch synthesis, inverse of analyze on the interior. Returns
/// (T - 1) * hop + window - pad samples.
inline AudioBuffer synthesize(const Spectrogram& spec, const StftConfig& cfg = {}) {
    if (spec.bins != cfg.bins()) throw ShapeError("synthesize: bin count does not match config");
    if (spec.num_frames() == 0) return AudioBuffer(spec.channels, 0);
    StftSynthesizer syn(spec.channels, cfg);
    const Eigen::Index hop = cfg.hop_samples;
    const Eigen::Index total =
        static_cast<Eigen::Index>(spec.num_frames()) * hop + cfg.window_samples - hop;
    Eigen::MatrixXd out(spec.channels, total);
    Eigen::Index pos = 0;
    for (const auto& fr : spec.frames) {
        out.middleCols(pos, hop) = syn.push(fr);
        pos += hop;
    }
    out.rightCols(cfg.window_samples - hop) = syn.flush();
    const Eigen::Index pad = cfg.pad_samples();
    return AudioBuffer(Eigen::MatrixXd(out.rightCols(total - pad)));
}

}  // namespace dereverb
