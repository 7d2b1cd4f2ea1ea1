#pragma once

#include <complex>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace dereverb {

using cplx = std::complex<double>;

/// One STFT frame: channels x frequency bins.
using Frame = Eigen::MatrixXcd;

inline constexpr int kSampleRate = 16000;

// Error families. The CLI maps each onto its own exit code.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ModelError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class IoError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::domain_error {
public:
    using std::domain_error::domain_error;
};

/// Multichannel time-domain signal, channels x samples, fixed at 16 kHz.
struct AudioBuffer {
    Eigen::MatrixXd samples;
    int sample_rate = kSampleRate;

    AudioBuffer() = default;
    AudioBuffer(Eigen::Index channels, Eigen::Index length, int rate = kSampleRate)
        : samples(Eigen::MatrixXd::Zero(channels, length)), sample_rate(rate) {}
    explicit AudioBuffer(Eigen::MatrixXd data, int rate = kSampleRate)
        : samples(std::move(data)), sample_rate(rate) {}

    Eigen::Index channels() const { return samples.rows(); }
    Eigen::Index length() const { return samples.cols(); }
    bool empty() const { return samples.size() == 0; }
    double energy() const { return samples.squaredNorm(); }

    void validate() const {
        if (channels() < 1) throw ShapeError("audio buffer has no channels");
        if (sample_rate != kSampleRate)
            throw ConfigError("unsupported sample rate " + std::to_string(sample_rate) +
                              " Hz (only 16000 Hz is supported)");
        if (!samples.allFinite()) throw NumericError("audio buffer contains non-finite samples");
    }
};

/// Complex time-frequency tensor stored frame by frame (each frame D x F).
struct Spectrogram {
    Eigen::Index channels = 0;
    Eigen::Index bins = 0;
    std::vector<Frame> frames;

    Spectrogram() = default;
    Spectrogram(Eigen::Index d, Eigen::Index f) : channels(d), bins(f) {}
    Spectrogram(Eigen::Index d, std::size_t t, Eigen::Index f)
        : channels(d), bins(f), frames(t, Frame::Zero(d, f)) {}

    std::size_t num_frames() const { return frames.size(); }
    Frame& operator[](std::size_t t) { return frames[t]; }
    const Frame& operator[](std::size_t t) const { return frames[t]; }

    void push_back(Frame frame) {
        if (frame.rows() != channels || frame.cols() != bins)
            throw ShapeError("frame shape does not match spectrogram");
        frames.push_back(std::move(frame));
    }

    bool all_finite() const {
        for (const auto& fr : frames)
            if (!fr.allFinite()) return false;
        return true;
    }

    /// Single-channel view of channel d.
    Spectrogram channel(Eigen::Index d) const {
        Spectrogram out(1, bins);
        out.frames.reserve(frames.size());
        for (const auto& fr : frames) out.frames.emplace_back(fr.row(d));
        return out;
    }
};

}  // namespace dereverb
