#include <catch_amalgamated.hpp>

#include <filesystem>

#include "test_util.hpp"

using namespace dereverb;
using Catch::Approx;
using Catch::Matchers::ContainsSubstring;
using testutil::db;

namespace {

RoomImpulseResponse impulse_rir(Eigen::Index channels, Eigen::Index length, Eigen::Index at, double gain = 1.0) {
    RoomImpulseResponse r;
    r.taps = Eigen::MatrixXd::Zero(channels, length);
    r.taps.col(at).setConstant(gain);
    r.propagation_delay = at;
    return r;
}

AudioBuffer mono(const Eigen::MatrixXd& row) { return AudioBuffer(Eigen::MatrixXd(row)); }

}  // namespace

// ---------------------------------------------------------------------------
// audio buffers and WAV
// ---------------------------------------------------------------------------

TEST_CASE("audio buffer rejects non-16k rates", "[audio]") {
    AudioBuffer a(1, 10, 44100);
    REQUIRE_THROWS_WITH(a.validate(), ContainsSubstring("16000"));
    AudioBuffer b(1, 10);
    REQUIRE_NOTHROW(b.validate());
}

TEST_CASE("wav float32 round trip is exact for float-representable samples", "[wav]") {
    Eigen::MatrixXd x = testutil::randn(2, 300, 3, 0.2).cast<float>().cast<double>();
    const AudioBuffer a(x);
    const AudioBuffer b = wav::decode(wav::encode(a, wav::SampleFormat::Float32));
    REQUIRE(b.sample_rate == 16000);
    REQUIRE(b.samples == a.samples);
}

TEST_CASE("wav pcm16 round trip within one quantization step", "[wav]") {
    const Eigen::MatrixXd x = testutil::randn(1, 200, 4, 0.2).cwiseMax(-0.99).cwiseMin(0.99);
    const AudioBuffer b = wav::decode(wav::encode(AudioBuffer(x), wav::SampleFormat::Pcm16));
    REQUIRE((b.samples - x).cwiseAbs().maxCoeff() <= 1.0 / 32768.0);
}

TEST_CASE("wav decode rejects garbage and truncation", "[wav]") {
    std::vector<unsigned char> junk(64, 'x');
    REQUIRE_THROWS_AS(wav::decode(junk), IoError);
    auto bytes = wav::encode(AudioBuffer(testutil::randn(1, 10, 1, 0.1)));
    bytes.resize(30);
    REQUIRE_THROWS_AS(wav::decode(bytes), IoError);
    REQUIRE_THROWS_AS(wav::read("/nonexistent/dir/x.wav"), IoError);
}

// ---------------------------------------------------------------------------
// convolution, targets, RIR partition
// ---------------------------------------------------------------------------

TEST_CASE("convolve with a unit impulse at tap 0 replicates the dry signal", "[signal]") {
    const AudioBuffer dry = mono(testutil::randn(1, 400, 1));
    const AudioBuffer y = convolve(impulse_rir(3, 50, 0), dry);
    REQUIRE(y.channels() == 3);
    for (Eigen::Index d = 0; d < 3; ++d) REQUIRE(y.samples.row(d) == dry.samples.row(0));
}

TEST_CASE("convolve with an impulse at tap 100 delays by 100 samples", "[signal]") {
    const AudioBuffer dry = mono(testutil::randn(1, 500, 2));
    const AudioBuffer y = convolve(impulse_rir(2, 200, 100), dry);
    REQUIRE(y.length() == 500);
    REQUIRE(y.samples.leftCols(100).isZero(0.0));
    REQUIRE(y.samples.row(1).tail(400) == dry.samples.row(0).head(400));
}

TEST_CASE("convolve matches the direct convolution sum", "[signal]") {
    RoomImpulseResponse h;
    h.taps = testutil::randn(2, 3, 9);
    const AudioBuffer dry = mono(testutil::randn(1, 16, 10));
    const AudioBuffer y = convolve(h, dry);
    for (Eigen::Index d = 0; d < 2; ++d)
        for (Eigen::Index n = 0; n < 16; ++n) {
            double acc = 0.0;
            for (Eigen::Index k = 0; k <= std::min<Eigen::Index>(n, 2); ++k) acc += h.taps(d, k) * dry.samples(0, n - k);
            REQUIRE(y.samples(d, n) == Approx(acc).margin(1e-14));
        }
}

TEST_CASE("convolve FFT path agrees with the direct path", "[signal]") {
    // 3000 x 3000 exceeds the direct-sum threshold; the 100-sample prefix does not.
    RoomImpulseResponse h;
    h.taps = testutil::randn(1, 3000, 11);
    const Eigen::MatrixXd x = testutil::randn(1, 3000, 12);
    const AudioBuffer fast = convolve(h, mono(x));
    const AudioBuffer slow = convolve(h, mono(x.leftCols(100)));
    REQUIRE((fast.samples.leftCols(100) - slow.samples).cwiseAbs().maxCoeff() < 1e-10);
}

TEST_CASE("convolve is linear", "[signal][property]") {
    RoomImpulseResponse h;
    h.taps = testutil::randn(2, 700, 13);
    const Eigen::MatrixXd s1 = testutil::randn(1, 6000, 14), s2 = testutil::randn(1, 6000, 15);
    const double a = 0.7, b = -2.3;
    const Eigen::MatrixXd lhs = convolve(h, mono(a * s1 + b * s2)).samples;
    const Eigen::MatrixXd rhs = a * convolve(h, mono(s1)).samples + b * convolve(h, mono(s2)).samples;
    REQUIRE((lhs - rhs).norm() <= 1e-10 * rhs.norm());
}

TEST_CASE("convolve rejects multichannel dry input", "[signal]") {
    REQUIRE_THROWS_AS(convolve(impulse_rir(1, 4, 0), AudioBuffer(2, 10)), ShapeError);
}

TEST_CASE("CI target of an RIR shorter than 16 ms equals the reverberant signal", "[signal]") {
    RoomImpulseResponse h;
    h.taps = Eigen::MatrixXd::Zero(2, 300);
    h.taps.leftCols(200) = testutil::randn(2, 200, 20);
    h.propagation_delay = 0;
    const AudioBuffer dry = mono(testutil::randn(1, 1000, 21));
    REQUIRE(make_target(h, dry, ListenerProfile::cochlear_implant()).samples == convolve(h, dry).samples);
}

TEST_CASE("HA target of direct tap plus late energy is the scaled delayed dry", "[signal]") {
    RoomImpulseResponse h;
    h.taps = Eigen::MatrixXd::Zero(1, 3000);
    h.propagation_delay = 30;
    h.taps(0, 30) = 0.8;
    h.taps.rightCols(2000) = testutil::randn(1, 2000, 22, 0.1);  // starts well after 30 + 640
    const AudioBuffer dry = mono(testutil::randn(1, 2000, 23));
    const AudioBuffer t = make_target(h, dry, ListenerProfile::hearing_aid());
    // FFT convolution at this size: silence is zero up to round-off.
    REQUIRE(t.samples.leftCols(30).cwiseAbs().maxCoeff() < 1e-14);
    REQUIRE((t.samples.rightCols(1970) - 0.8 * dry.samples.leftCols(1970)).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("target energy matches the tap-energy partition for white excitation", "[signal]") {
    // A sparse RIR keeps the early and late parts orthogonal for an impulse
    // excitation; target energy is then exactly the early tap energy.
    RoomImpulseResponse h;
    h.taps = Eigen::MatrixXd::Zero(2, 2000);
    h.propagation_delay = 10;
    h.taps.middleCols(10, 600) = testutil::randn(2, 600, 30);
    h.taps.middleCols(700, 1300) = testutil::randn(2, 1300, 31, 0.3);
    Eigen::MatrixXd imp = Eigen::MatrixXd::Zero(1, 4000);
    imp(0, 0) = 1.0;
    const AudioBuffer t = make_target(h, mono(imp), ListenerProfile::hearing_aid());
    const double expect = tap_energy(h, 0, 10 + 640);
    REQUIRE(t.energy() == Approx(expect).epsilon(1e-9));
    const AudioBuffer full = convolve(h, mono(imp));
    REQUIRE(full.energy() - t.energy() == Approx(tap_energy(h, 650, 2000)).epsilon(1e-9));
}

TEST_CASE("HA target keeps at least the CI target's energy", "[signal][property]") {
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
        RirSpec spec;
        spec.seed = seed;
        spec.t60 = 0.4 + 0.1 * static_cast<double>(seed);
        const RoomImpulseResponse h = generate_rir(spec);
        Eigen::MatrixXd imp = Eigen::MatrixXd::Zero(1, h.length() + 10);
        imp(0, 0) = 1.0;
        const double ha = make_target(h, mono(imp), ListenerProfile::hearing_aid()).energy();
        const double ci = make_target(h, mono(imp), ListenerProfile::cochlear_implant()).energy();
        REQUIRE(ha >= ci);
    }
}

TEST_CASE("split_rir is an exact partition", "[signal][property]") {
    RoomImpulseResponse h;
    h.taps = testutil::randn(2, 5000, 40);
    h.propagation_delay = 77;
    const RirParts p = split_rir(h, 5, 10);
    REQUIRE((p.target.taps + p.moderate.taps + p.final_part.taps) == h.taps);
    const double late = tap_energy(h, 77 + 640, 5000);
    REQUIRE(p.moderate.taps.squaredNorm() + p.final_part.taps.squaredNorm() == Approx(late).epsilon(1e-12));
}

TEST_CASE("moderate range spans 40 ms to 120 ms after the direct path", "[signal]") {
    RoomImpulseResponse h;
    h.taps = Eigen::MatrixXd::Ones(1, 4000);
    h.propagation_delay = 0;
    const RirParts p = split_rir(h, 5, 10);
    const auto& m = p.moderate.taps;
    REQUIRE(m(0, 639) == 0.0);
    REQUIRE(m(0, 640) == 1.0);  // 40 ms
    REQUIRE(m(0, 1919) == 1.0);
    REQUIRE(m(0, 1920) == 0.0);  // 120 ms
}

TEST_CASE("listener profiles", "[signal]") {
    REQUIRE(ListenerProfile::hearing_aid().cutoff_samples() == 640);
    REQUIRE(ListenerProfile::cochlear_implant().cutoff_samples() == 256);
    REQUIRE(ListenerProfile::from_name("ci").delta_frames == 2);
    REQUIRE_THROWS_AS(ListenerProfile::from_name("cat"), ConfigError);
}

TEST_CASE("pipeline config validation", "[signal]") {
    PipelineConfig c;
    REQUIRE_NOTHROW(c.validate());
    c.alpha = 1.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.epsilon = 0.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = {};
    c.taps = 0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

// ---------------------------------------------------------------------------
// STFT
// ---------------------------------------------------------------------------

TEST_CASE("frame count formula", "[stft]") {
    StftConfig cfg;
    // floor((16000 + 384 - 512) / 128) + 1
    REQUIRE(cfg.frame_count(16000) == 125);
    const AudioBuffer one_second(1, 16000);
    REQUIRE(analyze(one_second, cfg).num_frames() == 125);
    cfg.pad_leading = false;
    // floor((16000 - 512) / 128) + 1
    REQUIRE(cfg.frame_count(16000) == 122);
    REQUIRE(analyze(one_second, cfg).num_frames() == 122);
}

TEST_CASE("zero signal gives a zero spectrogram and back", "[stft]") {
    const Spectrogram s = analyze(AudioBuffer(2, 3000));
    REQUIRE(s.bins == 257);
    for (const auto& f : s.frames) REQUIRE(f.isZero(0.0));
    REQUIRE(synthesize(s).samples.isZero(0.0));
}

TEST_CASE("bin-centered sinusoid concentrates in its bin", "[stft]") {
    const int bin = 40;
    Eigen::MatrixXd x(1, 4096);
    for (Eigen::Index n = 0; n < x.cols(); ++n) x(0, n) = std::cos(2.0 * M_PI * bin * n / 512.0 + 0.3);
    StftConfig cfg;
    cfg.pad_leading = false;
    const Spectrogram s = analyze(AudioBuffer(x), cfg);
    for (const auto& f : s.frames) {
        // A sqrt-Hann main lobe spans three bins; the centre bin alone holds ~81%.
        const double total = f.squaredNorm();
        const double lobe = f.block(0, bin - 1, 1, 3).squaredNorm();
        REQUIRE(lobe / total >= 0.99);
        REQUIRE(std::norm(f(0, bin)) >= std::norm(f(0, bin - 1)));
        REQUIRE(std::norm(f(0, bin)) >= std::norm(f(0, bin + 1)));
    }
}

TEST_CASE("analysis window is periodic sqrt-Hann and the synthesis window is its least-squares dual", "[stft]") {
    const Eigen::VectorXd w = sqrt_hann(512);
    for (int i = 0; i < 512; ++i) REQUIRE(w[i] == Approx(std::sqrt(0.5 - 0.5 * std::cos(2.0 * M_PI * i / 512))).margin(1e-15));
    const Eigen::VectorXd ws = synthesis_window(w, 128);
    // Hann at 75% overlap sums to 2, so the dual is w / 2.
    REQUIRE((ws - 0.5 * w).cwiseAbs().maxCoeff() < 1e-14);
}

TEST_CASE("analyze then synthesize reconstructs white noise", "[stft]") {
    const AudioBuffer x(testutil::randn(2, 8000, 50));
    const AudioBuffer y = synthesize(analyze(x));
    // 62 frames cover (62 - 1) * 128 + 512 - 384 samples; the trailing 64 never fill a frame.
    REQUIRE(y.length() == 7936);
    REQUIRE(testutil::rel_error_db(x.samples, y.samples, 512, 7000) < -60.0);
}

TEST_CASE("round trip of a speech-like signal preserves interior energy", "[stft]") {
    const AudioBuffer x = speech_like(2.0, 5);
    const AudioBuffer y = synthesize(analyze(x));
    const double ex = x.samples.middleCols(512, 30000).squaredNorm();
    const double ey = y.samples.middleCols(512, 30000).squaredNorm();
    REQUIRE(std::abs(db(ey / ex)) < 0.1);
}

TEST_CASE("STFT is linear", "[stft][property]") {
    const Eigen::MatrixXd a = testutil::randn(1, 3000, 60), b = testutil::randn(1, 3000, 61);
    const Spectrogram sa = analyze(AudioBuffer(a)), sb = analyze(AudioBuffer(b));
    const Spectrogram sc = analyze(AudioBuffer(Eigen::MatrixXd(1.5 * a - 0.25 * b)));
    for (std::size_t t = 0; t < sc.num_frames(); ++t) {
        const Frame expect = 1.5 * sa[t] - 0.25 * sb[t];
        REQUIRE((sc[t] - expect).norm() <= 1e-10 * expect.norm() + 1e-14);
    }
}

TEST_CASE("hop-by-hop analysis equals batch analysis", "[stft][streaming]") {
    const AudioBuffer x(testutil::randn(2, 5000, 70));
    const Spectrogram batch = analyze(x);
    StftAnalyzer an(2);
    std::vector<Frame> frames;
    for (Eigen::Index pos = 0; pos + 128 <= x.length(); pos += 128) {
        auto f = an.push(x.samples.middleCols(pos, 128));
        REQUIRE(f.size() <= 1);
        frames.insert(frames.end(), f.begin(), f.end());
    }
    REQUIRE(frames.size() == batch.num_frames());
    for (std::size_t t = 0; t < frames.size(); ++t) REQUIRE(frames[t] == batch[t]);
}

TEST_CASE("analyze rejects signals shorter than a window", "[stft]") {
    REQUIRE_THROWS_AS(analyze(AudioBuffer(1, 100)), ShapeError);
}

// ---------------------------------------------------------------------------
// PSD estimation
// ---------------------------------------------------------------------------

TEST_CASE("oracle PSD", "[psd]") {
    REQUIRE(oracle_psd(Frame::Zero(2, 9)).lambda.isZero(0.0));
    Frame unit(1, 5);
    for (int f = 0; f < 5; ++f) unit(0, f) = std::polar(1.0, 0.7 * f);
    REQUIRE((oracle_psd(unit).lambda - 1.0).abs().maxCoeff() < 1e-15);
    const Frame r = testutil::crandn(2, 20, 80);
    const PsdFrame p = oracle_psd(r);
    for (int f = 0; f < 20; ++f) REQUIRE(p.lambda[f] == r(0, f).real() * r(0, f).real() + r(0, f).imag() * r(0, f).imag());
}

TEST_CASE("smoothed periodogram matches the unrolled recursion", "[psd]") {
    const double beta = 0.85;
    SmoothedPeriodogram sp(beta);
    std::vector<Frame> xs;
    for (int t = 0; t < 10; ++t) xs.push_back(testutil::crandn(2, 6, 90 + t));
    for (int t = 0; t < 10; ++t) {
        const PsdFrame got = sp.step(xs[static_cast<std::size_t>(t)]);
        // Seeded with the first periodogram: lambda_t = beta^t p_0 + sum_{j=1..t} (1-beta) beta^{t-j} p_j.
        Eigen::ArrayXd expect = std::pow(beta, t) * xs[0].row(0).array().abs2().transpose();
        for (int j = 1; j <= t; ++j)
            expect += (1.0 - beta) * std::pow(beta, t - j) * xs[static_cast<std::size_t>(j)].row(0).array().abs2().transpose();
        REQUIRE((got.lambda - expect).abs().maxCoeff() < 1e-12);
    }
}

TEST_CASE("smoothed periodogram limits", "[psd]") {
    SmoothedPeriodogram zero_beta(0.0);
    const Frame a = testutil::crandn(1, 4, 100), b = testutil::crandn(1, 4, 101);
    zero_beta.step(a);
    REQUIRE(zero_beta.step(b).lambda.isApprox(b.row(0).array().abs2().transpose().eval(), 1e-15));

    SmoothedPeriodogram sp(0.85);
    Frame c = Frame::Constant(1, 4, cplx(0.0, 3.0));
    sp.step(Frame::Zero(1, 4));
    for (int t = 1; t <= 50; ++t) {
        const double gap = (9.0 - sp.step(c).lambda).abs().maxCoeff();
        REQUIRE(gap == Approx(9.0 * std::pow(0.85, t)).epsilon(1e-9));
    }
    REQUIRE_THROWS_AS(SmoothedPeriodogram(1.0), ConfigError);
}

TEST_CASE("smoothed periodogram stays within the observed range", "[psd][property]") {
    SmoothedPeriodogram sp(0.85);
    Eigen::ArrayXd lo = Eigen::ArrayXd::Constant(8, 1e300), hi = Eigen::ArrayXd::Zero(8);
    for (int t = 0; t < 40; ++t) {
        const Frame x = testutil::crandn(1, 8, 200 + t) * (1.0 + t % 7);
        const Eigen::ArrayXd p = x.row(0).array().abs2().transpose();
        lo = lo.min(p);
        hi = hi.max(p);
        const Eigen::ArrayXd l = sp.step(x).lambda;
        REQUIRE((l >= lo * (1 - 1e-12)).all());
        REQUIRE((l <= hi * (1 + 1e-12)).all());
    }
}

TEST_CASE("PSD sources ignore non-reference channels", "[psd][property]") {
    Frame x = testutil::crandn(3, 10, 300);
    Frame y = x;
    y.bottomRows(2) = testutil::crandn(2, 10, 301);
    REQUIRE(oracle_psd(x).lambda.isApprox(oracle_psd(y).lambda, 0.0));
    SmoothedPeriodogram a, b;
    REQUIRE((a.step(x).lambda == b.step(y).lambda).all());
}

TEST_CASE("mask to PSD", "[psd]") {
    const Eigen::ArrayXd mag = testutil::uniform(16, 400, 0.0, 3.0);
    REQUIRE((mask_to_psd({Eigen::ArrayXd::Ones(16)}, mag).lambda == mag.square()).all());
    REQUIRE(mask_to_psd({Eigen::ArrayXd::Zero(16)}, mag).lambda.isZero(0.0));
    REQUIRE((mask_to_psd({Eigen::ArrayXd::Constant(4, 0.5)}, Eigen::ArrayXd::Constant(4, 2.0)).lambda == 1.0).all());
    const Eigen::ArrayXd m = testutil::uniform(16, 401);
    REQUIRE((mask_to_psd({m}, mag).lambda <= mag.square()).all());
    REQUIRE_THROWS_AS(mask_to_psd({m}, Eigen::ArrayXd::Ones(3)), ShapeError);
}

// ---------------------------------------------------------------------------
// post-filter
// ---------------------------------------------------------------------------

TEST_CASE("Wiener gain special values", "[postfilter]") {
    const PsdFrame a{Eigen::ArrayXd::Constant(3, 2.0)};
    REQUIRE((wiener_gain(a, a) == 0.5).all());
    REQUIRE((wiener_gain(a, {Eigen::ArrayXd::Zero(3)}) == 1.0).all());
    REQUIRE((wiener_gain({Eigen::ArrayXd::Zero(3)}, a) == 0.0).all());
    REQUIRE((wiener_gain({Eigen::ArrayXd::Zero(3)}, {Eigen::ArrayXd::Zero(3)}) == 0.0).all());
    REQUIRE_THROWS_AS(wiener_gain({Eigen::ArrayXd::Constant(3, -1.0)}, a), NumericError);
}

TEST_CASE("optional gain floor", "[postfilter]") {
    const PsdFrame v{Eigen::ArrayXd::Zero(2)}, r{Eigen::ArrayXd::Ones(2)};
    REQUIRE((wiener_gain(v, r, 0.1) == 0.1).all());
}

TEST_CASE("equal masks halve every bin on every channel", "[postfilter]") {
    const Frame v = testutil::crandn(2, 30, 500);
    const MaskFrame m{testutil::uniform(30, 501, 0.05, 1.0)};
    const Frame y = postfilter_apply({m, m}, v);
    REQUIRE((y - 0.5 * v).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("zero interference mask passes the frame bitwise", "[postfilter]") {
    const Frame v = testutil::crandn(2, 30, 510);
    const Frame y = postfilter_apply({{testutil::uniform(30, 511, 0.01, 1.0)}, {Eigen::ArrayXd::Zero(30)}}, v);
    REQUIRE(y == v);
}

TEST_CASE("post-filter is positively homogeneous", "[postfilter][property]") {
    const Frame v = testutil::crandn(2, 30, 520);
    const PostfilterMasks m{{testutil::uniform(30, 521)}, {testutil::uniform(30, 522)}};
    REQUIRE((postfilter_apply(m, 3.5 * v) - 3.5 * postfilter_apply(m, v)).norm() < 1e-12 * v.norm());
}

TEST_CASE("single-mask post-filter uses the complement as interference", "[postfilter]") {
    const Frame x = testutil::crandn(1, 64, 530);
    const Eigen::ArrayXd m = testutil::uniform(64, 531);
    const Frame y = postfilter_apply_single({m}, x);
    const Eigen::ArrayXd g = m.square() / (m.square() + (1.0 - m).square());
    for (int f = 0; f < 64; ++f) REQUIRE(std::abs(y(0, f) - g[f] * x(0, f)) < 1e-14);
}

TEST_CASE("post-filter rejects invalid masks", "[postfilter]") {
    const Frame v = testutil::crandn(1, 4, 540);
    REQUIRE_THROWS_AS(postfilter_apply({{Eigen::ArrayXd::Constant(4, 1.5)}, {Eigen::ArrayXd::Zero(4)}}, v),
                      NumericError);
    REQUIRE_THROWS_AS(postfilter_apply({{Eigen::ArrayXd::Zero(3)}, {Eigen::ArrayXd::Zero(3)}}, v), ShapeError);
}
