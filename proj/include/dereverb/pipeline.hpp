#pragma once

#include <array>
#include <cmath>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "dereverb/lstm.hpp"
#include "dereverb/metrics.hpp"
#include "dereverb/postfilter.hpp"
#include "dereverb/psd.hpp"
#include "dereverb/rls_wpe.hpp"
#include "dereverb/scene.hpp"
#include "dereverb/signal.hpp"
#include "dereverb/stft.hpp"

namespace dereverb {

enum class PipelineMode { RlsWpe, OPsdWpe, DnnPfOnly, DnnWpe, E2epWpe, DnnWpePf, E2epWpePf, Passthrough };

struct ModeTraits {
    PipelineMode mode;
    const char* name;        // CLI spelling
    const char* strategy;    // strategy acronym, empty for passthrough
    bool linear_filter;
    PsdMode psd;
    bool needs_wpe_net;
    bool needs_pf_net;
};

// The E2Ep variants differ from their DNN counterparts only in how the mask
// network was trained; at inference time they run the same graph.
inline constexpr std::array<ModeTraits, 8> kModes = {{
    {PipelineMode::RlsWpe, "rls_wpe", "RLS-WPE", true, PsdMode::Smoothed, false, false},
    {PipelineMode::OPsdWpe, "o_psd_wpe", "O-PSD-WPE", true, PsdMode::Oracle, false, false},
    {PipelineMode::DnnPfOnly, "dnn_pf_only", "DNN-PF", false, PsdMode::Neural, true, false},
    {PipelineMode::DnnWpe, "dnn_wpe", "DNN-WPE", true, PsdMode::Neural, true, false},
    {PipelineMode::E2epWpe, "e2ep_wpe", "E2Ep-WPE", true, PsdMode::Neural, true, false},
    {PipelineMode::DnnWpePf, "dnn_wpe_pf", "DNN-WPE+DNN-PF", true, PsdMode::Neural, true, true},
    {PipelineMode::E2epWpePf, "e2ep_wpe_pf", "E2Ep-WPE+DNN-PF", true, PsdMode::Neural, true, true},
    {PipelineMode::Passthrough, "passthrough", "", false, PsdMode::Smoothed, false, false},
}};

inline const ModeTraits& traits(PipelineMode m) {
    for (const auto& t : kModes)
        if (t.mode == m) return t;
    throw ConfigError("unknown pipeline mode");
}

inline PipelineMode parse_mode(std::string_view name) {
    for (const auto& t : kModes)
        if (name == t.name) return t.mode;
    throw ConfigError("unknown pipeline mode '" + std::string(name) + "'");
}

inline std::string to_string(PipelineMode m) { return traits(m).name; }

// ---------------------------------------------------------------------------
// Config file (JSON). Every key is optional.
// ---------------------------------------------------------------------------

inline PipelineConfig config_from_json(const nlohmann::json& j, PipelineConfig cfg = {}) {
    try {
        cfg.taps = j.value("taps", cfg.taps);
        cfg.channels = j.value("channels", cfg.channels);
        cfg.alpha = j.value("alpha", cfg.alpha);
        cfg.epsilon = j.value("epsilon", cfg.epsilon);
        cfg.moderate_frames = j.value("moderate_frames", cfg.moderate_frames);
        if (j.contains("profile")) cfg.profile = ListenerProfile::from_name(j.at("profile").get<std::string>());
        if (j.contains("delta_frames")) cfg.profile.delta_frames = j.at("delta_frames").get<int>();
        cfg.postfilter_enabled = j.value("postfilter_enabled", cfg.postfilter_enabled);
        cfg.smoothing_beta = j.value("smoothing_beta", cfg.smoothing_beta);
        cfg.min_gain = j.value("min_gain", cfg.min_gain);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("malformed config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

inline nlohmann::json config_to_json(const PipelineConfig& cfg) {
    return {{"taps", cfg.taps},
            {"channels", cfg.channels},
            {"alpha", cfg.alpha},
            {"epsilon", cfg.epsilon},
            {"moderate_frames", cfg.moderate_frames},
            {"profile", cfg.profile.name()},
            {"delta_frames", cfg.profile.delta_frames},
            {"psd_mode", to_string(cfg.psd_mode)},
            {"postfilter_enabled", cfg.postfilter_enabled},
            {"smoothing_beta", cfg.smoothing_beta},
            {"min_gain", cfg.min_gain}};
}

/// Frame-online dereverberation pipeline for one stream.
///
/// push() accepts any number of samples and returns every output sample that
/// became final, so output is delayed by latency() samples relative to input.
/// Output depends only on the concatenated input, never on how it was chunked.
class Pipeline {
public:
    Pipeline(PipelineConfig cfg, PipelineMode mode, std::shared_ptr<const LstmMaskModel> wpe_net = nullptr,
             std::shared_ptr<const LstmMaskModel> pf_net = nullptr, Eigen::Index input_channels = -1,
             StftConfig stft = {})
        : cfg_(cfg), mode_(mode), traits_(traits(mode)), stft_(stft), wpe_net_(std::move(wpe_net)),
          pf_net_(std::move(pf_net)) {
        cfg_.psd_mode = traits_.psd;
        cfg_.postfilter_enabled = traits_.needs_pf_net;
        cfg_.validate();
        stft_.validate();

        channels_ = input_channels > 0 ? input_channels : cfg_.channels;
        if (traits_.linear_filter && channels_ != cfg_.channels)
            throw ConfigError("mode " + std::string(traits_.name) + " expects " + std::to_string(cfg_.channels) +
                              " channels, input has " + std::to_string(channels_));

        const Eigen::Index bins = stft_.bins();
        if (traits_.needs_wpe_net) check_model(wpe_net_.get(), 1, "WPE mask network", bins);
        if (traits_.needs_pf_net) check_model(pf_net_.get(), 2, "post-filter mask network", bins);

        analyzer_.emplace(channels_, stft_);
        synthesizer_.emplace(channels_, stft_);
        if (traits_.psd == PsdMode::Oracle && traits_.linear_filter) target_analyzer_.emplace(1, stft_);
        if (traits_.linear_filter) wpe_.emplace(WpeParams::from_config(cfg_), bins);
        if (traits_.psd == PsdMode::Smoothed && traits_.linear_filter) smoother_.emplace(cfg_.smoothing_beta);
        if (wpe_net_ && traits_.needs_wpe_net) wpe_state_ = make_state(*wpe_net_);
        if (pf_net_ && traits_.needs_pf_net) pf_state_ = make_state(*pf_net_);
    }

    const PipelineConfig& config() const { return cfg_; }
    PipelineMode mode() const { return mode_; }
    const StftConfig& stft() const { return stft_; }
    Eigen::Index channels() const { return channels_; }
    std::uint64_t frames_processed() const { return frames_; }
    Eigen::Index latency() const { return stft_.pad_samples(); }
    bool needs_oracle_target() const { return target_analyzer_.has_value(); }
    const RlsWpe* wpe() const { return wpe_ ? &*wpe_ : nullptr; }

    /// Feeds D x n input samples (plus the time-aligned oracle target for
    /// o_psd_wpe, reference channel first) and returns the finished output.
    Eigen::MatrixXd push(const Eigen::Ref<const Eigen::MatrixXd>& input,
                         const Eigen::MatrixXd* oracle_target = nullptr) {
        if (input.rows() != channels_) throw ShapeError("pipeline: input channel count mismatch");
        if (!input.allFinite()) throw NumericError("pipeline: non-finite input samples");
        std::vector<Frame> targets;
        if (target_analyzer_) {
            if (!oracle_target || oracle_target->cols() != input.cols() || oracle_target->rows() < 1)
                throw ConfigError("o_psd_wpe needs a time-aligned oracle target for every input chunk");
            targets = target_analyzer_->push(oracle_target->topRows(1));
        }
        const std::vector<Frame> frames = analyzer_->push(input);
        Eigen::MatrixXd out(channels_, static_cast<Eigen::Index>(frames.size()) * stft_.hop_samples);
        for (std::size_t i = 0; i < frames.size(); ++i) {
            const Frame y = process_frame(frames[i], targets.empty() ? nullptr : &targets[i]);
            out.middleCols(static_cast<Eigen::Index>(i) * stft_.hop_samples, stft_.hop_samples) =
                synthesizer_->push(y);
        }
        return out;
    }

    /// Pushes latency() zeros so every sample fed so far is fully synthesized.
    Eigen::MatrixXd flush() {
        const Eigen::MatrixXd zeros = Eigen::MatrixXd::Zero(channels_, latency());
        const Eigen::MatrixXd zero_target = Eigen::MatrixXd::Zero(1, latency());
        return push(zeros, target_analyzer_ ? &zero_target : nullptr);
    }

    /// One STFT frame through the mode's processing chain.
    Frame process_frame(const Frame& x, const Frame* target = nullptr) {
        ++frames_;
        if (mode_ == PipelineMode::Passthrough) return x;

        if (!traits_.linear_filter) {
            const Eigen::ArrayXd mag = x.row(kReferenceChannel).array().abs().transpose();
            const MaskFrame m = step(*wpe_net_, *wpe_state_, mag).front();
            return postfilter_apply_single(m, x, cfg_.min_gain);
        }

        PsdFrame lambda;
        switch (traits_.psd) {
            case PsdMode::Oracle:
                if (!target) throw ConfigError("o_psd_wpe needs an oracle target frame");
                lambda = oracle_psd(*target);
                break;
            case PsdMode::Smoothed:
                lambda = smoother_->step(x);
                break;
            case PsdMode::Neural: {
                const Eigen::ArrayXd mag = x.row(kReferenceChannel).array().abs().transpose();
                lambda = mask_to_psd(step(*wpe_net_, *wpe_state_, mag).front(), mag);
                break;
            }
        }
        const Frame v = wpe_->step(x, lambda);
        if (!traits_.needs_pf_net) return v;

        const Eigen::ArrayXd vmag = v.row(kReferenceChannel).array().abs().transpose();
        auto masks = step(*pf_net_, *pf_state_, vmag);
        return postfilter_apply({std::move(masks[0]), std::move(masks[1])}, v, cfg_.min_gain);
    }

private:
    static void check_model(const LstmMaskModel* m, int heads, const char* what, Eigen::Index bins) {
        if (!m) throw ModelError(std::string("mode requires a ") + what);
        if (m->out_masks != heads)
            throw ModelError(std::string(what) + " must have " + std::to_string(heads) + " output mask(s), file has " +
                             std::to_string(m->out_masks));
        if (m->input_dim != bins)
            throw ModelError(std::string(what) + " input_dim " + std::to_string(m->input_dim) +
                             " does not match " + std::to_string(bins) + " frequency bins");
    }

    PipelineConfig cfg_;
    PipelineMode mode_;
    ModeTraits traits_;
    StftConfig stft_;
    Eigen::Index channels_ = 0;
    std::shared_ptr<const LstmMaskModel> wpe_net_, pf_net_;
    std::optional<StftAnalyzer> analyzer_, target_analyzer_;
    std::optional<StftSynthesizer> synthesizer_;
    std::optional<RlsWpe> wpe_;
    std::optional<SmoothedPeriodogram> smoother_;
    std::optional<ModelState> wpe_state_, pf_state_;
    std::uint64_t frames_ = 0;
};

/// Processes a whole signal through `pipe` in chunks of `chunk` samples
/// (0 = one chunk) and returns output aligned with, and as long as, the input.
inline AudioBuffer run_pipeline(Pipeline& pipe, const AudioBuffer& input, const AudioBuffer* oracle_target = nullptr,
                                Eigen::Index chunk = 0) {
    input.validate();
    if (pipe.needs_oracle_target() && (!oracle_target || oracle_target->length() != input.length()))
        throw ConfigError("o_psd_wpe needs an oracle target as long as the input");
    const Eigen::Index len = input.length();
    if (chunk <= 0) chunk = std::max<Eigen::Index>(len, 1);

    std::vector<Eigen::MatrixXd> pieces;
    Eigen::Index produced = 0;
    for (Eigen::Index pos = 0; pos < len; pos += chunk) {
        const Eigen::Index n = std::min(chunk, len - pos);
        Eigen::MatrixXd tgt;
        if (pipe.needs_oracle_target()) tgt = oracle_target->samples.middleCols(pos, n);
        pieces.push_back(pipe.push(input.samples.middleCols(pos, n), pipe.needs_oracle_target() ? &tgt : nullptr));
        produced += pieces.back().cols();
    }
    // Complete the last partial hop, then drain the overlap-add buffer.
    const Eigen::Index hop = pipe.stft().hop_samples;
    const Eigen::Index tail = (hop - len % hop) % hop;
    if (tail > 0) {
        const Eigen::MatrixXd z = Eigen::MatrixXd::Zero(input.channels(), tail);
        const Eigen::MatrixXd zt = Eigen::MatrixXd::Zero(1, tail);
        pieces.push_back(pipe.push(z, pipe.needs_oracle_target() ? &zt : nullptr));
        produced += pieces.back().cols();
    }
    pieces.push_back(pipe.flush());
    produced += pieces.back().cols();

    Eigen::MatrixXd all(input.channels(), produced);
    Eigen::Index pos = 0;
    for (const auto& p : pieces) {
        all.middleCols(pos, p.cols()) = p;
        pos += p.cols();
    }
    return AudioBuffer(Eigen::MatrixXd(all.middleCols(pipe.latency(), len)));
}

// ---------------------------------------------------------------------------
// Evaluation against a scene.
// ---------------------------------------------------------------------------

struct EvalOptions {
    ListenerProfile profile = ListenerProfile::hearing_aid();
    int moderate_frames = 10;           // L_m
    Eigen::Index init_samples = 64000;  // excluded initialization period
    std::vector<Eigen::Index> segment_starts;  // per-segment breakdown when non-empty
    std::optional<int> order;           // P; defaults to the RIR's T30 in frames
    bool estimate_delay = false;        // take delta* from cross-correlation instead of the RIR
    std::string mode = "unknown";
    StftConfig stft{};
};

/// Propagation delay of the RIR in whole STFT frames.
inline int delay_frames(Eigen::Index propagation_delay, int hop = kHopSamples) {
    return static_cast<int>(propagation_delay / hop);
}

/// Regression order covering the RIR's T30, but never shorter than the
/// target plus moderate ranges.
inline int order_for_t30(double t30, int delta_tilde, int moderate_frames, int hop = kHopSamples) {
    const int p = static_cast<int>(std::ceil(t30 * kSampleRate / hop));
    return std::max(p, delta_tilde + moderate_frames);
}

namespace detail {

inline MetricsReport metrics_for_range(const Spectrogram& dry_spec, const Spectrogram& proc_spec,
                                       const AudioBuffer& target, const AudioBuffer& processed, Eigen::Index s0,
                                       Eigen::Index s1, const RoomImpulseResponse& rir, Eigen::Index delay,
                                       const EvalOptions& opt) {
    const int hop = opt.stft.hop_samples;
    RegressionOptions reg;
    reg.delta_tilde = opt.profile.delta_frames;
    reg.moderate_frames = opt.moderate_frames;
    reg.order = opt.order.value_or(order_for_t30(rir.t30, reg.delta_tilde, reg.moderate_frames, hop));
    reg.delta_star = delay_frames(delay, hop);
    // Frame t ends at sample (t + 1) * hop; use frames lying wholly inside [s0, s1).
    const auto first = static_cast<std::size_t>((s0 + opt.stft.window_samples - opt.stft.pad_samples() + hop - 1) / hop);
    const auto last = static_cast<std::size_t>(std::max<Eigen::Index>(0, s1 / hop));
    Spectrogram dry = dry_spec, proc = proc_spec;
    dry.frames.resize(std::min(dry.frames.size(), last));
    proc.frames.resize(std::min(proc.frames.size(), last));
    reg.first_frame = std::min(first, proc.frames.size());

    const EstimatedRir est = estimate_rir(dry, proc, reg);
    const ReverbRatios r = elr_emr_efr(component_energies(est, dry, reg.first_frame));

    const Eigen::Index n = s1 - s0;
    const AudioBuffer tgt(Eigen::MatrixXd(target.samples.middleCols(s0, n)));
    const AudioBuffer est_audio(Eigen::MatrixXd(processed.samples.middleCols(s0, n)));
    const SnrSdr q = snr_sdr(tgt, est_audio);

    MetricsReport rep;
    rep.elr = r.elr;
    rep.emr = r.emr;
    rep.efr = r.efr;
    rep.snr = q.snr;
    rep.sdr = q.sdr;
    rep.t60 = rir.t60;
    rep.t60_bucket = t60_bucket(rir.t60);
    rep.profile = opt.profile.name();
    rep.mode = opt.mode;
    rep.delay_source = opt.estimate_delay ? "xcorr" : "oracle";
    return rep;
}

}  // namespace detail

/// Metrics of a processed signal against its scene, after the initialization
/// period. The first report covers the whole post-initialization range; one
/// report per later segment follows when segment_starts is given.
inline std::vector<MetricsReport> evaluate(const AudioBuffer& processed, const AudioBuffer& dry,
                                           const RoomImpulseResponse& rir, const AudioBuffer& target,
                                           const EvalOptions& opt) {
    if (dry.channels() != 1) throw ShapeError("evaluate: dry signal must be mono");
    if (processed.length() != dry.length() || target.length() != dry.length())
        throw ShapeError("evaluate: processed, dry and target lengths differ");
    if (processed.channels() != target.channels())
        throw ShapeError("evaluate: processed and target channel counts differ");
    if (opt.init_samples >= processed.length()) throw ShapeError("evaluate: nothing left after initialization");

    const Spectrogram dry_spec = analyze(dry, opt.stft);
    const Spectrogram proc_spec = analyze(processed, opt.stft);
    const Eigen::Index len = processed.length();
    const Eigen::Index delay = opt.estimate_delay ? estimate_propagation_delay(dry, processed, kSampleRate / 10)
                                                  : rir.propagation_delay;

    std::vector<MetricsReport> out;
    out.push_back(
        detail::metrics_for_range(dry_spec, proc_spec, target, processed, opt.init_samples, len, rir, delay, opt));
    for (std::size_t k = 0; k < opt.segment_starts.size(); ++k) {
        const Eigen::Index s0 = opt.segment_starts[k];
        const Eigen::Index s1 = k + 1 < opt.segment_starts.size() ? opt.segment_starts[k + 1] : len;
        if (s0 < opt.init_samples) continue;
        MetricsReport rep =
            detail::metrics_for_range(dry_spec, proc_spec, target, processed, s0, s1, rir, delay, opt);
        rep.segment = static_cast<int>(k);
        out.push_back(rep);
    }
    return out;
}

/// Record of one `run` invocation.
struct RunManifest {
    PipelineConfig config;
    PipelineMode mode = PipelineMode::Passthrough;
    std::string input_path, output_path, oracle_target_path;
    std::string wpe_model_path, wpe_model_sha256, pf_model_path, pf_model_sha256;
    std::uint64_t frames = 0;
    double audio_seconds = 0.0;
    double wall_seconds = 0.0;
    Eigen::Index chunk_samples = 0;
    std::vector<MetricsReport> metrics;

    nlohmann::json to_json() const {
        nlohmann::json j;
        j["config"] = config_to_json(config);
        j["mode"] = to_string(mode);
        j["strategy"] = traits(mode).strategy;
        j["input"] = input_path;
        j["output"] = output_path;
        if (!oracle_target_path.empty()) j["oracle_target"] = oracle_target_path;
        j["models"] = nlohmann::json::object();
        if (!wpe_model_path.empty()) j["models"]["wpe"] = {{"path", wpe_model_path}, {"sha256", wpe_model_sha256}};
        if (!pf_model_path.empty()) j["models"]["pf"] = {{"path", pf_model_path}, {"sha256", pf_model_sha256}};
        j["chunk_samples"] = chunk_samples;
        j["frames"] = frames;
        j["audio_seconds"] = audio_seconds;
        j["wall_seconds"] = wall_seconds;
        j["frames_per_second"] = wall_seconds > 0.0 ? static_cast<double>(frames) / wall_seconds : 0.0;
        j["real_time_factor"] = audio_seconds > 0.0 ? wall_seconds / audio_seconds : 0.0;
        j["segments"] = nlohmann::json::array();
        for (const auto& m : metrics) j["segments"].push_back(m.to_json());
        return j;
    }
};

}  // namespace dereverb
