// Command-line front end: run, eval, synth, model-info, init-model.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <openssl/evp.h>

#include "dereverb/dereverb.hpp"

namespace fs = std::filesystem;
using namespace dereverb;
using nlohmann::json;

namespace {

enum ExitCode { kOk = 0, kConfig = 2, kModel = 3, kIo = 4 };

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out || !(out << text)) throw IoError("cannot write " + path);
}

std::string sha256_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int n = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &n, EVP_sha256(), nullptr) != 1)
        throw IoError("sha256 failed for " + path);
    std::ostringstream hex;
    for (unsigned int i = 0; i < n; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return hex.str();
}

void emit_reports(const std::vector<MetricsReport>& reports, const std::string& format, std::ostream& out) {
    if (format == "csv") {
        out << MetricsReport::csv_header() << '\n';
        for (const auto& r : reports) out << r.csv_row() << '\n';
    } else {
        json arr = json::array();
        for (const auto& r : reports) arr.push_back(r.to_json());
        out << arr.dump(2) << '\n';
    }
}

// ---- scenes ---------------------------------------------------------------

struct LoadedScene {
    SceneSpec spec;
    Scene scene;
    Eigen::Index init_samples = 0;
};

std::vector<AudioBuffer> load_utterances(const SceneSpec& spec, const fs::path& base) {
    std::vector<AudioBuffer> out;
    for (const auto& f : spec.dry_files) {
        fs::path p(f);
        if (p.is_relative()) p = base / p;
        AudioBuffer a = wav::read(p.string());
        if (a.channels() != 1) throw ConfigError("dry file " + p.string() + " must be mono");
        out.push_back(std::move(a));
    }
    return out;
}

Eigen::Index init_samples_of(const Scene& s, const SceneSpec& spec) {
    if (!spec.sequence.first_segment_is_init) return 0;
    if (s.segment_starts.size() > 1) return s.segment_starts[1];
    return static_cast<Eigen::Index>(std::llround(spec.sequence.segment_seconds * kSampleRate));
}

LoadedScene load_scene(const std::string& manifest_path) {
    const json m = read_json(manifest_path);
    if (!m.contains("spec")) throw ConfigError(manifest_path + ": not a scene manifest (no 'spec')");
    LoadedScene ls;
    ls.spec = SceneSpec::from_json(m.at("spec"));
    ls.scene = build_scene(ls.spec, load_utterances(ls.spec, fs::path(manifest_path).parent_path()));
    ls.init_samples = init_samples_of(ls.scene, ls.spec);
    return ls;
}

std::vector<MetricsReport> eval_against(const AudioBuffer& processed, const LoadedScene& ls,
                                        const ListenerProfile& profile, const std::string& mode,
                                        const PipelineConfig& cfg, bool estimate_delay = false) {
    const Scene& s = ls.scene;
    if (processed.length() != s.dry.length())
        throw ShapeError("processed audio has " + std::to_string(processed.length()) + " samples, scene has " +
                         std::to_string(s.dry.length()));
    if (processed.channels() != s.reverb.channels())
        throw ShapeError("processed audio has " + std::to_string(processed.channels()) + " channels, scene has " +
                         std::to_string(s.reverb.channels()));
    EvalOptions opt;
    opt.profile = profile;
    opt.moderate_frames = cfg.moderate_frames;
    opt.init_samples = ls.init_samples;
    opt.segment_starts = s.segment_starts;
    opt.mode = mode;
    opt.estimate_delay = estimate_delay;
    const AudioBuffer& target = profile.kind == ProfileKind::CI ? s.target_ci : s.target_ha;
    return evaluate(processed, s.dry, s.rir, target, opt);
}

PipelineConfig load_config(const std::string& path, const std::string& profile) {
    PipelineConfig cfg;
    if (!path.empty()) cfg = config_from_json(read_json(path));
    if (!profile.empty()) cfg.profile = ListenerProfile::from_name(profile);
    cfg.validate();
    return cfg;
}

std::shared_ptr<const LstmMaskModel> load_net(const std::string& path) {
    if (path.empty()) return nullptr;
    return std::make_shared<const LstmMaskModel>(load_model_file(path));
}

// ---- subcommands ----------------------------------------------------------

struct RunArgs {
    std::string input, output, config, mode = "rls_wpe", model_wpe, model_pf, profile, oracle_target, manifest,
        scene, report = "json";
    double chunk_ms = 0.0;
};

int cmd_run(const RunArgs& a) {
    const PipelineConfig cfg = load_config(a.config, a.profile);
    const PipelineMode mode = parse_mode(a.mode);
    const AudioBuffer input = wav::read(a.input);
    input.validate();

    Pipeline pipe(cfg, mode, load_net(a.model_wpe), load_net(a.model_pf), input.channels());
    AudioBuffer target;
    if (pipe.needs_oracle_target()) {
        if (a.oracle_target.empty()) throw ConfigError("mode o_psd_wpe requires --oracle-target");
        target = wav::read(a.oracle_target);
        target.validate();
    }
    const auto chunk = static_cast<Eigen::Index>(std::llround(a.chunk_ms * 1e-3 * kSampleRate));

    const auto t0 = std::chrono::steady_clock::now();
    const AudioBuffer out = run_pipeline(pipe, input, pipe.needs_oracle_target() ? &target : nullptr, chunk);
    const double wall = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    wav::write(a.output, out);

    RunManifest rm;
    rm.config = pipe.config();
    rm.mode = mode;
    rm.input_path = a.input;
    rm.output_path = a.output;
    rm.oracle_target_path = pipe.needs_oracle_target() ? a.oracle_target : "";
    if (!a.model_wpe.empty()) {
        rm.wpe_model_path = a.model_wpe;
        rm.wpe_model_sha256 = sha256_file(a.model_wpe);
    }
    if (!a.model_pf.empty()) {
        rm.pf_model_path = a.model_pf;
        rm.pf_model_sha256 = sha256_file(a.model_pf);
    }
    rm.frames = pipe.frames_processed();
    rm.audio_seconds = static_cast<double>(input.length()) / kSampleRate;
    rm.wall_seconds = wall;
    rm.chunk_samples = chunk;
    if (!a.scene.empty()) {
        // Score what was written, so the report matches a later `eval` run.
        rm.metrics = eval_against(wav::read(a.output), load_scene(a.scene), cfg.profile, traits(mode).name, cfg);
    }
    const std::string manifest = a.manifest.empty() ? a.output + ".json" : a.manifest;
    write_text(manifest, rm.to_json().dump(2) + "\n");
    if (!rm.metrics.empty()) emit_reports(rm.metrics, a.report, std::cout);
    std::cerr << "processed " << rm.frames << " frames in " << std::fixed << std::setprecision(3) << wall
              << " s (RTF " << rm.to_json()["real_time_factor"].get<double>() << ")\n";
    return kOk;
}

struct EvalArgs {
    std::string processed, scene, config, profile, mode = "unknown", report = "json", output;
    bool estimate_delay = false;
};

int cmd_eval(const EvalArgs& a) {
    const LoadedScene ls = load_scene(a.scene);
    const PipelineConfig cfg = load_config(a.config, a.profile.empty() ? ls.spec.profile : a.profile);
    const AudioBuffer processed = wav::read(a.processed);
    processed.validate();
    const auto reports = eval_against(processed, ls, cfg.profile, a.mode, cfg, a.estimate_delay);
    if (a.output.empty()) {
        emit_reports(reports, a.report, std::cout);
    } else {
        std::ostringstream os;
        emit_reports(reports, a.report, os);
        write_text(a.output, os.str());
    }
    return kOk;
}

struct SynthArgs {
    std::string spec, out_dir;
    std::optional<std::uint64_t> seed;
};

int cmd_synth(const SynthArgs& a) {
    SceneSpec spec = a.spec.empty() ? SceneSpec{} : SceneSpec::from_json(read_json(a.spec));
    if (a.seed) {
        spec.rir.seed = *a.seed;
        spec.dry_seed = *a.seed + 1;
        spec.sequence_seed = *a.seed + 2;
        spec.noise_seed = *a.seed + 3;
    }
    const fs::path base = a.spec.empty() ? fs::current_path() : fs::path(a.spec).parent_path();
    // Dry files are resolved against the spec's directory; store absolute paths so
    // the manifest stays valid wherever it is written.
    for (auto& f : spec.dry_files)
        if (fs::path(f).is_relative()) f = fs::absolute(base / f).lexically_normal().string();
    const Scene s = build_scene(spec, load_utterances(spec, base));

    std::error_code ec;
    fs::create_directories(a.out_dir, ec);
    if (ec) throw IoError("cannot create " + a.out_dir + ": " + ec.message());
    const fs::path dir(a.out_dir);
    wav::write((dir / "dry.wav").string(), s.dry);
    wav::write((dir / "reverb.wav").string(), s.reverb);
    wav::write((dir / "target_ha.wav").string(), s.target_ha);
    wav::write((dir / "target_ci.wav").string(), s.target_ci);
    wav::write((dir / "rir.wav").string(), AudioBuffer(s.rir.taps));

    json m;
    m["spec"] = spec.to_json();
    m["files"] = {{"dry", "dry.wav"},
                  {"reverb", "reverb.wav"},
                  {"target_ha", "target_ha.wav"},
                  {"target_ci", "target_ci.wav"},
                  {"rir", "rir.wav"}};
    m["rir"] = {{"propagation_delay_samples", s.rir.propagation_delay},
                {"delay_frames", delay_frames(s.rir.propagation_delay)},
                {"t60", s.rir.t60},
                {"t30", s.rir.t30},
                {"schroeder_t60", schroeder_t60(s.rir.taps.row(0).transpose())},
                {"drr_db", direct_to_reverberant_db(s.rir)},
                {"length", s.rir.taps.cols()}};
    m["length_samples"] = s.dry.length();
    m["channels"] = s.reverb.channels();
    m["segment_starts"] = s.segment_starts;
    m["init_samples"] = init_samples_of(s, spec);
    m["input_snr_db"] = s.input_snr_db ? json(*s.input_snr_db) : json(nullptr);
    m["energy"] = {{"target_ha", s.target_ha.energy()}, {"target_ci", s.target_ci.energy()}};
    write_text((dir / "manifest.json").string(), m.dump(2) + "\n");
    std::cout << (dir / "manifest.json").string() << '\n';
    return kOk;
}

int cmd_model_info(const std::string& path) {
    const LstmMaskModel m = load_model_file(path);
    const std::size_t p = m.parameter_count();
    std::cout << "file: " << path << '\n'
              << "input_dim=" << m.input_dim << " hidden_dim=" << m.hidden_dim << " out_dim=" << m.out_dim() << '\n'
              << "heads=" << m.out_masks << '\n'
              << "params=" << p << " (~" << std::fixed << std::setprecision(2) << static_cast<double>(p) / 1e6
              << "M)\n";
    return kOk;
}

struct InitArgs {
    std::string out, kind = "wpe", dtype = "f32";
    int hidden = 512;
    int input = 257;
    std::uint64_t seed = 1;
    bool zero = false;
};

int cmd_init_model(const InitArgs& a) {
    int heads = 0;
    if (a.kind == "wpe") heads = 1;
    else if (a.kind == "pf") heads = 2;
    else throw ConfigError("--kind must be wpe or pf");
    const LstmMaskModel m = a.zero ? LstmMaskModel::zeros(a.input, a.hidden, heads)
                                   : LstmMaskModel::random(a.input, a.hidden, heads, a.seed);
    save_model_file(a.out, m, a.dtype == "f64" ? WeightDtype::F64 : WeightDtype::F32);
    return kOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Frame-online multichannel dereverberation"};
    app.require_subcommand(1);

    RunArgs run;
    auto* c_run = app.add_subcommand("run", "Dereverberate a WAV file");
    c_run->add_option("input", run.input, "Input WAV (16 kHz)")->required();
    c_run->add_option("output", run.output, "Output WAV")->required();
    c_run->add_option("--mode", run.mode, "Pipeline mode");
    c_run->add_option("--config", run.config, "JSON config file");
    c_run->add_option("--model-wpe", run.model_wpe, "WPE mask network weights");
    c_run->add_option("--model-pf", run.model_pf, "Post-filter mask network weights");
    c_run->add_option("--profile", run.profile, "Listener profile")->check(CLI::IsMember({"ha", "ci"}));
    c_run->add_option("--oracle-target", run.oracle_target, "Target WAV for o_psd_wpe");
    c_run->add_option("--chunk-ms", run.chunk_ms, "Feed the input in chunks of this length (0 = whole file)")
        ->check(CLI::NonNegativeNumber);
    c_run->add_option("--manifest", run.manifest, "Run manifest path (default: <output>.json)");
    c_run->add_option("--scene", run.scene, "Scene manifest; evaluates the output when given");
    c_run->add_option("--report", run.report, "Report format")->check(CLI::IsMember({"json", "csv"}));

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Score processed audio against a scene");
    c_eval->add_option("processed", ev.processed, "Processed WAV")->required();
    c_eval->add_option("scene", ev.scene, "Scene manifest from `synth`")->required();
    c_eval->add_option("--config", ev.config, "JSON config file");
    c_eval->add_option("--profile", ev.profile, "Listener profile")->check(CLI::IsMember({"ha", "ci"}));
    c_eval->add_option("--mode", ev.mode, "Label written into the report");
    c_eval->add_option("--report", ev.report, "Report format")->check(CLI::IsMember({"json", "csv"}));
    c_eval->add_option("-o,--output", ev.output, "Write the report here instead of stdout");
    c_eval->add_flag("--estimate-delay", ev.estimate_delay,
                     "Take the propagation delay from dry/processed cross-correlation");

    SynthArgs sy;
    auto* c_synth = app.add_subcommand("synth", "Generate a synthetic reverberant scene");
    c_synth->add_option("spec", sy.spec, "Scene spec JSON (defaults when omitted)");
    c_synth->add_option("--out-dir,-o", sy.out_dir, "Output directory")->required();
    c_synth->add_option("--seed", sy.seed, "Override every seed in the spec");

    std::string info_path;
    auto* c_info = app.add_subcommand("model-info", "Summarize a weight file");
    c_info->add_option("model", info_path, "Weight file")->required();

    InitArgs in;
    auto* c_init = app.add_subcommand("init-model", "Write an untrained weight file (fixtures)");
    c_init->add_option("output", in.out, "Weight file to write")->required();
    c_init->add_option("--kind", in.kind, "wpe (1 mask) or pf (2 masks)")->check(CLI::IsMember({"wpe", "pf"}));
    c_init->add_option("--hidden", in.hidden, "LSTM units")->check(CLI::PositiveNumber);
    c_init->add_option("--input-dim", in.input, "Input bins")->check(CLI::PositiveNumber);
    c_init->add_option("--seed", in.seed, "Weight RNG seed");
    c_init->add_flag("--zero", in.zero, "All-zero weights (masks of 0.5)");
    c_init->add_option("--dtype", in.dtype, "Tensor dtype")->check(CLI::IsMember({"f32", "f64"}));

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (c_run->parsed()) return cmd_run(run);
        if (c_eval->parsed()) return cmd_eval(ev);
        if (c_synth->parsed()) return cmd_synth(sy);
        if (c_info->parsed()) return cmd_model_info(info_path);
        if (c_init->parsed()) return cmd_init_model(in);
    } catch (const ModelError& e) {
        std::cerr << "model error: " << e.what() << '\n';
        return kModel;
    } catch (const IoError& e) {
        std::cerr << "I/O error: " << e.what() << '\n';
        return kIo;
    } catch (const std::exception& e) {
        // ConfigError, ShapeError and NumericError all stem from bad inputs or settings.
        std::cerr << "error: " << e.what() << '\n';
        return kConfig;
    }
    return kConfig;
}
