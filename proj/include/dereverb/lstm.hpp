#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "dereverb/psd.hpp"
#include "dereverb/types.hpp"

namespace dereverb {

/// Mask estimator: one LSTM layer followed by a linear layer with sigmoid.
/// Gates are packed (i, f, g, o) along the rows of W_ih, W_hh, b_ih and b_hh.
/// The output holds `out_masks` consecutive masks of input_dim bins each.
template <class Scalar>
struct BasicLstmMaskModel {
    using Mat = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

    int input_dim = 257;
    int hidden_dim = 512;
    int out_masks = 1;
    Mat w_ih, w_hh, w_out;
    Vec b_ih, b_hh, b_out;

    int out_dim() const { return out_masks * input_dim; }

    std::size_t parameter_count() const {
        return static_cast<std::size_t>(w_ih.size() + w_hh.size() + b_ih.size() + b_hh.size() + w_out.size() +
                                        b_out.size());
    }

    void validate() const {
        if (input_dim < 1 || hidden_dim < 1) throw ModelError("model dimensions must be positive");
        if (out_masks != 1 && out_masks != 2) throw ModelError("out_masks must be 1 or 2");
        const Eigen::Index g = 4 * static_cast<Eigen::Index>(hidden_dim);
        auto check = [](const char* name, Eigen::Index r, Eigen::Index c, Eigen::Index er, Eigen::Index ec) {
            if (r != er || c != ec)
                throw ModelError(std::string("tensor ") + name + " has shape [" + std::to_string(r) + ", " +
                                 std::to_string(c) + "], expected [" + std::to_string(er) + ", " +
                                 std::to_string(ec) + "]");
        };
        check("W_ih", w_ih.rows(), w_ih.cols(), g, input_dim);
        check("W_hh", w_hh.rows(), w_hh.cols(), g, hidden_dim);
        check("b_ih", b_ih.rows(), 1, g, 1);
        check("b_hh", b_hh.rows(), 1, g, 1);
        check("W_out", w_out.rows(), w_out.cols(), out_dim(), hidden_dim);
        check("b_out", b_out.rows(), 1, out_dim(), 1);
        auto finite = [](const char* name, const auto& t) {
            if (!t.allFinite()) throw ModelError(std::string("tensor ") + name + " contains non-finite values");
        };
        finite("W_ih", w_ih);
        finite("W_hh", w_hh);
        finite("b_ih", b_ih);
        finite("b_hh", b_hh);
        finite("W_out", w_out);
        finite("b_out", b_out);
    }

    template <class Other>
    BasicLstmMaskModel<Other> cast() const {
        BasicLstmMaskModel<Other> m;
        m.input_dim = input_dim;
        m.hidden_dim = hidden_dim;
        m.out_masks = out_masks;
        m.w_ih = w_ih.template cast<Other>();
        m.w_hh = w_hh.template cast<Other>();
        m.w_out = w_out.template cast<Other>();
        m.b_ih = b_ih.template cast<Other>();
        m.b_hh = b_hh.template cast<Other>();
        m.b_out = b_out.template cast<Other>();
        return m;
    }

    static BasicLstmMaskModel zeros(int input, int hidden, int masks) {
        BasicLstmMaskModel m;
        m.input_dim = input;
        m.hidden_dim = hidden;
        m.out_masks = masks;
        m.w_ih = Mat::Zero(4 * hidden, input);
        m.w_hh = Mat::Zero(4 * hidden, hidden);
        m.b_ih = Vec::Zero(4 * hidden);
        m.b_hh = Vec::Zero(4 * hidden);
        m.w_out = Mat::Zero(masks * input, hidden);
        m.b_out = Vec::Zero(masks * input);
        return m;
    }

    /// Uniform(-scale, scale) weights, the usual LSTM initialization with scale = 1/sqrt(hidden).
    static BasicLstmMaskModel random(int input, int hidden, int masks, std::uint64_t seed, double scale = -1.0) {
        if (scale <= 0.0) scale = 1.0 / std::sqrt(static_cast<double>(hidden));
        BasicLstmMaskModel m = zeros(input, hidden, masks);
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> u(-scale, scale);
        auto fill = [&](auto& t) {
            for (Eigen::Index i = 0; i < t.size(); ++i) t.data()[i] = static_cast<Scalar>(u(rng));
        };
        fill(m.w_ih);
        fill(m.w_hh);
        fill(m.b_ih);
        fill(m.b_hh);
        fill(m.w_out);
        fill(m.b_out);
        return m;
    }
};

using LstmMaskModel = BasicLstmMaskModel<double>;

/// Running LSTM memory for one stream.
template <class Scalar>
struct BasicModelState {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> h, c;

    explicit BasicModelState(int hidden = 0) {
        h.setZero(hidden);
        c.setZero(hidden);
    }

    bool operator==(const BasicModelState&) const = default;
};

using ModelState = BasicModelState<double>;

/// Zero-initialized state matching the model.
template <class Scalar>
BasicModelState<Scalar> make_state(const BasicLstmMaskModel<Scalar>& model) {
    return BasicModelState<Scalar>(model.hidden_dim);
}

template <class Scalar>
void reset_state(BasicModelState<Scalar>& state) {
    state.h.setZero();
    state.c.setZero();
}

/// One recurrent step on a magnitude frame; returns out_masks masks.
template <class Scalar>
std::vector<MaskFrame> step(const BasicLstmMaskModel<Scalar>& model, BasicModelState<Scalar>& state,
                            const Eigen::ArrayXd& magnitude) {
    using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
    if (magnitude.size() != model.input_dim) throw ShapeError("LSTM step: input size mismatch");
    if (state.h.size() != model.hidden_dim || state.c.size() != model.hidden_dim)
        throw ShapeError("LSTM step: state size does not match model");
    if (!magnitude.allFinite()) throw NumericError("LSTM step: non-finite input");

    const Eigen::Index hd = model.hidden_dim;
    const Vec x = magnitude.matrix().template cast<Scalar>();
    const Vec z = model.w_ih * x + model.b_ih + model.w_hh * state.h + model.b_hh;
    auto sigmoid = [](Scalar v) { return Scalar(1) / (Scalar(1) + std::exp(-v)); };

    const auto zi = z.segment(0, hd).array();
    const auto zf = z.segment(hd, hd).array();
    const auto zg = z.segment(2 * hd, hd).array();
    const auto zo = z.segment(3 * hd, hd).array();
    const Eigen::Array<Scalar, Eigen::Dynamic, 1> c =
        zf.unaryExpr(sigmoid) * state.c.array() + zi.unaryExpr(sigmoid) * zg.tanh();
    const Eigen::Array<Scalar, Eigen::Dynamic, 1> h = zo.unaryExpr(sigmoid) * c.tanh();
    state.c = c.matrix();
    state.h = h.matrix();

    const Vec y = (model.w_out * state.h + model.b_out).unaryExpr(sigmoid);
    std::vector<MaskFrame> masks;
    masks.reserve(static_cast<std::size_t>(model.out_masks));
    for (int k = 0; k < model.out_masks; ++k)
        masks.push_back({y.segment(k * model.input_dim, model.input_dim).template cast<double>().array()});
    return masks;
}

// ---------------------------------------------------------------------------
// Weight container:
//   u64 (little-endian) manifest length | UTF-8 JSON manifest | raw tensor bytes
// Tensor byte_offset is relative to the end of the manifest. Tensors are
// row-major little-endian, dtype "f32" or "f64".
// ---------------------------------------------------------------------------

inline constexpr int kModelFormatVersion = 1;

namespace detail {

struct TensorRef {
    const char* name;
    Eigen::Index rows, cols;
    bool vector;  // stored with a 1-D shape; a matrix may still have one column
};

inline std::vector<TensorRef> tensor_table(int input, int hidden, int masks) {
    const Eigen::Index g = 4 * static_cast<Eigen::Index>(hidden);
    const Eigen::Index out = static_cast<Eigen::Index>(masks) * input;
    return {{"W_ih", g, input, false}, {"W_hh", g, hidden, false},  {"b_ih", g, 1, true},
            {"b_hh", g, 1, true},      {"W_out", out, hidden, false}, {"b_out", out, 1, true}};
}

}  // namespace detail

enum class WeightDtype { F32, F64 };

inline std::vector<unsigned char> save_model(const LstmMaskModel& model, WeightDtype dtype = WeightDtype::F64) {
    static_assert(std::endian::native == std::endian::little, "weight I/O assumes little-endian host");
    model.validate();
    const std::size_t width = dtype == WeightDtype::F32 ? 4 : 8;
    const std::map<std::string, const Eigen::MatrixXd*> mats = {
        {"W_ih", &model.w_ih}, {"W_hh", &model.w_hh}, {"W_out", &model.w_out}};
    const std::map<std::string, const Eigen::VectorXd*> vecs = {
        {"b_ih", &model.b_ih}, {"b_hh", &model.b_hh}, {"b_out", &model.b_out}};

    nlohmann::json manifest;
    manifest["format_version"] = kModelFormatVersion;
    manifest["architecture"] = "lstm1-linear-sigmoid";
    manifest["input_dim"] = model.input_dim;
    manifest["hidden_dim"] = model.hidden_dim;
    manifest["out_masks"] = model.out_masks;
    manifest["gate_order"] = "ifgo";
    manifest["layout"] = "row_major";
    manifest["input_transform"] = "identity";
    manifest["tensors"] = nlohmann::json::array();

    std::vector<unsigned char> payload;
    for (const auto& t : detail::tensor_table(model.input_dim, model.hidden_dim, model.out_masks)) {
        std::vector<double> flat(static_cast<std::size_t>(t.rows * t.cols));
        if (t.vector) {
            const auto& v = *vecs.at(t.name);
            std::copy(v.data(), v.data() + v.size(), flat.begin());
        } else {
            const auto& m = *mats.at(t.name);
            for (Eigen::Index r = 0; r < t.rows; ++r)
                for (Eigen::Index c = 0; c < t.cols; ++c) flat[static_cast<std::size_t>(r * t.cols + c)] = m(r, c);
        }
        const std::size_t offset = payload.size();
        for (double v : flat) {
            unsigned char buf[8];
            if (dtype == WeightDtype::F32) {
                const float f = static_cast<float>(v);
                std::memcpy(buf, &f, 4);
            } else {
                std::memcpy(buf, &v, 8);
            }
            payload.insert(payload.end(), buf, buf + width);
        }
        nlohmann::json shape = t.vector ? nlohmann::json::array({t.rows}) : nlohmann::json::array({t.rows, t.cols});
        manifest["tensors"].push_back({{"name", t.name},
                                       {"shape", shape},
                                       {"dtype", dtype == WeightDtype::F32 ? "f32" : "f64"},
                                       {"byte_offset", offset},
                                       {"byte_length", flat.size() * width}});
    }

    const std::string text = manifest.dump();
    std::vector<unsigned char> out(8);
    const std::uint64_t len = text.size();
    std::memcpy(out.data(), &len, 8);
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), payload.begin(), payload.end());
    return out;
}

inline LstmMaskModel load_model(std::span<const unsigned char> bytes) {
    static_assert(std::endian::native == std::endian::little, "weight I/O assumes little-endian host");
    if (bytes.size() < 8) throw ModelError("weight file too short for manifest length prefix");
    std::uint64_t len;
    std::memcpy(&len, bytes.data(), 8);
    if (len > bytes.size() - 8) throw ModelError("manifest length exceeds file size");

    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(std::string("malformed manifest: ") + e.what());
    }
    const auto data = bytes.subspan(8 + len);

    LstmMaskModel model;
    try {
        if (manifest.at("format_version").get<int>() != kModelFormatVersion)
            throw ModelError("unsupported weight format version");
        model.input_dim = manifest.at("input_dim").get<int>();
        model.hidden_dim = manifest.at("hidden_dim").get<int>();
        model.out_masks = manifest.at("out_masks").get<int>();
        if (manifest.value("gate_order", std::string("ifgo")) != "ifgo")
            throw ModelError("unsupported gate order (expected ifgo)");
        if (manifest.value("layout", std::string("row_major")) != "row_major")
            throw ModelError("unsupported tensor layout (expected row_major)");
        if (manifest.value("input_transform", std::string("identity")) != "identity")
            throw ModelError("unsupported input transform (expected identity)");
        if (model.input_dim < 1 || model.hidden_dim < 1 || (model.out_masks != 1 && model.out_masks != 2))
            throw ModelError("invalid model dimensions in manifest");

        std::map<std::string, nlohmann::json> entries;
        for (const auto& t : manifest.at("tensors")) entries[t.at("name").get<std::string>()] = t;

        for (const auto& ref : detail::tensor_table(model.input_dim, model.hidden_dim, model.out_masks)) {
            auto it = entries.find(ref.name);
            if (it == entries.end()) throw ModelError(std::string("missing tensor ") + ref.name);
            const auto& t = it->second;
            std::vector<Eigen::Index> shape = t.at("shape").get<std::vector<Eigen::Index>>();
            const Eigen::Index rows = shape.empty() ? 0 : shape[0];
            const Eigen::Index cols = shape.size() >= 2 ? shape[1] : 1;
            if (shape.empty() || shape.size() > 2 || (ref.vector != (shape.size() == 1)) ||
                rows != ref.rows || cols != ref.cols) {
                std::string got;
                for (auto s : shape) got += (got.empty() ? "" : ", ") + std::to_string(s);
                throw ModelError(std::string("tensor ") + ref.name + " has shape [" + got + "], expected [" +
                                 std::to_string(ref.rows) + (ref.vector ? "" : ", " + std::to_string(ref.cols)) +
                                 "]");
            }
            const std::string dtype = t.at("dtype").get<std::string>();
            if (dtype != "f32" && dtype != "f64")
                throw ModelError(std::string("tensor ") + ref.name + " has unsupported dtype " + dtype);
            const std::size_t width = dtype == "f32" ? 4 : 8;
            const auto offset = t.at("byte_offset").get<std::uint64_t>();
            const auto length = t.at("byte_length").get<std::uint64_t>();
            const auto count = static_cast<std::uint64_t>(rows * cols);
            if (length != count * width)
                throw ModelError(std::string("tensor ") + ref.name + " byte_length does not match its shape");
            if (offset > data.size() || length > data.size() - offset)
                throw ModelError(std::string("tensor ") + ref.name + " extends past end of file");

            Eigen::MatrixXd m(rows, cols);
            const unsigned char* p = data.data() + offset;
            for (Eigen::Index r = 0; r < rows; ++r) {
                for (Eigen::Index c = 0; c < cols; ++c, p += width) {
                    if (width == 4) {
                        float f;
                        std::memcpy(&f, p, 4);
                        m(r, c) = f;
                    } else {
                        std::memcpy(&m(r, c), p, 8);
                    }
                }
            }
            const std::string name = ref.name;
            if (name == "W_ih") model.w_ih = m;
            else if (name == "W_hh") model.w_hh = m;
            else if (name == "W_out") model.w_out = m;
            else if (name == "b_ih") model.b_ih = m.col(0);
            else if (name == "b_hh") model.b_hh = m.col(0);
            else model.b_out = m.col(0);
        }
    } catch (const nlohmann::json::exception& e) {
        throw ModelError(std::string("malformed manifest: ") + e.what());
    }
    model.validate();
    return model;
}

inline LstmMaskModel load_model_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open model file '" + path + "'");
    std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return load_model(bytes);
    } catch (const ModelError& e) {
        throw ModelError(path + ": " + e.what());
    }
}

inline void save_model_file(const std::string& path, const LstmMaskModel& model,
                            WeightDtype dtype = WeightDtype::F64) {
    const auto bytes = save_model(model, dtype);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open model file '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

}  // namespace dereverb
