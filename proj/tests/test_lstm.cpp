#include <catch_amalgamated.hpp>

#include <cstring>

#include "test_util.hpp"

using namespace dereverb;
using Catch::Matchers::ContainsSubstring;
using json = nlohmann::json;

namespace {

double sig(double z) { return 1.0 / (1.0 + std::exp(-z)); }

// H = 2, input_dim = 1, one mask of one bin; every weight distinct.
LstmMaskModel tiny_model() {
    LstmMaskModel m = LstmMaskModel::zeros(1, 2, 1);
    for (int r = 0; r < 8; ++r) {
        m.w_ih(r, 0) = 0.1 * (r + 1) * (r % 2 ? -1 : 1);
        m.w_hh(r, 0) = 0.05 * (r - 3);
        m.w_hh(r, 1) = -0.07 * (r - 4);
        m.b_ih[r] = 0.02 * r - 0.05;
        m.b_hh[r] = -0.03 * r + 0.04;
    }
    m.w_out << 0.9, -1.3;
    m.b_out << 0.2;
    return m;
}

// Writes one LSTM step out unit by unit, gates packed (i, f, g, o).
struct ScalarLstm {
    const LstmMaskModel& m;
    double h[2] = {0, 0}, c[2] = {0, 0};

    double step(double x) {
        double pre[8];
        for (int r = 0; r < 8; ++r)
            pre[r] = m.w_ih(r, 0) * x + m.w_hh(r, 0) * h[0] + m.w_hh(r, 1) * h[1] + m.b_ih[r] + m.b_hh[r];
        double hn[2];
        for (int j = 0; j < 2; ++j) {
            const double i = sig(pre[j]);
            const double f = sig(pre[2 + j]);
            const double g = std::tanh(pre[4 + j]);
            const double o = sig(pre[6 + j]);
            c[j] = f * c[j] + i * g;
            hn[j] = o * std::tanh(c[j]);
        }
        h[0] = hn[0];
        h[1] = hn[1];
        return sig(m.w_out(0, 0) * h[0] + m.w_out(0, 1) * h[1] + m.b_out[0]);
    }
};

// Hand-assembled container, independent of save_model.
std::vector<unsigned char> hand_file(const LstmMaskModel& m, const std::string& override_name = "",
                                     std::vector<int> override_shape = {}) {
    struct T {
        std::string name;
        std::vector<int> shape;
        std::vector<double> data;
    };
    auto rm = [](const Eigen::MatrixXd& a) {
        std::vector<double> v;
        for (Eigen::Index r = 0; r < a.rows(); ++r)
            for (Eigen::Index c = 0; c < a.cols(); ++c) v.push_back(a(r, c));
        return v;
    };
    const int g = 4 * m.hidden_dim;
    std::vector<T> ts = {{"b_out", {m.out_dim()}, rm(m.b_out)},
                         {"W_hh", {g, m.hidden_dim}, rm(m.w_hh)},
                         {"W_ih", {g, m.input_dim}, rm(m.w_ih)},
                         {"b_ih", {g}, rm(m.b_ih)},
                         {"b_hh", {g}, rm(m.b_hh)},
                         {"W_out", {m.out_dim(), m.hidden_dim}, rm(m.w_out)}};
    json man = {{"format_version", 1}, {"input_dim", m.input_dim}, {"hidden_dim", m.hidden_dim},
                {"out_masks", m.out_masks}, {"tensors", json::array()}};
    std::vector<unsigned char> data;
    for (auto& t : ts) {
        const auto shape = t.name == override_name ? override_shape : t.shape;
        man["tensors"].push_back({{"name", t.name},
                                  {"shape", shape},
                                  {"dtype", "f64"},
                                  {"byte_offset", data.size()},
                                  {"byte_length", t.data.size() * 8}});
        for (double v : t.data) {
            unsigned char b[8];
            std::memcpy(b, &v, 8);
            data.insert(data.end(), b, b + 8);
        }
    }
    const std::string text = man.dump();
    std::vector<unsigned char> out(8, 0);
    std::uint64_t len = text.size();
    for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<unsigned char>(len >> (8 * i));
    out.insert(out.end(), text.begin(), text.end());
    out.insert(out.end(), data.begin(), data.end());
    return out;
}

}  // namespace

TEST_CASE("LSTM step matches a scalar hand calculation", "[lstm][oracle]") {
    const LstmMaskModel m = tiny_model();
    ModelState st = make_state(m);
    ScalarLstm ref{m};
    for (double x : {0.7, -1.2, 2.5, 0.0, 0.3}) {
        const auto out = step(m, st, Eigen::ArrayXd::Constant(1, x));
        REQUIRE(out.size() == 1);
        REQUIRE(std::abs(out[0].m[0] - ref.step(x)) < 1e-12);
        REQUIRE(std::abs(st.h[0] - ref.h[0]) < 1e-12);
        REQUIRE(std::abs(st.c[1] - ref.c[1]) < 1e-12);
    }
}

TEST_CASE("zero weights give 0.5 masks", "[lstm]") {
    const LstmMaskModel m = LstmMaskModel::zeros(257, 16, 2);
    ModelState st = make_state(m);
    const auto out = step(m, st, testutil::uniform(257, 1, 0.0, 10.0));
    REQUIRE(out.size() == 2);
    for (const auto& mk : out) REQUIRE((mk.m == 0.5).all());
    REQUIRE(st.h.isZero(0.0));
}

TEST_CASE("masks lie strictly inside (0, 1)", "[lstm][property]") {
    const LstmMaskModel m = LstmMaskModel::random(33, 8, 2, 5, 0.5);
    ModelState st = make_state(m);
    for (int t = 0; t < 20; ++t)
        for (const auto& mk : step(m, st, testutil::uniform(33, 100 + t, 0.0, 5.0)))
            REQUIRE(((mk.m > 0.0) && (mk.m < 1.0)).all());
}

TEST_CASE("stateful stepping is chunking-invariant and resettable", "[lstm][streaming]") {
    const LstmMaskModel m = LstmMaskModel::random(17, 6, 1, 9);
    std::vector<Eigen::ArrayXd> xs;
    for (int t = 0; t < 10; ++t) xs.push_back(testutil::uniform(17, 200 + t, 0.0, 3.0));

    ModelState a = make_state(m);
    std::vector<Eigen::ArrayXd> ref;
    for (const auto& x : xs) ref.push_back(step(m, a, x)[0].m);

    // Two separately driven halves sharing the carried state.
    ModelState b = make_state(m);
    for (int t = 0; t < 4; ++t) REQUIRE((step(m, b, xs[static_cast<std::size_t>(t)])[0].m == ref[static_cast<std::size_t>(t)]).all());
    const ModelState carried = b;
    ModelState c = carried;
    for (int t = 4; t < 10; ++t) REQUIRE((step(m, c, xs[static_cast<std::size_t>(t)])[0].m == ref[static_cast<std::size_t>(t)]).all());

    // Reset equals a fresh stream; a second reset changes nothing.
    reset_state(c);
    reset_state(c);
    REQUIRE(c == make_state(m));
    for (int t = 0; t < 10; ++t) REQUIRE((step(m, c, xs[static_cast<std::size_t>(t)])[0].m == ref[static_cast<std::size_t>(t)]).all());

    // Reset mid-stream equals starting over on the remaining frames.
    ModelState d = make_state(m), e = make_state(m);
    for (int t = 0; t < 5; ++t) step(m, d, xs[static_cast<std::size_t>(t)]);
    reset_state(d);
    for (int t = 5; t < 10; ++t)
        REQUIRE((step(m, d, xs[static_cast<std::size_t>(t)])[0].m == step(m, e, xs[static_cast<std::size_t>(t)])[0].m).all());
}

TEST_CASE("step rejects wrong input sizes", "[lstm]") {
    const LstmMaskModel m = LstmMaskModel::zeros(5, 2, 1);
    ModelState st = make_state(m);
    REQUIRE_THROWS_AS(step(m, st, Eigen::ArrayXd::Zero(4)), ShapeError);
}

TEST_CASE("weight file round trip is bitwise", "[lstm][format]") {
    const LstmMaskModel m = LstmMaskModel::random(21, 7, 2, 11);
    const LstmMaskModel back = load_model(save_model(m, WeightDtype::F64));
    REQUIRE(back.out_masks == 2);
    REQUIRE(back.w_ih == m.w_ih);
    REQUIRE(back.w_hh == m.w_hh);
    REQUIRE(back.w_out == m.w_out);
    REQUIRE(back.b_ih == m.b_ih);
    REQUIRE(back.b_hh == m.b_hh);
    REQUIRE(back.b_out == m.b_out);

    const LstmMaskModel f32 = load_model(save_model(m, WeightDtype::F32));
    REQUIRE(f32.w_ih == m.w_ih.cast<float>().cast<double>());
}

TEST_CASE("weight file manifest fields", "[lstm][format]") {
    const auto bytes = save_model(LstmMaskModel::zeros(4, 3, 1), WeightDtype::F32);
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data(), 8);
    const json man = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(len));
    REQUIRE(man["format_version"] == 1);
    REQUIRE(man["input_transform"] == "identity");
    REQUIRE(man["gate_order"] == "ifgo");
    REQUIRE(man["out_masks"] == 1);
    std::size_t total = 0;
    for (const auto& t : man["tensors"]) {
        REQUIRE(t["dtype"] == "f32");
        REQUIRE(t["byte_offset"].get<std::size_t>() == total);
        total += t["byte_length"].get<std::size_t>();
    }
    REQUIRE(bytes.size() == 8 + len + total);
}

TEST_CASE("hand-assembled file loads with tensors in any order", "[lstm][format]") {
    const LstmMaskModel m = tiny_model();
    const LstmMaskModel back = load_model(hand_file(m));
    REQUIRE(back.w_hh == m.w_hh);
    REQUIRE(back.w_out == m.w_out);
    REQUIRE(back.b_out == m.b_out);
}

TEST_CASE("shape error names the offending tensor", "[lstm][format]") {
    const LstmMaskModel m = tiny_model();
    REQUIRE_THROWS_WITH(load_model(hand_file(m, "W_hh", {8, 3})), ContainsSubstring("W_hh"));
    REQUIRE_THROWS_AS(load_model(hand_file(m, "W_hh", {8, 3})), ModelError);
}

TEST_CASE("corrupted files are rejected", "[lstm][format]") {
    auto bytes = save_model(LstmMaskModel::zeros(4, 3, 1));
    REQUIRE_THROWS_AS(load_model(std::span<const unsigned char>(bytes.data(), 5)), ModelError);
    auto truncated = bytes;
    truncated.resize(bytes.size() - 10);
    REQUIRE_THROWS_WITH(load_model(truncated), ContainsSubstring("past end"));
    auto garbled = bytes;
    garbled[9] = '#';
    REQUIRE_THROWS_AS(load_model(garbled), ModelError);
    auto huge = bytes;
    huge[7] = 0x7f;
    REQUIRE_THROWS_AS(load_model(huge), ModelError);
}

TEST_CASE("full-size parameter counts", "[lstm]") {
    // 4H(I + H + 2) + out(H + 1) with I = 257, H = 512
    const LstmMaskModel wpe = LstmMaskModel::zeros(257, 512, 1);
    const LstmMaskModel pf = LstmMaskModel::zeros(257, 512, 2);
    REQUIRE(wpe.parameter_count() == 2048u * 771u + 257u * 513u);
    REQUIRE(pf.parameter_count() == 2048u * 771u + 514u * 513u);
    REQUIRE(wpe.parameter_count() == 1710849u);
}

TEST_CASE("single-precision inference stays within 1e-3 of double", "[lstm]") {
    const LstmMaskModel m = LstmMaskModel::random(40, 12, 1, 21);
    const auto mf = m.cast<float>();
    ModelState sd = make_state(m);
    auto sf = make_state(mf);
    for (int t = 0; t < 20; ++t) {
        const Eigen::ArrayXd x = testutil::uniform(40, 300 + t, 0.0, 2.0);
        const auto a = step(m, sd, x)[0].m;
        const auto b = step(mf, sf, x)[0].m;
        REQUIRE((a - b).abs().maxCoeff() < 1e-3);
    }
}
