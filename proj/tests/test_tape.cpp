#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "minivlm/rng.hpp"
#include "minivlm/tape.hpp"
#include "minivlm/tensor_io.hpp"
#include "minivlm/training.hpp"

#include <filesystem>
#include <fstream>
#include <sstream>

using namespace minivlm;

TEST_CASE("matmul: identity and selector cases") {
    Tape tape;
    Mat m(2, 2);
    m << 1, 2, 3, 4;
    CHECK(matmul(tape.constant(Mat::Identity(2, 2)), tape.constant(m)).value() == m);

    Mat row(1, 2), col(2, 1);
    row << 1, 0;
    col << 2, 5;
    const Mat r = matmul(tape.constant(row), tape.constant(col)).value();
    CHECK(r.rows() == 1);
    CHECK(r(0, 0) == 2.0);
}

TEST_CASE("matmul matches a triple-loop oracle") {
    Rng rng(123);
    const Mat a = rng.normal_mat(3, 4, 1.0);
    const Mat b = rng.normal_mat(4, 2, 1.0);
    Tape tape;
    const Mat y = matmul(tape.constant(a), tape.constant(b)).value();
    for (int i = 0; i < 3; ++i) {
        for (int j = 0; j < 2; ++j) {
            double acc = 0.0;
            for (int k = 0; k < 4; ++k) acc += a(i, k) * b(k, j);
            CHECK(std::abs(acc - y(i, j)) <= 1e-12);
        }
    }
}

TEST_CASE("matmul rejects mismatched inner dimensions naming both shapes") {
    Tape tape;
    Var a = tape.constant(Mat::Zero(2, 3));
    Var b = tape.constant(Mat::Zero(4, 2));
    CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("2x3"), std::invalid_argument);
}

TEST_CASE("softmax_rows: symmetry, stability, direct-evaluation oracle") {
    Tape tape;
    Mat x(3, 3);
    x << 0, 0, 0, 1000, 0, 0, 1, 2, 3;
    const Mat y = softmax_rows(tape.constant(x)).value();
    CHECK(y(0, 0) == doctest::Approx(1.0 / 3.0).epsilon(1e-14));
    CHECK(std::isfinite(y(1, 0)));
    CHECK(y(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(y(2, 0) == doctest::Approx(0.09003057317038046).epsilon(1e-5));
    CHECK(y(2, 1) == doctest::Approx(0.24472847105479764).epsilon(1e-5));
    CHECK(y(2, 2) == doctest::Approx(0.66524095577482186).epsilon(1e-5));
}

TEST_CASE("softmax_rows: row sums over unmasked entries are 1 +- 1e-12") {
    Rng rng(9);
    Tape tape;
    const Mat x = rng.normal_mat(20, 13, 3.0);
    BoolMat mask(20, 13);
    for (Eigen::Index i = 0; i < 20; ++i)
        for (Eigen::Index j = 0; j < 13; ++j) mask(i, j) = rng.uniform() < 0.7 || j == 0;
    const Mat y = softmax_rows(tape.constant(x), mask).value();
    for (Eigen::Index i = 0; i < 20; ++i) {
        CHECK(std::abs(y.row(i).sum() - 1.0) <= 1e-12);
        for (Eigen::Index j = 0; j < 13; ++j) {
            CHECK(y(i, j) >= 0.0);
            if (!mask(i, j)) CHECK(y(i, j) == 0.0);
        }
    }
}

TEST_CASE("softmax_rows: fully masked row is an error") {
    Tape tape;
    BoolMat mask = BoolMat::Constant(2, 2, false);
    mask(0, 0) = true;
    CHECK_THROWS_AS(softmax_rows(tape.constant(Mat::Zero(2, 2)), mask), std::invalid_argument);
}

TEST_CASE("backward: analytic derivative of sum of squares") {
    Tape tape;
    Mat x(1, 2);
    x << 1.0, -2.0;
    Var v = tape.leaf(x);
    tape.backward(sum_all(mul(v, v)));
    CHECK(v.grad()(0, 0) == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(v.grad()(0, 1) == doctest::Approx(-4.0).epsilon(1e-12));
}

TEST_CASE("backward: softmax row sums are constant, so the gradient vanishes") {
    Rng rng(5);
    Tape tape;
    Var v = tape.leaf(rng.normal_mat(3, 6, 1.0));
    tape.backward(sum_all(softmax_rows(v)));
    CHECK(v.grad().cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("backward rejects a non-scalar loss") {
    Tape tape;
    Var v = tape.leaf(Mat::Zero(2, 2));
    CHECK_THROWS_AS(tape.backward(v), std::invalid_argument);
}

TEST_CASE("primitives match central finite differences") {
    Rng rng(31);
    Parameter w("w", rng.normal_mat(5, 4, 0.7));
    const Mat x = rng.normal_mat(3, 5, 1.0);
    const Mat x4 = rng.normal_mat(3, 4, 1.0);
    const std::vector<int> ids = {0, 2, 2, 4};
    const std::vector<int> targets = {1, 3, 0};

    auto composite = [&](Tape& t) {
        Var p = t.param(w);
        Var a = matmul(t.constant(x), p);                    // 3 x 4
        Var b = add(gelu(a), silu(scale(a, 0.5)));           // pointwise pair
        Var g = rms_norm(b, t.constant(Mat::Ones(1, 4)));    // row norm
        Var c = mul(g, t.constant(x4));
        Var d = concat_rows({slice_rows(c, 0, 2), slice_rows(c, 1, 2)});  // 4 x 4
        Var e = emax(d, transpose(transpose(d * 0.3)));
        Var f = add_row_broadcast(e, mean_rows(c));
        Var lookup = embedding_rows(p, ids);                 // rows of w
        Var logits = concat_rows({slice_rows(f, 0, 3)});
        return add(cross_entropy(logits, targets), sum_all(lookup) * 1e-2);
    };
    auto loss_fn = [&]() {
        Tape t;
        return composite(t).value()(0, 0);
    };
    auto backward_fn = [&]() {
        Tape t;
        t.backward(composite(t));
    };
    const GradCheckReport r = finite_difference_check({&w}, loss_fn, backward_fn);
    CHECK(r.n_checked == 20);
    CHECK(r.max_rel_error <= 1e-5);
}

TEST_CASE("embedding and cross-entropy validate their indices") {
    Tape tape;
    Var table = tape.constant(Mat::Zero(4, 3));
    CHECK_THROWS_AS(embedding_rows(table, {0, 4}), std::out_of_range);
    Var logits = tape.constant(Mat::Zero(2, 5));
    CHECK_THROWS_AS(cross_entropy(logits, {0, 7}), std::out_of_range);
    CHECK_THROWS_AS(cross_entropy(logits, {0}), std::invalid_argument);
}

TEST_CASE("cross-entropy equals a direct log-softmax evaluation") {
    Rng rng(77);
    const Mat logits = rng.normal_mat(3, 6, 2.0);
    const std::vector<int> targets = {4, 0, 5};
    Tape tape;
    const double got = cross_entropy(tape.constant(logits), targets).value()(0, 0);
    double expect = 0.0;
    for (int i = 0; i < 3; ++i) {
        double z = 0.0;
        for (int j = 0; j < 6; ++j) z += std::exp(logits(i, j));
        expect -= logits(i, targets[static_cast<size_t>(i)]) - std::log(z);
    }
    expect /= 3.0;
    CHECK(got == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("primitives are deterministic across reruns") {
    Rng rng(55);
    const Mat a = rng.normal_mat(6, 6, 1.0);
    auto run = [&]() {
        Tape t;
        return matmul(softmax_rows(t.constant(a)), gelu(t.constant(a))).value();
    };
    CHECK(run() == run());
}

TEST_CASE("tensor archive: byte-identical rewrite and sidecar names") {
    Rng rng(3);
    const auto dir = std::filesystem::temp_directory_path();
    const std::string path = (dir / "minivlm_test_archive.bin").string();
    std::vector<NamedTensor> tensors;
    tensors.push_back(NamedTensor::from_mat("alpha", rng.normal_mat(3, 4, 1.0)));
    tensors.push_back(NamedTensor::from_mat("beta", rng.normal_mat(1, 7, 1.0)));
    nlohmann::ordered_json meta;
    meta["kind"] = "test";
    write_archive(path, tensors, meta);

    Archive a = read_archive(path);
    REQUIRE(a.tensors.size() == 2);
    CHECK(a.tensors[0].name == "alpha");
    CHECK(a.find("beta") != nullptr);
    CHECK(a.metadata["kind"] == "test");
    CHECK(a.tensors[0].to_mat() == tensors[0].to_mat());

    auto slurp = [](const std::string& p) {
        std::ifstream is(p, std::ios::binary);
        std::stringstream ss;
        ss << is.rdbuf();
        return ss.str();
    };
    const std::string first = slurp(path);
    write_archive(path, a.tensors, a.metadata);
    CHECK(slurp(path) == first);
    std::filesystem::remove(path);
    std::filesystem::remove(path + ".json");
}

TEST_CASE("rank mismatch and truncation are reported") {
    NamedTensor t;
    t.name = "bad";
    t.dims = {2, 2, 2};
    t.data.assign(8, 0.0);
    CHECK_THROWS_AS(t.to_mat(), std::runtime_error);
    CHECK_THROWS_AS(read_archive("/nonexistent/path.bin"), std::runtime_error);
}
