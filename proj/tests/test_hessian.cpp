#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "clgeo/cl_algos.hpp"
#include "clgeo/csv.hpp"
#include "clgeo/error.hpp"
#include "clgeo/hessian.hpp"
#include "clgeo/landscape.hpp"
#include "clgeo/tasks.hpp"
#include "oracles.hpp"

using namespace clgeo;

namespace {

struct Fixture {
    MlpSpec spec;
    ParamVector params;
    Dataset data;
};

Fixture small_net(bool bias, std::uint64_t seed) {
    Fixture f;
    f.spec = oracle::make_spec({4, 5, 4, 3}, bias);
    f.params = init_params(f.spec, seed);
    f.data = oracle::random_data(30, 4, 3, seed + 100);
    return f;
}

// Full-batch gradient descent until the gradient norm falls below tol.
ParamVector train_to_tolerance(const MlpSpec& s, ParamVector p, const Dataset& ds, double lr, double tol,
                               int max_steps) {
    for (int i = 0; i < max_steps; ++i) {
        ParamVector g = mean_grad(s, p, ds);
        if (g.norm() < tol) break;
        p -= lr * g;
    }
    return p;
}

}  // namespace

TEST_SUITE("hessian") {

TEST_CASE("hvp basics") {
    Fixture f = small_net(true, 1);
    const Index n = f.params.size();
    CHECK(hvp(f.spec, f.params, f.data, ParamVector::Zero(n)).isZero(0.0));

    Eigen::MatrixXd h = exact_hessian(f.spec, f.params, f.data);
    for (int k = 0; k < 3; ++k) {
        ParamVector v = oracle::random_vector(n, 10 + k);
        CHECK((hvp(f.spec, f.params, f.data, v) - h * v).lpNorm<Eigen::Infinity>() < 1e-7);
    }

    ParamVector u = oracle::random_vector(n, 20), v = oracle::random_vector(n, 21);
    const double uhv = u.dot(hvp(f.spec, f.params, f.data, v));
    const double vhu = v.dot(hvp(f.spec, f.params, f.data, u));
    CHECK(std::abs(uhv - vhu) <= 1e-8 * std::max(std::abs(uhv), 1e-300));

    const double a = 1.7, b = -0.3;
    ParamVector lhs = hvp(f.spec, f.params, f.data, a * u + b * v);
    ParamVector rhs = a * hvp(f.spec, f.params, f.data, u) + b * hvp(f.spec, f.params, f.data, v);
    CHECK((lhs - rhs).norm() <= 1e-9 * rhs.norm());

    CHECK_THROWS_AS(hvp(f.spec, f.params, f.data, ParamVector::Zero(n + 1)), Error);
    ParamVector bad = ParamVector::Zero(n);
    bad(0) = NAN;
    CHECK_THROWS_AS(hvp(f.spec, f.params, f.data, bad), Error);
}

TEST_CASE("hvp matches the finite-difference-of-gradient oracle") {
    Fixture f = small_net(false, 2);
    ParamVector v = oracle::random_vector(f.params.size(), 3);
    ParamVector want = oracle::fd_hvp(f.spec, f.params, f.data, v);
    CHECK((hvp(f.spec, f.params, f.data, v) - want).lpNorm<Eigen::Infinity>() < 1e-5);
}

TEST_CASE("exact hessian of a one-parameter quadratic model") {
    MlpSpec s = oracle::make_spec({1, 1}, false, Activation::linear, LossKind::mse);
    Dataset ds;
    ds.inputs.resize(3, 1);
    ds.inputs << 1.0, -2.0, 0.5;
    ds.labels = {0, 0, 0};
    ParamVector p(1);
    p << 0.3;
    Eigen::MatrixXd h = exact_hessian(s, p, ds);
    CHECK(h(0, 0) == doctest::Approx((1.0 + 4.0 + 0.25) / 3.0).epsilon(1e-15));
}

TEST_CASE("exact hessian matches second-order finite differences") {
    for (bool bias : {true, false}) {
        Fixture f = small_net(bias, 3);
        REQUIRE(f.params.size() <= 100);
        Eigen::MatrixXd h = exact_hessian(f.spec, f.params, f.data);
        CHECK((h - oracle::fd_hessian(f.spec, f.params, f.data, 1e-4)).lpNorm<Eigen::Infinity>() < 1e-4);
        CHECK((h - h.transpose()).lpNorm<Eigen::Infinity>() == 0.0);
    }
}

TEST_CASE("capacity cap is enforced") {
    Fixture f = small_net(true, 4);
    CHECK_THROWS_AS(exact_hessian(f.spec, f.params, f.data, 10), Error);
    try {
        exact_hessian(f.spec, f.params, f.data, 10);
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::capacity);
    }
}

TEST_CASE("hessian is PSD at a converged minimum") {
    SUBCASE("softmax regression") {
        MlpSpec s = oracle::make_spec({3, 3}, true, Activation::linear);
        Dataset ds = oracle::random_data(40, 3, 3, 5);
        ParamVector p = train_to_tolerance(s, ParamVector::Zero(12), ds, 0.5, 1e-8, 100000);
        Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(exact_hessian(s, p, ds)).eigenvalues();
        CHECK(ev.minCoeff() > -1e-6 * ev.maxCoeff());
    }
    SUBCASE("two-layer linear net on noisy labels") {
        // Random labels keep the loss away from zero, so the minimum is attained.
        MlpSpec s = oracle::make_spec({2, 3, 3}, true, Activation::linear);
        Dataset ds = oracle::random_data(200, 2, 3, 15);
        ParamVector p = train_to_tolerance(s, init_params(s, 1), ds, 0.2, 1e-9, 400000);
        REQUIRE(mean_grad(s, p, ds).norm() < 1e-9);
        Eigen::VectorXd ev = Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(exact_hessian(s, p, ds)).eigenvalues();
        CHECK(ev.minCoeff() > -1e-6 * ev.maxCoeff());
    }
}

TEST_CASE("outer product and functional decomposition") {
    SUBCASE("linear model with mse is its own Gauss-Newton matrix") {
        MlpSpec s = oracle::make_spec({3, 2}, false, Activation::linear, LossKind::mse);
        Dataset ds = oracle::random_data(9, 3, 2, 6);
        ParamVector p = oracle::random_vector(6, 7);
        Eigen::MatrixXd xx = ds.inputs.transpose() * ds.inputs / 9.0;
        Eigen::MatrixXd want = Eigen::MatrixXd::Zero(6, 6);
        want.topLeftCorner(3, 3) = xx;
        want.bottomRightCorner(3, 3) = xx;
        CHECK((outer_product_hessian(s, p, ds) - want).lpNorm<Eigen::Infinity>() < 1e-14);
        CHECK(functional_hessian(s, p, ds).lpNorm<Eigen::Infinity>() < 1e-14);
    }
    SUBCASE("sum reproduces the exact hessian") {
        for (bool bias : {true, false}) {
            Fixture f = small_net(bias, 8);
            Eigen::MatrixXd o = outer_product_hessian(f.spec, f.params, f.data);
            Eigen::MatrixXd fn = functional_hessian(f.spec, f.params, f.data);
            Eigen::MatrixXd h = exact_hessian(f.spec, f.params, f.data);
            CHECK((o + fn - h).lpNorm<Eigen::Infinity>() < 1e-6);
            CHECK(Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(o).eigenvalues().minCoeff() >
                  -1e-12 * o.norm());
        }
    }
    SUBCASE("outer product matches the jacobian sum") {
        Fixture f = small_net(true, 9);
        Eigen::MatrixXd want = Eigen::MatrixXd::Zero(f.params.size(), f.params.size());
        for (Index i = 0; i < f.data.size(); ++i) {
            Eigen::VectorXd x = f.data.inputs.row(i).transpose();
            Eigen::MatrixXd j = output_jacobian(f.spec, f.params, x);
            want += j * loss_output_hessian(softmax(forward(f.spec, f.params, x).logits)) * j.transpose();
        }
        want /= static_cast<double>(f.data.size());
        CHECK((outer_product_hessian(f.spec, f.params, f.data) - want).lpNorm<Eigen::Infinity>() < 1e-12);
    }
    SUBCASE("relu without bias has block-hollow functional hessian") {
        Fixture f = small_net(false, 10);
        ParamLayout layout(f.spec);
        Eigen::MatrixXd fn = functional_hessian(f.spec, f.params, f.data);
        double worst = 0.0;
        for (const auto& s : layout.layers())
            worst = std::max(worst, fn.block(s.weight_offset, s.weight_offset, s.weight_count(), s.weight_count())
                                        .lpNorm<Eigen::Infinity>());
        CHECK(worst < 1e-6);
        CHECK(fn.lpNorm<Eigen::Infinity>() > 1e-3);
    }
    SUBCASE("functional part is small at a converged toy minimum") {
        TaskSequence seq = toy_geometric(2, 20);
        MlpSpec s = oracle::make_spec({2, 8, 8, 2}, true);
        const Dataset& ds = seq.tasks[0].train;
        ParamVector p = train_to_tolerance(s, init_params(s, 2), ds, 0.5, 1e-3, 200000);
        REQUIRE(mean_grad(s, p, ds).norm() < 1e-3);
        const double ratio = functional_hessian(s, p, ds).norm() / outer_product_hessian(s, p, ds).norm();
        CHECK(ratio < 0.5);
    }
}

TEST_CASE("deflated power iteration") {
    SUBCASE("diagonal oracle") {
        Eigen::VectorXd d(3);
        d << 5.0, 2.0, 1.0;
        HvpOracle op = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(d.cwiseProduct(v)); };
        PowerIterationOptions o;
        o.tol = 1e-12;
        o.max_iter = 10000;
        EigenPairs e = top_k_eigs(op, 3, 2, o);
        CHECK(e.values(0) == doctest::Approx(5.0).epsilon(1e-10));
        CHECK(e.values(1) == doctest::Approx(2.0).epsilon(1e-10));
        CHECK(std::abs(e.vectors(0, 0)) == doctest::Approx(1.0).epsilon(1e-8));
        CHECK(std::abs(e.vectors(1, 1)) == doctest::Approx(1.0).epsilon(1e-8));
        CHECK(e.converged[0]);
        CHECK(e.converged[1]);
    }
    SUBCASE("argument checks") {
        HvpOracle op = [](const Eigen::VectorXd& v) { return v; };
        CHECK_THROWS_AS(top_k_eigs(op, 3, 4), Error);
        PowerIterationOptions o;
        o.tol = 0.0;
        CHECK_THROWS_AS(top_k_eigs(op, 3, 1, o), Error);
    }
    SUBCASE("non-convergence is flagged, not fatal") {
        Eigen::VectorXd d(4);
        d << 1.0, 0.999, 0.5, 0.1;
        HvpOracle op = [&](const Eigen::VectorXd& v) { return Eigen::VectorXd(d.cwiseProduct(v)); };
        PowerIterationOptions o;
        o.max_iter = 3;
        o.tol = 1e-15;
        EigenPairs e;
        CHECK_NOTHROW(e = top_k_eigs(op, 4, 1, o));
        CHECK_FALSE(e.converged[0]);
    }
    SUBCASE("matches the dense eigensolver on a network hessian") {
        MlpSpec s = oracle::make_spec({6, 8, 6, 4}, true);
        ParamVector p = init_params(s, 11);
        REQUIRE(p.size() <= 200);
        Dataset ds = oracle::random_data(50, 6, 4, 12);
        HessianOperator op(s, p, ds);
        Eigen::MatrixXd h = exact_hessian(s, p, ds);
        EigenPairs dense = dense_eigs(h);
        PowerIterationOptions o;
        o.tol = 1e-13;
        o.max_iter = 200000;
        const int k = 5;
        EigenPairs e = top_k_eigs([&](const Eigen::VectorXd& v) { return op.apply(v); }, p.size(), k, o);
        const Eigen::MatrixXd gram = e.vectors.transpose() * e.vectors - Eigen::MatrixXd::Identity(k, k);
        CHECK(gram.lpNorm<Eigen::Infinity>() < 1e-8);
        for (int i = 0; i < k; ++i) {
            CHECK(std::abs(e.values(i) - dense.values(i)) < 1e-6 * std::abs(dense.values(i)));
            const double gap = std::min(i > 0 ? std::abs(dense.values(i) - dense.values(i - 1)) : INFINITY,
                                        std::abs(std::abs(dense.values(i)) - std::abs(dense.values(i + 1))));
            if (gap > 1e-6 * std::abs(dense.values(0)))
                CHECK(std::abs(e.vectors.col(i).dot(dense.vectors.col(i))) > 0.999);
        }
        CHECK(oracle::max_principal_angle(e.vectors, dense.vectors.leftCols(k)) < 1e-3);

        // No random probe beats the top Rayleigh quotient.
        const double top = e.vectors.col(0).dot(h * e.vectors.col(0));
        REQUIRE(e.values(0) > 0.0);
        for (int j = 0; j < 100; ++j) {
            Eigen::VectorXd u = oracle::random_vector(p.size(), 1000 + j).normalized();
            CHECK(u.dot(h * u) <= top);
        }
    }
    SUBCASE("k = P reconstructs a tiny hessian") {
        MlpSpec s = oracle::make_spec({2, 3, 2}, true);
        ParamVector p = init_params(s, 13);
        Dataset ds = oracle::random_data(20, 2, 2, 14);
        Eigen::MatrixXd h = exact_hessian(s, p, ds);
        PowerIterationOptions o;
        o.tol = 1e-14;
        o.max_iter = 200000;
        EigenPairs e = top_k_eigs([&](const Eigen::VectorXd& v) { return Eigen::VectorXd(h * v); }, p.size(),
                                  static_cast<int>(p.size()), o);
        Eigen::MatrixXd rec = e.vectors * e.values.asDiagonal() * e.vectors.transpose();
        CHECK((rec - h).norm() / h.norm() < 1e-5);
    }
}

TEST_CASE("dense eigen ordering") {
    Eigen::MatrixXd m = oracle::random_symmetric(12, 3);
    EigenPairs e = dense_eigs(m);
    for (Index i = 1; i < e.count(); ++i) CHECK(std::abs(e.values(i - 1)) >= std::abs(e.values(i)));
    CHECK((e.vectors.transpose() * e.vectors - Eigen::MatrixXd::Identity(12, 12)).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK((dense_eigenvalues(m) - e.values).lpNorm<Eigen::Infinity>() < 1e-12);
    CHECK(e.leading(4).count() == 4);
}

TEST_CASE("energy cutoff") {
    std::vector<double> four{1, 1, 1, 1};
    CHECK(energy_cutoff_k(four, 0.5) == 2);
    CHECK(energy_cutoff_k(four, 1.0) == 0);
    CHECK(energy_cutoff_k(four, 0.0) == 4);
    std::vector<double> with_zero{3, 2, 0, 0};
    CHECK(energy_cutoff_k(with_zero, 0.0) == 2);
    CHECK(energy_cutoff_k(std::vector<double>{}, 0.3) == 0);

    // Exhaustive prefix scan.
    std::mt19937_64 rng(5);
    std::uniform_real_distribution<double> u(-3.0, 3.0);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<double> v(1 + rng() % 20);
        for (double& x : v) x = u(rng);
        std::sort(v.begin(), v.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });
        const double eps = std::uniform_real_distribution<double>(0.001, 0.999)(rng);
        double total = 0.0;
        for (double x : v) total += x * x;
        Index want = static_cast<Index>(v.size());
        for (std::size_t k = 0; k <= v.size(); ++k) {
            double part = 0.0;
            for (std::size_t i = 0; i < k; ++i) part += v[i] * v[i];
            if (part >= (1.0 - eps) * total) {
                want = static_cast<Index>(k);
                break;
            }
        }
        CHECK(energy_cutoff_k(v, eps) == want);
    }
}

TEST_CASE("effective rank") {
    Eigen::VectorXd v(4);
    v << 4, 2, 1, 0.01;
    CHECK(effective_rank(v, 0.2) == 3);
    CHECK(effective_rank(Eigen::VectorXd(), 0.5) == 0);
    CHECK_THROWS_AS(effective_rank(v, 0.0), Error);

    // Tiny threshold agrees with the rank of the dense matrix.
    Eigen::MatrixXd a = oracle::random_matrix(10, 4, 6);
    Eigen::MatrixXd m = a * a.transpose();
    Eigen::VectorXd ev = dense_eigenvalues(m);
    Eigen::FullPivLU<Eigen::MatrixXd> lu(m);
    lu.setThreshold(1e-10);
    CHECK(effective_rank(ev, 1e-10) == lu.rank());
    CHECK(numerical_rank(ev, 10) == 4);

    std::mt19937_64 rng(7);
    for (int trial = 0; trial < 50; ++trial) {
        Eigen::VectorXd s = oracle::random_vector(15, 100 + trial);
        Index prev = effective_rank(s, 1e-6);
        for (double frac : {1e-4, 1e-2, 0.1, 0.3, 0.6, 1.0}) {
            const Index r = effective_rank(s, frac);
            CHECK(r <= prev);
            prev = r;
        }
    }
}

TEST_CASE("spectrum csv") {
    const auto path = std::filesystem::temp_directory_path() / "clgeo_spectrum_test.csv";
    Eigen::VectorXd v(2);
    v << 3.0, -1.0;
    write_spectrum_csv(path.string(), {{1, v}, {2, v}});
    CsvTable t = CsvTable::read(path.string());
    REQUIRE(t.header() == std::vector<std::string>{"task_id", "index", "eigenvalue"});
    CHECK(t.rows().size() == 4);
    CHECK(parse_double(t.rows()[1][2]) == -1.0);
    std::filesystem::remove(path);
}

}  // TEST_SUITE
