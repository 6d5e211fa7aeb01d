#include <doctest.h>

#include <cmath>

#include "clgeo/error.hpp"
#include "clgeo/quadsim.hpp"
#include "oracles.hpp"

using namespace clgeo;

namespace {

QuadTask make_task(Eigen::MatrixXd h, Eigen::VectorXd c) {
    QuadTask t;
    t.hessian = std::move(h);
    t.optimum = std::move(c);
    return t;
}

Eigen::Vector2d v2(double a, double b) { return {a, b}; }

Eigen::Vector3d v3(double a, double b, double c) { return {a, b, c}; }

// Null space of s from a full SVD, independent of the eigensolver path.
Eigen::MatrixXd svd_null(const Eigen::MatrixXd& s) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(s, Eigen::ComputeFullV);
    const double smax = svd.singularValues()(0);
    Index r = 0;
    while (r < svd.singularValues().size() && svd.singularValues()(r) > 1e-10 * smax) ++r;
    return svd.matrixV().rightCols(s.cols() - r);
}

}  // namespace

TEST_SUITE("quadsim") {

TEST_CASE("loss and gradient") {
    QuadTask t = make_task(Eigen::Vector2d(2.0, 4.0).asDiagonal(), v2(1.0, -1.0));
    CHECK(quad_loss(t, v2(2.0, 0.0)) == 3.0);
    CHECK(quad_grad(t, v2(2.0, 0.0)) == v2(2.0, 4.0));
    CHECK(quad_loss(t, t.optimum) == 0.0);

    auto tasks = random_low_rank_tasks(12, 1, 4, 3);
    ParamVector th = oracle::random_vector(12, 4);
    ParamVector fd(12);
    const double h = 1e-5;
    for (Index i = 0; i < 12; ++i) {
        ParamVector a = th, b = th;
        a(i) += h;
        b(i) -= h;
        fd(i) = (quad_loss(tasks[0], a) - quad_loss(tasks[0], b)) / (2 * h);
    }
    CHECK((quad_grad(tasks[0], th) - fd).lpNorm<Eigen::Infinity>() < 1e-8);
}

TEST_CASE("task validation") {
    Eigen::Matrix2d ind;
    ind << 1.0, 0.0, 0.0, -1.0;
    CHECK_THROWS_AS(make_task(ind, v2(0, 0)).validate(), Error);
    CHECK_THROWS_AS(make_task(Eigen::Matrix3d::Identity(), v2(0, 0)).validate(), Error);
    try {
        make_task(Eigen::MatrixXd::Identity(501, 501), Eigen::VectorXd::Zero(501)).validate();
        FAIL("oversized task accepted");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::capacity);
    }
    CHECK_THROWS_AS(random_low_rank_tasks(5, 2, 6, 1), Error);
}

TEST_CASE("random low-rank tasks") {
    auto tasks = random_low_rank_tasks(30, 4, 5, 7);
    REQUIRE(tasks.size() == 4);
    for (const auto& t : tasks) {
        CHECK_NOTHROW(t.validate());
        CHECK(t.hessian == t.hessian.transpose());
        CHECK(null_space_basis(t.hessian).cols() == 25);
    }
    CHECK(null_space_basis(hessian_sum(tasks, 4)).cols() == 10);
    CHECK(random_low_rank_tasks(30, 4, 5, 7)[2].hessian == tasks[2].hessian);
}

TEST_CASE("pseudoinverse and null space") {
    Eigen::Matrix2d s = Eigen::Vector2d(2.0, 0.0).asDiagonal();
    CHECK(pseudoinverse_apply(s, v2(4.0, 5.0)) == v2(2.0, 0.0));
    Eigen::MatrixXd n = null_space_basis(s);
    REQUIRE(n.cols() == 1);
    CHECK(std::abs(n(1, 0)) == 1.0);
    CHECK(n(0, 0) == 0.0);
    CHECK(null_space_basis(Eigen::Matrix2d::Zero()).cols() == 2);

    // Random rank-deficient PSD matrix against an independent pseudoinverse.
    Eigen::MatrixXd a = oracle::random_matrix(10, 4, 2);
    Eigen::MatrixXd m = a * a.transpose();
    Eigen::MatrixXd pinv = m.completeOrthogonalDecomposition().pseudoInverse();
    Eigen::MatrixXd applied(10, 10);
    for (Index j = 0; j < 10; ++j) applied.col(j) = pseudoinverse_apply(m, Eigen::VectorXd::Unit(10, j));
    CHECK((applied - pinv).norm() < 1e-10 * pinv.norm());
    // Penrose identities.
    CHECK((m * applied * m - m).norm() < 1e-10 * m.norm());
    CHECK((applied * m * applied - applied).norm() < 1e-10 * applied.norm());
    CHECK(((m * applied) - (m * applied).transpose()).norm() < 1e-10);

    Eigen::MatrixXd nb = null_space_basis(m);
    CHECK(nb.cols() == 6);
    CHECK((m * nb).norm() < 1e-10 * m.norm());
    CHECK((nb.transpose() * nb - Eigen::MatrixXd::Identity(6, 6)).norm() < 1e-12);
    const Eigen::MatrixXd sn = svd_null(m);
    CHECK((nb * nb.transpose() - sn * sn.transpose()).norm() < 1e-10);
}

TEST_CASE("constrained update") {
    SUBCASE("diagonal") {
        std::vector<QuadTask> ts{make_task(Eigen::Vector3d(1.0, 0.0, 0.0).asDiagonal(), v3(0, 0, 0))};
        ConstrainedUpdate u = constrained_update(v3(1.0, 2.0, 3.0), ts);
        CHECK_FALSE(u.capacity_exhausted);
        CHECK((u.delta - v3(0.0, 2.0, 3.0)).norm() < 1e-15);
    }
    SUBCASE("full rank leaves nothing") {
        std::vector<QuadTask> ts{make_task(Eigen::Matrix3d::Identity(), v3(0, 0, 0))};
        ConstrainedUpdate u = constrained_update(v3(1.0, 2.0, 3.0), ts);
        CHECK(u.capacity_exhausted);
        CHECK(u.delta.isZero(0.0));
    }
    SUBCASE("no prior tasks passes the proposal through") {
        CHECK(constrained_update(v3(1, 2, 3), {}).delta == v3(1, 2, 3));
    }
    SUBCASE("random PSD matches the orthogonal projector") {
        auto ts = random_low_rank_tasks(20, 3, 4, 9);
        ParamVector prop = oracle::random_vector(20, 10);
        ConstrainedUpdate u = constrained_update(prop, ts);
        Eigen::MatrixXd n = svd_null(hessian_sum(ts, 3));
        CHECK((u.delta - n * (n.transpose() * prop)).norm() < 1e-10);
        for (const auto& t : ts) CHECK((t.hessian * u.delta).norm() < 1e-10);
    }
}

TEST_CASE("schedules") {
    auto s = policy_schedule(QuadPolicy::nmf_correction, 5, 3);
    CHECK(s[0] == QuadStep::null_forgetting);
    CHECK(s[2] == QuadStep::unconstrained);
    CHECK(s[3] == QuadStep::correction);
    CHECK(s[4] == QuadStep::null_forgetting);
    CHECK_THROWS_AS(policy_schedule(QuadPolicy::nmf_correction, 3, 3), Error);
    CHECK_THROWS_AS(policy_schedule(QuadPolicy::nmf_correction, 3, 1), Error);
    for (auto x : policy_schedule(QuadPolicy::unconstrained, 4, 0)) CHECK(x == QuadStep::unconstrained);
}

TEST_CASE("orthogonal tasks in the plane") {
    std::vector<QuadTask> ts{make_task(Eigen::Vector2d(1.0, 0.0).asDiagonal(), v2(1.0, 5.0)),
                             make_task(Eigen::Vector2d(0.0, 3.0).asDiagonal(), v2(-7.0, 2.0))};
    for (auto pol : {QuadPolicy::unconstrained, QuadPolicy::null_forgetting}) {
        QuadRun run = run_sequence(ts, pol);
        CHECK(run.ledger.loss(1, 1) < 1e-28);
        CHECK(run.ledger.forgetting(1, 2) == 0.0);
        CHECK(run.ledger.loss(2, 2) < 1e-28);
        CHECK(run.null_dims == std::vector<Index>{1, 0});
    }
}

TEST_CASE("overlapping tasks forget without constraints") {
    Eigen::Matrix2d h2;
    h2 << 0.5, 0.5, 0.5, 0.5;
    std::vector<QuadTask> ts{make_task(Eigen::Vector2d(1.0, 0.0).asDiagonal(), v2(1.0, 0.0)),
                             make_task(h2, v2(-2.0, 0.0))};
    QuadRunOptions o;
    o.seed = 4;
    QuadRun free_run = run_sequence(ts, QuadPolicy::unconstrained, o);
    const ParamVector d = free_run.checkpoints.delta(2);
    CHECK(free_run.ledger.forgetting(1, 2) > 0.1);
    CHECK(std::abs(free_run.ledger.forgetting(1, 2) - 0.5 * d(0) * d(0)) < 1e-12);

    // The constrained update only moves the second coordinate.
    QuadRun nf = run_sequence(ts, QuadPolicy::null_forgetting, o);
    CHECK(std::abs(nf.ledger.forgetting(1, 2)) < 1e-15);
    CHECK(std::abs(nf.checkpoints.delta(2)(0)) < 1e-15);
    CHECK(nf.ledger.loss(2, 2) < quad_loss(ts[1], nf.checkpoints.theta(1)));
}

TEST_CASE("correction restores earlier tasks in three dimensions") {
    Eigen::Matrix3d h2 = Eigen::Matrix3d::Zero();
    h2.topLeftCorner<2, 2>() << 0.5, 0.5, 0.5, 0.5;
    Eigen::Matrix3d h3 = Eigen::Vector3d(0.0, 0.0, 2.0).asDiagonal();
    std::vector<QuadTask> ts{make_task(Eigen::Vector3d(1.0, 0.0, 0.0).asDiagonal(), v3(1, 0, 0)),
                             make_task(h2, v3(-1, -2, 0)), make_task(h3, v3(0, 0, 4))};
    QuadRunOptions o;
    o.tau = 2;
    o.seed = 11;
    for (auto z : {ZRule::project_step, ZRule::constrained_optimum}) {
        o.z_rule = z;
        QuadRun run = run_sequence(ts, QuadPolicy::nmf_correction, o);
        CHECK(run.ledger.avg_forgetting(2) > 0.1);
        CHECK(std::abs(run.ledger.avg_forgetting(3)) < 1e-12);
        CHECK(std::abs(run.ledger.forgetting(1, 3)) < 1e-12);
        CHECK(std::abs(run.ledger.forgetting(2, 3)) < 1e-12);
        CHECK(run.ledger.loss(3, 3) < 1e-20);
    }
}

TEST_CASE("null-space dimension shrinks by the task rank") {
    auto ts = random_low_rank_tasks(25, 6, 5, 12);
    QuadRun run = run_sequence(ts, QuadPolicy::null_forgetting);
    REQUIRE(run.null_dims.size() == 6);
    for (std::size_t t = 0; t < 6; ++t) CHECK(run.null_dims[t] == std::max<Index>(0, 25 - 5 * Index(t + 1)));
    CHECK(run.capacity_exhausted[5]);
    CHECK_FALSE(run.capacity_exhausted[4]);
    for (int t = 2; t <= 6; ++t) CHECK(std::abs(run.ledger.avg_forgetting(t)) < 1e-10);
}

TEST_CASE("theorem suite") {
    for (std::uint64_t seed : {0u, 1u, 2u, 3u}) {
        QuadSuiteConfig cfg;
        cfg.seed = seed;
        auto checks = quadsim_theorem_suite(cfg);
        CHECK(checks.size() == 3 + 2 * 4 + 2 + 1);
        for (const auto& c : checks) {
            INFO(c.name << " = " << c.value);
            CHECK(c.passed);
        }
    }
}

TEST_CASE("gradient-step solver agrees with the closed form") {
    auto ts = random_low_rank_tasks(15, 4, 3, 21);
    QuadRunOptions a, b;
    a.seed = b.seed = 22;
    b.solver = QuadSolver::gradient_steps;
    b.max_gradient_steps = 1000000;
    b.gradient_tol = 1e-14;
    QuadRun ra = run_sequence(ts, QuadPolicy::null_forgetting, a);
    QuadRun rb = run_sequence(ts, QuadPolicy::null_forgetting, b);
    for (int t = 1; t <= 4; ++t) {
        CHECK(std::abs(ra.ledger.loss(t, t) - rb.ledger.loss(t, t)) < 1e-9);
        for (int o = 1; o < t; ++o) CHECK(std::abs(rb.ledger.forgetting(o, t)) < 1e-10);
    }

    QuadSuiteConfig cfg;
    cfg.dim = 20;
    cfg.num_tasks = 4;
    cfg.rank = 3;
    cfg.tau = 2;
    cfg.solver = QuadSolver::gradient_steps;
    for (const auto& c : quadsim_theorem_suite(cfg)) {
        INFO(c.name << " = " << c.value);
        CHECK(c.passed);
    }
}

TEST_CASE("run argument checks") {
    auto ts = random_low_rank_tasks(6, 3, 2, 1);
    CHECK_THROWS_AS(run_schedule(ts, {QuadStep::unconstrained}), Error);
    std::vector<QuadStep> early{QuadStep::unconstrained, QuadStep::correction, QuadStep::unconstrained};
    CHECK_THROWS_AS(run_schedule(ts, early), Error);
    auto mixed = ts;
    mixed[1] = make_task(Eigen::Matrix2d::Identity(), v2(0, 0));
    CHECK_THROWS_AS(run_sequence(mixed, QuadPolicy::unconstrained), Error);
}

}  // TEST_SUITE
