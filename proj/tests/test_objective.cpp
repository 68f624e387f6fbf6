#include <catch2/catch_amalgamated.hpp>

#include "test_util.hpp"

using namespace bcat;
using testutil::random_tensor;

namespace {

// Independent estimator: explicit double sums over all pairs, own median.
double mmd2_oracle(const Tensor& x, const Tensor& y, const std::vector<double>& mults,
                   std::optional<double> fixed_sigma2) {
    const int n = x.dim(0), m = y.dim(0), d = x.dim(1);
    auto sqdist = [&](const Tensor& a, int i, const Tensor& b, int j) {
        double s = 0.0;
        for (int c = 0; c < d; ++c) {
            const double diff = a.at({i, c}) - b.at({j, c});
            s += diff * diff;
        }
        return s;
    };
    double sigma2;
    if (fixed_sigma2) {
        sigma2 = *fixed_sigma2;
    } else {
        std::vector<double> pool;
        std::vector<const Tensor*> src = {&x, &y};
        std::vector<std::pair<const Tensor*, int>> rows;
        for (const Tensor* t : src)
            for (int i = 0; i < t->dim(0); ++i) rows.emplace_back(t, i);
        for (size_t i = 0; i < rows.size(); ++i)
            for (size_t j = i + 1; j < rows.size(); ++j)
                pool.push_back(sqdist(*rows[i].first, rows[i].second, *rows[j].first, rows[j].second));
        std::sort(pool.begin(), pool.end());
        const size_t mid = pool.size() / 2;
        sigma2 = pool.size() % 2 == 1 ? pool[mid] : 0.5 * (pool[mid - 1] + pool[mid]);
        if (!(sigma2 > 0.0)) sigma2 = 1.0;
    }
    auto kernel = [&](double d2) {
        double s = 0.0;
        for (double mu : mults) s += std::exp(-d2 / (mu * sigma2));
        return s;
    };
    double kxx = 0.0, kyy = 0.0, kxy = 0.0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) kxx += kernel(sqdist(x, i, x, j));
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < m; ++j) kyy += kernel(sqdist(y, i, y, j));
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < m; ++j) kxy += kernel(sqdist(x, i, y, j));
    return kxx / (static_cast<double>(n) * n) + kyy / (static_cast<double>(m) * m) -
           2.0 * kxy / (static_cast<double>(n) * m);
}

Tensor gaussian_samples(int n, int d, double mean_shift, uint64_t seed) {
    Rng rng(seed);
    Tensor t({n, d});
    for (auto& v : t.data) v = mean_shift + rng.next_gaussian();
    return t;
}

}  // namespace

TEST_CASE("cross entropy examples", "[objective]") {
    const Tensor uniform = Tensor::full({2, 4}, 1.5);
    CHECK(cross_entropy_loss(uniform, {0, 3}) == Catch::Approx(std::log(4.0)).margin(1e-12));

    const Tensor confident({1, 3}, {80.0, 0.0, 0.0});
    CHECK(cross_entropy_loss(confident, {0}) <= 1e-12);

    const Tensor two({1, 2}, {0.0, std::log(3.0)});
    CHECK(cross_entropy_loss(two, {1}) == Catch::Approx(-std::log(0.75)).margin(1e-12));
    CHECK(cross_entropy_loss(two, {1}) == Catch::Approx(0.2876820724517809).margin(1e-12));

    CHECK_THROWS_WITH(cross_entropy_loss(two, {2}), Catch::Matchers::ContainsSubstring("out of range"));
}

TEST_CASE("cross entropy gradient", "[objective][grad]") {
    const Tensor logits = random_tensor({4, 5}, 50, 2.0);
    const std::vector<int> labels = {1, 0, 4, 2};
    CHECK(testutil::gradcheck([&](Graph& g, Var v) { return cross_entropy_v(g, v, labels); }, logits));
}

TEST_CASE("mmd2 vanishes exactly on identical inputs and is symmetric", "[objective]") {
    const Tensor x = random_tensor({6, 3}, 60);
    CHECK(mmd2(x, x) == 0.0);

    const Tensor y = random_tensor({5, 3}, 61);
    CHECK(mmd2(x, y) == mmd2(y, x));       // exact, not approximate
    CHECK(mmd2(x, y) >= -1e-12);

    CHECK_THROWS_WITH(mmd2(random_tensor({1, 3}, 62), y), Catch::Matchers::ContainsSubstring("at least 2"));
    CHECK_THROWS_WITH(mmd2(x, random_tensor({5, 4}, 63)), Catch::Matchers::ContainsSubstring("widths"));
}

TEST_CASE("mmd2 on duplicated points with a single unit kernel", "[objective]") {
    // X = {0, 0}, Y = {2, 2} in one dimension, sigma^2 = 1:
    // mean Kxx = mean Kyy = 1, mean Kxy = e^-4.
    const Tensor x({2, 1}, {0.0, 0.0});
    const Tensor y({2, 1}, {2.0, 2.0});
    KernelSpec k;
    k.multipliers = {1.0};
    k.fixed_sigma2 = 1.0;
    const double expect = 2.0 - 2.0 * std::exp(-4.0);
    CHECK(mmd2(x, y, k) == Catch::Approx(expect).margin(1e-14));
    CHECK(mmd2(x, y, k) == Catch::Approx(mmd2_oracle(x, y, {1.0}, 1.0)).margin(1e-14));
}

TEST_CASE("mmd2 equals the double-sum oracle", "[objective]") {
    const KernelSpec def;
    for (uint64_t seed = 1; seed <= 6; ++seed) {
        const int n = 2 + static_cast<int>(seed * 5);  // up to 32
        const int m = 32 - static_cast<int>(seed * 3);
        const Tensor x = random_tensor({n, 4}, 70 + seed, 2.0);
        const Tensor y = random_tensor({m, 4}, 80 + seed, 2.0);
        const double got = mmd2(x, y);
        CHECK(got == Catch::Approx(mmd2_oracle(x, y, def.multipliers, std::nullopt)).margin(1e-10));
        CHECK(got >= -1e-12);
    }
}

TEST_CASE("mmd2 decreases as the sampling distributions approach", "[objective]") {
    const std::vector<double> shifts = {2.0, 1.0, 0.5, 0.0};
    std::vector<double> means(shifts.size(), 0.0);
    for (uint64_t seed = 1; seed <= 3; ++seed) {
        const Tensor x = gaussian_samples(64, 4, 0.0, 900 + seed);
        for (size_t si = 0; si < shifts.size(); ++si) {
            const Tensor y = gaussian_samples(64, 4, shifts[si], 1900 + seed * 7 + si);
            means[si] += mmd2(x, y) / 3.0;
        }
    }
    for (size_t i = 0; i + 1 < means.size(); ++i) CHECK(means[i] >= means[i + 1]);
}

TEST_CASE("mmd2 gradient matches finite differences", "[objective][grad]") {
    // bandwidth pinned so the loss is smooth in the probe
    KernelSpec k;
    k.fixed_sigma2 = 2.0;
    const Tensor y = random_tensor({4, 3}, 91);
    const Tensor x = random_tensor({5, 3}, 90);
    CHECK(testutil::gradcheck([&](Graph& g, Var v) { return mmd2_v(g, v, g.constant(y), k); }, x));
    CHECK(testutil::gradcheck([&](Graph& g, Var v) { return mmd2_v(g, g.constant(x), v, k); }, y));
}

TEST_CASE("target pseudo loss", "[objective]") {
    // one-hot pseudo label and a certain prediction: clamp makes -log 1 = 0
    const Tensor q1({1, 3}, {0, 1, 0});
    const Tensor p1({1, 3}, {0, 1, 0});
    CHECK(target_pseudo_loss(p1, q1) == 0.0);

    // uniform q_hat over 4 classes ties to class 0; uniform p
    const Tensor q2 = Tensor::full({1, 4}, 0.25);
    const Tensor p2 = Tensor::full({1, 4}, 0.25);
    CHECK(target_pseudo_loss(p2, q2) == Catch::Approx(-0.25 * std::log(0.25)).margin(1e-12));
    CHECK(target_pseudo_loss(p2, q2) == Catch::Approx(0.34657359027997264).margin(1e-12));

    // batch of two averages the per-item terms
    Tensor q3({2, 4});
    Tensor p3({2, 4});
    for (int c = 0; c < 4; ++c) {
        q3.at({0, c}) = q2.data[static_cast<size_t>(c)];
        p3.at({0, c}) = p2.data[static_cast<size_t>(c)];
        q3.at({1, c}) = c == 1 ? 1.0 : 0.0;
        p3.at({1, c}) = c == 1 ? 0.7 : 0.1;
    }
    const double item0 = target_pseudo_loss(p2, q2);
    const double item1 = -std::log(0.7);
    CHECK(target_pseudo_loss(p3, q3) == Catch::Approx(0.5 * (item0 + item1)).margin(1e-12));

    Tensor bad = q2;
    bad.data[0] = 0.5;
    CHECK_THROWS_WITH(target_pseudo_loss(p2, bad), Catch::Matchers::ContainsSubstring("sums to"));
}

TEST_CASE("target pseudo loss gradient flows through probs only", "[objective][grad]") {
    Tensor q({3, 4});
    Rng rng(17);
    for (int r = 0; r < 3; ++r) {
        double sum = 0.0;
        for (int c = 0; c < 4; ++c) {
            q.at({r, c}) = 0.1 + rng.next_double();
            sum += q.at({r, c});
        }
        for (int c = 0; c < 4; ++c) q.at({r, c}) /= sum;
    }
    const Tensor logits = random_tensor({3, 4}, 95);
    CHECK(testutil::gradcheck([&](Graph& g, Var v) { return target_pseudo_loss_v(g, softmax_rows(v), q); }, logits));
}

TEST_CASE("total loss combination", "[objective]") {
    const LossReport degenerate = bcat_total_loss(1.25, 9.0, 4.0, 0.0, 0.0);
    CHECK(degenerate.total == 1.25);

    const LossReport defaults = bcat_total_loss(1.0, 2.0, 0.25, 1.0, 3.0);
    CHECK(defaults.total == Catch::Approx(1.0 + 2.0 + 0.75).margin(1e-15));

    const LossReport r = bcat_total_loss(1.0, 2.0, 0.5, 0.5, 3.0);
    CHECK(r.total == Catch::Approx(3.5).margin(1e-15));
    CHECK(r.total == r.cls_s + r.epsilon * r.cls_t + r.beta * r.transfer);  // exact

    CHECK_THROWS(bcat_total_loss(1, 1, 1, 1.5, 1));
    CHECK_THROWS(bcat_total_loss(1, 1, 1, 0.5, -1));
}

TEST_CASE("graph total matches the report arithmetic bit-exactly", "[objective]") {
    Graph g;
    Var a = g.constant(Tensor::scalar(0.731));
    Var b = g.constant(Tensor::scalar(1.619));
    Var c = g.constant(Tensor::scalar(0.0417));
    const double eps = 0.35, beta = 3.0;
    const LossReport r = bcat_total_loss(0.731, 1.619, 0.0417, eps, beta);
    CHECK(g.val(bcat_total_v(a, b, c, eps, beta)).data[0] == r.total);
}

TEST_CASE("softmax with temperature", "[objective]") {
    const Tensor logits = random_tensor({3, 5}, 101, 2.0);
    CHECK(testutil::bitwise_equal(softmax_temperature(logits, 1.0), softmax_rows(logits)));

    const Tensor two({1, 2}, {0.0, 2.0});
    const Tensor st = softmax_temperature(two, 2.0);
    const double e1 = std::exp(1.0);
    CHECK(st.data[0] == Catch::Approx(1.0 / (1.0 + e1)).margin(1e-12));
    CHECK(st.data[1] == Catch::Approx(e1 / (1.0 + e1)).margin(1e-12));
    CHECK(st.data[1] == Catch::Approx(0.7310585786300049).margin(1e-12));

    // very large temperature flattens toward uniform
    const Tensor flat = softmax_temperature(two, 1e9);
    CHECK(flat.data[0] == Catch::Approx(0.5).margin(1e-8));

    CHECK_THROWS_WITH(softmax_temperature(two, 0.0), Catch::Matchers::ContainsSubstring("temperature"));
    CHECK_THROWS(softmax_temperature(two, -1.0));
}

TEST_CASE("kd loss", "[objective]") {
    const double T = 2.0;
    const Tensor z = random_tensor({3, 4}, 111, 2.0);
    const std::vector<int> pseudo = {0, 2, 1};

    // alpha = 1 with matched logits: T^2 times the teacher's own soft entropy
    const Tensor p = softmax_temperature(z, T);
    double entropy = 0.0;
    for (int r = 0; r < 3; ++r)
        for (int c = 0; c < 4; ++c) entropy -= p.at({r, c}) * std::log(p.at({r, c}));
    entropy /= 3.0;
    CHECK(kd_loss(z, z, pseudo, 1.0, T, 0.7) == Catch::Approx(T * T * entropy).margin(1e-10));

    // and its gradient with respect to the student logits vanishes
    auto f = [&](const Tensor& student) { return kd_loss(z, student, pseudo, 1.0, T, 0.7); };
    const Tensor g = finite_diff_grad(f, z, 1e-5);
    for (double v : g.data) CHECK(std::abs(v) <= 1e-6);

    // alpha = 0: pure hard term
    const Tensor student = random_tensor({3, 4}, 112, 2.0);
    const double eps = 0.4;
    CHECK(kd_loss(z, student, pseudo, 0.0, T, eps) ==
          Catch::Approx(eps * cross_entropy_loss(student, pseudo)).margin(1e-12));

    CHECK_THROWS(kd_loss(z, student, pseudo, 1.5, T, eps));
    CHECK_THROWS(kd_loss(z, student, pseudo, 0.5, 0.0, eps));
}

TEST_CASE("kd loss gradient matches finite differences", "[objective][grad]") {
    const Tensor teacher = random_tensor({3, 4}, 120, 2.0);
    const Tensor student = random_tensor({3, 4}, 121, 2.0);
    const std::vector<int> pseudo = {3, 1, 0};
    CHECK(testutil::gradcheck(
        [&](Graph& g, Var v) { return kd_loss_v(g, teacher, v, pseudo, 0.8, 2.0, 0.6); }, student));
}

TEST_CASE("kernel spec validation", "[objective]") {
    KernelSpec empty;
    empty.multipliers.clear();
    CHECK_THROWS(empty.validate());
    KernelSpec neg;
    neg.multipliers = {1.0, -2.0};
    CHECK_THROWS(neg.validate());
}
