#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>
#include <vector>

#include "ktd/losses.hpp"

using namespace ktd;
using namespace ktd::losses;

// ---------------------------------------------------------------------------
// Independent oracles (long double, direct formulas, no shared code with the
// implementations under test).
// ---------------------------------------------------------------------------

namespace oracle {

std::vector<double> softmax(const std::vector<double>& z, double t) {
    long double sum = 0.0L;
    std::vector<long double> e(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) {
        e[i] = expl(static_cast<long double>(z[i]) / t);
        sum += e[i];
    }
    std::vector<double> p(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) p[i] = static_cast<double>(e[i] / sum);
    return p;
}

double cross_entropy(const std::vector<double>& p, int y) {
    return static_cast<double>(-logl(static_cast<long double>(p[static_cast<std::size_t>(y)])));
}

// Eq-style grouping: classes outermost, their sample index sets inside.
double pc(const std::vector<std::vector<double>>& probs, const std::vector<int>& ys, double xi) {
    long double total = 0.0L;
    const int K = static_cast<int>(probs[0].size());
    for (int k = 0; k < K; ++k)
        for (std::size_t i = 0; i < probs.size(); ++i) {
            if (ys[i] != k) continue;
            for (int j = 0; j < K; ++j) {
                if (j == k) continue;
                long double h = static_cast<long double>(probs[i][static_cast<std::size_t>(j)]) +
                                xi - probs[i][static_cast<std::size_t>(k)];
                if (h > 0) total += h;
            }
        }
    return static_cast<double>(total / static_cast<long double>(probs.size()));
}

std::vector<double> arcface(const std::vector<double>& f,
                            const std::vector<std::vector<double>>& rows, int y, double s,
                            double m) {
    std::vector<double> out(rows.size());
    for (std::size_t k = 0; k < rows.size(); ++k) {
        long double c = 0.0L;
        for (std::size_t i = 0; i < f.size(); ++i) c += static_cast<long double>(f[i]) * rows[k][i];
        if (c > 1.0L) c = 1.0L;
        if (c < -1.0L) c = -1.0L;
        long double theta = acosl(c);
        if (static_cast<int>(k) == y) theta += m;
        out[k] = static_cast<double>(s * cosl(theta));
    }
    return out;
}

double kd(const std::vector<double>& zs, const std::vector<double>& zt, int y,
          const DistillConfig& cfg) {
    double student;
    auto ps1 = softmax(zs, 1.0);
    if (cfg.student_loss == StudentLoss::pc)
        student = pc({ps1}, {y}, cfg.pc.xi);
    else
        student = cross_entropy(ps1, y);
    if (cfg.alpha == 0.0) return student;
    auto q = softmax(zt, cfg.temperature);
    auto p = softmax(zs, cfg.temperature);
    long double kl = 0.0L;
    for (std::size_t k = 0; k < q.size(); ++k)
        if (q[k] > 0)
            kl += static_cast<long double>(q[k]) *
                  (logl(static_cast<long double>(q[k])) - logl(static_cast<long double>(p[k])));
    return cfg.alpha * cfg.temperature * cfg.temperature * static_cast<double>(kl) +
           (1.0 - cfg.alpha) * student;
}

double entropy(const std::vector<double>& p) {
    long double h = 0.0L;
    for (double x : p)
        if (x > 0) h -= static_cast<long double>(x) * logl(static_cast<long double>(x));
    return static_cast<double>(h);
}

}  // namespace oracle

namespace {

std::vector<double> random_logits(std::mt19937_64& eng, std::size_t k, double span = 8.0) {
    std::uniform_real_distribution<double> u(-span, span);
    std::vector<double> z(k);
    for (double& x : z) x = u(eng);
    return z;
}

std::vector<double> random_unit(std::mt19937_64& eng, std::size_t d) {
    std::normal_distribution<double> n;
    std::vector<double> v(d);
    double s = 0.0;
    do {
        s = 0.0;
        for (double& x : v) {
            x = n(eng);
            s += x * x;
        }
    } while (s < 1e-12);
    s = std::sqrt(s);
    for (double& x : v) x /= s;
    return v;
}

}  // namespace

TEST_CASE("softmax examples") {
    auto p0 = softmax(std::vector<double>{0, 0, 0}, 5.0);
    for (double x : p0) REQUIRE(x == Catch::Approx(1.0 / 3).margin(1e-12));

    auto p1 = softmax(std::vector<double>{1, 0}, 1.0);
    REQUIRE(p1[0] == Catch::Approx(0.73106).margin(1e-5));
    REQUIRE(p1[1] == Catch::Approx(0.26894).margin(1e-5));

    auto p2 = softmax(std::vector<double>{1, 0}, 10.0);
    REQUIRE(p2[0] == Catch::Approx(0.52498).margin(1e-5));
    REQUIRE(p2[1] == Catch::Approx(0.47502).margin(1e-5));
}

TEST_CASE("softmax errors") {
    REQUIRE_THROWS_AS(softmax(std::vector<double>{1, 2}, 0.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax(std::vector<double>{1, 2}, -1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax(std::vector<double>{}, 1.0), std::invalid_argument);
    REQUIRE_THROWS_AS(softmax(std::vector<double>{std::nan("")}, 1.0), std::invalid_argument);
}

TEST_CASE("softmax simplex and shift invariance") {
    std::mt19937_64 eng(11);
    for (int rep = 0; rep < 200; ++rep) {
        auto z = random_logits(eng, 2 + rep % 7);
        for (double t : {1.0, 5.0, 10.0}) {
            auto p = softmax(z, t);
            double sum = 0.0;
            for (double x : p) sum += x;
            REQUIRE(std::abs(sum - 1.0) <= 1e-9);
            auto zs = z;
            for (double& x : zs) x += 3.25;
            auto ps = softmax(zs, t);
            for (std::size_t i = 0; i < p.size(); ++i)
                REQUIRE(ps[i] == Catch::Approx(p[i]).margin(1e-12));
        }
    }
}

TEST_CASE("softmax entropy non-decreasing in temperature") {
    std::mt19937_64 eng(12);
    for (int rep = 0; rep < 100; ++rep) {
        auto z = random_logits(eng, 3 + rep % 5);
        double prev = -1.0;
        for (int t = 1; t <= 20; ++t) {
            double h = oracle::entropy(softmax(z, static_cast<double>(t)));
            REQUIRE(h >= prev - 1e-12);
            prev = h;
        }
    }
}

TEST_CASE("cross entropy examples and errors") {
    REQUIRE(cross_entropy(std::vector<double>{1, 0, 0}, 0) == Catch::Approx(0.0).margin(1e-12));
    REQUIRE(cross_entropy(std::vector<double>{1.0 / 3, 1.0 / 3, 1.0 / 3}, 2) ==
            Catch::Approx(std::log(3.0)).margin(1e-9));
    REQUIRE(cross_entropy(std::vector<double>{0.5, 0.3, 0.2}, 0) ==
            Catch::Approx(std::log(2.0)).margin(1e-9));
    REQUIRE_THROWS_AS(cross_entropy(std::vector<double>{0.5, 0.5}, 2), std::invalid_argument);
    REQUIRE_THROWS_AS(cross_entropy(std::vector<double>{0.5, 0.5}, -1), std::invalid_argument);
    // floor keeps degenerate probabilities finite
    REQUIRE(cross_entropy(std::vector<double>{1, 0, 0}, 1) ==
            Catch::Approx(-std::log(1e-12)).margin(1e-9));
}

TEST_CASE("pc loss examples") {
    PCConfig cfg{0.8};
    REQUIRE(pc_loss({{1, 0, 0}}, std::vector<int>{0}, cfg) == 0.0);
    REQUIRE(pc_loss({{1.0 / 3, 1.0 / 3, 1.0 / 3}}, std::vector<int>{0}, cfg) ==
            Catch::Approx(1.6).margin(1e-12));
    REQUIRE(pc_loss({{0.5, 0.3, 0.2}, {0.2, 0.7, 0.1}}, std::vector<int>{0, 1}, cfg) ==
            Catch::Approx(0.8).margin(1e-12));
    REQUIRE_THROWS_AS(pc_loss({}, std::vector<int>{}, cfg), std::invalid_argument);
}

TEST_CASE("pc loss zero iff margin satisfied") {
    std::mt19937_64 eng(13);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int rep = 0; rep < 500; ++rep) {
        std::size_t k = 3 + rep % 4;
        std::vector<double> p(k);
        double s = 0.0;
        for (double& x : p) {
            x = u(eng) + 1e-3;
            s += x;
        }
        for (double& x : p) x /= s;
        int y = static_cast<int>(eng() % k);
        double xi = 0.05 + 0.9 * u(eng);
        double best_other = -1.0;
        for (std::size_t j = 0; j < k; ++j)
            if (static_cast<int>(j) != y) best_other = std::max(best_other, p[j]);
        bool satisfied = p[static_cast<std::size_t>(y)] - best_other >= xi;
        double loss = pc_loss({p}, std::vector<int>{y}, PCConfig{xi});
        if (satisfied)
            REQUIRE(loss == 0.0);
        else
            REQUIRE(loss > 0.0);
    }
}

TEST_CASE("pc loss batch permutation invariance and mean scaling") {
    std::mt19937_64 eng(14);
    std::vector<std::vector<double>> batch;
    std::vector<int> ys;
    for (int i = 0; i < 6; ++i) {
        auto p = oracle::softmax(random_logits(eng, 4), 1.0);
        batch.push_back(p);
        ys.push_back(static_cast<int>(eng() % 4));
    }
    PCConfig cfg{0.6};
    double base = pc_loss(batch, ys, cfg);
    // permute
    std::vector<std::vector<double>> perm = {batch[3], batch[0], batch[5],
                                             batch[1], batch[4], batch[2]};
    std::vector<int> perm_y = {ys[3], ys[0], ys[5], ys[1], ys[4], ys[2]};
    REQUIRE(pc_loss(perm, perm_y, cfg) == Catch::Approx(base).margin(1e-12));
    // duplicating the batch keeps the mean
    auto doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    auto doubled_y = ys;
    doubled_y.insert(doubled_y.end(), ys.begin(), ys.end());
    REQUIRE(pc_loss(doubled, doubled_y, cfg) == Catch::Approx(base).margin(1e-12));
}

TEST_CASE("arcface examples") {
    ArcFaceConfig id{1.0, 0.0};
    std::mt19937_64 eng(15);
    auto f = random_unit(eng, 5);
    std::vector<std::vector<double>> rows = {random_unit(eng, 5), random_unit(eng, 5),
                                             random_unit(eng, 5)};
    auto z = arcface_logits(f, rows, 1, id);
    for (std::size_t k = 0; k < rows.size(); ++k) {
        double c = 0.0;
        for (std::size_t i = 0; i < f.size(); ++i) c += f[i] * rows[k][i];
        REQUIRE(z[k] == c);  // m=0, s=1 is exactly the cosine
    }

    // aligned target row, m=0.5, s=30
    std::vector<std::vector<double>> aligned = {f, rows[1]};
    auto za = arcface_logits(f, aligned, 0, ArcFaceConfig{30.0, 0.5});
    REQUIRE(za[0] == Catch::Approx(30.0 * std::cos(0.5)).margin(1e-9));
    REQUIRE(za[0] == Catch::Approx(26.3275).margin(1e-4));

    // margin never raises the target logit while theta stays in [0, pi - m]
    for (int rep = 0; rep < 200; ++rep) {
        auto ff = random_unit(eng, 4);
        std::vector<std::vector<double>> rr = {random_unit(eng, 4), random_unit(eng, 4)};
        double c = 0.0;
        for (std::size_t i = 0; i < ff.size(); ++i) c += ff[i] * rr[0][i];
        double theta = std::acos(std::clamp(c, -1.0, 1.0));
        if (theta > 3.14159265358979 - 0.5) continue;
        auto plain = arcface_logits(ff, rr, -0 == 0 ? 1 : 0, ArcFaceConfig{1.0, 0.0});
        auto marg = arcface_logits(ff, rr, 0, ArcFaceConfig{1.0, 0.5});
        REQUIRE(marg[0] <= plain[0] + 1e-12);
    }

    std::vector<double> not_unit = {1.0, 1.0};
    REQUIRE_THROWS_AS(arcface_logits(not_unit, rows, 0, id), std::invalid_argument);
}

TEST_CASE("kd loss degeneracies") {
    std::mt19937_64 eng(16);
    for (int rep = 0; rep < 100; ++rep) {
        auto zs = random_logits(eng, 3);
        auto zt = random_logits(eng, 3);
        int y = static_cast<int>(eng() % 3);

        DistillConfig a0;
        a0.alpha = 0.0;
        a0.temperature = 5.0;
        a0.student_loss = StudentLoss::pc;
        a0.pc.xi = 0.8;
        auto plain = pc_value_grad(zs, y, a0.pc);
        REQUIRE(kd_loss(zs, zt, y, a0) == plain.loss);  // exact: KL path evaporates

        DistillConfig mix;
        mix.alpha = 0.7;
        mix.temperature = 5.0;
        mix.student_loss = StudentLoss::softmax;
        auto ce = softmax_ce_value_grad(zs, y);
        double self = kd_loss(zs, zs, y, mix);
        REQUIRE(std::abs(self - (1.0 - mix.alpha) * ce.loss) <=
                mix.alpha * mix.temperature * mix.temperature * 1e-12);
    }
}

TEST_CASE("kd loss derived scalar example") {
    DistillConfig cfg;
    cfg.alpha = 1.0;
    cfg.temperature = 1.0;
    cfg.student_loss = StudentLoss::softmax;
    std::vector<double> zt = {1, 0}, zs = {0, 0};
    double expect = oracle::kd(zs, zt, 0, cfg);
    double got = kd_loss(zs, zt, 0, cfg);
    REQUIRE(got == Catch::Approx(expect).margin(1e-12));
    // the frozen oracle value: 0.7311*ln(0.7311/0.5) + 0.2689*ln(0.2689/0.5)
    REQUIRE(got == Catch::Approx(0.110950).margin(1e-4));
    REQUIRE_THROWS_AS(kd_loss(std::vector<double>{1, 2, 3}, zt, 0, cfg), std::invalid_argument);
}

TEST_CASE("losses match oracles on random inputs") {
    std::mt19937_64 eng(17);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    for (int rep = 0; rep < 1000; ++rep) {
        std::size_t k = 2 + rep % 6;
        auto z = random_logits(eng, k);
        double t = 1.0 + 9.0 * u01(eng);
        auto p = softmax(z, t);
        auto po = oracle::softmax(z, t);
        for (std::size_t i = 0; i < k; ++i) REQUIRE(std::abs(p[i] - po[i]) <= 1e-9);

        int y = static_cast<int>(eng() % k);
        REQUIRE(std::abs(cross_entropy(po, y) - oracle::cross_entropy(po, y)) <= 1e-9);

        double xi = 0.05 + 0.9 * u01(eng);
        REQUIRE(std::abs(pc_loss({po}, std::vector<int>{y}, PCConfig{xi}) -
                         oracle::pc({po}, {y}, xi)) <= 1e-9);

        DistillConfig dc;
        dc.alpha = u01(eng);
        dc.temperature = 1.0 + 9.0 * u01(eng);
        dc.student_loss = rep % 2 ? StudentLoss::pc : StudentLoss::softmax;
        dc.pc.xi = xi;
        auto zt = random_logits(eng, k);
        REQUIRE(std::abs(kd_loss(z, zt, y, dc) - oracle::kd(z, zt, y, dc)) <= 1e-9);

        auto f = random_unit(eng, 6);
        std::vector<std::vector<double>> rows;
        for (std::size_t i = 0; i < k; ++i) rows.push_back(random_unit(eng, 6));
        ArcFaceConfig ac{30.0, 0.5};
        auto za = arcface_logits(f, rows, y, ac);
        auto zo = oracle::arcface(f, rows, y, ac.scale, ac.margin);
        for (std::size_t i = 0; i < k; ++i) REQUIRE(std::abs(za[i] - zo[i]) <= 1e-9);
    }
}

TEST_CASE("loss gradients match finite differences") {
    std::mt19937_64 eng(18);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const double h = 1e-5;
    auto rel_err = [](double a, double b) {
        return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b));
    };
    for (int rep = 0; rep < 50; ++rep) {
        std::size_t k = 3 + rep % 3;
        auto z = random_logits(eng, k, 3.0);
        int y = static_cast<int>(eng() % k);

        DistillConfig dc;
        dc.alpha = u01(eng);
        dc.temperature = 1.0 + 4.0 * u01(eng);
        dc.student_loss = rep % 2 ? StudentLoss::pc : StudentLoss::softmax;
        dc.pc.xi = 0.3 + 0.5 * u01(eng);
        auto zt = random_logits(eng, k, 3.0);

        // keep clear of hinge kinks for the PC branch
        if (dc.student_loss == StudentLoss::pc) {
            auto p = softmax(z, 1.0);
            bool near_kink = false;
            for (std::size_t j = 0; j < k; ++j)
                if (static_cast<int>(j) != y &&
                    std::abs(p[j] + dc.pc.xi - p[static_cast<std::size_t>(y)]) < 1e-4)
                    near_kink = true;
            if (near_kink) continue;
        }

        auto vg = kd_value_grad(z, zt, y, dc);
        for (std::size_t i = 0; i < k; ++i) {
            auto zp = z, zm = z;
            zp[i] += h;
            zm[i] -= h;
            double fd = (kd_loss(zp, zt, y, dc) - kd_loss(zm, zt, y, dc)) / (2 * h);
            if (std::abs(fd) < 1e-10 && std::abs(vg.dlogits[i]) < 1e-10) continue;
            REQUIRE(rel_err(vg.dlogits[i], fd) <= 1e-4);
        }
    }
}

TEST_CASE("arcface raw-path gradients match finite differences") {
    std::mt19937_64 eng(19);
    std::normal_distribution<double> n;
    const double h = 1e-5;
    auto rel_err = [](double a, double b) {
        return std::abs(a - b) / std::max(1e-6, std::abs(a) + std::abs(b));
    };
    ArcFaceConfig cfg{10.0, 0.4};
    for (int rep = 0; rep < 30; ++rep) {
        const std::size_t d = 5, K = 3;
        std::vector<double> f(d);
        for (double& x : f) x = n(eng);
        std::vector<std::vector<double>> rows(K, std::vector<double>(d));
        for (auto& r : rows)
            for (double& x : r) x = n(eng);
        int y = static_cast<int>(eng() % K);

        auto loss_of = [&](const std::vector<double>& ff,
                           const std::vector<std::vector<double>>& rr) {
            auto tr = arcface_forward_raw(ff, rr, y, cfg);
            return softmax_ce_value_grad(tr.logits, y).loss;
        };

        auto tr = arcface_forward_raw(f, rows, y, cfg);
        auto vg = softmax_ce_value_grad(tr.logits, y);
        std::vector<double> df;
        std::vector<std::vector<double>> drows;
        arcface_backward_raw(tr, vg.dlogits, df, drows);

        for (std::size_t i = 0; i < d; ++i) {
            auto fp = f, fm = f;
            fp[i] += h;
            fm[i] -= h;
            double fd = (loss_of(fp, rows) - loss_of(fm, rows)) / (2 * h);
            if (std::abs(fd) < 1e-10 && std::abs(df[i]) < 1e-10) continue;
            REQUIRE(rel_err(df[i], fd) <= 1e-4);
        }
        for (std::size_t k = 0; k < K; ++k)
            for (std::size_t i = 0; i < d; ++i) {
                auto rp = rows, rm = rows;
                rp[k][i] += h;
                rm[k][i] -= h;
                double fd = (loss_of(f, rp) - loss_of(f, rm)) / (2 * h);
                if (std::abs(fd) < 1e-10 && std::abs(drows[k][i]) < 1e-10) continue;
                REQUIRE(rel_err(drows[k][i], fd) <= 1e-4);
            }
    }
}
