#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dermfuse/metrics.hpp"
#include "dermfuse/rng.hpp"

using namespace dermfuse;

namespace {

std::vector<ScoredSample> make(const std::vector<double>& scores, const std::vector<int>& labels) {
    REQUIRE(scores.size() == labels.size());
    std::vector<ScoredSample> out(scores.size());
    for (size_t i = 0; i < scores.size(); ++i) out[i] = {scores[i], labels[i]};
    return out;
}

std::vector<ScoredSample> random_samples(SeededRng& rng, int64_t n, bool tie_heavy) {
    std::vector<ScoredSample> s(size_t(n), ScoredSample{});
    bool saw[2] = {false, false};
    for (auto& x : s) {
        x.label = rng.bernoulli(0.4) ? 1 : 0;
        x.score = tie_heavy ? double(rng.next_below(11)) / 10.0 : rng.uniform01();
        saw[x.label] = true;
    }
    if (!saw[0]) s[0].label = 0;
    if (!saw[1]) s[size_t(n - 1)].label = 1;
    return s;
}

std::string slurp(const std::string& path) {
    std::ifstream in(path);
    REQUIRE(bool(in));
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

}  // namespace

// ===========================================================================
// confusion matrix and rates
// ===========================================================================

TEST_CASE("confusion cells at a mid threshold") {
    const auto cm = confusion_at(make({0.9}, {1}), 0.5);
    REQUIRE(cm.d == 1);
    REQUIRE(cm.a + cm.b + cm.c == 0);

    const auto s = make({0.1, 0.6, 0.4, 0.8}, {0, 0, 1, 1});
    const auto mid = confusion_at(s, 0.5);
    REQUIRE(mid.a == 1);
    REQUIRE(mid.b == 1);
    REQUIRE(mid.c == 1);
    REQUIRE(mid.d == 1);
    REQUIRE(mid.total() == 4);
}

TEST_CASE("degenerate thresholds predict one class") {
    const auto s = make({0.1, 0.6, 0.4, 0.8, 0.3}, {0, 0, 1, 1, 0});
    const auto all_pos = confusion_at(s, 0.0);
    REQUIRE(all_pos.b == 3);
    REQUIRE(all_pos.d == 2);
    REQUIRE(all_pos.a + all_pos.c == 0);

    const auto all_neg = confusion_at(s, 0.81);
    REQUIRE(all_neg.a == 3);
    REQUIRE(all_neg.c == 2);
    REQUIRE(all_neg.b + all_neg.d == 0);
}

TEST_CASE("threshold comparison is inclusive") {
    const auto cm = confusion_at(make({0.5}, {1}), 0.5);
    REQUIRE(cm.d == 1);
}

TEST_CASE("rates reproduce the published confusion matrix") {
    ConfusionMatrix cm;
    cm.a = 32344;
    cm.b = 198;
    cm.c = 877;
    cm.d = 4229;
    const Rates r = rates(cm);
    REQUIRE(r.tpr.has_value());
    REQUIRE(std::abs(*r.tpr - 0.8283) <= 5e-4);
    REQUIRE(std::abs(*r.fpr - 0.00608) <= 5e-5);
    REQUIRE(std::abs(*r.accuracy - 0.9714) <= 5e-4);
    const double total = double(cm.total());
    REQUIRE(std::abs(100.0 * double(cm.a) / total - 85.9) <= 0.05);
    REQUIRE(std::abs(100.0 * double(cm.b) / total - 0.5) <= 0.05);
    REQUIRE(std::abs(100.0 * double(cm.c) / total - 2.3) <= 0.05);
    REQUIRE(std::abs(100.0 * double(cm.d) / total - 11.2) <= 0.05);
}

TEST_CASE("perfect and all-positive classifiers hit the ROC corners") {
    ConfusionMatrix perfect;
    perfect.a = 10;
    perfect.d = 4;
    const Rates rp = rates(perfect);
    REQUIRE(*rp.tpr == 1.0);
    REQUIRE(*rp.fpr == 0.0);
    REQUIRE(*rp.accuracy == 1.0);

    ConfusionMatrix allpos;
    allpos.b = 10;
    allpos.d = 4;
    const Rates ra = rates(allpos);
    REQUIRE(*ra.tpr == 1.0);
    REQUIRE(*ra.fpr == 1.0);
}

TEST_CASE("zero denominators report undefined rather than zero") {
    ConfusionMatrix no_pos;  // single-class fold, benign only
    no_pos.a = 5;
    no_pos.b = 2;
    const Rates r = rates(no_pos);
    REQUIRE_FALSE(r.tpr.has_value());
    REQUIRE_FALSE(r.fnr.has_value());
    REQUIRE(r.fpr.has_value());
    REQUIRE(r.accuracy.has_value());

    ConfusionMatrix never_pos;  // nothing predicted malignant
    never_pos.a = 5;
    never_pos.c = 2;
    REQUIRE_FALSE(rates(never_pos).precision.has_value());

    const Rates empty = rates(ConfusionMatrix{});
    REQUIRE_FALSE(empty.accuracy.has_value());
}

TEST_CASE("complementary rates sum to one whenever defined") {
    SeededRng rng(12);
    for (int trial = 0; trial < 50; ++trial) {
        const auto s = random_samples(rng, 40, trial % 2 == 0);
        const Rates r = rates(confusion_at(s, rng.uniform01()));
        if (r.tpr) REQUIRE(*r.tpr + *r.fnr == Catch::Approx(1.0).margin(1e-12));
        if (r.fpr) REQUIRE(*r.fpr + *r.tnr == Catch::Approx(1.0).margin(1e-12));
    }
}

// ===========================================================================
// ROC curve
// ===========================================================================

TEST_CASE("perfect separation gives the three corner points") {
    const RocCurve c = roc_curve(make({1.0, 0.0}, {1, 0}));
    REQUIRE(c.points.size() == 3);
    REQUIRE(c.points[0].fpr == 0.0);
    REQUIRE(c.points[0].tpr == 0.0);
    REQUIRE(c.points[1].fpr == 0.0);
    REQUIRE(c.points[1].tpr == 1.0);
    REQUIRE(c.points[2].fpr == 1.0);
    REQUIRE(c.points[2].tpr == 1.0);
}

TEST_CASE("all-equal scores collapse to the diagonal endpoints") {
    const RocCurve c = roc_curve(make({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0}));
    REQUIRE(c.points.size() == 2);
    REQUIRE(c.points[0].fpr == 0.0);
    REQUIRE(c.points[0].tpr == 0.0);
    REQUIRE(c.points[1].fpr == 1.0);
    REQUIRE(c.points[1].tpr == 1.0);
}

TEST_CASE("roc points are monotone and end at (1,1)") {
    SeededRng rng(77);
    for (int trial = 0; trial < 30; ++trial) {
        const RocCurve c = roc_curve(random_samples(rng, 60, trial % 2 == 0));
        for (size_t i = 1; i < c.points.size(); ++i) {
            REQUIRE(c.points[i].fpr >= c.points[i - 1].fpr);
            REQUIRE(c.points[i].tpr >= c.points[i - 1].tpr);
            REQUIRE(c.points[i].threshold < c.points[i - 1].threshold);
        }
        REQUIRE(c.points.back().fpr == 1.0);
        REQUIRE(c.points.back().tpr == 1.0);
    }
}

TEST_CASE("trapezoid area under the curve equals the rank AUC") {
    SeededRng rng(99);
    for (int trial = 0; trial < 100; ++trial) {
        const auto s = random_samples(rng, 5 + int64_t(rng.next_below(80)), trial % 2 == 0);
        REQUIRE(trapezoid_area(roc_curve(s)) == Catch::Approx(auc(s)).margin(1e-12));
    }
}

TEST_CASE("roc requires both classes") {
    REQUIRE_THROWS_AS(roc_curve(make({0.2, 0.4}, {0, 0})), DataError);
    REQUIRE_THROWS_AS(roc_curve(make({0.2, 0.4}, {1, 1})), DataError);
}

// ===========================================================================
// AUC
// ===========================================================================

TEST_CASE("auc worked examples") {
    REQUIRE(auc(make({0.9, 0.8}, {1, 0})) == 1.0);
    REQUIRE(auc(make({0.3, 0.3, 0.3}, {1, 0, 1})) == 0.5);
    REQUIRE(auc(make({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1})) == 0.75);
    REQUIRE(auc(make({0.9, 0.8}, {0, 1})) == 0.0);
}

TEST_CASE("auc equals the pairwise oracle bit for bit") {
    SeededRng rng(2025);
    for (int trial = 0; trial < 300; ++trial) {
        const int64_t n = 2 + int64_t(rng.next_below(199));
        const auto s = random_samples(rng, n, trial % 3 != 0);
        REQUIRE(auc(s) == auc_pairwise_oracle(s));
    }
}

TEST_CASE("auc depends only on score ranks") {
    SeededRng rng(31);
    const auto s = random_samples(rng, 70, false);
    const double base = auc(s);
    auto transformed = [&s](double (*f)(double)) {
        std::vector<ScoredSample> t = s;
        for (auto& x : t) x.score = f(x.score);
        return t;
    };
    REQUIRE(auc(transformed([](double v) { return std::sqrt(v); })) == base);
    REQUIRE(auc(transformed([](double v) { return v * v * v; })) == base);
    REQUIRE(auc(transformed([](double v) { return (v + 0.2) / 1.2; })) == base);
}

TEST_CASE("complement symmetry without ties") {
    SeededRng rng(47);
    for (int trial = 0; trial < 40; ++trial) {
        const auto s = random_samples(rng, 50, false);
        std::vector<ScoredSample> flipped = s;
        for (auto& x : flipped) x.score = 1.0 - x.score;
        REQUIRE(auc(flipped) == Catch::Approx(1.0 - auc(s)).margin(1e-12));
    }
}

TEST_CASE("a tied pair contributes exactly one half to the pair sum") {
    // two separable samples: pair sum 0, auc 1
    const auto base = make({0.8, 0.2}, {1, 0});
    REQUIRE(auc(base) == 1.0);
    // add one positive and one negative at an unused score 0.5: the only
    // inexact pair is the new tie, and the cross pairs are all correct or
    // counted explicitly below
    const auto grown = make({0.8, 0.2, 0.5, 0.5}, {1, 0, 1, 0});
    // pairs: (0.8 vs 0.2) ok, (0.8 vs 0.5) ok, (0.5 vs 0.2) ok, (0.5 vs 0.5) tie
    REQUIRE(auc(grown) == 1.0 - 0.5 / 4.0);

    // general accounting: sum_new - sum_old - cross losses == 1/2 exactly
    SeededRng rng(88);
    for (int trial = 0; trial < 20; ++trial) {
        auto s = random_samples(rng, 30, false);
        int64_t mpos = 0, mneg = 0;
        for (const auto& x : s) (x.label == 1 ? mpos : mneg)++;
        const double sum_old = (1.0 - auc(s)) * double(mpos) * double(mneg);
        const double t = 0.5 + 1e-7;  // vanishingly unlikely to collide
        double cross = 0.0;  // loss terms between the new points and old ones
        for (const auto& x : s) {
            if (x.label == 0 && x.score > t) cross += 1.0;       // new pos vs old neg
            if (x.label == 0 && x.score == t) cross += 0.5;
            if (x.label == 1 && x.score < t) cross += 1.0;       // old pos vs new neg
            if (x.label == 1 && x.score == t) cross += 0.5;
        }
        s.push_back({t, 1});
        s.push_back({t, 0});
        const double sum_new = (1.0 - auc(s)) * double(mpos + 1) * double(mneg + 1);
        REQUIRE(sum_new - sum_old - cross == Catch::Approx(0.5).margin(1e-9));
    }
}

TEST_CASE("auc validates input") {
    REQUIRE_THROWS_AS(auc(make({0.2, 0.4}, {1, 1})), DataError);
    REQUIRE_THROWS_AS(auc(make({0.2, 1.4}, {1, 0})), DataError);
    REQUIRE_THROWS_AS(auc(make({0.2, 0.4}, {1, 2})), DataError);
}

// ===========================================================================
// serialization
// ===========================================================================

TEST_CASE("roc csv has the documented header and one line per point") {
    const RocCurve c = roc_curve(make({1.0, 0.0, 0.5}, {1, 0, 1}));
    const std::string path = "/tmp/dermfuse_test_roc.csv";
    write_roc_csv(path, c);
    const std::string body = slurp(path);
    REQUIRE(body.rfind("threshold,fpr,tpr\n", 0) == 0);
    size_t lines = 0;
    for (char ch : body) lines += ch == '\n' ? 1 : 0;
    REQUIRE(lines == 1 + c.points.size());
    write_roc_csv(path, c);
    REQUIRE(slurp(path) == body);  // deterministic bytes
}

TEST_CASE("metrics tables serialize per fold with undefined cells left empty") {
    std::vector<MetricsRow> rows(2);
    rows[0].name = "0";
    rows[0].auc = 0.912345678901;
    rows[0].tpr = 0.75;
    rows[1].name = "oof";
    rows[1].auc = 0.95;
    const std::string csv_path = "/tmp/dermfuse_test_metrics.csv";
    const std::string kv_path = "/tmp/dermfuse_test_metrics.kv";
    write_metrics_csv(csv_path, rows);
    write_metrics_kv(kv_path, rows);

    const std::string csv = slurp(csv_path);
    REQUIRE(csv.rfind("fold,auc,tpr,fpr,tnr,fnr,accuracy,precision\n", 0) == 0);
    REQUIRE(csv.find("0,0.912345678901,0.75,,,,,\n") != std::string::npos);
    REQUIRE(csv.find("oof,0.95,,,,,,\n") != std::string::npos);

    const std::string kv = slurp(kv_path);
    REQUIRE(kv.find("oof.auc=0.95\n") != std::string::npos);
    REQUIRE(kv.find("oof.tpr=undefined\n") != std::string::npos);
    REQUIRE(kv.find("0.tpr=0.75\n") != std::string::npos);
}
