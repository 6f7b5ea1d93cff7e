#pragma once

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include "dermfuse/common.hpp"

namespace dermfuse {

struct ScoredSample {
    double score = 0.0;  // in [0,1]
    int label = 0;       // 0 benign, 1 malignant
};

// Fig.-style confusion cells with malignant as the positive class:
//   a benign->benign, b benign->malignant, c malignant->benign, d malignant->malignant
struct ConfusionMatrix {
    int64_t a = 0, b = 0, c = 0, d = 0;
    int64_t total() const { return a + b + c + d; }
};

struct Rates {
    std::optional<double> tpr, fpr, tnr, fnr, accuracy, precision;
};

struct RocPoint {
    double threshold = 0.0;
    double fpr = 0.0, tpr = 0.0;
};

struct RocCurve {
    std::vector<RocPoint> points;
};

namespace detail {

inline void check_two_classes(const std::vector<ScoredSample>& samples, const char* who) {
    int64_t pos = 0, neg = 0;
    for (const ScoredSample& s : samples) {
        if (s.label != 0 && s.label != 1)
            throw DataError(std::string(who) + ": label must be 0 or 1");
        if (!(s.score >= 0.0 && s.score <= 1.0))
            throw DataError(std::string(who) + ": score outside [0,1]");
        (s.label == 1 ? pos : neg)++;
    }
    if (pos == 0 || neg == 0)
        throw DataError(std::string(who) + ": both classes must be present (" +
                        std::to_string(neg) + " benign, " + std::to_string(pos) + " malignant)");
}

}  // namespace detail

inline ConfusionMatrix confusion_at(const std::vector<ScoredSample>& samples, double threshold) {
    ConfusionMatrix cm;
    for (const ScoredSample& s : samples) {
        const bool predicted_malignant = s.score >= threshold;
        if (s.label == 1)
            (predicted_malignant ? cm.d : cm.c)++;
        else
            (predicted_malignant ? cm.b : cm.a)++;
    }
    return cm;
}

inline Rates rates(const ConfusionMatrix& cm) {
    Rates r;
    if (cm.c + cm.d > 0) {
        r.tpr = double(cm.d) / double(cm.c + cm.d);
        r.fnr = double(cm.c) / double(cm.c + cm.d);
    }
    if (cm.a + cm.b > 0) {
        r.fpr = double(cm.b) / double(cm.a + cm.b);
        r.tnr = double(cm.a) / double(cm.a + cm.b);
    }
    if (cm.total() > 0) r.accuracy = double(cm.a + cm.d) / double(cm.total());
    if (cm.b + cm.d > 0) r.precision = double(cm.d) / double(cm.b + cm.d);
    return r;
}

// One point per distinct score, swept descending, preceded by the (0,0)
// endpoint. The final point (threshold = min score) is (1,1).
inline RocCurve roc_curve(const std::vector<ScoredSample>& samples) {
    detail::check_two_classes(samples, "roc_curve");
    std::vector<ScoredSample> sorted = samples;
    std::sort(sorted.begin(), sorted.end(),
              [](const ScoredSample& x, const ScoredSample& y) { return x.score > y.score; });
    int64_t m_pos = 0, m_neg = 0;
    for (const ScoredSample& s : sorted) (s.label == 1 ? m_pos : m_neg)++;

    RocCurve curve;
    curve.points.push_back({std::numeric_limits<double>::infinity(), 0.0, 0.0});
    int64_t tp = 0, fp = 0;
    size_t i = 0;
    while (i < sorted.size()) {
        const double t = sorted[i].score;
        while (i < sorted.size() && sorted[i].score == t) {
            (sorted[i].label == 1 ? tp : fp)++;
            ++i;
        }
        curve.points.push_back({t, double(fp) / double(m_neg), double(tp) / double(m_pos)});
    }
    return curve;
}

namespace detail {

// shared final expression so the fast path and the pairwise oracle agree
// bit for bit: both accumulate the doubled loss count as an integer
inline double auc_from_losses(int64_t doubled_losses, int64_t m_pos, int64_t m_neg) {
    return 1.0 - double(doubled_losses) / double(2 * m_pos * m_neg);
}

}  // namespace detail

// rank-statistic AUC: 1 - (1/(m+ m-)) sum over pairs of
// [ W(f+ < f-) + 1/2 W(f+ = f-) ], via one sort with midrank ties
inline double auc(const std::vector<ScoredSample>& samples) {
    detail::check_two_classes(samples, "auc");
    std::vector<ScoredSample> sorted = samples;
    std::sort(sorted.begin(), sorted.end(),
              [](const ScoredSample& x, const ScoredSample& y) { return x.score < y.score; });
    int64_t m_pos = 0, m_neg = 0;
    for (const ScoredSample& s : sorted) (s.label == 1 ? m_pos : m_neg)++;

    int64_t doubled_losses = 0;  // 2*inversions + ties
    int64_t neg_below = 0;
    size_t i = 0;
    while (i < sorted.size()) {
        const double t = sorted[i].score;
        int64_t pos_here = 0, neg_here = 0;
        while (i < sorted.size() && sorted[i].score == t) {
            (sorted[i].label == 1 ? pos_here : neg_here)++;
            ++i;
        }
        const int64_t neg_above = m_neg - neg_below - neg_here;
        doubled_losses += pos_here * (2 * neg_above + neg_here);
        neg_below += neg_here;
    }
    return detail::auc_from_losses(doubled_losses, m_pos, m_neg);
}

// literal double loop over positive x negative pairs; test oracle
inline double auc_pairwise_oracle(const std::vector<ScoredSample>& samples) {
    detail::check_two_classes(samples, "auc_pairwise_oracle");
    int64_t m_pos = 0, m_neg = 0, doubled_losses = 0;
    for (const ScoredSample& p : samples) {
        if (p.label != 1) continue;
        ++m_pos;
        for (const ScoredSample& n : samples) {
            if (n.label != 0) continue;
            if (p.score < n.score)
                doubled_losses += 2;
            else if (p.score == n.score)
                doubled_losses += 1;
        }
    }
    for (const ScoredSample& n : samples) m_neg += n.label == 0 ? 1 : 0;
    return detail::auc_from_losses(doubled_losses, m_pos, m_neg);
}

inline double trapezoid_area(const RocCurve& curve) {
    double area = 0.0;
    for (size_t i = 1; i < curve.points.size(); ++i) {
        const RocPoint& p = curve.points[i - 1];
        const RocPoint& q = curve.points[i];
        area += (q.fpr - p.fpr) * (p.tpr + q.tpr) / 2.0;
    }
    return area;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.12g", v);
    return buf;
}

struct MetricsRow {
    std::string name;  // fold id or "oof"
    std::optional<double> auc, tpr, fpr, tnr, fnr, accuracy, precision;
};

inline void write_roc_csv(const std::string& path, const RocCurve& curve) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "threshold,fpr,tpr\n";
    for (const RocPoint& p : curve.points)
        out << fmt_double(p.threshold) << ',' << fmt_double(p.fpr) << ',' << fmt_double(p.tpr)
            << "\n";
    if (!out) throw IoError("short write to " + path);
}

inline void write_metrics_csv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out << "fold,auc,tpr,fpr,tnr,fnr,accuracy,precision\n";
    auto cell = [&out](const std::optional<double>& v) {
        out << ',';
        if (v) out << fmt_double(*v);
    };
    for (const MetricsRow& r : rows) {
        out << r.name;
        cell(r.auc);
        cell(r.tpr);
        cell(r.fpr);
        cell(r.tnr);
        cell(r.fnr);
        cell(r.accuracy);
        cell(r.precision);
        out << "\n";
    }
    if (!out) throw IoError("short write to " + path);
}

inline void write_metrics_kv(const std::string& path, const std::vector<MetricsRow>& rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    auto kv = [&out](const std::string& key, const std::optional<double>& v) {
        out << key << '=' << (v ? fmt_double(*v) : "undefined") << "\n";
    };
    for (const MetricsRow& r : rows) {
        kv(r.name + ".auc", r.auc);
        kv(r.name + ".tpr", r.tpr);
        kv(r.name + ".fpr", r.fpr);
        kv(r.name + ".tnr", r.tnr);
        kv(r.name + ".fnr", r.fnr);
        kv(r.name + ".accuracy", r.accuracy);
        kv(r.name + ".precision", r.precision);
    }
    if (!out) throw IoError("short write to " + path);
}

}  // namespace dermfuse
