#pragma once

// Pixel classification, neighborhood crack-probability maps, ROC / AUC and
// corpus evaluation reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crackseg/error.hpp"
#include "crackseg/losses.hpp"
#include "crackseg/mask.hpp"
#include "crackseg/tensor.hpp"

namespace crackseg {

using ClassMap = LabelMask;

/// Per-pixel argmax over the channel axis; ties go to the lowest class index.
/// Works on probabilities or raw logits alike.
template <typename T>
ClassMap classify(const Tensor<T>& scores) {
    require_image(scores, "classify");
    if (scores.batch() != 1) throw RejectedInput("classify: expects a single image");
    const std::size_t K = scores.channels();
    ClassMap out(scores.width(), scores.height());
    for (std::size_t px = 0; px < out.size(); ++px) {
        const T* s = scores.data() + px * K;
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k)
            if (s[k] > s[best]) best = k;
        out.classes[px] = static_cast<std::uint8_t>(best);
    }
    return out;
}

/// Binary crack label image in the C1 convention: 0 where `cls` is Crack, 1 elsewhere.
inline std::vector<std::uint8_t> crack_indicator(const ClassMap& m) {
    std::vector<std::uint8_t> c(m.size());
    for (std::size_t i = 0; i < m.size(); ++i) c[i] = m.classes[i] == kCrack ? 0 : 1;
    return c;
}

struct CrackProbabilityMap {
    std::size_t width = 0;
    std::size_t height = 0;
    std::size_t radius = 0;
    std::vector<double> values;  // row-major, each in [0, 1]
    /// Set when every window sum is zero (all-crack input); values are then 1.
    bool degenerate = false;
};

/// P(i,j) = 1 - S(i,j) / max S, where S is the (2n+1)^2 window sum of the binary
/// label C (crack = 0, background = 1). Cells outside the image count as 1.
inline CrackProbabilityMap crack_probability_map(std::span<const std::uint8_t> c, std::size_t width, std::size_t height,
                                                 std::size_t n) {
    if (n < 1) throw RejectedInput("crack_probability_map: radius must be >= 1");
    if (c.size() != width * height) throw RejectedInput("crack_probability_map: size mismatch");
    for (auto v : c)
        if (v > 1) throw RejectedInput("crack_probability_map: input must be binary");

    // Summed-area table of the in-bounds zeros (cracks); the window sum is the
    // window area minus the cracks it covers.
    const std::size_t W1 = width + 1;
    std::vector<std::int64_t> sat((height + 1) * W1, 0);
    for (std::size_t y = 0; y < height; ++y)
        for (std::size_t x = 0; x < width; ++x)
            sat[(y + 1) * W1 + x + 1] = (c[y * width + x] == 0 ? 1 : 0) + sat[y * W1 + x + 1] + sat[(y + 1) * W1 + x] -
                                        sat[y * W1 + x];
    const auto area = static_cast<std::int64_t>((2 * n + 1) * (2 * n + 1));
    std::vector<std::int64_t> sums(width * height);
    std::int64_t max_sum = 0;
    for (std::size_t y = 0; y < height; ++y) {
        const std::size_t y0 = y >= n ? y - n : 0, y1 = std::min(height, y + n + 1);
        for (std::size_t x = 0; x < width; ++x) {
            const std::size_t x0 = x >= n ? x - n : 0, x1 = std::min(width, x + n + 1);
            const std::int64_t cracks = sat[y1 * W1 + x1] - sat[y0 * W1 + x1] - sat[y1 * W1 + x0] + sat[y0 * W1 + x0];
            const std::int64_t s = area - cracks;
            sums[y * width + x] = s;
            max_sum = std::max(max_sum, s);
        }
    }

    CrackProbabilityMap m{width, height, n, std::vector<double>(width * height), false};
    if (max_sum == 0) {
        m.degenerate = true;
        std::fill(m.values.begin(), m.values.end(), 1.0);
        return m;
    }
    const double denom = static_cast<double>(max_sum);
    for (std::size_t i = 0; i < sums.size(); ++i) m.values[i] = 1.0 - static_cast<double>(sums[i]) / denom;
    return m;
}

struct RocCurve {
    std::vector<double> thresholds;  // +inf first, then distinct scores descending
    std::vector<double> fpr;
    std::vector<double> tpr;
};

struct RocResult {
    RocCurve curve;
    double auc = 0.0;
};

/// ROC over every distinct score (positive iff score >= threshold) and its
/// trapezoidal area.
inline RocResult roc_and_auc(std::span<const double> scores, std::span<const std::uint8_t> truth) {
    if (scores.size() != truth.size()) throw EvaluationError("roc: scores and labels differ in length");
    std::size_t P = 0;
    for (auto t : truth) P += t ? 1 : 0;
    const std::size_t N = truth.size() - P;
    if (P == 0 || N == 0) throw EvaluationError("roc: AUC undefined for single-class truth");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });

    RocResult r;
    r.curve.thresholds.push_back(std::numeric_limits<double>::infinity());
    r.curve.fpr.push_back(0.0);
    r.curve.tpr.push_back(0.0);
    std::size_t tp = 0, fp = 0;
    double area = 0.0;
    for (std::size_t i = 0; i < order.size();) {
        const double s = scores[order[i]];
        const std::size_t tp0 = tp, fp0 = fp;
        for (; i < order.size() && scores[order[i]] == s; ++i) (truth[order[i]] ? tp : fp) += 1;
        area += static_cast<double>(fp - fp0) * static_cast<double>(tp + tp0) / 2.0;
        r.curve.thresholds.push_back(s);
        r.curve.fpr.push_back(static_cast<double>(fp) / static_cast<double>(N));
        r.curve.tpr.push_back(static_cast<double>(tp) / static_cast<double>(P));
    }
    r.auc = area / (static_cast<double>(P) * static_cast<double>(N));
    return r;
}

inline void write_roc_csv(std::ostream& os, const RocCurve& c) {
    os << "threshold,fpr,tpr\n";
    os.precision(17);
    for (std::size_t i = 0; i < c.fpr.size(); ++i) {
        if (std::isinf(c.thresholds[i]))
            os << "inf";
        else
            os << c.thresholds[i];
        os << ',' << c.fpr[i] << ',' << c.tpr[i] << '\n';
    }
}

struct Confusion {
    std::uint64_t tp = 0, fp = 0, tn = 0, fn = 0;
    std::uint64_t total() const { return tp + fp + tn + fn; }
    Confusion& operator+=(const Confusion& o) {
        tp += o.tp;
        fp += o.fp;
        tn += o.tn;
        fn += o.fn;
        return *this;
    }
};

struct ImageEval {
    std::string id;
    std::optional<double> auc;  // absent when the truth has a single class
    double accuracy = 0.0;
    std::vector<double> dice;   // per class
    Confusion confusion;        // Crack is the positive class
};

struct EvalReport {
    std::vector<ImageEval> per_image;
    Confusion confusion;
    double accuracy = 0.0;
    std::vector<double> dice;
    std::optional<double> auc;  // pooled over every pixel
    std::optional<double> mean_image_auc;
    std::optional<double> median_image_auc;
    RocCurve roc;               // pooled curve
    std::size_t num_classes = 3;
};

struct Prediction {
    std::string id;
    ClassMap classes;
    /// Optional per-pixel crack score (e.g. crack softmax). When empty the score
    /// is the binary indicator classes == Crack.
    std::vector<double> crack_scores;
};

struct Truth {
    std::string id;
    LabelMask mask;
};

namespace detail {

inline std::vector<double> crack_scores_of(const Prediction& p) {
    if (!p.crack_scores.empty()) {
        if (p.crack_scores.size() != p.classes.size())
            throw EvaluationError(p.id + ": crack score map size does not match the class map");
        return p.crack_scores;
    }
    std::vector<double> s(p.classes.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = p.classes.classes[i] == kCrack ? 1.0 : 0.0;
    return s;
}

inline std::vector<double> dice_per_class(const std::vector<std::uint64_t>& inter, const std::vector<std::uint64_t>& t,
                                          const std::vector<std::uint64_t>& p) {
    std::vector<double> d(inter.size());
    for (std::size_t k = 0; k < d.size(); ++k)
        d[k] = (2.0 * static_cast<double>(inter[k]) + kDiceEpsilon) /
               (static_cast<double>(t[k]) + static_cast<double>(p[k]) + kDiceEpsilon);
    return d;
}

inline double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace detail

/// Scores aligned prediction/truth pairs. Per-image and pooled figures: confusion
/// counts for Crack, pixel accuracy over all classes, Dice per class and AUC of
/// the crack score.
inline EvalReport evaluate_corpus(const std::vector<Prediction>& predictions, const std::vector<Truth>& truths,
                                  std::size_t num_classes = 3) {
    if (predictions.size() != truths.size())
        throw EvaluationError("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                              std::to_string(truths.size()) + " truth masks");
    if (truths.empty()) throw EvaluationError("evaluate: empty corpus");

    EvalReport rep;
    rep.num_classes = num_classes;
    std::vector<std::uint64_t> inter_all(num_classes, 0), t_all(num_classes, 0), p_all(num_classes, 0);
    std::uint64_t correct_all = 0, pixels_all = 0;
    std::vector<double> pooled_scores;
    std::vector<std::uint8_t> pooled_truth;
    std::vector<double> aucs;

    for (std::size_t i = 0; i < truths.size(); ++i) {
        const auto& pr = predictions[i];
        const auto& tr = truths[i];
        if (pr.id != tr.id) throw EvaluationError("evaluate: prediction '" + pr.id + "' paired with truth '" + tr.id + "'");
        if (pr.classes.width != tr.mask.width || pr.classes.height != tr.mask.height)
            throw EvaluationError(tr.id + ": prediction and truth sizes differ");

        ImageEval ie;
        ie.id = tr.id;
        std::vector<std::uint64_t> inter(num_classes, 0), tc(num_classes, 0), pc(num_classes, 0);
        std::uint64_t correct = 0;
        std::vector<std::uint8_t> is_crack(tr.mask.size());
        for (std::size_t px = 0; px < tr.mask.size(); ++px) {
            const auto t = tr.mask.classes[px], p = pr.classes.classes[px];
            if (t >= num_classes || p >= num_classes) throw EvaluationError(tr.id + ": class index out of range");
            ++tc[t];
            ++pc[p];
            if (t == p) {
                ++inter[t];
                ++correct;
            }
            const bool tpos = t == kCrack, ppos = p == kCrack;
            is_crack[px] = tpos ? 1 : 0;
            if (tpos && ppos) ++ie.confusion.tp;
            else if (!tpos && ppos) ++ie.confusion.fp;
            else if (tpos) ++ie.confusion.fn;
            else ++ie.confusion.tn;
        }
        ie.accuracy = static_cast<double>(correct) / static_cast<double>(tr.mask.size());
        ie.dice = detail::dice_per_class(inter, tc, pc);

        const auto scores = detail::crack_scores_of(pr);
        if (ie.confusion.tp + ie.confusion.fn > 0 && ie.confusion.fp + ie.confusion.tn > 0) {
            ie.auc = roc_and_auc(scores, is_crack).auc;
            aucs.push_back(*ie.auc);
        }
        pooled_scores.insert(pooled_scores.end(), scores.begin(), scores.end());
        pooled_truth.insert(pooled_truth.end(), is_crack.begin(), is_crack.end());

        for (std::size_t k = 0; k < num_classes; ++k) {
            inter_all[k] += inter[k];
            t_all[k] += tc[k];
            p_all[k] += pc[k];
        }
        correct_all += correct;
        pixels_all += tr.mask.size();
        rep.confusion += ie.confusion;
        rep.per_image.push_back(std::move(ie));
    }

    rep.accuracy = static_cast<double>(correct_all) / static_cast<double>(pixels_all);
    rep.dice = detail::dice_per_class(inter_all, t_all, p_all);
    if (rep.confusion.tp + rep.confusion.fn > 0 && rep.confusion.fp + rep.confusion.tn > 0) {
        auto roc = roc_and_auc(pooled_scores, pooled_truth);
        rep.auc = roc.auc;
        rep.roc = std::move(roc.curve);
    }
    if (!aucs.empty()) {
        rep.mean_image_auc = std::accumulate(aucs.begin(), aucs.end(), 0.0) / static_cast<double>(aucs.size());
        rep.median_image_auc = detail::median_of(aucs);
    }
    return rep;
}

namespace detail {

inline nlohmann::json dice_json(const std::vector<double>& d) {
    nlohmann::json j = nlohmann::json::object();
    for (std::size_t k = 0; k < d.size(); ++k) j[class_name(k)] = d[k];
    return j;
}

inline nlohmann::json confusion_json(const Confusion& c) {
    return {{"tp", c.tp}, {"fp", c.fp}, {"tn", c.tn}, {"fn", c.fn}};
}

inline nlohmann::json opt_json(const std::optional<double>& v) { return v ? nlohmann::json(*v) : nlohmann::json(nullptr); }

}  // namespace detail

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json per = nlohmann::json::array();
    for (const auto& ie : r.per_image)
        per.push_back({{"id", ie.id},
                       {"auc", detail::opt_json(ie.auc)},
                       {"accuracy", ie.accuracy},
                       {"dice", detail::dice_json(ie.dice)},
                       {"confusion", detail::confusion_json(ie.confusion)}});
    return {{"per_image", per},
            {"aggregate",
             {{"images", r.per_image.size()},
              {"auc", detail::opt_json(r.auc)},
              {"mean_image_auc", detail::opt_json(r.mean_image_auc)},
              {"median_image_auc", detail::opt_json(r.median_image_auc)},
              {"accuracy", r.accuracy},
              {"dice", detail::dice_json(r.dice)},
              {"confusion", detail::confusion_json(r.confusion)}}}};
}

}  // namespace crackseg
