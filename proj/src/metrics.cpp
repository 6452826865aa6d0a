#include "m3net/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace m3net {

void PredictionSet::validate() const {
    if (scores.size() != labels.size()) throw DataError("prediction set: length mismatch");
    if (scores.empty()) throw DataError("prediction set: empty");
    for (double s : scores)
        if (!(s >= 0.0 && s <= 1.0)) throw DataError("prediction score outside [0,1]");
    for (int l : labels)
        if (l != 0 && l != 1) throw DataError("prediction label outside {0,1}");
}

Confusion confusion(const PredictionSet& preds) {
    preds.validate();
    Confusion c;
    c.n = preds.scores.size();
    std::array<std::size_t, 2> n_c{};
    for (std::size_t i = 0; i < preds.scores.size(); ++i) {
        const int pred = preds.scores[i] >= preds.threshold ? 1 : 0;
        const int truth = preds.labels[i];
        ++n_c[truth];
        for (int cls = 0; cls < 2; ++cls) {
            const bool p = pred == cls, t = truth == cls;
            if (p && t) ++c.per_class[cls].tp;
            else if (p && !t) ++c.per_class[cls].fp;
            else if (!p && t) ++c.per_class[cls].fn;
            else ++c.per_class[cls].tn;
        }
    }
    for (int cls = 0; cls < 2; ++cls)
        c.w[cls] = static_cast<double>(n_c[cls]) / static_cast<double>(c.n);
    return c;
}

namespace {

// zero-denominator ratios contribute 0 and set a flag
double ratio(std::size_t num, std::size_t den, bool& flag, std::vector<std::string>& flags,
             const std::string& what) {
    if (den == 0) {
        flag = true;
        flags.push_back("zero denominator in " + what);
        return 0.0;
    }
    return static_cast<double>(num) / static_cast<double>(den);
}

}  // namespace

WeightedPrf weighted_metrics(const Confusion& c) {
    WeightedPrf r;
    for (int cls = 0; cls < 2; ++cls) {
        const auto& k = c.per_class[cls];
        const std::string tag = "class " + std::to_string(cls);
        const double pre = ratio(k.tp, k.tp + k.fp, r.zero_division, r.flags, "precision, " + tag);
        const double rec = ratio(k.tp, k.tp + k.fn, r.zero_division, r.flags, "recall, " + tag);
        const double spec = ratio(k.tn, k.tn + k.fp, r.zero_division, r.flags, "specificity, " + tag);
        double f1c = 0.0;
        if (pre + rec > 0.0) {
            f1c = 2.0 * pre * rec / (pre + rec);
        } else {
            r.zero_division = true;
            r.flags.push_back("zero denominator in f1, " + tag);
        }
        r.precision += c.w[cls] * pre;
        r.recall += c.w[cls] * rec;
        r.specificity += c.w[cls] * spec;
        r.f1 += c.w[cls] * f1c;
    }
    return r;
}

double accuracy(const Confusion& c) {
    std::size_t num = 0, den = 0;
    for (const auto& k : c.per_class) {
        num += k.tp + k.tn;
        den += k.total();
    }
    return den ? static_cast<double>(num) / static_cast<double>(den) : 0.0;
}

double balanced_accuracy(const Confusion& c) {
    // macro-average recall over classes
    double sum = 0.0;
    for (const auto& k : c.per_class) {
        const std::size_t den = k.tp + k.fn;
        sum += den ? static_cast<double>(k.tp) / static_cast<double>(den) : 0.0;
    }
    return sum / 2.0;
}

namespace {

// ROC area for one class: positives are label==cls, score_c is the score for
// that class. Descending sweep, ties grouped, trapezoidal integration.
double roc_auc_one(const std::vector<double>& score_c, const std::vector<int>& labels, int cls) {
    std::size_t pos = 0, neg = 0;
    for (int l : labels) (l == cls ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw DataError("roc_auc: single-class label set");
    std::vector<std::size_t> idx(score_c.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return score_c[a] > score_c[b]; });
    double auc = 0.0;
    std::size_t tp = 0, fp = 0;
    double prev_tpr = 0.0, prev_fpr = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && score_c[idx[j]] == score_c[idx[i]]) {
            if (labels[idx[j]] == cls) ++tp;
            else ++fp;
            ++j;
        }
        const double tpr = static_cast<double>(tp) / static_cast<double>(pos);
        const double fpr = static_cast<double>(fp) / static_cast<double>(neg);
        auc += (fpr - prev_fpr) * (tpr + prev_tpr) * 0.5;
        prev_tpr = tpr;
        prev_fpr = fpr;
        i = j;
    }
    return auc;
}

// Average-precision style PR area (right-continuous steps), ties grouped.
double pr_auc_one(const std::vector<double>& score_c, const std::vector<int>& labels, int cls) {
    std::size_t pos = 0;
    for (int l : labels) pos += (l == cls) ? 1 : 0;
    if (pos == 0 || pos == labels.size()) throw DataError("pr_auc: single-class label set");
    std::vector<std::size_t> idx(score_c.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(),
                     [&](std::size_t a, std::size_t b) { return score_c[a] > score_c[b]; });
    double ap = 0.0;
    std::size_t tp = 0, fp = 0;
    double prev_rec = 0.0;
    std::size_t i = 0;
    while (i < idx.size()) {
        std::size_t j = i;
        while (j < idx.size() && score_c[idx[j]] == score_c[idx[i]]) {
            if (labels[idx[j]] == cls) ++tp;
            else ++fp;
            ++j;
        }
        const double rec = static_cast<double>(tp) / static_cast<double>(pos);
        const double pre = static_cast<double>(tp) / static_cast<double>(tp + fp);
        ap += (rec - prev_rec) * pre;
        prev_rec = rec;
        i = j;
    }
    return ap;
}

std::array<double, 2> class_weights(const std::vector<int>& labels) {
    std::array<double, 2> w{};
    for (int l : labels) w[l] += 1.0;
    for (auto& v : w) v /= static_cast<double>(labels.size());
    return w;
}

}  // namespace

double roc_auc(const PredictionSet& preds) {
    preds.validate();
    const auto w = class_weights(preds.labels);
    std::vector<double> s1 = preds.scores, s0(preds.scores.size());
    for (std::size_t i = 0; i < s0.size(); ++i) s0[i] = 1.0 - preds.scores[i];
    return w[0] * roc_auc_one(s0, preds.labels, 0) + w[1] * roc_auc_one(s1, preds.labels, 1);
}

double pr_auc(const PredictionSet& preds) {
    preds.validate();
    const auto w = class_weights(preds.labels);
    std::vector<double> s1 = preds.scores, s0(preds.scores.size());
    for (std::size_t i = 0; i < s0.size(); ++i) s0[i] = 1.0 - preds.scores[i];
    return w[0] * pr_auc_one(s0, preds.labels, 0) + w[1] * pr_auc_one(s1, preds.labels, 1);
}

MetricsReport compute_metrics(const PredictionSet& preds) {
    MetricsReport r;
    r.confusion = confusion(preds);
    r.acc = accuracy(r.confusion);
    // per-sample standard deviation of the 0/1 correctness indicator
    r.acc_std = std::sqrt(std::max(0.0, r.acc * (1.0 - r.acc)));
    r.bacc = balanced_accuracy(r.confusion);
    const WeightedPrf prf = weighted_metrics(r.confusion);
    r.precision = prf.precision;
    r.recall = prf.recall;
    r.specificity = prf.specificity;
    r.f1 = prf.f1;
    r.zero_division = prf.zero_division;
    r.flags = prf.flags;
    r.roc_auc = roc_auc(preds);
    r.pr_auc = pr_auc(preds);
    return r;
}

std::string MetricsReport::to_json() const {
    std::ostringstream os;
    os.precision(12);
    os << "{";
    os << "\"n\":" << confusion.n << ",";
    for (int cls = 0; cls < 2; ++cls) {
        const auto& k = confusion.per_class[cls];
        os << "\"class" << cls << "\":{\"tp\":" << k.tp << ",\"fp\":" << k.fp
           << ",\"tn\":" << k.tn << ",\"fn\":" << k.fn << ",\"w\":" << confusion.w[cls] << "},";
    }
    os << "\"acc\":" << acc << ",\"acc_std\":" << acc_std << ",\"bacc\":" << bacc
       << ",\"precision\":" << precision << ",\"recall\":" << recall
       << ",\"specificity\":" << specificity << ",\"f1\":" << f1 << ",\"roc_auc\":" << roc_auc
       << ",\"pr_auc\":" << pr_auc << ",\"zero_division\":" << (zero_division ? "true" : "false")
       << ",\"flags\":[";
    for (std::size_t i = 0; i < flags.size(); ++i)
        os << (i ? "," : "") << "\"" << flags[i] << "\"";
    os << "]}";
    return os.str();
}

std::string MetricsReport::csv_header() {
    return "acc,acc_std,bacc,precision,recall,specificity,f1,roc_auc,pr_auc";
}

std::string MetricsReport::csv_row() const {
    std::ostringstream os;
    os.precision(12);
    os << acc << ',' << acc_std << ',' << bacc << ',' << precision << ',' << recall << ','
       << specificity << ',' << f1 << ',' << roc_auc << ',' << pr_auc;
    return os.str();
}

}  // namespace m3net
