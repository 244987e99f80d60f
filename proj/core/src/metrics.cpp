#include "ecgmamba/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ecgmamba/error.hpp"
#include "ecgmamba/ops.hpp"
#include "ecgmamba/text.hpp"

namespace ecgmamba {

namespace {

struct Grid {
  std::size_t rows;
  std::size_t cols;
};

Grid check_pair(const char* op, const Tensor& a, const Tensor& labels) {
  if (a.rank() != 2 || a.shape() != labels.shape()) {
    throw DimensionError(std::string(op) + ": expected matching [B, C] tensors, got " + to_string(a.shape()) +
                         " and " + to_string(labels.shape()));
  }
  for (double v : labels.values()) {
    if (v != 0.0 && v != 1.0) throw DomainError(std::string(op) + ": labels must be 0 or 1");
  }
  return {a.dim(0), a.dim(1)};
}

void check_binary(const char* op, const Tensor& pred) {
  for (double v : pred.values()) {
    if (v != 0.0 && v != 1.0) throw DomainError(std::string(op) + ": predictions must be 0 or 1");
  }
}

std::vector<double> column(const Tensor& t, std::size_t c) {
  std::vector<double> out(t.dim(0));
  for (std::size_t r = 0; r < out.size(); ++r) out[r] = t[r * t.dim(1) + c];
  return out;
}

struct Confusion {
  std::size_t tp = 0, fp = 0, fn = 0;
  double f1() const {
    const std::size_t denom = 2 * tp + fp + fn;
    return denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom);
  }
};

Confusion confusion(const Tensor& pred, const Tensor& labels, std::size_t c) {
  Confusion k;
  const std::size_t cols = pred.dim(1);
  for (std::size_t r = 0; r < pred.dim(0); ++r) {
    const bool p = pred[r * cols + c] == 1.0;
    const bool y = labels[r * cols + c] == 1.0;
    k.tp += p && y;
    k.fp += p && !y;
    k.fn += !p && y;
  }
  return k;
}

}  // namespace

std::optional<double> auc_binary(std::span<const double> scores, std::span<const double> labels) {
  if (scores.size() != labels.size()) throw DimensionError("auc: scores and labels differ in length");
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double positive_rank_sum = 0.0;
  std::size_t positives = 0;
  for (std::size_t i = 0; i < n;) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // mean of ranks i+1 .. j
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] == 1.0) {
        positive_rank_sum += avg_rank;
        ++positives;
      }
    }
    i = j;
  }
  const std::size_t negatives = n - positives;
  if (positives == 0 || negatives == 0) return std::nullopt;
  const double np = static_cast<double>(positives);
  const double u = positive_rank_sum - np * (np + 1.0) / 2.0;
  return u / (np * static_cast<double>(negatives));
}

double auc_macro(const Tensor& scores, const Tensor& labels, std::vector<std::size_t>* excluded) {
  const Grid g = check_pair("auc_macro", scores, labels);
  double total = 0.0;
  std::size_t included = 0;
  for (std::size_t c = 0; c < g.cols; ++c) {
    const auto s = column(scores, c);
    const auto y = column(labels, c);
    if (const auto auc = auc_binary(s, y)) {
      total += *auc;
      ++included;
    } else if (excluded != nullptr) {
      excluded->push_back(c);
    }
  }
  if (included == 0) throw MetricUndefinedError("auc_macro: no class has both positive and negative samples");
  return total / static_cast<double>(included);
}

double f1_macro(const Tensor& pred, const Tensor& labels) {
  const Grid g = check_pair("f1_macro", pred, labels);
  check_binary("f1_macro", pred);
  double total = 0.0;
  for (std::size_t c = 0; c < g.cols; ++c) total += confusion(pred, labels, c).f1();
  return total / static_cast<double>(g.cols);
}

double accuracy(const Tensor& pred, const Tensor& labels, AccuracyMode mode) {
  const Grid g = check_pair("accuracy", pred, labels);
  check_binary("accuracy", pred);
  std::size_t correct = 0;
  if (mode == AccuracyMode::per_label) {
    for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == labels[i];
    return static_cast<double>(correct) / static_cast<double>(pred.size());
  }
  for (std::size_t r = 0; r < g.rows; ++r) {
    bool all = true;
    for (std::size_t c = 0; c < g.cols && all; ++c) all = pred[r * g.cols + c] == labels[r * g.cols + c];
    correct += all;
  }
  return static_cast<double>(correct) / static_cast<double>(g.rows);
}

Tensor binarize(const Tensor& logits, double threshold) {
  Tensor out(logits.shape());
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = activation(Activation::sigmoid, logits[i]) >= threshold ? 1.0 : 0.0;
  }
  return out;
}

MetricsReport make_report(const Tensor& logits, const Tensor& labels, const std::vector<std::string>& class_names) {
  const Grid g = check_pair("make_report", logits, labels);
  if (!class_names.empty() && class_names.size() != g.cols) {
    throw DimensionError("make_report: " + std::to_string(class_names.size()) + " class names for " +
                         std::to_string(g.cols) + " classes");
  }
  const Tensor pred = binarize(logits);
  MetricsReport r;
  r.f1_macro = f1_macro(pred, labels);
  r.acc_subset = accuracy(pred, labels, AccuracyMode::subset);
  r.acc_per_label = accuracy(pred, labels, AccuracyMode::per_label);
  double auc_total = 0.0;
  std::size_t auc_count = 0;
  for (std::size_t c = 0; c < g.cols; ++c) {
    ClassMetrics m;
    m.name = class_names.empty() ? "class_" + std::to_string(c) : class_names[c];
    m.auc = auc_binary(column(logits, c), column(labels, c));
    m.f1 = confusion(pred, labels, c).f1();
    for (std::size_t row = 0; row < g.rows; ++row) m.support += labels[row * g.cols + c] == 1.0;
    if (m.auc) {
      auc_total += *m.auc;
      ++auc_count;
    } else {
      r.auc_excluded.push_back(m.name);
    }
    r.per_class.push_back(std::move(m));
  }
  if (auc_count > 0) r.auc_macro = auc_total / static_cast<double>(auc_count);
  return r;
}

nlohmann::json to_json(const MetricsReport& r) {
  using nlohmann::json;
  json per_class = json::array();
  for (const ClassMetrics& m : r.per_class) {
    per_class.push_back(json{{"class", m.name},
                             {"auc", m.auc ? json(*m.auc) : json(nullptr)},
                             {"f1", m.f1},
                             {"support", m.support}});
  }
  return json{{"auc_macro", r.auc_macro ? json(*r.auc_macro) : json(nullptr)},
              {"f1_macro", r.f1_macro},
              {"acc_subset", r.acc_subset},
              {"acc_per_label", r.acc_per_label},
              {"per_class", per_class},
              {"auc_excluded", r.auc_excluded},
              {"param_count", r.param_count},
              {"flop_count", r.flop_count}};
}

std::string metrics_csv_header() { return "auc_macro,f1_macro,acc_subset,acc_per_label,param_count,flop_count"; }

std::string metrics_csv_row(const MetricsReport& r) {
  return (r.auc_macro ? text::format_number(*r.auc_macro) : std::string()) + "," + text::format_number(r.f1_macro) +
         "," + text::format_number(r.acc_subset) + "," + text::format_number(r.acc_per_label) + "," +
         std::to_string(r.param_count) + "," + std::to_string(r.flop_count);
}

}  // namespace ecgmamba
