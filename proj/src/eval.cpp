#include "emdet/eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>

#include "emdet/error.hpp"

namespace emdet {

ScoreTables scorer_tables(const Dataset& dataset, const ScorerParams& params) {
  ScoreTables out;
  out.reserve(dataset.size());
  for (const auto& im : dataset.images) {
    if (im.features.cols() != params.feature_dim()) {
      std::ostringstream os;
      os << "checkpoint expects " << params.feature_dim() << "-d features (C=" << params.categories()
         << "), image " << im.id << " has " << im.features.rows() << "x" << im.features.cols() << " features";
      throw InputError(os.str());
    }
    out.push_back(log_softmax_rows(params, im.features).array().exp().matrix());
  }
  return out;
}

ScoreTables init_score_tables(const Dataset& dataset, const InitScores& scores) {
  ScoreTables out;
  out.reserve(dataset.size());
  for (const auto& im : dataset.images) {
    const auto& m = scores.at(im.id);
    if (m.rows() != im.proposal_count()) throw InputError("init scores for " + im.id + " have the wrong row count");
    Eigen::MatrixXd t = Eigen::MatrixXd::Zero(m.rows(), m.cols() + 1);
    t.rightCols(m.cols()) = m;
    out.push_back(std::move(t));
  }
  return out;
}

std::vector<Detection> detect(const Dataset& dataset, const ScoreTables& tables, double score_threshold,
                              double nms_threshold) {
  if (tables.size() != dataset.size()) throw InputError("detect: one score table per image is required");
  std::vector<Detection> out;
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const auto& im = dataset.images[n];
    const auto& t = tables[n];
    for (int c = 1; c < t.cols(); ++c) {
      std::vector<ScoredBox> cands;
      for (int i = 0; i < im.proposal_count(); ++i) {
        const double s = t(i, c);
        if (s >= score_threshold && s > 0.0) cands.push_back({im.proposals[i], c, s, i});
      }
      if (cands.empty()) continue;
      for (const auto& k : nms(std::move(cands), nms_threshold)) out.push_back({im.id, c, k.box, k.score, k.index});
    }
  }
  return out;
}

std::vector<Detection> detect(const Dataset& dataset, const ScorerParams& params, double score_threshold,
                              double nms_threshold) {
  return detect(dataset, scorer_tables(dataset, params), score_threshold, nms_threshold);
}

std::optional<ApResult> average_precision(std::vector<Detection> dets, const GroundTruthIndex& gt) {
  ApResult r;
  std::map<std::string, int> offset;
  for (const auto& [id, boxes] : gt) {
    offset[id] = r.ground_truth;
    r.ground_truth += static_cast<int>(boxes.size());
  }
  if (r.ground_truth == 0) return std::nullopt;

  std::stable_sort(dets.begin(), dets.end(), [](const Detection& a, const Detection& b) {
    if (a.score != b.score) return a.score > b.score;
    if (a.image_id != b.image_id) return a.image_id < b.image_id;
    return a.proposal < b.proposal;
  });

  std::vector<bool> used(r.ground_truth, false);
  std::vector<int> tp_cum;
  tp_cum.reserve(dets.size());
  for (const auto& d : dets) {
    int match = -1;
    if (const auto it = gt.find(d.image_id); it != gt.end()) {
      double best = -1.0;
      for (std::size_t g = 0; g < it->second.size(); ++g) {
        const int flat = offset[d.image_id] + static_cast<int>(g);
        if (used[flat]) continue;
        const double o = iou(d.box, it->second[g]);
        if (o >= kMatchOverlap && o > best) {
          best = o;
          match = flat;
        }
      }
    }
    if (match >= 0) {
      used[match] = true;
      ++r.true_positives;
    } else {
      ++r.false_positives;
    }
    r.matches.push_back(match);
    tp_cum.push_back(r.true_positives);
  }

  // 11-point interpolation; recall >= t/10 tested as tp*10 >= t*npos to stay exact.
  double sum = 0.0;
  for (int t = 0; t <= 10; ++t) {
    double best = 0.0;
    for (std::size_t k = 0; k < tp_cum.size(); ++k) {
      if (static_cast<long>(tp_cum[k]) * 10 >= static_cast<long>(t) * r.ground_truth) {
        best = std::max(best, static_cast<double>(tp_cum[k]) / static_cast<double>(k + 1));
      }
    }
    sum += best;
  }
  r.ap = sum / 11.0;
  return r;
}

std::map<int, GroundTruthIndex> ground_truth_by_category(const Dataset& dataset) {
  std::map<int, GroundTruthIndex> out;
  for (const auto& im : dataset.images) {
    for (const auto& o : im.strong().objects) out[o.category][im.id].push_back(o.box);
  }
  return out;
}

std::map<int, std::optional<double>> corloc(const Dataset& dataset, const ScoreTables& tables, int categories) {
  if (tables.size() != dataset.size()) throw InputError("corloc: one score table per image is required");
  std::map<int, int> positives, correct;
  for (std::size_t n = 0; n < dataset.size(); ++n) {
    const auto& im = dataset.images[n];
    const auto& objects = im.strong().objects;
    const auto label = im.image_label();
    for (int c : label.positives()) {
      if (c >= tables[n].cols()) continue;
      Eigen::Index top = 0;
      tables[n].col(c).maxCoeff(&top);
      ++positives[c];
      const Box& b = im.proposals[top];
      const bool hit = std::any_of(objects.begin(), objects.end(), [&](const GroundTruthObject& o) {
        return o.category == c && iou(b, o.box) >= kMatchOverlap;
      });
      if (hit) ++correct[c];
    }
  }
  std::map<int, std::optional<double>> out;
  for (int c = 1; c < categories; ++c) {
    const int p = positives[c];
    out[c] = p == 0 ? std::nullopt : std::optional<double>(static_cast<double>(correct[c]) / p);
  }
  return out;
}

std::map<int, std::optional<double>> corloc(const Dataset& dataset, const ScorerParams& params) {
  return corloc(dataset, scorer_tables(dataset, params), params.categories());
}

namespace {

std::optional<double> mean_of_defined(const std::map<int, std::optional<double>>& values) {
  double s = 0.0;
  int n = 0;
  for (const auto& [c, v] : values) {
    if (v) {
      s += *v;
      ++n;
    }
  }
  if (n == 0) return std::nullopt;
  return s / n;
}

nlohmann::ordered_json optional_map_json(const std::map<int, std::optional<double>>& values) {
  nlohmann::ordered_json j = nlohmann::ordered_json::object();
  for (const auto& [c, v] : values) j[std::to_string(c)] = v ? nlohmann::ordered_json(*v) : nlohmann::ordered_json();
  return j;
}

}  // namespace

MetricsReport evaluate(const Dataset& test, const ScoreTables& test_tables, int categories, double score_threshold,
                       double nms_threshold) {
  const auto dets = detect(test, test_tables, score_threshold, nms_threshold);
  const auto gt = ground_truth_by_category(test);
  MetricsReport report;
  for (int c = 1; c < categories; ++c) {
    std::vector<Detection> mine;
    for (const auto& d : dets) {
      if (d.category == c) mine.push_back(d);
    }
    const auto it = gt.find(c);
    const auto r = average_precision(mine, it == gt.end() ? GroundTruthIndex{} : it->second);
    if (r) {
      report.ap[c] = r->ap;
      report.counts[c] = {r->true_positives, r->false_positives, r->ground_truth};
    } else {
      report.ap[c] = std::nullopt;
      report.counts[c] = {0, static_cast<int>(mine.size()), 0};
    }
  }
  report.map = mean_of_defined(report.ap);
  return report;
}

void add_corloc(MetricsReport& report, const Dataset& train, const ScoreTables& train_tables, int categories) {
  report.corloc = corloc(train, train_tables, categories);
  report.mean_corloc = mean_of_defined(report.corloc);
}

nlohmann::ordered_json MetricsReport::to_json() const {
  nlohmann::ordered_json j;
  j["ap"] = optional_map_json(ap);
  j["mAP"] = map ? nlohmann::ordered_json(*map) : nlohmann::ordered_json();
  j["corloc"] = optional_map_json(corloc);
  j["mean_corloc"] = mean_corloc ? nlohmann::ordered_json(*mean_corloc) : nlohmann::ordered_json();
  nlohmann::ordered_json cj = nlohmann::ordered_json::object();
  for (const auto& [c, k] : counts) cj[std::to_string(c)] = {{"tp", k.tp}, {"fp", k.fp}, {"gt", k.gt}};
  j["counts"] = std::move(cj);
  return j;
}

std::string detections_to_jsonl(const std::vector<Detection>& dets) {
  std::string out;
  for (const auto& d : dets) {
    nlohmann::ordered_json j;
    j["id"] = d.image_id;
    j["category"] = d.category;
    j["box"] = {d.box.x1(), d.box.y1(), d.box.x2(), d.box.y2()};
    j["score"] = d.score;
    out += j.dump();
    out += '\n';
  }
  return out;
}

}  // namespace emdet
