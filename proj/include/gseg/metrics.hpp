// BRATS-style evaluation: the three nested tumor regions (complete {1,2,3,4},
// core {1,3,4}, enhancing {4}) scored with Dice, Sensitivity and Specificity.
// A region absent from both prediction and truth (0/0) is undefined, reported
// as such and excluded from corpus means.
#ifndef GSEG_METRICS_HPP_
#define GSEG_METRICS_HPP_

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "gseg/common.hpp"

namespace gseg {

enum class Region { Complete, Core, Enhancing };

inline const char* to_string(Region r) {
  switch (r) {
    case Region::Complete: return "complete";
    case Region::Core: return "core";
    case Region::Enhancing: return "enhancing";
  }
  return "?";
}

inline bool region_contains(Region r, std::uint8_t label) {
  switch (r) {
    case Region::Complete: return label >= 1 && label <= 4;
    case Region::Core: return label == 1 || label == 3 || label == 4;
    case Region::Enhancing: return label == 4;
  }
  return false;
}

struct RegionMaskSet {
  std::vector<std::uint8_t> complete, core, enhancing;
};

inline RegionMaskSet region_masks(const std::vector<std::uint8_t>& labels) {
  RegionMaskSet m;
  m.complete.resize(labels.size());
  m.core.resize(labels.size());
  m.enhancing.resize(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    m.complete[i] = region_contains(Region::Complete, labels[i]) ? 1 : 0;
    m.core[i] = region_contains(Region::Core, labels[i]) ? 1 : 0;
    m.enhancing[i] = region_contains(Region::Enhancing, labels[i]) ? 1 : 0;
  }
  return m;
}

struct RegionScore {
  std::optional<double> dice, sensitivity, specificity;
  std::uint64_t p1 = 0, t1 = 0, p0 = 0, t0 = 0;
  std::uint64_t true_pos = 0, true_neg = 0;
};

inline RegionScore score_region(const std::vector<std::uint8_t>& pred,
                                const std::vector<std::uint8_t>& truth) {
  if (pred.size() != truth.size())
    raise<DataError>("score: prediction has ", pred.size(), " voxels, truth has ",
                     truth.size());
  RegionScore s;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred[i] != 0, t = truth[i] != 0;
    s.p1 += p;
    s.t1 += t;
    s.p0 += !p;
    s.t0 += !t;
    s.true_pos += p && t;
    s.true_neg += !p && !t;
  }
  if (s.p1 + s.t1 > 0)
    s.dice = 2.0 * static_cast<double>(s.true_pos) / static_cast<double>(s.p1 + s.t1);
  if (s.t1 > 0)
    s.sensitivity = static_cast<double>(s.true_pos) / static_cast<double>(s.t1);
  if (s.t0 > 0)
    s.specificity = static_cast<double>(s.true_neg) / static_cast<double>(s.t0);
  return s;
}

struct SegReport {
  std::string volume_id;
  RegionScore complete, core, enhancing;

  const RegionScore& region(Region r) const {
    switch (r) {
      case Region::Core: return core;
      case Region::Enhancing: return enhancing;
      default: return complete;
    }
  }
};

inline SegReport score(const std::vector<std::uint8_t>& pred,
                       const std::vector<std::uint8_t>& truth,
                       const std::string& volume_id = "") {
  if (pred.size() != truth.size())
    raise<DataError>("score: prediction has ", pred.size(), " voxels, truth has ",
                     truth.size());
  RegionMaskSet pm = region_masks(pred);
  RegionMaskSet tm = region_masks(truth);
  SegReport r;
  r.volume_id = volume_id;
  r.complete = score_region(pm.complete, tm.complete);
  r.core = score_region(pm.core, tm.core);
  r.enhancing = score_region(pm.enhancing, tm.enhancing);
  return r;
}

namespace detail {

inline nlohmann::json region_to_json(const RegionScore& s) {
  auto opt = [](const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
  };
  return nlohmann::json{{"dice", opt(s.dice)},
                        {"sensitivity", opt(s.sensitivity)},
                        {"specificity", opt(s.specificity)},
                        {"p1", s.p1},
                        {"t1", s.t1},
                        {"p0", s.p0},
                        {"t0", s.t0},
                        {"true_positives", s.true_pos}};
}

}  // namespace detail

inline nlohmann::json report_to_json(const SegReport& r) {
  return nlohmann::json{{"volume", r.volume_id},
                        {"complete", detail::region_to_json(r.complete)},
                        {"core", detail::region_to_json(r.core)},
                        {"enhancing", detail::region_to_json(r.enhancing)}};
}

struct MetricMean {
  std::optional<double> mean;  // over volumes where the metric is defined
  int undefined = 0;
};

struct RegionAggregate {
  MetricMean dice, sensitivity, specificity;
};

struct CorpusSummary {
  int volume_count = 0;
  RegionAggregate complete, core, enhancing;

  const RegionAggregate& region(Region r) const {
    switch (r) {
      case Region::Core: return core;
      case Region::Enhancing: return enhancing;
      default: return complete;
    }
  }
};

inline CorpusSummary aggregate(const std::vector<SegReport>& reports) {
  CorpusSummary sum;
  sum.volume_count = static_cast<int>(reports.size());
  for (Region reg : {Region::Complete, Region::Core, Region::Enhancing}) {
    RegionAggregate agg;
    auto fold = [&](auto member) {
      MetricMean m;
      double total = 0.0;
      int defined = 0;
      for (const SegReport& r : reports) {
        const std::optional<double>& v = r.region(reg).*member;
        if (v) { total += *v; ++defined; }
        else ++m.undefined;
      }
      if (defined > 0) m.mean = total / defined;
      return m;
    };
    agg.dice = fold(&RegionScore::dice);
    agg.sensitivity = fold(&RegionScore::sensitivity);
    agg.specificity = fold(&RegionScore::specificity);
    if (reg == Region::Complete) sum.complete = agg;
    else if (reg == Region::Core) sum.core = agg;
    else sum.enhancing = agg;
  }
  return sum;
}

inline nlohmann::json summary_to_json(const CorpusSummary& s) {
  auto metric = [](const MetricMean& m) {
    return nlohmann::json{{"mean", m.mean ? nlohmann::json(*m.mean) : nlohmann::json(nullptr)},
                          {"undefined", m.undefined}};
  };
  auto region = [&](const RegionAggregate& a) {
    return nlohmann::json{{"dice", metric(a.dice)},
                          {"sensitivity", metric(a.sensitivity)},
                          {"specificity", metric(a.specificity)}};
  };
  return nlohmann::json{{"volumes", s.volume_count},
                        {"complete", region(s.complete)},
                        {"core", region(s.core)},
                        {"enhancing", region(s.enhancing)}};
}

// one row per region: region,dice_mean,sensitivity_mean,specificity_mean,undefined counts
inline std::string summary_to_csv(const CorpusSummary& s) {
  std::string csv =
      "region,dice_mean,sensitivity_mean,specificity_mean,dice_undefined,"
      "sensitivity_undefined,specificity_undefined\n";
  auto cell = [](const MetricMean& m) {
    return m.mean ? format_msg(*m.mean) : std::string("undefined");
  };
  for (Region reg : {Region::Complete, Region::Core, Region::Enhancing}) {
    const RegionAggregate& a = s.region(reg);
    csv += format_msg(to_string(reg), ",", cell(a.dice), ",", cell(a.sensitivity), ",",
                      cell(a.specificity), ",", a.dice.undefined, ",",
                      a.sensitivity.undefined, ",", a.specificity.undefined, "\n");
  }
  return csv;
}

}  // namespace gseg

#endif  // GSEG_METRICS_HPP_
