#pragma once

// Per-pixel binary classification metrics at each rain threshold: exact
// precision/recall sweeps, single operating points for hard predictors,
// AUC-PR, and CSV/SVG reports.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "nowcast/error.hpp"
#include "nowcast/prediction.hpp"
#include "nowcast/provenance.hpp"
#include "nowcast/raster.hpp"
#include "nowcast/text.hpp"

namespace nowcast {

/// Predictions paired with the quantized ground truth they forecast. All
/// pixels of all pairs are pooled into a single confusion count.
struct PredictionSet {
  std::vector<std::pair<ExceedanceMaps, ClassGrid>> pairs;

  void add(ExceedanceMaps maps, ClassGrid truth) {
    if (maps.height != truth.height || maps.width != truth.width) {
      throw InvalidArgument("prediction and truth dimensions differ");
    }
    maps.validate();
    pairs.emplace_back(std::move(maps), std::move(truth));
  }

  void append(const PredictionSet& other) {
    pairs.insert(pairs.end(), other.pairs.begin(), other.pairs.end());
  }
};

struct PRPoint {
  double decision_threshold = 0.5;
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  double precision = 1.0;
  double recall = 0.0;
  bool degenerate = false;  // TP + FP = 0; precision reported as 1

  bool operator==(const PRPoint&) const = default;
};

inline PRPoint make_point(double threshold, std::uint64_t tp, std::uint64_t fp, std::uint64_t fn,
                          std::uint64_t tn) {
  PRPoint p{threshold, tp, fp, fn, tn, 1.0, 0.0, false};
  if (tp + fp == 0) {
    p.degenerate = true;
  } else {
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
  }
  p.recall = tp + fn == 0 ? 0.0 : static_cast<double>(tp) / static_cast<double>(tp + fn);
  return p;
}

struct PRCurve {
  std::size_t threshold_index = 0;
  std::vector<PRPoint> points;  // ascending decision threshold
  std::uint64_t positives = 0;
  std::uint64_t total = 0;
};

namespace detail {

inline void check_index(const PredictionSet& set, std::size_t k) {
  for (const auto& [maps, truth] : set.pairs) {
    if (k >= maps.maps.size()) {
      throw InvalidArgument("rain threshold index " + std::to_string(k) + " out of range");
    }
  }
}

/// Pooled (probability, truth) pairs for threshold k.
inline std::vector<std::pair<float, bool>> pooled(const PredictionSet& set, std::size_t k) {
  check_index(set, k);
  std::vector<std::pair<float, bool>> out;
  for (const auto& [maps, truth] : set.pairs) {
    const auto& plane = maps.maps[k];
    for (std::size_t i = 0; i < plane.size(); ++i) {
      out.emplace_back(plane[i], truth.classes[i] > k);
    }
  }
  return out;
}

inline void require_mixed(std::uint64_t positives, std::uint64_t total, std::size_t k) {
  if (total == 0 || positives == 0 || positives == total) {
    throw DegenerateSet("rain threshold " + std::to_string(k) + ": ground truth has " +
                        std::to_string(positives) + " positives of " + std::to_string(total) +
                        " pixels; precision/recall undefined");
  }
}

}  // namespace detail

/// Exact sweep: one point per distinct predicted probability plus 0 and 1,
/// predicting positive where probability >= decision threshold.
inline PRCurve pr_curve(const PredictionSet& set, std::size_t threshold_index) {
  auto px = detail::pooled(set, threshold_index);
  PRCurve curve;
  curve.threshold_index = threshold_index;
  curve.total = px.size();
  for (const auto& [p, t] : px) curve.positives += t;
  detail::require_mixed(curve.positives, curve.total, threshold_index);

  std::sort(px.begin(), px.end(),
            [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> thresholds;
  for (const auto& [p, t] : px) thresholds.push_back(p);
  thresholds.push_back(0.0);
  thresholds.push_back(1.0);
  std::sort(thresholds.begin(), thresholds.end(), std::greater<>());
  thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());

  // Walk thresholds high -> low, admitting pixels with probability >= threshold.
  std::uint64_t tp = 0, fp = 0;
  std::size_t next = 0;
  std::vector<PRPoint> desc;
  for (double th : thresholds) {
    while (next < px.size() && static_cast<double>(px[next].first) >= th) {
      (px[next].second ? tp : fp) += 1;
      ++next;
    }
    const auto fn = curve.positives - tp;
    const auto tn = curve.total - curve.positives - fp;
    desc.push_back(make_point(th, tp, fp, fn, tn));
  }
  curve.points.assign(desc.rbegin(), desc.rend());
  return curve;
}

/// Single operating point for a hard (or probabilistic) predictor at 0.5.
inline PRPoint pr_point(const PredictionSet& set, std::size_t threshold_index,
                        double decision_threshold = 0.5) {
  const auto px = detail::pooled(set, threshold_index);
  std::uint64_t tp = 0, fp = 0, fn = 0, tn = 0;
  for (const auto& [p, t] : px) {
    const bool yes = static_cast<double>(p) >= decision_threshold;
    if (yes && t) ++tp;
    else if (yes) ++fp;
    else if (t) ++fn;
    else ++tn;
  }
  detail::require_mixed(tp + fn, px.size(), threshold_index);
  return make_point(decision_threshold, tp, fp, fn, tn);
}

inline double f1_score(const PRPoint& p) {
  const auto denom = 2 * p.tp + p.fp + p.fn;
  return denom == 0 ? 0.0 : 2.0 * static_cast<double>(p.tp) / static_cast<double>(denom);
}

/// Trapezoidal area under precision(recall), traversing from the highest
/// decision threshold down. Points with TP + FP = 0 carry no precision and
/// are skipped; the first remaining point is extended to recall 0.
inline double auc_pr(const PRCurve& curve) {
  if (curve.points.size() < 2) throw DegenerateSet("AUC-PR needs at least 2 curve points");
  double area = 0.0;
  double prev_r = 0.0;
  double prev_p = -1.0;
  for (auto it = curve.points.rbegin(); it != curve.points.rend(); ++it) {
    if (it->degenerate) continue;
    if (prev_p < 0.0) prev_p = it->precision;
    area += (it->recall - prev_r) * 0.5 * (it->precision + prev_p);
    prev_r = it->recall;
    prev_p = it->precision;
  }
  if (prev_p < 0.0) throw DegenerateSet("AUC-PR: no curve point predicts any positive");
  return std::clamp(area, 0.0, 1.0);
}

/// Best precision the curve reaches at recall >= `recall` (the usual
/// interpolated PR envelope); 0 if the curve never reaches that recall.
inline double precision_at_recall(const PRCurve& curve, double recall) {
  double best = 0.0;
  for (const auto& p : curve.points) {
    if (p.recall >= recall) best = std::max(best, p.precision);
  }
  return best;
}

// ---------------------------------------------------------------------------
// Evaluation files and reports

/// Evaluation of one model over a test set: curves for probabilistic
/// models, single points for hard baselines, one entry per rain threshold.
struct ModelEvaluation {
  std::string model;
  QuantizationScheme scheme{};
  std::string test_set;  // identifies the manifest the predictions cover
  Provenance provenance{};
  bool is_curve = true;
  std::vector<PRCurve> curves;
  std::vector<PRPoint> points;

  std::size_t row_count() const {
    if (!is_curve) return points.size();
    std::size_t n = 0;
    for (const auto& c : curves) n += c.points.size();
    return n;
  }
};

inline ModelEvaluation evaluate_model(const std::string& model, const PredictionSet& set,
                                      const QuantizationScheme& scheme, bool as_curve) {
  ModelEvaluation ev;
  ev.model = model;
  ev.scheme = scheme;
  ev.is_curve = as_curve;
  for (std::size_t k = 0; k < scheme.thresholds().size(); ++k) {
    if (as_curve) ev.curves.push_back(pr_curve(set, k));
    else ev.points.push_back(pr_point(set, k));
  }
  return ev;
}

inline constexpr const char* kEvalColumns =
    "model,rain_threshold,decision_threshold,tp,fp,fn,tn,precision,recall";

inline void write_rows(const ModelEvaluation& ev, std::ostream& out) {
  auto row = [&](std::size_t k, const PRPoint& p) {
    out << ev.model << ',' << text::format_double(ev.scheme.thresholds()[k]) << ','
        << text::format_double(p.decision_threshold) << ',' << p.tp << ',' << p.fp << ',' << p.fn
        << ',' << p.tn << ',' << text::format_double(p.precision) << ','
        << text::format_double(p.recall) << '\n';
  };
  if (ev.is_curve) {
    for (const auto& c : ev.curves) {
      for (const auto& p : c.points) row(c.threshold_index, p);
    }
  } else {
    for (std::size_t k = 0; k < ev.points.size(); ++k) row(k, ev.points[k]);
  }
}

inline void write_evaluation(const ModelEvaluation& ev, std::ostream& out) {
  out << "# nowcast-evaluation v1\n"
      << "# model=" << ev.model << '\n'
      << "# kind=" << (ev.is_curve ? "curve" : "point") << '\n'
      << "# thresholds=" << text::join_doubles(ev.scheme.thresholds()) << '\n'
      << "# test_set=" << ev.test_set << '\n';
  ev.provenance.write(out);
  out << kEvalColumns << '\n';
  write_rows(ev, out);
}

inline ModelEvaluation read_evaluation(std::istream& in) {
  std::map<std::string, std::string> header;
  ModelEvaluation ev;
  std::string line;
  std::size_t lineno = 0;
  bool saw_columns = false;
  std::map<std::size_t, PRCurve> curves;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || parse_header_line(line, header)) continue;
    if (!saw_columns) {
      if (line != kEvalColumns) throw FormatError("unexpected evaluation columns", lineno);
      saw_columns = true;
      if (!header.contains("thresholds") || !header.contains("kind") || !header.contains("model")) {
        throw FormatError("evaluation header incomplete", lineno);
      }
      ev.model = header["model"];
      ev.scheme = QuantizationScheme(text::parse_double_list(header["thresholds"], "thresholds"));
      ev.is_curve = header["kind"] == "curve";
      ev.test_set = header["test_set"];
      ev.provenance = Provenance::from_header(header);
      continue;
    }
    const auto f = text::split(line, ',');
    if (f.size() != 9) throw FormatError("evaluation row needs 9 fields", lineno);
    const double rain = text::parse_number<double>(f[1], "rain_threshold");
    const auto& th = ev.scheme.thresholds();
    const auto it = std::find(th.begin(), th.end(), rain);
    if (it == th.end()) throw FormatError("rain threshold not in scheme", lineno);
    const auto k = static_cast<std::size_t>(it - th.begin());
    auto p = make_point(text::parse_number<double>(f[2], "decision_threshold"),
                        text::parse_number<std::uint64_t>(f[3], "tp"),
                        text::parse_number<std::uint64_t>(f[4], "fp"),
                        text::parse_number<std::uint64_t>(f[5], "fn"),
                        text::parse_number<std::uint64_t>(f[6], "tn"));
    if (ev.is_curve) {
      auto& c = curves[k];
      c.threshold_index = k;
      c.positives = p.tp + p.fn;
      c.total = p.tp + p.fp + p.fn + p.tn;
      c.points.push_back(p);
    } else {
      ev.points.push_back(p);
    }
  }
  if (!saw_columns) throw FormatError("evaluation file has no column header", lineno);
  for (auto& [k, c] : curves) ev.curves.push_back(std::move(c));
  return ev;
}

inline void check_compatible(const std::vector<ModelEvaluation>& evals) {
  if (evals.empty()) throw InvalidArgument("report needs at least one evaluation");
  for (const auto& e : evals) {
    if (!(e.scheme == evals.front().scheme)) {
      throw ConfigMismatch("evaluation '" + e.model + "' uses a different quantization scheme");
    }
    if (e.test_set != evals.front().test_set) {
      throw ConfigMismatch("evaluation '" + e.model + "' covers a different test set");
    }
  }
}

/// Concatenated operating points of every model.
inline void write_report_csv(const std::vector<ModelEvaluation>& evals, const Provenance& prov,
                             std::ostream& out) {
  check_compatible(evals);
  out << "# nowcast-report v1\n"
      << "# thresholds=" << text::join_doubles(evals.front().scheme.thresholds()) << '\n'
      << "# test_set=" << evals.front().test_set << '\n';
  prov.write(out);
  out << kEvalColumns << '\n';
  for (const auto& e : evals) write_rows(e, out);
}

inline std::string xml_escape(const std::string& s) {
  std::string out;
  for (char c : s) {
    switch (c) {
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '&': out += "&amp;"; break;
      case '"': out += "&quot;"; break;
      default: out += c;
    }
  }
  return out;
}

/// One precision/recall panel per rain threshold; curves as polylines,
/// point baselines as markers.
inline void write_report_svg(const std::vector<ModelEvaluation>& evals, const Provenance& prov,
                             std::ostream& out) {
  check_compatible(evals);
  const auto& th = evals.front().scheme.thresholds();
  const int panel = 300, pad = 50, plot = panel - 2 * pad + 40;
  const int width = static_cast<int>(th.size()) * panel, height = panel + 40;
  static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"};
  auto fx = [](double v) { return text::format_double(v, 2); };

  out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << ' ' << height << "\">\n"
      << "<!-- tool_version=" << prov.tool_version << " seed=" << prov.seed
      << " config_hash=" << prov.config_hash << " test_set=" << xml_escape(evals.front().test_set)
      << " -->\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
      << "\" fill=\"white\"/>\n";
  for (std::size_t k = 0; k < th.size(); ++k) {
    const double x0 = static_cast<double>(k) * panel + pad;
    const double y0 = pad;
    auto px = [&](double recall) { return x0 + recall * plot; };
    auto py = [&](double precision) { return y0 + (1.0 - precision) * plot; };
    out << "<g id=\"panel" << k << "\">\n"
        << "<text x=\"" << fx(x0 + plot / 2.0) << "\" y=\"" << fx(y0 - 15)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">rain &gt;= "
        << text::format_double(th[k]) << " mm/h</text>\n"
        << "<rect x=\"" << fx(x0) << "\" y=\"" << fx(y0) << "\" width=\"" << plot
        << "\" height=\"" << plot << "\" fill=\"none\" stroke=\"black\"/>\n"
        << "<text x=\"" << fx(x0 + plot / 2.0) << "\" y=\"" << fx(y0 + plot + 30)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">recall</text>\n"
        << "<text x=\"" << fx(x0 - 30) << "\" y=\"" << fx(y0 + plot / 2.0)
        << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\" transform=\"rotate(-90 "
        << fx(x0 - 30) << ' ' << fx(y0 + plot / 2.0) << ")\">precision</text>\n";
    for (int t = 0; t <= 4; ++t) {
      const double v = t / 4.0;
      out << "<text x=\"" << fx(px(v)) << "\" y=\"" << fx(y0 + plot + 14)
          << "\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"9\">" << fx(v)
          << "</text>\n"
          << "<text x=\"" << fx(x0 - 4) << "\" y=\"" << fx(py(v) + 3)
          << "\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"9\">" << fx(v)
          << "</text>\n";
    }
    for (std::size_t m = 0; m < evals.size(); ++m) {
      const auto& e = evals[m];
      const char* color = colors[m % 6];
      if (e.is_curve) {
        for (const auto& c : e.curves) {
          if (c.threshold_index != k) continue;
          out << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
          for (auto it = c.points.rbegin(); it != c.points.rend(); ++it) {
            out << fx(px(it->recall)) << ',' << fx(py(it->precision)) << ' ';
          }
          out << "\"/>\n";
        }
      } else if (k < e.points.size()) {
        const auto& p = e.points[k];
        out << "<circle cx=\"" << fx(px(p.recall)) << "\" cy=\"" << fx(py(p.precision))
            << "\" r=\"4\" fill=\"" << color << "\"/>\n";
      }
      out << "<text x=\"" << fx(x0 + 6) << "\" y=\"" << fx(y0 + plot - 8 - 12.0 * m)
          << "\" font-family=\"sans-serif\" font-size=\"10\" fill=\"" << color << "\">" << xml_escape(e.model)
          << (e.is_curve ? "" : " (point)") << "</text>\n";
    }
    out << "</g>\n";
  }
  out << "</svg>\n";
}

}  // namespace nowcast
