#include "tloc/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <stdexcept>

#include "tloc/error.hpp"
#include "tloc/train.hpp"

namespace tloc::eval {

double geolocational_accuracy(std::span<const EvalRecord> records, double r_km) {
  if (records.empty()) throw std::invalid_argument("geolocational accuracy of an empty record set");
  std::size_t hits = 0;
  for (const auto& rec : records) hits += rec.distance_km < r_km;
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

AccuracyReport make_report(std::span<const EvalRecord> records, std::span<const double> thresholds_km) {
  for (std::size_t i = 0; i < thresholds_km.size(); ++i) {
    if (!(thresholds_km[i] > 0.0)) throw std::invalid_argument("thresholds must be positive");
    if (i > 0 && !(thresholds_km[i] > thresholds_km[i - 1])) {
      throw std::invalid_argument("thresholds must be strictly increasing");
    }
  }
  AccuracyReport rep;
  rep.n = records.size();
  rep.thresholds_km.assign(thresholds_km.begin(), thresholds_km.end());
  for (double r : thresholds_km) rep.accuracy.push_back(geolocational_accuracy(records, r));
  if (!records.empty() && records.front().scene_pred) {
    std::size_t hits = 0;
    for (const auto& rec : records) hits += rec.scene_pred && *rec.scene_pred == rec.scene_gt;
    rep.scene_accuracy = static_cast<double>(hits) / static_cast<double>(records.size());
  }
  return rep;
}

// ---------------------------------------------------------------------------
// Crops

namespace {

data::Sample crop_resize(const data::Sample& s, std::size_t h, std::size_t w, std::size_t y0, std::size_t x0,
                         std::size_t ch, std::size_t cw) {
  data::Sample out = s;
  const double sy = static_cast<double>(ch) / static_cast<double>(h);
  const double sx = static_cast<double>(cw) / static_cast<double>(w);
  for (std::size_t y = 0; y < h; ++y) {
    const double fy = std::clamp((static_cast<double>(y) + 0.5) * sy - 0.5, 0.0, static_cast<double>(ch - 1));
    const auto y1 = static_cast<std::size_t>(fy);
    const std::size_t y2 = std::min(y1 + 1, ch - 1);
    const double ty = fy - static_cast<double>(y1);
    const std::size_t ny = std::min(static_cast<std::size_t>((static_cast<double>(y) + 0.5) * sy), ch - 1);
    for (std::size_t x = 0; x < w; ++x) {
      const double fx = std::clamp((static_cast<double>(x) + 0.5) * sx - 0.5, 0.0, static_cast<double>(cw - 1));
      const auto x1 = static_cast<std::size_t>(fx);
      const std::size_t x2 = std::min(x1 + 1, cw - 1);
      const double tx = fx - static_cast<double>(x1);
      const std::size_t nx = std::min(static_cast<std::size_t>((static_cast<double>(x) + 0.5) * sx), cw - 1);
      for (std::size_t c = 0; c < 3; ++c) {
        const float* plane = s.rgb.data() + c * h * w;
        auto px = [&](std::size_t yy, std::size_t xx) { return static_cast<double>(plane[(y0 + yy) * w + x0 + xx]); };
        // a + t·(b - a) reproduces a constant image exactly.
        const double top = px(y1, x1) + tx * (px(y1, x2) - px(y1, x1));
        const double bot = px(y2, x1) + tx * (px(y2, x2) - px(y2, x1));
        out.rgb[(c * h + y) * w + x] = static_cast<float>(top + ty * (bot - top));
      }
      out.seg[y * w + x] = s.seg[(y0 + ny) * w + x0 + nx];
    }
  }
  return out;
}

}  // namespace

std::vector<data::Sample> ten_crops(const data::Sample& sample, std::size_t h, std::size_t w) {
  const auto ch = static_cast<std::size_t>(std::ceil(0.875 * static_cast<double>(h)));
  const auto cw = static_cast<std::size_t>(std::ceil(0.875 * static_cast<double>(w)));
  const std::size_t offsets[5][2] = {
      {(h - ch) / 2, (w - cw) / 2}, {0, 0}, {0, w - cw}, {h - ch, 0}, {h - ch, w - cw}};
  std::vector<data::Sample> out;
  for (const auto& o : offsets) out.push_back(crop_resize(sample, h, w, o[0], o[1], ch, cw));
  for (std::size_t i = 0; i < 5; ++i) out.push_back(train::hflip(out[i], h, w));
  return out;
}

// ---------------------------------------------------------------------------

namespace {

void branch_weights_into(const model::ForwardResult& r, const model::ModelConfig& cfg, std::size_t b,
                         double* dst) {
  if (r.branch_weights.defined()) {
    dst[0] = r.branch_weights.data()[2 * b];
    dst[1] = r.branch_weights.data()[2 * b + 1];
  } else if (cfg.dual()) {
    dst[0] = 0.5;
    dst[1] = 0.5;
  } else {
    dst[0] = 1.0;
    dst[1] = 0.0;
  }
}

// Running mean: identical inputs leave the value bit-for-bit unchanged.
void mean_update(double* mean, std::span<const double> x, std::size_t count) {
  for (std::size_t i = 0; i < x.size(); ++i) mean[i] += (x[i] - mean[i]) / static_cast<double>(count);
}

}  // namespace

Inference infer(const model::Model& model, const data::Dataset& dataset, CropPolicy policy, std::size_t batch_size) {
  const auto& cfg = model.config();
  if (cfg.image_h != dataset.h || cfg.image_w != dataset.w) {
    throw ConfigError("model expects " + std::to_string(cfg.image_h) + "x" + std::to_string(cfg.image_w) +
                      " images, dataset has " + std::to_string(dataset.h) + "x" + std::to_string(dataset.w));
  }
  if (cfg.dual() && cfg.seg_classes < dataset.n_seg_classes) throw ConfigError("dataset has more segmentation classes than the model");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  ad::NoGradGuard no_grad;
  Inference inf;
  inf.n = dataset.size();
  inf.k_fine = cfg.k_fine;
  inf.k_scene = cfg.scene_head ? cfg.k_scene : 0;
  inf.fine.assign(inf.n * inf.k_fine, 0.0);
  inf.scene.assign(inf.n * inf.k_scene, 0.0);
  inf.weights.assign(inf.n * 2, 0.0);
  const std::size_t views = policy == CropPolicy::kTenCrop ? 10 : 1;

  for (std::size_t start = 0; start < inf.n; start += batch_size) {
    const std::size_t count = std::min(batch_size, inf.n - start);
    std::vector<std::vector<data::Sample>> crops(views);
    for (std::size_t b = 0; b < count; ++b) {
      const auto& s = dataset.samples[start + b];
      if (views == 1) {
        crops[0].push_back(s);
      } else {
        auto tc = ten_crops(s, dataset.h, dataset.w);
        for (std::size_t v = 0; v < views; ++v) crops[v].push_back(std::move(tc[v]));
      }
    }
    for (std::size_t v = 0; v < views; ++v) {
      const auto r = model.forward(train::make_batch(crops[v], dataset.h, dataset.w, cfg.dual()));
      for (std::size_t b = 0; b < count; ++b) {
        const std::size_t i = start + b;
        mean_update(inf.fine.data() + i * inf.k_fine, r.fine.data().subspan(b * inf.k_fine, inf.k_fine), v + 1);
        if (inf.k_scene > 0) {
          mean_update(inf.scene.data() + i * inf.k_scene, r.scene.data().subspan(b * inf.k_scene, inf.k_scene), v + 1);
        }
        double w[2];
        branch_weights_into(r, cfg, b, w);
        mean_update(inf.weights.data() + i * 2, w, v + 1);
      }
    }
  }
  return inf;
}

void check_compatible(const model::ModelConfig& config, const cells::CellIndex& index) {
  if (config.k_coarse != index.coarse.size() || config.k_middle != index.middle.size() ||
      config.k_fine != index.fine.size()) {
    throw ConfigError("checkpoint heads (" + std::to_string(config.k_coarse) + ", " + std::to_string(config.k_middle) +
                      ", " + std::to_string(config.k_fine) + ") do not match the cell index (" +
                      std::to_string(index.coarse.size()) + ", " + std::to_string(index.middle.size()) + ", " +
                      std::to_string(index.fine.size()) + ")");
  }
}

namespace {

std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

}  // namespace

std::vector<EvalRecord> to_records(const Inference& inf, const data::Dataset& dataset, const cells::CellIndex& index) {
  if (inf.k_fine != index.fine.size()) {
    throw ConfigError("model has " + std::to_string(inf.k_fine) + " fine classes, cell index has " +
                      std::to_string(index.fine.size()));
  }
  std::vector<EvalRecord> out;
  out.reserve(inf.n);
  const std::span<const double> fine(inf.fine);
  const std::span<const double> scene(inf.scene);
  for (std::size_t i = 0; i < inf.n; ++i) {
    EvalRecord rec;
    rec.gt = dataset.samples[i].coord;
    rec.pred_cell = argmax(fine.subspan(i * inf.k_fine, inf.k_fine));
    rec.pred_gps = cells::class_to_gps(index, cells::Level::kFine, rec.pred_cell);
    rec.distance_km = geo::gcd_km(rec.pred_gps, rec.gt);
    if (inf.k_scene > 0) rec.scene_pred = argmax(scene.subspan(i * inf.k_scene, inf.k_scene));
    rec.scene_gt = dataset.samples[i].scene;
    out.push_back(rec);
  }
  return out;
}

std::vector<EvalRecord> predict(const model::Model& model, const data::Dataset& dataset, const cells::CellIndex& index,
                                CropPolicy policy, std::size_t batch_size) {
  check_compatible(model.config(), index);
  return to_records(infer(model, dataset, policy, batch_size), dataset, index);
}

double pearson(std::span<const double> xs, std::span<const double> ys) {
  if (xs.size() != ys.size()) throw std::invalid_argument("pearson: series lengths differ");
  if (xs.size() < 2) throw std::invalid_argument("pearson: need at least two points");
  const double n = static_cast<double>(xs.size());
  const double mx = std::accumulate(xs.begin(), xs.end(), 0.0) / n;
  const double my = std::accumulate(ys.begin(), ys.end(), 0.0) / n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double dx = xs[i] - mx;
    const double dy = ys[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx <= 0.0 || syy <= 0.0) throw std::invalid_argument("degenerate series");
  return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

double fine_cell_accuracy(std::span<const EvalRecord> records, const cells::CellIndex& index) {
  if (records.empty()) throw std::invalid_argument("fine-cell accuracy of an empty record set");
  std::size_t hits = 0;
  for (const auto& rec : records) {
    const auto truth = cells::locate(index.fine, rec.gt);
    hits += truth && *truth == rec.pred_cell;
  }
  return static_cast<double>(hits) / static_cast<double>(records.size());
}

double world_diameter_km(const cells::CellIndex& index) {
  double d = 0.0;
  const auto& cs = index.fine.cells;
  for (std::size_t a = 0; a < cs.size(); ++a) {
    for (std::size_t b = a + 1; b < cs.size(); ++b) d = std::max(d, geo::gcd_km(cs[a].mean_gps, cs[b].mean_gps));
  }
  return d;
}

namespace {

double radius_scale(const cells::CellIndex& index) {
  const double d = world_diameter_km(index);
  return d > 0.0 ? d / (geo::kPi * geo::kEarthRadiusKm) : 1.0;
}

}  // namespace

std::vector<double> default_thresholds(const cells::CellIndex& index) {
  const double scale = radius_scale(index);
  std::vector<double> out(kPaperThresholdsKm.begin(), kPaperThresholdsKm.end());
  for (double r : kPaperThresholdsKm) out.push_back(r * scale);
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

CorrelationStudy correlation_study(const Inference& inf, const data::Dataset& dataset, const cells::CellIndex& index) {
  CorrelationStudy st = correlation_series(inf, dataset, index);
  st.r = pearson(st.top_n_accuracy, st.geo_accuracy);
  return st;
}

CorrelationStudy correlation_series(const Inference& inf, const data::Dataset& dataset, const cells::CellIndex& index) {
  const auto records = to_records(inf, dataset, index);
  if (records.empty()) throw std::invalid_argument("correlation study on an empty set");
  CorrelationStudy st;
  const std::size_t k = inf.k_fine;
  for (std::size_t n : kTopN) st.top_n.push_back(std::min(n, k));

  // Rank of the true class among the fine logits; ties resolved by class id.
  std::vector<std::size_t> rank(inf.n, std::numeric_limits<std::size_t>::max());
  for (std::size_t i = 0; i < inf.n; ++i) {
    const auto truth = cells::locate(index.fine, dataset.samples[i].coord);
    if (!truth) continue;
    const double* row = inf.fine.data() + i * k;
    std::size_t above = 0;
    for (std::size_t c = 0; c < k; ++c) {
      above += row[c] > row[*truth] || (row[c] == row[*truth] && c < *truth);
    }
    rank[i] = above;
  }
  for (std::size_t n : st.top_n) {
    std::size_t hits = 0;
    for (auto r : rank) hits += r < n;
    st.top_n_accuracy.push_back(static_cast<double>(hits) / static_cast<double>(inf.n));
  }

  st.diameter_km = world_diameter_km(index);
  const double scale = radius_scale(index);
  for (double r : kCorrelationRadiiKm) {
    st.radii_km.push_back(r * scale);
    st.geo_accuracy.push_back(geolocational_accuracy(records, r * scale));
  }
  st.r = std::numeric_limits<double>::quiet_NaN();
  return st;
}

// ---------------------------------------------------------------------------
// Reports

std::string report_csv(const AccuracyReport& report) {
  std::string out = "threshold_km,accuracy\n";
  char buf[96];
  for (std::size_t i = 0; i < report.thresholds_km.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%g,%.6f\n", report.thresholds_km[i], report.accuracy[i]);
    out += buf;
  }
  return out;
}

namespace {

const char* scale_name(double r) {
  if (r == 1.0) return "street";
  if (r == 25.0) return "city";
  if (r == 200.0) return "region";
  if (r == 750.0) return "country";
  if (r == 2500.0) return "continent";
  return nullptr;
}

}  // namespace

std::string report_summary(const AccuracyReport& report) {
  std::string out;
  char buf[128];
  std::snprintf(buf, sizeof buf, "samples %zu\n", report.n);
  out += buf;
  for (std::size_t i = 0; i < report.thresholds_km.size(); ++i) {
    const double r = report.thresholds_km[i];
    const char* name = scale_name(r);
    if (name != nullptr) {
      std::snprintf(buf, sizeof buf, "%-10s %7g km  %6.2f%%\n", name, r, 100.0 * report.accuracy[i]);
    } else {
      std::snprintf(buf, sizeof buf, "%-10s %7g km  %6.2f%%\n", "r", r, 100.0 * report.accuracy[i]);
    }
    out += buf;
  }
  if (report.fine_accuracy) {
    std::snprintf(buf, sizeof buf, "fine-cell accuracy %.2f%%\n", 100.0 * *report.fine_accuracy);
    out += buf;
  }
  if (report.scene_accuracy) {
    std::snprintf(buf, sizeof buf, "scene accuracy %.2f%%\n", 100.0 * *report.scene_accuracy);
    out += buf;
  }
  return out;
}

std::string correlation_csv(const CorrelationStudy& st) {
  std::string out = "top_n,top_n_accuracy,radius_km,geo_accuracy\n";
  char buf[128];
  for (std::size_t i = 0; i < st.top_n.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.6f,%.6g,%.6f\n", st.top_n[i], st.top_n_accuracy[i], st.radii_km[i],
                  st.geo_accuracy[i]);
    out += buf;
  }
  std::snprintf(buf, sizeof buf, "# diameter_km=%.3f pearson=%.6f\n", st.diameter_km, st.r);
  out += buf;
  return out;
}

void write_text_file(const std::string& path, std::string_view content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path + " for writing");
  f.write(content.data(), static_cast<std::streamsize>(content.size()));
  f.close();
  if (!f) throw IoError("failed writing " + path);
}

void emit_report(const AccuracyReport& report, const std::string& dir) {
  write_text_file(dir + "/report.csv", report_csv(report));
  write_text_file(dir + "/summary.txt", report_summary(report));
}

std::string to_pgm(std::span<const double> values, std::size_t rows, std::size_t cols) {
  if (values.size() != rows * cols) throw std::invalid_argument("pgm: size does not match rows x cols");
  double hi = 0.0;
  for (double v : values) hi = std::max(hi, v);
  std::string out = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
  for (double v : values) {
    const double t = hi > 0.0 ? std::clamp(v / hi, 0.0, 1.0) : 0.0;
    out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(255.0 * t))));
  }
  return out;
}

std::vector<std::string> write_attention_maps(const model::Model& model, const data::Sample& sample, std::size_t h,
                                              std::size_t w, const std::string& dir) {
  ad::NoGradGuard no_grad;
  const auto& cfg = model.config();
  const std::vector<data::Sample> one{sample};
  const auto r = model.forward(train::make_batch(one, h, w, cfg.dual()), {.record_attention = true});
  const std::size_t t = cfg.tokens();
  std::vector<std::string> paths;
  for (int branch = 0; branch < (cfg.dual() ? 2 : 1); ++branch) {
    for (std::size_t layer = 0; layer < cfg.depth; ++layer) {
      const auto maps = model::attention_export(r, layer, branch == 1, 0);
      std::vector<double> avg(t * t, 0.0);
      for (std::size_t hd = 0; hd < cfg.heads; ++hd) {
        for (std::size_t i = 0; i < t * t; ++i) avg[i] += maps[hd * t * t + i] / static_cast<double>(cfg.heads);
      }
      const std::string path =
          dir + "/attn_" + (branch == 1 ? "seg" : "rgb") + "_layer" + std::to_string(layer) + ".pgm";
      write_text_file(path, to_pgm(avg, t, t));
      paths.push_back(path);
    }
  }
  return paths;
}

}  // namespace tloc::eval
