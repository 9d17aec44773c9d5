#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tloc/cells.hpp"
#include "tloc/geo.hpp"
#include "tloc/model.hpp"
#include "tloc/synth.hpp"

namespace tloc::eval {

struct EvalRecord {
  geo::GeoCoord gt;
  std::size_t pred_cell = 0;  // fine class id
  geo::GeoCoord pred_gps;
  double distance_km = 0.0;
  std::optional<std::size_t> scene_pred;
  std::size_t scene_gt = 0;
};

/// Street, city, region, country and continent scales.
inline constexpr std::array<double, 5> kPaperThresholdsKm{1.0, 25.0, 200.0, 750.0, 2500.0};

/// Fraction of records with distance strictly below r_km. Throws
/// std::invalid_argument on an empty set.
double geolocational_accuracy(std::span<const EvalRecord> records, double r_km);

struct AccuracyReport {
  std::vector<double> thresholds_km;
  std::vector<double> accuracy;
  std::size_t n = 0;
  std::optional<double> fine_accuracy;
  std::optional<double> scene_accuracy;
};

/// Thresholds must be positive and strictly increasing.
AccuracyReport make_report(std::span<const EvalRecord> records, std::span<const double> thresholds_km);

enum class CropPolicy { kSingle, kTenCrop };

/// Head outputs per sample, averaged over crops when the policy asks for it.
struct Inference {
  std::size_t n = 0;
  std::size_t k_fine = 0;
  std::size_t k_scene = 0;      // 0 without a scene head
  std::vector<double> fine;     // n × k_fine logits
  std::vector<double> scene;    // n × k_scene logits
  std::vector<double> weights;  // n × 2 branch weights (w_rgb, w_seg)
};

/// The ten views: center and four corner crops of side ⌈0.875·H⌉, each
/// resized back to H×W (bilinear RGB, nearest segmentation), and their
/// horizontal flips.
std::vector<data::Sample> ten_crops(const data::Sample& sample, std::size_t h, std::size_t w);

/// Forward passes over the whole dataset. Throws ConfigError when the model
/// does not fit the dataset's image size.
Inference infer(const model::Model& model, const data::Dataset& dataset, CropPolicy policy,
                std::size_t batch_size = 64);

/// Argmax of the fine head mapped to its cell's mean GPS. Throws ConfigError
/// when the model's head sizes do not match the index.
std::vector<EvalRecord> to_records(const Inference& inference, const data::Dataset& dataset,
                                   const cells::CellIndex& index);
std::vector<EvalRecord> predict(const model::Model& model, const data::Dataset& dataset, const cells::CellIndex& index,
                                CropPolicy policy, std::size_t batch_size = 64);

void check_compatible(const model::ModelConfig& config, const cells::CellIndex& index);

/// Fraction of records whose predicted fine cell contains the ground truth.
double fine_cell_accuracy(std::span<const EvalRecord> records, const cells::CellIndex& index);

/// Largest distance between two fine cell centers.
double world_diameter_km(const cells::CellIndex& index);

/// The standard radii together with the same radii scaled by the world
/// diameter, sorted and without repeats.
std::vector<double> default_thresholds(const cells::CellIndex& index);

/// Product-moment correlation. Throws std::invalid_argument for unequal or
/// short series, and "degenerate series" when either has zero variance.
double pearson(std::span<const double> xs, std::span<const double> ys);

inline constexpr std::array<std::size_t, 8> kTopN{1, 5, 10, 50, 100, 200, 300, 500};
inline constexpr std::array<double, 8> kCorrelationRadiiKm{1, 25, 100, 200, 400, 750, 1500, 2500};

struct CorrelationStudy {
  std::vector<std::size_t> top_n;  // clipped to the class count
  std::vector<double> top_n_accuracy;
  std::vector<double> radii_km;    // scaled to the world diameter
  std::vector<double> geo_accuracy;
  double diameter_km = 0.0;
  double r = 0.0;
};

/// Top-N fine-cell accuracy and a_r, with r left NaN. Samples in dropped
/// regions count as misses for Top-N. Radii are scaled by (largest distance
/// between fine cell centers) / (half the earth's circumference).
CorrelationStudy correlation_series(const Inference& inference, const data::Dataset& dataset,
                                    const cells::CellIndex& index);
/// The series and their Pearson r; throws like pearson().
CorrelationStudy correlation_study(const Inference& inference, const data::Dataset& dataset,
                                   const cells::CellIndex& index);

/// `threshold_km,accuracy` rows.
std::string report_csv(const AccuracyReport& report);
/// One line per threshold, named by scale for the five standard radii.
std::string report_summary(const AccuracyReport& report);
std::string correlation_csv(const CorrelationStudy& study);

/// Writes `<dir>/report.csv` and `<dir>/summary.txt`. Throws IoError naming
/// the path on failure.
void emit_report(const AccuracyReport& report, const std::string& dir);

/// Binary graymap of a rows × cols matrix, scaled so the maximum maps to 255.
std::string to_pgm(std::span<const double> values, std::size_t rows, std::size_t cols);

/// Head-averaged attention of every layer and branch for one sample, written
/// as `<dir>/attn_<branch>_layer<l>.pgm`. Each image has 1 + N rows. Returns
/// the paths written.
std::vector<std::string> write_attention_maps(const model::Model& model, const data::Sample& sample,
                                              std::size_t h, std::size_t w, const std::string& dir);

void write_text_file(const std::string& path, std::string_view content);

}  // namespace tloc::eval
