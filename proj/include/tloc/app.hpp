#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <optional>
#include <string>

#include "tloc/model.hpp"

namespace tloc::app {

// Command implementations behind the `tloc` executable. Each reports failures
// by throwing; run() turns them into exit codes.

struct GenArgs {
  std::string config;
  std::string out_dir;
  std::optional<std::uint64_t> seed;  // overrides world.seed
};
/// Writes train/val/test/shifted_test datasets and manifest.txt.
void gen(const GenArgs& args, std::ostream& out);

struct PartitionArgs {
  std::string data;
  std::string config;
  std::string out;
};
void partition(const PartitionArgs& args, std::ostream& out);

struct TrainArgs {
  std::string data_dir;  // holds train.tlocds and val.tlocds
  std::string cells;
  std::string config;
  std::string out;  // checkpoint; metrics.csv goes next to it
  std::optional<model::Branches> branches;
  std::optional<bool> mff;
  std::optional<bool> scene_head;
  std::optional<std::uint64_t> seed;  // overrides train.seed
};
void train(const TrainArgs& args, std::ostream& out);

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string cells;
  std::string config;   // optional; supplies thresholds and crop policy
  std::string out_dir;  // optional; report.csv, summary.txt, correlation.csv
  std::string attn_out;
  bool tencrop = false;
  bool correlate = false;
};
void eval(const EvalArgs& args, std::ostream& out);

struct PredictArgs {
  std::string ckpt;
  std::string cells;
  std::string input;
  bool tencrop = false;
};
/// One line per sample: `lat lon cell_token scene_id w_rgb w_seg`.
void predict(const PredictArgs& args, std::ostream& out);

/// Describes a dataset, cell index or checkpoint file.
void inspect(const std::string& path, std::ostream& out);

/// 0 on success, 2 for configuration and validation errors, 3 for I/O errors,
/// 4 for numeric failures, 1 for anything else. The message goes to `err`.
int run(const std::function<void()>& command, std::ostream& err);

/// Keeps large freed buffers in the heap. Training allocates and frees them
/// every step; call once at startup.
void tune_allocator();

/// FNV-1a 64-bit digest of a file, as 16 hex digits.
std::string file_digest(const std::string& path);

}  // namespace tloc::app
