#include "tloc/app.hpp"

#include <malloc.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <ostream>
#include <sstream>

#include "tloc/cells.hpp"
#include "tloc/config.hpp"
#include "tloc/error.hpp"
#include "tloc/eval.hpp"
#include "tloc/synth.hpp"
#include "tloc/train.hpp"

namespace fs = std::filesystem;

namespace tloc::app {

namespace {

std::string format(const char* fmt, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, fmt, args...);
  return buf;
}

void ensure_dir(const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir + ": " + ec.message());
}

void ensure_parent(const std::string& path) {
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty()) ensure_dir(parent.string());
}

cells::CellIndex load_cells(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read cell index " + path);
  try {
    return cells::read_index(f);
  } catch (const IoError& e) {
    throw IoError(path + ": " + e.what());
  }
}

}  // namespace

std::string file_digest(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  std::uint64_t h = 0xcbf29ce484222325ULL;
  char buf[1 << 16];
  while (f) {
    f.read(buf, sizeof buf);
    for (std::streamsize i = 0; i < f.gcount(); ++i) {
      h ^= static_cast<unsigned char>(buf[i]);
      h *= 0x100000001b3ULL;
    }
  }
  return format("%016llx", static_cast<unsigned long long>(h));
}

// ---------------------------------------------------------------------------

void gen(const GenArgs& args, std::ostream& out) {
  config::RunConfig cfg = config::load(args.config);
  if (args.seed) cfg.world.seed = *args.seed;
  ensure_dir(args.out_dir);
  const data::World world = data::generate_world(cfg.world);
  const data::Dataset shifted = data::shift_appearance(world.test, cfg.shift_strength);

  const std::pair<const char*, const data::Dataset*> files[] = {
      {"train.tlocds", &world.train}, {"val.tlocds", &world.val}, {"test.tlocds", &world.test},
      {"shifted_test.tlocds", &shifted}};
  std::string manifest = "TLOC-MANIFEST v1\n";
  manifest += format("world.seed=%llu\n", static_cast<unsigned long long>(cfg.world.seed));
  manifest += format("locations=%zu clusters=%zu image=%zux%zu shift_strength=%.6g\n", cfg.world.n_locations,
                     cfg.world.n_clusters, cfg.world.image_h, cfg.world.image_w, cfg.shift_strength);
  for (const auto& [name, ds] : files) {
    const std::string path = (fs::path(args.out_dir) / name).string();
    data::write_dataset(path, *ds);
    manifest += format("%s\tsamples=%zu\tbytes=%ju\tfnv1a64=%s\n", name, ds->size(),
                       static_cast<std::uintmax_t>(fs::file_size(path)), file_digest(path).c_str());
    out << "wrote " << path << " (" << ds->size() << " samples)\n";
  }
  for (std::size_t i = 0; i < world.locations.size(); ++i) {
    const auto& loc = world.locations[i];
    manifest += format("location %zu\tcluster=%zu\tlat=%.6f\tlon=%.6f\tscene=%u\n", i, loc.cluster, loc.center.lat,
                       loc.center.lon, static_cast<unsigned>(loc.scene));
  }
  const std::string mpath = (fs::path(args.out_dir) / "manifest.txt").string();
  eval::write_text_file(mpath, manifest);
  out << "wrote " << mpath << "\n";
}

void partition(const PartitionArgs& args, std::ostream& out) {
  const config::RunConfig cfg = config::load(args.config);
  const data::Dataset ds = data::read_dataset(args.data);
  if (ds.samples.empty()) throw ConfigError("no retainable cells: dataset " + args.data + " is empty");
  const auto coords = ds.coords();
  cells::CellIndex index;
  try {
    index = cells::build_index(coords, cfg.cells);
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (cells::Level level : cells::kLevels) {
    const auto& p = index.at(level);
    if (p.cells.empty()) {
      throw ConfigError(format("no retainable cells at level %s (min_images=%lld, %zu points)",
                               std::string(cells::level_name(level)).c_str(),
                               static_cast<long long>(cfg.cells.min_images), coords.size()));
    }
  }
  ensure_parent(args.out);
  eval::write_text_file(args.out, cells::serialize_index(index));
  for (cells::Level level : cells::kLevels) {
    const auto& p = index.at(level);
    out << format("%-6s cells=%zu dropped=%lld oversize=%zu\n", std::string(cells::level_name(level)).c_str(),
                  p.size(), static_cast<long long>(p.dropped), p.oversize.size());
  }
  out << "wrote " << args.out << "\n";
}

void train(const TrainArgs& args, std::ostream& out) {
  const config::RunConfig cfg = config::load(args.config);
  const auto dir = fs::path(args.data_dir);
  const data::Dataset train_set = data::read_dataset((dir / "train.tlocds").string());
  const data::Dataset val_set = data::read_dataset((dir / "val.tlocds").string());
  const cells::CellIndex index = load_cells(args.cells);

  model::ModelConfig base = cfg.model;
  if (args.branches) base.branches = *args.branches;
  if (args.mff) base.mff = *args.mff;
  if (args.scene_head) base.scene_head = *args.scene_head;
  if (!base.dual() && args.mff.value_or(false)) throw ConfigError("--mff on requires --branches dual");
  if (!base.dual()) base.attentive_fusion = false;

  train::TrainSettings settings;
  settings.model = train::resolve_model_config(base, index, train_set, cfg.auto_hidden);
  settings.optim = cfg.optim;
  settings.augment = cfg.augment;
  settings.augment_enabled = cfg.augment_enabled;
  settings.loss = cfg.loss;
  settings.seed = args.seed.value_or(cfg.train_seed);
  settings.checkpoint_path = args.out;
  try {
    settings.model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }

  ensure_parent(args.out);
  const std::string metrics_path = (fs::path(args.out).parent_path() / "metrics.csv").string();
  std::vector<train::MetricsRow> log;
  const auto flush_metrics = [&] {
    std::ostringstream csv;
    train::write_metrics(csv, log);
    eval::write_text_file(metrics_path, csv.str());
  };
  settings.on_epoch = [&](const train::MetricsRow& row) {
    log.push_back(row);
    flush_metrics();
    out << format("epoch %zu lr %.3g loss %.4f val_fine %.4f\n", row.epoch, row.lr, row.train_loss,
                  row.val_acc_fine);
    out.flush();
  };
  out << format("model %s mff=%s scene=%s params=%zu seed=%llu\n",
                std::string(model::branches_name(settings.model.branches)).c_str(), settings.model.mff ? "on" : "off",
                settings.model.scene_head ? "on" : "off", model::Model(settings.model, 0).parameter_count(),
                static_cast<unsigned long long>(settings.seed));
  const train::TrainResult result = train::train(train_set, val_set, index, settings);
  out << format("best epoch %zu val_fine %.4f\n", result.best_epoch, result.best_val_acc_fine);
  out << "wrote " << args.out << " and " << metrics_path << "\n";
}

void eval(const EvalArgs& args, std::ostream& out) {
  std::optional<config::RunConfig> cfg;
  if (!args.config.empty()) cfg = config::load(args.config);
  const model::Model model = model::load_checkpoint(args.ckpt);
  const data::Dataset ds = data::read_dataset(args.data);
  const cells::CellIndex index = load_cells(args.cells);
  eval::check_compatible(model.config(), index);
  if (ds.samples.empty()) throw ConfigError("evaluation set " + args.data + " is empty");

  const bool tencrop = args.tencrop || (cfg && cfg->tencrop);
  const std::size_t batch = cfg ? cfg->eval_batch : 64;
  const auto policy = tencrop ? eval::CropPolicy::kTenCrop : eval::CropPolicy::kSingle;
  const eval::Inference inf = eval::infer(model, ds, policy, batch);
  const auto records = eval::to_records(inf, ds, index);
  const std::vector<double> thresholds =
      cfg && !cfg->thresholds_km.empty() ? cfg->thresholds_km : eval::default_thresholds(index);
  eval::AccuracyReport report = eval::make_report(records, thresholds);
  report.fine_accuracy = eval::fine_cell_accuracy(records, index);
  out << "crop policy " << (tencrop ? "tencrop" : "single") << "\n" << eval::report_summary(report);

  if (!args.out_dir.empty()) {
    ensure_dir(args.out_dir);
    eval::emit_report(report, args.out_dir);
    out << "wrote " << (fs::path(args.out_dir) / "report.csv").string() << "\n";
  }
  if (args.correlate) {
    eval::CorrelationStudy st = eval::correlation_series(inf, ds, index);
    try {
      st.r = eval::pearson(st.top_n_accuracy, st.geo_accuracy);
    } catch (const std::invalid_argument& e) {
      out << "pearson undefined: " << e.what() << "\n";
    }
    const std::string csv = eval::correlation_csv(st);
    out << csv;
    if (!args.out_dir.empty()) eval::write_text_file((fs::path(args.out_dir) / "correlation.csv").string(), csv);
  }
  if (!args.attn_out.empty()) {
    ensure_dir(args.attn_out);
    const auto paths = eval::write_attention_maps(model, ds.samples.front(), ds.h, ds.w, args.attn_out);
    out << "wrote " << paths.size() << " attention maps to " << args.attn_out << "\n";
  }
}

void predict(const PredictArgs& args, std::ostream& out) {
  const model::Model model = model::load_checkpoint(args.ckpt);
  const cells::CellIndex index = load_cells(args.cells);
  eval::check_compatible(model.config(), index);
  const data::Dataset ds = data::read_dataset(args.input);
  const auto policy = args.tencrop ? eval::CropPolicy::kTenCrop : eval::CropPolicy::kSingle;
  const eval::Inference inf = eval::infer(model, ds, policy);
  const auto records = eval::to_records(inf, ds, index);
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& rec = records[i];
    // Printed weights are rounded together so they always sum to 1.
    const auto micro = static_cast<long long>(std::llround(inf.weights[2 * i] * 1e6));
    const long long scene = rec.scene_pred ? static_cast<long long>(*rec.scene_pred) : -1;
    out << format("%.6f %.6f %s %lld %lld.%06lld %lld.%06lld\n", rec.pred_gps.lat, rec.pred_gps.lon,
                  index.fine.cells[rec.pred_cell].token.str().c_str(), scene, micro / 1000000, micro % 1000000,
                  (1000000 - micro) / 1000000, (1000000 - micro) % 1000000);
  }
}

void inspect(const std::string& path, std::ostream& out) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot read " + path);
  char magic[8] = {};
  f.read(magic, sizeof magic);
  const std::string head(magic, static_cast<std::size_t>(f.gcount()));
  f.clear();
  f.seekg(0);
  if (head == std::string("TLOCDS1\0", 8)) {
    const data::Dataset ds = data::read_dataset(f);
    out << format("dataset %s: %zu samples, %ux%u, %u segmentation classes, %u scene classes\n", path.c_str(),
                  ds.size(), ds.h, ds.w, ds.n_seg_classes, ds.n_scene_classes);
    std::map<unsigned, std::size_t> scenes;
    for (const auto& s : ds.samples) ++scenes[s.scene];
    for (const auto& [scene, n] : scenes) out << format("  scene %u: %zu\n", scene, n);
  } else if (head == std::string("TLOCKP1\0", 8)) {
    const model::Model m = model::load_checkpoint(f);
    out << format("checkpoint %s: %zu parameters in %zu tensors\n", path.c_str(), m.parameter_count(),
                  m.parameters().size());
    out << m.config().to_text();
  } else if (head.starts_with("TLOC-CEL")) {
    const cells::CellIndex index = cells::read_index(f);
    out << "cell index " << path << "\n";
    for (cells::Level level : cells::kLevels) {
      const auto& p = index.at(level);
      std::int64_t total = 0;
      for (const auto& c : p.cells) total += c.train_count;
      out << format("  %-6s %zu cells, %lld training points\n", std::string(cells::level_name(level)).c_str(),
                    p.size(), static_cast<long long>(total));
    }
  } else {
    throw IoError(path + ": unrecognized file type");
  }
}

void tune_allocator() {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
}

int run(const std::function<void()>& command, std::ostream& err) {
  try {
    command();
    return 0;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::invalid_argument& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    err << "I/O error: " << e.what() << "\n";
    return 3;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace tloc::app
