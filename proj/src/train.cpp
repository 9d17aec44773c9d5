#include "tloc/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "tloc/error.hpp"

namespace tloc::train {

using model::Model;
using model::ModelConfig;

void LossWeights::validate() const {
  if (alpha < 0.0 || beta < 0.0 || gamma < 0.0) throw std::invalid_argument("loss weights must be nonnegative");
  if (alpha + beta > 1.0) throw std::invalid_argument("loss weights: alpha + beta must not exceed 1");
}

Tensor total_loss(const Tensor& coarse, const Tensor& middle, const Tensor& fine, const Tensor& scene,
                  const Labels& labels, const LossWeights& w) {
  w.validate();
  Tensor loss = ad::scale(ad::cross_entropy(coarse, labels.coarse), 1.0 - w.alpha - w.beta);
  loss = ad::add(loss, ad::scale(ad::cross_entropy(middle, labels.middle), w.alpha));
  loss = ad::add(loss, ad::scale(ad::cross_entropy(fine, labels.fine), w.beta));
  if (scene.defined()) loss = ad::add(loss, ad::scale(ad::cross_entropy(scene, labels.scene), w.gamma));
  return loss;
}

Tensor total_loss(const model::ForwardResult& r, const Labels& labels, const LossWeights& w) {
  return total_loss(r.coarse, r.middle, r.fine, r.scene, labels, w);
}

void OptimConfig::validate() const {
  if (!(base_lr > 0.0)) throw std::invalid_argument("optim: base_lr must be positive");
  if (!(momentum > 0.0 && momentum < 1.0)) throw std::invalid_argument("optim: momentum must be in (0, 1)");
  if (!(beta2 > 0.0 && beta2 < 1.0)) throw std::invalid_argument("optim: beta2 must be in (0, 1)");
  if (!(eps > 0.0)) throw std::invalid_argument("optim: eps must be positive");
  if (weight_decay < 0.0) throw std::invalid_argument("optim: weight_decay must be nonnegative");
  if (epochs == 0 || batch_size == 0) throw std::invalid_argument("optim: epochs and batch_size must be positive");
  if (warmup_epochs >= epochs) throw std::invalid_argument("optim: warmup_epochs must be less than epochs");
}

double lr_at(std::size_t step, const OptimConfig& c, std::size_t steps_per_epoch) {
  const double warmup = static_cast<double>(c.warmup_epochs * steps_per_epoch);
  const double total = static_cast<double>(c.epochs * steps_per_epoch);
  const double s = std::min(static_cast<double>(step), total);
  if (s < warmup) return c.base_lr * s / warmup;
  const double progress = (s - warmup) / (total - warmup);
  return c.base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * progress));
}

void optimizer_step(std::span<const model::NamedTensor> params, OptimState& state, double lr, const OptimConfig& c) {
  if (state.m.size() != params.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& p : params) {
      state.m.emplace_back(p.tensor.numel(), 0.0);
      state.v.emplace_back(p.tensor.numel(), 0.0);
    }
    state.t = 0;
  }
  for (const auto& p : params) {
    const auto g = p.tensor.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!std::isfinite(g[i])) {
        throw NumericError("non-finite gradient in " + p.name + "[" + std::to_string(i) + "] = " + std::to_string(g[i]));
      }
    }
  }
  ++state.t;
  const double bc1 = 1.0 - std::pow(c.momentum, static_cast<double>(state.t));
  const double bc2 = 1.0 - std::pow(c.beta2, static_cast<double>(state.t));
  const double decay = 1.0 - lr * c.weight_decay;
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor t = params[k].tensor;
    auto w = t.mutable_data();
    const auto g = t.grad();
    auto& m = state.m[k];
    auto& v = state.v[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = c.momentum * m[i] + (1.0 - c.momentum) * g[i];
      v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + c.eps);
      w[i] *= decay;
    }
  }
}

// ---------------------------------------------------------------------------
// Augmentation

void AugmentConfig::validate() const {
  const auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
  if (!prob(flip_prob) || !prob(jitter_prob)) throw std::invalid_argument("augment: probabilities must be in [0, 1]");
  if (brightness < 0.0 || contrast < 0.0 || saturation < 0.0) throw std::invalid_argument("augment: jitter strengths must be nonnegative");
  if (hue < 0.0 || hue > 0.5) throw std::invalid_argument("augment: hue must be in [0, 0.5]");
}

namespace {

double gray(double r, double g, double b) { return 0.299 * r + 0.587 * g + 0.114 * b; }

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b});
  const double mn = std::min({r, g, b});
  const double d = mx - mn;
  v = mx;
  s = mx > 0.0 ? d / mx : 0.0;
  if (d <= 0.0) {
    h = 0.0;
  } else if (mx == r) {
    h = std::fmod((g - b) / d + 6.0, 6.0) / 6.0;
  } else if (mx == g) {
    h = ((b - r) / d + 2.0) / 6.0;
  } else {
    h = ((r - g) / d + 4.0) / 6.0;
  }
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double h6 = h * 6.0;
  const int sector = static_cast<int>(std::floor(h6)) % 6;
  const double f = h6 - std::floor(h6);
  const double p = v * (1.0 - s);
  const double q = v * (1.0 - s * f);
  const double t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v; g = t; b = p; break;
    case 1: r = q; g = v; b = p; break;
    case 2: r = p; g = v; b = t; break;
    case 3: r = p; g = q; b = v; break;
    case 4: r = t; g = p; b = v; break;
    default: r = v; g = p; b = q; break;
  }
}

double factor(Rng& rng, double strength) { return rng.uniform(std::max(0.0, 1.0 - strength), 1.0 + strength); }

}  // namespace

data::Sample hflip(const data::Sample& s, std::size_t h, std::size_t w) {
  data::Sample out = s;
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      out.seg[y * w + x] = s.seg[y * w + (w - 1 - x)];
      for (std::size_t c = 0; c < 3; ++c) out.rgb[(c * h + y) * w + x] = s.rgb[(c * h + y) * w + (w - 1 - x)];
    }
  }
  return out;
}

data::Sample augment(const data::Sample& sample, const AugmentConfig& cfg, Rng& rng) {
  const std::size_t hw = sample.seg.size();
  // Square images are the only shape the generator produces; infer H = W.
  const auto side = static_cast<std::size_t>(std::lround(std::sqrt(static_cast<double>(hw))));
  if (side * side != hw || sample.rgb.size() != 3 * hw) throw std::invalid_argument("augment: expected a square 3-channel sample");
  data::Sample out = rng.bernoulli(cfg.flip_prob) ? hflip(sample, side, side) : sample;
  if (!rng.bernoulli(cfg.jitter_prob)) return out;

  const double fb = factor(rng, cfg.brightness);
  const double fc = factor(rng, cfg.contrast);
  const double fs = factor(rng, cfg.saturation);
  const double fh = rng.uniform(-cfg.hue, cfg.hue);
  std::vector<double> px(out.rgb.begin(), out.rgb.end());
  auto at = [&](std::size_t c, std::size_t i) -> double& { return px[c * hw + i]; };
  for (double& v : px) v = std::clamp(v * fb, 0.0, 1.0);
  double mean_gray = 0.0;
  for (std::size_t i = 0; i < hw; ++i) mean_gray += gray(at(0, i), at(1, i), at(2, i));
  mean_gray /= static_cast<double>(hw);
  for (double& v : px) v = std::clamp(fc * v + (1.0 - fc) * mean_gray, 0.0, 1.0);
  for (std::size_t i = 0; i < hw; ++i) {
    const double g = gray(at(0, i), at(1, i), at(2, i));
    for (std::size_t c = 0; c < 3; ++c) at(c, i) = std::clamp(fs * at(c, i) + (1.0 - fs) * g, 0.0, 1.0);
  }
  if (fh != 0.0) {
    for (std::size_t i = 0; i < hw; ++i) {
      double h, s, v;
      rgb_to_hsv(at(0, i), at(1, i), at(2, i), h, s, v);
      h = std::fmod(h + fh + 1.0, 1.0);
      hsv_to_rgb(h, s, v, at(0, i), at(1, i), at(2, i));
    }
  }
  for (std::size_t i = 0; i < px.size(); ++i) out.rgb[i] = static_cast<float>(px[i]);
  return out;
}

// ---------------------------------------------------------------------------

LabeledSet label_dataset(const data::Dataset& dataset, const cells::CellIndex& index) {
  LabeledSet out;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    const auto c = cells::locate(index.coarse, s.coord);
    const auto m = cells::locate(index.middle, s.coord);
    const auto f = cells::locate(index.fine, s.coord);
    if (!c || !m || !f) {
      ++out.unassigned;
      continue;
    }
    out.indices.push_back(i);
    out.labels.coarse.push_back(static_cast<std::int32_t>(*c));
    out.labels.middle.push_back(static_cast<std::int32_t>(*m));
    out.labels.fine.push_back(static_cast<std::int32_t>(*f));
    out.labels.scene.push_back(static_cast<std::int32_t>(s.scene));
  }
  return out;
}

model::ImageBatch make_batch(std::span<const data::Sample> samples, std::size_t h, std::size_t w, bool with_seg) {
  model::ImageBatch b;
  b.batch = samples.size();
  b.rgb.reserve(b.batch * 3 * h * w);
  if (with_seg) b.seg.reserve(b.batch * h * w);
  for (const auto& s : samples) {
    b.rgb.insert(b.rgb.end(), s.rgb.begin(), s.rgb.end());
    if (with_seg) b.seg.insert(b.seg.end(), s.seg.begin(), s.seg.end());
  }
  return b;
}

model::ImageBatch make_batch(const data::Dataset& d, std::span<const std::size_t> indices, bool with_seg) {
  std::vector<data::Sample> picked;
  picked.reserve(indices.size());
  for (auto i : indices) picked.push_back(d.samples.at(i));
  return make_batch(picked, d.h, d.w, with_seg);
}

void write_metrics(std::ostream& out, const std::vector<MetricsRow>& rows) {
  out << "epoch,step,lr,train_loss,val_acc_fine,val_acc_scene\n";
  char buf[256];
  for (const auto& r : rows) {
    char scene[32] = "nan";
    if (r.val_acc_scene) std::snprintf(scene, sizeof scene, "%.6f", *r.val_acc_scene);
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.9g,%.9f,%.6f,%s\n", r.epoch, r.step, r.lr, r.train_loss, r.val_acc_fine,
                  scene);
    out << buf;
  }
}

ModelConfig resolve_model_config(ModelConfig base, const cells::CellIndex& index, const data::Dataset& train_set,
                                 bool auto_hidden) {
  base.image_h = train_set.h;
  base.image_w = train_set.w;
  base.seg_classes = train_set.n_seg_classes;
  base.k_coarse = index.coarse.size();
  base.k_middle = index.middle.size();
  base.k_fine = index.fine.size();
  base.k_scene = train_set.n_scene_classes;
  if (auto_hidden) {
    base.hidden_middle = 4 * base.k_middle;
    base.hidden_fine = 4 * base.k_fine;
  }
  if (!base.dual()) {
    base.mff = false;
    base.attentive_fusion = false;
  }
  return base;
}

namespace {

Labels take_labels(const Labels& all, std::span<const std::size_t> positions) {
  Labels out;
  for (auto p : positions) {
    out.coarse.push_back(all.coarse[p]);
    out.middle.push_back(all.middle[p]);
    out.fine.push_back(all.fine[p]);
    out.scene.push_back(all.scene[p]);
  }
  return out;
}

std::size_t argmax_row(std::span<const double> v, std::size_t row, std::size_t k) {
  const auto begin = v.begin() + static_cast<std::ptrdiff_t>(row * k);
  return static_cast<std::size_t>(std::max_element(begin, begin + static_cast<std::ptrdiff_t>(k)) - begin);
}

}  // namespace

SetAccuracy evaluate_accuracy(const Model& model, const data::Dataset& dataset, const LabeledSet& labeled,
                              std::size_t batch_size) {
  SetAccuracy acc;
  if (labeled.indices.empty()) return acc;
  ad::NoGradGuard no_grad;
  std::size_t fine_hits = 0, scene_hits = 0;
  const bool dual = model.config().dual();
  for (std::size_t start = 0; start < labeled.indices.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, labeled.indices.size() - start);
    const std::span<const std::size_t> idx(labeled.indices.data() + start, n);
    const auto r = model.forward(make_batch(dataset, idx, dual));
    for (std::size_t b = 0; b < n; ++b) {
      fine_hits += static_cast<std::int32_t>(argmax_row(r.fine.data(), b, r.fine.dim(1))) == labeled.labels.fine[start + b];
      if (r.scene.defined()) {
        scene_hits += static_cast<std::int32_t>(argmax_row(r.scene.data(), b, r.scene.dim(1))) == labeled.labels.scene[start + b];
      }
    }
  }
  const double n = static_cast<double>(labeled.indices.size());
  acc.fine = static_cast<double>(fine_hits) / n;
  if (model.config().scene_head) acc.scene = static_cast<double>(scene_hits) / n;
  return acc;
}

TrainResult train(const data::Dataset& train_set, const data::Dataset& val_set, const cells::CellIndex& index,
                  const TrainSettings& settings) {
  settings.optim.validate();
  settings.augment.validate();
  settings.loss.validate();
  if (train_set.samples.empty()) throw ConfigError("training set is empty");
  const ModelConfig& mc = settings.model;
  mc.validate();
  if (mc.k_coarse != index.coarse.size() || mc.k_middle != index.middle.size() || mc.k_fine != index.fine.size()) {
    throw ConfigError("model head sizes do not match the cell index");
  }
  if (mc.scene_head && mc.k_scene != train_set.n_scene_classes) throw ConfigError("scene head size does not match the dataset");
  if (mc.image_h != train_set.h || mc.image_w != train_set.w) throw ConfigError("model image size does not match the dataset");

  const LabeledSet train_labeled = label_dataset(train_set, index);
  const LabeledSet val_labeled = label_dataset(val_set, index);
  if (train_labeled.indices.empty()) throw ConfigError("no training sample falls in a retained cell at all levels");

  Model model(mc, settings.seed);
  Model best(mc, settings.seed);
  TrainResult result{std::move(best), {}, -1.0, 0};

  const auto& opt = settings.optim;
  const std::size_t n = train_labeled.indices.size();
  const std::size_t steps_per_epoch = (n + opt.batch_size - 1) / opt.batch_size;
  Rng shuffle_rng(settings.seed, "shuffle");
  Rng augment_rng(settings.seed, "augment");
  OptimState state;
  std::vector<std::size_t> order(n);
  std::size_t step = 0;
  const bool dual = mc.dual();

  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += opt.batch_size) {
      const std::size_t count = std::min(opt.batch_size, n - start);
      const std::span<const std::size_t> positions(order.data() + start, count);
      std::vector<data::Sample> samples;
      samples.reserve(count);
      for (auto p : positions) {
        const auto& s = train_set.samples[train_labeled.indices[p]];
        samples.push_back(settings.augment_enabled ? augment(s, settings.augment, augment_rng) : s);
      }
      const Labels labels = take_labels(train_labeled.labels, positions);
      const auto r = model.forward(make_batch(samples, train_set.h, train_set.w, dual));
      const Tensor loss = total_loss(r, labels, settings.loss);
      if (!std::isfinite(loss.item())) {
        throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + " step " + std::to_string(step));
      }
      for (const auto& p : model.parameters()) {
        Tensor t = p.tensor;
        t.zero_grad();
      }
      ad::backward(loss);
      lr = lr_at(step + 1, opt, steps_per_epoch);
      optimizer_step(model.parameters(), state, lr, opt);
      loss_sum += loss.item() * static_cast<double>(count);
      ++step;
    }

    const SetAccuracy val = evaluate_accuracy(model, val_set, val_labeled, 64);
    MetricsRow row{epoch, step, lr, loss_sum / static_cast<double>(n), val.fine, val.scene};
    result.log.push_back(row);
    if (val.fine > result.best_val_acc_fine) {
      result.best_val_acc_fine = val.fine;
      result.best_epoch = epoch;
      result.model.copy_parameters_from(model);
      if (!settings.checkpoint_path.empty()) model::save_checkpoint(settings.checkpoint_path, result.model);
    }
    if (settings.on_epoch) settings.on_epoch(row);
  }
  return result;
}

}  // namespace tloc::train
