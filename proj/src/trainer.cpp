#include "deblur/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace deblur {

namespace fs = std::filesystem;

ScaleLoss LossBreakdown::summed() const {
  ScaleLoss s;
  for (const auto& l : per_scale) {
    s.attention += l.attention;
    s.fg += l.fg;
    s.bg += l.bg;
    s.primary += l.primary;
  }
  return s;
}

// ---------------------------------------------------------------------------
// config

void TrainConfig::validate() const {
  if (!(learning_rate > 0)) throw ConfigError("learning_rate must be positive");
  if (batch_size <= 0) throw ConfigError("batch_size must be positive");
  if (crop <= 0) throw ConfigError("crop must be positive");
  if (pretrain_iters < 0) throw ConfigError("pretrain_iters must be non-negative");
  if (epochs <= 0 && max_steps <= 0) throw ConfigError("epochs must be positive");
  if (max_steps < 0) throw ConfigError("max_steps must be non-negative");
  for (float w : {weights.attention, weights.fg, weights.bg, weights.primary})
    if (w < 0) throw ConfigError("loss weights must be non-negative");
  if (fg_batch_fraction < 0.0 || fg_batch_fraction > 1.0) throw ConfigError("fg_batch_fraction must lie in [0,1]");
  if (checkpoint_every < 0) throw ConfigError("checkpoint_every must be non-negative");
}

std::int64_t TrainConfig::total_steps(std::size_t n_samples) const {
  if (max_steps > 0) return max_steps;
  const std::int64_t per_epoch =
      std::max<std::int64_t>(1, (static_cast<std::int64_t>(n_samples) + batch_size - 1) / batch_size);
  return per_epoch * epochs;
}

std::vector<std::string> train_config_keys() {
  return {"learning_rate",    "batch_size",        "crop",          "pretrain_iters",
          "epochs",           "max_steps",         "weight_attention", "weight_fg",
          "weight_bg",        "weight_primary",    "fg_batch_fraction", "seed",
          "checkpoint_every", "freeze_attention",  "mask_normalization"};
}

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <typename T>
T parse_number(const std::string& key, const std::string& value, int line) {
  std::istringstream in(value);
  T v{};
  in >> v;
  if (!in || !in.eof())
    throw ConfigError("line " + std::to_string(line) + ": invalid value '" + value + "' for " + key);
  return v;
}

bool parse_bool(const std::string& key, const std::string& value, int line) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("line " + std::to_string(line) + ": " + key + " must be true or false");
}

}  // namespace

TrainConfig parse_train_config(std::istream& in) {
  TrainConfig c;
  std::map<std::string, int> seen;
  std::string raw;
  int line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const std::string text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(line) + ": expected key=value");
    const std::string key = trim(text.substr(0, eq));
    const std::string value = trim(text.substr(eq + 1));
    if (seen.count(key)) throw ConfigError("line " + std::to_string(line) + ": duplicate key " + key);
    seen[key] = line;

    if (key == "learning_rate") c.learning_rate = parse_number<double>(key, value, line);
    else if (key == "batch_size") c.batch_size = parse_number<int>(key, value, line);
    else if (key == "crop") c.crop = parse_number<int>(key, value, line);
    else if (key == "pretrain_iters") c.pretrain_iters = parse_number<int>(key, value, line);
    else if (key == "epochs") c.epochs = parse_number<int>(key, value, line);
    else if (key == "max_steps") c.max_steps = parse_number<int>(key, value, line);
    else if (key == "weight_attention") c.weights.attention = parse_number<float>(key, value, line);
    else if (key == "weight_fg") c.weights.fg = parse_number<float>(key, value, line);
    else if (key == "weight_bg") c.weights.bg = parse_number<float>(key, value, line);
    else if (key == "weight_primary") c.weights.primary = parse_number<float>(key, value, line);
    else if (key == "fg_batch_fraction") c.fg_batch_fraction = parse_number<double>(key, value, line);
    else if (key == "seed") c.seed = parse_number<std::uint64_t>(key, value, line);
    else if (key == "checkpoint_every") c.checkpoint_every = parse_number<int>(key, value, line);
    else if (key == "freeze_attention") c.freeze_attention = parse_bool(key, value, line);
    else if (key == "mask_normalization") {
      if (value == "all") c.mask_normalization = MaskNormalization::kAllPixels;
      else if (value == "masked") c.mask_normalization = MaskNormalization::kMaskedPixels;
      else throw ConfigError("line " + std::to_string(line) + ": mask_normalization must be 'all' or 'masked'");
    } else {
      throw ConfigError("line " + std::to_string(line) + ": unknown key '" + key + "'");
    }
  }
  c.validate();
  return c;
}

TrainConfig load_train_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config: " + path.string());
  try {
    return parse_train_config(in);
  } catch (const ConfigError& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// losses

LossTerms total_loss(const std::vector<ScaleOutput>& outputs, std::span<const ImagePlane> sharp_pyramid,
                     std::span<const BinaryMask> mask_pyramid, const LossWeights& weights, MaskNormalization norm) {
  if (outputs.empty()) throw std::invalid_argument("total_loss: no outputs");
  if (outputs.size() != sharp_pyramid.size() || outputs.size() != mask_pyramid.size())
    throw std::invalid_argument("total_loss: pyramid depth does not match the number of scales");

  LossTerms terms;
  std::vector<Var> scalars;
  std::vector<float> w;
  for (std::size_t s = 0; s < outputs.size(); ++s) {
    const ScaleOutput& o = outputs[s];
    ScaleLoss sl;
    if (o.attention) {
      Var l = ops::attention_loss(o.attention, mask_pyramid[s]);
      sl.attention = l->value[0];
      scalars.push_back(l);
      w.push_back(weights.attention);
    }
    if (o.fg) {
      Var l = ops::fg_loss(o.fg, sharp_pyramid[s], mask_pyramid[s], norm);
      sl.fg = l->value[0];
      scalars.push_back(l);
      w.push_back(weights.fg);
    }
    if (o.bg) {
      Var l = ops::bg_loss(o.bg, sharp_pyramid[s], mask_pyramid[s], norm);
      sl.bg = l->value[0];
      scalars.push_back(l);
      w.push_back(weights.bg);
    }
    Var l = ops::primary_loss(o.sharp, sharp_pyramid[s]);
    sl.primary = l->value[0];
    scalars.push_back(l);
    w.push_back(weights.primary);
    terms.breakdown.per_scale.push_back(sl);
  }
  terms.total = ops::weighted_sum(scalars, w);
  double total = 0.0;
  for (std::size_t i = 0; i < scalars.size(); ++i) total += static_cast<double>(w[i]) * scalars[i]->value[0];
  terms.breakdown.total = total;
  return terms;
}

// ---------------------------------------------------------------------------
// sampling

BatchSampler::BatchSampler(std::span<const AnnotatedSample> samples, int batch_size, int crop, double fg_fraction,
                           std::uint64_t seed)
    : samples_(samples), batch_size_(batch_size), crop_(crop), rng_(seed) {
  if (samples.empty()) throw std::invalid_argument("empty dataset");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].blurred.width() < crop || samples[i].blurred.height() < crop)
      throw std::invalid_argument("sample " + samples[i].source_id + " is smaller than the crop size " +
                                  std::to_string(crop));
    if (samples[i].has_foreground()) with_fg_.push_back(i);
  }
  n_fg_ = static_cast<int>(std::lround(fg_fraction * batch_size));
}

std::vector<Patch> BatchSampler::next() {
  std::vector<Patch> batch;
  batch.reserve(batch_size_);
  std::uniform_int_distribution<std::size_t> any(0, samples_.size() - 1);
  for (int i = 0; i < batch_size_; ++i) {
    if (i < n_fg_ && !with_fg_.empty()) {
      std::uniform_int_distribution<std::size_t> pick(0, with_fg_.size() - 1);
      batch.push_back(sample_patch(samples_[with_fg_[pick(rng_)]], crop_, rng_, true));
    } else {
      batch.push_back(sample_patch(samples_[any(rng_)], crop_, rng_, false));
    }
  }
  return batch;
}

std::string BatchSampler::rng_state() const {
  std::ostringstream out;
  out << rng_;
  return out.str();
}

void BatchSampler::set_rng_state(const std::string& state) {
  std::istringstream in(state);
  in >> rng_;
  if (!in) throw std::invalid_argument("malformed RNG state");
}

std::string format_step_log(const StepRecord& r) {
  const ScaleLoss s = r.loss.summed();
  char buf[256];
  std::snprintf(buf, sizeof buf, "step=%lld attention=%.6e fg=%.6e bg=%.6e primary=%.6e total=%.6e",
                static_cast<long long>(r.step), s.attention, s.fg, s.bg, s.primary, r.loss.total);
  return buf;
}

// ---------------------------------------------------------------------------
// training

namespace {

void scale_grads(ParameterSet& params, float factor) {
  for (auto& p : params.all())
    for (auto& g : p.grad) g *= factor;
}

void accumulate(LossBreakdown& acc, const LossBreakdown& b, double weight) {
  if (acc.per_scale.empty()) acc.per_scale.resize(b.per_scale.size());
  for (std::size_t s = 0; s < b.per_scale.size(); ++s) {
    acc.per_scale[s].attention += weight * b.per_scale[s].attention;
    acc.per_scale[s].fg += weight * b.per_scale[s].fg;
    acc.per_scale[s].bg += weight * b.per_scale[s].bg;
    acc.per_scale[s].primary += weight * b.per_scale[s].primary;
  }
  acc.total += weight * b.total;
}

fs::path checkpoint_path(const fs::path& dir, const std::string& stem, std::int64_t iteration) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%s_%08lld.ckpt", stem.c_str(), static_cast<long long>(iteration));
  return dir / buf;
}

void check_crop(const Model& model, int crop) {
  const int divisor = model.config.input_divisor();
  if (crop % divisor != 0)
    throw ConfigError("crop " + std::to_string(crop) + " must be a multiple of " + std::to_string(divisor) +
                      " for this network");
}

}  // namespace

PretrainResult pretrain_attention(Model& model, std::span<const AnnotatedSample> dataset, const TrainConfig& config,
                                  const TrainOptions& options) {
  config.validate();
  if (!model.config.use_attention) throw std::invalid_argument("model has no attention subnet");
  if (dataset.empty()) throw std::invalid_argument("pretrain_attention: empty dataset");
  if (config.crop % kAttentionDivisor != 0)
    throw ConfigError("crop must be a multiple of " + std::to_string(kAttentionDivisor));

  PretrainResult result;
  BatchSampler sampler(dataset, config.batch_size, config.crop, config.fg_batch_fraction, config.seed);
  Adam adam(AdamConfig{config.learning_rate});
  ParameterSet& params = model.params;
  const std::vector<bool> was_frozen = [&] {
    std::vector<bool> f;
    for (const auto& p : params.all()) f.push_back(p.frozen);
    return f;
  }();
  for (auto& p : params.all()) p.frozen = p.name.rfind(kAttentionPrefix, 0) != 0;

  for (int it = 1; it <= config.pretrain_iters; ++it) {
    params.zero_grad();
    const auto batch = sampler.next();
    double loss = 0.0;
    for (const auto& patch : batch) {
      Tape tape;
      Var a = attention_forward(params, tape.constant(patch.blurred));
      Var l = ops::attention_loss(a, patch.mask);
      loss += l->value[0];
      tape.backward(l);
    }
    scale_grads(params, 1.0f / static_cast<float>(batch.size()));
    adam.step(params);
    loss /= static_cast<double>(batch.size());
    result.loss_history.push_back(loss);
    if (options.log) {
      char buf[96];
      std::snprintf(buf, sizeof buf, "step=%d attention=%.6e total=%.6e\n", it, loss, loss);
      *options.log << buf;
    }
    if (options.checkpoint_dir && config.checkpoint_every > 0 && it % config.checkpoint_every == 0)
      save_checkpoint(checkpoint_path(*options.checkpoint_dir, "attention", it), model, {it, loss, sampler.rng_state()});
  }

  for (std::size_t i = 0; i < params.size(); ++i) params.all()[i].frozen = was_frozen[i];
  result.attention = params.subset(kAttentionPrefix);
  return result;
}

TrainResult train(Model& model, std::span<const AnnotatedSample> dataset, const TrainConfig& config,
                  const TrainOptions& options) {
  config.validate();
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  check_crop(model, config.crop);
  if (model.config.use_attention && !options.attention_pretrained && !options.joint_from_scratch && !options.resume)
    throw ConfigError("attention subnet is not pretrained; pretrain it first or request joint training from scratch");

  BatchSampler sampler(dataset, config.batch_size, config.crop, config.fg_batch_fraction, config.seed);
  Adam adam(AdamConfig{config.learning_rate});
  std::int64_t start = 0;
  if (options.resume) {
    const LoadedCheckpoint& ck = *options.resume;
    if (!(ck.model.config == model.config))
      throw CheckpointError("resume checkpoint config " + config_to_json(ck.model.config) + " differs from " +
                            config_to_json(model.config));
    model.params.assign_from(ck.model.params);
    if (ck.optimizer) adam.set_state(*ck.optimizer);
    if (!ck.meta.rng_state.empty()) sampler.set_rng_state(ck.meta.rng_state);
    start = ck.meta.iteration;
  }
  ParameterSet& params = model.params;
  if (model.config.use_attention) params.set_frozen(kAttentionPrefix, config.freeze_attention);

  const int scales = model.config.scales;
  const std::int64_t steps = config.total_steps(dataset.size());
  TrainResult result;
  if (options.checkpoint_dir) fs::create_directories(*options.checkpoint_dir);

  for (std::int64_t step = start + 1; step <= steps; ++step) {
    const std::string rng_before = sampler.rng_state();
    const auto batch = sampler.next();
    params.zero_grad();
    StepRecord record{step, {}};
    const double inv = 1.0 / static_cast<double>(batch.size());
    for (const auto& patch : batch) {
      Tape tape;
      const auto outs = forward_full(params, model.config, tape, patch.blurred);
      const auto sharp = build_pyramid(patch.sharp, scales);
      const auto masks = build_mask_pyramid(patch.mask, scales);
      LossTerms terms = total_loss(outs, sharp, masks, config.weights, config.mask_normalization);
      tape.backward(terms.total);
      accumulate(record.loss, terms.breakdown, inv);
    }
    scale_grads(params, static_cast<float>(inv));

    // Periodic checkpoints hold the pre-update state and the sampler state
    // from before this batch, so resuming replays this step exactly.
    if (options.checkpoint_dir && config.checkpoint_every > 0 && step % config.checkpoint_every == 0) {
      const auto path = checkpoint_path(*options.checkpoint_dir, "train", step - 1);
      const OptimizerState* st = adam.state().m.empty() ? nullptr : &adam.state();
      OptimizerState fresh;
      if (!st) {
        for (const auto& p : params.all()) {
          fresh.m.emplace_back(p.numel(), 0.0f);
          fresh.v.emplace_back(p.numel(), 0.0f);
        }
        st = &fresh;
      }
      save_checkpoint(path, model, {step - 1, record.loss.total, rng_before}, st);
      result.checkpoints.push_back(path);
      if (options.log && !options.validation.empty()) {
        const auto rows = aggregate_rows(evaluate(model, options.validation));
        for (const auto& r : rows)
          if (r.report.region == Region::kGlobal)
            *options.log << "validation step=" << step - 1 << " psnr=" << format_psnr(r.report.psnr_db) << "\n";
      }
    }

    adam.step(params);
    if (options.log) *options.log << format_step_log(record) << "\n";
    if (options.on_step) options.on_step(record);
    result.history.push_back(std::move(record));
  }

  if (options.checkpoint_dir) {
    const auto path = *options.checkpoint_dir / "final.ckpt";
    std::optional<double> last;
    save_checkpoint(path, model, {std::max(steps, start), last, sampler.rng_state()},
                    adam.state().m.empty() ? nullptr : &adam.state());
    result.checkpoints.push_back(path);
  }
  return result;
}

// ---------------------------------------------------------------------------
// evaluation

AnnotatedSample crop_sample(const AnnotatedSample& sample, int divisor) {
  AnnotatedSample out;
  out.source_id = sample.source_id;
  out.blurred = crop_to_divisor(sample.blurred, divisor);
  out.sharp = crop_to_divisor(sample.sharp, divisor);
  const int w = out.blurred.width();
  const int h = out.blurred.height();
  for (const auto& b : sample.boxes) {
    const BoundingBox c = b.clipped(w, h);
    if (c.area() > 0) out.boxes.push_back(c);
  }
  out.mask = rasterize_mask(out.boxes, w, h);
  return out;
}

std::vector<MetricRow> evaluate_predictions(std::span<const AnnotatedSample> dataset,
                                            std::span<const ImagePlane> predictions, SsimMode mode) {
  if (dataset.size() != predictions.size())
    throw std::invalid_argument("evaluate: " + std::to_string(predictions.size()) + " predictions for " +
                                std::to_string(dataset.size()) + " samples");
  std::vector<MetricRow> rows;
  for (std::size_t i = 0; i < dataset.size(); ++i) {
    const AnnotatedSample& s = dataset[i];
    const ImagePlane pred = clip01(predictions[i]);
    const RegionReports r = region_metrics(pred, s.sharp, s.mask, mode);
    rows.push_back({s.source_id, r.global});
    if (s.has_foreground()) {
      if (r.fg) rows.push_back({s.source_id, *r.fg});
      if (r.bg) rows.push_back({s.source_id, *r.bg});
    }
  }
  const auto agg = aggregate_rows(rows);
  rows.insert(rows.end(), agg.begin(), agg.end());
  return rows;
}

std::vector<MetricRow> evaluate(const Model& model, std::span<const AnnotatedSample> dataset, SsimMode mode) {
  const int divisor = model.config.input_divisor();
  std::vector<AnnotatedSample> cropped;
  std::vector<ImagePlane> predictions;
  cropped.reserve(dataset.size());
  for (const auto& s : dataset) {
    cropped.push_back(crop_sample(s, divisor));
    predictions.push_back(infer(model, cropped.back().blurred).back().sharp);
  }
  return evaluate_predictions(cropped, predictions, mode);
}

}  // namespace deblur
