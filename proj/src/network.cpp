#include "deblur/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <tuple>

#include <nlohmann/json.hpp>

#include "deblur/data.hpp"

namespace deblur {

using nlohmann::json;

const char* branch_mode_name(BranchMode mode) {
  switch (mode) {
    case BranchMode::kAll:
      return "all";
    case BranchMode::kFgOnly:
      return "fg";
    case BranchMode::kBgOnly:
      return "bg";
    case BranchMode::kPrimaryOnly:
      return "primary";
  }
  return "?";
}

BranchMode parse_branch_mode(const std::string& name) {
  for (BranchMode m : {BranchMode::kAll, BranchMode::kFgOnly, BranchMode::kBgOnly, BranchMode::kPrimaryOnly})
    if (name == branch_mode_name(m)) return m;
  throw std::invalid_argument("unknown branch mode '" + name + "' (expected all, fg, bg or primary)");
}

int NetworkConfig::input_divisor() const {
  int per_scale = std::max(4, reduction());
  if (use_attention) per_scale = std::max(per_scale, kAttentionDivisor);
  return (1 << (scales - 1)) * per_scale;
}

void NetworkConfig::validate() const {
  if (base_channels <= 0) throw std::invalid_argument("base_channels must be positive");
  if (n_residual_units <= 0 || n_residual_units % kUnitsPerLevel != 0)
    throw std::invalid_argument("n_residual_units must be a positive multiple of 3");
  if (decoder_blocks != levels())
    throw std::invalid_argument("decoder_blocks (" + std::to_string(decoder_blocks) +
                                ") must equal the encoder level count (" + std::to_string(levels()) + ")");
  if (scales < 1) throw std::invalid_argument("scales must be >= 1");
  if (image_channels <= 0) throw std::invalid_argument("image_channels must be positive");
  if (input_channels != 2 * image_channels)
    throw std::invalid_argument("input_channels must be twice image_channels (image + previous estimate)");
  if (attention.image_channels != image_channels)
    throw std::invalid_argument("attention image_channels must match image_channels");
  attention.validate();
}

// ---------------------------------------------------------------------------
// parameters

namespace {

constexpr float kReluGain = 1.41421356f;
// Residual branches start small so a stack of identity skips stays well scaled.
constexpr float kResidualGain = 0.5f;

void add_conv(ParameterSet& p, const std::string& name, int in, int out, int k, float gain) {
  p.add(name + ".weight", {out, in, k, k}, gain / std::sqrt(static_cast<float>(in * k * k)));
  p.add(name + ".bias", {out});
}

void add_tconv(ParameterSet& p, const std::string& name, int in, int out, float gain) {
  p.add(name + ".weight", {in, out, 4, 4}, gain / std::sqrt(static_cast<float>(in * 4)));
  p.add(name + ".bias", {out});
}

void add_residual(ParameterSet& p, const std::string& name, int c) {
  add_conv(p, name + ".conv1", c, c, 3, kReluGain);
  add_conv(p, name + ".conv2", c, c, 3, kResidualGain);
}

std::string block_name(const std::string& branch, int l) { return branch + ".block" + std::to_string(l); }

void add_decoder(ParameterSet& p, const NetworkConfig& cfg, const std::string& branch, int n_aux) {
  const int levels = cfg.levels();
  for (int l = 1; l <= levels; ++l) {
    const int lv = levels - l;
    const int c = cfg.channels_at(lv);
    const std::string b = block_name(branch, l);
    if (n_aux > 0) add_conv(p, b + ".fuse", c * (n_aux + 1), c, 1, 1.0f);
    for (int u = 0; u < NetworkConfig::kUnitsPerLevel; ++u) add_residual(p, b + ".res" + std::to_string(u), c);
    if (lv > 0)
      add_tconv(p, b + ".up", c, cfg.channels_at(lv - 1), kReluGain);
    else
      add_conv(p, b + ".out", c, cfg.image_channels, 5, 1.0f);
  }
}

void set_bilinear(Parameter& w) {
  static constexpr float taps[4] = {0.25f, 0.75f, 0.75f, 0.25f};
  std::fill(w.value.begin(), w.value.end(), 0.0f);
  const int in = w.dims[0];
  const int out = w.dims[1];
  for (int c = 0; c < std::min(in, out); ++c)
    for (int ky = 0; ky < 4; ++ky)
      for (int kx = 0; kx < 4; ++kx)
        w.value[((static_cast<std::size_t>(c) * out + c) * 4 + ky) * 4 + kx] = taps[ky] * taps[kx];
}

constexpr const char* kUpsample = "upsample";

}  // namespace

void initialize_parameters(ParameterSet& params, std::uint64_t seed, const std::string& prefix) {
  std::mt19937_64 rng(seed);
  for (auto& p : params.all()) {
    if (p.name.rfind(prefix, 0) != 0) continue;
    if (p.name == std::string(kUpsample) + ".weight") {
      set_bilinear(p);
      continue;
    }
    if (p.init_std <= 0.0f) {
      std::fill(p.value.begin(), p.value.end(), 0.0f);
      continue;
    }
    std::normal_distribution<float> dist(0.0f, p.init_std);
    for (auto& v : p.value) v = dist(rng);
  }
}

Model make_model(const NetworkConfig& config, std::uint64_t seed, InitMode mode) {
  config.validate();
  Model m{config, {}};
  ParameterSet& p = m.params;
  add_tconv(p, kUpsample, config.image_channels, config.image_channels, 1.0f);
  if (config.use_attention) add_attention_parameters(p, config.attention);

  add_conv(p, "encoder.in", config.input_channels, config.channels_at(0), 5, kReluGain);
  for (int lv = 0; lv < config.levels(); ++lv) {
    const std::string level = "encoder.level" + std::to_string(lv);
    if (lv > 0) add_conv(p, level + ".reduce", config.channels_at(lv - 1), config.channels_at(lv), 5, kReluGain);
    for (int u = 0; u < NetworkConfig::kUnitsPerLevel; ++u) add_residual(p, level + ".res" + std::to_string(u), config.channels_at(lv));
  }
  const int n_aux = (config.has_fg() ? 1 : 0) + (config.has_bg() ? 1 : 0);
  if (config.has_fg()) add_decoder(p, config, kFgBranch, 0);
  if (config.has_bg()) add_decoder(p, config, kBgBranch, 0);
  add_decoder(p, config, kPrimaryBranch, n_aux);

  if (mode == InitMode::kRandom) initialize_parameters(p, seed);
  return m;
}

// ---------------------------------------------------------------------------
// forward

namespace {

Var conv(ParameterSet& p, const std::string& name, Var x, int stride = 1) {
  Parameter& w = p.get(name + ".weight");
  return ops::conv2d(x, w, p.get(name + ".bias"), stride, w.dims[2] / 2);
}

Var tconv(ParameterSet& p, const std::string& name, Var x) {
  return ops::conv_transpose2d(x, p.get(name + ".weight"), p.get(name + ".bias"), 2, 1);
}

Var residual(ParameterSet& p, const std::string& name, Var x) {
  Var h = ops::relu(conv(p, name + ".conv1", x));
  return ops::add(x, conv(p, name + ".conv2", h));
}

// Decoder block l of `branch`: residual units at its input level, then either
// a 2x transposed-conv expansion (plus encoder shortcut) or the output conv.
Var decoder_block(ParameterSet& p, const NetworkConfig& cfg, const std::string& branch, int l, Var x,
                  std::span<const Var> skips, bool shortcuts, Var image) {
  const int lv = cfg.levels() - l;
  const std::string b = block_name(branch, l);
  for (int u = 0; u < NetworkConfig::kUnitsPerLevel; ++u) x = residual(p, b + ".res" + std::to_string(u), x);
  if (lv > 0) {
    x = ops::relu(tconv(p, b + ".up", x));
    if (shortcuts) x = ops::add(x, skips[lv - 1]);
    return x;
  }
  x = conv(p, b + ".out", x);
  if (cfg.global_residual) x = ops::add(x, image);
  return x;
}

void check_skips(const NetworkConfig& cfg, std::span<const Var> skips) {
  if (static_cast<int>(skips.size()) != cfg.levels())
    throw std::invalid_argument("decoder expects " + std::to_string(cfg.levels()) + " encoder skips, got " +
                                std::to_string(skips.size()));
}

}  // namespace

EncoderOutput encode(ParameterSet& params, const NetworkConfig& config, Var input) {
  const Shape s = input->value.shape();
  if (s.channels != config.input_channels)
    throw std::invalid_argument("encoder expects " + std::to_string(config.input_channels) + " channels, got " +
                                std::to_string(s.channels));
  if (s.height % config.reduction() != 0 || s.width % config.reduction() != 0)
    throw std::invalid_argument("encoder input " + s.str() + " must have dimensions divisible by " +
                                std::to_string(config.reduction()));
  EncoderOutput out;
  Var x = ops::relu(conv(params, "encoder.in", input));
  for (int lv = 0; lv < config.levels(); ++lv) {
    const std::string level = "encoder.level" + std::to_string(lv);
    if (lv > 0) x = ops::relu(conv(params, level + ".reduce", x, 2));
    for (int u = 0; u < NetworkConfig::kUnitsPerLevel; ++u) x = residual(params, level + ".res" + std::to_string(u), x);
    out.skips.push_back(x);
  }
  out.features = x;
  return out;
}

DecoderOutput decode_domain(ParameterSet& params, const NetworkConfig& config, const std::string& branch,
                            Var features, std::span<const Var> skips, Var image) {
  check_skips(config, skips);
  if (!(features->value.shape() == skips.back()->value.shape()))
    throw std::invalid_argument("decoder input " + features->value.shape().str() + " does not match encoder output " +
                                skips.back()->value.shape().str());
  DecoderOutput out;
  out.intermediates.push_back(features);
  Var x = features;
  for (int l = 1; l <= config.levels(); ++l) {
    x = decoder_block(params, config, branch, l, x, skips, config.domain_shortcuts, image);
    out.intermediates.push_back(x);
  }
  out.image = x;
  return out;
}

DecoderOutput decode_primary(ParameterSet& params, const NetworkConfig& config, Var features,
                             std::span<const std::vector<Var>> aux_intermediates, std::span<const Var> skips,
                             Var image) {
  check_skips(config, skips);
  const int levels = config.levels();
  for (const auto& aux : aux_intermediates)
    if (static_cast<int>(aux.size()) != levels + 1)
      throw std::invalid_argument("auxiliary branch has " + std::to_string(aux.size()) + " intermediates, expected " +
                                  std::to_string(levels + 1));
  DecoderOutput out;
  out.intermediates.push_back(features);
  Var x = features;
  for (int l = 1; l <= levels; ++l) {
    Var in = x;
    if (!aux_intermediates.empty()) {
      std::vector<Var> parts;
      for (const auto& aux : aux_intermediates) {
        if (!(aux[l - 1]->value.shape() == x->value.shape()))
          throw std::invalid_argument("fusion level " + std::to_string(l - 1) + ": auxiliary feature " +
                                      aux[l - 1]->value.shape().str() + " vs primary " + x->value.shape().str());
        parts.push_back(aux[l - 1]);
      }
      parts.push_back(x);
      in = conv(params, block_name(kPrimaryBranch, l) + ".fuse", ops::concat(parts));
    }
    x = decoder_block(params, config, kPrimaryBranch, l, in, skips, true, image);
    out.intermediates.push_back(x);
  }
  out.image = x;
  return out;
}

std::vector<ScaleOutput> forward_full(ParameterSet& params, const NetworkConfig& config, Tape& tape,
                                      const ImagePlane& blurred) {
  config.validate();
  if (blurred.channels() != config.image_channels)
    throw std::invalid_argument("expected a " + std::to_string(config.image_channels) + "-channel image, got " +
                                blurred.shape().str());
  const int divisor = config.input_divisor();
  if (blurred.height() % divisor != 0 || blurred.width() % divisor != 0)
    throw std::invalid_argument("input " + blurred.shape().str() + " must have dimensions divisible by " +
                                std::to_string(divisor) + " for " + std::to_string(config.scales) + " scales");

  const auto pyramid = build_pyramid(blurred, config.scales);
  std::vector<ScaleOutput> outputs;
  Var previous = nullptr;
  for (int s = 0; s < config.scales; ++s) {
    Var image = tape.constant(pyramid[s]);
    Var estimate = previous ? tconv(params, kUpsample, previous) : image;
    const Var stacked[2] = {image, estimate};
    EncoderOutput enc = encode(params, config, ops::concat(stacked));

    ScaleOutput out;
    out.features = enc.features;
    Var h_fg = enc.features;
    Var h_bg = enc.features;
    if (config.use_attention) {
      out.attention = attention_forward(params, image);
      std::tie(h_fg, h_bg) = gate_features(enc.features, out.attention);
    }
    out.gated_fg = h_fg;
    out.gated_bg = h_bg;

    std::vector<std::vector<Var>> aux;
    if (config.has_fg()) {
      DecoderOutput d = decode_domain(params, config, kFgBranch, h_fg, enc.skips, image);
      out.fg = d.image;
      aux.push_back(std::move(d.intermediates));
    }
    if (config.has_bg()) {
      DecoderOutput d = decode_domain(params, config, kBgBranch, h_bg, enc.skips, image);
      out.bg = d.image;
      aux.push_back(std::move(d.intermediates));
    }
    out.sharp = decode_primary(params, config, enc.features, aux, enc.skips, image).image;
    previous = out.sharp;
    outputs.push_back(out);
  }
  return outputs;
}

std::vector<ScaleResult> infer(const Model& model, const ImagePlane& blurred) {
  Tape tape(false);
  // A non-recording tape never writes parameter gradients.
  auto outs = forward_full(const_cast<ParameterSet&>(model.params), model.config, tape, blurred);
  std::vector<ScaleResult> results;
  for (const auto& o : outs) {
    ScaleResult r{o.sharp->value, std::nullopt, std::nullopt, std::nullopt};
    if (o.fg) r.fg = o.fg->value;
    if (o.bg) r.bg = o.bg->value;
    if (o.attention) r.attention = o.attention->value;
    results.push_back(std::move(r));
  }
  return results;
}

ImagePlane crop_to_divisor(const ImagePlane& image, int divisor) {
  const int h = image.height() / divisor * divisor;
  const int w = image.width() / divisor * divisor;
  if (h == 0 || w == 0)
    throw std::invalid_argument("image " + image.shape().str() + " is smaller than the required multiple " +
                                std::to_string(divisor));
  if (h == image.height() && w == image.width()) return image;
  ImagePlane out(image.channels(), h, w);
  for (int c = 0; c < image.channels(); ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = image.at(c, y, x);
  return out;
}

// ---------------------------------------------------------------------------
// checkpoints
//
// Layout (all integers little-endian):
//   "DBLRCKPT" | u32 format_version | u32 meta_len | meta JSON
//   | parameter section | optional optimizer section
// A parameter section is u32 count, then per array:
//   u32 name_len | name | u32 ndims | i32 dims[ndims] | u64 numel | f32 data[numel]

namespace {

constexpr char kMagic[8] = {'D', 'B', 'L', 'R', 'C', 'K', 'P', 'T'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
void put_f32(std::vector<std::uint8_t>& out, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

void put_array(std::vector<std::uint8_t>& out, const std::string& name, const std::vector<int>& dims,
               const std::vector<float>& data) {
  put_u32(out, static_cast<std::uint32_t>(name.size()));
  out.insert(out.end(), name.begin(), name.end());
  put_u32(out, static_cast<std::uint32_t>(dims.size()));
  for (int d : dims) put_u32(out, static_cast<std::uint32_t>(d));
  put_u64(out, data.size());
  for (float f : data) put_f32(out, f);
}

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::filesystem::path& path) : bytes_(bytes), path_(path) {}

  void need(std::size_t n) {
    if (pos_ + n > bytes_.size()) throw CheckpointError(path_.string() + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_++]) << (8 * i);
    return v;
  }
  float f32() {
    const std::uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(pos_), bytes_.begin() + static_cast<std::ptrdiff_t>(pos_ + n));
    pos_ += n;
    return s;
  }
  bool done() const { return pos_ == bytes_.size(); }

  struct Array {
    std::string name;
    std::vector<int> dims;
    std::vector<float> data;
  };
  Array array() {
    Array a;
    a.name = str(u32());
    const std::uint32_t nd = u32();
    for (std::uint32_t i = 0; i < nd; ++i) a.dims.push_back(static_cast<int>(u32()));
    const std::uint64_t n = u64();
    need(n * 4);
    a.data.resize(n);
    for (auto& f : a.data) f = f32();
    return a;
  }

 private:
  const std::vector<std::uint8_t>& bytes_;
  const std::filesystem::path& path_;
  std::size_t pos_ = 0;
};

json config_json(const NetworkConfig& c) {
  return json{{"base_channels", c.base_channels},
              {"n_residual_units", c.n_residual_units},
              {"decoder_blocks", c.decoder_blocks},
              {"scales", c.scales},
              {"input_channels", c.input_channels},
              {"image_channels", c.image_channels},
              {"use_attention", c.use_attention},
              {"branches", branch_mode_name(c.branches)},
              {"domain_shortcuts", c.domain_shortcuts},
              {"global_residual", c.global_residual},
              {"attention",
               {{"width1", c.attention.width1},
                {"width2", c.attention.width2},
                {"width3", c.attention.width3},
                {"kernel", c.attention.kernel}}}};
}

}  // namespace

std::string config_to_json(const NetworkConfig& config) { return config_json(config).dump(); }

NetworkConfig config_from_json(const std::string& text) {
  const json j = json::parse(text);
  NetworkConfig c;
  c.base_channels = j.at("base_channels").get<int>();
  c.n_residual_units = j.at("n_residual_units").get<int>();
  c.decoder_blocks = j.at("decoder_blocks").get<int>();
  c.scales = j.at("scales").get<int>();
  c.input_channels = j.at("input_channels").get<int>();
  c.image_channels = j.at("image_channels").get<int>();
  c.use_attention = j.at("use_attention").get<bool>();
  c.branches = parse_branch_mode(j.at("branches").get<std::string>());
  c.domain_shortcuts = j.at("domain_shortcuts").get<bool>();
  c.global_residual = j.at("global_residual").get<bool>();
  const json& a = j.at("attention");
  c.attention.width1 = a.at("width1").get<int>();
  c.attention.width2 = a.at("width2").get<int>();
  c.attention.width3 = a.at("width3").get<int>();
  c.attention.kernel = a.at("kernel").get<int>();
  c.attention.image_channels = c.image_channels;
  c.validate();
  return c;
}

std::vector<std::uint8_t> serialize_parameters(const ParameterSet& params) {
  std::vector<std::uint8_t> out;
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params.all()) put_array(out, p.name, p.dims, p.value);
  return out;
}

void save_checkpoint(const std::filesystem::path& path, const Model& model, const CheckpointMeta& meta,
                     const OptimizerState* optimizer) {
  json m{{"format_version", kCheckpointFormatVersion},
         {"byte_order", "little"},
         {"config", config_json(model.config)},
         {"iteration", meta.iteration},
         {"loss", meta.loss ? json(*meta.loss) : json(nullptr)},
         {"rng_state", meta.rng_state},
         {"has_optimizer", optimizer != nullptr},
         {"optimizer_step", optimizer ? optimizer->step : 0}};
  const std::string text = m.dump();

  std::vector<std::uint8_t> bytes(kMagic, kMagic + 8);
  put_u32(bytes, kCheckpointFormatVersion);
  put_u32(bytes, static_cast<std::uint32_t>(text.size()));
  bytes.insert(bytes.end(), text.begin(), text.end());
  const auto params = serialize_parameters(model.params);
  bytes.insert(bytes.end(), params.begin(), params.end());
  if (optimizer) {
    const auto& all = model.params.all();
    if (optimizer->m.size() != all.size() || optimizer->v.size() != all.size())
      throw CheckpointError("optimizer state does not match the parameter set");
    put_u32(bytes, static_cast<std::uint32_t>(2 * all.size()));
    for (std::size_t i = 0; i < all.size(); ++i) {
      put_array(bytes, "adam.m/" + all[i].name, all[i].dims, optimizer->m[i]);
      put_array(bytes, "adam.v/" + all[i].name, all[i].dims, optimizer->v[i]);
    }
  }

  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw CheckpointError("cannot write checkpoint: " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write: " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path, const std::optional<NetworkConfig>& expected) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path.string());
  const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  Reader r(bytes, path);
  if (r.str(8) != std::string(kMagic, 8)) throw CheckpointError(path.string() + ": not a checkpoint file");
  const std::uint32_t version = r.u32();
  if (version != static_cast<std::uint32_t>(kCheckpointFormatVersion))
    throw CheckpointError(path.string() + ": unsupported format version " + std::to_string(version));

  json meta;
  NetworkConfig config;
  try {
    meta = json::parse(r.str(r.u32()));
    if (meta.at("byte_order").get<std::string>() != "little")
      throw CheckpointError(path.string() + ": unsupported byte order");
    config = config_from_json(meta.at("config").dump());
  } catch (const json::exception& e) {
    throw CheckpointError(path.string() + ": bad metadata: " + e.what());
  }
  if (expected && !(*expected == config))
    throw CheckpointError(path.string() + ": network config mismatch; checkpoint has " + config_to_json(config) +
                          ", expected " + config_to_json(*expected));

  LoadedCheckpoint out{make_model(config, 0, InitMode::kZero), {}, std::nullopt};
  out.meta.iteration = meta.value("iteration", std::int64_t{0});
  if (meta.contains("loss") && !meta["loss"].is_null()) out.meta.loss = meta["loss"].get<double>();
  out.meta.rng_state = meta.value("rng_state", std::string());

  auto& params = out.model.params;
  const std::uint32_t n = r.u32();
  if (n != params.size())
    throw CheckpointError(path.string() + ": checkpoint has " + std::to_string(n) + " arrays, config expects " +
                          std::to_string(params.size()));
  for (std::uint32_t i = 0; i < n; ++i) {
    auto a = r.array();
    if (!params.contains(a.name)) throw CheckpointError(path.string() + ": unexpected array " + a.name);
    Parameter& p = params.get(a.name);
    if (p.dims != a.dims) throw CheckpointError(path.string() + ": shape mismatch for " + a.name);
    p.value = std::move(a.data);
  }

  if (meta.value("has_optimizer", false)) {
    OptimizerState st;
    st.step = meta.value("optimizer_step", std::int64_t{0});
    const auto& all = params.all();
    if (r.u32() != 2 * all.size()) throw CheckpointError(path.string() + ": optimizer section size mismatch");
    for (const auto& p : all) {
      auto m = r.array();
      auto v = r.array();
      if (m.name != "adam.m/" + p.name || v.name != "adam.v/" + p.name || m.data.size() != p.numel() ||
          v.data.size() != p.numel())
        throw CheckpointError(path.string() + ": optimizer state does not match " + p.name);
      st.m.push_back(std::move(m.data));
      st.v.push_back(std::move(v.data));
    }
    out.optimizer = std::move(st);
  }
  if (!r.done()) throw CheckpointError(path.string() + ": trailing bytes");
  return out;
}

}  // namespace deblur
