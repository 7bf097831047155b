#include "cli.hpp"

#include <CLI11.hpp>
#include <Eigen/Core>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>

#include "deblur/data.hpp"
#include "deblur/metrics.hpp"
#include "deblur/network.hpp"
#include "deblur/trainer.hpp"

namespace deblur::cli {

namespace fs = std::filesystem;

namespace {

// Raised for problems with the inputs a command was pointed at.
struct InputError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NetworkFlags {
  int base_channels = 32;
  int scales = 3;
  std::string branches = "all";
  bool no_attention = false;
  bool global_residual = false;
  bool primary_shortcuts_only = false;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--base-channels", base_channels, "Encoder width at full resolution")->check(CLI::PositiveNumber);
    cmd->add_option("--scales", scales, "Pyramid levels")->check(CLI::Range(1, 6));
    cmd->add_option("--branches", branches, "Decoder heads: all, fg, bg or primary")
        ->check(CLI::IsMember({"all", "fg", "bg", "primary"}));
    cmd->add_flag("--no-attention", no_attention, "Drop the attention subnet (ungated features)");
    cmd->add_flag("--global-residual", global_residual, "Decoders predict a residual over the blurred input");
    cmd->add_flag("--primary-shortcuts-only", primary_shortcuts_only,
                  "Encoder shortcuts feed the primary head only");
  }

  NetworkConfig build() const {
    NetworkConfig c;
    c.base_channels = base_channels;
    c.scales = scales;
    c.branches = parse_branch_mode(branches);
    c.use_attention = !no_attention;
    c.global_residual = global_residual;
    c.domain_shortcuts = !primary_shortcuts_only;
    c.validate();
    return c;
  }
};

std::vector<fs::path> sorted_pngs(const fs::path& dir) {
  if (!fs::is_directory(dir)) throw DataError(dir, "missing directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ".png") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  return files;
}

void write_text_atomic(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << text;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Split parse_split(const std::string& s) { return s == "train" ? Split::kTrain : Split::kTest; }

// ---------------------------------------------------------------------------

struct SynthArgs {
  fs::path frames;
  int window = 11;
  int start = 0;
  fs::path out;
};

int run_synth(const SynthArgs& a, std::ostream& out) {
  if (a.window < 3 || a.window % 2 == 0) throw InputError("--window must be odd and at least 3");
  const auto files = sorted_pngs(a.frames);
  if (a.start < 0 || static_cast<std::size_t>(a.start + a.window) > files.size())
    throw DataError(a.frames, "needs " + std::to_string(a.start + a.window) + " frames, found " +
                                  std::to_string(files.size()));
  std::vector<ImagePlane> frames;
  for (int i = 0; i < a.window; ++i) {
    frames.push_back(load_png(files[a.start + i]));
    if (!(frames.back().shape() == frames.front().shape()))
      throw DataError(files[a.start + i], "frame size differs from the first frame");
  }
  const BlurPair pair = synthesize_blur(frames);
  fs::create_directories(a.out);
  save_png(a.out / "blur.png", pair.blurred);
  save_png(a.out / "sharp.png", pair.sharp);
  out << "wrote " << (a.out / "blur.png").string() << " and " << (a.out / "sharp.png").string() << "\n";
  return kOk;
}

struct RasterizeArgs {
  fs::path annotations;
  fs::path out;
};

int run_rasterize(const RasterizeArgs& a, std::ostream& out) {
  if (!fs::is_directory(a.annotations)) throw DataError(a.annotations, "missing directory");
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(a.annotations))
    if (e.is_regular_file() && e.path().extension() == ".json") files.push_back(e.path());
  std::sort(files.begin(), files.end());
  fs::create_directories(a.out);
  for (const auto& f : files) {
    const Annotation ann = read_annotation(f);
    const BinaryMask mask = rasterize_mask(ann.boxes, ann.width, ann.height);
    save_mask_png(a.out / (fs::path(ann.image).stem().string() + ".png"), mask);
  }
  out << "rasterized " << files.size() << " annotation(s)\n";
  return kOk;
}

struct TrainArgs {
  fs::path data;
  std::optional<fs::path> config;
  NetworkFlags net;
  std::optional<fs::path> init;
  std::optional<fs::path> resume;
  std::optional<fs::path> output;
  std::optional<fs::path> log;
  std::optional<int> iterations;
  bool joint_from_scratch = false;
  bool validate = false;
};

TrainConfig train_config(const TrainArgs& a, std::uint64_t seed, bool seed_given) {
  TrainConfig c = a.config ? load_train_config(*a.config) : TrainConfig{};
  if (seed_given) c.seed = seed;
  return c;
}

std::vector<AnnotatedSample> load_split(const fs::path& root, Split split) {
  auto samples = load_dataset(root, split);
  if (samples.empty()) throw DataError(root / split_name(split), "no image pairs");
  return samples;
}

int run_pretrain(const TrainArgs& a, std::uint64_t seed, bool seed_given, std::ostream& out) {
  TrainConfig tc = train_config(a, seed, seed_given);
  if (a.iterations) tc.pretrain_iters = *a.iterations;
  tc.validate();
  Model model = make_model(a.net.build(), tc.seed);
  if (!model.config.use_attention) throw InputError("pretrain-attention needs a network with attention");
  const auto samples = load_split(a.data, Split::kTrain);

  std::ofstream log_file;
  TrainOptions opt;
  if (a.log) {
    log_file.open(*a.log);
    if (!log_file) throw IoError("cannot write " + a.log->string());
    opt.log = &log_file;
  }
  const PretrainResult r = pretrain_attention(model, samples, tc, opt);
  const fs::path path = a.output.value_or("attention.ckpt");
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::optional<double> last;
  if (!r.loss_history.empty()) last = r.loss_history.back();
  save_checkpoint(path, model, {tc.pretrain_iters, last, ""});
  out << "pretrained attention for " << tc.pretrain_iters << " iteration(s)";
  if (last) out << ", final loss " << *last;
  out << "; wrote " << path.string() << "\n";
  return kOk;
}

int run_train(const TrainArgs& a, std::uint64_t seed, bool seed_given, std::ostream& out) {
  TrainConfig tc = train_config(a, seed, seed_given);
  if (a.iterations) tc.max_steps = *a.iterations;
  tc.validate();

  std::optional<LoadedCheckpoint> resume;
  std::optional<LoadedCheckpoint> init;
  Model model;
  TrainOptions opt;
  if (a.resume) {
    resume = load_checkpoint(*a.resume);
    model = resume->model;
    opt.resume = &*resume;
  } else if (a.init) {
    init = load_checkpoint(*a.init);
    model = make_model(init->model.config, tc.seed);
    model.params.assign_from(init->model.params.subset(kAttentionPrefix));
    opt.attention_pretrained = true;
  } else {
    model = make_model(a.net.build(), tc.seed);
  }
  opt.joint_from_scratch = a.joint_from_scratch;

  const auto samples = load_split(a.data, Split::kTrain);
  std::vector<AnnotatedSample> validation;
  if (a.validate) validation = load_split(a.data, Split::kTest);
  opt.validation = validation;
  opt.checkpoint_dir = a.output.value_or("checkpoints");

  std::ofstream log_file;
  if (a.log) {
    log_file.open(*a.log);
    if (!log_file) throw IoError("cannot write " + a.log->string());
    opt.log = &log_file;
  }
  const TrainResult r = train(model, samples, tc, opt);
  out << "trained " << r.history.size() << " step(s)";
  if (!r.history.empty()) out << ", last loss " << r.history.back().loss.total;
  out << "; wrote " << r.checkpoints.back().string() << "\n";
  return kOk;
}

struct EvalArgs {
  std::optional<fs::path> ckpt;
  std::optional<fs::path> predictions;
  fs::path data;
  std::string split = "test";
  fs::path out;
  std::string ssim_mode = "luma";
};

int run_eval(const EvalArgs& a, std::ostream& out) {
  if (a.ckpt.has_value() == a.predictions.has_value())
    throw InputError("eval needs exactly one of --ckpt and --predictions");
  const SsimMode mode = a.ssim_mode == "luma" ? SsimMode::kLuma : SsimMode::kChannelAverage;
  const auto samples = load_split(a.data, parse_split(a.split));

  std::vector<MetricRow> rows;
  if (a.ckpt) {
    const LoadedCheckpoint ck = load_checkpoint(*a.ckpt);
    rows = evaluate(ck.model, samples, mode);
  } else {
    std::vector<ImagePlane> preds;
    for (const auto& s : samples) {
      const fs::path p = *a.predictions / (s.source_id + ".png");
      if (!fs::exists(p)) throw DataError(p, "missing prediction");
      preds.push_back(load_png(p));
      if (!(preds.back().shape() == s.sharp.shape())) throw DataError(p, "prediction size differs from target");
    }
    rows = evaluate_predictions(samples, preds, mode);
  }
  std::ostringstream csv;
  write_metrics_csv(csv, rows);
  write_text_atomic(a.out, csv.str());
  for (const auto& r : rows)
    if (r.image_id == "mean" && r.report.region == Region::kGlobal)
      out << "mean psnr " << format_psnr(r.report.psnr_db) << " dB, ssim " << r.report.ssim.value_or(0.0) << "\n";
  return kOk;
}

struct InferArgs {
  fs::path ckpt;
  fs::path input;
  fs::path output;
  bool save_attention = false;
  std::optional<fs::path> attention_output;
};

int run_infer(const InferArgs& a, std::ostream& out) {
  const LoadedCheckpoint ck = load_checkpoint(a.ckpt);
  const ImagePlane blurred = crop_to_divisor(load_png(a.input), ck.model.config.input_divisor());
  const auto scales = infer(ck.model, blurred);
  if (a.output.has_parent_path()) fs::create_directories(a.output.parent_path());
  save_png(a.output, scales.back().sharp);
  out << "wrote " << a.output.string() << "\n";
  if (a.save_attention) {
    if (!scales.back().attention) throw InputError("--save-attention: model has no attention subnet");
    const fs::path path = a.attention_output.value_or(
        a.output.parent_path() / (a.output.stem().string() + "_attention.png"));
    save_png(path, *scales.back().attention);
    out << "wrote " << path.string() << "\n";
  }
  return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Human-aware attentive deblurring", "deblur"};
  app.require_subcommand(1);
  app.failure_message(CLI::FailureMessage::help);

  std::uint64_t seed = 0;
  bool strict = false;
  auto* seed_opt = app.add_option("--seed", seed, "Seed for initialization and sampling");
  app.add_flag("--strict", strict, "Strict determinism (single-threaded kernels)");

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Average a window of sharp frames into a blurred/sharp pair");
  c_synth->add_option("--frames", synth.frames, "Directory of sequential PNG frames")->required();
  c_synth->add_option("--window", synth.window, "Number of frames to average (odd)");
  c_synth->add_option("--start", synth.start, "Index of the first frame of the window");
  c_synth->add_option("--out", synth.out, "Output directory for blur.png and sharp.png")->required();

  RasterizeArgs rast;
  auto* c_rast = app.add_subcommand("rasterize", "Rasterize box annotations into mask PNGs");
  c_rast->add_option("--annotations", rast.annotations, "Directory of annotation JSON files")->required();
  c_rast->add_option("--out", rast.out, "Output directory for masks")->required();

  TrainArgs pre;
  auto* c_pre = app.add_subcommand("pretrain-attention", "Train the attention subnet on the masks");
  c_pre->add_option("--data", pre.data, "Dataset root with train/ and test/")->required();
  c_pre->add_option("--config", pre.config, "Training config file");
  c_pre->add_option("--iterations", pre.iterations, "Override pretrain_iters")->check(CLI::NonNegativeNumber);
  c_pre->add_option("--output", pre.output, "Checkpoint path");
  c_pre->add_option("--log", pre.log, "Per-step loss log");
  pre.net.add_to(c_pre);

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train the deblurring network");
  c_train->add_option("--data", tr.data, "Dataset root with train/ and test/")->required();
  c_train->add_option("--config", tr.config, "Training config file");
  c_train->add_option("--init", tr.init, "Checkpoint providing pretrained attention weights");
  c_train->add_option("--resume", tr.resume, "Checkpoint to resume from");
  c_train->add_option("--iterations", tr.iterations, "Override the number of steps")->check(CLI::PositiveNumber);
  c_train->add_option("--output", tr.output, "Checkpoint directory");
  c_train->add_option("--log", tr.log, "Per-step loss log");
  c_train->add_flag("--joint-from-scratch", tr.joint_from_scratch, "Train attention jointly without pretraining");
  c_train->add_flag("--validate", tr.validate, "Report test-split PSNR at every checkpoint");
  tr.net.add_to(c_train);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Write a PSNR/SSIM report as CSV");
  c_eval->add_option("--ckpt", ev.ckpt, "Model checkpoint");
  c_eval->add_option("--predictions", ev.predictions, "Directory of precomputed predictions named like the inputs");
  c_eval->add_option("--data", ev.data, "Dataset root")->required();
  c_eval->add_option("--split", ev.split, "Split to score")->check(CLI::IsMember({"train", "test"}));
  c_eval->add_option("--out", ev.out, "CSV path")->required();
  c_eval->add_option("--ssim-mode", ev.ssim_mode, "luma or channel")->check(CLI::IsMember({"luma", "channel"}));

  InferArgs inf;
  auto* c_infer = app.add_subcommand("infer", "Deblur one image");
  c_infer->add_option("--ckpt", inf.ckpt, "Model checkpoint")->required();
  c_infer->add_option("--input", inf.input, "Blurred PNG")->required();
  c_infer->add_option("--output", inf.output, "Deblurred PNG")->required();
  c_infer->add_flag("--save-attention", inf.save_attention, "Also write the attention map");
  c_infer->add_option("--attention-output", inf.attention_output, "Attention PNG path");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n";
    const auto subs = app.get_subcommands();
    err << (subs.empty() ? app.help() : subs.front()->help());
    return kUsage;
  }

  if (strict) Eigen::setNbThreads(1);
  const bool seed_given = seed_opt->count() > 0;

  try {
    if (*c_synth) return run_synth(synth, out);
    if (*c_rast) return run_rasterize(rast, out);
    if (*c_pre) return run_pretrain(pre, seed, seed_given, out);
    if (*c_train) return run_train(tr, seed, seed_given, out);
    if (*c_eval) return run_eval(ev, out);
    if (*c_infer) return run_infer(inf, out);
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return kUsage;
  } catch (const DataError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const IoError& e) {
    err << "data error: " << e.what() << "\n";
    return kDataError;
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kDataError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kDataError;
  } catch (const std::exception& e) {
    err << "runtime failure: " << e.what() << "\n";
    return kRuntimeFailure;
  }
  return kUsage;
}

}  // namespace deblur::cli
