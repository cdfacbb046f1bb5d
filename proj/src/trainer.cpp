// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/trainer.hpp"

#include "hyperfield/forward_maps.hpp"
#include "hyperfield/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <numeric>
#include <ostream>
#include <regex>
#include <sstream>

namespace hyperfield {

namespace fs = std::filesystem;

namespace {

constexpr Index kAudioFrame = 256;
constexpr Index kRenderChunk = 1024;

Index padded_length(Index n) { return (n + kAudioFrame - 1) / kAudioFrame * kAudioFrame; }

bool contains(const std::vector<std::string>& v, const std::string& s) {
  return std::find(v.begin(), v.end(), s) != v.end();
}

std::string fmt(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  std::ostringstream os;
  os << std::setprecision(9) << v;
  return os.str();
}

Tensor<float> gather_pixels(const Image& img, const std::vector<Index>& pixels) {
  Tensor<float> t({static_cast<Index>(pixels.size()), img.channels});
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    for (Index c = 0; c < img.channels; ++c) {
      t.data()[static_cast<Index>(i) * img.channels + c] =
          img.pixels[static_cast<std::size_t>(pixels[i] * img.channels + c)];
    }
  }
  return t;
}

Image clip_image(const std::vector<float>& samples) {
  Image img(1, static_cast<Index>(samples.size()), 1);
  img.pixels = samples;
  return img;
}

}  // namespace

ModelSpec model_spec(const TrainConfig& cfg, const Dataset& ds) {
  ModelSpec m;
  m.encoder.width = cfg.width;
  m.encoder.depth = cfg.depth;
  m.encoder.heads = cfg.heads;
  m.encoder.patch = cfg.patch;
  const bool np = cfg.algorithm == Algorithm::ponp;
  switch (cfg.task) {
    case Task::nvs:
    case Task::image:
      if (ds.task() != "nvs") throw ConfigError("task '" + std::string(to_string(cfg.task)) + "' needs an image dataset", "data.path");
      m.encoder.modality = Modality::image;
      m.encoder.image_height = m.encoder.image_width = ds.image_size();
      m.encoder.channels = 3;
      if (cfg.task == Task::nvs) {
        m.inr.input_dim = 3;
        m.inr.output_dim = np ? 7 : 4;
        m.inr.transform = np ? OutputTransform::radiance_np : OutputTransform::radiance;
      } else {
        m.inr.input_dim = 2;
        m.inr.output_dim = np ? 6 : 3;
        m.inr.transform = np ? OutputTransform::identity_np : OutputTransform::identity;
      }
      break;
    case Task::audio:
      if (ds.task() != "audio") throw ConfigError("task 'audio' needs an audio dataset", "data.path");
      m.encoder.modality = Modality::audio;
      m.encoder.frame = kAudioFrame;
      m.encoder.audio_length = padded_length(ds.clip_length());
      m.inr.input_dim = 1;
      m.inr.output_dim = np ? 2 : 1;
      m.inr.transform = np ? OutputTransform::identity_np : OutputTransform::identity;
      break;
  }
  m.inr.fourier_features = cfg.fourier_features;
  m.inr.hidden_width = cfg.full_inr ? 256 : cfg.inr_hidden;
  m.inr.linear_layers = cfg.full_inr ? 6 : cfg.inr_layers;
  m.generator = cfg.algorithm == Algorithm::ipc ? Generator::shared : Generator::modulated;
  m.group_size = cfg.group_size;
  m.token_init_std = cfg.token_init_std;
  m.fourier_scale = cfg.fourier_scale;
  m.ipc_rank = cfg.ipc_rank;
  m.ipc_target = cfg.ipc_target;
  return m;
}

FreezeMask strategy_mask(Strategy s) {
  if (s == Strategy::frozen) return FreezeMask::prompt_tuning();
  if (s == Strategy::lora) return FreezeMask::lora();
  return {};
}

// ---------------------------------------------------------------------------
// EvalTable

double EvalTable::mean_psnr(const std::string& klass) const {
  double acc = 0.0;
  Index n = 0;
  for (const auto& r : rows) {
    if (!klass.empty() && r.klass != klass) continue;
    acc += r.psnr;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

double EvalTable::mean_ssim(const std::string& klass) const {
  double acc = 0.0;
  Index n = 0;
  for (const auto& r : rows) {
    if (!klass.empty() && r.klass != klass) continue;
    acc += r.ssim;
    ++n;
  }
  return n == 0 ? std::numeric_limits<double>::quiet_NaN() : acc / static_cast<double>(n);
}

std::vector<std::string> EvalTable::classes() const {
  std::vector<std::string> out;
  for (const auto& r : rows) {
    if (!contains(out, r.klass)) out.push_back(r.klass);
  }
  return out;
}

std::string EvalTable::csv() const {
  std::ostringstream os;
  os << "instance,class,view,psnr,ssim\n";
  for (const auto& r : rows) {
    os << r.instance << "," << r.klass << "," << r.view << "," << fmt(r.psnr) << "," << fmt(r.ssim) << "\n";
  }
  for (const auto& c : classes()) os << "mean," << c << ",," << fmt(mean_psnr(c)) << "," << fmt(mean_ssim(c)) << "\n";
  os << "mean,all,," << fmt(mean_psnr()) << "," << fmt(mean_ssim()) << "\n";
  return os.str();
}

std::string EvalTable::pretty() const {
  std::ostringstream os;
  os << "split " << split << ": " << rows.size() << " evaluations\n";
  os << std::left << std::setw(14) << "class" << std::right << std::setw(8) << "count" << std::setw(12) << "PSNR"
     << std::setw(10) << "SSIM" << "\n";
  auto line = [&](const std::string& name, const std::string& klass) {
    Index n = 0;
    for (const auto& r : rows) n += klass.empty() || r.klass == klass ? 1 : 0;
    os << std::left << std::setw(14) << name << std::right << std::setw(8) << n << std::fixed << std::setprecision(3)
       << std::setw(12) << mean_psnr(klass) << std::setw(10) << mean_ssim(klass) << "\n";
    os.unsetf(std::ios::fixed);
  };
  for (const auto& c : classes()) line(c, c);
  line("all", "");
  return os.str();
}

// ---------------------------------------------------------------------------
// Trainer

Trainer::Trainer(const TrainConfig& config, Dataset dataset, bool load_backbone)
    : cfg_(config), ds_(std::move(dataset)), model_(model_spec(cfg_, ds_), cfg_.seed), rng_(instance_seed(cfg_.seed, -2)) {
  if (load_backbone && cfg_.needs_backbone()) {
    const TensorArchive backbone = load_archive(cfg_.backbone_path);
    Index expected = 0;
    for (const auto& [name, t] : model_.params()) expected += name.rfind("encoder.", 0) == 0 ? 1 : 0;
    const Index loaded = model_.load_values(backbone, "encoder.");
    if (loaded != expected) {
      throw std::runtime_error("backbone " + cfg_.backbone_path + " covers " + std::to_string(loaded) + " of " +
                               std::to_string(expected) + " encoder parameters");
    }
  }
  if (cfg_.strategy == Strategy::lora) {
    lora_ = model_.attach_lora(cfg_.lora_targets, cfg_.lora_rank, cfg_.lora_alpha, instance_seed(cfg_.seed, -3));
  }
  freeze_ = apply_freeze_mask(model_.params(), strategy_mask(cfg_.strategy));
  adam_.emplace(model_.params());

  train_set_ = instances("train");
  if (train_set_.empty()) throw ConfigError("no training instances in " + cfg_.data_path, "data.path");
}

std::vector<Index> Trainer::instances(const std::string& split) const {
  std::vector<Index> out;
  if (cfg_.task == Task::audio) {
    if (split == "unseen") throw std::invalid_argument("audio datasets have no classes");
    if (split != "train" && split != "test") throw std::invalid_argument("unknown split '" + split + "'");
    for (std::size_t i = 0; i < ds_.clips.size(); ++i) {
      if (ds_.clips[i].split == split) out.push_back(static_cast<Index>(i));
    }
    if (split == "train" && cfg_.max_instances > 0 && static_cast<Index>(out.size()) > cfg_.max_instances) {
      out.resize(static_cast<std::size_t>(cfg_.max_instances));
    }
    return out;
  }
  const auto& keep = cfg_.train_classes;
  if (split == "unseen" && keep.empty()) throw std::invalid_argument("'unseen' needs data.train_classes");
  for (std::size_t i = 0; i < ds_.objects.size(); ++i) {
    const auto& o = ds_.objects[i];
    const bool seen = keep.empty() || contains(keep, o.klass);
    bool take = false;
    if (split == "train") take = seen && o.split == "train";
    else if (split == "test") take = seen && o.split == "test";
    else if (split == "unseen") take = !seen;
    else throw std::invalid_argument("unknown split '" + split + "'");
    if (take) out.push_back(static_cast<Index>(i));
  }
  if (split == "train" && cfg_.max_instances > 0 && static_cast<Index>(out.size()) > cfg_.max_instances) {
    out.resize(static_cast<std::size_t>(cfg_.max_instances));
  }
  return out;
}

Index Trainer::steps_per_epoch() const {
  const auto n = static_cast<Index>(train_set_.size());
  const Index b = std::min(cfg_.batch_size, n);
  return (n + b - 1) / b;
}

Index Trainer::total_steps() const {
  const Index total = cfg_.epochs * steps_per_epoch();
  return cfg_.max_steps > 0 ? std::min(total, cfg_.max_steps) : total;
}

const Image& Trainer::view_image(Index instance, Index view) const {
  auto key = std::make_pair(instance, view);
  auto it = cache_.find(key);
  if (it == cache_.end()) {
    Image img = cfg_.task == Task::audio
                    ? clip_image(ds_.load_clip(ds_.clips[static_cast<std::size_t>(instance)]))
                    : ds_.load_view(ds_.objects[static_cast<std::size_t>(instance)], static_cast<std::size_t>(view));
    it = cache_.emplace(key, std::move(img)).first;
  }
  return it->second;
}

Tensor<float> Trainer::observation(Index instance, Index view) const {
  if (cfg_.task == Task::audio) {
    const auto& clip = view_image(instance, 0).pixels;
    Tensor<float> obs = Tensor<float>::zeros({padded_length(static_cast<Index>(clip.size()))});
    std::copy(clip.begin(), clip.end(), obs.data());
    return obs;
  }
  return view_image(instance, view).to_tensor<float>();
}

Tensor<float> Trainer::instance_loss(Index instance, double& mse) {
  const bool np = cfg_.algorithm == Algorithm::ponp;
  Tensor<float> pred, logvar, target;
  if (cfg_.task == Task::nvs) {
    const auto& obj = ds_.objects[static_cast<std::size_t>(instance)];
    std::uniform_int_distribution<std::size_t> pick_view(0, obj.views.size() - 1);
    const auto in_view = static_cast<Index>(pick_view(rng_));
    const auto out_view = pick_view(rng_);
    const Inr<float> inr = model_.instantiate(observation(instance, in_view));
    const Camera& cam = obj.views[out_view].camera;
    std::uniform_int_distribution<Index> pick_pixel(0, cam.width * cam.height - 1);
    std::vector<Index> pixels(static_cast<std::size_t>(cfg_.rays_per_instance));
    for (auto& p : pixels) p = pick_pixel(rng_);
    const RayBatch rays = make_rays(cam, pixels, cfg_.near, cfg_.far);
    RenderResult<float> r = render_rays(inr, rays, cfg_.n_samples, cfg_.white_bg, &rng_);
    pred = r.rgb;
    if (np) logvar = *r.logvar;
    target = gather_pixels(view_image(instance, static_cast<Index>(out_view)), pixels);
  } else if (cfg_.task == Task::image) {
    const Inr<float> inr = model_.instantiate(observation(instance, 0));
    const Image& img = view_image(instance, 0);
    std::uniform_int_distribution<Index> pick_pixel(0, img.width * img.height - 1);
    std::vector<Index> pixels(static_cast<std::size_t>(cfg_.rays_per_instance));
    for (auto& p : pixels) p = pick_pixel(rng_);
    const Tensor<float> all = image_coords<float>(img.height, img.width);
    Tensor<float> coords({static_cast<Index>(pixels.size()), 2});
    for (std::size_t i = 0; i < pixels.size(); ++i) {
      coords.data()[i * 2] = all.data()[pixels[i] * 2];
      coords.data()[i * 2 + 1] = all.data()[pixels[i] * 2 + 1];
    }
    const Tensor<float> out = sample_signal(inr, coords);
    pred = slice(out, 1, 0, 3);
    if (np) logvar = slice(out, 1, 3, 3);
    target = gather_pixels(img, pixels);
  } else {
    const auto& clip = view_image(instance, 0).pixels;
    const Inr<float> inr = model_.instantiate(observation(instance, 0));
    const auto n = static_cast<Index>(clip.size());
    const Index m = std::min(cfg_.audio_samples_per_step, n);
    std::uniform_int_distribution<Index> pick(0, n - 1);
    Tensor<float> coords({m, 1});
    target = Tensor<float>({m, 1});
    for (Index i = 0; i < m; ++i) {
      const Index k = m == n ? i : pick(rng_);
      coords.data()[i] = n == 1 ? 0.0f : static_cast<float>(-1.0 + 2.0 * static_cast<double>(k) / static_cast<double>(n - 1));
      target.data()[i] = clip[static_cast<std::size_t>(k)];
    }
    const Tensor<float> out = sample_signal(inr, coords);
    pred = slice(out, 1, 0, 1);
    if (np) logvar = slice(out, 1, 1, 1);
  }
  const Tensor<float> sq = mse_loss(pred.detach(), target);
  mse = static_cast<double>(sq.item());
  return np ? np_nll_loss(NpPrediction<float>{pred, logvar}, target) : mse_loss(pred, target);
}

double Trainer::step() {
  if (order_.empty() || cursor_ >= order_.size()) {
    order_ = train_set_;
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  const std::size_t b = std::min<std::size_t>(static_cast<std::size_t>(cfg_.batch_size), order_.size() - cursor_);
  const double lr = lr_at(cfg_.scheduler, cfg_.lr, step_, total_steps());

  model_.params().zero_grad();
  Tape<float> tape;
  double loss_value = 0.0;
  {
    TapeScope<float> scope(tape);
    std::vector<Tensor<float>> losses;
    double mse_sum = 0.0;
    try {
      for (std::size_t i = 0; i < b; ++i) {
        double mse = 0.0;
        losses.push_back(reshape(instance_loss(order_[cursor_ + i], mse), {1}));
        mse_sum += mse;
      }
    } catch (const NonFiniteError& e) {
      throw TrainingDiverged(std::string("non-finite value at step ") + std::to_string(step_) + ": " + e.what());
    }
    Tensor<float> total = scale(sum(concat(losses, 0)), 1.0f / static_cast<float>(b));
    loss_value = static_cast<double>(total.item());
    last_mse_ = mse_sum / static_cast<double>(b);
    if (!std::isfinite(loss_value)) {
      throw TrainingDiverged("non-finite loss at step " + std::to_string(step_));
    }
    try {
      tape.backward(total);
    } catch (const NonFiniteError& e) {
      throw TrainingDiverged(std::string("non-finite gradient at step ") + std::to_string(step_) + ": " + e.what());
    }
  }
  adam_->step(lr);
  cursor_ += b;
  ++step_;
  return loss_value;
}

std::vector<Index> Trainer::eval_views(Index instance) const {
  if (cfg_.task != Task::nvs) return {0};
  const auto n = static_cast<Index>(ds_.objects[static_cast<std::size_t>(instance)].views.size());
  if (n == 1) return {0};
  std::vector<Index> v;
  for (Index i = 1; i < n; ++i) v.push_back(i);
  return v;
}

Image Trainer::target(Index instance, Index view) const { return view_image(instance, view); }

Image Trainer::render(Index instance, Index input_view, const Camera& cam) const {
  NoGradScope<float> guard;
  const Inr<float> inr = model_.instantiate(observation(instance, input_view));
  Image img(cam.height, cam.width, 3);
  const std::vector<Index> all = all_pixels(cam);
  for (std::size_t start = 0; start < all.size(); start += kRenderChunk) {
    const std::size_t end = std::min(all.size(), start + kRenderChunk);
    const std::vector<Index> chunk(all.begin() + static_cast<std::ptrdiff_t>(start),
                                   all.begin() + static_cast<std::ptrdiff_t>(end));
    const RenderResult<float> r = render_rays(inr, make_rays(cam, chunk, cfg_.near, cfg_.far), cfg_.n_samples,
                                              cfg_.white_bg);
    std::copy(r.rgb.data(), r.rgb.data() + r.rgb.size(), img.pixels.begin() + static_cast<std::ptrdiff_t>(start * 3));
  }
  return img;
}

Image Trainer::predict(Index instance, Index view) const {
  if (cfg_.task == Task::nvs) {
    return render(instance, 0, ds_.objects[static_cast<std::size_t>(instance)].views[static_cast<std::size_t>(view)].camera);
  }
  NoGradScope<float> guard;
  const Inr<float> inr = model_.instantiate(observation(instance, 0));
  if (cfg_.task == Task::image) {
    const Index size = ds_.image_size();
    const Tensor<float> out = sample_signal(inr, image_coords<float>(size, size));
    Image img(size, size, 3);
    for (Index i = 0; i < size * size; ++i) {
      for (Index c = 0; c < 3; ++c) img.pixels[static_cast<std::size_t>(i * 3 + c)] = out.data()[i * out.dim(1) + c];
    }
    return img;
  }
  const Index n = ds_.clip_length();
  const Tensor<float> out = sample_signal(inr, signal_coords<float>(n));
  std::vector<float> samples(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) samples[static_cast<std::size_t>(i)] = out.data()[i * out.dim(1)];
  return clip_image(samples);
}

EvalTable Trainer::evaluate(const std::string& split, const Predictor& predictor) const {
  EvalTable table;
  table.split = split;
  for (Index inst : instances(split)) {
    for (Index view : eval_views(inst)) {
      const Image truth = target(inst, view);
      const Image pred = predictor ? predictor(inst, view) : predict(inst, view);
      EvalRow row;
      row.instance = inst;
      row.klass = cfg_.task == Task::audio ? "audio" : ds_.objects[static_cast<std::size_t>(inst)].klass;
      row.view = view;
      row.psnr = psnr(truth, pred);
      row.ssim = cfg_.task == Task::audio ? std::numeric_limits<double>::quiet_NaN() : ssim(truth, pred);
      table.rows.push_back(row);
    }
  }
  return table;
}

TensorArchive Trainer::checkpoint() const {
  std::map<std::string, std::string> meta;
  meta["step"] = std::to_string(step_);
  meta["task"] = to_string(cfg_.task);
  meta["algorithm"] = to_string(cfg_.algorithm);
  meta["strategy"] = to_string(cfg_.strategy);
  meta["seed"] = std::to_string(cfg_.seed);
  meta["plan"] = model_.plan().serialize();
  return model_.to_archive(meta);
}

void Trainer::dump_norms(const fs::path& path, const std::string& reason) const {
  std::ofstream os(path);
  os << "# " << reason << "\n";
  os << "name,value_norm,grad_norm\n";
  auto norm = [](const auto& buf) {
    double acc = 0.0;
    for (Index i = 0; i < buf.size(); ++i) acc += static_cast<double>(buf[i]) * static_cast<double>(buf[i]);
    return std::sqrt(acc);
  };
  for (const auto& [name, t] : model_.params()) {
    os << name << "," << fmt(norm(t.values())) << "," << (t.has_grad() ? fmt(norm(t.grad())) : "none") << "\n";
  }
}

// ---------------------------------------------------------------------------
// Runs

namespace {

fs::path checkpoint_path(const fs::path& dir, Index step) { return dir / ("step" + std::to_string(step) + ".hfa"); }

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

}  // namespace

TrainResult train(const Config& config, const fs::path& run_dir, const TrainOptions& options) {
  const TrainConfig cfg = to_train_config(config);
  validate_paths(cfg);
  Trainer trainer(cfg, load_dataset(cfg.data_path));

  fs::create_directories(run_dir);
  write_text(run_dir / "config.snapshot", config.snapshot());
  std::ofstream metrics(run_dir / "metrics.csv", std::ios::binary);
  metrics << "step,split,psnr,ssim,loss\n";

  TrainResult result;
  result.run_dir = run_dir;
  auto save = [&] {
    const fs::path p = checkpoint_path(run_dir, trainer.steps_done());
    save_archive(trainer.checkpoint(), p);
    result.checkpoints.push_back(p);
  };
  save();

  const Index total = trainer.total_steps();
  const Index log_every = cfg.log_every > 0 ? cfg.log_every : trainer.steps_per_epoch();
  double loss_acc = 0.0, mse_acc = 0.0;
  Index since_log = 0;
  for (Index s = 0; s < total; ++s) {
    double loss = 0.0;
    try {
      loss = trainer.step();
    } catch (const TrainingDiverged& e) {
      trainer.dump_norms(run_dir / "nan_dump.txt", e.what());
      metrics.flush();
      throw TrainingDiverged(std::string(e.what()) + " (norms written to " + (run_dir / "nan_dump.txt").string() + ")");
    }
    loss_acc += loss;
    mse_acc += trainer.last_mse();
    ++since_log;
    result.final_loss = loss;
    const Index done = trainer.steps_done();
    if (done % log_every == 0 || done == total) {
      const double mse = mse_acc / static_cast<double>(since_log);
      const double l = loss_acc / static_cast<double>(since_log);
      metrics << done << ",train," << fmt(psnr_from_mse(mse)) << ",nan," << fmt(l) << "\n";
      if (options.log != nullptr) {
        *options.log << "step " << done << "/" << total << " loss " << fmt(l) << " psnr " << fmt(psnr_from_mse(mse))
                     << "\n";
      }
      loss_acc = mse_acc = 0.0;
      since_log = 0;
    }
    if (cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done != total) save();
  }
  if (total > 0) save();
  result.steps = trainer.steps_done();

  if (options.final_eval && total > 0) {
    EvalTable table = trainer.evaluate("train");
    metrics << trainer.steps_done() << ",eval_train," << fmt(table.mean_psnr()) << "," << fmt(table.mean_ssim())
            << ",nan\n";
    write_text(run_dir / "eval_train.csv", table.csv());
    if (options.log != nullptr) *options.log << table.pretty();
    result.train_eval = std::move(table);
  }
  metrics.flush();
  if (!metrics) throw std::runtime_error("failed writing metrics.csv");
  return result;
}

fs::path latest_checkpoint(const fs::path& run_dir) {
  if (!fs::is_directory(run_dir)) throw std::runtime_error("run directory " + run_dir.string() + " does not exist");
  const std::regex pattern(R"(step(\d+)\.hfa)");
  Index best = -1;
  fs::path path;
  for (const auto& entry : fs::directory_iterator(run_dir)) {
    std::smatch m;
    const std::string name = entry.path().filename().string();
    if (std::regex_match(name, m, pattern)) {
      const Index step = std::stoll(m[1].str());
      if (step > best) {
        best = step;
        path = entry.path();
      }
    }
  }
  if (best < 0) throw std::runtime_error("no checkpoint in " + run_dir.string());
  return path;
}

Trainer load_run(const fs::path& run_dir) {
  const fs::path ckpt = latest_checkpoint(run_dir);
  const TrainConfig cfg = to_train_config(Config::from_file(run_dir / "config.snapshot"));
  Trainer trainer(cfg, load_dataset(cfg.data_path), false);
  trainer.model().load_values(load_archive(ckpt), "", true);
  return trainer;
}

EvalTable evaluate_run(const fs::path& run_dir, const std::string& split) {
  const Trainer trainer = load_run(run_dir);
  EvalTable table = trainer.evaluate(split);
  write_text(run_dir / ("eval_" + split + ".csv"), table.csv());
  return table;
}

// ---------------------------------------------------------------------------
// Backbone pretraining

PretrainResult pretrain_backbone(const TrainConfig& cfg, const Dataset& ds, Index epochs, std::ostream* log) {
  const ModelSpec spec = model_spec(cfg, ds);
  ParamStore<float> enc_store;
  std::mt19937_64 rng(cfg.seed);
  EncoderStack<float> encoder(enc_store, spec.encoder, rng);
  ParamStore<float> dec_store;
  const Index in = spec.encoder.token_input_dim();
  const Tensor<float> dec_w = dec_store.add("decoder.weight", init::xavier<float>(in, spec.encoder.width, rng));
  const Tensor<float> dec_b = dec_store.add("decoder.bias", Tensor<float>::zeros({in}));

  // Corpus: every view of every training object, or every training clip.
  std::vector<Tensor<float>> corpus;
  if (spec.encoder.modality == Modality::image) {
    for (const auto& o : ds.objects) {
      if (o.split != "train") continue;
      if (!cfg.train_classes.empty() && !contains(cfg.train_classes, o.klass)) continue;
      for (std::size_t v = 0; v < o.views.size(); ++v) corpus.push_back(ds.load_view(o, v).to_tensor<float>());
    }
  } else {
    for (const auto& c : ds.clips) {
      if (c.split != "train") continue;
      const auto clip = ds.load_clip(c);
      Tensor<float> t = Tensor<float>::zeros({spec.encoder.audio_length});
      std::copy(clip.begin(), clip.end(), t.data());
      corpus.push_back(t);
    }
  }
  if (corpus.empty()) throw std::runtime_error("pretraining corpus is empty");
  const Index m = spec.encoder.data_tokens();

  auto masked_loss = [&](const Tensor<float>& obs, std::mt19937_64& mask_rng) {
    std::vector<Index> order(static_cast<std::size_t>(m));
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), mask_rng);
    Tensor<float> keep = Tensor<float>::ones({m, 1});
    Tensor<float> hidden = Tensor<float>::zeros({m, 1});
    for (Index i = 0; i < m / 2; ++i) {
      keep.data()[order[static_cast<std::size_t>(i)]] = 0.0f;
      hidden.data()[order[static_cast<std::size_t>(i)]] = 1.0f;
    }
    const Tensor<float> patches = encoder.flatten_tokens(obs);
    Tensor<float> tokens = add(linear(mul(patches, keep), enc_store.at("encoder.embed.weight"),
                                      enc_store.at("encoder.embed.bias")),
                               enc_store.at("encoder.embed.pos"));
    Tensor<float> out = encoder.encode(tokens, Tensor<float>()).first;
    Tensor<float> recon = linear(out, dec_w, dec_b);
    Tensor<float> diff = mul(sub(recon, patches), hidden);
    const float denom = static_cast<float>((m / 2) * in);
    return scale(sum(mul(diff, diff)), 1.0f / denom);
  };

  auto corpus_loss = [&] {
    NoGradScope<float> guard;
    std::mt19937_64 mask_rng(instance_seed(cfg.seed, -5));
    double acc = 0.0;
    for (const auto& obs : corpus) acc += static_cast<double>(masked_loss(obs, mask_rng).item());
    return acc / static_cast<double>(corpus.size());
  };

  PretrainResult result;
  result.epoch_losses.push_back(corpus_loss());
  Adam<float> enc_opt(enc_store);
  Adam<float> dec_opt(dec_store);
  const Index batch = std::min<Index>(cfg.batch_size, static_cast<Index>(corpus.size()));
  const Index steps_per_epoch = (static_cast<Index>(corpus.size()) + batch - 1) / batch;
  const Index total = epochs * steps_per_epoch;
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  Index step = 0;
  for (Index e = 0; e < epochs; ++e) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(batch));
      enc_store.zero_grad();
      dec_store.zero_grad();
      Tape<float> tape;
      {
        TapeScope<float> scope(tape);
        std::vector<Tensor<float>> losses;
        for (std::size_t i = start; i < end; ++i) losses.push_back(reshape(masked_loss(corpus[order[i]], rng), {1}));
        Tensor<float> total_loss = scale(sum(concat(losses, 0)), 1.0f / static_cast<float>(end - start));
        if (!std::isfinite(total_loss.item())) throw TrainingDiverged("non-finite pretraining loss");
        tape.backward(total_loss);
      }
      const double lr = lr_at(cfg.scheduler, cfg.lr, step++, total);
      enc_opt.step(lr);
      dec_opt.step(lr);
    }
    result.epoch_losses.push_back(corpus_loss());
    if (log != nullptr) *log << "epoch " << e + 1 << "/" << epochs << " loss " << fmt(result.epoch_losses.back()) << "\n";
  }

  result.archive.metadata["kind"] = "backbone";
  result.archive.metadata["modality"] = spec.encoder.modality == Modality::image ? "image" : "audio";
  result.archive.metadata["width"] = std::to_string(spec.encoder.width);
  result.archive.metadata["depth"] = std::to_string(spec.encoder.depth);
  result.archive.metadata["heads"] = std::to_string(spec.encoder.heads);
  result.archive.metadata["patch"] = std::to_string(spec.encoder.patch);
  result.archive.metadata["epochs"] = std::to_string(epochs);
  for (const auto& [name, t] : enc_store) result.archive.put(name, ArchivedTensor::from_tensor(t));
  return result;
}

}  // namespace hyperfield
