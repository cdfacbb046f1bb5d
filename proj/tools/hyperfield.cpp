// SPDX-License-Identifier: Apache-2.0
// hyperfield: dataset generation, training, evaluation and inspection.

#include "hyperfield/archive.hpp"
#include "hyperfield/config.hpp"
#include "hyperfield/dataset.hpp"
#include "hyperfield/gradcheck_suite.hpp"
#include "hyperfield/trainer.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>

namespace fs = std::filesystem;
using namespace hyperfield;

namespace {

constexpr int kOk = 0;
constexpr int kInvalid = 1;
constexpr int kFailed = 2;

struct ConfigArgs {
  std::string config_path;
  std::vector<std::string> overrides;
  std::optional<std::uint64_t> seed;
  bool full_inr = false;
  bool white_bg = false;
  bool black_bg = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "config file (section.key = value)");
    cmd->add_option("-s,--set", overrides, "override, key=value (repeatable)");
    cmd->add_option("overrides", overrides, "further key=value overrides");
    cmd->add_option("--seed", seed, "run.seed");
    cmd->add_flag("--full-inr", full_inr, "six 256-wide INR layers");
    auto* w = cmd->add_flag("--white-bg", white_bg, "composite on white");
    auto* b = cmd->add_flag("--black-bg", black_bg, "composite on black");
    w->excludes(b);
  }

  Config resolve() const {
    Config c = config_path.empty() ? Config() : Config::from_file(config_path);
    for (const auto& o : overrides) c.apply_override(o);
    if (seed) c.set("run.seed", std::to_string(*seed));
    if (full_inr) c.set("inr.full", "true");
    if (white_bg) c.set("render.white_bg", "true");
    if (black_bg) c.set("render.white_bg", "false");
    return c;
  }
};

std::string shape_string(const std::vector<std::uint64_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  return os.str() + "]";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Transformer hypernetworks for implicit neural representations"};
  app.require_subcommand(1);

  // make-dataset
  auto* make = app.add_subcommand("make-dataset", "generate a synthetic dataset");
  std::string make_task = "nvs";
  std::string make_out;
  std::uint64_t make_seed = 0;
  SceneSpec scene;
  AudioSpec audio;
  std::string classes;
  make->add_option("--task", make_task, "nvs or audio")->check(CLI::IsMember({"nvs", "audio"}));
  make->add_option("-o,--out", make_out, "output directory")->required();
  make->add_option("--seed", make_seed, "generator seed");
  make->add_option("--objects-per-class", scene.objects_per_class);
  make->add_option("--views", scene.views_per_object);
  make->add_option("--size", scene.image_size, "image side in pixels");
  make->add_option("--classes", classes, "comma-separated object classes");
  make->add_option("--test-fraction", scene.test_fraction);
  make->add_option("--clips", audio.clips);
  make->add_option("--tone", audio.tone_hz, "pure tone frequency; 0 for random mixtures");
  make->add_option("--min-freq", audio.min_freq);
  make->add_option("--max-freq", audio.max_freq);

  // pretrain-backbone
  auto* pre = app.add_subcommand("pretrain-backbone", "masked-patch pretraining of the encoder");
  ConfigArgs pre_args;
  pre_args.attach(pre);
  std::string pre_out;
  std::optional<Index> pre_epochs;
  pre->add_option("-o,--out", pre_out, "backbone archive path")->required();
  pre->add_option("--epochs", pre_epochs, "defaults to optim.epochs");

  // train
  auto* tr = app.add_subcommand("train", "train a hypernetwork");
  ConfigArgs tr_args;
  tr_args.attach(tr);
  std::string tr_out;
  bool quiet = false;
  tr->add_option("-o,--out", tr_out, "run directory")->required();
  tr->add_flag("-q,--quiet", quiet);

  // eval
  auto* ev = app.add_subcommand("eval", "evaluate the latest checkpoint of a run");
  std::string ev_run, ev_split = "test";
  ev->add_option("run", ev_run, "run directory")->required();
  ev->add_option("--split", ev_split)->check(CLI::IsMember({"train", "test", "unseen"}));

  // render
  auto* rd = app.add_subcommand("render", "render a manifest pose from a trained run");
  std::string rd_run, rd_out;
  Index rd_object = 0, rd_view = 0, rd_input = 0;
  rd->add_option("run", rd_run, "run directory")->required();
  rd->add_option("--object", rd_object);
  rd->add_option("--view", rd_view, "manifest pose to render");
  rd->add_option("--input-view", rd_input, "view fed to the encoder");
  rd->add_option("-o,--out", rd_out, "PPM output path")->required();

  // gradcheck
  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient suite");
  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  gc->add_option("--seed", gc_seed);
  gc->add_option("--tolerance", gc_tol);

  // inspect-checkpoint
  auto* ins = app.add_subcommand("inspect-checkpoint", "list tensors in an archive");
  std::string ins_path;
  ins->add_option("archive", ins_path)->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kInvalid;
  }

  try {
    if (*make) {
      if (make_task == "nvs") {
        if (!classes.empty()) {
          scene.classes.clear();
          std::istringstream is(classes);
          for (std::string c; std::getline(is, c, ',');) scene.classes.push_back(c);
        }
        generate_nvs_dataset(scene, make_seed, make_out);
      } else {
        generate_audio_dataset(audio, make_seed, make_out);
      }
      std::cout << "wrote " << make_out << "\n";
      return kOk;
    }
    if (*pre) {
      const Config c = pre_args.resolve();
      TrainConfig cfg = to_train_config(c);
      if (cfg.data_path.empty()) throw ConfigError("data.path is not set", "data.path");
      const Dataset ds = load_dataset(cfg.data_path);
      const PretrainResult r = pretrain_backbone(cfg, ds, pre_epochs.value_or(cfg.epochs), &std::cout);
      save_archive(r.archive, pre_out);
      std::cout << "wrote " << pre_out << "\n";
      return kOk;
    }
    if (*tr) {
      const Config c = tr_args.resolve();
      TrainOptions opts;
      opts.log = quiet ? nullptr : &std::cout;
      const TrainResult r = train(c, tr_out, opts);
      std::cout << "trained " << r.steps << " steps; checkpoint " << r.checkpoints.back().string() << "\n";
      return kOk;
    }
    if (*ev) {
      const EvalTable t = evaluate_run(ev_run, ev_split);
      std::cout << t.pretty();
      return kOk;
    }
    if (*rd) {
      const Trainer trainer = load_run(rd_run);
      if (trainer.config().task != Task::nvs) throw ConfigError("render needs an nvs run", "task.name");
      const auto& objects = trainer.dataset().objects;
      if (rd_object < 0 || rd_object >= static_cast<Index>(objects.size())) {
        throw ConfigError("object " + std::to_string(rd_object) + " is not in the manifest");
      }
      const auto& views = objects[static_cast<std::size_t>(rd_object)].views;
      if (rd_view < 0 || rd_view >= static_cast<Index>(views.size()) || rd_input < 0 ||
          rd_input >= static_cast<Index>(views.size())) {
        throw ConfigError("view index out of range for object " + std::to_string(rd_object));
      }
      write_ppm(trainer.render(rd_object, rd_input, views[static_cast<std::size_t>(rd_view)].camera), rd_out);
      std::cout << "wrote " << rd_out << "\n";
      return kOk;
    }
    if (*gc) {
      bool ok = true;
      for (const auto& e : run_gradcheck_suite(gc_seed)) {
        const bool pass = e.max_relative_error < gc_tol;
        ok = ok && pass;
        std::printf("%-18s coords %6zu  max rel err %.3e  %s\n", e.component.c_str(), e.coordinates,
                    e.max_relative_error, pass ? "ok" : "FAIL");
      }
      return ok ? kOk : kFailed;
    }
    if (*ins) {
      const TensorArchive a = load_archive(ins_path);
      for (const auto& [k, v] : a.metadata) {
        std::istringstream lines(v);
        std::string first;
        std::getline(lines, first);
        std::cout << "meta " << k << " = " << first << (v.find('\n') != std::string::npos ? " ..." : "") << "\n";
      }
      std::uint64_t total = 0;
      for (const auto& [name, t] : a.entries) {
        std::uint64_t n = 1;
        for (auto d : t.shape) n *= d;
        total += n;
        std::cout << name << "  " << shape_string(t.shape) << "  " << dtype_name(t.dtype) << "\n";
      }
      std::cout << a.entries.size() << " tensors, " << total << " elements\n";
      return kOk;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kInvalid;
  } catch (const std::exception& e) {
    std::cerr << "failed: " << e.what() << "\n";
    return kFailed;
  }
  return kOk;
}
