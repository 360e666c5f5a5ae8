#include "ctnet/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

#include "ctnet/config.hpp"
#include "ctnet/dataset.hpp"
#include "ctnet/error.hpp"
#include "ctnet/evaluation.hpp"
#include "ctnet/explain.hpp"
#include "ctnet/scaling.hpp"
#include "ctnet/training.hpp"

namespace ctnet {

namespace fs = std::filesystem;

namespace {

struct Common {
  std::string config;
  std::uint64_t seed = 0;
  std::size_t threads = 1;
  std::string out;
};

void add_common(CLI::App* sub, Common& c, bool out_required) {
  sub->add_option("--config", c.config, "Config file of 'key = value' lines; flags win");
  sub->add_option("--seed", c.seed, "Random seed")->capture_default_str();
  sub->add_option("--threads", c.threads, "Worker threads")->capture_default_str()->check(CLI::PositiveNumber);
  auto* out = sub->add_option("--out", c.out, "Output directory");
  if (out_required) out->required();
}

// Appends "--key value" for every config-file key not given on the command line.
std::vector<std::string> merge_config(std::vector<std::string> args) {
  std::string path;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) path = args[i].substr(9);
  }
  if (path.empty()) return args;
  const auto doc = ConfigDocument::load(path);
  if (doc.sections().size() > 1) throw ConfigError("config file '" + path + "' must not contain sections");
  auto given = [&](const std::string& key) {
    return std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == "--" + key || a.rfind("--" + key + "=", 0) == 0;
    });
  };
  std::vector<std::string> extra;
  for (const auto& [k, v] : doc.global().entries) {
    if (k == "config") throw ConfigError("config file '" + path + "' must not name another config file");
    if (!given(k)) {
      extra.push_back("--" + k);
      extra.push_back(v);
    }
  }
  args.insert(args.end(), extra.begin(), extra.end());
  return args;
}

std::string option_value(const CLI::Option* o) {
  if (o->count() == 0) return o->get_default_str();
  std::string s;
  for (const auto& r : o->results()) s += (s.empty() ? "" : ",") + r;
  return s;
}

// run.meta: the subcommand and every resolved option, in the config format.
void write_meta(const CLI::App* sub, const std::string& dir) {
  std::ostringstream os;
  os << "# ctnet " << sub->get_name() << '\n';
  for (const auto* o : sub->get_options()) {
    const std::string name = o->get_single_name();
    if (name == "help" || name.empty()) continue;
    os << name << " = " << option_value(o) << '\n';
  }
  std::ofstream f(fs::path(dir) / "run.meta");
  f << os.str();
  if (!f) throw std::runtime_error("cannot write run.meta in '" + dir + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  f << text;
  if (!f) throw std::runtime_error("cannot write '" + path.string() + "'");
}

train::LabeledImages labeled(const data::DatasetManifest& m, std::vector<Tensor> images) {
  train::LabeledImages l{std::move(images), {}};
  for (const auto& r : m.records) l.labels.push_back(r.label);
  return l;
}

scaling::ScaledModelPlan plan_for(const std::string& spec, std::size_t classes) {
  auto plan = scaling::load_plan(spec, classes);
  if (plan.architecture.classes != classes) {
    throw ConfigError("plan '" + spec + "' has " + std::to_string(plan.architecture.classes) +
                      " classes but the manifest has " + std::to_string(classes));
  }
  return plan;
}

// Seeds for the separate random streams of a training run.
constexpr std::uint64_t kSplitKey = 11, kValKey = 12, kInitKey = 13;

// One image as network input: raw PGM -> [C,R,R] / 255.
Tensor network_input(const std::string& path, const nn::Network& net) {
  Tensor img = data::read_image(path);
  if (img.dim(0) != net.input_channels()) {
    throw DimensionError("image has " + std::to_string(img.dim(0)) + " channels, network expects " +
                         std::to_string(net.input_channels()));
  }
  img = data::resize(img, net.resolution(), net.resolution());
  for (auto& v : img.data()) v /= 255.0;
  return img;
}

struct TrainFlags {
  std::string manifest;
  std::string plan = "toy-b0";
  std::size_t epochs = 25;
  std::size_t batch = 16;
  double lr = 1e-4;
  double smoothing = 0.1;
  double val_fraction = 0.15;
  bool augment = true;

  void add(CLI::App* sub) {
    sub->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
    sub->add_option("--plan", plan, "Plan file or 'toy-b0'")->capture_default_str();
    sub->add_option("--epochs", epochs, "Training epochs")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--batch", batch, "Mini-batch size")->capture_default_str()->check(CLI::PositiveNumber);
    sub->add_option("--lr", lr, "Initial Adam learning rate")->capture_default_str();
    sub->add_option("--smoothing", smoothing, "Label smoothing epsilon")->capture_default_str();
    sub->add_option("--val-fraction", val_fraction, "Patient fraction held for validation")->capture_default_str();
    sub->add_option("--augment", augment, "Random augmentation during training")->capture_default_str();
  }

  train::TrainConfig config(std::uint64_t seed) const {
    train::TrainConfig c;
    c.epochs = epochs;
    c.batch_size = batch;
    c.seed = seed;
    c.learning_rate = lr;
    c.label_smoothing = smoothing;
    c.validation_fraction = val_fraction;
    if (!augment) c.augmentation = data::AugmentationConfig::none();
    return c;
  }
};

// Trains on the given record indices with a patient-wise validation split.
train::TrainResult fit(const scaling::ScaledModelPlan& plan, const data::DatasetManifest& m,
                       const train::LabeledImages& all, const std::vector<std::size_t>& train_indices,
                       const train::TrainConfig& cfg, nn::Network& net) {
  std::vector<std::string> patients;
  for (auto i : train_indices) patients.push_back(m.records[i].patient_id);
  const auto split = data::train_val_split(patients, data::patient_labels(m), cfg.validation_fraction, Rng::derive(cfg.seed, {kValKey}));
  const auto tr = all.subset(data::indices_for(m, split.train));
  const auto va = all.subset(data::indices_for(m, split.val));
  net = scaling::build_network(plan, Rng::derive(cfg.seed, {kInitKey}));
  return train::train(net, tr, va, cfg);
}

}  // namespace

int run_cli(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  CLI::App app("CT image classification: training, evaluation and saliency", "ctnet");
  app.require_subcommand(1);
  std::function<void()> action;
  CLI::App* chosen = nullptr;
  Common common;

  // gen-synthetic
  data::SyntheticConfig syn;
  auto* gen = app.add_subcommand("gen-synthetic", "Write a synthetic PGM dataset and manifest");
  add_common(gen, common, true);
  gen->add_option("--classes", syn.classes, "Classes")->capture_default_str();
  gen->add_option("--patients", syn.patients_per_class, "Patients per class")->capture_default_str();
  gen->add_option("--images", syn.images_per_patient, "Images per patient")->capture_default_str();
  gen->add_option("--resolution", syn.resolution, "Image side length")->capture_default_str();
  gen->callback([&] {
    chosen = gen;
    action = [&] {
      syn.seed = common.seed;
      const auto m = data::generate_synthetic(syn, common.out);
      write_meta(gen, common.out);
      out << "wrote " << m.records.size() << " images of " << m.patients().size() << " patients to " << common.out
          << '\n';
    };
  });

  // scale-plan
  std::string base = "toy-b0";
  scaling::ScalingCoefficients coef;
  std::size_t plan_classes = 3;
  auto* sp = app.add_subcommand("scale-plan", "Print a compound-scaled architecture plan");
  add_common(sp, common, false);
  sp->add_option("--base", base, "Base architecture file or 'toy-b0'")->capture_default_str();
  sp->add_option("--alpha", coef.alpha, "Depth coefficient")->capture_default_str();
  sp->add_option("--beta", coef.beta, "Width coefficient")->capture_default_str();
  sp->add_option("--gamma", coef.gamma, "Resolution coefficient")->capture_default_str();
  sp->add_option("--phi", coef.phi, "Compound exponent")->capture_default_str();
  sp->add_option("--classes", plan_classes, "Classes for the built-in base")->capture_default_str();
  sp->callback([&] {
    chosen = sp;
    action = [&] {
      const auto base_plan = scaling::load_plan(base, plan_classes);
      const auto plan = scaling::compound_scale(base_plan.architecture, coef);
      for (const auto& w : plan.warnings) err << "warning: " << w << '\n';
      const auto cost = scaling::count_params_flops(plan);
      std::ostringstream os;
      os << scaling::print_plan(plan);
      char cv[64];
      std::snprintf(cv, sizeof cv, "%.6g", scaling::constraint_value(coef));
      os << "\n# constraint alpha*beta^2*gamma^2 = " << cv << "\n# params = " << cost.params
         << "\n# macs = " << cost.macs << '\n';
      out << os.str();
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_text(fs::path(common.out) / "plan.cfg", os.str());
        write_meta(sp, common.out);
      }
    };
  });

  // train
  TrainFlags tf;
  std::size_t folds = 5, fold = 0;
  auto* tr = app.add_subcommand("train", "Train one model and keep the best validation checkpoint");
  add_common(tr, common, true);
  tf.add(tr);
  tr->add_option("--folds", folds, "Patient-wise folds; one is held out")->capture_default_str();
  tr->add_option("--fold", fold, "Index of the held-out fold")->capture_default_str();
  tr->callback([&] {
    chosen = tr;
    action = [&] {
      const auto m = data::load_manifest(tf.manifest);
      const auto plan = plan_for(tf.plan, m.num_classes());
      const auto all = labeled(m, data::load_images(m, plan.architecture.resolution));
      const auto split = data::patient_kfold_split(m, folds, Rng::derive(common.seed, {kSplitKey}));
      if (fold >= folds) throw ConfigError("--fold must be below --folds");
      const auto& f = split.folds[fold];

      const auto cfg = tf.config(common.seed);
      nn::Network net(1, 1, 1);
      const auto result = fit(plan, m, all, f.train_indices, cfg, net);
      auto best = scaling::network_from_checkpoint(result.best);
      const auto train_set = all.subset(f.train_indices);
      const auto test_set = all.subset(f.test_indices);
      const double train_acc = train::accuracy(train::predict(best, train_set.images), train_set.labels);
      const double test_acc = train::accuracy(train::predict(best, test_set.images), test_set.labels);

      fs::create_directories(common.out);
      const fs::path dir(common.out);
      nn::save_checkpoint((dir / "checkpoint.gsck").string(), result.best);
      std::ostringstream hist;
      hist << "epoch,train_loss,val_accuracy,lr\n";
      for (const auto& h : result.history)
        hist << h.epoch << ',' << format_real(h.train_loss) << ',' << format_real(h.val_accuracy) << ','
             << format_real(h.lr) << '\n';
      write_text(dir / "history.csv", hist.str());
      std::ostringstream summary;
      summary << "best_epoch = " << result.best.epoch << "\nval_accuracy = " << format_real(result.best.metric)
              << "\ntrain_accuracy = " << format_real(train_acc) << "\nheldout_accuracy = " << format_real(test_acc)
              << "\ntrain_images = " << train_set.size() << "\nheldout_images = " << test_set.size() << '\n';
      write_text(dir / "summary.txt", summary.str());
      write_meta(tr, common.out);
      out << summary.str();
    };
  });

  // evaluate
  TrainFlags ef;
  eval::CrossValidationOptions cv;
  std::string model_name;
  auto* ev = app.add_subcommand("evaluate", "Repeated patient-wise k-fold cross-validation");
  add_common(ev, common, true);
  ef.add(ev);
  ev->add_option("--k", cv.k, "Folds per round")->capture_default_str();
  ev->add_option("--rounds", cv.rounds, "Cross-validation rounds")->capture_default_str();
  ev->add_option("--model", model_name, "Row label in the report (default: plan name)");
  ev->callback([&] {
    chosen = ev;
    action = [&] {
      const auto m = data::load_manifest(ef.manifest);
      const auto plan = plan_for(ef.plan, m.num_classes());
      const auto all = labeled(m, data::load_images(m, plan.architecture.resolution));
      cv.seed = common.seed;
      cv.threads = common.threads;
      const auto procedure = [&](const data::DatasetManifest& man, const std::vector<std::size_t>& train_idx,
                                 const std::vector<std::size_t>& test_idx, std::uint64_t seed) {
        nn::Network net(1, 1, 1);
        const auto result = fit(plan, man, all, train_idx, ef.config(seed), net);
        auto best = scaling::network_from_checkpoint(result.best);
        return train::predict(best, all.subset(test_idx).images);
      };
      const auto res = eval::cross_validate(procedure, m, cv);
      const std::vector<eval::ModelReport> reports{
          {model_name.empty() ? plan.architecture.name : model_name, res.report}};
      std::string table;
      for (std::size_t c = 0; c < m.num_classes(); ++c)
        table += (c ? "\n" : "") + eval::render_table(reports, c, m.class_names);
      if (res.report.rounds == 1) table += "\nnote: one round; half-widths are reported as 0\n";
      fs::create_directories(common.out);
      write_text(fs::path(common.out) / "report.txt", table);
      write_text(fs::path(common.out) / "report.csv", eval::render_csv(reports, m.class_names));
      write_meta(ev, common.out);
      out << table;
    };
  });

  // gradcam
  std::string checkpoint, image, layer, score = "logit";
  long target = -1;
  auto* gc = app.add_subcommand("gradcam", "Class saliency heatmap for one image");
  add_common(gc, common, true);
  gc->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  gc->add_option("--image", image, "Grayscale PGM image")->required();
  gc->add_option("--class", target, "Target class (default: predicted class)")->capture_default_str();
  gc->add_option("--layer", layer, "Layer name (default: last convolution)");
  gc->add_option("--score", score, "Class score: logit or probability")
      ->capture_default_str()
      ->check(CLI::IsMember({"logit", "probability"}));
  gc->callback([&] {
    chosen = gc;
    action = [&] {
      auto net = scaling::network_from_checkpoint(nn::load_checkpoint(checkpoint));
      const Tensor input = network_input(image, net);
      std::size_t cls = 0;
      if (target < 0) {
        const Tensor p = net.forward(input.reshaped({1, input.dim(0), input.dim(1), input.dim(2)}));
        for (std::size_t c = 1; c < p.size(); ++c)
          if (p[c] > p[cls]) cls = c;
      } else {
        cls = static_cast<std::size_t>(target);
      }
      explain::GradCamOptions opt;
      opt.layer = layer;
      opt.score = score == "probability" ? explain::TargetScore::probability : explain::TargetScore::logit;
      const auto hm = explain::gradcam(net, input, cls, opt);

      const Tensor heat = explain::to_byte_image(hm.upsampled);
      Tensor gray = input;
      for (auto& v : gray.data()) v = std::round(v * 255.0);
      const Tensor over = explain::overlay(gray, heat);
      const auto stats = explain::mask_stats(heat);
      const double overlay_mean = [&] {
        if (stats.mask.empty()) return 0.0;
        const std::size_t plane = heat.size();
        double s = 0;
        for (auto i : stats.mask)
          for (std::size_t c = 0; c < 3; ++c) s += over[c * plane + i];
        return s / static_cast<double>(3 * stats.mask.size());
      }();

      fs::create_directories(common.out);
      const fs::path dir(common.out);
      data::write_image((dir / "heatmap.pgm").string(), heat);
      data::write_image((dir / "overlay.ppm").string(), over);
      std::ostringstream csv;
      csv << "layer,class,mean,sd,threshold,mask_pixels,mask_mean,empty,overlay_mask_mean\n"
          << hm.layer << ',' << cls << ',' << format_real(stats.mean) << ',' << format_real(stats.sd) << ','
          << format_real(stats.threshold) << ',' << stats.mask.size() << ',' << format_real(stats.mask_mean) << ','
          << (stats.empty ? "true" : "false") << ',' << format_real(overlay_mean) << '\n';
      write_text(dir / "mask.csv", csv.str());
      write_meta(gc, common.out);
      out << "layer " << hm.layer << ", class " << cls << ", mask " << stats.mask.size() << " pixels\n";
    };
  });

  // activations
  std::string act_checkpoint, act_image;
  std::vector<std::string> act_layers;
  auto* ac = app.add_subcommand("activations", "Intermediate activation grids for one image");
  add_common(ac, common, true);
  ac->add_option("--checkpoint", act_checkpoint, "Checkpoint file")->required();
  ac->add_option("--image", act_image, "Grayscale PGM image")->required();
  ac->add_option("--layers", act_layers, "Layer names (default: every convolution)")->delimiter(',');
  ac->callback([&] {
    chosen = ac;
    action = [&] {
      auto net = scaling::network_from_checkpoint(nn::load_checkpoint(act_checkpoint));
      const auto dumps = explain::activation_dump(net, network_input(act_image, net), act_layers);
      fs::create_directories(common.out);
      std::ostringstream csv;
      csv << "layer,filters,height,width,file\n";
      for (const auto& d : dumps) {
        const std::string file = d.layer + ".pgm";
        data::write_image((fs::path(common.out) / file).string(), d.grid);
        csv << d.layer << ',' << d.filters << ',' << d.height << ',' << d.width << ',' << file << '\n';
      }
      write_text(fs::path(common.out) / "activations.csv", csv.str());
      write_meta(ac, common.out);
      out << "wrote " << dumps.size() << " activation grids\n";
    };
  });

  // bench
  std::string bench_checkpoint;
  std::size_t bench_n = 1000;
  auto* bn = app.add_subcommand("bench", "Time single-image inference");
  add_common(bn, common, false);
  bn->add_option("--checkpoint", bench_checkpoint, "Checkpoint file")->required();
  bn->add_option("--n", bench_n, "Images to predict")->capture_default_str()->check(CLI::PositiveNumber);
  bn->callback([&] {
    chosen = bn;
    action = [&] {
      auto net = scaling::network_from_checkpoint(nn::load_checkpoint(bench_checkpoint));
      const std::size_t r = net.resolution(), c = net.input_channels();
      std::vector<Tensor> inputs;
      Rng rng(common.seed);
      for (std::size_t i = 0; i < bench_n; ++i) {
        Tensor x({1, c, r, r});
        for (auto& v : x.data()) v = rng.uniform();
        inputs.push_back(std::move(x));
      }
      const auto report = eval::time_runs(bench_n, [&](std::size_t i) { net.forward(inputs[i]); });
      out << report.csv_line() << '\n';
      if (!common.out.empty()) {
        fs::create_directories(common.out);
        write_text(fs::path(common.out) / "timing.csv", eval::TimingReport::csv_header() + "\n" + report.csv_line() + "\n");
        write_meta(bn, common.out);
      }
    };
  });

  try {
    auto args = merge_config(raw_args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::CallForHelp&) {
    const CLI::App* sub = chosen;
    for (const auto* s : app.get_subcommands()) sub = s;
    out << (sub ? sub->help() : app.help());
    return 0;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    const CLI::App* sub = nullptr;
    for (const auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return 2;
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }

  try {
    action();
  } catch (const std::exception& e) {
    std::string msg = e.what();
    std::replace(msg.begin(), msg.end(), '\n', ' ');
    err << "error: " << msg << '\n';
    return 1;
  }
  return 0;
}

}  // namespace ctnet
