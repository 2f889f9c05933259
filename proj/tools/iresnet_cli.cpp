#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "iresnet/datapipe.hpp"
#include "iresnet/reg_analysis.hpp"
#include "iresnet/saliency.hpp"

namespace fs = std::filesystem;
using namespace iresnet;

namespace {

ForwardOperator make_operator(const std::string& name) {
  if (name == "blur") return GaussianBlurOp();
  if (name == "pm") return PeronaMalikOp{};
  if (name == "heat") return ImplicitHeatStep{};
  if (name == "identity") return IdentityOp{};
  throw std::invalid_argument("unknown operator '" + name + "'");
}

const std::vector<std::string> kOperators{"blur", "pm", "heat", "identity"};
const std::vector<std::string> kSplits{"train", "val", "test", "all"};

std::vector<ImageGrid> split_images(const Dataset& ds, const std::string& split, std::size_t limit) {
  std::span<const ImageGrid> s = split == "train" ? ds.train()
                                 : split == "val" ? ds.val()
                                 : split == "test" ? ds.test()
                                                   : std::span<const ImageGrid>(ds.images());
  if (s.empty()) throw std::invalid_argument("split '" + split + "' is empty");
  if (limit > 0 && limit < s.size()) s = s.first(limit);
  return {s.begin(), s.end()};
}

std::string idx_name(const std::string& stem, std::size_t i, const std::string& ext) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04zu", i);
  return stem + "_" + buf + ext;
}

/// Values of every option of a subcommand, as given or defaulted.
KeyValues option_values(const CLI::App* app) {
  KeyValues kv;
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_single_name();
    if (name.empty() || name == "help" || name == "config") continue;
    std::string value;
    if (opt->count() > 0) {
      for (const auto& r : opt->results()) value += (value.empty() ? "" : ",") + r;
    } else {
      value = opt->get_default_str();
      if (value == "{}") value.clear();
    }
    kv[name] = value;
  }
  return kv;
}

/// Fills options not given on the command line from a key=value file.
void apply_config(CLI::App* app, const std::string& path) {
  if (path.empty()) return;
  for (const auto& [key, value] : read_key_values(path)) {
    if (key == "command") continue;
    CLI::Option* opt = app->get_option_no_throw("--" + key);
    if (!opt) throw std::invalid_argument(path + ": unknown option '" + key + "'");
    if (opt->count() > 0) continue;
    if (opt->get_items_expected_max() > 1) {
      std::stringstream ss(value);
      std::string item;
      while (std::getline(ss, item, ',')) opt->add_result(item);
    } else {
      opt->add_result(value);
    }
    opt->run_callback();
  }
}

void write_manifest(const fs::path& dir, const std::string& command, const CLI::App* app,
                    const KeyValues& extra = {}) {
  KeyValues kv = option_values(app);
  kv["command"] = command;
  for (const auto& [k, v] : extra) kv["result." + k] = v;
  write_key_values(dir / "manifest.txt", kv);
}

struct Command {
  CLI::App* app;
  std::string name;
  std::string config;
  std::function<void()> run;
};

struct ModelFlags {
  int subnets = 6, channels = 8, hidden = 16, kernel = 5;
  double lip = 0.999;
  double init_fraction = 0.1;
  double init_threshold = 1e-3;
  std::uint64_t seed = 0;

  void add(CLI::App* app) {
    app->add_option("--N", subnets, "number of subnetworks")->check(CLI::PositiveNumber);
    app->add_option("--M", channels, "lifted channels")->check(CLI::PositiveNumber);
    app->add_option("--hidden", hidden, "hidden channels per subnetwork")->check(CLI::PositiveNumber);
    app->add_option("--kernel", kernel, "odd spatial kernel size")->check(CLI::Range(1, 15));
    app->add_option("--L", lip, "network Lipschitz parameter")->check(CLI::Range(0.0, 0.999999));
    app->add_option("--init-fraction", init_fraction, "initial factor norm relative to budget")
        ->check(CLI::PositiveNumber);
    app->add_option("--init-threshold", init_threshold, "initial shrinkage threshold");
    app->add_option("--seed", seed, "model initialization seed");
  }

  ArchitectureConfig config(int height, int width) const {
    if (kernel % 2 == 0) throw std::invalid_argument("--kernel must be odd");
    ArchitectureConfig c;
    c.subnets = subnets;
    c.channels = channels;
    c.hidden = hidden;
    c.kernel = kernel;
    c.lip = lip;
    c.height = height;
    c.width = width;
    c.init_fraction = init_fraction;
    c.init_threshold = init_threshold;
    c.seed = seed;
    return c;
  }
};

/// Image source for per-image studies: a dataset entry or a PGM file.
struct ImageFlags {
  std::string data, image, split = "test";
  std::size_t index = 0;

  void add(CLI::App* app) {
    auto* d = app->add_option("--data", data, "dataset file");
    auto* i = app->add_option("--image", image, "plain PGM image");
    d->excludes(i);
    app->add_option("--split", split, "dataset split")->check(CLI::IsMember(kSplits));
    app->add_option("--index", index, "image index within the split");
  }

  ImageGrid load() const {
    if (!image.empty()) return read_pgm(image);
    if (data.empty()) throw std::invalid_argument("one of --data or --image is required");
    auto imgs = split_images(load_dataset(data), split, 0);
    if (index >= imgs.size()) throw std::invalid_argument("--index out of range for the split");
    return imgs[index];
  }
};

Checkpoint load_model(const std::string& path, const ImageGrid* shape_of = nullptr) {
  if (!fs::exists(path)) throw std::runtime_error("checkpoint not found: " + path);
  Checkpoint cp = load_checkpoint(path);
  if (shape_of && (shape_of->height() != cp.model.height() || shape_of->width() != cp.model.width()))
    throw std::invalid_argument("image is " + std::to_string(shape_of->height()) + "x" +
                                std::to_string(shape_of->width()) + " but " + path +
                                " was built for " + std::to_string(cp.model.height()) + "x" +
                                std::to_string(cp.model.width()));
  return cp;
}

double model_lip(const Checkpoint& cp) {
  auto it = cp.meta.find("L");
  return it != cp.meta.end() ? parse_double(it->second) : cp.model.lip_param();
}

void add_synth(CLI::App& root, std::vector<Command>& cmds) {
  auto* app = root.add_subcommand("synth-data", "generate a synthetic dataset");
  struct Flags {
    std::size_t n = 608;
    int size = 32;
    std::uint64_t seed = 0;
    std::string out;
    std::vector<std::size_t> splits;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--n", f->n, "number of images")->check(CLI::PositiveNumber);
  app->add_option("--size", f->size, "image side length (>= 16)")->check(CLI::Range(16, 4096));
  app->add_option("--seed", f->seed, "generator seed");
  app->add_option("--splits", f->splits, "train,val,test counts")->expected(3)->delimiter(',');
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "synth-data", {}, [f, app] {
                    std::optional<SplitCounts> s;
                    if (!f->splits.empty()) s = SplitCounts{f->splits[0], f->splits[1], f->splits[2]};
                    const Dataset ds = synth_dataset(f->n, f->size, f->seed, s);
                    fs::create_directories(f->out);
                    save_dataset(fs::path(f->out) / "dataset.bin", ds, {{"seed", std::to_string(f->seed)}});
                    write_manifest(f->out, "synth-data", app,
                                   {{"count", std::to_string(ds.size())},
                                    {"height", std::to_string(ds.height())},
                                    {"width", std::to_string(ds.width())},
                                    {"train", std::to_string(ds.splits().train)},
                                    {"val", std::to_string(ds.splits().val)},
                                    {"test", std::to_string(ds.splits().test)}});
                    std::cout << "wrote " << ds.size() << " images to " << f->out << "\n";
                  }});
}

void add_import(CLI::App& root, std::vector<Command>& cmds) {
  auto* app = root.add_subcommand("import-raw", "import 8-bit channel-major column-major records");
  struct Flags {
    std::string input, out;
    int width = 96, height = 96, channels = 3;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--input", f->input, "raw binary file")->required()->check(CLI::ExistingFile);
  app->add_option("--width", f->width, "record width")->check(CLI::PositiveNumber);
  app->add_option("--height", f->height, "record height")->check(CLI::PositiveNumber);
  app->add_option("--channels", f->channels, "1 or 3")->check(CLI::IsMember({1, 3}));
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "import-raw", {}, [f, app] {
                    const Dataset ds = import_raw(f->input, f->width, f->height, f->channels);
                    fs::create_directories(f->out);
                    save_dataset(fs::path(f->out) / "dataset.bin", ds);
                    write_manifest(f->out, "import-raw", app, {{"count", std::to_string(ds.size())}});
                    std::cout << "imported " << ds.size() << " images\n";
                  }});
}

void add_init(CLI::App& root, std::vector<Command>& cmds) {
  auto* app = root.add_subcommand("init", "write an untrained model checkpoint");
  struct Flags {
    ModelFlags model;
    bool identity = false;
    int height = 32, width = 32;
    std::string out;
  };
  auto f = std::make_shared<Flags>();
  f->model.add(app);
  app->add_flag("--identity", f->identity, "zero residuals (identity map)");
  app->add_option("--height", f->height, "input height")->check(CLI::PositiveNumber);
  app->add_option("--width", f->width, "input width")->check(CLI::PositiveNumber);
  app->add_option("--out", f->out, "checkpoint path")->required();
  cmds.push_back({app, "init", {}, [f] {
                    const auto cfg = f->model.config(f->height, f->width);
                    IResNet model = f->identity
                                        ? make_identity_iresnet(cfg.subnets, cfg.channels, cfg.hidden,
                                                                cfg.height, cfg.width, cfg.lip, cfg.kernel)
                                        : make_iresnet(cfg);
                    save_checkpoint(f->out, model, nullptr,
                                    {{"L", format_double(cfg.lip)}, {"seed", std::to_string(cfg.seed)},
                                     {"identity", f->identity ? "1" : "0"}});
                    std::cout << "wrote " << f->out << "\n";
                  }});
}

void add_train(CLI::App& root, std::vector<Command>& cmds) {
  auto* app = root.add_subcommand("train", "train an iResNet on a dataset");
  struct Flags {
    ModelFlags model;
    std::string data, out, op = "blur", objective = "reconstruction";
    double delta = 0.05, lr = 1e-3, tol = 1e-6;
    int epochs = 10, batch = 16, max_iter = 200, checkpoint_every = 0, power_iters = 1;
    std::size_t max_train = 0, max_val = 0;
    std::uint64_t noise_seed = 1, shuffle_seed = 2;
    bool quiet = false;
  };
  auto f = std::make_shared<Flags>();
  f->model.add(app);
  app->add_option("--data", f->data, "dataset file")->required()->check(CLI::ExistingFile);
  app->add_option("--out-dir", f->out, "run directory")->required();
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--objective", f->objective, "reconstruction | approximation")
      ->check(CLI::IsMember({"reconstruction", "approximation"}));
  app->add_option("--delta", f->delta, "noise level")->check(CLI::NonNegativeNumber);
  app->add_option("--epochs", f->epochs, "training epochs")->check(CLI::NonNegativeNumber);
  app->add_option("--batch-size", f->batch, "mini-batch size")->check(CLI::PositiveNumber);
  app->add_option("--lr", f->lr, "Adam learning rate")->check(CLI::PositiveNumber);
  app->add_option("--tol", f->tol, "fixed-point tolerance")->check(CLI::PositiveNumber);
  app->add_option("--max-iter", f->max_iter, "fixed-point iteration cap")->check(CLI::PositiveNumber);
  app->add_option("--checkpoint-every", f->checkpoint_every, "epochs between checkpoints (0: off)")
      ->check(CLI::NonNegativeNumber);
  app->add_option("--power-iters", f->power_iters, "power rounds per projection")
      ->check(CLI::PositiveNumber);
  app->add_option("--max-train", f->max_train, "use at most this many training images (0: all)");
  app->add_option("--max-val", f->max_val, "use at most this many validation images (0: all)");
  app->add_option("--noise-seed", f->noise_seed, "noise seed");
  app->add_option("--shuffle-seed", f->shuffle_seed, "mini-batch shuffling seed");
  app->add_flag("--quiet", f->quiet, "no per-epoch output");
  cmds.push_back({app, "train", {}, [f, app] {
    const Dataset ds = load_dataset(f->data);
    const ForwardOperator op = make_operator(f->op);
    auto train_imgs = split_images(ds, "train", f->max_train);
    std::vector<ImageGrid> val_imgs;
    if (!ds.val().empty()) val_imgs = split_images(ds, "val", f->max_val);
    const auto arch = f->model.config(ds.height(), ds.width());
    IResNet model = make_iresnet(arch);
    const TrainingSet data = make_training_set(train_imgs, op, f->delta, f->noise_seed);
    const auto val = make_pairs(op, val_imgs, f->delta, derive_seed(f->noise_seed, 0x56414cu));
    TrainConfig cfg;
    cfg.objective = parse_objective(f->objective);
    cfg.epochs = f->epochs;
    cfg.batch_size = f->batch;
    cfg.lr = f->lr;
    cfg.fixed_point = {f->tol, f->max_iter};
    cfg.seed = f->shuffle_seed;
    cfg.checkpoint_every = f->checkpoint_every;
    cfg.power_iters = f->power_iters;
    const fs::path out = f->out;
    fs::create_directories(out);
    const KeyValues meta{{"operator", f->op},
                         {"delta", format_double(f->delta)},
                         {"L", format_double(f->model.lip)},
                         {"objective", f->objective},
                         {"seed", std::to_string(f->model.seed)},
                         {"noise_seed", std::to_string(f->noise_seed)},
                         {"shuffle_seed", std::to_string(f->shuffle_seed)}};
    CsvWriter metrics(out / "metrics.csv", {"epoch", "train_loss", "val_psnr", "val_ssim"});
    const auto start = std::chrono::steady_clock::now();
    auto on_epoch = [&](const EpochMetrics& m) {
      metrics.row(m.epoch, m.train_loss, m.val_psnr, m.val_ssim);
      if (!f->quiet) {
        const double secs =
            std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        std::cout << "epoch " << m.epoch << " loss " << m.train_loss << " val_psnr " << m.val_psnr
                  << " val_ssim " << m.val_ssim << " (" << secs << " s)" << std::endl;
      }
    };
    auto on_checkpoint = [&](const IResNet& m, const AdamState& adam, int epoch) {
      KeyValues mm = meta;
      mm["epoch"] = std::to_string(epoch);
      save_checkpoint(out / "checkpoints" / idx_name("epoch", static_cast<std::size_t>(epoch), ".ckpt"),
                      m, &adam, mm);
    };
    auto result = train(model, data, val.pairs, cfg, on_checkpoint, on_epoch);
    KeyValues final_meta = meta;
    final_meta["epoch"] = std::to_string(f->epochs);
    save_checkpoint(out / "model.ckpt", model, &result.adam, final_meta);
    KeyValues extra{{"train_images", std::to_string(train_imgs.size())},
                    {"val_images", std::to_string(val_imgs.size())}};
    if (!result.log.empty()) {
      extra["final_val_psnr"] = format_double(result.log.back().val_psnr);
      extra["final_val_ssim"] = format_double(result.log.back().val_ssim);
    }
    write_manifest(out, "train", app, extra);
  }});
}

void add_reconstruct(CLI::App& root, std::vector<Command>& cmds) {
  auto* app = root.add_subcommand("reconstruct", "invert a trained model on observations");
  struct Flags {
    std::string checkpoint, data, split = "test", out, op;
    std::vector<std::string> inputs, truths;
    double delta = -1.0, tol = 1e-8;
    int max_iter = 1000;
    std::size_t limit = 0;
    std::uint64_t noise_seed = 3;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--checkpoint", f->checkpoint, "model checkpoint")->required();
  auto* d = app->add_option("--data", f->data, "dataset file; observations are simulated");
  auto* in = app->add_option("--input", f->inputs, "observed PGM images");
  d->excludes(in);
  app->add_option("--truth", f->truths, "ground-truth PGM images matching --input")->needs(in);
  app->add_option("--split", f->split, "dataset split")->check(CLI::IsMember(kSplits));
  app->add_option("--limit", f->limit, "use at most this many images (0: all)");
  app->add_option("--operator", f->op, "forward operator (default: from checkpoint)")
      ->check(CLI::IsMember(kOperators));
  app->add_option("--delta", f->delta, "noise level (default: from checkpoint)");
  app->add_option("--noise-seed", f->noise_seed, "noise seed for simulated observations");
  app->add_option("--tol", f->tol, "fixed-point tolerance")->check(CLI::PositiveNumber);
  app->add_option("--max-iter", f->max_iter, "fixed-point iteration cap")->check(CLI::PositiveNumber);
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "reconstruct", {}, [f, app] {
    Checkpoint cp = load_model(f->checkpoint);
    std::vector<ImageGrid> observed, truth;
    if (!f->data.empty()) {
      const std::string op_name = !f->op.empty() ? f->op
                                  : cp.meta.count("operator") ? cp.meta.at("operator")
                                                              : "blur";
      const double delta = f->delta >= 0.0 ? f->delta
                           : cp.meta.count("delta") ? parse_double(cp.meta.at("delta"))
                                                    : 0.0;
      truth = split_images(load_dataset(f->data), f->split, f->limit);
      for (auto& p : make_pairs(make_operator(op_name), truth, delta, f->noise_seed).pairs)
        observed.push_back(std::move(p.z));
    } else {
      if (f->inputs.empty()) throw std::invalid_argument("one of --data or --input is required");
      if (!f->truths.empty() && f->truths.size() != f->inputs.size())
        throw std::invalid_argument("--truth must list one image per --input");
      for (const auto& p : f->inputs) observed.push_back(read_pgm(p));
      for (const auto& p : f->truths) truth.push_back(read_pgm(p));
    }
    for (const auto& z : observed)
      if (z.height() != cp.model.height() || z.width() != cp.model.width())
        throw std::invalid_argument("observation is " + std::to_string(z.height()) + "x" +
                                    std::to_string(z.width()) + " but the checkpoint expects " +
                                    std::to_string(cp.model.height()) + "x" +
                                    std::to_string(cp.model.width()));
    std::vector<ImageGrid> recon(observed.size());
    const FixedPointConfig fp{f->tol, f->max_iter};
    detail::parallel_for(observed.size(),
                         [&](std::size_t i) { recon[i] = image_invert(cp.model, observed[i], fp); });
    const fs::path out = f->out;
    fs::create_directories(out);
    for (std::size_t i = 0; i < recon.size(); ++i) {
      write_pgm(out / idx_name("recon", i, ".pgm"), recon[i]);
      if (!f->data.empty()) write_pgm(out / idx_name("observed", i, ".pgm"), observed[i]);
    }
    save_dataset(out / "reconstructions.bin",
                 Dataset(recon, {recon.size(), 0, 0}, Provenance::Imported));
    KeyValues extra{{"images", std::to_string(recon.size())}};
    if (!truth.empty()) {
      CsvWriter w(out / "metrics.csv", {"index", "psnr", "ssim", "psnr_observed", "ssim_observed"});
      double mp = 0, mo = 0;
      for (std::size_t i = 0; i < recon.size(); ++i) {
        const double p = psnr(recon[i], truth[i]), po = psnr(observed[i], truth[i]);
        w.row(i, p, ssim(recon[i], truth[i]), po, ssim(observed[i], truth[i]));
        mp += p / recon.size();
        mo += po / recon.size();
      }
      extra["mean_psnr"] = format_double(mp);
      extra["mean_psnr_observed"] = format_double(mo);
      std::cout << "mean PSNR " << mp << " dB (observed " << mo << " dB)\n";
    }
    write_manifest(out, "reconstruct", app, extra);
  }});
}

void add_study_inversion(CLI::App* study, std::vector<Command>& cmds) {
  auto* app = study->add_subcommand("inversion-error", "mean inversion error over a (delta, L) pairing");
  struct Flags {
    std::vector<std::string> models;
    std::string data, split = "test", op = "blur", out;
    std::size_t limit = 0;
    double tol = 1e-8;
    int max_iter = 2000;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--model", f->models, "delta:checkpoint entries")->required();
  app->add_option("--data", f->data, "dataset file")->required()->check(CLI::ExistingFile);
  app->add_option("--split", f->split, "dataset split")->check(CLI::IsMember(kSplits));
  app->add_option("--limit", f->limit, "use at most this many images (0: all)");
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--tol", f->tol, "fixed-point tolerance")->check(CLI::PositiveNumber);
  app->add_option("--max-iter", f->max_iter, "fixed-point iteration cap")->check(CLI::PositiveNumber);
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "study inversion-error", {}, [f, app] {
    std::vector<Checkpoint> cps;
    std::vector<PairingEntry> entries;
    cps.reserve(f->models.size());
    for (const auto& item : f->models) {
      const auto colon = item.find(':');
      if (colon == std::string::npos)
        throw std::invalid_argument("--model expects delta:checkpoint, got '" + item + "'");
      cps.push_back(load_model(item.substr(colon + 1)));
      entries.push_back({parse_double(item.substr(0, colon)), model_lip(cps.back()), nullptr,
                         item.substr(colon + 1)});
    }
    for (std::size_t i = 0; i < entries.size(); ++i) entries[i].model = &cps[i].model;
    const ConvergencePairing pairing(entries);
    const auto test = split_images(load_dataset(f->data), f->split, f->limit);
    const auto rows = inversion_error_study(pairing, make_operator(f->op), test, {f->tol, f->max_iter});
    fs::create_directories(f->out);
    write_inversion_error_csv(fs::path(f->out) / "inversion_error.csv", rows);
    write_manifest(f->out, "study inversion-error", app, {{"rows", std::to_string(rows.size())}});
    for (const auto& r : rows)
      std::cout << "delta " << r.delta << " L " << r.lip << " mean_error " << r.mean_error << "\n";
  }});
}

void add_study_local(CLI::App* study, std::vector<Command>& cmds) {
  auto* app = study->add_subcommand("local-approx", "||F(x) - phi(x)|| per test image");
  struct Flags {
    std::string checkpoint, data, split = "test", op = "blur", out;
    std::size_t limit = 0;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--checkpoint", f->checkpoint, "model checkpoint")->required();
  app->add_option("--data", f->data, "dataset file")->required()->check(CLI::ExistingFile);
  app->add_option("--split", f->split, "dataset split")->check(CLI::IsMember(kSplits));
  app->add_option("--limit", f->limit, "use at most this many images (0: all)");
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "study local-approx", {}, [f, app] {
    const Checkpoint cp = load_model(f->checkpoint);
    const auto test = split_images(load_dataset(f->data), f->split, f->limit);
    const auto rows = local_approx_check(cp.model, make_operator(f->op), test);
    fs::create_directories(f->out);
    write_local_approx_csv(fs::path(f->out) / "local_approx.csv", model_lip(cp), rows);
    write_manifest(f->out, "study local-approx", app, {{"rows", std::to_string(rows.size())}});
  }});
}

void add_study_quality(CLI::App* study, std::vector<Command>& cmds) {
  auto* app = study->add_subcommand("approx-quality", "PSNR/SSIM between phi(x) and F(x)");
  struct Flags {
    std::string checkpoint, data, split = "test", op = "blur", out;
    std::size_t limit = 0;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--checkpoint", f->checkpoint, "model checkpoint")->required();
  app->add_option("--data", f->data, "dataset file")->required()->check(CLI::ExistingFile);
  app->add_option("--split", f->split, "dataset split")->check(CLI::IsMember(kSplits));
  app->add_option("--limit", f->limit, "use at most this many images (0: all)");
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "study approx-quality", {}, [f, app] {
    const Checkpoint cp = load_model(f->checkpoint);
    const auto test = split_images(load_dataset(f->data), f->split, f->limit);
    const auto q = approx_quality(cp.model, make_operator(f->op), test);
    const double delta = cp.meta.count("delta") ? parse_double(cp.meta.at("delta")) : std::nan("");
    fs::create_directories(f->out);
    write_approx_quality_csv(fs::path(f->out) / "approx_quality.csv", delta, model_lip(cp), q,
                             test.size());
    write_manifest(f->out, "study approx-quality", app,
                   {{"psnr", format_double(q.psnr)}, {"ssim", format_double(q.ssim)}});
    std::cout << "psnr " << q.psnr << " ssim " << q.ssim << "\n";
  }});
}

void add_study_direction(CLI::App* study, std::vector<Command>& cmds) {
  auto* app = study->add_subcommand("direction", "gradient ascent for ill-posed directions");
  struct Flags {
    std::string checkpoint, op = "blur", mask, out;
    ImageFlags image;
    DirectionProbeConfig probe;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--checkpoint", f->checkpoint, "model checkpoint")->required();
  f->image.add(app);
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--steps", f->probe.steps, "ascent steps")->check(CLI::NonNegativeNumber);
  app->add_option("--rate", f->probe.rate, "initial ascent rate")->check(CLI::PositiveNumber);
  app->add_option("--fd-eps", f->probe.fd_eps, "finite-difference step for F")
      ->check(CLI::PositiveNumber);
  app->add_option("--seed", f->probe.seed, "initial direction seed");
  app->add_option("--mask", f->mask, "PGM mask; nonzero pixels are admissible");
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "study direction", {}, [f, app] {
    const ImageGrid x0 = f->image.load();
    const Checkpoint cp = load_model(f->checkpoint, &x0);
    DirectionProbeConfig probe = f->probe;
    if (!f->mask.empty()) {
      ImageGrid m = read_pgm(f->mask);
      for (double& v : m.values()) v = v > 0.0 ? 1.0 : 0.0;
      probe.mask = m;
    }
    const auto res = direction_ascent(cp.model, make_operator(f->op), x0, probe);
    const fs::path out = f->out;
    fs::create_directories(out);
    write_direction_trace_csv(out / "direction_trace.csv", res.trace);
    const double hmax = std::max(norm_inf(res.h.values()), 1e-300);
    ImageGrid view = res.h;
    for (double& v : view.values()) v = 0.5 + 0.5 * v / hmax;
    write_pgm(out / "direction.pgm", view);
    CsvWriter hcsv(out / "direction.csv", {"row", "col", "value"});
    for (int r = 0; r < res.h.height(); ++r)
      for (int c = 0; c < res.h.width(); ++c) hcsv.row(r, c, res.h(r, c));
    write_manifest(out, "study direction", app,
                   {{"norm_phi", format_double(res.norm_phi)},
                    {"norm_F", format_double(res.norm_F)},
                    {"lower_bound", format_double(1.0 - cp.model.lip_param())},
                    {"accepted_steps", std::to_string(res.trace.size() - 1)}});
    std::cout << "|d_h phi| " << res.norm_phi << " |d_h F| " << res.norm_F << "\n";
  }});
}

void add_study_saliency(CLI::App* study, std::vector<Command>& cmds) {
  auto* app = study->add_subcommand("saliency", "Jacobian saliency patches and clustering");
  struct Flags {
    std::string checkpoint, op = "blur", out;
    ImageFlags image;
    std::size_t count = 1500, manual_count = 250;
    int k = 0, kmax = 8, restarts = 10, references = 10;
    std::uint64_t seed = 0;
  };
  auto f = std::make_shared<Flags>();
  app->add_option("--checkpoint", f->checkpoint, "model checkpoint")->required();
  f->image.add(app);
  app->add_option("--operator", f->op, "forward operator")->check(CLI::IsMember(kOperators));
  app->add_option("--count", f->count, "sampled pixels for spectral clustering")
      ->check(CLI::PositiveNumber);
  app->add_option("--manual-count", f->manual_count, "pixels per manual cluster")
      ->check(CLI::PositiveNumber);
  app->add_option("--k", f->k, "cluster count (0: gap statistic)")->check(CLI::NonNegativeNumber);
  app->add_option("--kmax", f->kmax, "largest k for the cluster-count curves")->check(CLI::Range(2, 64));
  app->add_option("--restarts", f->restarts, "k-means restarts")->check(CLI::PositiveNumber);
  app->add_option("--references", f->references, "gap statistic reference sets")
      ->check(CLI::PositiveNumber);
  app->add_option("--seed", f->seed, "sampling and clustering seed");
  app->add_option("--out-dir", f->out, "output directory")->required();
  cmds.push_back({app, "study saliency", {}, [f, app] {
    const ImageGrid x0 = f->image.load();
    const Checkpoint cp = load_model(f->checkpoint, &x0);
    const ForwardOperator op = make_operator(f->op);
    const fs::path out = f->out;
    fs::create_directories(out);
    const EdgeMasks masks = canny_edges(x0);
    write_pgm(out / "edges_weak.pgm", masks.weak);
    write_pgm(out / "edges_strong.pgm", masks.strong);
    KeyValues extra;

    auto normalized = [](std::vector<SaliencyPatch> ps) {
      for (auto& p : ps) p = normalize_signed(std::move(p));
      return ps;
    };
    auto emit = [&](const std::string& tag, const ClusterReport& rep) {
      write_assignments_csv(out / ("assignments_" + tag + ".csv"), rep);
      write_cluster_summary_csv(out / ("clusters_" + tag + ".csv"), rep);
      for (const auto& cs : rep.clusters)
        write_patch_csv(out / ("mean_patch_" + tag + "_" + std::to_string(cs.id) + ".csv"),
                        cs.mean_patch);
      extra[tag + ".k"] = std::to_string(rep.k);
      extra[tag + ".highlighted"] = std::to_string(rep.highlighted);
    };

    const auto pixels = sample_pixels(x0.height(), x0.width(), f->count, f->seed);
    const std::vector<std::pair<std::string, std::vector<SaliencyPatch>>> sources{
        {"network", normalized(jacobian_patches(cp.model, x0, pixels))},
        {"operator", normalized(jacobian_patches(op, x0, pixels))}};
    for (const auto& [tag, patches] : sources) {
      const DataMatrix X = patch_matrix(patches);
      ChooseKConfig ck{f->kmax, f->references, f->restarts, f->seed};
      const auto curves = choose_k(X, ck);
      write_choose_k_csv(out / ("choose_k_" + tag + ".csv"), curves);
      const int k = f->k > 0 ? f->k : curves.recommended;
      const auto labels = spectral_cluster(X, k, f->seed, f->restarts);
      emit(tag, cluster_summary(patches, labels, k, masks, ClusterMethod::Spectral));
      extra[tag + ".recommended_k"] = std::to_string(curves.recommended);
    }

    const ManualClusters mc = manual_clusters(x0, f->manual_count);
    std::vector<Pixel> manual_pixels = mc.smooth;
    manual_pixels.insert(manual_pixels.end(), mc.edge.begin(), mc.edge.end());
    std::vector<int> manual_labels(mc.smooth.size(), 0);
    manual_labels.resize(manual_pixels.size(), 1);
    emit("manual_network", cluster_summary(normalized(jacobian_patches(cp.model, x0, manual_pixels)),
                                           manual_labels, 2, masks, ClusterMethod::Manual));
    emit("manual_operator", cluster_summary(normalized(jacobian_patches(op, x0, manual_pixels)),
                                            manual_labels, 2, masks, ClusterMethod::Manual));
    write_manifest(out, "study saliency", app, extra);
  }});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App root{"Invertible residual networks for inverse problems: data, training and studies"};
  root.require_subcommand(1);
  root.option_defaults()->always_capture_default();
  std::vector<Command> cmds;
  add_synth(root, cmds);
  add_import(root, cmds);
  add_init(root, cmds);
  add_train(root, cmds);
  add_reconstruct(root, cmds);
  auto* study = root.add_subcommand("study", "regularization and saliency studies");
  study->require_subcommand(1);
  add_study_inversion(study, cmds);
  add_study_local(study, cmds);
  add_study_quality(study, cmds);
  add_study_direction(study, cmds);
  add_study_saliency(study, cmds);
  for (auto& c : cmds)
    c.app->add_option("--config", c.config, "key=value file; flags given explicitly take precedence");

  CLI11_PARSE(root, argc, argv);
  try {
    for (auto& c : cmds) {
      if (!c.app->parsed()) continue;
      apply_config(c.app, c.config);
      c.run();
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
