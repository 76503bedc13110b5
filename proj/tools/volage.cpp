// volage: cohort synthesis, training, evaluation, ablation, parameter audit and
// Grad-CAM export for the shared-attention volumetric age regressor.
//
// Exit codes: 0 ok, 2 config, 3 I/O, 4 shape, 5 numeric divergence, 6 corrupt artifact.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "volage/checkpoint.hpp"
#include "volage/config.hpp"
#include "volage/data_io.hpp"
#include "volage/interpret.hpp"
#include "volage/training.hpp"

using namespace volage;
namespace fs = std::filesystem;

namespace {

enum Exit : int { kOk = 0, kConfig = 2, kIo = 3, kShape = 4, kNumeric = 5, kCorrupt = 6 };

Triple parse_shape_flag(const std::string& text) {
  Triple t{};
  char c1 = 0, c2 = 0;
  std::istringstream is(text);
  if (!(is >> t[0] >> c1 >> t[1] >> c2 >> t[2]) || c1 != ',' || c2 != ',' || !is.eof())
    throw ConfigError("--shape expects D,H,W, got '" + text + "'");
  return t;
}

std::pair<double, double> parse_range_flag(const std::string& text) {
  double lo = 0, hi = 0;
  char colon = 0;
  std::istringstream is(text);
  if (!(is >> lo >> colon >> hi) || colon != ':' || !is.eof())
    throw ConfigError("--age-range expects LO:HI, got '" + text + "'");
  return {lo, hi};
}

// Flag values that override the JSON config when given.
struct Overrides {
  std::optional<std::size_t> epochs;
  std::optional<double> lr;
  std::optional<std::size_t> batch_size;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> loss;
  std::optional<std::string> attention;

  void add_to(CLI::App* cmd, bool training_flags) {
    cmd->add_option("--attention", attention, "Attention mode: shared | per_layer | none (default: shared)");
    if (!training_flags) return;
    cmd->add_option("--epochs", epochs, "Training epochs (default: 250)");
    cmd->add_option("--lr", lr, "Adam learning rate (default: 0.0001)");
    cmd->add_option("--batch-size", batch_size, "Batch size (default: 4)");
    cmd->add_option("--seed", seed, "Seed for init, split, shuffling and dropout (default: 0)");
    cmd->add_option("--loss", loss, "Training loss: mae | mse (default: mae)");
  }

  void apply(RunConfig& c) const {
    if (epochs) c.train.epochs = *epochs;
    if (lr) c.train.learning_rate = *lr;
    if (batch_size) c.train.batch_size = *batch_size;
    if (seed) c.train.seed = *seed;
    if (loss) c.train.loss = parse_loss(*loss);
    if (attention) c.model.attention_mode = parse_attention_mode(*attention);
    c.validate();
  }
};

RunConfig resolve_config(const std::string& path, const Overrides& o) {
  RunConfig c = path.empty() ? RunConfig{} : load_run_config(path);
  o.apply(c);
  return c;
}

Dataset load_data(const std::string& manifest, bool normalize) {
  return load_dataset(load_manifest(manifest), normalize);
}

void emit(const std::string& kv, const std::string& json, const std::string& json_path) {
  std::cout << kv << json << '\n';
  if (!json_path.empty()) {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + json_path);
    out << json << '\n';
  }
}

bool checkpoint_normalizes(const Checkpoint& ck) {
  const auto& meta = ck.meta;
  if (meta.contains("run_config") && meta["run_config"].contains("normalize"))
    return meta["run_config"]["normalize"].get<bool>();
  return true;
}

std::string checkpoint_dataset(const Checkpoint& ck) {
  return ck.meta.contains("dataset") ? ck.meta["dataset"].get<std::string>() : std::string("unknown");
}

// -- subcommands -----------------------------------------------------------------------

struct SynthArgs {
  std::string out;
  std::size_t n = 200;
  std::string shape = "32,32,32";
  std::string age_range = "60:86";
  double noise = 0.05;
  std::uint64_t seed = 0;
};

int run_synth(const SynthArgs& a) {
  SynthSpec spec;
  spec.n_subjects = a.n;
  spec.shape = parse_shape_flag(a.shape);
  std::tie(spec.age_lo, spec.age_hi) = parse_range_flag(a.age_range);
  spec.noise_sigma = a.noise;
  spec.seed = a.seed;
  spec.validate();
  const auto records = synth_generate(spec);
  const auto manifest = write_cohort(a.out, records, fs::path(a.out).filename().string());
  double lo = records.front().age, hi = lo, sum = 0;
  for (const auto& r : records) {
    lo = std::min(lo, r.age);
    hi = std::max(hi, r.age);
    sum += r.age;
  }
  std::cout << "subjects=" << records.size() << "\nshape=" << a.shape << "\nage_min=" << lo
            << "\nage_max=" << hi << "\nage_mean=" << sum / static_cast<double>(records.size())
            << "\nmanifest=" << manifest.string() << '\n';
  return kOk;
}

struct TrainArgs {
  std::string data, config, out, history;
  Overrides o;
};

int run_train(const TrainArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.o);
  const Dataset ds = load_data(a.data, cfg.normalize);
  const Split split = cfg.test_fraction > 0.0
                          ? stratified_split(ds, cfg.test_fraction, cfg.bin_width, cfg.train.seed)
                          : Split{ds, Dataset{ds.name, ds.shape, {}}};
  Model model = build<float>(cfg.model, cfg.train.seed);
  const History history =
      train(model, split.train, cfg.train, split.test.empty() ? nullptr : &split.test,
            [](const EpochRecord& e) {
              std::fprintf(stderr, "epoch %zu train_mae=%.4f val_mae=%.4f loss=%.4f\n", e.epoch,
                           e.train_mae, e.val_mae, e.loss);
            });
  nlohmann::json meta;
  meta["dataset"] = ds.name;
  meta["run_config"] = to_json(cfg);
  save_checkpoint(a.out, model, meta);
  if (!a.history.empty()) write_history_csv(a.history, history);
  const EpochRecord& last = history.back();
  std::cout << "dataset=" << ds.name << "\ntrain_n=" << split.train.size()
            << "\nval_n=" << split.test.size() << "\ntrain_mae=" << last.train_mae
            << "\nval_mae=" << last.val_mae << "\ncheckpoint=" << a.out << '\n';
  return kOk;
}

struct EvalArgs {
  std::string ckpt, data, split = "all", json;
  bool cross = false;
};

int run_eval(const EvalArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  Dataset ds = load_data(a.data, checkpoint_normalizes(ck));
  if (a.split != "all") {
    if (!ck.meta.contains("run_config"))
      throw ConfigError("--split needs a checkpoint written by 'train'");
    const RunConfig rc = run_config_from_json(ck.meta["run_config"]);
    Split s = stratified_split(ds, rc.test_fraction, rc.bin_width, rc.train.seed);
    if (a.split == "train")
      ds = std::move(s.train);
    else if (a.split == "test")
      ds = std::move(s.test);
    else
      throw ConfigError("--split must be all, train or test");
  }
  if (a.cross) {
    const CrossReport r = cross_evaluate(ck.model, checkpoint_dataset(ck), ds);
    emit(cross_report_kv(r), cross_report_json(r), a.json);
  } else {
    const Metrics m = evaluate(ck.model, ds);
    const std::vector<std::pair<std::string, std::string>> extra{{"dataset", ds.name},
                                                                 {"split", a.split}};
    emit(metrics_kv(m, extra), metrics_json(m, extra), a.json);
  }
  return kOk;
}

struct ParamsArgs {
  std::string config;
  Overrides o;
};

int run_params(const ParamsArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.o);
  const ShapeTrace trace = trace_shapes(cfg.model);
  std::cout << "# shape trace\n" << trace.to_string() << "# parameters\n";
  Index total = 0;
  for (const auto& row : parameter_table(cfg.model)) {
    std::cout << row.name << " weights=" << row.weights << " biases=" << row.biases
              << " total=" << row.total() << '\n';
    total += row.total();
  }
  std::cout << "total=" << total << '\n';
  return kOk;
}

struct AblateArgs {
  std::string data, config, json;
  Overrides o;
};

int run_ablate(const AblateArgs& a) {
  const RunConfig cfg = resolve_config(a.config, a.o);
  const Dataset ds = load_data(a.data, cfg.normalize);
  const Split split = stratified_split(ds, cfg.test_fraction, cfg.bin_width, cfg.train.seed);
  if (split.test.empty()) throw ConfigError("ablate needs a non-empty test split");
  const AblationReport r = ablate_sharing(split.train, split.test, cfg.model, cfg.train);
  std::cout << "dataset=" << ds.name << "\nshared_mae=" << r.shared.mae
            << "\nshared_rmse=" << r.shared.rmse << "\nuntied_mae=" << r.untied.mae
            << "\nuntied_rmse=" << r.untied.rmse << "\nmae_delta=" << r.mae_delta() << '\n';
  nlohmann::ordered_json j;
  j["dataset"] = ds.name;
  j["shared"] = {{"mae", r.shared.mae}, {"rmse", r.shared.rmse}, {"n", r.shared.n}};
  j["untied"] = {{"mae", r.untied.mae}, {"rmse", r.untied.rmse}, {"n", r.untied.n}};
  j["mae_delta"] = r.mae_delta();
  std::cout << j.dump() << '\n';
  if (!a.json.empty()) {
    std::ofstream out(a.json, std::ios::trunc);
    if (!out) throw IoError("cannot write " + a.json);
    out << j.dump() << '\n';
  }
  return kOk;
}

struct GradcamArgs {
  std::string ckpt, volume, out, target = "post";
  std::size_t layer = 7;
  bool csv = false;
};

int run_gradcam(const GradcamArgs& a) {
  const Checkpoint ck = load_checkpoint(a.ckpt);
  Tensorf vol = read_volume(a.volume);
  if (checkpoint_normalizes(ck)) vol = zscore_normalize(vol);
  const GradCamMap cam = gradcam(ck.model, vol, a.layer, parse_cam_target(a.target));
  std::error_code ec;
  fs::create_directories(a.out, ec);
  if (ec) throw IoError("cannot create " + a.out + ": " + ec.message());
  for (Plane p : {Plane::Sagittal, Plane::Coronal, Plane::Axial}) {
    const SliceImage img = extract_slice(cam, p, mid_index(cam.heatmap, p));
    const fs::path path =
        fs::path(a.out) / ("gradcam_layer" + std::to_string(a.layer) + "_" + to_string(p) + ".pgm");
    write_image(img, path);
    std::cout << to_string(p) << '=' << path.string() << '\n';
  }
  if (a.csv) {
    const fs::path path = fs::path(a.out) / ("gradcam_layer" + std::to_string(a.layer) + ".csv");
    write_heatmap_csv(cam.heatmap, path);
    std::cout << "csv=" << path.string() << '\n';
  }
  std::cout << "raw_shape=" << shape_string(cam.raw_shape) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Volumetric age regression with shared spatial attention"};
  app.require_subcommand(1);
  app.option_defaults()->always_capture_default();

  SynthArgs synth;
  auto* c_synth = app.add_subcommand("synth", "Write a synthetic aging-phantom cohort");
  c_synth->add_option("--out", synth.out, "Output directory")->required();
  c_synth->add_option("--n", synth.n, "Number of subjects (>= 2)");
  c_synth->add_option("--shape", synth.shape, "Volume shape D,H,W");
  c_synth->add_option("--age-range", synth.age_range, "Age range LO:HI in years");
  c_synth->add_option("--noise", synth.noise, "Gaussian noise sigma");
  c_synth->add_option("--seed", synth.seed, "Random seed");

  TrainArgs tr;
  auto* c_train = app.add_subcommand("train", "Train on a manifest and write a checkpoint");
  c_train->add_option("--data", tr.data, "Manifest CSV")->required();
  c_train->add_option("--config", tr.config, "JSON run config (defaults when omitted)");
  c_train->add_option("--out", tr.out, "Checkpoint path")->required();
  c_train->add_option("--history", tr.history, "History CSV path");
  tr.o.add_to(c_train, true);

  EvalArgs ev;
  auto* c_eval = app.add_subcommand("eval", "Evaluate a checkpoint on a manifest");
  c_eval->add_option("--ckpt", ev.ckpt, "Checkpoint path")->required();
  c_eval->add_option("--data", ev.data, "Manifest CSV")->required();
  c_eval->add_option("--split", ev.split, "Subset to score: all | train | test");
  c_eval->add_option("--json", ev.json, "Also write the JSON report here");

  EvalArgs cx;
  cx.cross = true;
  auto* c_cross = app.add_subcommand("crosseval", "Evaluate a checkpoint on another cohort");
  c_cross->add_option("--ckpt", cx.ckpt, "Checkpoint path")->required();
  c_cross->add_option("--data", cx.data, "Manifest CSV of the other cohort")->required();
  c_cross->add_option("--json", cx.json, "Also write the JSON report here");

  ParamsArgs pa;
  auto* c_params = app.add_subcommand("params", "Print the shape trace and parameter table");
  c_params->add_option("--config", pa.config, "JSON run config (defaults when omitted)");
  pa.o.add_to(c_params, false);

  AblateArgs ab;
  auto* c_ablate = app.add_subcommand("ablate", "Train shared vs per-layer attention and compare");
  c_ablate->add_option("--data", ab.data, "Manifest CSV")->required();
  c_ablate->add_option("--config", ab.config, "JSON run config (defaults when omitted)");
  c_ablate->add_option("--json", ab.json, "Also write the JSON report here");
  ab.o.add_to(c_ablate, true);

  GradcamArgs gc;
  auto* c_gradcam = app.add_subcommand("gradcam", "Export mid-plane Grad-CAM slices as PGM");
  c_gradcam->add_option("--ckpt", gc.ckpt, "Checkpoint path")->required();
  c_gradcam->add_option("--volume", gc.volume, "Volume (.nii or .f32raw)")->required();
  c_gradcam->add_option("--layer", gc.layer, "Conv stage, 1-based");
  c_gradcam->add_option("--out", gc.out, "Output directory")->required();
  c_gradcam->add_option("--target", gc.target, "Feature maps: post | pre attention");
  c_gradcam->add_flag("--csv", gc.csv, "Also dump d,h,w,value rows");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kConfig;
  }

  try {
    if (*c_synth) return run_synth(synth);
    if (*c_train) return run_train(tr);
    if (*c_eval) return run_eval(ev);
    if (*c_cross) return run_eval(cx);
    if (*c_params) return run_params(pa);
    if (*c_ablate) return run_ablate(ab);
    if (*c_gradcam) return run_gradcam(gc);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfig;
  } catch (const CorruptArtifactError& e) {
    std::cerr << "corrupt artifact: " << e.what() << '\n';
    return kCorrupt;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << '\n';
    return kIo;
  } catch (const ShapeError& e) {
    std::cerr << "shape error: " << e.what() << '\n';
    return kShape;
  } catch (const NumericError& e) {
    std::cerr << "numeric error: " << e.what() << '\n';
    return kNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return kOk;
}
