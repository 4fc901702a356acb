// gseg: phantom synthesis, two-phase training, fully-convolutional
// prediction, BRATS-style evaluation and the dense-vs-patchwise benchmark.
//
// Exit codes: 0 ok, 2 usage, 3 I/O, 4 data contract, 5 numeric failure.
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "gseg/architectures.hpp"
#include "gseg/inference.hpp"
#include "gseg/metrics.hpp"
#include "gseg/model_io.hpp"
#include "gseg/phantom.hpp"
#include "gseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace gseg;

namespace {

std::array<int, 3> parse_dims3(const std::string& s) {
  std::array<int, 3> dims{};
  if (std::sscanf(s.c_str(), "%d,%d,%d", &dims[0], &dims[1], &dims[2]) != 3)
    raise<UsageError>("--dims expects X,Y,Z (got '", s, "')");
  return dims;
}

std::vector<BrainVolume> load_dir(const std::string& dir, bool do_preprocess) {
  if (!fs::is_directory(dir)) raise<IoError>("'", dir, "' is not a directory");
  std::vector<std::string> sidecars;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.path().extension() == ".json") sidecars.push_back(e.path().string());
  std::sort(sidecars.begin(), sidecars.end());
  if (sidecars.empty()) raise<IoError>("no volume sidecars (*.json) in '", dir, "'");
  std::vector<BrainVolume> out;
  for (const auto& p : sidecars) {
    BrainVolume v = load_volume(p);
    out.push_back(do_preprocess ? preprocess(std::move(v)) : std::move(v));
  }
  return out;
}

std::vector<const BrainVolume*> ptrs(const std::vector<BrainVolume>& v) {
  std::vector<const BrainVolume*> p;
  for (const auto& x : v) p.push_back(&x);
  return p;
}

// the train config file also carries optional architecture knobs
ArchConfig arch_config_from_json(const nlohmann::json& j) {
  ArchConfig c;
  c.local1_maps = j.value("local1_maps", c.local1_maps);
  c.local2_maps = j.value("local2_maps", c.local2_maps);
  c.global_maps = j.value("global_maps", c.global_maps);
  c.maxout_k = j.value("maxout_k", c.maxout_k);
  c.dropout_input = j.value("dropout_input", c.dropout_input);
  c.dropout_hidden = j.value("dropout_hidden", c.dropout_hidden);
  c.dropout_output = j.value("dropout_output", c.dropout_output);
  return c;
}

nlohmann::json read_json_file(const std::string& path, const char* what) {
  std::ifstream is(path);
  if (!is) raise<IoError>("cannot open ", what, " '", path, "'");
  try {
    nlohmann::json j;
    is >> j;
    return j;
  } catch (const nlohmann::json::exception& e) {
    raise<IoError>(what, " '", path, "' is not valid JSON: ", e.what());
  }
}

int cmd_synth(const std::string& out_dir, int count, const std::string& dims_str,
              std::uint64_t seed, double healthy_fraction) {
  const auto dims = parse_dims3(dims_str);
  fs::create_directories(out_dir);
  TumorParams params;
  params.healthy_fraction = healthy_fraction;
  for (int i = 0; i < count; ++i) {
    BrainVolume v = make_phantom(seed + static_cast<std::uint64_t>(i), dims, params);
    char name[32];
    std::snprintf(name, sizeof(name), "phantom_%03d", i);
    save_volume(v, (fs::path(out_dir) / name).string());
  }
  std::cout << "wrote " << count << " phantom volume pairs to " << out_dir << "\n";
  return 0;
}

int cmd_train(const std::string& arch_name, const std::string& data_dir,
              const std::string& val_dir, const std::string& out_path,
              const std::string& phase, const std::string& config_path,
              const std::string& init_path, std::int64_t seed_flag, int threads) {
  set_thread_count(threads);
  const ArchName name = parse_arch(arch_name);

  TrainConfig cfg;
  ArchConfig arch_cfg;
  if (!config_path.empty()) {
    nlohmann::json j = read_json_file(config_path, "config file");
    cfg = j.get<TrainConfig>();
    arch_cfg = arch_config_from_json(j);
  }
  if (seed_flag >= 0) cfg.seed = static_cast<std::uint64_t>(seed_flag);
  cfg.validate();

  PhasePlan plan;
  if (phase == "1") plan = {true, false};
  else if (phase == "2") plan = {false, true};
  else if (phase == "both") plan = {true, true};
  else raise<UsageError>("--phase must be 1, 2 or both (got '", phase, "')");

  Architecture arch = build(name, arch_cfg);

  std::vector<ParameterStore> init_stores;
  bool have_init = false;
  if (!init_path.empty()) {
    ModelFile m = load_model(init_path);
    const ArchName init_name = parse_arch(m.arch);
    const bool cascade_seed =
        arch.kind == BundleKind::Cascade && init_name == ArchName::TwoPathCNN;
    if (init_name != name && !cascade_seed)
      raise<DataError>("--init model is a ", m.arch, ", cannot seed ", arch_name);
    if (cascade_seed || init_name == name) {
      // shape compatibility against the model we are about to train
      const std::size_t check_n = std::min(m.graphs.size(), arch.graphs.size());
      for (std::size_t gi = 0; gi < check_n; ++gi) {
        const auto want = layer_channels(arch.graphs[gi]);
        const auto got = layer_channels(m.graphs[gi]);
        if (want != got)
          raise<DataError>("--init model layout does not match ", arch_name);
      }
    }
    init_stores = std::move(m.stores);
    have_init = true;
  }
  if (phase == "2" && !have_init)
    raise<UsageError>("--phase 2 requires an existing phase-1 model via --init");

  std::vector<BrainVolume> train_vols = load_dir(data_dir, true);
  std::vector<BrainVolume> val_vols = load_dir(val_dir, true);

  TrainedModel trained =
      train_architecture(arch, ptrs(train_vols), ptrs(val_vols), cfg, plan,
                         have_init ? &init_stores : nullptr);

  ModelFile file;
  file.arch = to_string(name);
  file.label_frequencies = trained.label_freqs;
  file.graphs = arch.graphs;
  file.stores = trained.stores;
  save_model(file, out_path);

  const std::string log_path = out_path + ".log.jsonl";
  std::ofstream log(log_path, std::ios::trunc);
  if (!log) raise<IoError>("cannot write training log '", log_path, "'");
  for (const EpochStats& e : trained.history) log << nlohmann::json(e).dump() << "\n";

  std::cout << "trained " << to_string(name) << ": model '" << out_path << "', log '"
            << log_path << "' (" << trained.history.size() << " epochs)\n";
  return 0;
}

int cmd_predict(const std::string& model_path, const std::string& in_path,
                const std::string& out_path, bool no_postprocess, double tau, int threads) {
  set_thread_count(threads);
  ModelFile m = load_model(model_path);
  Architecture arch = assemble(parse_arch(m.arch), m.graphs);
  BrainVolume input = preprocess(load_volume(in_path));
  BrainVolume pred = predict_volume(arch, m.stores, input, !no_postprocess, tau);
  save_volume(pred, out_path);
  std::cout << "predicted " << pred.nx << "x" << pred.ny << "x" << pred.nz
            << " labels to " << out_path << "\n";
  return 0;
}

int cmd_evaluate(const std::string& pred_dir, const std::string& truth_dir,
                 const std::string& out_path, const std::string& csv_path) {
  if (!fs::is_directory(pred_dir)) raise<IoError>("'", pred_dir, "' is not a directory");
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(pred_dir))
    if (e.path().extension() == ".json") stems.push_back(e.path().stem().string());
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) raise<IoError>("no volume sidecars (*.json) in '", pred_dir, "'");

  // volumes pair by file stem across the two directories
  std::vector<SegReport> reports;
  for (const std::string& stem : stems) {
    BrainVolume p = load_volume((fs::path(pred_dir) / (stem + ".json")).string());
    if (!p.has_labels()) raise<DataError>("prediction '", stem, "' has no labels");
    const fs::path truth_path = fs::path(truth_dir) / (stem + ".json");
    if (!fs::exists(truth_path))
      raise<IoError>("no ground truth for '", stem, "' in ", truth_dir);
    BrainVolume t = load_volume(truth_path.string());
    if (!t.has_labels()) raise<DataError>("truth '", stem, "' has no labels");
    if (t.nx != p.nx || t.ny != p.ny || t.nz != p.nz)
      raise<DataError>("dims of '", stem, "' disagree: prediction ", p.nx, "x", p.ny, "x",
                       p.nz, " vs truth ", t.nx, "x", t.ny, "x", t.nz);
    reports.push_back(score(p.labels, t.labels, stem));
  }

  CorpusSummary summary = aggregate(reports);
  nlohmann::json out{{"volumes", nlohmann::json::array()},
                     {"aggregate", summary_to_json(summary)}};
  for (const SegReport& r : reports) out["volumes"].push_back(report_to_json(r));
  std::ofstream os(out_path, std::ios::trunc);
  if (!os) raise<IoError>("cannot write report '", out_path, "'");
  os << out.dump(2) << "\n";
  if (!csv_path.empty()) {
    std::ofstream cs(csv_path, std::ios::trunc);
    if (!cs) raise<IoError>("cannot write CSV '", csv_path, "'");
    cs << summary_to_csv(summary);
  }
  std::cout << "evaluated " << reports.size() << " volumes -> " << out_path << "\n";
  return 0;
}

int cmd_bench(const std::string& model_path, const std::string& dims_str, int reps,
              int threads, std::uint64_t seed, const std::string& out_path) {
  set_thread_count(threads);
  ModelFile m = load_model(model_path);
  Architecture arch = assemble(parse_arch(m.arch), m.graphs);
  int h = 0, w = 0;
  if (std::sscanf(dims_str.c_str(), "%d,%d", &h, &w) != 2)
    raise<UsageError>("--dims expects H,W (got '", dims_str, "')");

  BenchReport r = bench_inference(arch, m.stores, h, w, reps, seed);
  nlohmann::json j{{"arch", m.arch},
                   {"height", h},
                   {"width", w},
                   {"dense_seconds", r.dense_seconds},
                   {"patchwise_seconds", r.patchwise_seconds},
                   {"ratio", r.ratio},
                   {"equivalent", r.equivalent},
                   {"max_prob_diff", r.max_prob_diff},
                   {"repetitions", r.repetitions},
                   {"threads", r.threads},
                   {"low_confidence", r.low_confidence}};
  std::cout << j.dump(2) << "\n";
  if (!out_path.empty()) {
    std::ofstream os(out_path, std::ios::trunc);
    if (!os) raise<IoError>("cannot write benchmark report '", out_path, "'");
    os << j.dump(2) << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"gseg: 2D convolutional brain tumor segmentation pipeline"};
  app.require_subcommand(1);

  auto* synth = app.add_subcommand("synth", "generate synthetic phantom volumes");
  std::string s_out, s_dims = "64,64,64";
  int s_count = 1;
  std::uint64_t s_seed = 1;
  double s_healthy = 0.98;
  synth->add_option("--out", s_out, "output directory")->required();
  synth->add_option("--count", s_count, "number of volumes");
  synth->add_option("--dims", s_dims, "volume dims X,Y,Z");
  synth->add_option("--seed", s_seed, "generator seed");
  synth->add_option("--healthy-fraction", s_healthy, "healthy share of brain voxels");

  auto* train = app.add_subcommand("train", "train an architecture on labeled volumes");
  std::string t_arch, t_data, t_val, t_out, t_phase = "both", t_config, t_init;
  std::int64_t t_seed = -1;
  int t_threads = 1;
  train->add_option("--arch", t_arch, "architecture name")->required();
  train->add_option("--data", t_data, "training volume directory")->required();
  train->add_option("--val", t_val, "validation volume directory")->required();
  train->add_option("--out", t_out, "output model path")->required();
  train->add_option("--phase", t_phase, "1, 2 or both");
  train->add_option("--config", t_config, "JSON training config");
  train->add_option("--init", t_init, "initial model (phase 2 / cascade first net)");
  train->add_option("--seed", t_seed, "overrides the config seed");
  train->add_option("--threads", t_threads, "worker threads");

  auto* predict = app.add_subcommand("predict", "segment a volume with a trained model");
  std::string p_model, p_in, p_out;
  bool p_nopost = false;
  double p_tau = 0.1;
  int p_threads = 1;
  predict->add_option("--model", p_model, "model file")->required();
  predict->add_option("--in", p_in, "input volume (sidecar path)")->required();
  predict->add_option("--out", p_out, "output label volume path")->required();
  predict->add_flag("--no-postprocess", p_nopost, "skip connected-component cleanup");
  predict->add_option("--tau", p_tau, "component size threshold (fraction of largest)");
  predict->add_option("--threads", p_threads, "worker threads");

  auto* evaluate = app.add_subcommand("evaluate", "score predictions against ground truth");
  std::string e_pred, e_truth, e_out, e_csv;
  evaluate->add_option("--pred", e_pred, "prediction volume directory")->required();
  evaluate->add_option("--truth", e_truth, "ground truth volume directory")->required();
  evaluate->add_option("--out", e_out, "report JSON path")->required();
  evaluate->add_option("--csv", e_csv, "also write a CSV summary");

  auto* bench = app.add_subcommand("bench", "time dense vs patchwise inference");
  std::string b_model, b_dims = "64,64", b_out;
  int b_reps = 3, b_threads = 1;
  std::uint64_t b_seed = 1;
  bench->add_option("--model", b_model, "model file")->required();
  bench->add_option("--dims", b_dims, "slice dims H,W");
  bench->add_option("--reps", b_reps, "timing repetitions");
  bench->add_option("--threads", b_threads, "worker threads (recorded in the report)");
  bench->add_option("--seed", b_seed, "random slice seed");
  bench->add_option("--out", b_out, "also write the JSON report here");

  try {
    app.parse(argc, argv);
    if (synth->parsed()) return cmd_synth(s_out, s_count, s_dims, s_seed, s_healthy);
    if (train->parsed())
      return cmd_train(t_arch, t_data, t_val, t_out, t_phase, t_config, t_init, t_seed,
                       t_threads);
    if (predict->parsed())
      return cmd_predict(p_model, p_in, p_out, p_nopost, p_tau, p_threads);
    if (evaluate->parsed()) return cmd_evaluate(e_pred, e_truth, e_out, e_csv);
    if (bench->parsed()) return cmd_bench(b_model, b_dims, b_reps, b_threads, b_seed, b_out);
    return 2;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 4;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 5;
  }
}
