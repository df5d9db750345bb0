// tocom: dataset generation, training, evaluation, sweeps and the baseline.

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "tocom/harness.hpp"

namespace fs = std::filesystem;
using namespace tocom;

namespace {

std::string dataset_file(const std::string& path) {
  return fs::is_directory(path) ? (fs::path(path) / "dataset.tocd").string() : path;
}

std::ofstream open_out(const std::string& path) {
  if (const auto parent = fs::path(path).parent_path(); !parent.empty()) fs::create_directories(parent);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path);
  return out;
}

int gen_data(const std::string& spec_path, const std::string& out_dir) {
  const auto spec = harness::load_world_spec(spec_path);
  const auto data = sim::gen_dataset(spec);
  fs::create_directories(out_dir);
  const auto path = (fs::path(out_dir) / "dataset.tocd").string();
  sim::save_dataset(path, data);
  std::cout << "wrote " << data.size() << " frames to " << path << "\n";
  return 0;
}

int train(const std::string& phase, const std::string& config, const std::string& data_override,
          const std::string& out, const std::string& log_path) {
  auto job = harness::load_train_job(config);
  if (!data_override.empty()) job.data = data_override;
  if (job.data.empty()) throw Error("no dataset given (config key 'data' or --data)");
  const auto data = sim::load_dataset(dataset_file(job.data));
  const auto splits = sim::split(data);

  std::ofstream log_file;
  training::TrainLog log;
  if (!log_path.empty()) {
    log_file = open_out(log_path);
    training::write_log_header(log_file);
    log.csv = &log_file;
  }
  training::Bundle b;
  if (phase == "1" || phase == "all") {
    b = training::train_phase1(splits.train, job.cfg, log);
  } else {
    if (!fs::exists(out)) throw Error("phase 2 needs a phase-1 checkpoint at " + out);
    b = training::load_bundle(out);
  }
  if (phase == "2" || phase == "all") b = training::train_phase2(splits.train, std::move(b), job.cfg, log);
  training::save_bundle(out, b);
  std::cout << "saved " << out << "\n";
  return 0;
}

int evaluate(const std::string& ckpt, const std::string& data_path, const std::string& csv, const std::string& dump,
             const std::string& split_name, bool hierarchical_only, double bandwidth) {
  const auto b = training::load_bundle(ckpt);
  const auto data = sim::load_dataset(dataset_file(data_path));
  const auto splits = sim::split(data);
  const sim::Slice& s = split_name == "train" ? splits.train : split_name == "val" ? splits.val : splits.test;
  harness::EvalOptions opt;
  opt.dump_bitmaps_dir = dump;
  opt.bandwidth_bps = bandwidth;
  opt.config_id = fs::path(ckpt).stem().string();
  if (hierarchical_only) opt.policy = pipeline::ModePolicy::hierarchical_only;
  const auto r = harness::evaluate_run(b, s, opt);
  auto out = open_out(csv);
  harness::write_csv_header(out);
  harness::write_csv_row(out, r);
  harness::write_csv_header(std::cout);
  harness::write_csv_row(std::cout, r);
  return 0;
}

int sweep(const std::string& grid_path, const std::string& csv) {
  const auto grid = harness::load_sweep_grid(grid_path);
  const auto records = harness::run_sweep(grid);
  auto out = open_out(csv);
  out << harness::to_csv(records);
  std::cout << "wrote " << records.size() << " records to " << csv << "\n";
  return 0;
}

int baseline(const std::string& data_path, int q, const std::string& csv, const std::string& ckpt,
             const std::string& split_name, double bandwidth) {
  const auto data = sim::load_dataset(dataset_file(data_path));
  const auto splits = sim::split(data);
  const sim::Slice& s = split_name == "train" ? splits.train : split_name == "val" ? splits.val : splits.test;
  harness::EvalOptions opt;
  opt.bandwidth_bps = bandwidth;
  const auto r = ckpt.empty() ? harness::baseline_rate_only(s, q, opt)
                              : harness::evaluate_baseline(training::load_bundle(ckpt), s, q, opt);
  auto out = open_out(csv);
  harness::write_csv_header(out);
  harness::write_csv_row(out, r);
  harness::write_csv_header(std::cout);
  harness::write_csv_row(std::cout, r);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Task-oriented feature coding on a synthetic multi-camera world"};
  app.require_subcommand(1);

  std::string spec, out_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
  gen->add_option("--spec", spec, "World spec file")->required()->check(CLI::ExistingFile);
  gen->add_option("--out", out_dir, "Output directory")->required();

  std::string phase = "all", config, ckpt_out, train_data, log_path;
  auto* tr = app.add_subcommand("train", "Train phase 1, phase 2 or both");
  tr->add_option("--phase", phase, "1, 2 or all")->check(CLI::IsMember({"1", "2", "all"}));
  tr->add_option("--config", config, "Training config file")->required()->check(CLI::ExistingFile);
  tr->add_option("--out", ckpt_out, "Checkpoint path (read for --phase 2)")->required();
  tr->add_option("--data", train_data, "Dataset file or directory (overrides the config)");
  tr->add_option("--log", log_path, "Training log CSV");

  std::string ckpt, data_path, csv, dump, split_name = "test";
  bool hier = false;
  double bandwidth = 1e6;
  auto* ev = app.add_subcommand("evaluate", "Evaluate a checkpoint on held-out frames");
  ev->add_option("--ckpt", ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", data_path, "Dataset file or directory")->required();
  ev->add_option("--csv", csv, "Output CSV")->required();
  ev->add_option("--dump-bitmaps", dump, "Directory for per-element bit-map PGMs");
  ev->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  ev->add_flag("--hierarchical-only", hier, "Disable temporal-mode packets");
  ev->add_option("--bandwidth", bandwidth, "Link bandwidth in bit/s");

  std::string grid;
  auto* sw = app.add_subcommand("sweep", "Run a configuration grid");
  sw->add_option("--grid", grid, "Grid file")->required()->check(CLI::ExistingFile);
  sw->add_option("--csv", csv, "Output CSV")->required();

  int q = 8;
  std::string base_ckpt;
  auto* bl = app.add_subcommand("baseline", "Pixel-codec baseline");
  bl->add_option("--data", data_path, "Dataset file or directory")->required();
  bl->add_option("--q", q, "Bits per pixel after quantization")->required()->check(CLI::Range(1, 8));
  bl->add_option("--csv", csv, "Output CSV")->required();
  bl->add_option("--ckpt", base_ckpt, "Checkpoint used to score reconstructions")->check(CLI::ExistingFile);
  bl->add_option("--split", split_name, "train, val or test")->check(CLI::IsMember({"train", "val", "test"}));
  bl->add_option("--bandwidth", bandwidth, "Link bandwidth in bit/s");

  CLI11_PARSE(app, argc, argv);
  try {
    if (*gen) return gen_data(spec, out_dir);
    if (*tr) return train(phase, config, train_data, ckpt_out, log_path);
    if (*ev) return evaluate(ckpt, data_path, csv, dump, split_name, hier, bandwidth);
    if (*sw) return sweep(grid, csv);
    if (*bl) return baseline(data_path, q, csv, base_ckpt, split_name, bandwidth);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
