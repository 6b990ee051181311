// Command-line front end: run the engine over an observation stream,
// generate synthetic datasets, or score an estimated trajectory.
//
// Exit codes: 0 run completed, 2 run aborted, 3 invalid input.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "ctslam/pipeline.hpp"

namespace {

namespace fs = std::filesystem;

nlohmann::json load_json(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ctslam::InvalidInput("cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw ctslam::InvalidInput(std::string("config: ") + e.what());
  }
}

int do_run(const nlohmann::json& j) {
  const ctslam::PipelineConfig cfg = ctslam::pipeline_config_from_json(j);
  const ctslam::RunReport report = ctslam::run(cfg);
  std::cout << (report.status == ctslam::RunStatus::kCompleted ? "completed"
                                                               : "aborted")
            << ": " << report.multiframes << " multi-frames, " << report.kmfs
            << " key multi-frames, " << report.corrections
            << " loop corrections\n"
            << "trajectory: " << report.trajectory_path << "\n"
            << "log: " << report.log_path << "\n";
  if (!report.metrics_path.empty()) {
    std::cout << "metrics: " << report.metrics_path << "\n";
  }
  if (report.status != ctslam::RunStatus::kCompleted) {
    std::cerr << "aborted in stage: " << report.abort_reason << "\n";
    return 2;
  }
  return 0;
}

int do_simulate(const nlohmann::json& j, const std::string& out_dir) {
  nlohmann::json sj = j.value("simulate", nlohmann::json::object());
  if (!sj.contains("seed") && j.contains("seed")) sj["seed"] = j.at("seed");

  ctslam::RigCalibration rig;
  std::string calib;
  if (j.contains("paths")) calib = j.at("paths").value("calibration", "");
  if (!calib.empty()) {
    rig = ctslam::load_calibration(calib);
  } else {
    rig = ctslam::surround_rig(sj.value("n_surround", 4),
                               sj.value("sweep_period", 0.1));
  }
  const ctslam::SimScenario scenario =
      ctslam::sim_scenario_from_json(sj, std::move(rig));
  const ctslam::SimData data = ctslam::generate(scenario);

  fs::create_directories(out_dir);
  const std::string calib_path = (fs::path(out_dir) / "calibration.json").string();
  const std::string obs_path = (fs::path(out_dir) / "observations.ndjson").string();
  const std::string gt_path = (fs::path(out_dir) / "gt.tum").string();
  ctslam::save_calibration(scenario.rig, calib_path);
  ctslam::save_observation_stream(obs_path, data.frames);
  ctslam::save_tum(gt_path, data.gt_samples);
  std::cout << "frames: " << data.frames.size() << "\n"
            << "calibration: " << calib_path << "\n"
            << "observations: " << obs_path << "\n"
            << "ground truth: " << gt_path << "\n";
  return 0;
}

int do_evaluate(const nlohmann::json& j, const std::string& out_dir) {
  const ctslam::PipelineConfig cfg = ctslam::pipeline_config_from_json(j);
  if (cfg.paths.estimate.empty() || cfg.paths.ground_truth.empty()) {
    throw ctslam::InvalidInput(
        "evaluate needs paths.estimate and paths.ground_truth");
  }
  const ctslam::SampledTrajectory est = ctslam::load_tum(cfg.paths.estimate);
  const ctslam::SampledTrajectory gt =
      ctslam::load_tum(cfg.paths.ground_truth);
  if (gt.empty()) throw ctslam::InvalidInput("ground truth is empty");
  const ctslam::MetricsReport report =
      ctslam::evaluate_or_pad(est.samples(), gt);

  fs::create_directories(out_dir);
  const std::string metrics_path = (fs::path(out_dir) / "metrics.csv").string();
  ctslam::write_metrics_csv(metrics_path, report);
  std::cout << "metrics: " << metrics_path << "\n"
            << "auc_ate: " << report.auc_ate << "\n"
            << "auc_rpe_trans: " << report.auc_rpe_trans << "\n"
            << "auc_rpe_rot: " << report.auc_rpe_rot << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continuous-time asynchronous multi-camera SLAM"};
  app.require_subcommand(1);

  std::string config_path, mode, out_dir;
  std::uint64_t seed = 0;

  CLI::App* sub_run = app.add_subcommand("run", "Run the engine on a stream");
  CLI::App* sub_sim =
      app.add_subcommand("simulate", "Generate a synthetic dataset");
  CLI::App* sub_eval =
      app.add_subcommand("evaluate", "Score an estimated trajectory");
  for (CLI::App* sub : {sub_run, sub_sim, sub_eval}) {
    sub->add_option("--config", config_path, "pipeline config JSON")
        ->required();
    sub->add_option("--mode", mode, "slam or vo");
    sub->add_option("--seed", seed, "override the config seed");
    sub->add_option("--out-dir", out_dir, "override paths.out_dir");
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 3;  // help and version are not errors
  }
  CLI::App* sub = app.get_subcommands().front();

  try {
    nlohmann::json j = load_json(config_path);
    if (sub->count("--mode")) j["mode"] = mode;
    if (sub->count("--seed")) j["seed"] = seed;
    if (sub->count("--out-dir")) j["paths"]["out_dir"] = out_dir;
    const std::string effective_out_dir =
        j.contains("paths") ? j.at("paths").value("out_dir", ".")
                            : std::string(".");

    if (sub == sub_run) return do_run(j);
    if (sub == sub_sim) return do_simulate(j, effective_out_dir);
    return do_evaluate(j, effective_out_dir);
  } catch (const ctslam::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
}
