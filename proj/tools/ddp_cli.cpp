#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "dreamdiff/config.hpp"
#include "dreamdiff/controller.hpp"
#include "dreamdiff/dataset.hpp"
#include "dreamdiff/eval.hpp"
#include "dreamdiff/trainer.hpp"

namespace fs = std::filesystem;
using namespace dreamdiff;

namespace {

struct CliOverrides {
    std::string config_path;
    std::optional<std::string> task, suite, out, dataset, checkpoint, resume;
    std::optional<int> episodes, demos, epochs, max_steps;
    std::optional<double> lambda, tau, sub_p;
    std::optional<uint64_t> seed;
    std::optional<std::string> eval_seeds;
    bool episode_log = false;
};

RunConfig assemble(const CliOverrides& o) {
    RunConfig cfg;
    if (!o.config_path.empty()) cfg = load_run_config(o.config_path);
    if (o.task) cfg.task = *o.task;
    if (o.suite) cfg.suite = *o.suite;
    if (o.out) cfg.out_dir = *o.out;
    if (o.dataset) cfg.dataset = *o.dataset;
    if (o.checkpoint) cfg.checkpoint = *o.checkpoint;
    if (o.resume) cfg.resume = *o.resume;
    if (o.episodes) cfg.episodes = *o.episodes;
    if (o.demos) cfg.demos = *o.demos;
    if (o.epochs) cfg.train.epochs = *o.epochs;
    if (o.max_steps) cfg.max_steps = *o.max_steps;
    if (o.lambda) cfg.train.lambda = *o.lambda;
    if (o.tau) cfg.tau_diff = *o.tau;
    if (o.seed) cfg.train.seed = *o.seed;
    if (o.eval_seeds) apply_config_entry(cfg, "eval_seeds", *o.eval_seeds);
    if (o.episode_log) cfg.episode_log = true;
    if (o.sub_p) cfg.suite = "imagine(" + std::to_string(*o.sub_p) + ")";
    return cfg;
}

void write_manifest(const RunConfig& cfg, const std::string& command, const std::vector<std::string>& inputs,
                    std::vector<std::string> outputs) {
    fs::create_directories(cfg.out_dir);
    std::sort(outputs.begin(), outputs.end());
    nlohmann::json j;
    j["command"] = command;
    j["config_hash"] = config_hash(cfg);
    j["inputs"] = inputs;
    j["outputs"] = outputs;
    j["config"] = canonical_config(cfg);
    std::ofstream os(cfg.out_dir + "/manifest.json");
    os << j.dump(2) << "\n";
}

ModelBundle load_bundle(const RunConfig& cfg) {
    if (cfg.checkpoint.empty()) throw std::runtime_error("no checkpoint given (use --checkpoint or config)");
    Checkpoint c = Checkpoint::load(cfg.checkpoint);
    bool use_ema = c.ema.has_value();
    return ModelBundle::from_checkpoint(c, use_ema);
}

int cmd_collect(const RunConfig& cfg) {
    TaskSpec task = TaskSpec::by_name(cfg.task);
    int retries = 0;
    DemoDataset ds = collect_dataset(task, cfg.demos, cfg.train.seed, cfg.train.point_count, cfg.train.hist_len,
                                     cfg.train.pred_len, cfg.train.horizon, &retries);
    fs::create_directories(cfg.out_dir);
    std::string path = cfg.dataset.empty() ? cfg.out_dir + "/dataset.bin" : cfg.dataset;
    if (!fs::path(path).parent_path().empty()) fs::create_directories(fs::path(path).parent_path());
    ds.save(path);
    write_manifest(cfg, "collect", {}, {path});
    std::cout << "collected " << ds.episodes.size() << " demos for " << cfg.task << " (" << retries
              << " retries) -> " << path << "\n";
    return 0;
}

int cmd_train(const RunConfig& cfg) {
    if (cfg.dataset.empty()) throw std::runtime_error("no dataset given (use --dataset or config)");
    DemoDataset ds = DemoDataset::load(cfg.dataset);
    if (ds.task != cfg.task)
        std::cerr << "[train] dataset task '" << ds.task << "' overrides configured task '" << cfg.task << "'\n";
    Trainer trainer(ds, cfg.train);
    auto logs = trainer.train(cfg.out_dir, cfg.resume);
    write_manifest(cfg, "train", {cfg.dataset},
                   {cfg.out_dir + "/checkpoint.bin", cfg.out_dir + "/train_log.csv"});
    if (!logs.empty())
        std::cout << "trained " << logs.size() << " epochs, final loss " << logs.back().loss_total << " -> "
                  << cfg.out_dir << "/checkpoint.bin\n";
    else
        std::cout << "nothing to train (epoch counter already complete)\n";
    return 0;
}

int cmd_eval(const RunConfig& cfg) {
    ModelBundle bundle = load_bundle(cfg);
    SuiteSpec suite = parse_suite(cfg.suite, bundle.cfg.lambda);
    if (suite.name == "ood_tracked" && suite.pipeline == ControllerConfig::Pipeline::full && cfg.tau_diff < 0)
        throw std::runtime_error("ood_tracked needs a calibrated tau_diff (run the calibrate command first)");
    ControllerConfig base = cfg.controller();
    SuiteMetrics m = run_suite(bundle, suite, cfg.disturbances(), base, cfg.episodes, cfg.eval_seeds, cfg.out_dir,
                               true);
    fs::create_directories(cfg.out_dir);
    std::string csv = cfg.out_dir + "/metrics.csv";
    write_metrics_csv(csv, {m});
    write_manifest(cfg, "eval", {cfg.checkpoint}, {csv});
    std::cout << m.suite << " on " << m.task << ": mean " << m.mean << "% +- " << m.stddev << " over "
              << cfg.eval_seeds.size() << " seeds x " << cfg.episodes << " episodes\n";
    return 0;
}

int cmd_trace(const RunConfig& cfg) {
    ModelBundle bundle = load_bundle(cfg);
    TaskSpec task = TaskSpec::by_name(bundle.task);
    PipelineHooks hooks = make_model_hooks(bundle, true);
    ControllerConfig ctrl = cfg.controller();
    ctrl.hist_len = bundle.cfg.hist_len;
    ctrl.pred_len = bundle.cfg.pred_len;
    ctrl.horizon = bundle.cfg.horizon;
    ctrl.action_dim = bundle.action_dim;
    uint64_t ep_seed = cfg.train.seed;
    PlanarEnv env(task, Rng(ep_seed).fork("env").base_seed(), bundle.cfg.point_count);

    fs::create_directories(cfg.out_dir);
    std::string csv_path = cfg.out_dir + "/trace.csv";
    std::string jsonl_path = cfg.out_dir + "/episode_log.jsonl";
    std::ofstream csv(csv_path);
    csv << "step,discrepancy,mode,tau_diff\n";
    std::ofstream jsonl(jsonl_path);
    char buf[160];
    auto observer = [&](const StepRecord& rec, const PlanarEnv& e) {
        if (std::isnan(rec.discrepancy))
            std::snprintf(buf, sizeof(buf), "%d,,%s,%.9g\n", rec.step, rec.mode == Mode::ID ? "ID" : "OOD",
                          ctrl.tau_diff);
        else
            std::snprintf(buf, sizeof(buf), "%d,%.9g,%s,%.9g\n", rec.step, rec.discrepancy,
                          rec.mode == Mode::ID ? "ID" : "OOD", ctrl.tau_diff);
        csv << buf;
        nlohmann::json j;
        j["step"] = rec.step;
        j["mode"] = rec.mode == Mode::ID ? "ID" : "OOD";
        j["action"] = {{"dx", rec.action.dx}, {"dy", rec.action.dy}, {"grip", rec.action.grip}};
        nlohmann::json objs = nlohmann::json::object();
        for (size_t i = 0; i < e.task().objects.size(); ++i)
            objs[e.task().objects[i].id] = {{"x", e.state().objects[i].pos.x},
                                            {"y", e.state().objects[i].pos.y},
                                            {"theta", e.state().objects[i].theta}};
        j["state"] = {{"objects", objs},
                      {"gripper", {{"x", e.state().gripper.x}, {"y", e.state().gripper.y}}},
                      {"grip_closed", e.state().grip_closed},
                      {"attached", e.state().attached}};
        jsonl << j.dump() << "\n";
    };
    std::vector<DisturbanceEvent> events = cfg.suite == "id" ? std::vector<DisturbanceEvent>{} : cfg.disturbances();
    EpisodeResult res = run_episode(env, hooks, ctrl, events, ep_seed, observer);
    std::ofstream(cfg.out_dir + "/episode_result.json") << res.to_json().dump(2) << "\n";
    write_manifest(cfg, "trace", {cfg.checkpoint}, {csv_path, jsonl_path, cfg.out_dir + "/episode_result.json"});
    std::cout << "trace: " << res.steps << " steps, success " << (res.success ? "yes" : "no")
              << ", first OOD step " << res.first_ood_step << " -> " << csv_path << "\n";
    return 0;
}

int cmd_calibrate(const RunConfig& cfg) {
    ModelBundle bundle = load_bundle(cfg);
    CalibrationResult cal = calibrate_tau(bundle, cfg.episodes, cfg.train.seed, cfg.controller());
    fs::create_directories(cfg.out_dir);
    std::string path = cfg.out_dir + "/tau_" + bundle.task + ".cfg";
    char buf[256];
    std::snprintf(buf, sizeof(buf),
                  "# calibrated discrepancy threshold (mean + 6*std over %zu in-distribution samples)\n"
                  "tau_diff = %.12g\n",
                  cal.samples, cal.tau);
    std::ofstream(path) << buf;
    write_manifest(cfg, "calibrate", {cfg.checkpoint}, {path});
    std::snprintf(buf, sizeof(buf), "tau_diff = %.12g (mean %.3g, std %.3g, max %.3g, %zu samples) -> %s", cal.tau,
                  cal.mean, cal.stddev, cal.max_seen, cal.samples, path.c_str());
    std::cout << buf << "\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"diffusion visuomotor policy with a co-trained latent world model"};
    app.require_subcommand(1);
    CliOverrides o;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config_path, "key = value config file");
        sub->add_option("--task", o.task, "task name (push | pickplace | press)");
        sub->add_option("--seed", o.seed, "base seed");
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--episodes", o.episodes, "episode count");
        sub->add_option("--lambda", o.lambda, "world-model loss weight");
        sub->add_option("--suite", o.suite, "evaluation suite: id | ood_base | ood_tracked | imagine(p)");
        sub->add_option("--dataset", o.dataset, "dataset path");
        sub->add_option("--checkpoint", o.checkpoint, "checkpoint path");
    };

    CLI::App* collect = app.add_subcommand("collect", "record expert demonstrations");
    add_common(collect);
    collect->add_option("--demos", o.demos, "number of demonstrations");

    CLI::App* train = app.add_subcommand("train", "train the policy and world model jointly");
    add_common(train);
    train->add_option("--epochs", o.epochs, "training epochs");
    train->add_option("--resume", o.resume, "checkpoint to resume from");

    CLI::App* eval = app.add_subcommand("eval", "run an evaluation suite");
    add_common(eval);
    eval->add_option("--tau", o.tau, "discrepancy threshold override");
    eval->add_option("--p", o.sub_p, "imagination substitution probability");
    eval->add_option("--eval-seeds", o.eval_seeds, "comma-separated evaluation seeds");
    eval->add_option("--max-steps", o.max_steps, "episode step budget override");

    CLI::App* trace = app.add_subcommand("trace", "write a per-step discrepancy trace for one episode");
    add_common(trace);
    trace->add_option("--tau", o.tau, "discrepancy threshold");
    trace->add_flag("--episode-log", o.episode_log, "also write the JSONL state log");

    CLI::App* calibrate = app.add_subcommand("calibrate", "calibrate the discrepancy threshold on clean episodes");
    add_common(calibrate);

    CLI11_PARSE(app, argc, argv);

    try {
        RunConfig cfg = assemble(o);
        if (collect->parsed()) return cmd_collect(cfg);
        if (train->parsed()) return cmd_train(cfg);
        if (eval->parsed()) return cmd_eval(cfg);
        if (trace->parsed()) return cmd_trace(cfg);
        if (calibrate->parsed()) return cmd_calibrate(cfg);
        throw std::runtime_error("no subcommand");
    } catch (const std::exception& e) {
        nlohmann::json err;
        err["error"] = e.what();
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
