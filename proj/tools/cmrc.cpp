// cmrc: generate synthetic streams, run continual training, evaluate
// checkpoints, check gradients and render reports.

#include <cstdio>
#include <exception>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "cmrc/backbone.hpp"
#include "cmrc/data.hpp"
#include "cmrc/engine.hpp"
#include "cmrc/gradcheck.hpp"
#include "cmrc/metrics.hpp"

using namespace cmrc;

namespace {

std::vector<std::size_t> parse_order(const std::string& text) {
  std::vector<std::size_t> order;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    std::size_t pos = 0;
    long long v = -1;
    try {
      v = std::stoll(item, &pos);
    } catch (const std::exception&) {
      pos = 0;
    }
    if (pos != item.size() || v < 0) throw std::invalid_argument("--order: expected comma-separated indices, got '" + text + "'");
    order.push_back(static_cast<std::size_t>(v));
  }
  return order;
}

nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path + ": " + e.what());
  }
}

struct GenArgs {
  std::string setting = "cdaq";
  GeneratorConfig config;
  bool own_answers = false;
  std::string out = "data";
};

struct RunArgs {
  std::string config_file;
  std::string method;
  std::string data;
  std::size_t memory = 0;
  std::string norm;
  std::string uncertainty;
  std::string order;
  std::uint64_t seed = 0;
  std::size_t epochs = 0;
  std::size_t batch = 0;
  double lr = 0.0;
  std::size_t hidden = 0;
  std::size_t layers = 0;
  std::size_t heads = 0;
  std::size_t max_len = 0;
  double adv = 0.0;
  double kl = 0.0;
  std::string out = "report.json";
  std::string csv;
  std::string state_dir;
  std::string save_model;
};

int cmd_gen(const GenArgs& a) {
  GeneratorConfig c = a.config;
  c.cross_domain_answers = !a.own_answers;
  DomainStream stream;
  if (a.setting == "cdaq") {
    stream = generate_cdaq_stream(c);
  } else if (a.setting == "cdac") {
    stream = generate_cdac_stream(c);
  } else {
    throw std::invalid_argument("--setting must be cdac or cdaq");
  }
  write_stream(a.out, stream);
  std::printf("wrote %zu domains (%s) to %s\n", stream.domains.size(), stream.setting.c_str(), a.out.c_str());
  return 0;
}

int cmd_run(const RunArgs& a, const CLI::App& sub) {
  ContinualConfig config;
  if (!a.config_file.empty()) config = config_from_json(read_json_file(a.config_file));
  auto given = [&](const char* name) { return sub.get_option(name)->count() > 0; };
  if (given("--method")) config.method = parse_method(a.method);
  if (given("--memory")) config.memory_capacity = a.memory;
  if (given("--norm")) config.norm = parse_norm(a.norm);
  if (given("--uncertainty")) config.uncertainty = parse_uncertainty(a.uncertainty);
  if (given("--order")) config.order = parse_order(a.order);
  if (given("--seed")) config.seed = a.seed;
  if (given("--epochs")) config.epochs = a.epochs;
  if (given("--batch")) config.batch_size = a.batch;
  if (given("--lr")) config.lr = a.lr;
  if (given("--hidden")) config.model.hidden = a.hidden;
  if (given("--layers")) config.model.layers = a.layers;
  if (given("--heads")) config.model.heads = a.heads;
  if (given("--max-len")) config.model.max_len = a.max_len;
  if (given("--adv")) config.weights.adv = a.adv;
  if (given("--kl")) config.weights.kl = a.kl;

  const DomainStream stream = load_stream(a.data);
  const std::vector<DomainSamples> data = prepare_stream(stream, config);
  RunOptions options;
  if (!a.state_dir.empty()) options.state_dir = a.state_dir;
  RunHooks hooks;
  hooks.on_step_end = [](const StepContext& ctx) {
    std::fprintf(stderr, "step %zu (%s): F1_avg %.2f  F1_all %.2f\n", ctx.step, ctx.report->domain_name.c_str(),
                 ctx.report->f1_avg, ctx.report->f1_all);
  };
  const RunResult result = run_stream(data, config, hooks, options);

  write_report(a.out, result.report);
  nlohmann::ordered_json timings;
  timings["step_seconds"] = result.step_seconds;
  std::ofstream(a.out + ".timings.json", std::ios::binary) << timings.dump(2) << '\n';
  if (!a.csv.empty()) write_curve_csv(std::filesystem::path(a.csv), result.report);
  if (!a.save_model.empty()) save_checkpoint(a.save_model, result.model);
  std::printf("wrote %s\n", a.out.c_str());
  return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& data_dir, const std::string& out,
             std::size_t max_answer_len) {
  const BackboneModel model = load_checkpoint(checkpoint);
  const DomainStream stream = load_stream(data_dir);
  if (stream.vocab.size() > model.config().vocab_size) {
    throw std::runtime_error("data vocabulary (" + std::to_string(stream.vocab.size()) +
                             ") is larger than the checkpoint's (" + std::to_string(model.config().vocab_size) + ")");
  }
  const auto data = assemble_stream(stream, model.config().max_len);
  EvalReport report;
  report.metadata["checkpoint"] = checkpoint;
  report.metadata["data"] = data_dir;
  std::vector<std::string> names;
  for (const auto& d : data) names.push_back(d.name);
  report.metadata["domains"] = names;
  // One row scoring every domain, labelled with the last one.
  std::vector<DomainScore> scores;
  for (std::size_t d = 0; d < data.size(); ++d) scores.push_back(evaluate_domain(model, data[d], d, max_answer_len));
  for (const auto& s : scores) std::printf("%-12s EM %6.2f  F1 %6.2f  (%zu)\n", s.name.c_str(), s.em, s.f1, s.count);
  StepReport row = make_step_report(0, data.size() - 1, data.back().name, scores);
  std::printf("F1_avg %.2f  F1_all %.2f\n", row.f1_avg, row.f1_all);
  report.steps.push_back(std::move(row));
  if (!out.empty()) {
    const auto j = report_to_json(report);
    std::ofstream(out, std::ios::binary) << j.dump(2) << '\n';
  }
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double tolerance) {
  bool ok = true;
  for (const auto& r : run_gradcheck_suite(seed, tolerance)) {
    std::printf("%-32s %.3e  %s\n", r.name.c_str(), r.max_rel_error, r.passed ? "ok" : "FAIL");
    ok = ok && r.passed;
  }
  return ok ? 0 : 1;
}

int cmd_report(const std::string& in, const std::string& csv) {
  const EvalReport report = read_report(in);
  if (report.metadata.contains("method")) {
    std::printf("method %s  seed %s  config %s\n", report.metadata["method"].get<std::string>().c_str(),
                report.metadata["seed"].dump().c_str(), report.metadata.value("config_hash", "?").c_str());
  }
  print_report_table(std::cout, report);
  if (!csv.empty()) write_curve_csv(std::filesystem::path(csv), report);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual span-extraction trainer with replay memory, adversarial alignment and distillation"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* gen_cmd = app.add_subcommand("gen", "Generate a synthetic domain stream");
  gen_cmd->add_option("--setting", gen.setting, "cdac (per-domain corpora) or cdaq (per-domain question types)")
      ->check(CLI::IsMember({"cdac", "cdaq"}));
  gen_cmd->add_option("--domains", gen.config.domains, "Number of domains");
  gen_cmd->add_option("--train", gen.config.train_per_domain, "Training samples per domain");
  gen_cmd->add_option("--test", gen.config.test_per_domain, "Test samples per domain");
  gen_cmd->add_option("--vocab", gen.config.vocab_size, "Vocabulary size");
  gen_cmd->add_option("--seed", gen.config.seed, "Generator seed");
  gen_cmd->add_flag("--own-answers", gen.own_answers, "cdac: draw answers from each corpus's own payload block");
  gen_cmd->add_option("--out", gen.out, "Output directory");

  RunArgs run;
  auto* run_cmd = app.add_subcommand("run", "Train over a domain stream and write a report");
  run_cmd->add_option("--config", run.config_file, "JSON run manifest; flags override its values")
      ->check(CLI::ExistingFile);
  run_cmd->add_option("--method", run.method, "ma_mrc, lower, upper, ewc, online_ewc, agem, der, derpp")
      ->check(CLI::IsMember({"ma_mrc", "lower", "upper", "ewc", "online_ewc", "agem", "der", "derpp"}));
  run_cmd->add_option("--data", run.data, "Stream directory written by gen")->required()->check(CLI::ExistingDirectory);
  run_cmd->add_option("--memory", run.memory, "Memory capacity");
  run_cmd->add_option("--norm", run.norm, "norm1 or norm2")->check(CLI::IsMember({"norm1", "norm2"}));
  run_cmd->add_option("--uncertainty", run.uncertainty, "entropy, prob or random")
      ->check(CLI::IsMember({"entropy", "prob", "random"}));
  run_cmd->add_option("--order", run.order, "Domain order as a comma list, e.g. 2,0,1");
  run_cmd->add_option("--seed", run.seed, "Training seed");
  run_cmd->add_option("--epochs", run.epochs, "Epochs per domain")->check(CLI::PositiveNumber);
  run_cmd->add_option("--batch", run.batch, "Batch size")->check(CLI::PositiveNumber);
  run_cmd->add_option("--lr", run.lr, "Learning rate")->check(CLI::PositiveNumber);
  run_cmd->add_option("--hidden", run.hidden, "Encoder width");
  run_cmd->add_option("--layers", run.layers, "Encoder blocks");
  run_cmd->add_option("--heads", run.heads, "Attention heads");
  run_cmd->add_option("--max-len", run.max_len, "Maximum input length");
  run_cmd->add_option("--adv", run.adv, "Weight of the adversarial term");
  run_cmd->add_option("--kl", run.kl, "Weight of the distillation term");
  run_cmd->add_option("--out", run.out, "Report path");
  run_cmd->add_option("--csv", run.csv, "Also write the F1-vs-step CSV here");
  run_cmd->add_option("--state-dir", run.state_dir, "Checkpoint directory; an interrupted run resumes from it");
  run_cmd->add_option("--save-model", run.save_model, "Write the final model checkpoint here");

  std::string eval_ckpt, eval_data, eval_out;
  std::size_t eval_max_answer = 16;
  auto* eval_cmd = app.add_subcommand("eval", "Score a checkpoint on every test split of a stream");
  eval_cmd->add_option("--checkpoint", eval_ckpt, "Model checkpoint")->required()->check(CLI::ExistingFile);
  eval_cmd->add_option("--data", eval_data, "Stream directory")->required()->check(CLI::ExistingDirectory);
  eval_cmd->add_option("--out", eval_out, "Report path");
  eval_cmd->add_option("--max-answer-len", eval_max_answer, "Longest decoded span")->check(CLI::PositiveNumber);

  std::uint64_t gc_seed = 0;
  double gc_tol = 1e-4;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference check of every loss");
  gc_cmd->add_option("--seed", gc_seed, "Instance seed");
  gc_cmd->add_option("--tolerance", gc_tol, "Maximum relative error");

  std::string report_in, report_csv;
  auto* report_cmd = app.add_subcommand("report", "Print a report as a table and export the F1 curve");
  report_cmd->add_option("report", report_in, "Report file")->required()->check(CLI::ExistingFile);
  report_cmd->add_option("--csv", report_csv, "CSV output path");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen_cmd) return cmd_gen(gen);
    if (*run_cmd) return cmd_run(run, *run_cmd);
    if (*eval_cmd) return cmd_eval(eval_ckpt, eval_data, eval_out, eval_max_answer);
    if (*gc_cmd) return cmd_gradcheck(gc_seed, gc_tol);
    if (*report_cmd) return cmd_report(report_in, report_csv);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
