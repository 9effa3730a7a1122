#pragma once

#include <cstddef>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

namespace cmrc {

struct EmF1 {
  double em = 0.0;  // 0 or 1
  double f1 = 0.0;  // [0, 1]
};

// Token-multiset overlap. Throws on an empty gold list.
EmF1 em_f1(std::span<const int> pred, std::span<const int> gold);

// Arithmetic mean; throws on an empty list.
double f1_avg(std::span<const double> per_domain_f1);

// Mean over a pooled set of per-sample scores. The sum runs in sorted order,
// so the result does not depend on how the pool was concatenated.
double f1_all(std::span<const double> per_sample_f1);

struct DomainScore {
  std::string name;
  std::size_t domain = 0;  // index in the stream's domain list
  std::size_t count = 0;   // test samples scored
  double em = 0.0;         // percent
  double f1 = 0.0;         // percent
  bool operator==(const DomainScore&) const = default;
};

// Sample-weighted F1 over several domains' test sets; equals f1_avg of the
// entries when all counts are equal.
double f1_all(std::span<const DomainScore> scores);

struct StepReport {
  std::size_t step = 0;    // 0-based position in the visiting order
  std::size_t domain = 0;  // domain trained at this step
  std::string domain_name;
  std::vector<DomainScore> scores;  // seen domains in visiting order
  double f1_avg = 0.0;
  double f1_all = 0.0;
  bool operator==(const StepReport&) const = default;
};

struct EvalReport {
  nlohmann::ordered_json metadata = nlohmann::ordered_json::object();
  std::vector<StepReport> steps;
  bool operator==(const EvalReport&) const = default;
};

StepReport make_step_report(std::size_t step, std::size_t domain, std::string domain_name,
                            std::vector<DomainScore> scores);

struct ForgettingMatrix {
  std::vector<std::string> domains;      // column labels, visiting order
  std::vector<std::vector<double>> f1;   // row t has t+1 entries
  // F1 at a domain's introduction step minus F1 at the last step; one entry
  // per domain introduced before the last step.
  std::vector<double> deltas;
};
ForgettingMatrix forgetting_matrix(const EvalReport& report);

// Report file: JSON object {"schema": "cmrc-report/1", "metadata": {...},
// "steps": [{"step", "domain", "domain_name", "scores": [{"name", "domain",
// "count", "em", "f1"}], "f1_avg", "f1_all"}]}.
nlohmann::ordered_json report_to_json(const EvalReport& report);
EvalReport report_from_json(const nlohmann::json& j);
void write_report(const std::filesystem::path& path, const EvalReport& report);
EvalReport read_report(const std::filesystem::path& path);

// One row per step: step, domain, f1, em, f1_avg, f1_all. f1/em refer to the
// domain trained at that step.
void write_curve_csv(std::ostream& out, const EvalReport& report);
void write_curve_csv(const std::filesystem::path& path, const EvalReport& report);
// Forgetting matrix and per-step averages as a plain-text table.
void print_report_table(std::ostream& out, const EvalReport& report);

}  // namespace cmrc
