#include "cmrc/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <ostream>
#include <stdexcept>

namespace cmrc {

EmF1 em_f1(std::span<const int> pred, std::span<const int> gold) {
  if (gold.empty()) throw std::invalid_argument("em_f1: empty gold answer");
  EmF1 out;
  out.em = std::equal(pred.begin(), pred.end(), gold.begin(), gold.end()) ? 1.0 : 0.0;
  if (pred.empty()) return out;
  std::map<int, int> gold_counts;
  for (int t : gold) ++gold_counts[t];
  std::size_t overlap = 0;
  for (int t : pred) {
    auto it = gold_counts.find(t);
    if (it != gold_counts.end() && it->second > 0) {
      --it->second;
      ++overlap;
    }
  }
  if (overlap == 0) return out;
  const double precision = static_cast<double>(overlap) / static_cast<double>(pred.size());
  const double recall = static_cast<double>(overlap) / static_cast<double>(gold.size());
  out.f1 = 2.0 * precision * recall / (precision + recall);
  return out;
}

double f1_avg(std::span<const double> per_domain_f1) {
  if (per_domain_f1.empty()) throw std::invalid_argument("f1_avg: empty list");
  double total = 0.0;
  for (double v : per_domain_f1) total += v;
  return total / static_cast<double>(per_domain_f1.size());
}

double f1_all(std::span<const double> per_sample_f1) {
  if (per_sample_f1.empty()) throw std::invalid_argument("f1_all: empty pool");
  std::vector<double> sorted(per_sample_f1.begin(), per_sample_f1.end());
  std::sort(sorted.begin(), sorted.end());
  double total = 0.0;
  for (double v : sorted) total += v;
  return total / static_cast<double>(sorted.size());
}

double f1_all(std::span<const DomainScore> scores) {
  if (scores.empty()) throw std::invalid_argument("f1_all: no domains");
  const bool equal_sizes = std::all_of(scores.begin(), scores.end(),
                                       [&](const DomainScore& s) { return s.count == scores.front().count; });
  std::vector<std::pair<double, std::size_t>> parts;
  for (const auto& s : scores) parts.emplace_back(s.f1, s.count);
  std::sort(parts.begin(), parts.end());
  if (equal_sizes) {
    std::vector<double> f1s;
    for (const auto& [f1, n] : parts) f1s.push_back(f1);
    return f1_avg(f1s);
  }
  double weighted = 0.0;
  std::size_t total = 0;
  for (const auto& [f1, n] : parts) {
    weighted += f1 * static_cast<double>(n);
    total += n;
  }
  if (total == 0) throw std::invalid_argument("f1_all: no scored samples");
  return weighted / static_cast<double>(total);
}

StepReport make_step_report(std::size_t step, std::size_t domain, std::string domain_name,
                            std::vector<DomainScore> scores) {
  StepReport r;
  r.step = step;
  r.domain = domain;
  r.domain_name = std::move(domain_name);
  std::vector<double> f1s;
  for (const auto& s : scores) f1s.push_back(s.f1);
  r.f1_avg = f1_avg(f1s);
  r.f1_all = f1_all(std::span<const DomainScore>(scores));
  r.scores = std::move(scores);
  return r;
}

ForgettingMatrix forgetting_matrix(const EvalReport& report) {
  ForgettingMatrix m;
  for (std::size_t t = 0; t < report.steps.size(); ++t) {
    const StepReport& step = report.steps[t];
    if (step.scores.size() != t + 1) {
      throw std::runtime_error("forgetting_matrix: step " + std::to_string(t) + " has " +
                               std::to_string(step.scores.size()) + " entries, expected " + std::to_string(t + 1));
    }
    m.domains.push_back(step.domain_name);
    std::vector<double> row;
    for (const auto& s : step.scores) row.push_back(s.f1);
    m.f1.push_back(std::move(row));
  }
  if (m.f1.size() >= 2) {
    const auto& last = m.f1.back();
    for (std::size_t d = 0; d + 1 < m.f1.size(); ++d) m.deltas.push_back(m.f1[d][d] - last[d]);
  }
  return m;
}

nlohmann::ordered_json report_to_json(const EvalReport& report) {
  nlohmann::ordered_json j;
  j["schema"] = "cmrc-report/1";
  j["metadata"] = report.metadata;
  j["steps"] = nlohmann::ordered_json::array();
  for (const auto& step : report.steps) {
    nlohmann::ordered_json s;
    s["step"] = step.step;
    s["domain"] = step.domain;
    s["domain_name"] = step.domain_name;
    s["scores"] = nlohmann::ordered_json::array();
    for (const auto& d : step.scores) {
      s["scores"].push_back(
          {{"name", d.name}, {"domain", d.domain}, {"count", d.count}, {"em", d.em}, {"f1", d.f1}});
    }
    s["f1_avg"] = step.f1_avg;
    s["f1_all"] = step.f1_all;
    j["steps"].push_back(std::move(s));
  }
  return j;
}

EvalReport report_from_json(const nlohmann::json& j) {
  if (j.value("schema", "") != "cmrc-report/1") throw std::runtime_error("report: unknown schema");
  EvalReport r;
  r.metadata = nlohmann::ordered_json::parse(j.at("metadata").dump());
  for (const auto& s : j.at("steps")) {
    StepReport step;
    step.step = s.at("step").get<std::size_t>();
    step.domain = s.at("domain").get<std::size_t>();
    step.domain_name = s.at("domain_name").get<std::string>();
    for (const auto& d : s.at("scores")) {
      DomainScore score;
      score.name = d.at("name").get<std::string>();
      score.domain = d.at("domain").get<std::size_t>();
      score.count = d.at("count").get<std::size_t>();
      score.em = d.at("em").get<double>();
      score.f1 = d.at("f1").get<double>();
      step.scores.push_back(std::move(score));
    }
    step.f1_avg = s.at("f1_avg").get<double>();
    step.f1_all = s.at("f1_all").get<double>();
    r.steps.push_back(std::move(step));
  }
  return r;
}

void write_report(const std::filesystem::path& path, const EvalReport& report) {
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write report " + path.string());
    out << report_to_json(report).dump(2) << '\n';
    if (!out) throw std::runtime_error("failed writing report " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

EvalReport read_report(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read report " + path.string());
  try {
    return report_from_json(nlohmann::json::parse(in));
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(path.string() + ": malformed report: " + e.what());
  }
}

void write_curve_csv(std::ostream& out, const EvalReport& report) {
  out << "step,domain,f1,em,f1_avg,f1_all\n";
  char buf[256];
  for (const auto& step : report.steps) {
    const DomainScore* trained = nullptr;
    for (const auto& s : step.scores)
      if (s.domain == step.domain) trained = &s;
    if (!trained) throw std::runtime_error("report: step " + std::to_string(step.step) + " lacks its own domain");
    std::snprintf(buf, sizeof buf, "%zu,%s,%.4f,%.4f,%.4f,%.4f\n", step.step, step.domain_name.c_str(), trained->f1,
                  trained->em, step.f1_avg, step.f1_all);
    out << buf;
  }
}

void write_curve_csv(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  write_curve_csv(out, report);
}

void print_report_table(std::ostream& out, const EvalReport& report) {
  const ForgettingMatrix m = forgetting_matrix(report);
  char buf[64];
  out << "step  trained     ";
  for (const auto& name : m.domains) {
    std::snprintf(buf, sizeof buf, "%10.10s", name.c_str());
    out << buf;
  }
  out << "    F1_avg    F1_all\n";
  for (std::size_t t = 0; t < m.f1.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%4zu  %-10.10s  ", t, m.domains[t].c_str());
    out << buf;
    for (std::size_t d = 0; d < m.domains.size(); ++d) {
      if (d < m.f1[t].size()) {
        std::snprintf(buf, sizeof buf, "%10.2f", m.f1[t][d]);
      } else {
        std::snprintf(buf, sizeof buf, "%10s", "");
      }
      out << buf;
    }
    std::snprintf(buf, sizeof buf, "%10.2f%10.2f\n", report.steps[t].f1_avg, report.steps[t].f1_all);
    out << buf;
  }
  if (!m.deltas.empty()) {
    out << "forgetting  ";
    for (std::size_t d = 0; d < m.deltas.size(); ++d) {
      std::snprintf(buf, sizeof buf, "  %s %+.2f", m.domains[d].c_str(), m.deltas[d]);
      out << buf;
    }
    out << '\n';
  }
}

}  // namespace cmrc
