#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "cmrc/data.hpp"
#include "cmrc/log.hpp"

using namespace cmrc;
namespace fs = std::filesystem;

namespace {

GeneratorConfig small(std::uint64_t seed = 1) {
  GeneratorConfig g;
  g.domains = 3;
  g.train_per_domain = 64;
  g.test_per_domain = 32;
  g.seed = seed;
  return g;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("cmrc_test_data_" + name);
  fs::remove_all(p);
  return p;
}

// Rule-based extractor: find the marker for the question, return the run of
// answer-range tokens after it (passage-local indices).
std::pair<int, int> oracle_extract(const Record& r, const SyntheticLayout& layout, bool corpus_setting) {
  std::size_t k = 0;
  if (!corpus_setting) {
    for (int q : r.question_ids)
      for (std::size_t d = 0; d < layout.question_type.size(); ++d)
        if (layout.question_type[d] == q) k = d;
  } else {
    k = static_cast<std::size_t>(r.domain);
  }
  const int marker = corpus_setting ? layout.marker[0] : layout.marker[k];
  const IdRange& answers = layout.answer[k];
  for (std::size_t i = 0; i + 1 < r.passage_ids.size(); ++i) {
    if (r.passage_ids[i] != marker) continue;
    std::size_t j = i + 1;
    while (j + 1 < r.passage_ids.size() && answers.contains(r.passage_ids[j + 1])) ++j;
    return {static_cast<int>(i + 1), static_cast<int>(j)};
  }
  return {-1, -1};
}

struct QuietWarnings {
  QuietWarnings() { set_warnings_silenced(true); }
  ~QuietWarnings() { set_warnings_silenced(false); }
};

}  // namespace

TEST_CASE("input assembly arithmetic") {
  const std::vector<int> q{10, 11, 12};
  const std::vector<int> p{20, 21, 22, 23, 24};
  const AssembledInput full = build_input_sequence(q, p, 64);
  CHECK(full.ids.size() == 11);
  CHECK(full.passage_offset == 5);
  CHECK(full.ids == std::vector<int>{kClsId, 10, 11, 12, kSepId, 20, 21, 22, 23, 24, kSepId});

  Record r;
  r.id = "x";
  r.question_ids = q;
  r.passage_ids = p;
  r.answer_start = 0;
  r.answer_end = 1;
  const auto s = assemble_sample(r, 64);
  REQUIRE(s.has_value());
  CHECK(s->answer_start == 5);
  CHECK(s->answer_end == 6);
  CHECK(s->answer_ids == std::vector<int>{20, 21});

  const AssembledInput cut = build_input_sequence(q, p, 9);
  CHECK(cut.ids.size() == 9);
  CHECK(cut.passage_kept == 3);
  CHECK(cut.ids.back() == kSepId);
  // max_len 10 keeps 4 passage tokens.
  const AssembledInput cut4 = build_input_sequence(q, p, 10);
  CHECK(cut4.passage_kept == 4);
  CHECK(cut4.ids == std::vector<int>{kClsId, 10, 11, 12, kSepId, 20, 21, 22, 23, kSepId});
}

TEST_CASE("answers truncated away are excluded and counted") {
  QuietWarnings quiet;
  Record r;
  r.id = "lost";
  r.question_ids = {10, 11, 12};
  r.passage_ids = {20, 21, 22, 23, 24};
  r.answer_start = 3;
  r.answer_end = 4;
  AssemblyStats stats;
  CHECK_FALSE(assemble_sample(r, 9, &stats).has_value());
  CHECK(stats.truncated_away == 1);
  CHECK(assemble_sample(r, 10, &stats) == std::nullopt);
  CHECK(assemble_sample(r, 11, &stats).has_value());
}

TEST_CASE("generated samples satisfy the span invariants") {
  for (bool corpus : {false, true}) {
    const DomainStream stream = corpus ? generate_cdac_stream(small()) : generate_cdaq_stream(small());
    AssemblyStats stats;
    const auto data = assemble_stream(stream, 128, &stats);
    CHECK(stats.truncated_away == 0);
    for (std::size_t k = 0; k < data.size(); ++k) {
      CHECK(data[k].train.size() == 64);
      CHECK(data[k].test.size() == 32);
      std::set<std::string> train_ids;
      for (const auto& s : data[k].train) train_ids.insert(s.id);
      for (const auto& s : data[k].test) CHECK(train_ids.count(s.id) == 0);
      for (const auto* split : {&data[k].train, &data[k].test}) {
        for (const Sample& s : *split) {
          const auto offset = static_cast<int>(s.question_ids.size() + 2);
          CHECK(s.answer_start <= s.answer_end);
          CHECK(s.answer_start >= offset);
          CHECK(s.answer_end < static_cast<int>(s.input_ids.size()) - 1);
          CHECK(s.answer_ids == std::vector<int>(s.input_ids.begin() + s.answer_start,
                                                 s.input_ids.begin() + s.answer_end + 1));
          CHECK(s.domain == static_cast<int>(k));
        }
      }
    }
  }
}

TEST_CASE("a rule-based extractor recovers every generated answer") {
  for (bool corpus : {false, true}) {
    const GeneratorConfig g = small(5);
    const DomainStream stream = corpus ? generate_cdac_stream(g) : generate_cdaq_stream(g);
    const SyntheticLayout layout = corpus ? passage_corpus_layout(g) : question_type_layout(g);
    std::size_t exact = 0, total = 0;
    for (const auto& d : stream.domains)
      for (const auto& r : d.train) {
        ++total;
        exact += oracle_extract(r, layout, corpus) == std::pair{r.answer_start, r.answer_end} ? 1 : 0;
      }
    CAPTURE(corpus);
    CHECK(exact == total);
  }
}

TEST_CASE("the question-type setting ignores the question only at a cost") {
  // Answering with the payload of a fixed marker is right only for that
  // marker's domain.
  const GeneratorConfig g = small(6);
  const DomainStream stream = generate_cdaq_stream(g);
  const SyntheticLayout layout = question_type_layout(g);
  std::size_t hits = 0, total = 0;
  for (const auto& d : stream.domains)
    for (const auto& r : d.test) {
      Record as_zero = r;
      as_zero.question_ids = {layout.question_type[0]};
      ++total;
      hits += oracle_extract(as_zero, layout, false) == std::pair{r.answer_start, r.answer_end} ? 1 : 0;
    }
  CHECK(static_cast<double>(hits) / static_cast<double>(total) < 0.4);
}

TEST_CASE("corpora differ in bag-of-tokens under a random projection") {
  GeneratorConfig g = small(7);
  g.train_per_domain = 200;
  g.test_per_domain = 100;
  const DomainStream stream = generate_cdac_stream(g);
  const std::size_t vocab = stream.vocab.size();
  const std::size_t dim = 16;
  Rng rng(70);
  std::vector<double> projection(vocab * dim);
  for (double& v : projection) v = rng.normal();
  auto features = [&](const Record& r) {
    std::vector<double> f(dim + 1, 0.0);
    for (int t : r.passage_ids)
      for (std::size_t c = 0; c < dim; ++c) f[c] += projection[static_cast<std::size_t>(t) * dim + c];
    for (std::size_t c = 0; c < dim; ++c) f[c] /= static_cast<double>(r.passage_ids.size());
    f[dim] = 1.0;
    return f;
  };
  for (std::size_t a = 0; a < g.domains; ++a) {
    for (std::size_t b = a + 1; b < g.domains; ++b) {
      std::vector<std::pair<std::vector<double>, double>> train, test;
      for (const auto& r : stream.domains[a].train) train.push_back({features(r), 1.0});
      for (const auto& r : stream.domains[b].train) train.push_back({features(r), 0.0});
      for (const auto& r : stream.domains[a].test) test.push_back({features(r), 1.0});
      for (const auto& r : stream.domains[b].test) test.push_back({features(r), 0.0});
      std::vector<double> w(dim + 1, 0.0);
      for (int epoch = 0; epoch < 200; ++epoch) {
        std::vector<double> grad(dim + 1, 0.0);
        for (const auto& [x, y] : train) {
          double z = 0.0;
          for (std::size_t c = 0; c <= dim; ++c) z += w[c] * x[c];
          const double p = 1.0 / (1.0 + std::exp(-z));
          for (std::size_t c = 0; c <= dim; ++c) grad[c] += (p - y) * x[c];
        }
        for (std::size_t c = 0; c <= dim; ++c) w[c] -= 0.5 * grad[c] / static_cast<double>(train.size());
      }
      std::size_t correct = 0;
      for (const auto& [x, y] : test) {
        double z = 0.0;
        for (std::size_t c = 0; c <= dim; ++c) z += w[c] * x[c];
        correct += (z > 0.0) == (y > 0.5) ? 1 : 0;
      }
      const double acc = static_cast<double>(correct) / static_cast<double>(test.size());
      CAPTURE(a);
      CAPTURE(b);
      CHECK(acc > 0.9);
    }
  }
}

TEST_CASE("corpus passage lengths follow their windows") {
  GeneratorConfig g = small(8);
  g.train_per_domain = 1000;
  g.test_per_domain = 10;
  const DomainStream stream = generate_cdac_stream(g);
  const auto ranges = passage_ranges(g);
  for (std::size_t k = 0; k < g.domains; ++k) {
    double total = 0.0;
    for (const auto& r : stream.domains[k].train) total += static_cast<double>(r.passage_ids.size());
    const double mean = total / 1000.0;
    const double expected = 0.5 * static_cast<double>(ranges[k].first + ranges[k].second);
    CHECK(std::abs(mean - expected) <= 0.05 * expected);
  }
}

TEST_CASE("corpora use disjoint filler vocabularies") {
  const GeneratorConfig g = small();
  const SyntheticLayout layout = passage_corpus_layout(g);
  for (std::size_t a = 0; a < g.domains; ++a)
    for (std::size_t b = a + 1; b < g.domains; ++b)
      CHECK((layout.filler[a].end <= layout.filler[b].begin || layout.filler[b].end <= layout.filler[a].begin));
}

TEST_CASE("generators are pure functions of their config") {
  const fs::path a = scratch("gen_a"), b = scratch("gen_b");
  write_stream(a, generate_cdac_stream(small(9)));
  write_stream(b, generate_cdac_stream(small(9)));
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    CHECK(slurp(entry.path()) == slurp(b / fs::relative(entry.path(), a)));
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("different seeds give disjoint ids") {
  for (bool corpus : {false, true}) {
    const DomainStream s1 = corpus ? generate_cdac_stream(small(1)) : generate_cdaq_stream(small(1));
    const DomainStream s2 = corpus ? generate_cdac_stream(small(2)) : generate_cdaq_stream(small(2));
    std::set<std::string> ids;
    for (const auto& d : s1.domains) {
      for (const auto& r : d.train) ids.insert(r.id);
      for (const auto& r : d.test) ids.insert(r.id);
    }
    for (const auto& d : s2.domains)
      for (const auto& r : d.train) CHECK(ids.count(r.id) == 0);
  }
}

TEST_CASE("streams round-trip through the directory layout") {
  const fs::path dir = scratch("roundtrip");
  const DomainStream stream = generate_cdaq_stream(small(10));
  write_stream(dir, stream);
  const DomainStream loaded = load_stream(dir);
  CHECK(loaded.setting == "cdaq");
  CHECK(loaded.vocab.size() == stream.vocab.size());
  REQUIRE(loaded.domains.size() == stream.domains.size());
  for (std::size_t k = 0; k < stream.domains.size(); ++k) {
    CHECK(loaded.domains[k].name == stream.domains[k].name);
    REQUIRE(loaded.domains[k].train.size() == stream.domains[k].train.size());
    for (std::size_t i = 0; i < stream.domains[k].train.size(); ++i) {
      const Record& x = stream.domains[k].train[i];
      const Record& y = loaded.domains[k].train[i];
      CHECK(x.id == y.id);
      CHECK(x.passage_ids == y.passage_ids);
      CHECK(x.question_ids == y.question_ids);
      CHECK(x.answer_start == y.answer_start);
      CHECK(x.answer_end == y.answer_end);
    }
  }
  fs::remove_all(dir);
}

TEST_CASE("text records are tokenized and answers recovered") {
  QuietWarnings quiet;
  const fs::path dir = scratch("text");
  fs::create_directories(dir);
  const fs::path file = dir / "news.jsonl";
  {
    std::ofstream out(file);
    out << R"({"id":"a","domain":"news","question":"who won ?","passage":"the red  team won the cup","answer_text":"red team","answer_char_start":4})"
        << "\n";
    out << R"({"id":"b","domain":"news","question":"what ?","passage":"alpha beta gamma","answer_text":"eta gamma","answer_char_start":7})"
        << "\n";
    out << R"({"id":"c","domain":"news","question":"what ?","passage":"alpha beta","answer_text":"delta","answer_char_start":0})"
        << "\n";
    out << R"({"id":"d","domain":"news","question":"où ?","passage":"café noir","answer_text":"noir","answer_char_start":5})"
        << "\n";
  }
  Vocabulary vocab;
  IngestStats stats;
  const DomainData d = ingest_jsonl(file, vocab, &stats);
  CHECK(d.name == "news");
  CHECK(stats.records == 4);
  CHECK(stats.dropped == 1);
  CHECK(stats.snapped == 1);
  REQUIRE(d.train.size() == 3);

  auto detok = [&](const Record& r) {
    std::string out;
    for (int i = r.answer_start; i <= r.answer_end; ++i) {
      if (!out.empty()) out += " ";
      out += vocab.token(r.passage_ids[static_cast<std::size_t>(i)]);
    }
    return out;
  };
  CHECK(detok(d.train[0]) == "red team");
  CHECK(d.train[1].answer_start == 1);  // snapped from mid-"beta"
  CHECK(detok(d.train[1]) == "beta gamma");
  CHECK(detok(d.train[2]) == "noir");  // code-point offsets
  CHECK(vocab.id("nonexistent") == kUnkId);
  fs::remove_all(dir);
}

TEST_CASE("malformed lines report their line number") {
  const fs::path dir = scratch("bad");
  fs::create_directories(dir);
  const fs::path file = dir / "bad.jsonl";
  {
    std::ofstream out(file);
    out << R"({"id":"a","question_ids":[3],"passage_ids":[4,5],"answer_start":0,"answer_end":1})" << "\n";
    out << "{not json\n";
  }
  Vocabulary vocab;
  try {
    (void)read_dataset_jsonl(file, vocab);
    FAIL("expected an error");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find(":2:") != std::string::npos);
  }
  fs::remove_all(dir);
}

TEST_CASE("an empty file is an empty domain with a warning") {
  QuietWarnings quiet;
  const fs::path dir = scratch("empty");
  fs::create_directories(dir);
  const fs::path file = dir / "empty.jsonl";
  std::ofstream(file).close();
  Vocabulary vocab;
  const std::size_t before = warning_count();
  const DomainData d = ingest_jsonl(file, vocab);
  CHECK(d.train.empty());
  CHECK(warning_count() == before + 1);
  fs::remove_all(dir);
}

TEST_CASE("vocabulary files round-trip and freezing maps new tokens to unknown") {
  Vocabulary v;
  CHECK(v.size() == 3);
  const int cat = v.add("cat");
  CHECK(v.add("cat") == cat);
  const fs::path file = scratch("vocab.txt");
  v.save(file);
  Vocabulary loaded = Vocabulary::load(file);
  CHECK(loaded.size() == v.size());
  CHECK(loaded.id("cat") == cat);
  loaded.freeze();
  CHECK(loaded.add("dog") == kUnkId);
  fs::remove(file);
}
