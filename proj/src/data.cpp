#include "cmrc/data.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "cmrc/log.hpp"

namespace cmrc {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;

// ---------------------------------------------------------------------------
// Vocabulary

Vocabulary::Vocabulary() {
  for (const char* t : {"[CLS]", "[SEP]", "[UNK]"}) add(t);
}

int Vocabulary::add(const std::string& token) {
  if (auto it = index_.find(token); it != index_.end()) return it->second;
  if (frozen_) return kUnkId;
  const int id = static_cast<int>(tokens_.size());
  tokens_.push_back(token);
  index_.emplace(token, id);
  return id;
}

int Vocabulary::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnkId : it->second;
}

const std::string& Vocabulary::token(int id) const {
  if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) return tokens_[kUnkId];
  return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const fs::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
  for (std::size_t i = 0; i < tokens_.size(); ++i) out << tokens_[i] << '\t' << i << '\n';
}

Vocabulary Vocabulary::load(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
  Vocabulary vocab;
  vocab.tokens_.clear();
  vocab.index_.clear();
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto tab = line.rfind('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": expected token<TAB>id");
    }
    const std::string token = line.substr(0, tab);
    const int id = std::stoi(line.substr(tab + 1));
    if (id != static_cast<int>(vocab.tokens_.size())) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": ids must be dense and ordered");
    }
    vocab.tokens_.push_back(token);
    vocab.index_.emplace(token, id);
  }
  if (vocab.tokens_.size() < 3) throw std::runtime_error(path.string() + ": missing special tokens");
  return vocab;
}

// ---------------------------------------------------------------------------
// Input assembly

AssembledInput build_input_sequence(std::span<const int> question_ids, std::span<const int> passage_ids,
                                    std::size_t max_len) {
  if (question_ids.empty() || passage_ids.empty()) {
    throw std::invalid_argument("build_input_sequence: question and passage must be non-empty");
  }
  AssembledInput out;
  out.passage_offset = question_ids.size() + 2;
  if (out.passage_offset + 2 > max_len) {
    throw std::invalid_argument("build_input_sequence: question of length " + std::to_string(question_ids.size()) +
                                " leaves no passage room within " + std::to_string(max_len));
  }
  out.passage_kept = std::min(passage_ids.size(), max_len - out.passage_offset - 1);
  out.ids.reserve(out.passage_offset + out.passage_kept + 1);
  out.ids.push_back(kClsId);
  out.ids.insert(out.ids.end(), question_ids.begin(), question_ids.end());
  out.ids.push_back(kSepId);
  out.ids.insert(out.ids.end(), passage_ids.begin(), passage_ids.begin() + static_cast<std::ptrdiff_t>(out.passage_kept));
  out.ids.push_back(kSepId);
  return out;
}

std::optional<Sample> assemble_sample(const Record& record, std::size_t max_len, AssemblyStats* stats) {
  if (record.answer_start < 0 || record.answer_end < record.answer_start ||
      static_cast<std::size_t>(record.answer_end) >= record.passage_ids.size()) {
    throw std::invalid_argument("record " + record.id + ": answer span outside passage");
  }
  AssembledInput in = build_input_sequence(record.question_ids, record.passage_ids, max_len);
  if (static_cast<std::size_t>(record.answer_end) >= in.passage_kept) {
    if (stats) ++stats->truncated_away;
    warn("record " + record.id + ": answer truncated away, excluded");
    return std::nullopt;
  }
  Sample s;
  s.id = record.id;
  s.domain = record.domain;
  s.question_ids = record.question_ids;
  s.passage_ids.assign(record.passage_ids.begin(), record.passage_ids.begin() + static_cast<std::ptrdiff_t>(in.passage_kept));
  s.answer_start = static_cast<int>(in.passage_offset) + record.answer_start;
  s.answer_end = static_cast<int>(in.passage_offset) + record.answer_end;
  s.input_ids = std::move(in.ids);
  s.answer_ids.assign(s.input_ids.begin() + s.answer_start, s.input_ids.begin() + s.answer_end + 1);
  if (stats) ++stats->assembled;
  return s;
}

std::vector<DomainSamples> assemble_stream(const DomainStream& stream, std::size_t max_len, AssemblyStats* stats) {
  std::vector<DomainSamples> out;
  for (const auto& d : stream.domains) {
    DomainSamples ds;
    ds.name = d.name;
    for (const auto& r : d.train)
      if (auto s = assemble_sample(r, max_len, stats)) ds.train.push_back(std::move(*s));
    for (const auto& r : d.test)
      if (auto s = assemble_sample(r, max_len, stats)) ds.test.push_back(std::move(*s));
    out.push_back(std::move(ds));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic generators

namespace {

IdRange take(int& cursor, int count) {
  IdRange r{cursor, cursor + count};
  cursor += count;
  return r;
}

void check_generator(const GeneratorConfig& c) {
  if (c.domains == 0) throw std::invalid_argument("generator: at least one domain required");
  if (c.payload_min == 0 || c.payload_max < c.payload_min) throw std::invalid_argument("generator: bad payload range");
  if (c.question_noise_max < c.question_noise_min) throw std::invalid_argument("generator: bad question noise range");
}

int draw(Rng& rng, const IdRange& r) { return r.begin + static_cast<int>(rng.below(static_cast<std::uint64_t>(r.size()))); }

struct Block {
  int marker;
  std::vector<int> payload;
};

// Lays out blocks in distinct gaps of a filler sequence, so blocks are always
// separated by at least one filler token. Returns passage-local payload spans.
std::vector<int> place_blocks(Rng& rng, const std::vector<Block>& blocks, std::size_t filler_count,
                              const IdRange& filler, std::vector<std::pair<int, int>>& spans) {
  std::vector<int> filler_tokens(filler_count);
  for (int& t : filler_tokens) t = draw(rng, filler);
  // Gaps 1..filler_count-1 are interior; blocks never start or end the passage.
  const std::size_t interior = filler_count - 1;
  std::vector<std::size_t> gaps = rng.sample_without_replacement(interior, blocks.size());
  std::vector<std::size_t> gap_of_block(blocks.size());
  for (std::size_t b = 0; b < blocks.size(); ++b) gap_of_block[b] = gaps[b] + 1;

  std::vector<int> passage;
  spans.assign(blocks.size(), {0, 0});
  for (std::size_t pos = 0; pos <= filler_count; ++pos) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      if (gap_of_block[b] != pos) continue;
      passage.push_back(blocks[b].marker);
      const int start = static_cast<int>(passage.size());
      passage.insert(passage.end(), blocks[b].payload.begin(), blocks[b].payload.end());
      spans[b] = {start, static_cast<int>(passage.size()) - 1};
    }
    if (pos < filler_count) passage.push_back(filler_tokens[pos]);
  }
  return passage;
}

std::vector<int> make_question(Rng& rng, int question_type, const GeneratorConfig& c, const IdRange& noise) {
  std::vector<int> q{question_type};
  const auto n = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(c.question_noise_min),
                                                    static_cast<std::int64_t>(c.question_noise_max)));
  for (std::size_t i = 0; i < n; ++i) q.push_back(draw(rng, noise));
  return q;
}

std::vector<int> make_payload(Rng& rng, const GeneratorConfig& c, const IdRange& range) {
  const auto n = static_cast<std::size_t>(
      rng.range(static_cast<std::int64_t>(c.payload_min), static_cast<std::int64_t>(c.payload_max)));
  std::vector<int> p(n);
  for (int& t : p) t = draw(rng, range);
  return p;
}

std::string record_id(const std::string& setting, std::uint64_t seed, std::size_t domain, const char* split,
                      std::size_t index) {
  std::ostringstream os;
  os << setting << "-s" << seed << "-d" << domain << '-' << split << '-' << index;
  return os.str();
}

void name_tokens(Vocabulary& vocab, const SyntheticLayout& layout, bool per_domain_ranges) {
  auto name_range = [&](const IdRange& r, const std::string& prefix) {
    for (int id = r.begin; id < r.end; ++id) {
      const int got = vocab.add(prefix + std::to_string(id - r.begin));
      if (got != id) throw std::logic_error("generator: vocabulary layout out of order");
    }
  };
  const std::size_t n_types = layout.question_type.size();
  for (std::size_t k = 0; k < n_types; ++k) vocab.add(n_types == 1 ? "q_univ" : "qtype" + std::to_string(k));
  for (std::size_t k = 0; k < layout.marker.size(); ++k)
    vocab.add(layout.marker.size() == 1 ? "mark" : "mark" + std::to_string(k));
  name_range(layout.question_noise, "qn");
  for (std::size_t k = 0; k < layout.filler.size(); ++k) {
    const std::string prefix = per_domain_ranges ? "d" + std::to_string(k) + "_" : "";
    name_range(layout.filler[k], prefix + "f");
    name_range(layout.payload[k], prefix + "p");
  }
}

}  // namespace

std::vector<std::pair<std::size_t, std::size_t>> passage_ranges(const GeneratorConfig& c) {
  if (!c.domain_passage_ranges.empty()) {
    if (c.domain_passage_ranges.size() != c.domains) {
      throw std::invalid_argument("generator: need one passage range per domain");
    }
    return c.domain_passage_ranges;
  }
  std::vector<std::pair<std::size_t, std::size_t>> out;
  constexpr std::size_t lo = 15, hi = 55, width = 15;
  for (std::size_t k = 0; k < c.domains; ++k) {
    const std::size_t start =
        c.domains == 1 ? lo : lo + (k * (hi - width - lo) + (c.domains - 1) / 2) / (c.domains - 1);
    out.emplace_back(start, start + width);
  }
  return out;
}

SyntheticLayout question_type_layout(const GeneratorConfig& c) {
  check_generator(c);
  SyntheticLayout layout;
  int cursor = 3;
  for (std::size_t k = 0; k < c.domains; ++k) layout.question_type.push_back(cursor++);
  for (std::size_t k = 0; k < c.domains; ++k) layout.marker.push_back(cursor++);
  layout.question_noise = take(cursor, static_cast<int>(c.question_noise_vocab));
  const int rest = static_cast<int>(c.vocab_size) - cursor;
  if (rest < 6) throw std::invalid_argument("generator: vocabulary too small for the question-type layout");
  const int payload = rest / 3;
  layout.filler.push_back(take(cursor, rest - payload));
  layout.payload.push_back(take(cursor, payload));
  layout.answer.assign(c.domains, layout.payload[0]);
  layout.vocab_size = static_cast<std::size_t>(cursor);
  return layout;
}

SyntheticLayout passage_corpus_layout(const GeneratorConfig& c) {
  check_generator(c);
  SyntheticLayout layout;
  int cursor = 3;
  layout.question_type.push_back(cursor++);
  layout.marker.push_back(cursor++);
  layout.question_noise = take(cursor, static_cast<int>(c.question_noise_vocab));
  const int per_domain = (static_cast<int>(c.vocab_size) - cursor) / static_cast<int>(c.domains);
  if (per_domain < 6) throw std::invalid_argument("generator: vocabulary too small for the passage-corpus layout");
  const int payload = per_domain / 3;
  for (std::size_t k = 0; k < c.domains; ++k) {
    layout.filler.push_back(take(cursor, per_domain - payload));
    layout.payload.push_back(take(cursor, payload));
  }
  for (std::size_t k = 0; k < c.domains; ++k) {
    if (c.cross_domain_answers && c.domains > 1) {
      const IdRange& next = layout.filler[(k + 1) % c.domains];
      layout.answer.push_back({next.begin, next.begin + payload});
    } else {
      layout.answer.push_back(layout.payload[k]);
    }
  }
  layout.vocab_size = static_cast<std::size_t>(cursor);
  return layout;
}

DomainStream generate_cdaq_stream(const GeneratorConfig& c) {
  const SyntheticLayout layout = question_type_layout(c);
  DomainStream stream;
  stream.setting = "cdaq";
  name_tokens(stream.vocab, layout, false);
  const Rng root(c.seed);
  for (std::size_t k = 0; k < c.domains; ++k) {
    DomainData d;
    d.name = "qtype" + std::to_string(k);
    for (const char* split : {"train", "test"}) {
      Rng rng = root.fork("cdaq/" + std::to_string(k) + "/" + split);
      const std::size_t n = std::string(split) == "train" ? c.train_per_domain : c.test_per_domain;
      auto& out = std::string(split) == "train" ? d.train : d.test;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Block> blocks;
        std::size_t block_tokens = 0;
        for (std::size_t b = 0; b < c.domains; ++b) {
          blocks.push_back({layout.marker[b], make_payload(rng, c, layout.answer[b])});
          block_tokens += 1 + blocks.back().payload.size();
        }
        const auto total = static_cast<std::size_t>(
            rng.range(static_cast<std::int64_t>(c.passage_min), static_cast<std::int64_t>(c.passage_max)));
        const std::size_t filler = std::max(total > block_tokens ? total - block_tokens : 0, c.domains + 1);
        std::vector<std::pair<int, int>> spans;
        Record r;
        r.passage_ids = place_blocks(rng, blocks, filler, layout.filler[0], spans);
        r.question_ids = make_question(rng, layout.question_type[k], c, layout.question_noise);
        r.id = record_id("cdaq", c.seed, k, split, i);
        r.domain = static_cast<int>(k);
        r.answer_start = spans[k].first;
        r.answer_end = spans[k].second;
        out.push_back(std::move(r));
      }
    }
    stream.domains.push_back(std::move(d));
  }
  return stream;
}

DomainStream generate_cdac_stream(const GeneratorConfig& c) {
  const SyntheticLayout layout = passage_corpus_layout(c);
  const auto ranges = passage_ranges(c);
  DomainStream stream;
  stream.setting = "cdac";
  name_tokens(stream.vocab, layout, true);
  const Rng root(c.seed);
  for (std::size_t k = 0; k < c.domains; ++k) {
    const auto [lo, hi] = ranges[k];
    if (lo < c.payload_max + 3) throw std::invalid_argument("generator: passage window too short for the payload");
    DomainData d;
    d.name = "corpus" + std::to_string(k);
    for (const char* split : {"train", "test"}) {
      Rng rng = root.fork("cdac/" + std::to_string(k) + "/" + split);
      const std::size_t n = std::string(split) == "train" ? c.train_per_domain : c.test_per_domain;
      auto& out = std::string(split) == "train" ? d.train : d.test;
      for (std::size_t i = 0; i < n; ++i) {
        std::vector<Block> blocks{{layout.marker[0], make_payload(rng, c, layout.answer[k])}};
        const auto total = static_cast<std::size_t>(rng.range(static_cast<std::int64_t>(lo), static_cast<std::int64_t>(hi)));
        const std::size_t filler = total - 1 - blocks[0].payload.size();
        std::vector<std::pair<int, int>> spans;
        Record r;
        r.passage_ids = place_blocks(rng, blocks, filler, layout.filler[k], spans);
        r.question_ids = make_question(rng, layout.question_type[0], c, layout.question_noise);
        r.id = record_id("cdac", c.seed, k, split, i);
        r.domain = static_cast<int>(k);
        r.answer_start = spans[0].first;
        r.answer_end = spans[0].second;
        out.push_back(std::move(r));
      }
    }
    stream.domains.push_back(std::move(d));
  }
  return stream;
}

// ---------------------------------------------------------------------------
// Files

std::vector<std::string> whitespace_tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream is(text);
  std::string tok;
  while (is >> tok) out.push_back(tok);
  return out;
}

namespace {

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; }

struct Token {
  std::string text;
  std::size_t begin;  // byte offsets
  std::size_t end;
};

std::vector<Token> tokenize_with_offsets(const std::string& text) {
  std::vector<Token> out;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && is_space(text[i])) ++i;
    if (i >= text.size()) break;
    const std::size_t b = i;
    while (i < text.size() && !is_space(text[i])) ++i;
    out.push_back({text.substr(b, i - b), b, i});
  }
  return out;
}

// Byte offset of the code point with the given index, or npos past the end.
std::size_t codepoint_to_byte(const std::string& text, std::size_t codepoint) {
  std::size_t cp = 0;
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto c = static_cast<unsigned char>(text[i]);
    if ((c & 0xC0) == 0x80) continue;  // continuation byte
    if (cp == codepoint) return i;
    ++cp;
  }
  return std::string::npos;
}

std::string domain_name(const json& j) {
  if (!j.contains("domain")) return "";
  const auto& d = j.at("domain");
  return d.is_string() ? d.get<std::string>() : d.dump();
}

std::vector<int> ids_of(const std::vector<std::string>& tokens, Vocabulary& vocab) {
  std::vector<int> out;
  out.reserve(tokens.size());
  for (const auto& t : tokens) out.push_back(vocab.add(t));
  return out;
}

std::optional<Record> text_record(const json& j, Vocabulary& vocab, IngestStats* stats) {
  Record r;
  r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
  const std::string question = j.at("question").get<std::string>();
  const std::string passage = j.at("passage").get<std::string>();
  const std::string answer = j.at("answer_text").get<std::string>();
  const auto char_start = j.at("answer_char_start").get<std::int64_t>();

  const auto q_tokens = whitespace_tokenize(question);
  const auto p_tokens = tokenize_with_offsets(passage);
  const auto a_tokens = whitespace_tokenize(answer);
  auto drop = [&](const std::string& why) -> std::optional<Record> {
    if (stats) ++stats->dropped;
    warn("record " + r.id + ": " + why + ", dropped");
    return std::nullopt;
  };
  if (q_tokens.empty() || p_tokens.empty()) return drop("empty question or passage");
  if (a_tokens.empty() || char_start < 0) return drop("empty answer");

  const std::size_t start_byte = codepoint_to_byte(passage, static_cast<std::size_t>(char_start));
  if (start_byte == std::string::npos) return drop("answer start past passage end");
  // Trim leading whitespace of the answer text against the passage.
  std::size_t lead = 0;
  while (lead < answer.size() && is_space(answer[lead])) ++lead;
  std::size_t trail = 0;
  while (trail < answer.size() - lead && is_space(answer[answer.size() - 1 - trail])) ++trail;
  const std::size_t first_byte = start_byte + lead;
  const std::size_t last_byte = start_byte + answer.size() - trail - 1;

  std::optional<std::size_t> s_tok;
  bool snapped = false;
  for (std::size_t k = 0; k < p_tokens.size(); ++k) {
    if (first_byte >= p_tokens[k].begin && first_byte < p_tokens[k].end) {
      s_tok = k;
      snapped = first_byte != p_tokens[k].begin;
      break;
    }
  }
  if (!s_tok) return drop("answer start falls on whitespace");
  std::size_t e_tok = *s_tok;
  for (std::size_t k = *s_tok; k < p_tokens.size() && p_tokens[k].begin <= last_byte; ++k) e_tok = k;

  if (!snapped) {
    if (e_tok - *s_tok + 1 != a_tokens.size()) return drop("answer text does not match passage tokens");
    for (std::size_t k = 0; k < a_tokens.size(); ++k) {
      if (p_tokens[*s_tok + k].text != a_tokens[k]) return drop("answer text does not match passage tokens");
    }
  } else {
    if (stats) ++stats->snapped;
    warn("record " + r.id + ": answer start snapped to token boundary");
  }

  r.question_ids = ids_of(q_tokens, vocab);
  std::vector<std::string> p_text;
  p_text.reserve(p_tokens.size());
  for (const auto& t : p_tokens) p_text.push_back(t.text);
  r.passage_ids = ids_of(p_text, vocab);
  r.answer_start = static_cast<int>(*s_tok);
  r.answer_end = static_cast<int>(e_tok);
  return r;
}

std::optional<Record> token_record(const json& j, IngestStats* stats) {
  Record r;
  r.id = j.at("id").is_string() ? j.at("id").get<std::string>() : j.at("id").dump();
  r.question_ids = j.at("question_ids").get<std::vector<int>>();
  r.passage_ids = j.at("passage_ids").get<std::vector<int>>();
  r.answer_start = j.at("answer_start").get<int>();
  r.answer_end = j.at("answer_end").get<int>();
  if (r.question_ids.empty() || r.passage_ids.empty() || r.answer_start < 0 || r.answer_end < r.answer_start ||
      static_cast<std::size_t>(r.answer_end) >= r.passage_ids.size()) {
    if (stats) ++stats->dropped;
    warn("record " + r.id + ": span outside passage, dropped");
    return std::nullopt;
  }
  return r;
}

}  // namespace

std::vector<Record> read_dataset_jsonl(const fs::path& path, Vocabulary& vocab, IngestStats* stats) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read dataset " + path.string());
  std::vector<Record> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    const std::string where = path.string() + ":" + std::to_string(line_no);
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw std::runtime_error(where + ": malformed record: " + e.what());
    }
    if (!j.is_object()) throw std::runtime_error(where + ": record is not an object");
    if (stats) ++stats->records;
    try {
      std::optional<Record> r = j.contains("question_ids") ? token_record(j, stats) : text_record(j, vocab, stats);
      if (!r) continue;
      if (j.contains("domain") && j.at("domain").is_number_integer()) r->domain = j.at("domain").get<int>();
      out.push_back(std::move(*r));
    } catch (const json::exception& e) {
      throw std::runtime_error(where + ": malformed record: " + e.what());
    }
  }
  return out;
}

void write_dataset_jsonl(const fs::path& path, std::span<const Record> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write dataset " + path.string());
  for (const auto& r : records) {
    json j;
    j["id"] = r.id;
    j["domain"] = r.domain;
    j["question_ids"] = r.question_ids;
    j["passage_ids"] = r.passage_ids;
    j["answer_start"] = r.answer_start;
    j["answer_end"] = r.answer_end;
    out << j.dump() << '\n';
  }
}

DomainData ingest_jsonl(const fs::path& path, Vocabulary& vocab, IngestStats* stats) {
  DomainData d;
  d.train = read_dataset_jsonl(path, vocab, stats);
  if (d.train.empty()) warn("dataset " + path.string() + " holds no usable records");
  // Name from the first record that carries a domain field.
  std::ifstream in(path, std::ios::binary);
  std::string line;
  while (std::getline(in, line)) {
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    d.name = domain_name(json::parse(line));
    break;
  }
  if (d.name.empty()) d.name = path.stem().string();
  return d;
}

void write_stream(const fs::path& dir, const DomainStream& stream) {
  fs::create_directories(dir);
  json manifest;
  manifest["setting"] = stream.setting;
  manifest["domains"] = json::array();
  for (const auto& d : stream.domains) {
    fs::create_directories(dir / d.name);
    write_dataset_jsonl(dir / d.name / "train.jsonl", d.train);
    write_dataset_jsonl(dir / d.name / "test.jsonl", d.test);
    manifest["domains"].push_back({{"name", d.name}, {"train", d.name + "/train.jsonl"}, {"test", d.name + "/test.jsonl"}});
  }
  stream.vocab.save(dir / "vocab.txt");
  std::ofstream out(dir / "stream.json", std::ios::binary);
  if (!out) throw std::runtime_error("cannot write " + (dir / "stream.json").string());
  out << manifest.dump(2) << '\n';
}

DomainStream load_stream(const fs::path& dir, IngestStats* stats) {
  std::ifstream in(dir / "stream.json", std::ios::binary);
  if (!in) throw std::runtime_error("missing " + (dir / "stream.json").string());
  json manifest;
  try {
    manifest = json::parse(in);
  } catch (const json::parse_error& e) {
    throw std::runtime_error((dir / "stream.json").string() + ": " + e.what());
  }
  DomainStream stream;
  stream.setting = manifest.value("setting", std::string("custom"));
  if (fs::exists(dir / "vocab.txt")) stream.vocab = Vocabulary::load(dir / "vocab.txt");
  const auto& domains = manifest.at("domains");
  for (std::size_t k = 0; k < domains.size(); ++k) {
    const auto& entry = domains[k];
    DomainData d;
    d.name = entry.at("name").get<std::string>();
    d.train = read_dataset_jsonl(dir / entry.at("train").get<std::string>(), stream.vocab, stats);
    d.test = read_dataset_jsonl(dir / entry.at("test").get<std::string>(), stream.vocab, stats);
    if (d.train.empty()) warn("domain " + d.name + " has no training records");
    for (auto* split : {&d.train, &d.test})
      for (auto& r : *split) r.domain = static_cast<int>(k);
    stream.domains.push_back(std::move(d));
  }
  if (stream.domains.empty()) throw std::runtime_error((dir / "stream.json").string() + ": no domains listed");
  return stream;
}

}  // namespace cmrc
