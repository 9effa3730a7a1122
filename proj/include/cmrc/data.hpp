#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "cmrc/rng.hpp"

namespace cmrc {

inline constexpr int kClsId = 0;
inline constexpr int kSepId = 1;
inline constexpr int kUnkId = 2;

class Vocabulary {
 public:
  Vocabulary();  // holds the three special tokens

  int add(const std::string& token);  // existing id, or a new one unless frozen (then unknown)
  int id(const std::string& token) const;  // unknown id when absent
  const std::string& token(int id) const;
  std::size_t size() const { return tokens_.size(); }
  void freeze() { frozen_ = true; }
  bool frozen() const { return frozen_; }

  // One "token<TAB>id" pair per line, ids dense from 0.
  void save(const std::filesystem::path& path) const;
  static Vocabulary load(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::unordered_map<std::string, int> index_;
  bool frozen_ = false;
};

// One dataset line: question and passage tokens with a passage-local answer span.
struct Record {
  std::string id;
  int domain = 0;
  std::vector<int> question_ids;
  std::vector<int> passage_ids;
  int answer_start = 0;  // inclusive, passage-local
  int answer_end = 0;    // inclusive, passage-local
};

// A record assembled into the model input S = [CLS, Q, SEP, P, SEP].
// answer_start/answer_end index into input_ids.
struct Sample {
  std::string id;
  int domain = 0;
  std::vector<int> question_ids;
  std::vector<int> passage_ids;  // as kept after truncation
  std::vector<int> input_ids;
  int answer_start = 0;
  int answer_end = 0;
  std::vector<int> answer_ids;
};

struct AssembledInput {
  std::vector<int> ids;
  std::size_t passage_offset = 0;  // 1 + |Q| + 1
  std::size_t passage_kept = 0;
};

// Truncates the passage tail so that |S| <= max_len; the trailing SEP is kept.
AssembledInput build_input_sequence(std::span<const int> question_ids, std::span<const int> passage_ids,
                                    std::size_t max_len);

struct AssemblyStats {
  std::size_t assembled = 0;
  std::size_t truncated_away = 0;  // answer lost to truncation
};

std::optional<Sample> assemble_sample(const Record& record, std::size_t max_len, AssemblyStats* stats = nullptr);

struct DomainData {
  std::string name;
  std::vector<Record> train;
  std::vector<Record> test;
};

struct DomainStream {
  std::string setting;
  std::vector<DomainData> domains;
  Vocabulary vocab;
};

struct DomainSamples {
  std::string name;
  std::vector<Sample> train;
  std::vector<Sample> test;
};

std::vector<DomainSamples> assemble_stream(const DomainStream& stream, std::size_t max_len,
                                           AssemblyStats* stats = nullptr);

// ---------------------------------------------------------------------------
// Synthetic streams

struct GeneratorConfig {
  std::size_t domains = 3;
  std::size_t train_per_domain = 512;
  std::size_t test_per_domain = 256;
  std::size_t vocab_size = 200;
  std::size_t passage_min = 20;  // question-type setting
  std::size_t passage_max = 40;
  // Passage-corpus setting: per-domain inclusive length ranges. Empty means
  // evenly spread windows of width 15 over 15..55.
  std::vector<std::pair<std::size_t, std::size_t>> domain_passage_ranges;
  std::size_t payload_min = 1;
  std::size_t payload_max = 4;
  std::size_t question_noise_min = 1;
  std::size_t question_noise_max = 4;
  std::size_t question_noise_vocab = 10;
  // Passage-corpus setting: answers of corpus k are drawn from a slice of
  // corpus k+1's filler vocabulary (cyclically), so what is background in one
  // corpus is the answer in another. Off, or with a single domain, each corpus
  // draws answers from its own payload block.
  bool cross_domain_answers = true;
  std::uint64_t seed = 0;
};

// Token id ranges used by the generators, [begin, end).
struct IdRange {
  int begin = 0;
  int end = 0;
  bool contains(int id) const { return id >= begin && id < end; }
  int size() const { return end - begin; }
};

struct SyntheticLayout {
  std::vector<int> question_type;  // per domain (a single shared id for the corpus setting)
  std::vector<int> marker;         // per domain (a single shared id for the corpus setting)
  IdRange question_noise;
  std::vector<IdRange> filler;     // per domain, or one shared range
  std::vector<IdRange> payload;    // per domain, or one shared range
  std::vector<IdRange> answer;     // per domain: the range answer tokens are drawn from
  std::size_t vocab_size = 0;
};

SyntheticLayout question_type_layout(const GeneratorConfig& config);
SyntheticLayout passage_corpus_layout(const GeneratorConfig& config);
std::vector<std::pair<std::size_t, std::size_t>> passage_ranges(const GeneratorConfig& config);

// Shared passages with one marker+payload block per domain; domain k asks
// for the payload after marker k.
DomainStream generate_cdaq_stream(const GeneratorConfig& config);
// One universal marker task; each domain has its own filler and payload
// vocabulary and its own passage-length window.
DomainStream generate_cdac_stream(const GeneratorConfig& config);

// ---------------------------------------------------------------------------
// Files

struct IngestStats {
  std::size_t records = 0;
  std::size_t dropped = 0;  // span could not be recovered
  std::size_t snapped = 0;  // answer start moved to a token boundary
};

// Newline-delimited records. Text records carry id, domain, question,
// passage, answer_text, answer_char_start (code points); token records carry
// question_ids, passage_ids, answer_start, answer_end (passage-local).
// The variant is chosen per line by field presence.
std::vector<Record> read_dataset_jsonl(const std::filesystem::path& path, Vocabulary& vocab, IngestStats* stats = nullptr);
void write_dataset_jsonl(const std::filesystem::path& path, std::span<const Record> records);

// Single text-format file -> one domain (named after the first record's domain field).
DomainData ingest_jsonl(const std::filesystem::path& path, Vocabulary& vocab, IngestStats* stats = nullptr);

// Directory layout: stream.json (setting + ordered domain list with train/test
// paths), vocab.txt (optional for text data), and the referenced jsonl files.
void write_stream(const std::filesystem::path& dir, const DomainStream& stream);
DomainStream load_stream(const std::filesystem::path& dir, IngestStats* stats = nullptr);

std::vector<std::string> whitespace_tokenize(const std::string& text);

}  // namespace cmrc
