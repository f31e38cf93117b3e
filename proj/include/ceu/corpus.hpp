#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "ceu/toy_lm.hpp"

namespace ceu {

using TokenSeq = std::vector<std::int64_t>;

// Synthetic QA benchmark: fictional profiles with exclusive attribute tokens,
// templated questions/answers, paraphrases, perturbed (wrong) answers, and a
// held-out general-knowledge probe pool drawn from a disjoint template family.

struct CorpusSpec {
  std::uint64_t seed = 7;
  std::int64_t n_profiles = 40;
  std::int64_t qa_per_profile = 20;
  std::int64_t n_probe_subjects = 8;
  std::int64_t probe_qa_per_subject = 2;
  std::int64_t vocab_size = 192;  // must cover the token pools below
};

// Token id layout carved out of the vocabulary. Pools are disjoint; profile
// attribute values are unique per profile within their pool.
struct TokenLayout {
  std::int64_t bos = 0;
  std::int64_t q_open = 1;
  std::int64_t q_close = 2;
  std::int64_t eos = 3;
  std::int64_t q_frames_start = 4;
  std::int64_t n_q_frames = 6;
  std::int64_t a_frames_start = 10;
  std::int64_t n_a_frames = 4;
  std::int64_t probe_frames_start = 14;
  std::int64_t n_probe_frames = 4;
  std::int64_t slots_start = 0;      // derived
  std::int64_t n_slots = 0;
  std::int64_t names_start = 0;
  std::int64_t cities_start = 0;
  std::int64_t works_start = 0;
  std::int64_t probe_subjects_start = 0;
  std::int64_t n_probe_subjects = 0;
  std::int64_t values_start = 0;
  std::int64_t n_values = 20;
  std::int64_t required_vocab = 0;

  static TokenLayout plan(const CorpusSpec& spec);  // throws on pool exhaustion

  bool is_q_frame(std::int64_t t) const { return t >= q_frames_start && t < q_frames_start + n_q_frames; }
  bool is_a_frame(std::int64_t t) const { return t >= a_frames_start && t < a_frames_start + n_a_frames; }
  bool is_probe_frame(std::int64_t t) const {
    return t >= probe_frames_start && t < probe_frames_start + n_probe_frames;
  }
};

struct QaPair {
  TokenSeq question;
  TokenSeq answer;  // [style frame, content..., eos]
};

struct Profile {
  std::int64_t profile_id = 0;
  std::int64_t name_token = 0;
  std::int64_t city_token = 0;
  std::int64_t work_token = 0;
  std::vector<QaPair> qa_pairs;

  std::vector<std::int64_t> attribute_tokens() const { return {name_token, city_token, work_token}; }
};

struct EvalItem {
  enum class Kind { qa, probe };
  Kind kind = Kind::qa;
  std::int64_t profile_id = 0;  // probe subject index for probes
  std::int64_t qa_index = 0;
  TokenSeq question;
  TokenSeq gold_answer;
  TokenSeq paraphrased_question;  // frame swap, content tokens identical
  TokenSeq paraphrased_answer;
  std::vector<TokenSeq> perturbed_answers;  // >= 3, wrong-attribute substitutions
};

struct GeneratedCorpus {
  CorpusSpec spec;
  TokenLayout layout;
  std::vector<Profile> profiles;
  std::vector<EvalItem> items;        // one per profile QA pair
  std::vector<EvalItem> probe_items;  // general-knowledge probes
};

// Deterministic per seed. Throws if the vocabulary cannot host the pools.
GeneratedCorpus generate(const CorpusSpec& spec);

struct SplitSpec {
  double forget_fraction = 0.05;
  std::uint64_t seed = 7;
};

// Whole-profile split: |forget| = round(fraction * n_profiles).
struct Split {
  std::vector<std::int64_t> forget_profiles;  // sorted ids
  std::vector<std::int64_t> retain_profiles;

  bool is_forget(std::int64_t profile_id) const;
};

Split split(const GeneratedCorpus& corpus, const SplitSpec& spec);

// Frame-rotation paraphrase: the leading frame token advances within its
// pool, content tokens stay identical. Applying it repeatedly cycles through
// the pool without degenerating.
TokenSeq paraphrase(const TokenLayout& layout, const TokenSeq& question);

// Rotates the leading frame token by the given offset within its pool.
TokenSeq question_variant(const TokenLayout& layout, const TokenSeq& question, std::int64_t offset);

// ---- training/eval views ----------------------------------------------------

// Assembles [bos, q_open, question, q_close, answer] and the supervision mask.
TokenizedExample to_example(const TokenLayout& layout, const TokenSeq& question, const TokenSeq& answer);

enum class TrainFilter { all, retain_only, forget_only };

// The training view of the corpus. Each QA pair is trained under two
// question-frame variants (the gold frame plus a fixed rotation) so frame
// identity carries no information about the answer; the paraphrase frame
// (+1 rotation) stays held out per pair and probes frame-invariant recall.
// retain_only keeps the probe pool; forget_only drops it.
std::vector<TokenizedExample> training_examples(const GeneratedCorpus& corpus, const Split& split,
                                                TrainFilter filter);

inline constexpr std::int64_t kQaTrainVariantOffset = 3;
inline constexpr std::int64_t kProbeTrainVariantOffset = 2;

// The greedy-decode prompt for an answer: everything up to and including the
// answer's style token.
TokenSeq decode_prompt(const TokenLayout& layout, const TokenSeq& question, std::int64_t style_token);

// Answer content tokens (style token and eos stripped): the ROUGE reference.
TokenSeq answer_content(const TokenLayout& layout, const TokenSeq& answer);

// ---- corpus file ------------------------------------------------------------

// Line-oriented text format with a schema version header. One record per QA
// item: kind, split tag, profile id, qa index, and the token lists for
// question/answer/paraphrases/perturbations.
void write_corpus_file(const std::filesystem::path& path, const GeneratedCorpus& corpus, const Split& split);

struct LoadedCorpus {
  GeneratedCorpus corpus;
  Split split;
};

LoadedCorpus read_corpus_file(const std::filesystem::path& path);

void write_split_file(const std::filesystem::path& path, const Split& split);

}  // namespace ceu
