#include "ceu/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "ceu/rng.hpp"

namespace ceu {

TokenLayout TokenLayout::plan(const CorpusSpec& spec) {
  if (spec.n_profiles < 1 || spec.qa_per_profile < 1) {
    throw std::invalid_argument("corpus: need at least one profile and one QA slot");
  }
  if (spec.n_probe_subjects < 4) {
    throw std::invalid_argument("corpus: probe perturbations need at least 4 probe subjects");
  }
  if (spec.n_profiles < 4) {
    throw std::invalid_argument("corpus: perturbations need at least 4 profiles");
  }
  TokenLayout l;
  std::int64_t next = l.probe_frames_start + l.n_probe_frames;
  l.slots_start = next;
  l.n_slots = spec.qa_per_profile;
  next += l.n_slots;
  l.names_start = next;
  next += spec.n_profiles;
  l.cities_start = next;
  next += spec.n_profiles;
  l.works_start = next;
  next += spec.n_profiles;
  l.probe_subjects_start = next;
  l.n_probe_subjects = spec.n_probe_subjects;
  next += spec.n_probe_subjects;
  l.values_start = next;
  next += l.n_values;
  l.required_vocab = next;
  if (l.required_vocab > spec.vocab_size) {
    throw std::invalid_argument("corpus: token pools need " + std::to_string(l.required_vocab) +
                                " ids but vocab_size is " + std::to_string(spec.vocab_size));
  }
  return l;
}

GeneratedCorpus generate(const CorpusSpec& spec) {
  GeneratedCorpus c;
  c.spec = spec;
  c.layout = TokenLayout::plan(spec);
  const TokenLayout& l = c.layout;

  Rng rng(Rng::mix(spec.seed, 1));

  // attribute values are a seeded permutation of each pool, unique per profile
  std::vector<std::int64_t> name_perm(static_cast<std::size_t>(spec.n_profiles));
  std::iota(name_perm.begin(), name_perm.end(), 0);
  auto city_perm = name_perm, work_perm = name_perm;
  rng.shuffle(name_perm);
  rng.shuffle(city_perm);
  rng.shuffle(work_perm);

  c.profiles.resize(static_cast<std::size_t>(spec.n_profiles));
  for (std::int64_t i = 0; i < spec.n_profiles; ++i) {
    Profile& p = c.profiles[static_cast<std::size_t>(i)];
    p.profile_id = i;
    p.name_token = l.names_start + name_perm[static_cast<std::size_t>(i)];
    p.city_token = l.cities_start + city_perm[static_cast<std::size_t>(i)];
    p.work_token = l.works_start + work_perm[static_cast<std::size_t>(i)];
    p.qa_pairs.resize(static_cast<std::size_t>(spec.qa_per_profile));
    for (std::int64_t k = 0; k < spec.qa_per_profile; ++k) {
      QaPair& qa = p.qa_pairs[static_cast<std::size_t>(k)];
      const std::int64_t qf = l.q_frames_start + (i + k) % l.n_q_frames;
      const std::int64_t af = l.a_frames_start + (7 * i + k) % l.n_a_frames;
      const std::int64_t slot = l.slots_start + k;
      const std::int64_t attr = (k % 2 == 0) ? p.city_token : p.work_token;
      const std::int64_t value = l.values_start + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(l.n_values)));
      qa.question = {qf, p.name_token, slot};
      qa.answer = {af, p.name_token, attr, value, l.eos};
    }
  }

  // eval views need all profiles built: perturbations borrow whole wrong
  // answers from neighboring profiles
  for (std::int64_t i = 0; i < spec.n_profiles; ++i) {
    const Profile& p = c.profiles[static_cast<std::size_t>(i)];
    for (std::int64_t k = 0; k < spec.qa_per_profile; ++k) {
      const QaPair& qa = p.qa_pairs[static_cast<std::size_t>(k)];
      EvalItem item;
      item.kind = EvalItem::Kind::qa;
      item.profile_id = i;
      item.qa_index = k;
      item.question = qa.question;
      item.gold_answer = qa.answer;
      item.paraphrased_question = paraphrase(l, qa.question);
      item.paraphrased_answer = qa.answer;
      item.paraphrased_answer[0] =
          l.a_frames_start + (qa.answer[0] - l.a_frames_start + 1) % l.n_a_frames;
      for (std::int64_t m = 1; m <= 3; ++m) {
        const Profile& other = c.profiles[static_cast<std::size_t>((i + m) % spec.n_profiles)];
        const QaPair& wrong = other.qa_pairs[static_cast<std::size_t>(k)];
        TokenSeq pert = qa.answer;
        pert[1] = other.name_token;   // wrong-profile attribute substitutions
        pert[2] = wrong.answer[2];
        pert[3] = wrong.answer[3];
        item.perturbed_answers.push_back(std::move(pert));
      }
      c.items.push_back(std::move(item));
    }
  }

  // probe pool: same QA shape, disjoint frame/subject family
  for (std::int64_t s = 0; s < spec.n_probe_subjects; ++s) {
    const std::int64_t subj = l.probe_subjects_start + s;
    for (std::int64_t u = 0; u < spec.probe_qa_per_subject; ++u) {
      const std::int64_t pf = l.probe_frames_start + (s + u) % l.n_probe_frames;
      const std::int64_t af = l.a_frames_start + (3 * s + u) % l.n_a_frames;
      const std::int64_t slot = l.slots_start + (s * spec.probe_qa_per_subject + u) % l.n_slots;
      const std::int64_t v1 = l.values_start + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(l.n_values)));
      const std::int64_t v2 = l.values_start + static_cast<std::int64_t>(rng.next_below(static_cast<std::uint64_t>(l.n_values)));

      EvalItem item;
      item.kind = EvalItem::Kind::probe;
      item.profile_id = s;
      item.qa_index = u;
      item.question = {pf, subj, slot};
      item.gold_answer = {af, subj, v1, v2, l.eos};
      item.paraphrased_question = paraphrase(l, item.question);
      item.paraphrased_answer = item.gold_answer;
      item.paraphrased_answer[0] = l.a_frames_start + (af - l.a_frames_start + 1) % l.n_a_frames;
      for (std::int64_t m = 1; m <= 3; ++m) {
        TokenSeq pert = item.gold_answer;
        pert[1] = l.probe_subjects_start + (s + m) % spec.n_probe_subjects;
        item.perturbed_answers.push_back(std::move(pert));
      }
      c.probe_items.push_back(std::move(item));
    }
  }
  return c;
}

bool Split::is_forget(std::int64_t profile_id) const {
  return std::binary_search(forget_profiles.begin(), forget_profiles.end(), profile_id);
}

Split split(const GeneratedCorpus& corpus, const SplitSpec& spec) {
  if (!(spec.forget_fraction > 0.0 && spec.forget_fraction < 1.0)) {
    throw std::invalid_argument("split: forget_fraction must lie in (0,1)");
  }
  const std::int64_t n = corpus.spec.n_profiles;
  const std::int64_t k = std::llround(spec.forget_fraction * static_cast<double>(n));
  if (k < 1) {
    throw std::invalid_argument("split: forget set empty (fraction " + std::to_string(spec.forget_fraction) + " of " +
                                std::to_string(n) + " profiles rounds to zero)");
  }
  if (k >= n) throw std::invalid_argument("split: forget set would swallow every profile");

  std::vector<std::int64_t> ids(static_cast<std::size_t>(n));
  std::iota(ids.begin(), ids.end(), 0);
  Rng rng(Rng::mix(spec.seed, 2));
  rng.shuffle(ids);

  Split s;
  s.forget_profiles.assign(ids.begin(), ids.begin() + k);
  s.retain_profiles.assign(ids.begin() + k, ids.end());
  std::sort(s.forget_profiles.begin(), s.forget_profiles.end());
  std::sort(s.retain_profiles.begin(), s.retain_profiles.end());
  return s;
}

TokenSeq question_variant(const TokenLayout& layout, const TokenSeq& question, std::int64_t offset) {
  if (question.empty()) throw std::invalid_argument("question_variant: empty question");
  TokenSeq out = question;
  const std::int64_t f = question[0];
  if (layout.is_q_frame(f)) {
    out[0] = layout.q_frames_start + (f - layout.q_frames_start + offset) % layout.n_q_frames;
  } else if (layout.is_probe_frame(f)) {
    out[0] = layout.probe_frames_start + (f - layout.probe_frames_start + offset) % layout.n_probe_frames;
  } else {
    throw std::invalid_argument("question_variant: sequence does not start with a known frame token");
  }
  return out;
}

TokenSeq paraphrase(const TokenLayout& layout, const TokenSeq& question) {
  return question_variant(layout, question, 1);
}

std::vector<TokenizedExample> training_examples(const GeneratedCorpus& corpus, const Split& split,
                                                TrainFilter filter) {
  std::vector<TokenizedExample> out;
  for (const EvalItem& item : corpus.items) {
    const bool forget = split.is_forget(item.profile_id);
    if (filter == TrainFilter::retain_only && forget) continue;
    if (filter == TrainFilter::forget_only && !forget) continue;
    out.push_back(to_example(corpus.layout, item.question, item.gold_answer));
    out.push_back(to_example(corpus.layout, question_variant(corpus.layout, item.question, kQaTrainVariantOffset),
                             item.gold_answer));
  }
  if (filter != TrainFilter::forget_only) {
    for (const EvalItem& item : corpus.probe_items) {
      out.push_back(to_example(corpus.layout, item.question, item.gold_answer));
      out.push_back(to_example(corpus.layout,
                               question_variant(corpus.layout, item.question, kProbeTrainVariantOffset),
                               item.gold_answer));
    }
  }
  return out;
}

TokenizedExample to_example(const TokenLayout& layout, const TokenSeq& question, const TokenSeq& answer) {
  TokenSeq tokens;
  tokens.reserve(question.size() + answer.size() + 3);
  tokens.push_back(layout.bos);
  tokens.push_back(layout.q_open);
  tokens.insert(tokens.end(), question.begin(), question.end());
  tokens.push_back(layout.q_close);
  tokens.insert(tokens.end(), answer.begin(), answer.end());
  TemplateLayout spans;
  spans.bos_len = 1;
  spans.q_open_len = 1;
  spans.question_len = static_cast<std::int64_t>(question.size());
  spans.q_close_len = 1;
  spans.answer_len = static_cast<std::int64_t>(answer.size());
  return apply_mask(tokens, spans);
}

TokenSeq decode_prompt(const TokenLayout& layout, const TokenSeq& question, std::int64_t style_token) {
  TokenSeq prompt;
  prompt.reserve(question.size() + 4);
  prompt.push_back(layout.bos);
  prompt.push_back(layout.q_open);
  prompt.insert(prompt.end(), question.begin(), question.end());
  prompt.push_back(layout.q_close);
  prompt.push_back(style_token);
  return prompt;
}

TokenSeq answer_content(const TokenLayout& layout, const TokenSeq& answer) {
  if (answer.size() < 3) throw std::invalid_argument("answer_content: answer too short");
  TokenSeq content(answer.begin() + 1, answer.end());
  if (content.back() == layout.eos) content.pop_back();
  return content;
}

// ---- corpus file ------------------------------------------------------------

namespace {

constexpr const char* kCorpusHeader = "# ceu-lab corpus v1";

void write_tokens(std::ostream& out, const TokenSeq& t) {
  for (std::size_t i = 0; i < t.size(); ++i) {
    if (i) out << ' ';
    out << t[i];
  }
}

TokenSeq parse_tokens(const std::string& s) {
  TokenSeq out;
  std::istringstream in(s);
  std::int64_t v;
  while (in >> v) out.push_back(v);
  return out;
}

std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> fields;
  std::string cur;
  for (char ch : line) {
    if (ch == sep) {
      fields.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  fields.push_back(cur);
  return fields;
}

void write_item(std::ostream& out, const EvalItem& item, const char* split_tag) {
  out << "item " << (item.kind == EvalItem::Kind::qa ? "qa" : "probe") << ' ' << split_tag << ' ' << item.profile_id
      << ' ' << item.qa_index << '|';
  write_tokens(out, item.question);
  out << '|';
  write_tokens(out, item.gold_answer);
  out << '|';
  write_tokens(out, item.paraphrased_question);
  out << '|';
  write_tokens(out, item.paraphrased_answer);
  out << '|';
  for (std::size_t i = 0; i < item.perturbed_answers.size(); ++i) {
    if (i) out << ';';
    write_tokens(out, item.perturbed_answers[i]);
  }
  out << '\n';
}

}  // namespace

void write_corpus_file(const std::filesystem::path& path, const GeneratedCorpus& corpus, const Split& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_corpus_file: cannot open " + path.string());
  out << kCorpusHeader << '\n';
  out << "spec " << corpus.spec.seed << ' ' << corpus.spec.n_profiles << ' ' << corpus.spec.qa_per_profile << ' '
      << corpus.spec.n_probe_subjects << ' ' << corpus.spec.probe_qa_per_subject << ' ' << corpus.spec.vocab_size
      << '\n';
  for (const Profile& p : corpus.profiles) {
    out << "profile " << p.profile_id << ' ' << p.name_token << ' ' << p.city_token << ' ' << p.work_token << '\n';
  }
  for (const EvalItem& item : corpus.items) {
    write_item(out, item, split.is_forget(item.profile_id) ? "forget" : "retain");
  }
  for (const EvalItem& item : corpus.probe_items) {
    write_item(out, item, "probe");
  }
  if (!out) throw std::runtime_error("write_corpus_file: write failed for " + path.string());
}

LoadedCorpus read_corpus_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("read_corpus_file: cannot open " + path.string());
  std::string line;
  if (!std::getline(in, line) || line != kCorpusHeader) {
    throw std::runtime_error("read_corpus_file: bad header in " + path.string());
  }
  LoadedCorpus lc;
  if (!std::getline(in, line)) throw std::runtime_error("read_corpus_file: missing spec line");
  {
    std::istringstream ss(line);
    std::string tag;
    ss >> tag >> lc.corpus.spec.seed >> lc.corpus.spec.n_profiles >> lc.corpus.spec.qa_per_profile >>
        lc.corpus.spec.n_probe_subjects >> lc.corpus.spec.probe_qa_per_subject >> lc.corpus.spec.vocab_size;
    if (tag != "spec" || !ss) throw std::runtime_error("read_corpus_file: bad spec line");
  }
  lc.corpus.layout = TokenLayout::plan(lc.corpus.spec);
  lc.corpus.profiles.resize(static_cast<std::size_t>(lc.corpus.spec.n_profiles));

  std::vector<std::int64_t> forget_ids;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    if (line.rfind("profile ", 0) == 0) {
      std::istringstream ss(line.substr(8));
      std::int64_t id, name, city, work;
      if (!(ss >> id >> name >> city >> work)) throw std::runtime_error("read_corpus_file: bad profile line");
      Profile& p = lc.corpus.profiles.at(static_cast<std::size_t>(id));
      p.profile_id = id;
      p.name_token = name;
      p.city_token = city;
      p.work_token = work;
      p.qa_pairs.resize(static_cast<std::size_t>(lc.corpus.spec.qa_per_profile));
      continue;
    }
    if (line.rfind("item ", 0) != 0) throw std::runtime_error("read_corpus_file: unknown record: " + line);

    const auto fields = split_fields(line, '|');
    if (fields.size() != 6) throw std::runtime_error("read_corpus_file: bad item line");
    std::istringstream head(fields[0].substr(5));
    std::string kind, split_tag;
    EvalItem item;
    if (!(head >> kind >> split_tag >> item.profile_id >> item.qa_index)) {
      throw std::runtime_error("read_corpus_file: bad item head");
    }
    item.kind = kind == "qa" ? EvalItem::Kind::qa : EvalItem::Kind::probe;
    item.question = parse_tokens(fields[1]);
    item.gold_answer = parse_tokens(fields[2]);
    item.paraphrased_question = parse_tokens(fields[3]);
    item.paraphrased_answer = parse_tokens(fields[4]);
    for (const auto& p : split_fields(fields[5], ';')) item.perturbed_answers.push_back(parse_tokens(p));

    if (item.kind == EvalItem::Kind::qa) {
      Profile& p = lc.corpus.profiles.at(static_cast<std::size_t>(item.profile_id));
      p.qa_pairs.at(static_cast<std::size_t>(item.qa_index)) = QaPair{item.question, item.gold_answer};
      if (split_tag == "forget") forget_ids.push_back(item.profile_id);
      lc.corpus.items.push_back(std::move(item));
    } else {
      lc.corpus.probe_items.push_back(std::move(item));
    }
  }

  std::sort(forget_ids.begin(), forget_ids.end());
  forget_ids.erase(std::unique(forget_ids.begin(), forget_ids.end()), forget_ids.end());
  lc.split.forget_profiles = forget_ids;
  for (const Profile& p : lc.corpus.profiles) {
    if (!lc.split.is_forget(p.profile_id)) lc.split.retain_profiles.push_back(p.profile_id);
  }
  return lc;
}

void write_split_file(const std::filesystem::path& path, const Split& split) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("write_split_file: cannot open " + path.string());
  out << "# ceu-lab split v1\n";
  for (std::int64_t id : split.forget_profiles) out << "profile " << id << " forget\n";
  for (std::int64_t id : split.retain_profiles) out << "profile " << id << " retain\n";
}

}  // namespace ceu
