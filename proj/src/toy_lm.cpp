#include "ceu/toy_lm.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "ceu/hash.hpp"
#include "ceu/rng.hpp"
#include "ceu/softmax_ext.hpp"

namespace ceu {

void ModelConfig::validate() const {
  if (vocab_size < 4) throw std::invalid_argument("ModelConfig: vocab_size must be >= 4");
  if (d_model <= 0 || n_layers <= 0 || n_heads <= 0 || max_seq_len <= 0) {
    throw std::invalid_argument("ModelConfig: dimensions must be positive");
  }
  if (d_model % n_heads != 0) throw std::invalid_argument("ModelConfig: d_model must be divisible by n_heads");
}

std::uint64_t ModelParams::checksum() const {
  Fnv1a64 h;
  h.update_value(config.vocab_size);
  h.update_value(config.d_model);
  h.update_value(config.n_layers);
  h.update_value(config.n_heads);
  h.update_value(config.max_seq_len);
  h.update_value(config.seed);
  const_cast<ModelParams*>(this)->for_each_tensor([&h](const std::string&, DenseArray& a) {
    h.update(a.data.data(), a.data.size() * sizeof(double));
  });
  return h.digest();
}

namespace {

DenseArray gaussian_init(Rng& rng, Shape shape, double stddev) {
  DenseArray a = DenseArray::zeros(std::move(shape));
  for (double& v : a.data) v = stddev * rng.next_gaussian();
  return a;
}

}  // namespace

ModelParams init_model(const ModelConfig& cfg) {
  cfg.validate();
  Rng rng(Rng::mix(cfg.seed, 0xce0de1));
  const std::int64_t C = cfg.d_model, V = cfg.vocab_size, H = 4 * cfg.d_model;
  const double std_emb = 0.02;
  const double std_proj = 0.02;
  // residual-path projections scaled down with depth
  const double std_resid = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg.n_layers));

  ModelParams p;
  p.config = cfg;
  p.tok_emb = gaussian_init(rng, {V, C}, std_emb);
  p.pos_emb = gaussian_init(rng, {cfg.max_seq_len, C}, std_emb);
  p.layers.resize(static_cast<std::size_t>(cfg.n_layers));
  for (auto& lp : p.layers) {
    lp.ln1_g = DenseArray::full({C}, 1.0);
    lp.ln1_b = DenseArray::zeros({C});
    lp.wq = gaussian_init(rng, {C, C}, std_proj);
    lp.bq = DenseArray::zeros({C});
    lp.wk = gaussian_init(rng, {C, C}, std_proj);
    lp.bk = DenseArray::zeros({C});
    lp.wv = gaussian_init(rng, {C, C}, std_proj);
    lp.bv = DenseArray::zeros({C});
    lp.wo = gaussian_init(rng, {C, C}, std_resid);
    lp.bo = DenseArray::zeros({C});
    lp.ln2_g = DenseArray::full({C}, 1.0);
    lp.ln2_b = DenseArray::zeros({C});
    lp.w_fc = gaussian_init(rng, {C, H}, std_proj);
    lp.b_fc = DenseArray::zeros({H});
    lp.w_proj = gaussian_init(rng, {H, C}, std_resid);
    lp.b_proj = DenseArray::zeros({C});
  }
  p.lnf_g = DenseArray::full({C}, 1.0);
  p.lnf_b = DenseArray::zeros({C});
  p.w_out = gaussian_init(rng, {C, V}, std_proj);
  p.b_out = DenseArray::zeros({V});
  return p;
}

TokenizedExample apply_mask(const std::vector<std::int64_t>& tokens, const TemplateLayout& layout) {
  if (layout.bos_len < 0 || layout.q_open_len < 0 || layout.question_len < 0 || layout.q_close_len < 0 ||
      layout.answer_len < 0) {
    throw std::invalid_argument("apply_mask: negative span length");
  }
  if (layout.total() != static_cast<std::int64_t>(tokens.size())) {
    throw std::invalid_argument("apply_mask: layout spans cover " + std::to_string(layout.total()) +
                                " tokens, sequence has " + std::to_string(tokens.size()));
  }
  if (layout.answer_len - 1 <= 0) {
    throw empty_supervision_error("apply_mask: answer span leaves no supervised position");
  }
  TokenizedExample ex;
  ex.tokens = tokens;
  ex.supervised.assign(tokens.size(), 0);
  // answer tokens minus the first (style) token
  for (std::int64_t t = layout.answer_start() + 1; t < layout.total(); ++t) {
    ex.supervised[static_cast<std::size_t>(t)] = 1;
  }
  return ex;
}

// ---- forward ------------------------------------------------------------

ForwardGraph forward_graph(ModelParams& params, const std::vector<std::vector<std::int64_t>>& batch_ids,
                           bool with_grad) {
  const ModelConfig& cfg = params.config;
  const std::int64_t B = static_cast<std::int64_t>(batch_ids.size());
  if (B == 0) throw std::invalid_argument("forward: empty batch");
  const std::int64_t T = static_cast<std::int64_t>(batch_ids[0].size());
  if (T == 0) throw std::invalid_argument("forward: empty sequence");
  if (T > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(T) + " exceeds max_seq_len " +
                                std::to_string(cfg.max_seq_len));
  }

  std::vector<std::int64_t> flat_ids, flat_pos;
  flat_ids.reserve(static_cast<std::size_t>(B * T));
  flat_pos.reserve(static_cast<std::size_t>(B * T));
  for (const auto& seq : batch_ids) {
    if (static_cast<std::int64_t>(seq.size()) != T) throw std::invalid_argument("forward: ragged batch");
    for (std::int64_t id : seq) {
      if (id < 0 || id >= cfg.vocab_size) {
        throw std::invalid_argument("forward: token id " + std::to_string(id) + " outside vocab");
      }
      flat_ids.push_back(id);
    }
    for (std::int64_t t = 0; t < T; ++t) flat_pos.push_back(t);
  }

  ForwardGraph g;
  auto leaf = [&](DenseArray& slot) {
    Var v = with_grad ? Var::param(slot) : Var::constant(slot);
    if (with_grad) g.param_slots.emplace_back(&slot, v);
    return v;
  };

  // leaves in for_each_tensor order so optimizer state lines up
  Var tok_emb = leaf(params.tok_emb);
  Var pos_emb = leaf(params.pos_emb);
  struct LayerVars {
    Var ln1_g, ln1_b, wq, bq, wk, bk, wv, bv, wo, bo, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj;
  };
  std::vector<LayerVars> lv;
  lv.reserve(params.layers.size());
  for (auto& lp : params.layers) {
    lv.push_back({leaf(lp.ln1_g), leaf(lp.ln1_b), leaf(lp.wq), leaf(lp.bq), leaf(lp.wk), leaf(lp.bk), leaf(lp.wv),
                  leaf(lp.bv), leaf(lp.wo), leaf(lp.bo), leaf(lp.ln2_g), leaf(lp.ln2_b), leaf(lp.w_fc), leaf(lp.b_fc),
                  leaf(lp.w_proj), leaf(lp.b_proj)});
  }
  Var lnf_g = leaf(params.lnf_g);
  Var lnf_b = leaf(params.lnf_b);
  Var w_out = leaf(params.w_out);
  Var b_out = leaf(params.b_out);

  Var x = add(gather_rows(tok_emb, flat_ids), gather_rows(pos_emb, flat_pos));
  for (const auto& l : lv) {
    Var h = layer_norm(x, l.ln1_g, l.ln1_b);
    Var q = add_rowvec(matmul(h, l.wq), l.bq);
    Var k = add_rowvec(matmul(h, l.wk), l.bk);
    Var v = add_rowvec(matmul(h, l.wv), l.bv);
    Var att = causal_attention(q, k, v, B, T, cfg.n_heads);
    x = add(x, add_rowvec(matmul(att, l.wo), l.bo));
    Var m = layer_norm(x, l.ln2_g, l.ln2_b);
    m = gelu(add_rowvec(matmul(m, l.w_fc), l.b_fc));
    x = add(x, add_rowvec(matmul(m, l.w_proj), l.b_proj));
  }
  x = layer_norm(x, lnf_g, lnf_b);
  Var logits = add_rowvec(matmul(x, w_out), b_out);
  g.logits = reshape(logits, {B, T, cfg.vocab_size});
  return g;
}

DenseArray forward(const ModelParams& params, const std::vector<TokenizedExample>& batch) {
  if (batch.empty()) throw std::invalid_argument("forward: empty batch");
  std::size_t max_len = 0;
  for (const auto& ex : batch) max_len = std::max(max_len, ex.tokens.size());
  std::vector<std::vector<std::int64_t>> ids;
  ids.reserve(batch.size());
  for (const auto& ex : batch) {
    std::vector<std::int64_t> seq = ex.tokens;
    seq.resize(max_len, 0);  // trailing pad cannot reach earlier positions
    ids.push_back(std::move(seq));
  }
  ForwardGraph g = forward_graph(const_cast<ModelParams&>(params), ids, /*with_grad=*/false);
  return g.logits.value();
}

// ---- training -------------------------------------------------------------

const char* objective_name(Objective o) {
  switch (o) {
    case Objective::cross_entropy: return "cross_entropy";
    case Objective::ceu: return "ceu";
    case Objective::general_ceu: return "general_ceu";
    case Objective::grad_ascent: return "grad_ascent";
  }
  return "?";
}

std::optional<Objective> objective_from_name(const std::string& name) {
  if (name == "cross_entropy") return Objective::cross_entropy;
  if (name == "ceu") return Objective::ceu;
  if (name == "general_ceu") return Objective::general_ceu;
  if (name == "grad_ascent") return Objective::grad_ascent;
  return std::nullopt;
}

namespace {

LabelBlock labels_from_batch(const std::vector<const TokenizedExample*>& batch, std::int64_t seq_len,
                             std::int64_t ignore_value = -100) {
  LabelBlock lb;
  lb.batch = static_cast<std::int64_t>(batch.size());
  lb.seq_len = seq_len;
  lb.ignore_value = ignore_value;
  lb.token_ids.assign(static_cast<std::size_t>(lb.batch * seq_len), ignore_value);
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const auto& ex = *batch[b];
    for (std::size_t t = 0; t + 1 < ex.tokens.size(); ++t) {
      if (ex.supervised[t + 1]) {
        lb.token_ids[b * static_cast<std::size_t>(seq_len) + t] = ex.tokens[t + 1];
      }
    }
  }
  return lb;
}

struct AdamState {
  std::vector<DenseArray> m, v;
  std::int64_t step = 0;
};

void adam_step(const ForwardGraph& g, AdamState& state, const TrainSettings& s) {
  state.step += 1;
  const double bc1 = 1.0 - std::pow(s.adam_beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(s.adam_beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < g.param_slots.size(); ++i) {
    DenseArray& w = *g.param_slots[i].first;
    const DenseArray& grad = g.param_slots[i].second.grad();
    DenseArray& m = state.m[i];
    DenseArray& v = state.v[i];
    for (std::size_t j = 0; j < w.data.size(); ++j) {
      const double gj = grad.data[j];
      m.data[j] = s.adam_beta1 * m.data[j] + (1.0 - s.adam_beta1) * gj;
      v.data[j] = s.adam_beta2 * v.data[j] + (1.0 - s.adam_beta2) * gj * gj;
      const double mhat = m.data[j] / bc1;
      const double vhat = v.data[j] / bc2;
      w.data[j] -= s.learning_rate * (mhat / (std::sqrt(vhat) + s.adam_eps) + s.weight_decay * w.data[j]);
    }
  }
}

}  // namespace

TrainResult train(ModelParams& params, const std::vector<TokenizedExample>& dataset, const TrainSettings& settings,
                  Objective objective, const EpochCallback& on_epoch) {
  if (dataset.empty()) throw std::invalid_argument("train: empty dataset");
  if (settings.batch_size < 1) throw std::invalid_argument("train: batch_size must be >= 1");
  if (!(settings.learning_rate > 0.0)) throw std::invalid_argument("train: learning_rate must be > 0");
  params.config.validate();

  AdamState adam;
  params.for_each_tensor([&adam](const std::string&, DenseArray& a) {
    adam.m.push_back(DenseArray::zeros(a.shape));
    adam.v.push_back(DenseArray::zeros(a.shape));
  });

  TrainResult result;
  std::vector<std::size_t> order(dataset.size());
  std::iota(order.begin(), order.end(), 0);

  for (std::int64_t epoch = 1; epoch <= settings.epochs; ++epoch) {
    Rng rng(Rng::mix(settings.shuffle_seed, static_cast<std::uint64_t>(epoch)));
    rng.shuffle(order);

    double loss_weighted_sum = 0.0;
    std::int64_t valid_total = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(settings.batch_size)) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(settings.batch_size));
      std::vector<const TokenizedExample*> batch;
      std::size_t max_len = 0;
      for (std::size_t i = start; i < stop; ++i) {
        batch.push_back(&dataset[order[i]]);
        max_len = std::max(max_len, dataset[order[i]].tokens.size());
      }
      std::vector<std::vector<std::int64_t>> ids;
      ids.reserve(batch.size());
      for (const auto* ex : batch) {
        std::vector<std::int64_t> seq = ex->tokens;
        seq.resize(max_len, 0);
        ids.push_back(std::move(seq));
      }

      ForwardGraph g = forward_graph(params, ids, /*with_grad=*/true);
      LogitBlock block = make_logit_block(g.logits);
      LabelBlock labels = labels_from_batch(batch, static_cast<std::int64_t>(max_len));
      const std::int64_t n_valid = static_cast<std::int64_t>(valid_positions(labels).size());

      Var loss;
      switch (objective) {
        case Objective::cross_entropy: loss = cross_entropy_loss(block, labels); break;
        case Objective::ceu: loss = ceu_loss(block, labels); break;
        case Objective::general_ceu: {
          PreferenceScore scores = PreferenceScore::normalized(
              std::vector<double>(static_cast<std::size_t>(n_valid), settings.general_score));
          loss = general_ceu_loss(block, labels, scores);
          break;
        }
        case Objective::grad_ascent: loss = grad_ascent_loss(block, labels); break;
      }

      const double loss_value = loss.scalar();
      if (!std::isfinite(loss_value) || std::abs(loss_value) > settings.divergence_loss_bound) {
        throw divergence_error(std::string("train: ") + objective_name(objective) + " diverged (loss " +
                               std::to_string(loss_value) + ") at epoch " + std::to_string(epoch) + ", step " +
                               std::to_string(adam.step + 1));
      }
      backward(loss);
      adam_step(g, adam, settings);

      loss_weighted_sum += loss_value * static_cast<double>(n_valid);
      valid_total += n_valid;
    }

    EpochStat stat{epoch, loss_weighted_sum / static_cast<double>(valid_total)};
    result.trace.push_back(stat);
    result.epochs_run = epoch;
    if (on_epoch && on_epoch(stat, params)) {
      result.stopped_early = true;
      break;
    }
  }
  return result;
}

// ---- inference ------------------------------------------------------------

std::vector<std::int64_t> greedy_decode(const ModelParams& params, const std::vector<std::int64_t>& prompt,
                                        std::int64_t max_new, std::int64_t end_token) {
  if (prompt.empty()) throw std::invalid_argument("greedy_decode: empty prompt");
  if (static_cast<std::int64_t>(prompt.size()) + max_new > params.config.max_seq_len) {
    throw std::invalid_argument("greedy_decode: prompt plus continuation exceeds context");
  }
  std::vector<std::int64_t> seq = prompt;
  std::vector<std::int64_t> out;
  for (std::int64_t step = 0; step < max_new; ++step) {
    ForwardGraph g = forward_graph(const_cast<ModelParams&>(params), {seq}, /*with_grad=*/false);
    const DenseArray& logits = g.logits.value();
    const std::int64_t V = params.config.vocab_size;
    const double* row = &logits.data[static_cast<std::size_t>((seq.size() - 1) * static_cast<std::size_t>(V))];
    std::int64_t best = 0;
    for (std::int64_t j = 1; j < V; ++j) {
      if (row[j] > row[best]) best = j;  // strict > keeps the lowest id on ties
    }
    if (best == end_token) break;
    out.push_back(best);
    seq.push_back(best);
  }
  return out;
}

SequenceLogprob sequence_logprob(const ModelParams& params, const TokenizedExample& example) {
  if (example.tokens.size() != example.supervised.size()) {
    throw std::invalid_argument("sequence_logprob: mask length mismatch");
  }
  if (!example.supervised.empty() && example.supervised[0]) {
    throw std::invalid_argument("sequence_logprob: position 0 cannot be supervised");
  }
  const DenseArray logits = forward(params, {example});
  const std::int64_t V = params.config.vocab_size;
  SequenceLogprob r;
  for (std::size_t t = 1; t < example.tokens.size(); ++t) {
    if (!example.supervised[t]) continue;
    const double* row = &logits.data[(t - 1) * static_cast<std::size_t>(V)];
    const auto logp = log_softmax_ext(std::span<const double>(row, static_cast<std::size_t>(V)));
    r.total += logp[static_cast<std::size_t>(example.tokens[t])];
    r.n_tokens += 1;
  }
  if (r.n_tokens == 0) throw empty_supervision_error("sequence_logprob: no supervised positions");
  return r;
}

// ---- checkpoints ------------------------------------------------------------

namespace {

constexpr char kCkptMagic[8] = {'C', 'E', 'U', 'L', 'M', '0', '0', '1'};

void put_bytes(std::ofstream& out, Fnv1a64& h, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  h.update(p, n);
}

template <class T>
void put_value(std::ofstream& out, Fnv1a64& h, const T& v) {
  put_bytes(out, h, &v, sizeof(T));
}

void get_bytes(std::ifstream& in, Fnv1a64& h, void* p, std::size_t n) {
  in.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!in) throw std::runtime_error("checkpoint: truncated file");
  h.update(p, n);
}

template <class T>
T get_value(std::ifstream& in, Fnv1a64& h) {
  T v;
  get_bytes(in, h, &v, sizeof(T));
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const ModelParams& params) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path.string());
  out.write(kCkptMagic, sizeof(kCkptMagic));
  Fnv1a64 h;
  put_value(out, h, params.config.vocab_size);
  put_value(out, h, params.config.d_model);
  put_value(out, h, params.config.n_layers);
  put_value(out, h, params.config.n_heads);
  put_value(out, h, params.config.max_seq_len);
  put_value(out, h, params.config.seed);
  std::int64_t n_tensors = 0;
  const_cast<ModelParams&>(params).for_each_tensor([&n_tensors](const std::string&, DenseArray&) { ++n_tensors; });
  put_value(out, h, n_tensors);
  const_cast<ModelParams&>(params).for_each_tensor([&out, &h](const std::string& name, DenseArray& a) {
    const std::uint32_t len = static_cast<std::uint32_t>(name.size());
    put_value(out, h, len);
    put_bytes(out, h, name.data(), name.size());
    const std::int64_t rank = a.rank();
    put_value(out, h, rank);
    for (std::int64_t d : a.shape) put_value(out, h, d);
    put_bytes(out, h, a.data.data(), a.data.size() * sizeof(double));
  });
  const std::uint64_t digest = h.digest();
  out.write(reinterpret_cast<const char*>(&digest), sizeof(digest));
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path.string());
}

ModelParams load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0) {
    throw std::runtime_error("load_checkpoint: bad magic in " + path.string());
  }
  Fnv1a64 h;
  ModelConfig cfg;
  cfg.vocab_size = get_value<std::int64_t>(in, h);
  cfg.d_model = get_value<std::int64_t>(in, h);
  cfg.n_layers = get_value<std::int64_t>(in, h);
  cfg.n_heads = get_value<std::int64_t>(in, h);
  cfg.max_seq_len = get_value<std::int64_t>(in, h);
  cfg.seed = get_value<std::uint64_t>(in, h);
  cfg.validate();

  ModelParams params = init_model(cfg);  // shapes; data overwritten below
  const std::int64_t n_tensors = get_value<std::int64_t>(in, h);
  std::int64_t expected = 0;
  params.for_each_tensor([&expected](const std::string&, DenseArray&) { ++expected; });
  if (n_tensors != expected) throw std::runtime_error("load_checkpoint: tensor count mismatch");
  params.for_each_tensor([&in, &h](const std::string& name, DenseArray& a) {
    const std::uint32_t len = get_value<std::uint32_t>(in, h);
    std::string stored(len, '\0');
    get_bytes(in, h, stored.data(), len);
    if (stored != name) throw std::runtime_error("load_checkpoint: tensor order mismatch at " + stored);
    const std::int64_t rank = get_value<std::int64_t>(in, h);
    if (rank != a.rank()) throw std::runtime_error("load_checkpoint: rank mismatch at " + name);
    for (std::int64_t d = 0; d < rank; ++d) {
      if (get_value<std::int64_t>(in, h) != a.shape[static_cast<std::size_t>(d)]) {
        throw std::runtime_error("load_checkpoint: shape mismatch at " + name);
      }
    }
    get_bytes(in, h, a.data.data(), a.data.size() * sizeof(double));
  });
  const std::uint64_t computed = h.digest();
  std::uint64_t stored = 0;
  in.read(reinterpret_cast<char*>(&stored), sizeof(stored));
  if (!in || stored != computed) throw std::runtime_error("load_checkpoint: checksum mismatch in " + path.string());
  return params;
}

}  // namespace ceu
