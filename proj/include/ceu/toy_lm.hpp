#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "ceu/autodiff.hpp"
#include "ceu/losses.hpp"

namespace ceu {

struct divergence_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ModelConfig {
  std::int64_t vocab_size = 192;
  std::int64_t d_model = 64;
  std::int64_t n_layers = 2;
  std::int64_t n_heads = 4;
  std::int64_t max_seq_len = 64;
  std::uint64_t seed = 7;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

struct LayerParams {
  DenseArray ln1_g, ln1_b;
  DenseArray wq, bq, wk, bk, wv, bv, wo, bo;
  DenseArray ln2_g, ln2_b;
  DenseArray w_fc, b_fc, w_proj, b_proj;
};

struct ModelParams {
  ModelConfig config;
  DenseArray tok_emb;  // [vocab, d_model]
  DenseArray pos_emb;  // [max_seq_len, d_model]
  std::vector<LayerParams> layers;
  DenseArray lnf_g, lnf_b;
  DenseArray w_out;  // [d_model, vocab]
  DenseArray b_out;

  // Visits every parameter tensor in a fixed order as (name, array).
  template <class F>
  void for_each_tensor(F&& f) {
    f("tok_emb", tok_emb);
    f("pos_emb", pos_emb);
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const std::string p = "layer" + std::to_string(l) + ".";
      LayerParams& lp = layers[l];
      f(p + "ln1_g", lp.ln1_g);
      f(p + "ln1_b", lp.ln1_b);
      f(p + "wq", lp.wq);
      f(p + "bq", lp.bq);
      f(p + "wk", lp.wk);
      f(p + "bk", lp.bk);
      f(p + "wv", lp.wv);
      f(p + "bv", lp.bv);
      f(p + "wo", lp.wo);
      f(p + "bo", lp.bo);
      f(p + "ln2_g", lp.ln2_g);
      f(p + "ln2_b", lp.ln2_b);
      f(p + "w_fc", lp.w_fc);
      f(p + "b_fc", lp.b_fc);
      f(p + "w_proj", lp.w_proj);
      f(p + "b_proj", lp.b_proj);
    }
    f("lnf_g", lnf_g);
    f("lnf_b", lnf_b);
    f("w_out", w_out);
    f("b_out", b_out);
  }

  std::uint64_t checksum() const;
};

// Parameters drawn deterministically from config.seed: identical seeds give
// bitwise identical parameters.
ModelParams init_model(const ModelConfig& cfg);

// Token sequence plus its supervision mask. supervised[t] marks token t as a
// prediction target (the loss looks at the logits of position t-1).
struct TokenizedExample {
  std::vector<std::int64_t> tokens;
  std::vector<char> supervised;
};

// Span layout of one templated example: [bos][q_open][question][q_close][answer].
// The answer span includes the leading style token and the trailing
// end-of-answer token.
struct TemplateLayout {
  std::int64_t bos_len = 1;
  std::int64_t q_open_len = 1;
  std::int64_t question_len = 0;
  std::int64_t q_close_len = 1;
  std::int64_t answer_len = 0;

  std::int64_t total() const { return bos_len + q_open_len + question_len + q_close_len + answer_len; }
  std::int64_t answer_start() const { return bos_len + q_open_len + question_len + q_close_len; }
};

// Marks answer tokens as supervised, excluding the first answer token; BOS,
// question and template spans stay unsupervised.
TokenizedExample apply_mask(const std::vector<std::int64_t>& tokens, const TemplateLayout& layout);

// ---- forward ------------------------------------------------------------

// A built forward graph: the logits plus the parameter leaves so an optimizer
// can read their gradients after backward().
struct ForwardGraph {
  Var logits;  // [batch, seq_len, vocab]
  std::vector<std::pair<DenseArray*, Var>> param_slots;
};

// Runs the decoder on a batch of equal-length sequences. with_grad controls
// whether parameter leaves record gradients.
ForwardGraph forward_graph(ModelParams& params, const std::vector<std::vector<std::int64_t>>& batch_ids,
                           bool with_grad);

// Inference-only forward over a batch of examples (padded internally to the
// longest sequence; padding cannot affect earlier positions).
DenseArray forward(const ModelParams& params, const std::vector<TokenizedExample>& batch);

// ---- training -------------------------------------------------------------

enum class Objective { cross_entropy, ceu, general_ceu, grad_ascent };

const char* objective_name(Objective o);
std::optional<Objective> objective_from_name(const std::string& name);

struct TrainSettings {
  double learning_rate = 1e-3;
  std::int64_t batch_size = 32;
  double weight_decay = 0.0;
  std::int64_t epochs = 1;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t shuffle_seed = 1;
  // normalized true-label score broadcast to every supervised position when
  // the objective is general_ceu
  double general_score = 0.0;
  // A batch loss that is non-finite or beyond this magnitude aborts training
  // with divergence_error. The ascent objective is unbounded below, so the
  // magnitude bound is what makes its blow-up detectable in double precision.
  double divergence_loss_bound = 1e6;

  // learning-rate presets preserved from the reference experiments
  static constexpr double kLrPresetFast = 4e-5;
  static constexpr double kLrPresetSlow = 2e-6;
};

struct EpochStat {
  std::int64_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
};

// Invoked after each epoch; return true to stop early.
using EpochCallback = std::function<bool(const EpochStat&, ModelParams&)>;

struct TrainResult {
  std::vector<EpochStat> trace;
  std::int64_t epochs_run = 0;
  bool stopped_early = false;
};

// Adam with decoupled weight decay over the given dataset. Deterministic for
// a fixed (settings, params) pair. Throws divergence_error when a batch loss
// goes non-finite.
TrainResult train(ModelParams& params, const std::vector<TokenizedExample>& dataset,
                  const TrainSettings& settings, Objective objective,
                  const EpochCallback& on_epoch = nullptr);

// ---- inference ------------------------------------------------------------

// Argmax decoding, ties broken by lowest token id. Stops after emitting
// end_token or after max_new tokens; the returned continuation excludes
// end_token.
std::vector<std::int64_t> greedy_decode(const ModelParams& params, const std::vector<std::int64_t>& prompt,
                                        std::int64_t max_new, std::int64_t end_token);

struct SequenceLogprob {
  double total = 0.0;           // sum of log p(token) over supervised positions
  std::int64_t n_tokens = 0;    // supervised-position count (for length normalization)
};

SequenceLogprob sequence_logprob(const ModelParams& params, const TokenizedExample& example);

// ---- checkpoints ------------------------------------------------------------

// Versioned binary dump of config + parameter arrays with a trailing checksum.
void save_checkpoint(const std::filesystem::path& path, const ModelParams& params);
ModelParams load_checkpoint(const std::filesystem::path& path);

}  // namespace ceu
