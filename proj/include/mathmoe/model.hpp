#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mathmoe/moe.hpp"
#include "mathmoe/rng.hpp"
#include "mathmoe/tensor.hpp"
#include "mathmoe/text.hpp"

namespace mathmoe {

struct ModelConfig {
  std::int64_t d_model = 64;
  std::int64_t d_ff = 128;
  int heads = 4;
  int encoder_layers = 4;
  int u_decoder_layers = 1;
  int g_decoder_layers = 1;
  std::int64_t vocab_size = 512;
  std::int64_t max_len = 128;
  int num_experts = 4;  // K
  int top_k = 1;        // k, activated experts
  double jitter_eta = 0.01;
  double dropout = 0.1;
  std::int64_t num_labels = 0;  // union label dictionary width
  std::int64_t num_tasks = 0;   // task prompt table rows

  void validate() const;
};

struct AttentionParams {
  Tensor wq, bq, wk, bk, wv, bv, wo, bo;
};

struct LayerNormParams {
  Tensor gain, bias;
};

struct EncoderLayer {
  AttentionParams attn;
  LayerNormParams ln1;
  MoeLayerState moe;
  LayerNormParams ln2;
};

struct UDecoderLayer {
  AttentionParams attn;
  LayerNormParams ln1;
  ExpertParams ffn;
  LayerNormParams ln2;
};

struct GDecoderLayer {
  AttentionParams self_attn;
  LayerNormParams ln1;
  AttentionParams cross_attn;
  LayerNormParams ln2;
  ExpertParams ffn;
  LayerNormParams ln3;
};

enum class TaskFormat { Understanding, Generation };

struct TaskSpec {
  int id = 0;  // row in the prompt table
  std::string name;
  TaskFormat format = TaskFormat::Understanding;
  std::vector<std::int64_t> label_subset;  // indices into the union label space
};

/// Dropout and jitter noise run only in train mode, drawing from rng; eval
/// forwards consume no randomness and are deterministic.
struct ForwardCtx {
  bool train = false;
  Rng* rng = nullptr;
};

/// Shared MoE encoder with a bidirectional understanding decoder and an
/// autoregressive generation decoder. Parameters fall into three groups:
/// encoder (embeddings, encoder stack, prompt table), U (U-decoder, MLM and
/// classifier heads) and G (G-decoder, LM head).
struct Model {
  ModelConfig config;
  Tensor tok_emb;  // vocab x d_model
  Tensor pos_emb;  // max_len x d_model
  std::vector<EncoderLayer> encoder;
  std::vector<UDecoderLayer> u_decoder;
  std::vector<GDecoderLayer> g_decoder;
  Tensor mlm_w, mlm_b;  // d_model x vocab
  Tensor lm_w, lm_b;    // d_model x vocab
  Tensor cls_w, cls_b;  // d_model x num_labels; absent when num_labels == 0
  Tensor prompt_table;  // num_tasks x d_model; absent when num_tasks == 0

  static Model init(const ModelConfig& config, std::uint64_t seed);

  /// Stable name -> parameter listing; names prefix-encode the group.
  std::vector<std::pair<std::string, Tensor>> named_parameters() const;
  void zero_grads() const;

  /// Deep copy with independent parameter storage.
  Model clone() const;

  /// (Re)creates the classifier head and task prompt table at the given
  /// widths. Existing tensors are kept when the width already matches.
  void ensure_heads(std::int64_t num_labels, std::int64_t num_tasks, std::uint64_t seed);

  void save(const std::string& path) const;
  static Model load(const std::string& path);
};

/// 'E', 'U' or 'G' from a parameter name.
char param_group(const std::string& name);

struct LayerRouting {
  std::vector<RoutingDecision> decisions;
  LoadStats stats;
  Tensor logits;  // tokens x K
  std::uint64_t expert_macs = 0;
};

struct EncodeResult {
  Tensor reps;          // ([CLS], prompt?, tokens...) x d_model
  int text_offset = 1;  // row of the first text token
  std::vector<LayerRouting> routing;  // one entry per encoder layer
};

/// Runs the shared encoder. [CLS] is prepended; the task prompt embedding,
/// when a task is given, is inserted after it and added to every MoE
/// router's input. Throws on overlength input unless truncate is set.
EncodeResult encode(const MathText& text, const Model& model,
                    const TaskSpec* task = nullptr, const ForwardCtx& ctx = {},
                    bool truncate = false);
EncodeResult encode_ids(std::span<const std::int64_t> ids, const Model& model,
                        const TaskSpec* task = nullptr, const ForwardCtx& ctx = {},
                        bool truncate = false);

/// U-decoder stack output (same row layout as the encode result).
Tensor u_decode(const Tensor& reps, const Model& model, const ForwardCtx& ctx = {});

/// Per-position vocabulary logits for masked-token prediction.
Tensor u_decode_mlm(const EncodeResult& enc, const Model& model,
                    const ForwardCtx& ctx = {});

/// Independent per-label scores (sigmoid semantics) from the [CLS] row of
/// the U-decoder's last layer. Zero-width head yields a zero-length tensor.
Tensor u_decode_classify(const EncodeResult& enc, const Model& model,
                         const ForwardCtx& ctx = {});

/// Next-token logits for [BOS] + prefix under causal self-attention and
/// cross-attention to the encoder output. Row i predicts target position i.
Tensor g_decode(const Tensor& reps, std::span<const std::int64_t> prefix,
                const Model& model, const ForwardCtx& ctx = {});

struct GenerationStrategy {
  enum Kind { Greedy, Beam } kind = Greedy;
  int beam_width = 4;
};

/// Autoregressive decoding until [EOS] or max_new tokens; deterministic for
/// greedy. Returns the generated tokens as a MathText.
MathText generate(const MathText& text, const Model& model, const Vocabulary& vocab,
                  const TaskSpec* task, std::int64_t max_new,
                  const GenerationStrategy& strategy = {});

}  // namespace mathmoe
