#include "mathmoe/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include <json.hpp>

#include "mathmoe/corruption.hpp"

namespace mathmoe {

void ModelConfig::validate() const {
  if (d_model <= 0 || d_ff <= 0 || vocab_size <= 0 || max_len <= 0)
    throw ConfigError("model dimensions must be positive");
  if (heads <= 0 || d_model % heads != 0)
    throw ConfigError("d_model must be divisible by heads");
  if (encoder_layers <= u_decoder_layers || encoder_layers <= g_decoder_layers)
    throw ConfigError("the shared encoder must be deeper than each decoder");
  if (num_experts < 1 || top_k < 1 || top_k > num_experts)
    throw ConfigError("expert counts must satisfy 1 <= k <= K");
  if (jitter_eta < 0.0) throw ConfigError("jitter degree must be non-negative");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0,1)");
}

namespace {

Tensor init_weight(std::vector<std::int64_t> shape, Rng& rng, double stddev = 0.02) {
  return Tensor::randn(std::move(shape), rng, stddev, /*requires_grad=*/true);
}

Tensor init_zeros(std::vector<std::int64_t> shape) {
  return Tensor::zeros(std::move(shape), /*requires_grad=*/true);
}

Tensor init_ones(std::vector<std::int64_t> shape) {
  return Tensor::full(std::move(shape), 1.0, /*requires_grad=*/true);
}

AttentionParams init_attention(std::int64_t d, Rng& rng) {
  AttentionParams p;
  p.wq = init_weight({d, d}, rng);
  p.bq = init_zeros({d});
  p.wk = init_weight({d, d}, rng);
  p.bk = init_zeros({d});
  p.wv = init_weight({d, d}, rng);
  p.bv = init_zeros({d});
  p.wo = init_weight({d, d}, rng);
  p.bo = init_zeros({d});
  return p;
}

LayerNormParams init_layer_norm(std::int64_t d) {
  return {init_ones({d}), init_zeros({d})};
}

ExpertParams init_ffn(std::int64_t d, std::int64_t d_ff, Rng& rng) {
  ExpertParams f;
  f.w1 = init_weight({d, d_ff}, rng);
  f.b1 = init_zeros({d_ff});
  f.w2 = init_weight({d_ff, d}, rng);
  f.b2 = init_zeros({d});
  return f;
}

Tensor perturbed_copy(const Tensor& src, Rng& rng, double stddev) {
  std::vector<double> data(src.values().begin(), src.values().end());
  for (auto& v : data) v += rng.normal() * stddev;
  return Tensor(src.shape(), std::move(data), /*requires_grad=*/true);
}

constexpr double kExpertInitNoise = 1e-3;

}  // namespace

Model Model::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(Rng::derive(seed, 0x6d6f64656cULL));
  Model m;
  m.config = config;
  const auto d = config.d_model;
  m.tok_emb = init_weight({config.vocab_size, d}, rng);
  m.pos_emb = init_weight({config.max_len, d}, rng);
  for (int l = 0; l < config.encoder_layers; ++l) {
    EncoderLayer layer;
    layer.attn = init_attention(d, rng);
    layer.ln1 = init_layer_norm(d);
    // Experts start as copies of one pretrained-style feed-forward block,
    // with a small per-expert perturbation so routing gradients are not
    // degenerate.
    ExpertParams base = init_ffn(d, config.d_ff, rng);
    layer.moe.router_w = init_weight({config.num_experts, d}, rng);
    layer.moe.eta = config.jitter_eta;
    layer.moe.top_k = config.top_k;
    for (int e = 0; e < config.num_experts; ++e) {
      ExpertParams ex;
      ex.w1 = perturbed_copy(base.w1, rng, kExpertInitNoise);
      ex.b1 = perturbed_copy(base.b1, rng, kExpertInitNoise);
      ex.w2 = perturbed_copy(base.w2, rng, kExpertInitNoise);
      ex.b2 = perturbed_copy(base.b2, rng, kExpertInitNoise);
      layer.moe.experts.push_back(std::move(ex));
    }
    layer.ln2 = init_layer_norm(d);
    m.encoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.u_decoder_layers; ++l) {
    UDecoderLayer layer;
    layer.attn = init_attention(d, rng);
    layer.ln1 = init_layer_norm(d);
    layer.ffn = init_ffn(d, config.d_ff, rng);
    layer.ln2 = init_layer_norm(d);
    m.u_decoder.push_back(std::move(layer));
  }
  for (int l = 0; l < config.g_decoder_layers; ++l) {
    GDecoderLayer layer;
    layer.self_attn = init_attention(d, rng);
    layer.ln1 = init_layer_norm(d);
    layer.cross_attn = init_attention(d, rng);
    layer.ln2 = init_layer_norm(d);
    layer.ffn = init_ffn(d, config.d_ff, rng);
    layer.ln3 = init_layer_norm(d);
    m.g_decoder.push_back(std::move(layer));
  }
  m.mlm_w = init_weight({d, config.vocab_size}, rng);
  m.mlm_b = init_zeros({config.vocab_size});
  m.lm_w = init_weight({d, config.vocab_size}, rng);
  m.lm_b = init_zeros({config.vocab_size});
  if (config.num_labels > 0) {
    m.cls_w = init_weight({d, config.num_labels}, rng);
    m.cls_b = init_zeros({config.num_labels});
  }
  if (config.num_tasks > 0) m.prompt_table = init_weight({config.num_tasks, d}, rng);
  return m;
}

namespace {

void collect_attention(std::vector<std::pair<std::string, Tensor>>& out,
                       const std::string& prefix, const AttentionParams& p) {
  out.emplace_back(prefix + ".wq", p.wq);
  out.emplace_back(prefix + ".bq", p.bq);
  out.emplace_back(prefix + ".wk", p.wk);
  out.emplace_back(prefix + ".bk", p.bk);
  out.emplace_back(prefix + ".wv", p.wv);
  out.emplace_back(prefix + ".bv", p.bv);
  out.emplace_back(prefix + ".wo", p.wo);
  out.emplace_back(prefix + ".bo", p.bo);
}

void collect_ffn(std::vector<std::pair<std::string, Tensor>>& out,
                 const std::string& prefix, const ExpertParams& f) {
  out.emplace_back(prefix + ".w1", f.w1);
  out.emplace_back(prefix + ".b1", f.b1);
  out.emplace_back(prefix + ".w2", f.w2);
  out.emplace_back(prefix + ".b2", f.b2);
}

void collect_ln(std::vector<std::pair<std::string, Tensor>>& out,
                const std::string& prefix, const LayerNormParams& ln) {
  out.emplace_back(prefix + ".g", ln.gain);
  out.emplace_back(prefix + ".b", ln.bias);
}

}  // namespace

std::vector<std::pair<std::string, Tensor>> Model::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("enc.tok_emb", tok_emb);
  out.emplace_back("enc.pos_emb", pos_emb);
  for (std::size_t l = 0; l < encoder.size(); ++l) {
    const std::string p = "enc." + std::to_string(l);
    collect_attention(out, p + ".attn", encoder[l].attn);
    collect_ln(out, p + ".ln1", encoder[l].ln1);
    out.emplace_back(p + ".moe.router", encoder[l].moe.router_w);
    for (std::size_t e = 0; e < encoder[l].moe.experts.size(); ++e)
      collect_ffn(out, p + ".moe.expert" + std::to_string(e),
                  encoder[l].moe.experts[e]);
    collect_ln(out, p + ".ln2", encoder[l].ln2);
  }
  if (prompt_table.defined()) out.emplace_back("enc.prompt_table", prompt_table);
  for (std::size_t l = 0; l < u_decoder.size(); ++l) {
    const std::string p = "u_dec." + std::to_string(l);
    collect_attention(out, p + ".attn", u_decoder[l].attn);
    collect_ln(out, p + ".ln1", u_decoder[l].ln1);
    collect_ffn(out, p + ".ffn", u_decoder[l].ffn);
    collect_ln(out, p + ".ln2", u_decoder[l].ln2);
  }
  out.emplace_back("u_dec.mlm.w", mlm_w);
  out.emplace_back("u_dec.mlm.b", mlm_b);
  if (cls_w.defined()) {
    out.emplace_back("u_dec.cls.w", cls_w);
    out.emplace_back("u_dec.cls.b", cls_b);
  }
  for (std::size_t l = 0; l < g_decoder.size(); ++l) {
    const std::string p = "g_dec." + std::to_string(l);
    collect_attention(out, p + ".self", g_decoder[l].self_attn);
    collect_ln(out, p + ".ln1", g_decoder[l].ln1);
    collect_attention(out, p + ".cross", g_decoder[l].cross_attn);
    collect_ln(out, p + ".ln2", g_decoder[l].ln2);
    collect_ffn(out, p + ".ffn", g_decoder[l].ffn);
    collect_ln(out, p + ".ln3", g_decoder[l].ln3);
  }
  out.emplace_back("g_dec.lm.w", lm_w);
  out.emplace_back("g_dec.lm.b", lm_b);
  return out;
}

void Model::zero_grads() const {
  for (auto& [name, t] : named_parameters()) t.zero_grad();
}

Model Model::clone() const {
  Model copy = Model::init(config, 0);
  auto src = named_parameters();
  auto dst = copy.named_parameters();
  if (src.size() != dst.size()) throw ConfigError("clone: parameter list mismatch");
  for (std::size_t i = 0; i < src.size(); ++i) {
    auto sv = src[i].second.values();
    std::copy(sv.begin(), sv.end(), dst[i].second.mutable_data().begin());
  }
  return copy;
}

void Model::ensure_heads(std::int64_t num_labels, std::int64_t num_tasks,
                         std::uint64_t seed) {
  Rng rng(Rng::derive(seed, 0x68656164ULL));
  if (num_labels != config.num_labels) {
    config.num_labels = num_labels;
    if (num_labels > 0) {
      cls_w = init_weight({config.d_model, num_labels}, rng);
      cls_b = init_zeros({num_labels});
    } else {
      cls_w = Tensor();
      cls_b = Tensor();
    }
  }
  if (num_tasks != config.num_tasks) {
    config.num_tasks = num_tasks;
    prompt_table = num_tasks > 0 ? init_weight({num_tasks, config.d_model}, rng)
                                 : Tensor();
  }
}

char param_group(const std::string& name) {
  if (name.rfind("enc.", 0) == 0) return 'E';
  if (name.rfind("u_dec.", 0) == 0) return 'U';
  if (name.rfind("g_dec.", 0) == 0) return 'G';
  throw ValueError("unknown parameter name: " + name);
}

// ---------------------------------------------------------------------------
// checkpoint io
// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json config_to_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["d_model"] = c.d_model;
  j["d_ff"] = c.d_ff;
  j["heads"] = c.heads;
  j["encoder_layers"] = c.encoder_layers;
  j["u_decoder_layers"] = c.u_decoder_layers;
  j["g_decoder_layers"] = c.g_decoder_layers;
  j["vocab_size"] = c.vocab_size;
  j["max_len"] = c.max_len;
  j["num_experts"] = c.num_experts;
  j["top_k"] = c.top_k;
  j["jitter_eta"] = c.jitter_eta;
  j["dropout"] = c.dropout;
  j["num_labels"] = c.num_labels;
  j["num_tasks"] = c.num_tasks;
  return j;
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<std::int64_t>();
  c.d_ff = j.at("d_ff").get<std::int64_t>();
  c.heads = j.at("heads").get<int>();
  c.encoder_layers = j.at("encoder_layers").get<int>();
  c.u_decoder_layers = j.at("u_decoder_layers").get<int>();
  c.g_decoder_layers = j.at("g_decoder_layers").get<int>();
  c.vocab_size = j.at("vocab_size").get<std::int64_t>();
  c.max_len = j.at("max_len").get<std::int64_t>();
  c.num_experts = j.at("num_experts").get<int>();
  c.top_k = j.at("top_k").get<int>();
  c.jitter_eta = j.at("jitter_eta").get<double>();
  c.dropout = j.at("dropout").get<double>();
  c.num_labels = j.at("num_labels").get<std::int64_t>();
  c.num_tasks = j.at("num_tasks").get<std::int64_t>();
  return c;
}

}  // namespace

void Model::save(const std::string& path) const {
  nlohmann::ordered_json j;
  j["format_version"] = 1;
  j["config"] = config_to_json(config);
  nlohmann::ordered_json params = nlohmann::ordered_json::array();
  for (const auto& [name, t] : named_parameters()) {
    nlohmann::ordered_json p;
    p["name"] = name;
    p["shape"] = t.shape();
    p["data"] = std::vector<double>(t.values().begin(), t.values().end());
    params.push_back(std::move(p));
  }
  j["params"] = std::move(params);
  std::ofstream out(path);
  if (!out) throw ValueError("cannot open " + path + " for writing");
  out << j.dump() << "\n";
}

Model Model::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValueError("cannot open checkpoint " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("checkpoint parse failure: ") + e.what());
  }
  if (j.at("format_version").get<int>() != 1)
    throw ParseError("unsupported checkpoint format version");
  Model m = Model::init(config_from_json(j.at("config")), 0);
  auto params = m.named_parameters();
  const auto& stored = j.at("params");
  if (stored.size() != params.size())
    throw ParseError("checkpoint parameter count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& p = stored[i];
    if (p.at("name").get<std::string>() != params[i].first)
      throw ParseError("checkpoint parameter order mismatch at " + params[i].first);
    auto data = p.at("data").get<std::vector<double>>();
    if (data.size() != params[i].second.mutable_data().size())
      throw ParseError("checkpoint parameter size mismatch at " + params[i].first);
    params[i].second.mutable_data() = std::move(data);
  }
  return m;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

namespace {

Tensor maybe_dropout(Tensor x, const ForwardCtx& ctx, double rate) {
  if (ctx.train && rate > 0.0) {
    if (!ctx.rng) throw ValueError("train-mode forward requires an rng");
    return dropout(x, rate, *ctx.rng);
  }
  return x;
}

Tensor attention_block(const Tensor& q_in, const Tensor& kv_in,
                       const AttentionParams& p, int heads, bool causal,
                       const ForwardCtx& ctx, double drop) {
  const auto d = q_in.dim(1);
  const auto dh = d / heads;
  Tensor q = add_rowvec(matmul(q_in, p.wq), p.bq);
  Tensor k = add_rowvec(matmul(kv_in, p.wk), p.bk);
  Tensor v = add_rowvec(matmul(kv_in, p.wv), p.bv);
  const auto m = q_in.dim(0), n = kv_in.dim(0);
  std::vector<bool> causal_mask;
  if (causal) {
    causal_mask.resize(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
      for (std::int64_t j = i + 1; j < n; ++j)
        causal_mask[static_cast<std::size_t>(i * n + j)] = true;
  }
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Tensor> head_outs;
  head_outs.reserve(static_cast<std::size_t>(heads));
  for (int h = 0; h < heads; ++h) {
    Tensor qh = slice_cols(q, h * dh, (h + 1) * dh);
    Tensor kh = slice_cols(k, h * dh, (h + 1) * dh);
    Tensor vh = slice_cols(v, h * dh, (h + 1) * dh);
    Tensor scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
    if (causal) scores = mask_fill(scores, causal_mask, -1e9);
    head_outs.push_back(matmul(softmax(scores, -1), vh));
  }
  Tensor out = add_rowvec(matmul(concat(head_outs, 1), p.wo), p.bo);
  return maybe_dropout(std::move(out), ctx, drop);
}

Tensor ffn_block(const Tensor& x, const ExpertParams& f, const ForwardCtx& ctx,
                 double drop) {
  Tensor mid = gelu(add_rowvec(matmul(x, f.w1), f.b1));
  Tensor out = add_rowvec(matmul(mid, f.w2), f.b2);
  return maybe_dropout(std::move(out), ctx, drop);
}

Tensor residual_norm(const Tensor& x, const Tensor& sub, const LayerNormParams& ln) {
  return layer_norm(add(x, sub), ln.gain, ln.bias);
}

std::vector<std::int64_t> iota_ids(std::int64_t n) {
  std::vector<std::int64_t> v(static_cast<std::size_t>(n));
  std::iota(v.begin(), v.end(), 0);
  return v;
}

}  // namespace

EncodeResult encode_ids(std::span<const std::int64_t> ids, const Model& model,
                        const TaskSpec* task, const ForwardCtx& ctx, bool truncate) {
  const auto& cfg = model.config;
  const std::int64_t extra = 1 + (task ? 1 : 0);
  std::vector<std::int64_t> kept(ids.begin(), ids.end());
  if (static_cast<std::int64_t>(kept.size()) + extra > cfg.max_len) {
    if (!truncate)
      throw ValueError("input of " + std::to_string(kept.size()) +
                       " tokens exceeds max_len " + std::to_string(cfg.max_len) +
                       "; enable truncation to proceed");
    kept.resize(static_cast<std::size_t>(cfg.max_len - extra));
  }
  if (task) {
    if (!model.prompt_table.defined() || task->id < 0 ||
        task->id >= model.prompt_table.dim(0))
      throw ValueError("unknown task prompt id " + std::to_string(task ? task->id : -1));
  }

  std::vector<Tensor> parts;
  const std::vector<std::int64_t> cls_id = {Vocabulary::kCls};
  parts.push_back(embedding(model.tok_emb, cls_id));
  if (task) {
    const std::vector<std::int64_t> row = {task->id};
    parts.push_back(gather_rows(model.prompt_table, row));
  }
  parts.push_back(embedding(model.tok_emb, kept));
  Tensor x = concat(parts, 0);
  x = add(x, gather_rows(model.pos_emb, iota_ids(x.dim(0))));
  x = maybe_dropout(std::move(x), ctx, cfg.dropout);

  Tensor prompt_row;
  const Tensor* prompt_ptr = nullptr;
  if (task) {
    const std::vector<std::int64_t> row = {task->id};
    prompt_row = gather_rows(model.prompt_table, row);
    prompt_ptr = &prompt_row;
  }

  EncodeResult result;
  result.text_offset = static_cast<int>(extra);
  for (const auto& layer : model.encoder) {
    Tensor attn = attention_block(x, x, layer.attn, cfg.heads, /*causal=*/false,
                                  ctx, cfg.dropout);
    x = residual_norm(x, attn, layer.ln1);
    Rng* noise = (ctx.train && layer.moe.eta > 0.0) ? ctx.rng : nullptr;
    MoeForward fwd = moe_forward(x, layer.moe, prompt_ptr, noise);
    Tensor moe_out = maybe_dropout(fwd.output, ctx, cfg.dropout);
    x = residual_norm(x, moe_out, layer.ln2);
    LayerRouting routing;
    routing.decisions = std::move(fwd.decisions);
    routing.stats = std::move(fwd.stats);
    routing.logits = fwd.router_logits;
    routing.expert_macs = fwd.expert_macs;
    result.routing.push_back(std::move(routing));
  }
  result.reps = x;
  return result;
}

EncodeResult encode(const MathText& text, const Model& model, const TaskSpec* task,
                    const ForwardCtx& ctx, bool truncate) {
  return encode_ids(text.token_ids(), model, task, ctx, truncate);
}

Tensor u_decode(const Tensor& reps, const Model& model, const ForwardCtx& ctx) {
  Tensor x = reps;
  for (const auto& layer : model.u_decoder) {
    Tensor attn = attention_block(x, x, layer.attn, model.config.heads,
                                  /*causal=*/false, ctx, model.config.dropout);
    x = residual_norm(x, attn, layer.ln1);
    Tensor ffn = ffn_block(x, layer.ffn, ctx, model.config.dropout);
    x = residual_norm(x, ffn, layer.ln2);
  }
  return x;
}

Tensor u_decode_mlm(const EncodeResult& enc, const Model& model, const ForwardCtx& ctx) {
  Tensor top = u_decode(enc.reps, model, ctx);
  return add_rowvec(matmul(top, model.mlm_w), model.mlm_b);
}

Tensor u_decode_classify(const EncodeResult& enc, const Model& model,
                         const ForwardCtx& ctx) {
  if (model.config.num_labels == 0) return Tensor({0}, {});
  Tensor top = u_decode(enc.reps, model, ctx);
  const std::vector<std::int64_t> row0 = {0};
  Tensor cls = gather_rows(top, row0);
  Tensor scores = add_rowvec(matmul(cls, model.cls_w), model.cls_b);
  return reshape(scores, {model.config.num_labels});
}

Tensor g_decode(const Tensor& reps, std::span<const std::int64_t> prefix,
                const Model& model, const ForwardCtx& ctx) {
  const auto& cfg = model.config;
  std::vector<std::int64_t> ids;
  ids.reserve(prefix.size() + 1);
  ids.push_back(Vocabulary::kBos);
  ids.insert(ids.end(), prefix.begin(), prefix.end());
  if (static_cast<std::int64_t>(ids.size()) > cfg.max_len)
    throw ValueError("decoder prefix exceeds max_len");
  Tensor x = embedding(model.tok_emb, ids);
  x = add(x, gather_rows(model.pos_emb, iota_ids(x.dim(0))));
  x = maybe_dropout(std::move(x), ctx, cfg.dropout);
  for (const auto& layer : model.g_decoder) {
    Tensor self = attention_block(x, x, layer.self_attn, cfg.heads, /*causal=*/true,
                                  ctx, cfg.dropout);
    x = residual_norm(x, self, layer.ln1);
    Tensor cross = attention_block(x, reps, layer.cross_attn, cfg.heads,
                                   /*causal=*/false, ctx, cfg.dropout);
    x = residual_norm(x, cross, layer.ln2);
    Tensor ffn = ffn_block(x, layer.ffn, ctx, cfg.dropout);
    x = residual_norm(x, ffn, layer.ln3);
  }
  return add_rowvec(matmul(x, model.lm_w), model.lm_b);
}

namespace {

MathText ids_to_math_text(std::span<const std::int64_t> ids, const Vocabulary& vocab) {
  MathText out;
  for (auto id : ids) {
    Token t;
    t.id = static_cast<TokenId>(id);
    t.surface = vocab.surface(t.id);
    t.kind = vocab.is_special(t.id) ? TokenKind::Special : TokenKind::Word;
    out.tokens.push_back(std::move(t));
  }
  out.statement_len = out.tokens.size();
  return out;
}

}  // namespace

MathText generate(const MathText& text, const Model& model, const Vocabulary& vocab,
                  const TaskSpec* task, std::int64_t max_new,
                  const GenerationStrategy& strategy) {
  EncodeResult enc = encode(text, model, task);
  const std::int64_t budget =
      std::min<std::int64_t>(max_new, model.config.max_len - 1);

  if (strategy.kind == GenerationStrategy::Greedy) {
    std::vector<std::int64_t> out;
    for (std::int64_t step = 0; step < budget; ++step) {
      Tensor logits = g_decode(enc.reps, out, model);
      const auto n = logits.dim(0);
      Tensor last = gather_rows(logits, std::vector<std::int64_t>{n - 1});
      const std::int64_t next = argmax(last, -1)[0];
      if (next == Vocabulary::kEos) break;
      out.push_back(next);
    }
    return ids_to_math_text(out, vocab);
  }

  struct Hyp {
    std::vector<std::int64_t> ids;
    double logp = 0.0;
    bool done = false;
  };
  const int width = std::max(1, strategy.beam_width);
  std::vector<Hyp> beam = {Hyp{}};
  for (std::int64_t step = 0; step < budget; ++step) {
    std::vector<Hyp> candidates;
    bool any_open = false;
    for (const auto& hyp : beam) {
      if (hyp.done) {
        candidates.push_back(hyp);
        continue;
      }
      any_open = true;
      Tensor logits = g_decode(enc.reps, hyp.ids, model);
      const auto n = logits.dim(0);
      Tensor last = gather_rows(logits, std::vector<std::int64_t>{n - 1});
      // log-softmax of the last row
      auto row = last.values();
      double mx = -HUGE_VAL;
      for (double v : row) mx = std::max(mx, v);
      double denom = 0.0;
      for (double v : row) denom += std::exp(v - mx);
      const double lse = mx + std::log(denom);
      for (std::int64_t v = 0; v < model.config.vocab_size; ++v) {
        Hyp next = hyp;
        next.logp += row[static_cast<std::size_t>(v)] - lse;
        if (v == Vocabulary::kEos) {
          next.done = true;
        } else {
          next.ids.push_back(v);
        }
        candidates.push_back(std::move(next));
      }
    }
    if (!any_open) break;
    std::stable_sort(candidates.begin(), candidates.end(),
                     [](const Hyp& a, const Hyp& b) { return a.logp > b.logp; });
    candidates.resize(std::min<std::size_t>(candidates.size(),
                                            static_cast<std::size_t>(width)));
    beam = std::move(candidates);
  }
  const Hyp* best = &beam.front();
  for (const auto& h : beam)
    if (h.logp > best->logp) best = &h;
  return ids_to_math_text(best->ids, vocab);
}

// ---------------------------------------------------------------------------
// solution checking (declared in corruption.hpp)
// ---------------------------------------------------------------------------

SolutionCheckRecords prepare_solution_checking(const MathText& text, const Model& model,
                                               const Vocabulary& vocab,
                                               std::uint64_t seed, double rate) {
  auto positions =
      sample_mask_positions(text, rate, Rng::derive(seed, 1), /*solution_only=*/true);
  CorruptionRecord masked =
      apply_mlm_corruption(text, positions, vocab, Rng::derive(seed, 2));

  // Frozen-snapshot fills, eval mode.
  EncodeResult enc = encode(masked.corrupted, model);
  Tensor u_logits = u_decode_mlm(enc, model);
  auto u_pick = argmax(u_logits, -1);

  Tensor g_logits = g_decode(enc.reps, text.token_ids(), model);
  auto g_pick = argmax(g_logits, -1);  // row i predicts token i of the text

  MathText d_u = text;
  MathText d_g = text;
  for (std::size_t pos : masked.masked_positions) {
    const auto u_id = static_cast<TokenId>(
        u_pick[static_cast<std::size_t>(pos) + static_cast<std::size_t>(enc.text_offset)]);
    d_u.tokens[pos].surface = vocab.surface(u_id);
    d_u.tokens[pos].id = u_id;
    const auto g_id = static_cast<TokenId>(g_pick[pos]);
    d_g.tokens[pos].surface = vocab.surface(g_id);
    d_g.tokens[pos].id = g_id;
  }

  SolutionCheckRecords out;
  out.for_u.corrupted = std::move(d_g);
  out.for_u.original = text;
  out.for_u.masked_positions = masked.masked_positions;
  out.for_u.objective = Objective::USC;
  out.for_u.rng_seed = seed;
  out.for_g.corrupted = std::move(d_u);
  out.for_g.original = text;
  out.for_g.masked_positions = masked.masked_positions;
  out.for_g.objective = Objective::GSC;
  out.for_g.rng_seed = seed;
  return out;
}

// ---------------------------------------------------------------------------
// routing report (declared in moe.hpp)
// ---------------------------------------------------------------------------

std::vector<RoutingReportRow> routing_report(std::span<const MathText> texts,
                                             const Model& model) {
  std::vector<RoutingReportRow> rows;
  for (const auto& text : texts) {
    EncodeResult enc = encode(text, model);
    for (std::size_t layer = 0; layer < enc.routing.size(); ++layer) {
      const auto& decisions = enc.routing[layer].decisions;
      for (std::size_t i = 0; i < text.size(); ++i) {
        const auto& dec = decisions[i + static_cast<std::size_t>(enc.text_offset)];
        RoutingReportRow row;
        row.token = text.tokens[i].surface;
        switch (text.tokens[i].kind) {
          case TokenKind::Word: row.kind = "word"; break;
          case TokenKind::MathSymbol: row.kind = "math"; break;
          case TokenKind::Special: row.kind = "special"; break;
        }
        row.layer = static_cast<int>(layer);
        row.expert = dec.selected[0];
        row.gate = dec.gates[0];
        double second = -HUGE_VAL;
        for (std::size_t e = 0; e < dec.probs.size(); ++e)
          if (static_cast<int>(e) != dec.selected[0])
            second = std::max(second, dec.probs[e]);
        row.tie = dec.probs.size() > 1 && dec.gates[0] - second <= 1e-12;
        rows.push_back(std::move(row));
      }
    }
  }
  return rows;
}

std::string routing_report_json(std::span<const RoutingReportRow> rows) {
  nlohmann::ordered_json arr = nlohmann::ordered_json::array();
  for (const auto& r : rows) {
    nlohmann::ordered_json j;
    j["token"] = r.token;
    j["kind"] = r.kind;
    j["layer"] = r.layer;
    j["expert"] = r.expert;
    j["gate"] = r.gate;
    j["tie"] = r.tie;
    arr.push_back(std::move(j));
  }
  return arr.dump();
}

}  // namespace mathmoe
