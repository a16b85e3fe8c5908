#include "fedpdpo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <json.hpp>

namespace fedpdpo {

using nlohmann::json;

namespace {

constexpr double kBackboneLnEps = 1e-5;
constexpr double kBottleneckLnEps = 1e-5;
constexpr double kLoraInitStd = 0.1;

void fill_gaussian(Matrix& m, SeededRng& rng, double std_dev) {
  for (double& v : m.storage()) v = std_dev * rng.next_gaussian();
}

}  // namespace

void validate_model_config(const ModelConfig& cfg) {
  const auto& b = cfg.backbone;
  if (b.vocab_size < 1 || b.hidden_dim < 1 || b.n_layers < 1 || b.n_heads < 1 ||
      b.max_seq_len < 1)
    throw ConfigError("backbone config: all counts must be >= 1");
  if (b.hidden_dim % b.n_heads != 0)
    throw ConfigError("backbone config: hidden_dim must be divisible by n_heads");
  if (cfg.lora_rank < 1 || cfg.lora_rank > b.hidden_dim)
    throw ConfigError("lora rank must be in [1, hidden_dim]");
  if (cfg.lora_alpha <= 0.0) throw ConfigError("lora alpha must be positive");
  if (cfg.bottleneck_dim < 1) throw ConfigError("bottleneck_dim must be >= 1");
  if (cfg.reward_hidden_dim < 1) throw ConfigError("reward_hidden_dim must be >= 1");
  for (double p : {cfg.bottleneck_dropout, cfg.reward_dropout})
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout probability must be in [0, 1)");
}

// ---------------------------------------------------------------------------
// Initialization

namespace {

LoraAdapter init_lora(int out_dim, int in_dim, int rank, double alpha, SeededRng& rng) {
  LoraAdapter a;
  a.rank = rank;
  a.alpha = alpha;
  a.a = Matrix(static_cast<std::size_t>(rank), static_cast<std::size_t>(in_dim));
  a.b = Matrix(static_cast<std::size_t>(out_dim), static_cast<std::size_t>(rank));
  fill_gaussian(a.a, rng, kLoraInitStd);
  // b stays zero so a fresh adapter is a no-op update
  return a;
}

}  // namespace

ClientModel init_client_model(const ModelConfig& cfg, std::uint64_t backbone_seed,
                              std::uint64_t client_seed) {
  validate_model_config(cfg);
  ClientModel m;
  m.cfg = cfg;
  const int d = cfg.backbone.hidden_dim;
  const int v = cfg.backbone.vocab_size;
  const double w_std = 1.0 / std::sqrt(static_cast<double>(d));

  // Frozen backbone: one stream per tensor, assigned in declaration order.
  std::uint64_t stream = 0;
  m.backbone.tok_emb = Matrix(static_cast<std::size_t>(v), static_cast<std::size_t>(d));
  m.backbone.pos_emb = Matrix(static_cast<std::size_t>(cfg.backbone.max_seq_len),
                              static_cast<std::size_t>(d));
  {
    SeededRng r1(backbone_seed, stream++);
    fill_gaussian(m.backbone.tok_emb, r1, w_std);
    SeededRng r2(backbone_seed, stream++);
    fill_gaussian(m.backbone.pos_emb, r2, w_std);
  }
  for (int l = 0; l < cfg.backbone.n_layers; ++l) {
    BackboneLayer layer;
    layer.ln1_gamma = Matrix(1, static_cast<std::size_t>(d), 1.0);
    layer.ln1_beta = Matrix(1, static_cast<std::size_t>(d), 0.0);
    layer.ln2_gamma = Matrix(1, static_cast<std::size_t>(d), 1.0);
    layer.ln2_beta = Matrix(1, static_cast<std::size_t>(d), 0.0);
    layer.w_qkv = Matrix(static_cast<std::size_t>(3 * d), static_cast<std::size_t>(d));
    layer.b_qkv = Matrix(1, static_cast<std::size_t>(3 * d));
    layer.w_attn_out = Matrix(static_cast<std::size_t>(d), static_cast<std::size_t>(d));
    layer.b_attn_out = Matrix(1, static_cast<std::size_t>(d));
    layer.w_fc = Matrix(static_cast<std::size_t>(4 * d), static_cast<std::size_t>(d));
    layer.b_fc = Matrix(1, static_cast<std::size_t>(4 * d));
    layer.w_proj = Matrix(static_cast<std::size_t>(d), static_cast<std::size_t>(4 * d));
    layer.b_proj = Matrix(1, static_cast<std::size_t>(d));
    for (Matrix* w : {&layer.w_qkv, &layer.w_attn_out, &layer.w_fc, &layer.w_proj}) {
      SeededRng r(backbone_seed, stream++);
      fill_gaussian(*w, r, w_std);
    }
    m.backbone.layers.push_back(std::move(layer));
  }
  m.backbone.lnf_gamma = Matrix(1, static_cast<std::size_t>(d), 1.0);
  m.backbone.lnf_beta = Matrix(1, static_cast<std::size_t>(d), 0.0);

  // LoRA adapters draw from the client seed: A Gaussian, B zero.
  std::uint64_t cstream = 0;
  for (int l = 0; l < cfg.backbone.n_layers; ++l) {
    LayerLora ll;
    {
      SeededRng r(client_seed, cstream++);
      ll.qkv = init_lora(3 * d, d, cfg.lora_rank, cfg.lora_alpha, r);
    }
    {
      SeededRng r(client_seed, cstream++);
      ll.attn_out = init_lora(d, d, cfg.lora_rank, cfg.lora_alpha, r);
    }
    {
      SeededRng r(client_seed, cstream++);
      ll.mlp_fc = init_lora(4 * d, d, cfg.lora_rank, cfg.lora_alpha, r);
    }
    {
      SeededRng r(client_seed, cstream++);
      ll.mlp_proj = init_lora(d, 4 * d, cfg.lora_rank, cfg.lora_alpha, r);
    }
    m.lora.push_back(std::move(ll));
  }

  const int bd = cfg.bottleneck_dim;
  m.bottleneck.w_enc = Matrix(static_cast<std::size_t>(bd), static_cast<std::size_t>(d));
  m.bottleneck.b_enc = Matrix(1, static_cast<std::size_t>(bd));
  m.bottleneck.w_dec = Matrix(static_cast<std::size_t>(d), static_cast<std::size_t>(bd));
  m.bottleneck.b_dec = Matrix(1, static_cast<std::size_t>(d));
  m.bottleneck.ln_gamma = Matrix(1, static_cast<std::size_t>(d), 1.0);
  m.bottleneck.ln_beta = Matrix(1, static_cast<std::size_t>(d), 0.0);
  m.bottleneck.dropout_p = cfg.bottleneck_dropout;
  {
    SeededRng r(client_seed, cstream++);
    fill_gaussian(m.bottleneck.w_enc, r, w_std);
  }
  {
    SeededRng r(client_seed, cstream++);
    fill_gaussian(m.bottleneck.w_dec, r, 1.0 / std::sqrt(static_cast<double>(bd)));
  }

  m.lm_head.w = Matrix(static_cast<std::size_t>(v), static_cast<std::size_t>(d));
  m.lm_head.b = Matrix(1, static_cast<std::size_t>(v));
  {
    SeededRng r(client_seed, cstream++);
    fill_gaussian(m.lm_head.w, r, w_std);
  }

  const int h = cfg.reward_hidden_dim;
  m.reward_head.w1 = Matrix(static_cast<std::size_t>(h), static_cast<std::size_t>(d));
  m.reward_head.b1 = Matrix(1, static_cast<std::size_t>(h));
  m.reward_head.w2 = Matrix(1, static_cast<std::size_t>(h));
  m.reward_head.b2 = Matrix(1, 1);
  m.reward_head.dropout_p = cfg.reward_dropout;
  {
    SeededRng r(client_seed, cstream++);
    fill_gaussian(m.reward_head.w1, r, w_std);
  }
  {
    SeededRng r(client_seed, cstream++);
    fill_gaussian(m.reward_head.w2, r, 1.0 / std::sqrt(static_cast<double>(h)));
  }
  return m;
}

ReferenceSnapshot make_reference_snapshot(const ClientModel& model) {
  return ReferenceSnapshot(model);
}

// ---------------------------------------------------------------------------
// Parameter registry

namespace {

const char* target_name(int idx) {
  switch (idx) {
    case 0: return "qkv";
    case 1: return "attn_out";
    case 2: return "mlp_fc";
    default: return "mlp_proj";
  }
}

LoraAdapter* target_adapter(LayerLora& ll, int idx) {
  switch (idx) {
    case 0: return &ll.qkv;
    case 1: return &ll.attn_out;
    case 2: return &ll.mlp_fc;
    default: return &ll.mlp_proj;
  }
}

}  // namespace

std::vector<ParamRef> collect_params(ClientModel& model, bool include_backbone) {
  std::vector<ParamRef> out;
  for (std::size_t l = 0; l < model.lora.size(); ++l) {
    for (int t = 0; t < 4; ++t) {
      LoraAdapter* ad = target_adapter(model.lora[l], t);
      const std::string base = "lora." + std::to_string(l) + "." + target_name(t);
      out.push_back({base + ".A", ParamGroup::kLora, &ad->a});
      out.push_back({base + ".B", ParamGroup::kLora, &ad->b});
    }
  }
  out.push_back({"bottleneck.w_enc", ParamGroup::kBottleneck, &model.bottleneck.w_enc});
  out.push_back({"bottleneck.b_enc", ParamGroup::kBottleneck, &model.bottleneck.b_enc});
  out.push_back({"bottleneck.w_dec", ParamGroup::kBottleneck, &model.bottleneck.w_dec});
  out.push_back({"bottleneck.b_dec", ParamGroup::kBottleneck, &model.bottleneck.b_dec});
  out.push_back({"bottleneck.ln_gamma", ParamGroup::kBottleneck, &model.bottleneck.ln_gamma});
  out.push_back({"bottleneck.ln_beta", ParamGroup::kBottleneck, &model.bottleneck.ln_beta});
  out.push_back({"lm_head.w", ParamGroup::kLmHead, &model.lm_head.w});
  out.push_back({"lm_head.b", ParamGroup::kLmHead, &model.lm_head.b});
  out.push_back({"reward_head.w1", ParamGroup::kRewardHead, &model.reward_head.w1});
  out.push_back({"reward_head.b1", ParamGroup::kRewardHead, &model.reward_head.b1});
  out.push_back({"reward_head.w2", ParamGroup::kRewardHead, &model.reward_head.w2});
  out.push_back({"reward_head.b2", ParamGroup::kRewardHead, &model.reward_head.b2});
  if (include_backbone) {
    out.push_back({"backbone.tok_emb", ParamGroup::kBackbone, &model.backbone.tok_emb});
    out.push_back({"backbone.pos_emb", ParamGroup::kBackbone, &model.backbone.pos_emb});
    for (std::size_t l = 0; l < model.backbone.layers.size(); ++l) {
      BackboneLayer& layer = model.backbone.layers[l];
      const std::string base = "backbone." + std::to_string(l) + ".";
      out.push_back({base + "ln1_gamma", ParamGroup::kBackbone, &layer.ln1_gamma});
      out.push_back({base + "ln1_beta", ParamGroup::kBackbone, &layer.ln1_beta});
      out.push_back({base + "w_qkv", ParamGroup::kBackbone, &layer.w_qkv});
      out.push_back({base + "b_qkv", ParamGroup::kBackbone, &layer.b_qkv});
      out.push_back({base + "w_attn_out", ParamGroup::kBackbone, &layer.w_attn_out});
      out.push_back({base + "b_attn_out", ParamGroup::kBackbone, &layer.b_attn_out});
      out.push_back({base + "ln2_gamma", ParamGroup::kBackbone, &layer.ln2_gamma});
      out.push_back({base + "ln2_beta", ParamGroup::kBackbone, &layer.ln2_beta});
      out.push_back({base + "w_fc", ParamGroup::kBackbone, &layer.w_fc});
      out.push_back({base + "b_fc", ParamGroup::kBackbone, &layer.b_fc});
      out.push_back({base + "w_proj", ParamGroup::kBackbone, &layer.w_proj});
      out.push_back({base + "b_proj", ParamGroup::kBackbone, &layer.b_proj});
    }
    out.push_back({"backbone.lnf_gamma", ParamGroup::kBackbone, &model.backbone.lnf_gamma});
    out.push_back({"backbone.lnf_beta", ParamGroup::kBackbone, &model.backbone.lnf_beta});
  }
  return out;
}

std::vector<ParamRef> collect_selected(ClientModel& model, const TrainableSelector& sel) {
  std::vector<ParamRef> out;
  for (auto& p : collect_params(model, false))
    if (sel.has(p.group)) out.push_back(p);
  return out;
}

Matrix& GradMap::accum(const std::string& name, std::size_t rows, std::size_t cols) {
  auto it = grads_.find(name);
  if (it == grads_.end()) it = grads_.emplace(name, Matrix(rows, cols)).first;
  return it->second;
}

const Matrix* GradMap::find(const std::string& name) const {
  auto it = grads_.find(name);
  return it == grads_.end() ? nullptr : &it->second;
}

double GradMap::global_norm() const {
  double sq = 0.0;
  for (const auto& [name, g] : grads_) sq += g.squared_norm();
  return std::sqrt(sq);
}

void GradMap::scale(double a) {
  for (auto& [name, g] : grads_) g.scale(a);
}

void GradMap::check_finite() const {
  for (const auto& [name, g] : grads_)
    if (!g.all_finite()) throw NumericError("non-finite gradient in " + name);
}

namespace {

std::uint64_t checksum_groups(std::vector<ParamRef> refs,
                              std::initializer_list<ParamGroup> groups) {
  // Name order, so checksums agree regardless of how tensors were gathered.
  std::sort(refs.begin(), refs.end(),
            [](const ParamRef& a, const ParamRef& b) { return a.name < b.name; });
  std::uint64_t h = 0;
  for (const auto& p : refs)
    for (auto g : groups)
      if (p.group == g) h = combine_checksums(h, checksum(*p.value));
  return h;
}

}  // namespace

std::uint64_t backbone_checksum(const ClientModel& model) {
  auto& m = const_cast<ClientModel&>(model);
  return checksum_groups(collect_params(m, true), {ParamGroup::kBackbone});
}

std::uint64_t lora_checksum(const ClientModel& model) {
  auto& m = const_cast<ClientModel&>(model);
  return checksum_groups(collect_params(m, false), {ParamGroup::kLora});
}

std::uint64_t personalized_checksum(const ClientModel& model) {
  auto& m = const_cast<ClientModel&>(model);
  return checksum_groups(collect_params(m, false),
                         {ParamGroup::kBottleneck, ParamGroup::kLmHead,
                          ParamGroup::kRewardHead});
}

// ---------------------------------------------------------------------------
// Core kernels

Matrix lora_linear_forward(const Matrix& x, const Matrix& w0, const Matrix& b,
                           const LoraAdapter& lora, Matrix* xa_cache) {
  Matrix y = linear_forward(x, w0, b);
  Matrix xa = linear_forward(x, lora.a, Matrix());  // (T x r)
  const double s = lora.scaling();
  // y += s * xa * B^T
  for (std::size_t t = 0; t < y.rows(); ++t) {
    const double* xat = xa.row(t);
    double* yt = y.row(t);
    for (std::size_t o = 0; o < y.cols(); ++o) {
      const double* bo = lora.b.row(o);
      double acc = 0.0;
      for (std::size_t r = 0; r < xa.cols(); ++r) acc += bo[r] * xat[r];
      yt[o] += s * acc;
    }
  }
  if (xa_cache != nullptr) *xa_cache = std::move(xa);
  return y;
}

namespace {

// Backward of lora_linear_forward. Accumulates dA/dB when non-null and
// returns dX. The frozen base weight never receives gradient.
Matrix lora_linear_backward(const Matrix& g, const Matrix& x, const Matrix& w0,
                            const LoraAdapter& lora, const Matrix& xa, Matrix* da,
                            Matrix* db) {
  Matrix dx = linear_backward(g, x, w0, nullptr, nullptr);
  const double s = lora.scaling();
  // d(xa) = s * g * B ; dB += s * g^T xa
  Matrix dxa(xa.rows(), xa.cols());
  for (std::size_t t = 0; t < g.rows(); ++t) {
    const double* gt = g.row(t);
    double* dxat = dxa.row(t);
    for (std::size_t o = 0; o < g.cols(); ++o) {
      const double go = s * gt[o];
      const double* bo = lora.b.row(o);
      for (std::size_t r = 0; r < xa.cols(); ++r) dxat[r] += go * bo[r];
    }
  }
  if (db != nullptr) {
    for (std::size_t t = 0; t < g.rows(); ++t) {
      const double* gt = g.row(t);
      const double* xat = xa.row(t);
      for (std::size_t o = 0; o < g.cols(); ++o) {
        double* dbo = db->row(o);
        const double go = s * gt[o];
        for (std::size_t r = 0; r < xa.cols(); ++r) dbo[r] += go * xat[r];
      }
    }
  }
  // dA += dxa^T x ; dx += dxa * A
  Matrix dx_lora = linear_backward(dxa, x, lora.a, da, nullptr);
  dx.add_scaled(dx_lora, 1.0);
  return dx;
}

void layer_norm_rows_forward(const Matrix& x, const Matrix& gamma, const Matrix& beta,
                             double eps, Matrix& out) {
  const std::size_t n = x.cols();
  out = Matrix(x.rows(), n);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double* xt = x.row(t);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xt[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double* ot = out.row(t);
    for (std::size_t i = 0; i < n; ++i)
      ot[i] = gamma.at(0, i) * (xt[i] - mean) * rstd + beta.at(0, i);
  }
}

// Row-wise layer norm backward; accumulates dgamma/dbeta when non-null.
Matrix layer_norm_rows_backward(const Matrix& dy, const Matrix& x, const Matrix& gamma,
                                double eps, Matrix* dgamma, Matrix* dbeta) {
  const std::size_t n = x.cols();
  Matrix dx(x.rows(), n);
  std::vector<double> xhat(n), dxhat(n);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    const double* xt = x.row(t);
    const double* dyt = dy.row(t);
    double mean = 0.0;
    for (std::size_t i = 0; i < n; ++i) mean += xt[i];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t i = 0; i < n; ++i) var += (xt[i] - mean) * (xt[i] - mean);
    var /= static_cast<double>(n);
    const double rstd = 1.0 / std::sqrt(var + eps);
    double mean_dxhat = 0.0;
    double mean_dxhat_xhat = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      xhat[i] = (xt[i] - mean) * rstd;
      dxhat[i] = dyt[i] * gamma.at(0, i);
      mean_dxhat += dxhat[i];
      mean_dxhat_xhat += dxhat[i] * xhat[i];
    }
    mean_dxhat /= static_cast<double>(n);
    mean_dxhat_xhat /= static_cast<double>(n);
    double* dxt = dx.row(t);
    for (std::size_t i = 0; i < n; ++i) {
      dxt[i] = rstd * (dxhat[i] - mean_dxhat - xhat[i] * mean_dxhat_xhat);
      if (dgamma != nullptr) dgamma->at(0, i) += dyt[i] * xhat[i];
      if (dbeta != nullptr) dbeta->at(0, i) += dyt[i];
    }
  }
  return dx;
}

void gelu_rows(const Matrix& x, Matrix& out) {
  out = Matrix(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.size(); ++i) out.data()[i] = gelu(x.data()[i]);
}

void check_tokens(const ClientModel& model, const std::vector<int>& tokens) {
  if (tokens.size() > static_cast<std::size_t>(model.cfg.backbone.max_seq_len))
    throw InputError("sequence longer than max_seq_len (" +
                     std::to_string(tokens.size()) + " > " +
                     std::to_string(model.cfg.backbone.max_seq_len) + ")");
  for (int t : tokens)
    if (t < 0 || t >= model.cfg.backbone.vocab_size)
      throw InputError("token id " + std::to_string(t) + " outside vocabulary");
}

}  // namespace

Vector bottleneck_forward(const BottleneckAdapter& adapter, const Vector& zprime,
                          DropoutCtx dropout) {
  if (zprime.size() != adapter.w_enc.cols())
    throw ContractError("bottleneck_forward: feature dim mismatch");
  Matrix x = Matrix::row_vector(zprime);
  Matrix pre = linear_forward(x, adapter.w_enc, adapter.b_enc);
  Matrix act;
  gelu_rows(pre, act);
  if (dropout.training && adapter.dropout_p > 0.0) {
    if (dropout.rng == nullptr)
      throw ContractError("bottleneck_forward: training dropout needs an rng");
    Vector mask = dropout_mask(*dropout.rng, act.cols(), adapter.dropout_p, true);
    for (std::size_t i = 0; i < act.cols(); ++i) act.at(0, i) *= mask[i];
  }
  Matrix dec = linear_forward(act, adapter.w_dec, adapter.b_dec);
  Vector ln_in(zprime.size());
  for (std::size_t i = 0; i < zprime.size(); ++i) ln_in[i] = zprime[i] + dec.at(0, i);
  return layer_norm(ln_in, adapter.ln_gamma.storage(), adapter.ln_beta.storage(),
                    kBottleneckLnEps);
}

// ---------------------------------------------------------------------------
// Sequence forward

SeqCache forward_sequence(const ClientModel& model, const std::vector<int>& tokens,
                          std::size_t prompt_len, bool want_logits, DropoutCtx dropout) {
  check_tokens(model, tokens);
  if (tokens.empty()) throw InputError("forward_sequence: empty token sequence");
  const std::size_t seq = tokens.size();
  const std::size_t d = static_cast<std::size_t>(model.cfg.backbone.hidden_dim);
  const int heads = model.cfg.backbone.n_heads;
  const std::size_t hd = d / static_cast<std::size_t>(heads);
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  SeqCache c;
  c.tokens = tokens;
  c.prompt_len = prompt_len;
  c.x0 = Matrix(seq, d);
  for (std::size_t t = 0; t < seq; ++t) {
    const double* te = model.backbone.tok_emb.row(static_cast<std::size_t>(tokens[t]));
    const double* pe = model.backbone.pos_emb.row(t);
    double* xt = c.x0.row(t);
    for (std::size_t i = 0; i < d; ++i) xt[i] = te[i] + pe[i];
  }

  Matrix x = c.x0;
  c.layers.resize(model.backbone.layers.size());
  for (std::size_t l = 0; l < model.backbone.layers.size(); ++l) {
    const BackboneLayer& bl = model.backbone.layers[l];
    const LayerLora& ll = model.lora[l];
    LayerCache& lc = c.layers[l];
    lc.ln1_in = x;
    layer_norm_rows_forward(x, bl.ln1_gamma, bl.ln1_beta, kBackboneLnEps, lc.ln1_out);
    lc.qkv = lora_linear_forward(lc.ln1_out, bl.w_qkv, bl.b_qkv, ll.qkv, &lc.qkv_xa);

    lc.attn_ctx = Matrix(seq, d);
    lc.attn.probs.resize(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      const std::size_t qo = static_cast<std::size_t>(h) * hd;
      const std::size_t ko = d + qo;
      const std::size_t vo = 2 * d + qo;
      Matrix& probs = lc.attn.probs[static_cast<std::size_t>(h)];
      probs = Matrix(seq, seq);
      std::vector<double> scores;
      for (std::size_t t = 0; t < seq; ++t) {
        scores.assign(t + 1, 0.0);
        double mx = -1e300;
        for (std::size_t u = 0; u <= t; ++u) {
          double acc = 0.0;
          const double* q = lc.qkv.row(t) + qo;
          const double* k = lc.qkv.row(u) + ko;
          for (std::size_t i = 0; i < hd; ++i) acc += q[i] * k[i];
          scores[u] = acc * inv_sqrt_hd;
          mx = std::max(mx, scores[u]);
        }
        double denom = 0.0;
        for (std::size_t u = 0; u <= t; ++u) denom += std::exp(scores[u] - mx);
        double* ctx = lc.attn_ctx.row(t) + qo;
        for (std::size_t u = 0; u <= t; ++u) {
          const double p = std::exp(scores[u] - mx) / denom;
          probs.at(t, u) = p;
          const double* vrow = lc.qkv.row(u) + vo;
          for (std::size_t i = 0; i < hd; ++i) ctx[i] += p * vrow[i];
        }
      }
    }

    Matrix attn_proj = lora_linear_forward(lc.attn_ctx, bl.w_attn_out, bl.b_attn_out,
                                           ll.attn_out, &lc.attn_out_xa);
    x.add_scaled(attn_proj, 1.0);
    lc.ln2_in = x;
    layer_norm_rows_forward(x, bl.ln2_gamma, bl.ln2_beta, kBackboneLnEps, lc.ln2_out);
    lc.fc_pre = lora_linear_forward(lc.ln2_out, bl.w_fc, bl.b_fc, ll.mlp_fc, &lc.fc_xa);
    gelu_rows(lc.fc_pre, lc.fc_act);
    Matrix mlp_out =
        lora_linear_forward(lc.fc_act, bl.w_proj, bl.b_proj, ll.mlp_proj, &lc.proj_xa);
    x.add_scaled(mlp_out, 1.0);
  }
  c.lnf_in = x;
  layer_norm_rows_forward(x, model.backbone.lnf_gamma, model.backbone.lnf_beta,
                          kBackboneLnEps, c.zprime);

  if (model.cfg.bottleneck_enabled) {
    const BottleneckAdapter& bn = model.bottleneck;
    c.enc_pre = linear_forward(c.zprime, bn.w_enc, bn.b_enc);
    gelu_rows(c.enc_pre, c.enc_act);
    c.enc_drop = c.enc_act;
    if (dropout.training && bn.dropout_p > 0.0) {
      if (dropout.rng == nullptr)
        throw ContractError("forward_sequence: training dropout needs an rng");
      c.enc_mask = Matrix(c.enc_act.rows(), c.enc_act.cols());
      for (std::size_t t = 0; t < c.enc_act.rows(); ++t) {
        Vector mask = dropout_mask(*dropout.rng, c.enc_act.cols(), bn.dropout_p, true);
        for (std::size_t i = 0; i < c.enc_act.cols(); ++i) {
          c.enc_mask.at(t, i) = mask[i];
          c.enc_drop.at(t, i) *= mask[i];
        }
      }
    }
    c.dec_out = linear_forward(c.enc_drop, bn.w_dec, bn.b_dec);
    c.ln_in = c.zprime;
    c.ln_in.add_scaled(c.dec_out, 1.0);
    layer_norm_rows_forward(c.ln_in, bn.ln_gamma, bn.ln_beta, kBottleneckLnEps, c.z);
  } else {
    c.z = c.zprime;
  }

  if (want_logits) {
    Matrix logits = linear_forward(c.z, model.lm_head.w, model.lm_head.b);
    c.logprobs = Matrix(logits.rows(), logits.cols());
    for (std::size_t t = 0; t < logits.rows(); ++t) {
      Vector row(logits.row(t), logits.row(t) + logits.cols());
      Vector ls = log_softmax(row);
      std::copy(ls.begin(), ls.end(), c.logprobs.row(t));
    }
  }
  return c;
}

double logprob_from_cache(const SeqCache& cache) {
  if (cache.logprobs.empty())
    throw ContractError("logprob_from_cache: cache lacks logits");
  double total = 0.0;
  for (std::size_t j = cache.prompt_len; j < cache.tokens.size(); ++j)
    total += cache.logprobs.at(j - 1, static_cast<std::size_t>(cache.tokens[j]));
  return total;
}

double reward_mlp(const RewardHead& head, const Vector& pooled, DropoutCtx dropout) {
  if (pooled.size() != head.w1.cols())
    throw ContractError("reward_mlp: feature dim mismatch");
  Matrix x = Matrix::row_vector(pooled);
  Matrix pre = linear_forward(x, head.w1, head.b1);
  double score = head.b2.at(0, 0);
  Vector mask;
  if (dropout.training && head.dropout_p > 0.0) {
    if (dropout.rng == nullptr)
      throw ContractError("reward_mlp: training dropout needs an rng");
    mask = dropout_mask(*dropout.rng, pre.cols(), head.dropout_p, true);
  }
  for (std::size_t i = 0; i < pre.cols(); ++i) {
    double a = std::tanh(pre.at(0, i));
    if (!mask.empty()) a *= mask[i];
    score += head.w2.at(0, i) * a;
  }
  return score;
}

void compute_reward(const ClientModel& model, SeqCache& cache, DropoutCtx dropout) {
  const std::size_t seq = cache.tokens.size();
  cache.span_begin = model.cfg.pool_include_prompt ? 0 : cache.prompt_len;
  cache.span_end = seq;
  if (cache.span_begin >= cache.span_end)
    throw InputError("reward pooling span is empty");
  const std::size_t d = cache.z.cols();
  cache.pooled.assign(d, 0.0);
  const double inv = 1.0 / static_cast<double>(cache.span_end - cache.span_begin);
  for (std::size_t t = cache.span_begin; t < cache.span_end; ++t) {
    const double* zt = cache.z.row(t);
    for (std::size_t i = 0; i < d; ++i) cache.pooled[i] += inv * zt[i];
  }
  const RewardHead& rh = model.reward_head;
  Matrix pre = linear_forward(Matrix::row_vector(cache.pooled), rh.w1, rh.b1);
  cache.rh_pre.assign(pre.row(0), pre.row(0) + pre.cols());
  cache.rh_act.resize(cache.rh_pre.size());
  for (std::size_t i = 0; i < cache.rh_pre.size(); ++i)
    cache.rh_act[i] = std::tanh(cache.rh_pre[i]);
  cache.rh_drop = cache.rh_act;
  cache.rh_mask.clear();
  if (dropout.training && rh.dropout_p > 0.0) {
    if (dropout.rng == nullptr)
      throw ContractError("compute_reward: training dropout needs an rng");
    cache.rh_mask = dropout_mask(*dropout.rng, cache.rh_act.size(), rh.dropout_p, true);
    for (std::size_t i = 0; i < cache.rh_drop.size(); ++i)
      cache.rh_drop[i] *= cache.rh_mask[i];
  }
  double score = rh.b2.at(0, 0);
  for (std::size_t i = 0; i < cache.rh_drop.size(); ++i)
    score += rh.w2.at(0, i) * cache.rh_drop[i];
  cache.reward = score;
  cache.reward_computed = true;
}

// ---------------------------------------------------------------------------
// Sequence backward

void backward_sequence(const ClientModel& model, const SeqCache& cache,
                       double dlogprob, double dreward, const TrainableSelector& sel,
                       GradMap& grads) {
  const std::size_t seq = cache.tokens.size();
  const std::size_t d = static_cast<std::size_t>(model.cfg.backbone.hidden_dim);
  const int heads = model.cfg.backbone.n_heads;
  const std::size_t hd = d / static_cast<std::size_t>(heads);
  const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));

  Matrix dz(seq, d);

  if (dlogprob != 0.0) {
    if (cache.logprobs.empty())
      throw ContractError("backward_sequence: cache lacks logits");
    const std::size_t v = cache.logprobs.cols();
    Matrix dlogits(seq, v);
    for (std::size_t j = cache.prompt_len; j < seq; ++j) {
      const std::size_t row = j - 1;
      const double* lp = cache.logprobs.row(row);
      double* dl = dlogits.row(row);
      for (std::size_t k = 0; k < v; ++k) dl[k] += -dlogprob * std::exp(lp[k]);
      dl[static_cast<std::size_t>(cache.tokens[j])] += dlogprob;
    }
    Matrix* dw = sel.lm_head ? &grads.accum("lm_head.w", model.lm_head.w.rows(),
                                            model.lm_head.w.cols())
                             : nullptr;
    Matrix* db = sel.lm_head ? &grads.accum("lm_head.b", 1, model.lm_head.b.cols())
                             : nullptr;
    dz.add_scaled(linear_backward(dlogits, cache.z, model.lm_head.w, dw, db), 1.0);
  }

  if (dreward != 0.0) {
    if (!cache.reward_computed)
      throw ContractError("backward_sequence: cache lacks the reward path");
    const RewardHead& rh = model.reward_head;
    const std::size_t h = cache.rh_pre.size();
    if (sel.reward_head) {
      Matrix& dw2 = grads.accum("reward_head.w2", 1, h);
      Matrix& db2 = grads.accum("reward_head.b2", 1, 1);
      for (std::size_t i = 0; i < h; ++i) dw2.at(0, i) += dreward * cache.rh_drop[i];
      db2.at(0, 0) += dreward;
    }
    Vector drh_pre(h);
    for (std::size_t i = 0; i < h; ++i) {
      double da = dreward * rh.w2.at(0, i);
      if (!cache.rh_mask.empty()) da *= cache.rh_mask[i];
      drh_pre[i] = da * (1.0 - cache.rh_act[i] * cache.rh_act[i]);
    }
    Matrix g = Matrix::row_vector(drh_pre);
    Matrix* dw1 = sel.reward_head
                      ? &grads.accum("reward_head.w1", rh.w1.rows(), rh.w1.cols())
                      : nullptr;
    Matrix* db1 = sel.reward_head ? &grads.accum("reward_head.b1", 1, h) : nullptr;
    Matrix dpooled =
        linear_backward(g, Matrix::row_vector(cache.pooled), rh.w1, dw1, db1);
    const double inv = 1.0 / static_cast<double>(cache.span_end - cache.span_begin);
    for (std::size_t t = cache.span_begin; t < cache.span_end; ++t) {
      double* dzt = dz.row(t);
      for (std::size_t i = 0; i < d; ++i) dzt[i] += inv * dpooled.at(0, i);
    }
  }

  // Bottleneck backward (or passthrough when disabled).
  Matrix dzprime;
  if (model.cfg.bottleneck_enabled) {
    const BottleneckAdapter& bn = model.bottleneck;
    Matrix* dgamma = sel.bottleneck ? &grads.accum("bottleneck.ln_gamma", 1, d) : nullptr;
    Matrix* dbeta = sel.bottleneck ? &grads.accum("bottleneck.ln_beta", 1, d) : nullptr;
    Matrix dln_in = layer_norm_rows_backward(dz, cache.ln_in, bn.ln_gamma,
                                             kBottleneckLnEps, dgamma, dbeta);
    dzprime = dln_in;  // residual branch
    Matrix* dwdec = sel.bottleneck
                        ? &grads.accum("bottleneck.w_dec", bn.w_dec.rows(), bn.w_dec.cols())
                        : nullptr;
    Matrix* dbdec = sel.bottleneck ? &grads.accum("bottleneck.b_dec", 1, d) : nullptr;
    Matrix denc_drop = linear_backward(dln_in, cache.enc_drop, bn.w_dec, dwdec, dbdec);
    if (!cache.enc_mask.empty())
      for (std::size_t i = 0; i < denc_drop.size(); ++i)
        denc_drop.data()[i] *= cache.enc_mask.data()[i];
    Matrix denc_pre(denc_drop.rows(), denc_drop.cols());
    for (std::size_t i = 0; i < denc_pre.size(); ++i)
      denc_pre.data()[i] = denc_drop.data()[i] * gelu_derivative(cache.enc_pre.data()[i]);
    Matrix* dwenc = sel.bottleneck
                        ? &grads.accum("bottleneck.w_enc", bn.w_enc.rows(), bn.w_enc.cols())
                        : nullptr;
    Matrix* dbenc =
        sel.bottleneck ? &grads.accum("bottleneck.b_enc", 1, bn.w_enc.rows()) : nullptr;
    dzprime.add_scaled(linear_backward(denc_pre, cache.zprime, bn.w_enc, dwenc, dbenc),
                       1.0);
  } else {
    dzprime = dz;
  }

  // Final layer norm of the backbone (frozen affine).
  Matrix dx = layer_norm_rows_backward(dzprime, cache.lnf_in, model.backbone.lnf_gamma,
                                       kBackboneLnEps, nullptr, nullptr);

  for (std::size_t l = model.backbone.layers.size(); l-- > 0;) {
    const BackboneLayer& bl = model.backbone.layers[l];
    const LayerLora& ll = model.lora[l];
    const LayerCache& lc = cache.layers[l];
    const std::string base = "lora." + std::to_string(l) + ".";

    auto lora_grads = [&](const char* target, const LoraAdapter& ad, Matrix** da,
                          Matrix** db) {
      if (sel.lora) {
        *da = &grads.accum(base + target + ".A", ad.a.rows(), ad.a.cols());
        *db = &grads.accum(base + target + ".B", ad.b.rows(), ad.b.cols());
      } else {
        *da = nullptr;
        *db = nullptr;
      }
    };

    // MLP block
    Matrix* da = nullptr;
    Matrix* db = nullptr;
    lora_grads("mlp_proj", ll.mlp_proj, &da, &db);
    Matrix dfc_act =
        lora_linear_backward(dx, lc.fc_act, bl.w_proj, ll.mlp_proj, lc.proj_xa, da, db);
    Matrix dfc_pre(dfc_act.rows(), dfc_act.cols());
    for (std::size_t i = 0; i < dfc_pre.size(); ++i)
      dfc_pre.data()[i] = dfc_act.data()[i] * gelu_derivative(lc.fc_pre.data()[i]);
    lora_grads("mlp_fc", ll.mlp_fc, &da, &db);
    Matrix dln2_out =
        lora_linear_backward(dfc_pre, lc.ln2_out, bl.w_fc, ll.mlp_fc, lc.fc_xa, da, db);
    Matrix ds2 = layer_norm_rows_backward(dln2_out, lc.ln2_in, bl.ln2_gamma,
                                          kBackboneLnEps, nullptr, nullptr);
    ds2.add_scaled(dx, 1.0);  // residual

    // Attention block
    lora_grads("attn_out", ll.attn_out, &da, &db);
    Matrix dctx = lora_linear_backward(ds2, lc.attn_ctx, bl.w_attn_out, ll.attn_out,
                                       lc.attn_out_xa, da, db);
    Matrix dqkv(seq, 3 * d);
    for (int h = 0; h < heads; ++h) {
      const std::size_t qo = static_cast<std::size_t>(h) * hd;
      const std::size_t ko = d + qo;
      const std::size_t vo = 2 * d + qo;
      const Matrix& probs = lc.attn.probs[static_cast<std::size_t>(h)];
      std::vector<double> dprobs;
      for (std::size_t t = 0; t < seq; ++t) {
        const double* dctxt = dctx.row(t) + qo;
        dprobs.assign(t + 1, 0.0);
        double inner = 0.0;
        for (std::size_t u = 0; u <= t; ++u) {
          const double* vrow = lc.qkv.row(u) + vo;
          double acc = 0.0;
          for (std::size_t i = 0; i < hd; ++i) acc += dctxt[i] * vrow[i];
          dprobs[u] = acc;
          inner += probs.at(t, u) * acc;
          double* dvrow = dqkv.row(u) + vo;
          const double p = probs.at(t, u);
          for (std::size_t i = 0; i < hd; ++i) dvrow[i] += p * dctxt[i];
        }
        for (std::size_t u = 0; u <= t; ++u) {
          const double dscore = probs.at(t, u) * (dprobs[u] - inner) * inv_sqrt_hd;
          const double* krow = lc.qkv.row(u) + ko;
          const double* qrow = lc.qkv.row(t) + qo;
          double* dqrow = dqkv.row(t) + qo;
          double* dkrow = dqkv.row(u) + ko;
          for (std::size_t i = 0; i < hd; ++i) {
            dqrow[i] += dscore * krow[i];
            dkrow[i] += dscore * qrow[i];
          }
        }
      }
    }
    lora_grads("qkv", ll.qkv, &da, &db);
    Matrix dln1_out =
        lora_linear_backward(dqkv, lc.ln1_out, bl.w_qkv, ll.qkv, lc.qkv_xa, da, db);
    Matrix ds1 = layer_norm_rows_backward(dln1_out, lc.ln1_in, bl.ln1_gamma,
                                          kBackboneLnEps, nullptr, nullptr);
    ds1.add_scaled(ds2, 1.0);  // residual
    dx = std::move(ds1);
  }
}

// ---------------------------------------------------------------------------
// Public sequence-level operations

Matrix backbone_forward(const ClientModel& model, const std::vector<int>& tokens) {
  SeqCache c = forward_sequence(model, tokens, tokens.size(), false, DropoutCtx{});
  return c.zprime;
}

namespace {

std::vector<int> concat_tokens(const std::vector<int>& prompt,
                               const std::vector<int>& response) {
  std::vector<int> all = prompt;
  all.insert(all.end(), response.begin(), response.end());
  return all;
}

}  // namespace

double sequence_logprob(const ClientModel& model, const std::vector<int>& prompt,
                        const std::vector<int>& response) {
  if (response.empty()) throw InputError("sequence_logprob: empty response");
  if (prompt.empty())
    throw InputError("sequence_logprob: empty prompt; prepend a BOS token");
  SeqCache c = forward_sequence(model, concat_tokens(prompt, response), prompt.size(),
                                true, DropoutCtx{});
  return logprob_from_cache(c);
}

double sequence_logprob(const ReferenceSnapshot& ref, const std::vector<int>& prompt,
                        const std::vector<int>& response) {
  return sequence_logprob(ref.model(), prompt, response);
}

double reward_score(const ClientModel& model, const std::vector<int>& prompt,
                    const std::vector<int>& response, DropoutCtx dropout) {
  SeqCache c = forward_sequence(model, concat_tokens(prompt, response), prompt.size(),
                                false, dropout);
  compute_reward(model, c, dropout);
  return c.reward;
}

// ---------------------------------------------------------------------------
// Checkpoints

namespace {

constexpr char kMagic[4] = {'F', 'P', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

template <typename T>
void write_pod(std::ofstream& out, const T& v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
void read_pod(std::ifstream& in, T& v) {
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
}

}  // namespace

void save_tensor_file(const std::string& path, const std::string& json_header,
                      const std::vector<std::pair<std::string, const Matrix*>>& tensors) {
  std::ofstream out(path, std::ios::binary);
  if (!out.is_open()) throw IoError("cannot open " + path + " for writing");
  out.write(kMagic, 4);
  write_pod(out, kVersion);
  const std::uint64_t jlen = json_header.size();
  write_pod(out, jlen);
  out.write(json_header.data(), static_cast<std::streamsize>(jlen));
  const std::uint32_t n = static_cast<std::uint32_t>(tensors.size());
  write_pod(out, n);
  for (const auto& [name, tensor] : tensors) {
    const std::uint32_t nlen = static_cast<std::uint32_t>(name.size());
    write_pod(out, nlen);
    out.write(name.data(), nlen);
    const std::uint64_t rows = tensor->rows();
    const std::uint64_t cols = tensor->cols();
    write_pod(out, rows);
    write_pod(out, cols);
    out.write(reinterpret_cast<const char*>(tensor->data()),
              static_cast<std::streamsize>(tensor->size() * sizeof(double)));
  }
  if (!out.good()) throw IoError("failed writing " + path);
}

TensorFile load_tensor_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in.is_open()) throw IoError("cannot open " + path);
  char magic[4];
  in.read(magic, 4);
  if (!in.good() || std::memcmp(magic, kMagic, 4) != 0)
    throw ParseError(path + ": not a tensor checkpoint");
  std::uint32_t version = 0;
  read_pod(in, version);
  if (version != kVersion)
    throw ParseError(path + ": unsupported checkpoint version " +
                     std::to_string(version));
  std::uint64_t jlen = 0;
  read_pod(in, jlen);
  TensorFile f;
  f.json_header.resize(jlen);
  in.read(f.json_header.data(), static_cast<std::streamsize>(jlen));
  std::uint32_t n = 0;
  read_pod(in, n);
  for (std::uint32_t i = 0; i < n; ++i) {
    std::uint32_t nlen = 0;
    read_pod(in, nlen);
    std::string name(nlen, '\0');
    in.read(name.data(), nlen);
    std::uint64_t rows = 0, cols = 0;
    read_pod(in, rows);
    read_pod(in, cols);
    Matrix m(rows, cols);
    in.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(m.size() * sizeof(double)));
    if (!in.good()) throw ParseError(path + ": truncated tensor data");
    f.tensors.emplace(std::move(name), std::move(m));
  }
  return f;
}

namespace {

json model_config_to_json(const ModelConfig& cfg) {
  json j;
  j["vocab_size"] = cfg.backbone.vocab_size;
  j["hidden_dim"] = cfg.backbone.hidden_dim;
  j["n_layers"] = cfg.backbone.n_layers;
  j["n_heads"] = cfg.backbone.n_heads;
  j["max_seq_len"] = cfg.backbone.max_seq_len;
  j["seed"] = cfg.backbone.seed;
  j["lora_rank"] = cfg.lora_rank;
  j["lora_alpha"] = cfg.lora_alpha;
  j["bottleneck_dim"] = cfg.bottleneck_dim;
  j["bottleneck_dropout"] = cfg.bottleneck_dropout;
  j["reward_hidden_dim"] = cfg.reward_hidden_dim;
  j["reward_dropout"] = cfg.reward_dropout;
  j["bottleneck_enabled"] = cfg.bottleneck_enabled;
  j["pool_include_prompt"] = cfg.pool_include_prompt;
  return j;
}

ModelConfig model_config_from_json(const json& j) {
  ModelConfig cfg;
  cfg.backbone.vocab_size = j.at("vocab_size").get<int>();
  cfg.backbone.hidden_dim = j.at("hidden_dim").get<int>();
  cfg.backbone.n_layers = j.at("n_layers").get<int>();
  cfg.backbone.n_heads = j.at("n_heads").get<int>();
  cfg.backbone.max_seq_len = j.at("max_seq_len").get<int>();
  cfg.backbone.seed = j.at("seed").get<std::uint64_t>();
  cfg.lora_rank = j.at("lora_rank").get<int>();
  cfg.lora_alpha = j.at("lora_alpha").get<double>();
  cfg.bottleneck_dim = j.at("bottleneck_dim").get<int>();
  cfg.bottleneck_dropout = j.at("bottleneck_dropout").get<double>();
  cfg.reward_hidden_dim = j.at("reward_hidden_dim").get<int>();
  cfg.reward_dropout = j.at("reward_dropout").get<double>();
  cfg.bottleneck_enabled = j.at("bottleneck_enabled").get<bool>();
  cfg.pool_include_prompt = j.at("pool_include_prompt").get<bool>();
  return cfg;
}

}  // namespace

void save_model_checkpoint(const std::string& path, const ClientModel& model,
                           const Vocabulary& vocab) {
  json header;
  header["kind"] = "client_model";
  header["model"] = model_config_to_json(model.cfg);
  header["vocab_words"] = vocab.words();
  auto& m = const_cast<ClientModel&>(model);
  std::vector<std::pair<std::string, const Matrix*>> tensors;
  for (const auto& p : collect_params(m, true)) tensors.emplace_back(p.name, p.value);
  save_tensor_file(path, header.dump(), tensors);
}

LoadedCheckpoint load_model_checkpoint(const std::string& path) {
  TensorFile f = load_tensor_file(path);
  json header = json::parse(f.json_header);
  if (header.value("kind", "") != "client_model")
    throw ParseError(path + ": not a client model checkpoint");
  LoadedCheckpoint out{
      init_client_model(model_config_from_json(header.at("model")), 0, 0),
      Vocabulary::from_words(header.at("vocab_words").get<std::vector<std::string>>())};
  for (const auto& p : collect_params(out.model, true)) {
    auto it = f.tensors.find(p.name);
    if (it == f.tensors.end())
      throw ParseError(path + ": checkpoint missing tensor " + p.name);
    if (!p.value->same_shape(it->second))
      throw ParseError(path + ": tensor " + p.name + " has unexpected shape");
    *p.value = it->second;
  }
  return out;
}

}  // namespace fedpdpo
