#include "normbench/transformer.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "normbench/errors.hpp"

namespace normbench {

std::string_view to_string(NormPlacement p) { return p == NormPlacement::pre ? "pre" : "post"; }

NormPlacement parse_norm_placement(std::string_view name) {
  if (name == "pre") return NormPlacement::pre;
  if (name == "post") return NormPlacement::post;
  throw ConfigError("unknown norm placement '" + std::string(name) + "' (expected pre or post)");
}

void ModelConfig::validate() const {
  if (num_layers == 0) throw ConfigError("model.num_layers must be positive");
  if (d_model < 2 || num_heads == 0 || d_model % num_heads != 0)
    throw ConfigError("model.d_model must be at least 2 and divisible by model.num_heads");
  if (ffn_dim == 0) throw ConfigError("model.ffn_dim must be positive");
  if (mixed_norm_count != kAllLayers && mixed_norm_count > num_layers)
    throw ConfigError("model.mixed_norm_count exceeds model.num_layers");
  if (vocab < 2 || num_classes < 2) throw ConfigError("vocabulary and class count must be at least 2");
  if (max_seq_len == 0) throw ConfigError("model.max_seq_len must be positive");
  if (!(momentum > 0.0 && momentum <= 1.0)) throw ConfigError("norm.momentum must lie in (0, 1]");
  if (!(eps > 0.0)) throw ConfigError("norm.eps must be positive");
  if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("model.dropout must lie in [0, 1)");
}

std::size_t ModelConfig::replaced_blocks() const { return std::min(mixed_norm_count, num_layers); }

void OptimConfig::validate() const {
  if (!(lr > 0.0)) throw ConfigError("optim.lr must be positive");
  if (warmup == 0) throw ConfigError("optim.warmup must be at least 1");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0)) throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(eps > 0.0)) throw ConfigError("optim.eps must be positive");
}

double inverse_sqrt_lr(double base, std::size_t warmup, std::size_t step) {
  if (step == 0 || warmup == 0) throw ConfigError("learning-rate schedule needs step >= 1 and warmup >= 1");
  const double t = static_cast<double>(step), w = static_cast<double>(warmup);
  return base * std::min(t / w, std::sqrt(w / t));
}

namespace {

template <typename T>
Tensor<T> uniform_tensor(Shape shape, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(u(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> normal_tensor(Shape shape, std::mt19937_64& rng) {
  std::normal_distribution<double> z;
  Tensor<T> t(std::move(shape));
  for (auto& v : t.storage()) v = static_cast<T>(z(rng));
  t.set_requires_grad(true);
  return t;
}

template <typename T>
Tensor<T> zeros(Shape shape) {
  Tensor<T> t(std::move(shape));
  t.set_requires_grad(true);
  return t;
}

std::string shape_str(const Shape& s) { return shape_string(s); }

// "blocks.3.attn.wq" -> "blocks.3"; "head.w" -> "head"
std::string layer_of(const std::string& name) {
  const auto first = name.find('.');
  if (first == std::string::npos) return name;
  if (name.rfind("blocks.", 0) == 0) {
    const auto second = name.find('.', first + 1);
    return name.substr(0, second);
  }
  return name.substr(0, first);
}

}  // namespace

template <typename T>
Transformer<T>::Transformer(ModelConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg_.d_model, f = cfg_.ffn_dim;
  const double in_d = 1.0 / std::sqrt(static_cast<double>(d)), in_f = 1.0 / std::sqrt(static_cast<double>(f));
  token_embed_ = normal_tensor<T>(Shape{cfg_.vocab, d}, rng);
  pos_embed_ = normal_tensor<T>(Shape{cfg_.max_seq_len, d}, rng);
  const T mom = static_cast<T>(cfg_.momentum), eps = static_cast<T>(cfg_.eps);
  for (std::size_t i = 0; i < cfg_.num_layers; ++i) {
    EncoderBlock<T> b;
    b.attn.wq = uniform_tensor<T>(Shape{d, d}, in_d, rng);
    b.attn.bq = zeros<T>(Shape{d});
    b.attn.wk = uniform_tensor<T>(Shape{d, d}, in_d, rng);
    b.attn.bk = zeros<T>(Shape{d});
    b.attn.wv = uniform_tensor<T>(Shape{d, d}, in_d, rng);
    b.attn.bv = zeros<T>(Shape{d});
    b.attn.wo = uniform_tensor<T>(Shape{d, d}, in_d, rng);
    b.attn.bo = zeros<T>(Shape{d});
    b.ffn.w1 = uniform_tensor<T>(Shape{d, f}, in_d, rng);
    b.ffn.b1 = zeros<T>(Shape{f});
    b.ffn.w2 = uniform_tensor<T>(Shape{f, d}, in_f, rng);
    b.ffn.b2 = zeros<T>(Shape{d});
    const NormKind kind = i < cfg_.replaced_blocks() ? cfg_.norm_kind : NormKind::ln;
    b.norm1 = NormLayer<T>(kind, d, mom, eps);
    b.norm2 = NormLayer<T>(kind, d, mom, eps);
    blocks_.push_back(std::move(b));
  }
  if (cfg_.placement == NormPlacement::pre) {
    const NormKind kind = cfg_.replaced_blocks() == cfg_.num_layers ? cfg_.norm_kind : NormKind::ln;
    final_norm_.emplace(kind, d, mom, eps);
  }
  head_w_ = uniform_tensor<T>(Shape{d, cfg_.num_classes}, in_d, rng);
  head_b_ = zeros<T>(Shape{cfg_.num_classes});
}

template <typename T>
Var<T> Transformer<T>::dropout(Var<T> x, std::mt19937_64* rng, const NormContext<T>& ctx) {
  if (cfg_.dropout <= 0.0 || rng == nullptr || ctx.mode != NormMode::train) return x;
  const double keep = 1.0 - cfg_.dropout;
  std::bernoulli_distribution b(keep);
  Tensor<T> m(x.shape());
  for (auto& v : m.storage()) v = b(*rng) ? static_cast<T>(1.0 / keep) : T(0);
  return mul(x, x.graph().constant(std::move(m)));
}

template <typename T>
Var<T> Transformer<T>::attention(ParamBinder<T>& p, AttentionParams<T>& a, Var<T> x, const SequenceBatch& batch) {
  const std::size_t B = batch.batch, L = batch.length, H = cfg_.num_heads, dh = cfg_.d_model / H;
  Graph<T>& g = x.graph();
  Var<T> q = add(matmul(x, p(a.wq)), p(a.bq));
  Var<T> k = add(matmul(x, p(a.wk)), p(a.bk));
  Var<T> v = add(matmul(x, p(a.wv)), p(a.bv));

  Tensor<T> bias(Shape{B, L, L});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < L; ++i)
      for (std::size_t j = 0; j < L; ++j)
        if (!batch.mask[b * L + j] || (cfg_.causal && j > i)) bias[(b * L + i) * L + j] = T(-1e9);
  Var<T> mask = g.constant(std::move(bias));
  const T scale_qk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));

  std::vector<Var<T>> heads;
  for (std::size_t h = 0; h < H; ++h) {
    Var<T> qh = reshape(slice_cols(q, h * dh, dh), Shape{B, L, dh});
    Var<T> kh = reshape(slice_cols(k, h * dh, dh), Shape{B, L, dh});
    Var<T> vh = reshape(slice_cols(v, h * dh, dh), Shape{B, L, dh});
    Var<T> scores = add(scale(bmm(qh, transpose_last2(kh)), scale_qk), mask);
    Var<T> probs = softmax(scores, 2);
    heads.push_back(reshape(bmm(probs, vh), Shape{B * L, dh}));
  }
  Var<T> cat = H == 1 ? heads.front() : concat_cols(std::span<const Var<T>>(heads));
  return add(matmul(cat, p(a.wo)), p(a.bo));
}

template <typename T>
Var<T> Transformer<T>::ffn(ParamBinder<T>& p, FfnParams<T>& f, Var<T> x) {
  Var<T> h = relu(add(matmul(x, p(f.w1)), p(f.b1)));
  return add(matmul(h, p(f.w2)), p(f.b2));
}

template <typename T>
Var<T> Transformer<T>::block_forward(ParamBinder<T>& p, std::size_t index, Var<T> x, const SequenceBatch& batch,
                                     NormContext<T>& ctx, std::mt19937_64* rng) {
  EncoderBlock<T>& b = blocks_.at(index);
  const std::span<const std::uint8_t> mask(batch.mask);
  if (cfg_.placement == NormPlacement::pre) {
    x = add(x, dropout(attention(p, b.attn, b.norm1.forward(p, x, mask, ctx), batch), rng, ctx));
    x = add(x, dropout(ffn(p, b.ffn, b.norm2.forward(p, x, mask, ctx)), rng, ctx));
  } else {
    x = b.norm1.forward(p, add(x, dropout(attention(p, b.attn, x, batch), rng, ctx)), mask, ctx);
    x = b.norm2.forward(p, add(x, dropout(ffn(p, b.ffn, x), rng, ctx)), mask, ctx);
  }
  return x;
}

template <typename T>
Var<T> Transformer<T>::forward(ParamBinder<T>& p, const SequenceBatch& batch, NormContext<T>& ctx,
                               std::vector<Tensor<T>>* block_inputs, std::mt19937_64* rng) {
  const std::size_t N = batch.rows();
  if (N == 0 || batch.tokens.size() != N || batch.mask.size() != N) throw ShapeError("malformed batch");
  if (batch.length > cfg_.max_seq_len)
    throw ShapeError("sequence length " + std::to_string(batch.length) + " exceeds model.max_seq_len " +
                     std::to_string(cfg_.max_seq_len));
  std::vector<std::size_t> tok(N), pos(N);
  for (std::size_t i = 0; i < N; ++i) {
    if (batch.tokens[i] < 0 || static_cast<std::size_t>(batch.tokens[i]) >= cfg_.vocab)
      throw ShapeError("token " + std::to_string(batch.tokens[i]) + " outside the vocabulary");
    tok[i] = static_cast<std::size_t>(batch.tokens[i]);
    pos[i] = i % batch.length;
  }
  Var<T> x = add(gather_rows(p(token_embed_), std::span<const std::size_t>(tok)),
                 gather_rows(p(pos_embed_), std::span<const std::size_t>(pos)));
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (block_inputs) block_inputs->push_back(x.value());
    x = block_forward(p, i, x, batch, ctx, rng);
  }
  if (final_norm_) x = final_norm_->forward(p, x, std::span<const std::uint8_t>(batch.mask), ctx);
  return add(matmul(x, p(head_w_)), p(head_b_));
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> Transformer<T>::named_parameters() {
  std::vector<std::pair<std::string, Tensor<T>*>> out{{"embed.token", &token_embed_}, {"embed.position", &pos_embed_}};
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    auto& b = blocks_[i];
    out.insert(out.end(), {{pre + "attn.wq", &b.attn.wq},
                           {pre + "attn.bq", &b.attn.bq},
                           {pre + "attn.wk", &b.attn.wk},
                           {pre + "attn.bk", &b.attn.bk},
                           {pre + "attn.wv", &b.attn.wv},
                           {pre + "attn.bv", &b.attn.bv},
                           {pre + "attn.wo", &b.attn.wo},
                           {pre + "attn.bo", &b.attn.bo},
                           {pre + "ffn.w1", &b.ffn.w1},
                           {pre + "ffn.b1", &b.ffn.b1},
                           {pre + "ffn.w2", &b.ffn.w2},
                           {pre + "ffn.b2", &b.ffn.b2}});
  }
  for (auto& [name, layer] : norm_layers()) {
    out.emplace_back(name + ".gamma", &layer->gamma());
    out.emplace_back(name + ".beta", &layer->beta());
  }
  out.emplace_back("head.w", &head_w_);
  out.emplace_back("head.b", &head_b_);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, NormLayer<T>*>> Transformer<T>::norm_layers() {
  std::vector<std::pair<std::string, NormLayer<T>*>> out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const std::string pre = "blocks." + std::to_string(i) + ".";
    out.emplace_back(pre + "norm1", &blocks_[i].norm1);
    out.emplace_back(pre + "norm2", &blocks_[i].norm2);
  }
  if (final_norm_) out.emplace_back("final_norm", &*final_norm_);
  return out;
}

template <typename T>
std::vector<std::pair<std::string, NormLayer<T>*>> Transformer<T>::batch_norm_layers() {
  auto all = norm_layers();
  std::erase_if(all, [](const auto& e) { return !e.second->batch_statistics(); });
  return all;
}

template <typename T>
std::vector<LayerStats> Transformer<T>::batch_statistics(const SequenceBatch& batch) {
  Graph<T> g;
  ParamBinder<T> p(g, true);
  std::vector<BatchStatTrace<T>> traces;
  NormContext<T> ctx{NormMode::frozen_batch, brn_limits, &traces};
  forward(p, batch, ctx);
  std::vector<LayerStats> out;
  for (const auto& t : traces) {
    LayerStats s;
    for (T v : t.batch_mean.value().data()) s.mean.push_back(static_cast<double>(v));
    for (T v : t.batch_var.value().data()) s.var.push_back(static_cast<double>(v));
    out.push_back(std::move(s));
  }
  return out;
}

template <typename T>
void Transformer<T>::load_snapshot(const PopulationSnapshot& snap) {
  auto layers = batch_norm_layers();
  if (layers.size() != snap.layers.size())
    throw ShapeError("snapshot has " + std::to_string(snap.layers.size()) + " layers, model has " +
                     std::to_string(layers.size()) + " batch-statistics layers");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    NormState<T>& st = layers[i].second->state();
    if (snap.layers[i].mean.size() != st.features()) throw ShapeError("snapshot width mismatch at " + layers[i].first);
    for (std::size_t j = 0; j < st.features(); ++j) {
      st.running_mean[j] = static_cast<T>(snap.layers[i].mean[j]);
      st.running_var[j] = static_cast<T>(snap.layers[i].var[j]);
    }
    st.loaded = true;
  }
}

template <typename T>
PopulationSnapshot Transformer<T>::running_snapshot() const {
  PopulationSnapshot snap;
  snap.provenance = StatsProvenance::ema;
  auto self = const_cast<Transformer<T>*>(this);
  for (auto& [name, layer] : self->batch_norm_layers()) {
    const auto& st = layer->state();
    snap.layers.push_back(LayerStats{std::vector<double>(st.running_mean.begin(), st.running_mean.end()),
                                     std::vector<double>(st.running_var.begin(), st.running_var.end())});
  }
  return snap;
}

template <typename T>
Checkpoint Transformer<T>::to_checkpoint(StatsProvenance provenance) const {
  auto self = const_cast<Transformer<T>*>(this);
  Checkpoint ck;
  for (auto& [name, t] : self->named_parameters()) ck.add(name, *t);
  for (auto& [name, layer] : self->norm_layers()) {
    const auto& st = layer->state();
    ck.add_scalar(name + ".eps", static_cast<double>(st.eps));
    if (!layer->batch_statistics()) continue;
    ck.add(name + ".running_mean", Tensor<T>::vector(st.running_mean));
    ck.add(name + ".running_var", Tensor<T>::vector(st.running_var));
    ck.add_scalar(name + ".alpha", static_cast<double>(st.momentum));
    ck.add_scalar(name + ".update_count", static_cast<double>(st.update_count));
  }
  ck.add_scalar("meta.stats_provenance", static_cast<double>(static_cast<int>(provenance)));
  return ck;
}

template <typename T>
StatsProvenance Transformer<T>::load_checkpoint(const Checkpoint& ck) {
  const Checkpoint mine = to_checkpoint(StatsProvenance::ema);
  for (const auto& a : ck.arrays())
    if (!mine.find(a.name))
      throw CheckpointError("shape mismatch: checkpoint layer '" + layer_of(a.name) + "' (array '" + a.name +
                            "') does not exist in this model");
  for (const auto& want : mine.arrays()) {
    const NamedArray* have = ck.find(want.name);
    if (!have)
      throw CheckpointError("checkpoint lacks array '" + want.name + "' of layer '" + layer_of(want.name) + "'");
    if (have->shape != want.shape)
      throw CheckpointError("shape mismatch in layer '" + layer_of(want.name) + "': '" + want.name + "' is " +
                            shape_str(have->shape) + " in the checkpoint but " + shape_str(want.shape) +
                            " in the model");
  }
  for (auto& [name, t] : named_parameters()) {
    const auto& a = ck.at(name);
    for (std::size_t i = 0; i < t->numel(); ++i) (*t)[i] = static_cast<T>(a.data[i]);
  }
  for (auto& [name, layer] : norm_layers()) {
    auto& st = layer->state();
    st.eps = static_cast<T>(ck.at(name + ".eps").data[0]);
    if (!layer->batch_statistics()) continue;
    const auto& m = ck.at(name + ".running_mean").data;
    const auto& v = ck.at(name + ".running_var").data;
    for (std::size_t j = 0; j < st.features(); ++j) {
      st.running_mean[j] = static_cast<T>(m[j]);
      st.running_var[j] = static_cast<T>(v[j]);
    }
    st.momentum = static_cast<T>(ck.at(name + ".alpha").data[0]);
    st.update_count = static_cast<std::uint64_t>(std::llround(ck.at(name + ".update_count").data[0]));
    st.loaded = true;
  }
  const int prov = static_cast<int>(std::lround(ck.at("meta.stats_provenance").data[0]));
  if (prov < 0 || prov > 2) throw CheckpointError("unknown statistics provenance tag");
  return static_cast<StatsProvenance>(prov);
}

template <typename T>
LossTerms<T> training_objective(Transformer<T>& model, ParamBinder<T>& params, const SequenceBatch& batch,
                                NormContext<T>& ctx, const RegularizerConfig& reg,
                                std::vector<Tensor<T>>* block_inputs, std::mt19937_64* dropout_rng) {
  std::vector<BatchStatTrace<T>> traces;
  auto* outer = ctx.traces;
  ctx.traces = &traces;
  Var<T> logits = model.forward(params, batch, ctx, block_inputs, dropout_rng);
  ctx.traces = outer;
  if (outer) outer->insert(outer->end(), traces.begin(), traces.end());

  std::vector<T> weights(batch.rows());
  for (std::size_t i = 0; i < weights.size(); ++i) weights[i] = batch.mask[i] ? T(1) : T(0);
  LossTerms<T> out;
  out.ce = cross_entropy(logits, std::span<const int>(batch.targets), std::span<const T>(weights));
  out.total = out.ce;
  if (reg.active() && !traces.empty()) {
    out.penalty = rbn_penalty(params.graph(), std::span<const BatchStatTrace<T>>(traces), reg);
    out.total = add(out.ce, out.penalty);
  }
  return out;
}

template <typename T>
void Adam<T>::update(const std::vector<Tensor<T>*>& params, const std::vector<Tensor<T>>& grads, double lr) {
  if (params.size() != grads.size()) throw ShapeError("parameter and gradient lists differ in length");
  if (m_.empty()) {
    for (auto* p : params) {
      m_.emplace_back(p->numel(), 0.0);
      v_.emplace_back(p->numel(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw StateError("optimizer was built for a different parameter list");
  ++t_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_)), c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Tensor<T>& p = *params[k];
    const Tensor<T>& g = grads[k];
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < p.numel(); ++i) {
      const double gi = static_cast<double>(g[i]);
      m[i] = b1 * m[i] + (1.0 - b1) * gi;
      v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
      p[i] = static_cast<T>(static_cast<double>(p[i]) - lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + cfg_.eps));
    }
    if (!p.all_finite()) throw NumericError("optimizer produced a non-finite parameter");
  }
}

template <typename T>
Trainer<T>::Trainer(Transformer<T>& model, TrainerConfig cfg, std::uint64_t seed)
    : model_(&model), cfg_(cfg), adam_(cfg.optim), dropout_rng_(seed ^ 0x9e3779b97f4a7c15ULL) {
  cfg_.optim.validate();
  cfg_.reg.validate();
}

template <typename T>
StepResult Trainer<T>::train_step(const SequenceBatch& batch, std::vector<Tensor<T>>* block_inputs) {
  StepResult r;
  r.lr = inverse_sqrt_lr(cfg_.optim.lr, cfg_.optim.warmup, step_ + 1);
  model_->brn_limits = cfg_.brn.at<T>(step_);
  Graph<T> g;
  ParamBinder<T> p(g);
  NormContext<T> ctx{NormMode::train, model_->brn_limits, nullptr};
  LossTerms<T> terms = training_objective(*model_, p, batch, ctx, cfg_.reg, block_inputs, &dropout_rng_);
  r.ce = static_cast<double>(terms.ce.value().item());
  r.penalty = terms.penalty.valid() ? static_cast<double>(terms.penalty.value().item()) : 0.0;
  r.total = static_cast<double>(terms.total.value().item());
  if (!std::isfinite(r.total)) throw NumericError("non-finite training loss at step " + std::to_string(step_ + 1));
  ++step_;
  if (!cfg_.update_parameters) return r;
  g.backward(terms.total);
  std::vector<Tensor<T>*> params;
  std::vector<Tensor<T>> grads;
  for (auto& [name, t] : model_->named_parameters()) {
    params.push_back(t);
    grads.push_back(g.grad(p(*t)));
  }
  adam_.update(params, grads, r.lr);
  return r;
}

template <typename T>
EvalResult evaluate(Transformer<T>& model, const Dataset& data, EvalMode mode, std::size_t batch_size) {
  if (data.empty()) throw ShapeError("empty evaluation dataset");
  const std::size_t classes = model.config().num_classes;
  std::vector<double> seq_loss;
  double correct = 0.0;
  std::size_t tokens = 0;
  for (const auto& batch : batches_in_order(data, batch_size)) {
    Graph<T> g;
    ParamBinder<T> p(g, true);
    NormContext<T> ctx;
    ctx.mode = mode == EvalMode::population ? NormMode::inference : NormMode::frozen_batch;
    ctx.brn = mode == EvalMode::population ? model.brn_limits : BrnLimits<T>{};
    const Tensor<T>& z = model.forward(p, batch, ctx).value();
    for (std::size_t b = 0; b < batch.batch; ++b) {
      double loss = 0.0;
      for (std::size_t t = 0; t < batch.length; ++t) {
        const std::size_t row = b * batch.length + t;
        if (!batch.mask[row]) continue;
        const T* zr = z.data().data() + row * classes;
        double mx = static_cast<double>(zr[0]);
        std::size_t arg = 0;
        for (std::size_t c = 1; c < classes; ++c)
          if (static_cast<double>(zr[c]) > mx) mx = static_cast<double>(zr[c]), arg = c;
        double s = 0.0;
        for (std::size_t c = 0; c < classes; ++c) s += std::exp(static_cast<double>(zr[c]) - mx);
        loss += mx + std::log(s) - static_cast<double>(zr[batch.targets[row]]);
        correct += arg == static_cast<std::size_t>(batch.targets[row]) ? 1.0 : 0.0;
        ++tokens;
      }
      seq_loss.push_back(loss);
    }
  }
  std::sort(seq_loss.begin(), seq_loss.end());
  double total = 0.0;
  for (double l : seq_loss) total += l;
  EvalResult r;
  r.tokens = tokens;
  r.loss = total / static_cast<double>(tokens);
  r.accuracy = correct / static_cast<double>(tokens);
  return r;
}

template class Transformer<float>;
template class Transformer<double>;
template class Adam<float>;
template class Adam<double>;
template class Trainer<float>;
template class Trainer<double>;

template LossTerms<float> training_objective(Transformer<float>&, ParamBinder<float>&, const SequenceBatch&,
                                             NormContext<float>&, const RegularizerConfig&, std::vector<Tensor<float>>*,
                                             std::mt19937_64*);
template LossTerms<double> training_objective(Transformer<double>&, ParamBinder<double>&, const SequenceBatch&,
                                              NormContext<double>&, const RegularizerConfig&,
                                              std::vector<Tensor<double>>*, std::mt19937_64*);
template EvalResult evaluate(Transformer<float>&, const Dataset&, EvalMode, std::size_t);
template EvalResult evaluate(Transformer<double>&, const Dataset&, EvalMode, std::size_t);

}  // namespace normbench
