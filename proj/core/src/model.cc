#include "ranktuner/model.h"

#include <cmath>
#include <fstream>
#include <limits>

#include "ranktuner/error.h"
#include "ranktuner/random.h"

namespace ranktuner {
namespace {

constexpr double kNormEps = 1e-5;
constexpr int kCheckpointVersion = 1;
constexpr const char* kCheckpointFormat = "ranktuner-checkpoint";

// The classifier head starts small so an untrained model sits at ln(n_classes).
constexpr double kHeadInitScale = 0.3;

Matrix uniform_init(std::size_t rows, std::size_t cols, std::size_t fan_in,
                    std::uint64_t seed, const std::string& name, double scale = 1.0) {
  Rng rng(seed, "init/" + name);
  const double bound = scale / std::sqrt(static_cast<double>(fan_in));
  Matrix m(rows, cols);
  for (double& v : m.data()) v = rng.uniform(-bound, bound);
  return m;
}

double positional(std::size_t pos, std::size_t i, std::size_t d) {
  const double exponent = static_cast<double>(i - i % 2) / static_cast<double>(d);
  const double angle = static_cast<double>(pos) / std::pow(10000.0, exponent);
  return i % 2 == 0 ? std::sin(angle) : std::cos(angle);
}

// ---- building blocks -------------------------------------------------------

struct NormCache {
  Matrix xhat;
  std::vector<double> inv_rms;
};

Matrix rms_norm(const Matrix& x, const Matrix& scale, NormCache& cache) {
  const std::size_t n = x.rows(), d = x.cols();
  cache.xhat = Matrix(n, d);
  cache.inv_rms.assign(n, 0.0);
  Matrix out(n, d);
  for (std::size_t r = 0; r < n; ++r) {
    double ss = 0.0;
    for (double v : x.row(r)) ss += v * v;
    const double inv = 1.0 / std::sqrt(ss / static_cast<double>(d) + kNormEps);
    cache.inv_rms[r] = inv;
    for (std::size_t c = 0; c < d; ++c) {
      cache.xhat(r, c) = x(r, c) * inv;
      out(r, c) = cache.xhat(r, c) * scale(0, c);
    }
  }
  return out;
}

// Returns dL/dx; accumulates dL/dscale into dscale when non-null.
Matrix rms_norm_backward(const Matrix& dy, const Matrix& scale, const NormCache& cache,
                         Matrix* dscale) {
  const std::size_t n = dy.rows(), d = dy.cols();
  Matrix dx(n, d);
  std::vector<double> dxhat(d);
  for (std::size_t r = 0; r < n; ++r) {
    double dot = 0.0;
    for (std::size_t c = 0; c < d; ++c) {
      dxhat[c] = dy(r, c) * scale(0, c);
      dot += dxhat[c] * cache.xhat(r, c);
      if (dscale) (*dscale)(0, c) += dy(r, c) * cache.xhat(r, c);
    }
    dot /= static_cast<double>(d);
    for (std::size_t c = 0; c < d; ++c) {
      dx(r, c) = cache.inv_rms[r] * (dxhat[c] - cache.xhat(r, c) * dot);
    }
  }
  return dx;
}

struct LinearCache {
  Matrix xa;  // x * a when an adapter is bound
};

// y = x W + (x A) B
Matrix linear(const Matrix& x, const Matrix& w, const LowRank* adapter,
              LinearCache& cache) {
  Matrix y(x.rows(), w.cols());
  y.map().noalias() = x.map() * w.map();
  if (adapter) {
    cache.xa = Matrix(x.rows(), adapter->a.cols());
    cache.xa.map().noalias() = x.map() * adapter->a.map();
    y.map().noalias() += cache.xa.map() * adapter->b.map();
  }
  return y;
}

Matrix linear_backward(const Matrix& x, const Matrix& w, const LowRank* adapter,
                       const LinearCache& cache, const Matrix& dy, Matrix* dw,
                       LowRank* dadapter) {
  Matrix dx(x.rows(), x.cols());
  dx.map().noalias() = dy.map() * w.map().transpose();
  if (dw) {
    *dw = Matrix(w.rows(), w.cols());
    dw->map().noalias() = x.map().transpose() * dy.map();
  }
  if (adapter) {
    Matrix t(dy.rows(), adapter->b.rows());
    t.map().noalias() = dy.map() * adapter->b.map().transpose();
    dx.map().noalias() += t.map() * adapter->a.map().transpose();
    if (dadapter) {
      dadapter->a = Matrix(adapter->a.rows(), adapter->a.cols());
      dadapter->a.map().noalias() = x.map().transpose() * t.map();
      dadapter->b = Matrix(adapter->b.rows(), adapter->b.cols());
      dadapter->b.map().noalias() = cache.xa.map().transpose() * dy.map();
    }
  }
  return dx;
}

struct BlockCache {
  NormCache norm1;
  Matrix h1;
  LinearCache lq, lk, lv, lo;
  Matrix q, k, v;
  std::vector<Matrix> probs;  // per (sequence, head), T x T
  Matrix ctx;
  NormCache norm2;
  Matrix h2;
  LinearCache lup, ldown;
  Matrix pre_act;
  Matrix act;
};

struct Tape {
  std::size_t batch = 0;
  std::size_t seq_len = 0;
  std::vector<int> tokens;  // flattened, batch * seq_len
  std::vector<BlockCache> blocks;
  NormCache final_norm;
  Matrix pooled;
  Matrix logits;
  Matrix probs;  // softmax(logits)
  double loss = 0.0;
};

const LowRank* find_adapter(const AdapterTable* adapters, const std::string& name) {
  if (!adapters) return nullptr;
  auto it = adapters->find(name);
  return it == adapters->end() ? nullptr : &it->second;
}

void validate_batch(const ModelGraph& model, std::span<const Example> batch) {
  if (batch.empty()) throw InputError("forward: empty batch");
  const std::size_t len = batch.front().tokens.size();
  if (len == 0) throw InputError("forward: empty sequence");
  const auto& spec = model.spec();
  for (const auto& ex : batch) {
    if (ex.tokens.size() != len) throw InputError("forward: ragged batch");
    for (int t : ex.tokens) {
      if (t < 0 || static_cast<std::size_t>(t) >= spec.vocab_size) {
        throw InputError("forward: token id " + std::to_string(t) +
                         " outside vocabulary of size " +
                         std::to_string(spec.vocab_size));
      }
    }
    if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= spec.n_classes) {
      throw InputError("forward: label " + std::to_string(ex.label) + " out of range");
    }
  }
}

void attention_forward(const Matrix& q, const Matrix& k, const Matrix& v,
                       std::size_t batch, std::size_t seq_len, std::size_t heads,
                       std::size_t dh, BlockCache& cache) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = static_cast<Eigen::Index>(seq_len);
  const auto D = static_cast<Eigen::Index>(dh);
  cache.ctx = Matrix(q.rows(), q.cols());
  cache.probs.assign(batch * heads, Matrix(seq_len, seq_len));
  for (std::size_t s = 0; s < batch; ++s) {
    const auto r0 = static_cast<Eigen::Index>(s * seq_len);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      Matrix& p = cache.probs[s * heads + h];
      p.map().noalias() =
          q.map().block(r0, c0, T, D) * k.map().block(r0, c0, T, D).transpose();
      for (Eigen::Index i = 0; i < T; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < T; ++j) {
          p(i, j) *= scale;
          mx = std::max(mx, p(i, j));
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < T; ++j) {
          p(i, j) = std::exp(p(i, j) - mx);
          z += p(i, j);
        }
        for (Eigen::Index j = 0; j < T; ++j) p(i, j) /= z;
      }
      cache.ctx.map().block(r0, c0, T, D).noalias() =
          p.map() * v.map().block(r0, c0, T, D);
    }
  }
}

void attention_backward(const Matrix& dctx, const BlockCache& cache,
                        std::size_t batch, std::size_t seq_len, std::size_t heads,
                        std::size_t dh, Matrix& dq, Matrix& dk, Matrix& dv) {
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  const auto T = static_cast<Eigen::Index>(seq_len);
  const auto D = static_cast<Eigen::Index>(dh);
  dq = Matrix(cache.q.rows(), cache.q.cols());
  dk = Matrix(cache.k.rows(), cache.k.cols());
  dv = Matrix(cache.v.rows(), cache.v.cols());
  EigenRowMajor dp(T, T);
  for (std::size_t s = 0; s < batch; ++s) {
    const auto r0 = static_cast<Eigen::Index>(s * seq_len);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto c0 = static_cast<Eigen::Index>(h * dh);
      const auto p = cache.probs[s * heads + h].map();
      const auto dO = dctx.map().block(r0, c0, T, D);
      dv.map().block(r0, c0, T, D).noalias() = p.transpose() * dO;
      dp.noalias() = dO * cache.v.map().block(r0, c0, T, D).transpose();
      // Softmax Jacobian, then the 1/sqrt(dh) scale.
      for (Eigen::Index i = 0; i < T; ++i) {
        double dot = 0.0;
        for (Eigen::Index j = 0; j < T; ++j) dot += dp(i, j) * p(i, j);
        for (Eigen::Index j = 0; j < T; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot) * scale;
      }
      dq.map().block(r0, c0, T, D).noalias() =
          dp * cache.k.map().block(r0, c0, T, D);
      dk.map().block(r0, c0, T, D).noalias() =
          dp.transpose() * cache.q.map().block(r0, c0, T, D);
    }
  }
}

Tape run_forward(const ModelGraph& model, std::span<const Example> batch,
                 const AdapterTable* adapters) {
  validate_batch(model, batch);
  const auto& spec = model.spec();
  Tape tape;
  tape.batch = batch.size();
  tape.seq_len = batch.front().tokens.size();
  const std::size_t n = tape.batch * tape.seq_len;
  const std::size_t d = spec.d_model;
  const std::size_t dh = model.head_dim();

  Matrix x(n, d);
  const Matrix& embed = model.param(param::kEmbed);
  tape.tokens.reserve(n);
  for (std::size_t s = 0; s < tape.batch; ++s) {
    for (std::size_t t = 0; t < tape.seq_len; ++t) {
      const int tok = batch[s].tokens[t];
      tape.tokens.push_back(tok);
      const std::size_t r = s * tape.seq_len + t;
      for (std::size_t c = 0; c < d; ++c) {
        x(r, c) = embed(static_cast<std::size_t>(tok), c) + positional(t, c, d);
      }
    }
  }

  tape.blocks.resize(model.n_blocks());
  for (std::size_t b = 0; b < model.n_blocks(); ++b) {
    BlockCache& bc = tape.blocks[b];
    const auto name = [b](const char* leaf) { return param::block(b, leaf); };
    const std::size_t heads = model.blocks()[b].heads;

    bc.h1 = rms_norm(x, model.param(name("attn_norm")), bc.norm1);
    bc.q = linear(bc.h1, model.param(name("wq")), find_adapter(adapters, name("wq")), bc.lq);
    bc.k = linear(bc.h1, model.param(name("wk")), find_adapter(adapters, name("wk")), bc.lk);
    bc.v = linear(bc.h1, model.param(name("wv")), find_adapter(adapters, name("wv")), bc.lv);
    attention_forward(bc.q, bc.k, bc.v, tape.batch, tape.seq_len, heads, dh, bc);
    x.map() += linear(bc.ctx, model.param(name("wo")), find_adapter(adapters, name("wo")),
                      bc.lo)
                   .map();

    bc.h2 = rms_norm(x, model.param(name("ffn_norm")), bc.norm2);
    bc.pre_act = linear(bc.h2, model.param(name("ffn_up")),
                        find_adapter(adapters, name("ffn_up")), bc.lup);
    const Matrix& bias = model.param(name("ffn_up_bias"));
    bc.act = Matrix(n, bc.pre_act.cols());
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < bc.pre_act.cols(); ++c) {
        bc.pre_act(r, c) += bias(0, c);
        bc.act(r, c) = bc.pre_act(r, c) > 0.0 ? bc.pre_act(r, c) : 0.0;
      }
    }
    x.map() += linear(bc.act, model.param(name("ffn_down")),
                      find_adapter(adapters, name("ffn_down")), bc.ldown)
                   .map();
  }

  Matrix hf = rms_norm(x, model.param(param::kFinalNorm), tape.final_norm);
  tape.pooled = Matrix(tape.batch, d);
  const double inv_t = 1.0 / static_cast<double>(tape.seq_len);
  for (std::size_t s = 0; s < tape.batch; ++s) {
    for (std::size_t t = 0; t < tape.seq_len; ++t) {
      for (std::size_t c = 0; c < d; ++c) {
        tape.pooled(s, c) += hf(s * tape.seq_len + t, c) * inv_t;
      }
    }
  }
  tape.logits = Matrix(tape.batch, spec.n_classes);
  tape.logits.map().noalias() = tape.pooled.map() * model.param(param::kHead).map();
  const Matrix& head_bias = model.param(param::kHeadBias);
  tape.probs = Matrix(tape.batch, spec.n_classes);
  double loss = 0.0;
  for (std::size_t s = 0; s < tape.batch; ++s) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      tape.logits(s, c) += head_bias(0, c);
      mx = std::max(mx, tape.logits(s, c));
    }
    double z = 0.0;
    for (std::size_t c = 0; c < spec.n_classes; ++c) z += std::exp(tape.logits(s, c) - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
      tape.probs(s, c) = std::exp(tape.logits(s, c) - lse);
    }
    loss += lse - tape.logits(s, static_cast<std::size_t>(batch[s].label));
  }
  tape.loss = loss / static_cast<double>(tape.batch);
  return tape;
}

Gradients run_backward(const ModelGraph& model, std::span<const Example> batch,
                       const AdapterTable* adapters, const Tape& tape,
                       BackwardOptions options) {
  const auto& spec = model.spec();
  const std::size_t n = tape.batch * tape.seq_len;
  const std::size_t d = spec.d_model;
  const std::size_t dh = model.head_dim();
  const bool base = options.base_params;
  Gradients g;

  auto grad_slot = [&](const std::string& name) -> Matrix* {
    if (!base) return nullptr;
    const Matrix& p = model.param(name);
    auto [it, inserted] = g.params.try_emplace(name, p.rows(), p.cols());
    return &it->second;
  };
  auto adapter_slot = [&](const std::string& name) -> LowRank* {
    if (!find_adapter(adapters, name)) return nullptr;
    return &g.adapters[name];
  };

  // Loss -> logits.
  Matrix dlogits = tape.probs;
  const double inv_b = 1.0 / static_cast<double>(tape.batch);
  for (std::size_t s = 0; s < tape.batch; ++s) {
    dlogits(s, static_cast<std::size_t>(batch[s].label)) -= 1.0;
  }
  dlogits.map() *= inv_b;

  if (Matrix* dh_w = grad_slot(param::kHead)) {
    dh_w->map().noalias() = tape.pooled.map().transpose() * dlogits.map();
  }
  if (Matrix* dh_b = grad_slot(param::kHeadBias)) {
    dh_b->map() = dlogits.map().colwise().sum();
  }
  Matrix dpooled(tape.batch, d);
  dpooled.map().noalias() = dlogits.map() * model.param(param::kHead).map().transpose();

  Matrix dhf(n, d);
  const double inv_t = 1.0 / static_cast<double>(tape.seq_len);
  for (std::size_t s = 0; s < tape.batch; ++s) {
    for (std::size_t t = 0; t < tape.seq_len; ++t) {
      for (std::size_t c = 0; c < d; ++c) dhf(s * tape.seq_len + t, c) = dpooled(s, c) * inv_t;
    }
  }
  Matrix dx = rms_norm_backward(dhf, model.param(param::kFinalNorm), tape.final_norm,
                                grad_slot(param::kFinalNorm));

  for (std::size_t bi = model.n_blocks(); bi-- > 0;) {
    const BlockCache& bc = tape.blocks[bi];
    const auto name = [bi](const char* leaf) { return param::block(bi, leaf); };
    const std::size_t heads = model.blocks()[bi].heads;

    // FFN branch.
    Matrix dact = linear_backward(bc.act, model.param(name("ffn_down")),
                                  find_adapter(adapters, name("ffn_down")), bc.ldown, dx,
                                  grad_slot(name("ffn_down")), adapter_slot(name("ffn_down")));
    for (std::size_t i = 0; i < dact.size(); ++i) {
      if (bc.pre_act.data()[i] <= 0.0) dact.data()[i] = 0.0;
    }
    if (Matrix* db = grad_slot(name("ffn_up_bias"))) {
      db->map() = dact.map().colwise().sum();
    }
    Matrix dh2 = linear_backward(bc.h2, model.param(name("ffn_up")),
                                 find_adapter(adapters, name("ffn_up")), bc.lup, dact,
                                 grad_slot(name("ffn_up")), adapter_slot(name("ffn_up")));
    dx.map() += rms_norm_backward(dh2, model.param(name("ffn_norm")), bc.norm2,
                                  grad_slot(name("ffn_norm")))
                    .map();

    // Attention branch.
    Matrix dctx = linear_backward(bc.ctx, model.param(name("wo")),
                                  find_adapter(adapters, name("wo")), bc.lo, dx,
                                  grad_slot(name("wo")), adapter_slot(name("wo")));
    Matrix dq, dk, dv;
    attention_backward(dctx, bc, tape.batch, tape.seq_len, heads, dh, dq, dk, dv);
    Matrix dh1 = linear_backward(bc.h1, model.param(name("wq")),
                                 find_adapter(adapters, name("wq")), bc.lq, dq,
                                 grad_slot(name("wq")), adapter_slot(name("wq")));
    dh1.map() += linear_backward(bc.h1, model.param(name("wk")),
                                 find_adapter(adapters, name("wk")), bc.lk, dk,
                                 grad_slot(name("wk")), adapter_slot(name("wk")))
                     .map();
    dh1.map() += linear_backward(bc.h1, model.param(name("wv")),
                                 find_adapter(adapters, name("wv")), bc.lv, dv,
                                 grad_slot(name("wv")), adapter_slot(name("wv")))
                     .map();
    dx.map() += rms_norm_backward(dh1, model.param(name("attn_norm")), bc.norm1,
                                  grad_slot(name("attn_norm")))
                    .map();
  }

  if (Matrix* de = grad_slot(param::kEmbed)) {
    for (std::size_t r = 0; r < n; ++r) {
      auto dst = de->row(static_cast<std::size_t>(tape.tokens[r]));
      auto src = dx.row(r);
      for (std::size_t c = 0; c < d; ++c) dst[c] += src[c];
    }
  }
  return g;
}

}  // namespace

namespace param {
std::string block(std::size_t b, std::string_view leaf) {
  return "block" + std::to_string(b) + "." + std::string(leaf);
}
}  // namespace param

void ModelSpec::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_blocks == 0 || n_heads == 0 || d_ff == 0 ||
      n_classes == 0) {
    throw ConfigError("model spec: every dimension must be >= 1");
  }
  if (d_model % n_heads != 0) {
    throw ConfigError("model spec: d_model " + std::to_string(d_model) +
                      " is not divisible by n_heads " + std::to_string(n_heads));
  }
}

ModelGraph::ModelGraph(ModelSpec spec, std::uint64_t seed, std::vector<BlockMeta> blocks,
                       ParamTable params)
    : spec_(spec), seed_(seed), blocks_(std::move(blocks)), params_(std::move(params)) {
  spec_.validate();
  check_consistency();
}

const Matrix& ModelGraph::param(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InputError("unknown parameter \"" + name + "\"");
  return it->second;
}

Matrix& ModelGraph::mutable_param(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InputError("unknown parameter \"" + name + "\"");
  return it->second;
}

std::size_t ModelGraph::param_count() const {
  std::size_t n = 0;
  for (const auto& [_, m] : params_) n += m.size();
  return n;
}

void ModelGraph::check_consistency() const {
  const std::size_t d = spec_.d_model;
  auto expect = [this](const std::string& name, std::size_t rows, std::size_t cols) {
    const Matrix& m = param(name);
    if (m.rows() != rows || m.cols() != cols) {
      throw InputError("parameter " + name + " has shape " + std::to_string(m.rows()) +
                       "x" + std::to_string(m.cols()) + ", expected " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    }
    if (!m.all_finite()) throw InputError("parameter " + name + " is not finite");
  };
  if (blocks_.size() != spec_.n_blocks) throw InputError("block metadata length mismatch");
  expect(param::kEmbed, spec_.vocab_size, d);
  expect(param::kFinalNorm, 1, d);
  expect(param::kHead, d, spec_.n_classes);
  expect(param::kHeadBias, 1, spec_.n_classes);
  std::size_t expected_params = 4;
  for (std::size_t b = 0; b < blocks_.size(); ++b) {
    const auto& meta = blocks_[b];
    if (meta.heads == 0 || meta.heads > spec_.n_heads) {
      throw InputError("block " + std::to_string(b) + " has invalid head count");
    }
    if (meta.ffn_channels == 0) {
      throw InputError("block " + std::to_string(b) + " has no FFN channels");
    }
    const std::size_t hd = meta.heads * head_dim();
    expect(param::block(b, "attn_norm"), 1, d);
    expect(param::block(b, "wq"), d, hd);
    expect(param::block(b, "wk"), d, hd);
    expect(param::block(b, "wv"), d, hd);
    expect(param::block(b, "wo"), hd, d);
    expect(param::block(b, "ffn_norm"), 1, d);
    expect(param::block(b, "ffn_up"), d, meta.ffn_channels);
    expect(param::block(b, "ffn_up_bias"), 1, meta.ffn_channels);
    expect(param::block(b, "ffn_down"), meta.ffn_channels, d);
    expected_params += 9;
  }
  if (params_.size() != expected_params) {
    throw InputError("parameter table has unexpected entries");
  }
}

ModelGraph build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  const std::size_t d = spec.d_model;
  ParamTable p;
  auto add_uniform = [&](const std::string& name, std::size_t rows, std::size_t cols,
                         std::size_t fan_in) {
    p.emplace(name, uniform_init(rows, cols, fan_in, seed, name));
  };
  add_uniform(param::kEmbed, spec.vocab_size, d, 1);  // one-hot input: fan_in 1
  p.emplace(param::kFinalNorm, Matrix(1, d, 1.0));
  p.emplace(param::kHead, uniform_init(d, spec.n_classes, d, seed, param::kHead, kHeadInitScale));
  p.emplace(param::kHeadBias, Matrix(1, spec.n_classes, 0.0));
  std::vector<BlockMeta> blocks(spec.n_blocks, BlockMeta{spec.n_heads, spec.d_ff});
  for (std::size_t b = 0; b < spec.n_blocks; ++b) {
    p.emplace(param::block(b, "attn_norm"), Matrix(1, d, 1.0));
    add_uniform(param::block(b, "wq"), d, d, d);
    add_uniform(param::block(b, "wk"), d, d, d);
    add_uniform(param::block(b, "wv"), d, d, d);
    add_uniform(param::block(b, "wo"), d, d, d);
    p.emplace(param::block(b, "ffn_norm"), Matrix(1, d, 1.0));
    add_uniform(param::block(b, "ffn_up"), d, spec.d_ff, d);
    p.emplace(param::block(b, "ffn_up_bias"), Matrix(1, spec.d_ff, 0.0));
    add_uniform(param::block(b, "ffn_down"), spec.d_ff, d, spec.d_ff);
  }
  return ModelGraph(spec, seed, std::move(blocks), std::move(p));
}

ForwardResult forward(const ModelGraph& model, std::span<const Example> batch,
                      const AdapterTable* adapters) {
  Tape tape = run_forward(model, batch, adapters);
  return {std::move(tape.logits), tape.loss};
}

Gradients backward(const ModelGraph& model, std::span<const Example> batch,
                   const AdapterTable* adapters, BackwardOptions options) {
  return forward_backward(model, batch, adapters, options, nullptr);
}

Gradients forward_backward(const ModelGraph& model, std::span<const Example> batch,
                           const AdapterTable* adapters, BackwardOptions options,
                           double* loss) {
  const Tape tape = run_forward(model, batch, adapters);
  if (loss) *loss = tape.loss;
  return run_backward(model, batch, adapters, tape, options);
}

void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"vocab_size", s.vocab_size}, {"d_model", s.d_model},
                     {"n_blocks", s.n_blocks},     {"n_heads", s.n_heads},
                     {"d_ff", s.d_ff},             {"n_classes", s.n_classes}};
}

void from_json(const nlohmann::json& j, ModelSpec& s) {
  j.at("vocab_size").get_to(s.vocab_size);
  j.at("d_model").get_to(s.d_model);
  j.at("n_blocks").get_to(s.n_blocks);
  j.at("n_heads").get_to(s.n_heads);
  j.at("d_ff").get_to(s.d_ff);
  j.at("n_classes").get_to(s.n_classes);
}

nlohmann::json checkpoint_to_json(const ModelGraph& model) {
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : model.blocks()) {
    blocks.push_back({{"heads", b.heads}, {"ffn_channels", b.ffn_channels}});
  }
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, m] : model.params()) params[name] = m;
  return {{"format", kCheckpointFormat},
          {"version", kCheckpointVersion},
          {"spec", model.spec()},
          {"seed", model.seed()},
          {"blocks", std::move(blocks)},
          {"params", std::move(params)}};
}

ModelGraph checkpoint_from_json(const nlohmann::json& j) {
  if (j.value("format", "") != kCheckpointFormat) {
    throw InputError("not a ranktuner checkpoint");
  }
  if (j.at("version").get<int>() != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + j.at("version").dump());
  }
  std::vector<BlockMeta> blocks;
  for (const auto& b : j.at("blocks")) {
    blocks.push_back({b.at("heads").get<std::size_t>(),
                      b.at("ffn_channels").get<std::size_t>()});
  }
  ParamTable params;
  for (const auto& [name, m] : j.at("params").items()) {
    params.emplace(name, m.get<Matrix>());
  }
  return ModelGraph(j.at("spec").get<ModelSpec>(), j.at("seed").get<std::uint64_t>(),
                    std::move(blocks), std::move(params));
}

void save_checkpoint(const ModelGraph& model, const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out << checkpoint_to_json(model).dump() << '\n';
}

ModelGraph load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot read checkpoint " + path.string());
  return checkpoint_from_json(nlohmann::json::parse(in));
}

}  // namespace ranktuner
