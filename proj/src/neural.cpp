#include "phrase_lm/neural.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>
#include <random>

#include "phrase_lm/error.hpp"
#include "phrase_lm/hash.hpp"

namespace phrase_lm::nn {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

namespace {

constexpr double kLnEps = 1e-5;
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

void fill_normal(Mat& m, std::mt19937_64& rng, double stddev) {
  std::normal_distribution<double> dist(0.0, stddev);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = dist(rng);
}

Mat constant(std::size_t rows, std::size_t cols, double v) {
  return Mat::Constant(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols), v);
}

/// Row-wise layer norm. Writes normalized values and reciprocal std-devs.
Mat layer_norm(const Mat& x, const Mat& g, const Mat& b, Mat& xhat, Vec& rstd) {
  const auto cols = static_cast<double>(x.cols());
  xhat.resize(x.rows(), x.cols());
  rstd.resize(x.rows());
  for (Eigen::Index r = 0; r < x.rows(); ++r) {
    const double mu = x.row(r).sum() / cols;
    const auto centered = (x.row(r).array() - mu).eval();
    const double var = centered.square().sum() / cols;
    rstd(r) = 1.0 / std::sqrt(var + kLnEps);
    xhat.row(r) = centered * rstd(r);
  }
  return (xhat.array().rowwise() * g.row(0).array()).rowwise() + b.row(0).array();
}

Mat layer_norm_backward(const Mat& dy, const Mat& xhat, const Vec& rstd, const Mat& g, Mat& dg, Mat& db) {
  dg.row(0) += (dy.array() * xhat.array()).colwise().sum().matrix();
  db.row(0) += dy.colwise().sum();
  const Mat dxhat = (dy.array().rowwise() * g.row(0).array()).matrix();
  Mat dx(dy.rows(), dy.cols());
  const auto cols = static_cast<double>(dy.cols());
  for (Eigen::Index r = 0; r < dy.rows(); ++r) {
    const double mean_d = dxhat.row(r).sum() / cols;
    const double mean_dx = dxhat.row(r).dot(xhat.row(r)) / cols;
    dx.row(r) = rstd(r) * (dxhat.row(r).array() - mean_d - xhat.row(r).array() * mean_dx).matrix();
  }
  return dx;
}

double gelu(double x) { return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + 0.044715 * x * x * x))); }

double gelu_grad(double x) {
  const double t = std::tanh(kGeluC * (x + 0.044715 * x * x * x));
  return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * kGeluC * (1.0 + 3.0 * 0.044715 * x * x);
}

void softmax_rows(Mat& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp().matrix();
    s.row(r) /= s.row(r).sum();
  }
}

Mat embed(const EncoderWeights& w, std::span<const TokenId> tokens, std::size_t first_pos = 0) {
  const auto D = w.tok_embed.cols();
  Mat x(static_cast<Eigen::Index>(tokens.size()), D);
  Eigen::RowVectorXd pos(D);
  for (std::size_t t = 0; t < tokens.size(); ++t) {
    if (tokens[t] >= static_cast<std::size_t>(w.tok_embed.rows())) {
      throw Error("token id " + std::to_string(tokens[t]) + " outside model vocabulary");
    }
    position_encoding(first_pos + t, pos);
    x.row(static_cast<Eigen::Index>(t)) = w.tok_embed.row(tokens[t]) + pos;
  }
  return x;
}

template <typename F>
void visit_encoder(const EncoderWeights& w, F&& f) {
  const_cast<EncoderWeights&>(w).visit("", [&](const std::string& n, Mat& m) { f(n, static_cast<const Mat&>(m)); });
}

void write_bytes(std::ostream& out, const void* p, std::size_t n) {
  out.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}
template <typename T>
void write_pod(std::ostream& out, T v) {
  write_bytes(out, &v, sizeof v);
}
template <typename T>
T read_pod(std::istream& in) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  if (!in) throw Error("truncated checkpoint");
  return v;
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size < 2 || d_model < 1 || index_dim < 1 || layers < 1 || heads < 1 || ffn_mult < 1) {
    throw ConfigError("model dimensions must be positive and vocab_size >= 2");
  }
  if (d_model % heads != 0) throw ConfigError("d_model must be divisible by heads");
  if (max_prefix_len < 2) throw ConfigError("max_prefix_len must be at least 2");
}

void position_encoding(std::size_t t, Eigen::Ref<Eigen::RowVectorXd> out) {
  const auto D = out.size();
  for (Eigen::Index i = 0; i < D; i += 2) {
    const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(D));
    out(i) = std::sin(static_cast<double>(t) * freq);
    if (i + 1 < D) out(i + 1) = std::cos(static_cast<double>(t) * freq);
  }
}

TrainableParams TrainableParams::zeros_like() const {
  TrainableParams z = *this;
  z.set_zero();
  return z;
}

void TrainableParams::set_zero() {
  visit([](const std::string&, Mat& m) { m.setZero(); });
}

void TrainableParams::add_scaled(const TrainableParams& other, double scale) {
  std::vector<const Mat*> src;
  other.visit([&](const std::string&, const Mat& m) { src.push_back(&m); });
  std::size_t i = 0;
  visit([&](const std::string&, Mat& m) { m += scale * *src[i++]; });
}

std::size_t TrainableParams::parameter_count() const {
  std::size_t n = 0;
  visit([&](const std::string&, const Mat& m) { n += static_cast<std::size_t>(m.size()); });
  return n;
}

// ---------------------------------------------------------------------------
// encoder stack

Mat encoder_forward(const EncoderWeights& w, std::size_t heads, std::span<const TokenId> tokens, bool causal,
                    EncoderCache* cache) {
  const auto T = static_cast<Eigen::Index>(tokens.size());
  const auto D = w.tok_embed.cols();
  const auto dh = D / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat x = embed(w, tokens);
  if (cache) {
    cache->tokens.assign(tokens.begin(), tokens.end());
    cache->causal = causal;
    cache->layers.assign(w.layers.size(), {});
  }
  EncoderCache::Layer scratch;
  for (std::size_t l = 0; l < w.layers.size(); ++l) {
    const auto& L = w.layers[l];
    auto& c = cache ? cache->layers[l] : scratch;
    c.x_in = x;
    c.a = layer_norm(x, L.ln1_g, L.ln1_b, c.xhat1, c.rstd1);
    c.qkv = (c.a * L.w_qkv).rowwise() + L.b_qkv.row(0);
    c.att_out.setZero(T, D);
    c.probs.resize(heads);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const auto Q = c.qkv.middleCols(off, dh);
      const auto K = c.qkv.middleCols(D + off, dh);
      const auto V = c.qkv.middleCols(2 * D + off, dh);
      Mat s = (Q * K.transpose()) * scale;
      if (causal) {
        for (Eigen::Index i = 0; i < T; ++i) {
          for (Eigen::Index j = i + 1; j < T; ++j) s(i, j) = -std::numeric_limits<double>::infinity();
        }
      }
      softmax_rows(s);
      c.att_out.middleCols(off, dh) = s * V;
      c.probs[h] = std::move(s);
    }
    c.x_mid = x + ((c.att_out * L.w_o).rowwise() + L.b_o.row(0));
    c.m = layer_norm(c.x_mid, L.ln2_g, L.ln2_b, c.xhat2, c.rstd2);
    c.ff_pre = (c.m * L.w_ff1).rowwise() + L.b_ff1.row(0);
    c.ff_act = c.ff_pre.unaryExpr(&gelu);
    x = c.x_mid + ((c.ff_act * L.w_ff2).rowwise() + L.b_ff2.row(0));
  }
  Mat xhat;
  Vec rstd;
  Mat hidden = layer_norm(x, w.lnf_g, w.lnf_b, xhat, rstd);
  if (cache) {
    cache->x_final = std::move(x);
    cache->xhat_f = std::move(xhat);
    cache->rstd_f = std::move(rstd);
    cache->hidden = hidden;
  }
  return hidden;
}

void encoder_backward(const EncoderWeights& w, std::size_t heads, const EncoderCache& cache, const Mat& d_hidden,
                      EncoderWeights& g) {
  const auto T = static_cast<Eigen::Index>(cache.tokens.size());
  const auto D = w.tok_embed.cols();
  const auto dh = D / static_cast<Eigen::Index>(heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

  Mat dx = layer_norm_backward(d_hidden, cache.xhat_f, cache.rstd_f, w.lnf_g, g.lnf_g, g.lnf_b);
  for (std::size_t li = w.layers.size(); li-- > 0;) {
    const auto& L = w.layers[li];
    auto& G = g.layers[li];
    const auto& c = cache.layers[li];

    G.w_ff2.noalias() += c.ff_act.transpose() * dx;
    G.b_ff2.row(0) += dx.colwise().sum();
    Mat d_pre = dx * L.w_ff2.transpose();
    d_pre.array() *= c.ff_pre.unaryExpr(&gelu_grad).array();
    G.w_ff1.noalias() += c.m.transpose() * d_pre;
    G.b_ff1.row(0) += d_pre.colwise().sum();
    const Mat d_m = d_pre * L.w_ff1.transpose();
    const Mat dx_mid = dx + layer_norm_backward(d_m, c.xhat2, c.rstd2, L.ln2_g, G.ln2_g, G.ln2_b);

    G.w_o.noalias() += c.att_out.transpose() * dx_mid;
    G.b_o.row(0) += dx_mid.colwise().sum();
    const Mat d_att = dx_mid * L.w_o.transpose();
    Mat d_qkv = Mat::Zero(T, 3 * D);
    for (std::size_t h = 0; h < heads; ++h) {
      const auto off = static_cast<Eigen::Index>(h) * dh;
      const auto Q = c.qkv.middleCols(off, dh);
      const auto K = c.qkv.middleCols(D + off, dh);
      const auto V = c.qkv.middleCols(2 * D + off, dh);
      const Mat& P = c.probs[h];
      const auto dO = d_att.middleCols(off, dh);
      const Mat dP = dO * V.transpose();
      d_qkv.middleCols(2 * D + off, dh).noalias() = P.transpose() * dO;
      Mat dS = P.array() * (dP.array().colwise() - (dP.array() * P.array()).rowwise().sum());
      dS *= scale;
      d_qkv.middleCols(off, dh).noalias() = dS * K;
      d_qkv.middleCols(D + off, dh).noalias() = dS.transpose() * Q;
    }
    G.w_qkv.noalias() += c.a.transpose() * d_qkv;
    G.b_qkv.row(0) += d_qkv.colwise().sum();
    const Mat d_a = d_qkv * L.w_qkv.transpose();
    dx = dx_mid + layer_norm_backward(d_a, c.xhat1, c.rstd1, L.ln1_g, G.ln1_g, G.ln1_b);
  }
  for (Eigen::Index t = 0; t < T; ++t) g.tok_embed.row(cache.tokens[static_cast<std::size_t>(t)]) += dx.row(t);
}

// ---------------------------------------------------------------------------
// model

void Model::init_encoder(EncoderWeights& w, std::size_t proj_in, std::uint64_t seed, double proj_std) const {
  std::mt19937_64 rng(splitmix64(seed));
  const std::size_t D = cfg_.d_model;
  const std::size_t F = cfg_.d_model * cfg_.ffn_mult;
  const double wstd = 1.0 / std::sqrt(static_cast<double>(D));
  w.tok_embed = constant(cfg_.vocab_size, D, 0.0);
  fill_normal(w.tok_embed, rng, 1.0);
  w.layers.assign(cfg_.layers, {});
  for (auto& L : w.layers) {
    L.ln1_g = constant(1, D, 1.0);
    L.ln1_b = constant(1, D, 0.0);
    L.w_qkv = constant(D, 3 * D, 0.0);
    fill_normal(L.w_qkv, rng, wstd);
    L.b_qkv = constant(1, 3 * D, 0.0);
    L.w_o = constant(D, D, 0.0);
    fill_normal(L.w_o, rng, wstd);
    L.b_o = constant(1, D, 0.0);
    L.ln2_g = constant(1, D, 1.0);
    L.ln2_b = constant(1, D, 0.0);
    L.w_ff1 = constant(D, F, 0.0);
    fill_normal(L.w_ff1, rng, wstd);
    L.b_ff1 = constant(1, F, 0.0);
    L.w_ff2 = constant(F, D, 0.0);
    fill_normal(L.w_ff2, rng, 1.0 / std::sqrt(static_cast<double>(F)));
    L.b_ff2 = constant(1, D, 0.0);
  }
  w.lnf_g = constant(1, D, 1.0);
  w.lnf_b = constant(1, D, 0.0);
  w.proj = constant(proj_in, cfg_.index_dim, 0.0);
  fill_normal(w.proj, rng, proj_std);
}

Model::Model(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const double D = static_cast<double>(cfg_.d_model);
  const double d = static_cast<double>(cfg_.index_dim);
  // Query entries ~ unit scale; phrase and token entries ~ 1/sqrt(d), so
  // initial dot products are O(1).
  init_encoder(trainable_.prefix, cfg_.d_model, cfg_.seed * 3 + 1, 1.0 / std::sqrt(D));
  init_encoder(phrase_, 2 * cfg_.d_model, cfg_.seed * 3 + 2, 1.0 / std::sqrt(2.0 * D * d));
  std::mt19937_64 rng(splitmix64(cfg_.seed * 3 + 3));
  trainable_.token_embed = constant(cfg_.vocab_size, cfg_.index_dim, 0.0);
  fill_normal(trainable_.token_embed, rng, 1.0 / std::sqrt(d));
  quantize();
}

void Model::quantize() {
  if (cfg_.precision != Precision::kFloat32) return;
  auto round = [](const std::string&, Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
  };
  trainable_.visit(round);
  phrase_.visit("", round);
}

Mat Model::prefix_forward(std::span<const TokenId> seq, EncoderCache& cache) const {
  const Mat hidden = encoder_forward(trainable_.prefix, cfg_.heads, seq, /*causal=*/true, &cache);
  return hidden * trainable_.prefix.proj;
}

void Model::prefix_backward(const EncoderCache& cache, const Mat& d_query, TrainableParams& grads) const {
  grads.prefix.proj.noalias() += cache.hidden.transpose() * d_query;
  const Mat d_hidden = d_query * trainable_.prefix.proj.transpose();
  encoder_backward(trainable_.prefix, cfg_.heads, cache, d_hidden, grads.prefix);
}

Mat Model::prefix_hidden(std::span<const TokenId> seq) const {
  return encoder_forward(trainable_.prefix, cfg_.heads, seq, true, nullptr);
}

Vec Model::encode_prefix(std::span<const TokenId> tokens) const {
  const std::size_t keep = std::min(tokens.size(), cfg_.max_prefix_len - 1);
  std::vector<TokenId> seq;
  seq.reserve(keep + 1);
  seq.push_back(TokenVocab::kBos);
  seq.insert(seq.end(), tokens.end() - static_cast<std::ptrdiff_t>(keep), tokens.end());
  const Mat hidden = encoder_forward(trainable_.prefix, cfg_.heads, seq, true, nullptr);
  return (hidden.bottomRows(1) * trainable_.prefix.proj).transpose();
}

Mat Model::encode_prefixes(std::span<const TokenId> tokens) const {
  const std::size_t n = tokens.size();
  const std::size_t head = std::min(n, cfg_.max_prefix_len - 1);
  std::vector<TokenId> seq;
  seq.push_back(TokenVocab::kBos);
  seq.insert(seq.end(), tokens.begin(), tokens.begin() + static_cast<std::ptrdiff_t>(head));
  const Mat hidden = encoder_forward(trainable_.prefix, cfg_.heads, seq, true, nullptr);
  Mat out(static_cast<Eigen::Index>(n + 1), static_cast<Eigen::Index>(cfg_.index_dim));
  out.topRows(static_cast<Eigen::Index>(head + 1)) = hidden * trainable_.prefix.proj;
  for (std::size_t t = head + 1; t <= n; ++t) {
    out.row(static_cast<Eigen::Index>(t)) = encode_prefix(tokens.first(t)).transpose();
  }
  return out;
}

PrefixState Model::start_prefix(std::span<const TokenId> tokens) const {
  const std::size_t keep = std::min(tokens.size(), cfg_.max_prefix_len - 1);
  PrefixState st;
  st.window.push_back(TokenVocab::kBos);
  st.window.insert(st.window.end(), tokens.end() - static_cast<std::ptrdiff_t>(keep), tokens.end());
  EncoderCache cache;
  const Mat hidden = encoder_forward(trainable_.prefix, cfg_.heads, st.window, true, &cache);
  const auto D = static_cast<Eigen::Index>(cfg_.d_model);
  for (const auto& c : cache.layers) {
    st.keys.push_back(c.qkv.middleCols(D, D));
    st.values.push_back(c.qkv.middleCols(2 * D, D));
  }
  st.query = (hidden.bottomRows(1) * trainable_.prefix.proj).transpose();
  return st;
}

void Model::extend_prefix(PrefixState& st, std::span<const TokenId> tokens) const {
  const auto& w = trainable_.prefix;
  const auto D = static_cast<Eigen::Index>(cfg_.d_model);
  const auto dh = D / static_cast<Eigen::Index>(cfg_.heads);
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    if (st.window.size() + 1 > cfg_.max_prefix_len) {
      std::vector<TokenId> all(st.window.begin() + 1, st.window.end());
      all.insert(all.end(), tokens.begin() + static_cast<std::ptrdiff_t>(i), tokens.end());
      st = start_prefix(all);
      return;
    }
    const TokenId tok = tokens[i];
    const std::size_t pos = st.window.size();
    Mat x = embed(w, std::span<const TokenId>(&tok, 1), pos);
    for (std::size_t l = 0; l < w.layers.size(); ++l) {
      const auto& L = w.layers[l];
      Mat xhat;
      Vec rstd;
      const Mat a = layer_norm(x, L.ln1_g, L.ln1_b, xhat, rstd);
      const Mat qkv = a * L.w_qkv + L.b_qkv;
      auto& K = st.keys[l];
      auto& V = st.values[l];
      K.conservativeResize(K.rows() + 1, Eigen::NoChange);
      V.conservativeResize(V.rows() + 1, Eigen::NoChange);
      K.bottomRows(1) = qkv.middleCols(D, D);
      V.bottomRows(1) = qkv.middleCols(2 * D, D);
      Mat att(1, D);
      for (std::size_t h = 0; h < cfg_.heads; ++h) {
        const auto off = static_cast<Eigen::Index>(h) * dh;
        Mat s = (qkv.middleCols(off, dh) * K.middleCols(off, dh).transpose()) * scale;
        softmax_rows(s);
        att.middleCols(off, dh) = s * V.middleCols(off, dh);
      }
      const Mat x_mid = x + att * L.w_o + L.b_o;
      const Mat m = layer_norm(x_mid, L.ln2_g, L.ln2_b, xhat, rstd);
      const Mat act = (m * L.w_ff1 + L.b_ff1).unaryExpr(&gelu);
      x = x_mid + act * L.w_ff2 + L.b_ff2;
    }
    Mat xhat;
    Vec rstd;
    const Mat hidden = layer_norm(x, w.lnf_g, w.lnf_b, xhat, rstd);
    st.query = (hidden * w.proj).transpose();
    st.window.push_back(tok);
  }
}

Mat Model::encode_block(std::span<const TokenId> block_tokens) const {
  return encoder_forward(phrase_, cfg_.heads, block_tokens, /*causal=*/false, nullptr);
}

Vec Model::phrase_from_states(const Mat& states, std::size_t start, std::size_t end) const {
  if (start >= end || end > static_cast<std::size_t>(states.rows())) throw Error("phrase span outside block");
  const auto D = states.cols();
  Eigen::RowVectorXd cat(2 * D);
  cat.head(D) = states.row(static_cast<Eigen::Index>(start));
  cat.tail(D) = states.row(static_cast<Eigen::Index>(end - 1));
  return (cat * phrase_.proj).transpose();
}

Vec Model::encode_phrase(const Document& doc, std::size_t start, std::size_t end) const {
  if (start >= end || end > doc.tokens.size()) {
    throw Error("invalid phrase span (" + std::to_string(start) + "," + std::to_string(end) + ") in " + doc.id);
  }
  const auto& block = doc.blocks[doc.block_of(start)];
  if (!block.contains(start, end)) {
    throw Error("phrase span (" + std::to_string(start) + "," + std::to_string(end) +
                ") crosses a block boundary in " + doc.id);
  }
  const std::span<const TokenId> toks(doc.tokens.data() + block.start, block.size());
  return phrase_from_states(encode_block(toks), start - block.start, end - block.start);
}

std::uint64_t Model::phrase_encoder_checksum() const {
  Fnv1a h;
  visit_encoder(phrase_, [&](const std::string& name, const Mat& m) {
    h.update(name);
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  });
  return h.digest();
}

std::uint64_t Model::checksum() const {
  Fnv1a h;
  const auto add = [&](const std::string& name, const Mat& m) {
    h.update(name);
    h.update(m.data(), static_cast<std::size_t>(m.size()) * sizeof(double));
  };
  trainable_.visit(add);
  visit_encoder(phrase_, add);
  return h.digest();
}

// ---------------------------------------------------------------------------
// checkpoint: "PLMC", u32 version, u32 precision, u64 x 8 config fields, then
// tensors (prefix encoder, phrase encoder, token embeddings) row-major.

namespace {
constexpr std::uint32_t kCheckpointVersion = 1;
}

void Model::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write checkpoint " + path.string());
  write_bytes(out, "PLMC", 4);
  write_pod<std::uint32_t>(out, kCheckpointVersion);
  write_pod<std::uint32_t>(out, static_cast<std::uint32_t>(cfg_.precision));
  for (std::uint64_t v : {std::uint64_t{cfg_.vocab_size}, std::uint64_t{cfg_.d_model}, std::uint64_t{cfg_.index_dim},
                          std::uint64_t{cfg_.layers}, std::uint64_t{cfg_.heads}, std::uint64_t{cfg_.ffn_mult},
                          std::uint64_t{cfg_.max_prefix_len}, cfg_.seed}) {
    write_pod(out, v);
  }
  const bool f64 = cfg_.precision == Precision::kFloat64;
  const auto dump = [&](const std::string&, const Mat& m) {
    for (Eigen::Index i = 0; i < m.size(); ++i) {
      if (f64) write_pod<double>(out, m.data()[i]);
      else write_pod<float>(out, static_cast<float>(m.data()[i]));
    }
  };
  visit_encoder(trainable_.prefix, dump);
  visit_encoder(phrase_, dump);
  dump("token_embed", trainable_.token_embed);
  if (!out) throw Error("failed writing checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot read checkpoint " + path.string());
  char magic[4];
  in.read(magic, 4);
  if (!in || std::memcmp(magic, "PLMC", 4) != 0) throw Error("not a checkpoint: " + path.string());
  if (read_pod<std::uint32_t>(in) != kCheckpointVersion) throw Error("unsupported checkpoint version");
  ModelConfig cfg;
  const auto prec = read_pod<std::uint32_t>(in);
  if (prec > 1) throw Error("bad precision flag in checkpoint");
  cfg.precision = static_cast<Precision>(prec);
  cfg.vocab_size = read_pod<std::uint64_t>(in);
  cfg.d_model = read_pod<std::uint64_t>(in);
  cfg.index_dim = read_pod<std::uint64_t>(in);
  cfg.layers = read_pod<std::uint64_t>(in);
  cfg.heads = read_pod<std::uint64_t>(in);
  cfg.ffn_mult = read_pod<std::uint64_t>(in);
  cfg.max_prefix_len = read_pod<std::uint64_t>(in);
  cfg.seed = read_pod<std::uint64_t>(in);
  Model m(cfg);  // allocates shapes; values overwritten below
  const bool f64 = cfg.precision == Precision::kFloat64;
  const auto fill = [&](const std::string&, Mat& t) {
    for (Eigen::Index i = 0; i < t.size(); ++i) {
      t.data()[i] = f64 ? read_pod<double>(in) : static_cast<double>(read_pod<float>(in));
    }
  };
  m.trainable_.prefix.visit("", fill);
  m.phrase_.visit("", fill);
  fill("token_embed", m.trainable_.token_embed);
  if (in.peek() != std::char_traits<char>::eof()) throw Error("trailing bytes in checkpoint " + path.string());
  return m;
}

// ---------------------------------------------------------------------------

GradCheckResult grad_check(const std::vector<ParamGrad>& params, const std::function<double()>& loss,
                           const GradCheckOptions& opts) {
  GradCheckResult res;
  std::mt19937_64 rng(opts.seed);
  const double base = loss();
  if (!std::isfinite(base)) throw Error("grad_check: non-finite loss");
  for (const auto& p : params) {
    const auto n = static_cast<std::size_t>(p.value->size());
    std::vector<std::size_t> coords;
    if (n <= opts.coords_per_tensor) {
      for (std::size_t i = 0; i < n; ++i) coords.push_back(i);
    } else {
      std::uniform_int_distribution<std::size_t> pick(0, n - 1);
      for (std::size_t i = 0; i < opts.coords_per_tensor; ++i) coords.push_back(pick(rng));
    }
    for (std::size_t i : coords) {
      double& v = p.value->data()[i];
      const double saved = v;
      v = saved + opts.step;
      const double up = loss();
      v = saved - opts.step;
      const double down = loss();
      v = saved;
      if (!std::isfinite(up) || !std::isfinite(down)) throw Error("grad_check: non-finite loss");
      const double numeric = (up - down) / (2.0 * opts.step);
      const double analytic = p.grad->data()[i];
      const double denom = std::max({std::abs(numeric), std::abs(analytic), opts.abs_floor});
      const double rel = std::abs(numeric - analytic) / denom;
      ++res.checked;
      if (rel > res.max_rel_error) {
        res.max_rel_error = rel;
        res.worst_tensor = p.name;
      }
    }
  }
  return res;
}

}  // namespace phrase_lm::nn
