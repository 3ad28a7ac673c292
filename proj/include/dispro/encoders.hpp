// SPDX-License-Identifier: Apache-2.0
//
// Trainable feature transforms: per-modality adapters into the encoder width,
// a hash tokenizer, and a small bidirectional post-norm transformer encoder
// shared by both training stages.
#pragma once

#include "dispro/autodiff.hpp"
#include "dispro/core.hpp"
#include "dispro/optim.hpp"

#include <cctype>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dispro {

struct EncoderConfig {
  int model_dim = 32;
  int n_layers = 2;
  int n_heads = 2;
  int mlp_ratio = 4;
  int max_seq_len = 512;
  double layernorm_eps = 1e-5;
  int vocab_size = 4096;
  bool trainable_encoder = false;
};

inline void validate(const EncoderConfig& c) {
  require(c.model_dim > 0 && c.n_layers > 0 && c.n_heads > 0 && c.mlp_ratio > 0 &&
              c.max_seq_len > 0 && c.vocab_size > 0 && c.layernorm_eps > 0,
          ErrorCode::InvalidArgument, "encoder config: sizes must be positive");
  require(c.model_dim % c.n_heads == 0, ErrorCode::InvalidArgument,
          "encoder config: model_dim must be divisible by n_heads");
}

// ---------------------------------------------------------------------------
// Tokenizer

inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

/// Lowercased words split on whitespace and punctuation, each hashed
/// (64-bit FNV-1a) into [0, vocab_size).
inline std::vector<int> tokenize_text(std::string_view text, int vocab_size) {
  require(vocab_size > 0, ErrorCode::InvalidArgument, "tokenize_text: vocab_size must be > 0");
  std::vector<int> ids;
  std::string word;
  auto flush = [&] {
    if (!word.empty()) {
      ids.push_back(static_cast<int>(fnv1a64(word) % static_cast<std::uint64_t>(vocab_size)));
      word.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c) || std::ispunct(c)) {
      flush();
    } else {
      word.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  flush();
  return ids;
}

// ---------------------------------------------------------------------------
// Adapters

/// y = x W^T + b, one row per instance. W is out x in.
template <class T>
struct Dense {
  ad::Var<T> weight;
  ad::Var<T> bias;

  static Dense init(std::mt19937_64& rng, Eigen::Index in, Eigen::Index out, double stddev) {
    return {ad::parameter<T>(gaussian<T>(rng, out, in, stddev)),
            ad::parameter<T>(Mat<T>::Zero(1, out))};
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    return ad::add_row(ad::matmul_nt(x, weight), bias);
  }

  Dense clone() const { return {ad::clone(weight), ad::clone(bias)}; }
};

enum class AdapterKind { LinearRelu, SelfNormalizing };

/// Projects raw instance features (M x d) into encoder tokens (M x D).
/// Pathology uses one linear layer + ReLU; genomics pathways use a two-layer
/// SELU network (d -> D -> D).
template <class T>
class FeatureAdapter {
 public:
  FeatureAdapter() = default;

  static FeatureAdapter pathology(std::mt19937_64& rng, Eigen::Index d, Eigen::Index D) {
    FeatureAdapter a;
    a.modality_ = Modality::Pathology;
    a.kind_ = AdapterKind::LinearRelu;
    a.in_width_ = d;
    a.layers_.push_back(Dense<T>::init(rng, d, D, output_scale(d, D)));
    return a;
  }

  static FeatureAdapter genomics(std::mt19937_64& rng, Eigen::Index d, Eigen::Index D) {
    FeatureAdapter a;
    a.modality_ = Modality::Genomics;
    a.kind_ = AdapterKind::SelfNormalizing;
    a.in_width_ = d;
    a.layers_.push_back(Dense<T>::init(rng, d, D, 1.0 / std::sqrt(static_cast<double>(d))));
    a.layers_.push_back(Dense<T>::init(rng, D, D, output_scale(D, D)));
    return a;
  }

  static FeatureAdapter for_modality(Modality m, std::mt19937_64& rng, Eigen::Index d,
                                     Eigen::Index D) {
    return m == Modality::Pathology ? pathology(rng, d, D) : genomics(rng, d, D);
  }

  ad::Var<T> operator()(const ad::Var<T>& x) const {
    require(x.cols() == in_width_, ErrorCode::ShapeMismatch,
            std::string(name(modality_)) + " adapter: input width " + std::to_string(x.cols()) +
                " != " + std::to_string(in_width_));
    if (kind_ == AdapterKind::LinearRelu) return ad::relu(layers_[0](x));
    ad::Var<T> h = ad::selu(layers_[0](x));
    return ad::selu(layers_[1](h));
  }

  ad::Var<T> operator()(const Mat<T>& x) const { return (*this)(ad::constant<T>(x)); }

  ParamList<T> parameters() const {
    const std::string p = "adapter." + std::string(tag(modality_)) + ".";
    ParamList<T> out{{p + "weight", layers_[0].weight, 2}, {p + "bias", layers_[0].bias, 1}};
    if (layers_.size() > 1) {
      out.push_back({p + "out.weight", layers_[1].weight, 2});
      out.push_back({p + "out.bias", layers_[1].bias, 1});
    }
    return out;
  }

  FeatureAdapter clone() const {
    FeatureAdapter a = *this;
    for (auto& l : a.layers_) l = l.clone();
    return a;
  }

  Modality modality() const { return modality_; }
  AdapterKind kind() const { return kind_; }
  Eigen::Index in_width() const { return in_width_; }
  std::vector<Dense<T>>& layers() { return layers_; }
  const std::vector<Dense<T>>& layers() const { return layers_; }

 private:
  // keeps initial token/class-representation inner products O(1)
  static double output_scale(Eigen::Index fan_in, Eigen::Index D) {
    return 1.0 / std::sqrt(static_cast<double>(fan_in) * static_cast<double>(D));
  }

  Modality modality_ = Modality::Pathology;
  AdapterKind kind_ = AdapterKind::LinearRelu;
  Eigen::Index in_width_ = 0;
  std::vector<Dense<T>> layers_;
};

// ---------------------------------------------------------------------------
// Transformer encoder

template <class T>
struct TokenSequence {
  ad::Var<T> tokens;                        // L x D
  std::vector<std::uint8_t> attention_mask;  // empty = all positions attend

  Eigen::Index length() const { return tokens.rows(); }
};

/// Attention probabilities captured during a forward pass, [layer][head] L x L
/// (row = query position, column = key position).
struct AttentionRecord {
  std::vector<std::vector<MatD>> weights;

  /// Mean attention received by each position, averaged over query rows,
  /// heads and layers.
  std::vector<double> received_mass() const {
    std::vector<double> out;
    std::size_t count = 0;
    for (const auto& layer : weights)
      for (const auto& a : layer) {
        if (out.empty()) out.assign(static_cast<std::size_t>(a.cols()), 0.0);
        const Eigen::RowVectorXd col_mean = a.colwise().mean();
        for (Eigen::Index j = 0; j < a.cols(); ++j) out[static_cast<std::size_t>(j)] += col_mean(j);
        ++count;
      }
    for (auto& v : out) v /= static_cast<double>(count);
    return out;
  }
};

template <class T>
struct EncoderOutput {
  ad::Var<T> hidden;  // L x D
  ad::Var<T> cls;     // 1 x D, row 0 of hidden
};

template <class T>
class TransformerEncoder {
 public:
  struct Layer {
    ad::Var<T> wq, wk, wv, wo;  // D x D, applied as x * W
    ad::Var<T> bq, bk, bv, bo;
    ad::Var<T> ln1_gain, ln1_bias;
    ad::Var<T> w1, b1, w2, b2;  // D x (r D), (r D) x D
    ad::Var<T> ln2_gain, ln2_bias;
  };

  TransformerEncoder() = default;

  TransformerEncoder(const EncoderConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
    validate(cfg);
    const Eigen::Index D = cfg.model_dim, H = static_cast<Eigen::Index>(cfg.mlp_ratio) * D;
    const double s_d = 1.0 / std::sqrt(static_cast<double>(D));
    const double s_h = 1.0 / std::sqrt(static_cast<double>(H));
    token_embedding_ = ad::constant<T>(gaussian<T>(rng, cfg.vocab_size, D, kEmbeddingStd));
    position_embedding_ = leaf(gaussian<T>(rng, cfg.max_seq_len, D, kEmbeddingStd));
    cls_ = leaf(gaussian<T>(rng, 1, D, kEmbeddingStd));
    for (int l = 0; l < cfg.n_layers; ++l) {
      Layer L;
      L.wq = leaf(gaussian<T>(rng, D, D, s_d));
      L.wk = leaf(gaussian<T>(rng, D, D, s_d));
      L.wv = leaf(gaussian<T>(rng, D, D, s_d));
      L.wo = leaf(gaussian<T>(rng, D, D, s_d));
      L.bq = leaf(Mat<T>::Zero(1, D));
      L.bk = leaf(Mat<T>::Zero(1, D));
      L.bv = leaf(Mat<T>::Zero(1, D));
      L.bo = leaf(Mat<T>::Zero(1, D));
      L.ln1_gain = leaf(Mat<T>::Ones(1, D));
      L.ln1_bias = leaf(Mat<T>::Zero(1, D));
      L.w1 = leaf(gaussian<T>(rng, D, H, s_d));
      L.b1 = leaf(Mat<T>::Zero(1, H));
      L.w2 = leaf(gaussian<T>(rng, H, D, s_h));
      L.b2 = leaf(Mat<T>::Zero(1, D));
      L.ln2_gain = leaf(Mat<T>::Ones(1, D));
      L.ln2_bias = leaf(Mat<T>::Zero(1, D));
      layers_.push_back(std::move(L));
    }
  }

  const EncoderConfig& config() const { return cfg_; }
  Eigen::Index dim() const { return cfg_.model_dim; }

  /// Frozen embedding rows for token ids, k x D.
  ad::Var<T> embed_ids(std::span<const int> ids) const {
    Mat<T> out(static_cast<Eigen::Index>(ids.size()), dim());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      require(ids[i] >= 0 && ids[i] < cfg_.vocab_size, ErrorCode::InvalidArgument,
              "embed_ids: token id out of vocabulary");
      out.row(static_cast<Eigen::Index>(i)) = token_embedding_.value().row(ids[i]);
    }
    return ad::constant<T>(std::move(out));
  }

  const ad::Var<T>& cls_embedding() const { return cls_; }

  EncoderOutput<T> encode(const TokenSequence<T>& seq, AttentionRecord* record = nullptr) const {
    const Eigen::Index L = seq.length();
    require(L >= 1, ErrorCode::InvalidArgument, "encode: empty sequence");
    require(L <= cfg_.max_seq_len, ErrorCode::InvalidArgument,
            "encode: sequence length " + std::to_string(L) + " exceeds max_seq_len " +
                std::to_string(cfg_.max_seq_len));
    require(seq.tokens.cols() == dim(), ErrorCode::ShapeMismatch,
            "encode: token width " + std::to_string(seq.tokens.cols()) +
                " != model_dim " + std::to_string(dim()));
    require(seq.attention_mask.empty() || static_cast<Eigen::Index>(seq.attention_mask.size()) == L,
            ErrorCode::ShapeMismatch, "encode: attention mask length");

    if (record) record->weights.clear();
    ad::Var<T> x = ad::add(seq.tokens, ad::slice_rows(position_embedding_, 0, L));
    for (const auto& layer : layers_) {
      std::vector<MatD>* heads = nullptr;
      if (record) heads = &record->weights.emplace_back();
      ad::Var<T> a = attention(x, layer, seq.attention_mask, heads);
      x = ad::layernorm(ad::add(x, a), layer.ln1_gain, layer.ln1_bias, T(cfg_.layernorm_eps));
      ad::Var<T> h = ad::gelu(ad::add_row(ad::matmul(x, layer.w1), layer.b1));
      ad::Var<T> m = ad::add_row(ad::matmul(h, layer.w2), layer.b2);
      x = ad::layernorm(ad::add(x, m), layer.ln2_gain, layer.ln2_bias, T(cfg_.layernorm_eps));
    }
    return {x, ad::slice_rows(x, 0, 1)};
  }

  ParamList<T> parameters() const {
    ParamList<T> out{{"encoder.token_embedding", token_embedding_, 2},
                     {"encoder.position_embedding", position_embedding_, 2},
                     {"encoder.cls", cls_, 1}};
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const auto& L = layers_[l];
      const std::string p = "encoder.layer" + std::to_string(l) + ".";
      out.insert(out.end(), {{p + "attn.wq", L.wq, 2},      {p + "attn.bq", L.bq, 1},
                             {p + "attn.wk", L.wk, 2},      {p + "attn.bk", L.bk, 1},
                             {p + "attn.wv", L.wv, 2},      {p + "attn.bv", L.bv, 1},
                             {p + "attn.wo", L.wo, 2},      {p + "attn.bo", L.bo, 1},
                             {p + "ln1.gain", L.ln1_gain, 1}, {p + "ln1.bias", L.ln1_bias, 1},
                             {p + "mlp.w1", L.w1, 2},       {p + "mlp.b1", L.b1, 1},
                             {p + "mlp.w2", L.w2, 2},       {p + "mlp.b2", L.b2, 1},
                             {p + "ln2.gain", L.ln2_gain, 1}, {p + "ln2.bias", L.ln2_bias, 1}});
    }
    return out;
  }

  /// Deep copy; trainability follows the current config.
  TransformerEncoder clone() const {
    TransformerEncoder e = *this;
    e.token_embedding_ = ad::constant<T>(token_embedding_.value());
    e.position_embedding_ = e.leaf(position_embedding_.value());
    e.cls_ = e.leaf(cls_.value());
    for (auto& L : e.layers_)
      for (ad::Var<T>* v : {&L.wq, &L.wk, &L.wv, &L.wo, &L.bq, &L.bk, &L.bv, &L.bo, &L.ln1_gain,
                            &L.ln1_bias, &L.w1, &L.b1, &L.w2, &L.b2, &L.ln2_gain, &L.ln2_bias})
        *v = e.leaf(v->value());
    return e;
  }

  /// Copy with a different trainability flag (values shared by copy).
  TransformerEncoder with_trainable(bool trainable) const {
    TransformerEncoder e = *this;
    e.cfg_.trainable_encoder = trainable;
    return e.clone();
  }

  std::vector<Layer>& layers() { return layers_; }
  ad::Var<T>& position_embedding() { return position_embedding_; }

 private:
  static constexpr double kEmbeddingStd = 0.02;

  ad::Var<T> leaf(Mat<T> v) const {
    return cfg_.trainable_encoder ? ad::parameter<T>(std::move(v)) : ad::constant<T>(std::move(v));
  }

  ad::Var<T> attention(const ad::Var<T>& x, const Layer& layer,
                       std::span<const std::uint8_t> mask, std::vector<MatD>* record) const {
    const Eigen::Index D = dim();
    const Eigen::Index dh = D / cfg_.n_heads;
    const T scale = T(1) / std::sqrt(T(dh));
    ad::Var<T> q = ad::add_row(ad::matmul(x, layer.wq), layer.bq);
    ad::Var<T> k = ad::add_row(ad::matmul(x, layer.wk), layer.bk);
    ad::Var<T> v = ad::add_row(ad::matmul(x, layer.wv), layer.bv);
    std::vector<ad::Var<T>> heads;
    for (int h = 0; h < cfg_.n_heads; ++h) {
      const Eigen::Index at = h * dh;
      ad::Var<T> scores = ad::scale(
          ad::matmul_nt(ad::slice_cols(q, at, dh), ad::slice_cols(k, at, dh)), scale);
      ad::Var<T> probs = ad::softmax_rows(scores, mask);
      if (record) record->push_back(probs.value().template cast<double>());
      heads.push_back(ad::matmul(probs, ad::slice_cols(v, at, dh)));
    }
    return ad::add_row(ad::matmul(ad::concat_cols(heads), layer.wo), layer.bo);
  }

  EncoderConfig cfg_;
  ad::Var<T> token_embedding_;
  ad::Var<T> position_embedding_;
  ad::Var<T> cls_;
  std::vector<Layer> layers_;
};

}  // namespace dispro
