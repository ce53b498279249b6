#include "agm/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include <nlohmann/json.hpp>

#include "agm/errors.hpp"

namespace agm {

namespace {

constexpr char kMagic[8] = {'A', 'G', 'M', 'C', 'K', 'P', 'T', '1'};
constexpr double kInitStd = 0.02;
constexpr double kNormEps = 1e-5;
constexpr double kMaskedScore = -1e9;

ad::Var dropout(const ad::Var& x, double p, const ForwardMode& mode) {
  if (!mode.train || p <= 0.0) return x;
  if (mode.rng == nullptr) {
    throw ArgumentError("dropout in training mode needs an rng");
  }
  std::bernoulli_distribution keep(1.0 - p);
  ad::Matrix m(x.rows(), x.cols());
  const double s = 1.0 / (1.0 - p);
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    m.data()[i] = keep(*mode.rng) ? s : 0.0;
  }
  return ad::mul(x, ad::constant(std::move(m)));
}

}  // namespace

void ModelConfig::validate() const {
  if (vocab_size <= special::kCount) {
    throw ConfigError("vocab_size must exceed the reserved special ids");
  }
  if (max_seq_len < 2) throw ConfigError("max_seq_len must be >= 2");
  if (hidden_dim <= 0 || num_layers <= 0 || num_heads <= 0 || ffn_dim <= 0) {
    throw ConfigError("model dimensions must be positive");
  }
  if (hidden_dim % num_heads != 0) {
    throw ConfigError("hidden_dim must be divisible by num_heads");
  }
  if (!(dropout >= 0.0 && dropout < 1.0)) {
    throw ConfigError("dropout must lie in [0, 1)");
  }
  if (num_labels != 2) throw ConfigError("num_labels must be 2");
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  std::mt19937_64 rng(seed);
  const int d = config_.hidden_dim;
  add_param("embeddings.token", config_.vocab_size, d, &rng, 0.0);
  add_param("embeddings.position", config_.max_seq_len, d, &rng, 0.0);
  add_param("embeddings.norm.gain", 1, d, nullptr, 1.0);
  add_param("embeddings.norm.bias", 1, d, nullptr, 0.0);
  for (int l = 0; l < config_.num_layers; ++l) {
    const std::string p = "layers." + std::to_string(l) + ".";
    for (const char* proj : {"query", "key", "value", "output"}) {
      add_param(p + "attention." + proj + ".weight", d, d, &rng, 0.0);
      add_param(p + "attention." + proj + ".bias", 1, d, nullptr, 0.0);
    }
    add_param(p + "attention.norm.gain", 1, d, nullptr, 1.0);
    add_param(p + "attention.norm.bias", 1, d, nullptr, 0.0);
    add_param(p + "ffn.in.weight", d, config_.ffn_dim, &rng, 0.0);
    add_param(p + "ffn.in.bias", 1, config_.ffn_dim, nullptr, 0.0);
    add_param(p + "ffn.out.weight", config_.ffn_dim, d, &rng, 0.0);
    add_param(p + "ffn.out.bias", 1, d, nullptr, 0.0);
    add_param(p + "ffn.norm.gain", 1, d, nullptr, 1.0);
    add_param(p + "ffn.norm.bias", 1, d, nullptr, 0.0);
  }
  add_param("classifier.weight", d, config_.num_labels, &rng, 0.0);
  add_param("classifier.bias", 1, config_.num_labels, nullptr, 0.0);
  add_param("mlm.weight", d, config_.vocab_size, &rng, 0.0);
  add_param("mlm.bias", 1, config_.vocab_size, nullptr, 0.0);
  bind();
}

ad::Var Model::add_param(const std::string& name, int rows, int cols,
                         std::mt19937_64* init_rng, double fill) {
  ad::Matrix m(rows, cols);
  if (init_rng != nullptr) {
    std::normal_distribution<double> normal(0.0, kInitStd);
    for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = normal(*init_rng);
  } else {
    m.setConstant(fill);
  }
  auto v = ad::parameter(std::move(m));
  params_.push_back({name, v});
  return v;
}

void Model::bind() {
  std::size_t i = 0;
  auto next = [&]() -> ad::Var { return params_.at(i++).var; };
  tok_emb_ = next();
  pos_emb_ = next();
  emb_ln_g_ = next();
  emb_ln_b_ = next();
  layers_.assign(static_cast<std::size_t>(config_.num_layers), Layer{});
  for (auto& layer : layers_) {
    layer.wq = next();
    layer.bq = next();
    layer.wk = next();
    layer.bk = next();
    layer.wv = next();
    layer.bv = next();
    layer.wo = next();
    layer.bo = next();
    layer.ln1_g = next();
    layer.ln1_b = next();
    layer.w1 = next();
    layer.b1 = next();
    layer.w2 = next();
    layer.b2 = next();
    layer.ln2_g = next();
    layer.ln2_b = next();
  }
  cls_w_ = next();
  cls_b_ = next();
  mlm_w_ = next();
  mlm_b_ = next();
}

Model Model::clone() const {
  Model m;
  m.config_ = config_;
  m.params_.reserve(params_.size());
  for (const auto& p : params_) {
    m.params_.push_back({p.name, ad::parameter(p.var.value())});
  }
  m.bind();
  return m;
}

void Model::check_input(std::span<const int> tokens,
                        std::span<const std::uint8_t> attention_mask) const {
  if (tokens.size() != attention_mask.size()) {
    throw ArgumentError("tokens and attention mask differ in length");
  }
  if (tokens.empty()) throw ArgumentError("empty token sequence");
  if (tokens.size() > static_cast<std::size_t>(config_.max_seq_len)) {
    throw LengthError("sequence of length " + std::to_string(tokens.size()) +
                      " exceeds max_seq_len " +
                      std::to_string(config_.max_seq_len));
  }
  for (int t : tokens) {
    if (t < 0 || t >= config_.vocab_size) {
      throw VocabularyError("token id " + std::to_string(t) +
                            " outside vocabulary of size " +
                            std::to_string(config_.vocab_size));
    }
  }
  if (tokens[0] != special::kCls) {
    throw ArgumentError("sequence must start with the CLS id");
  }
}

ad::Var Model::token_embeddings(std::span<const int> tokens) const {
  return ad::gather_rows(tok_emb_, tokens);
}

EncoderOutput Model::encode(std::span<const int> tokens,
                            std::span<const std::uint8_t> attention_mask,
                            const ForwardMode& mode) const {
  check_input(tokens, attention_mask);
  return encode_embeddings(token_embeddings(tokens), attention_mask, mode);
}

EncoderOutput Model::encode_embeddings(
    const ad::Var& token_embeddings,
    std::span<const std::uint8_t> attention_mask,
    const ForwardMode& mode) const {
  const auto len = static_cast<Eigen::Index>(attention_mask.size());
  if (token_embeddings.rows() != len ||
      token_embeddings.cols() != config_.hidden_dim) {
    throw ArgumentError("token embeddings do not match the attention mask");
  }
  if (len > config_.max_seq_len) {
    throw LengthError("sequence exceeds max_seq_len");
  }
  const int d = config_.hidden_dim;
  const int heads = config_.num_heads;
  const int head_dim = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(head_dim));

  ad::Matrix key_bias = ad::Matrix::Zero(len, len);
  ad::Matrix pool = ad::Matrix::Zero(1, len);
  Eigen::Index attended = 0;
  for (Eigen::Index j = 0; j < len; ++j) {
    if (attention_mask[static_cast<std::size_t>(j)] == 0) {
      key_bias.col(j).setConstant(kMaskedScore);
    } else {
      ++attended;
    }
  }
  if (attended == 0) throw ArgumentError("attention mask selects no position");
  for (Eigen::Index j = 0; j < len; ++j) {
    if (attention_mask[static_cast<std::size_t>(j)] != 0) {
      pool(0, j) = 1.0 / static_cast<double>(attended);
    }
  }
  const ad::Var key_bias_v = ad::constant(std::move(key_bias));

  ad::Var x = ad::add(token_embeddings, ad::slice_rows(pos_emb_, 0, len));
  x = ad::layer_norm(x, emb_ln_g_, emb_ln_b_, kNormEps);
  x = dropout(x, config_.dropout, mode);

  for (const auto& layer : layers_) {
    ad::Var q = ad::linear(x, layer.wq, layer.bq);
    ad::Var k = ad::linear(x, layer.wk, layer.bk);
    ad::Var v = ad::linear(x, layer.wv, layer.bv);
    std::vector<ad::Var> contexts;
    contexts.reserve(static_cast<std::size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      ad::Var qh = ad::slice_cols(q, h * head_dim, head_dim);
      ad::Var kh = ad::slice_cols(k, h * head_dim, head_dim);
      ad::Var vh = ad::slice_cols(v, h * head_dim, head_dim);
      ad::Var scores = ad::add(
          ad::scale(ad::matmul(qh, ad::transpose(kh)), inv_sqrt), key_bias_v);
      contexts.push_back(ad::matmul(ad::softmax_rows(scores), vh));
    }
    ad::Var attn = ad::linear(ad::concat_cols(contexts), layer.wo, layer.bo);
    attn = dropout(attn, config_.dropout, mode);
    x = ad::layer_norm(ad::add(x, attn), layer.ln1_g, layer.ln1_b, kNormEps);

    ad::Var ff = ad::linear(ad::gelu(ad::linear(x, layer.w1, layer.b1)),
                            layer.w2, layer.b2);
    ff = dropout(ff, config_.dropout, mode);
    x = ad::layer_norm(ad::add(x, ff), layer.ln2_g, layer.ln2_b, kNormEps);
  }

  EncoderOutput out;
  out.hidden_states = x;
  out.pooled = ad::matmul(ad::constant(std::move(pool)), x);
  return out;
}

ad::Var Model::classifier_logits(const ad::Var& pooled) const {
  return ad::linear(pooled, cls_w_, cls_b_);
}

ad::Var Model::classify(std::span<const int> tokens,
                        std::span<const std::uint8_t> attention_mask,
                        const ForwardMode& mode) const {
  return classifier_logits(encode(tokens, attention_mask, mode).pooled);
}

int Model::predict(std::span<const int> tokens,
                   std::span<const std::uint8_t> attention_mask) const {
  ad::NoGradGuard guard;
  const ad::Matrix logits = classify(tokens, attention_mask).value();
  // Ties resolve to the lower label.
  int best = 0;
  for (int k = 1; k < logits.cols(); ++k) {
    if (logits(0, k) > logits(0, best)) best = k;
  }
  return best;
}

ad::Var Model::mlm_logits(const ad::Var& hidden_states,
                          std::span<const int> rows) const {
  ad::Var selected = ad::gather_rows(hidden_states, rows);
  return ad::linear(selected, mlm_w_, mlm_b_);
}

std::vector<int> Model::mlm_predict(
    std::span<const int> tokens, std::span<const std::uint8_t> attention_mask,
    std::span<const int> excluded) const {
  std::vector<int> positions(tokens.size());
  for (std::size_t i = 0; i < positions.size(); ++i) {
    positions[i] = static_cast<int>(i);
  }
  return mlm_predict_at(tokens, attention_mask, positions, excluded);
}

std::vector<int> Model::mlm_predict_at(
    std::span<const int> tokens, std::span<const std::uint8_t> attention_mask,
    std::span<const int> positions, std::span<const int> excluded) const {
  if (positions.empty()) return {};
  ad::NoGradGuard guard;
  const EncoderOutput enc = encode(tokens, attention_mask);
  for (int p : positions) {
    if (p < 0 || static_cast<std::size_t>(p) >= tokens.size()) {
      throw ArgumentError("mlm position outside the sequence");
    }
  }
  const ad::Matrix logits = mlm_logits(enc.hidden_states, positions).value();
  std::vector<char> banned(static_cast<std::size_t>(config_.vocab_size), 0);
  for (int e : excluded) {
    if (e >= 0 && e < config_.vocab_size) banned[static_cast<std::size_t>(e)] = 1;
  }
  std::vector<int> out(positions.size());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    int best = -1;
    for (int t = 0; t < config_.vocab_size; ++t) {
      if (banned[static_cast<std::size_t>(t)]) continue;
      // Strict comparison keeps the lowest id on ties.
      if (best < 0 || logits(r, t) > logits(r, best)) best = t;
    }
    out[static_cast<std::size_t>(r)] = best;
  }
  return out;
}

std::vector<ad::Var> Model::encoder_parameters() const {
  std::vector<ad::Var> out;
  for (const auto& p : params_) {
    if (p.name.rfind("classifier.", 0) != 0 && p.name.rfind("mlm.", 0) != 0) {
      out.push_back(p.var);
    }
  }
  return out;
}

std::vector<ad::Var> Model::classifier_parameters() const {
  return {cls_w_, cls_b_};
}

std::vector<ad::Var> Model::mlm_parameters() const { return {mlm_w_, mlm_b_}; }

std::vector<ad::Var> Model::all_parameters() const {
  std::vector<ad::Var> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var);
  return out;
}

const ad::Var& Model::parameter(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.var;
  }
  throw ArgumentError("no parameter named " + name);
}

void Model::zero_grad() {
  for (auto& p : params_) p.var.zero_grad();
}

std::vector<ad::Matrix> Model::state() const {
  std::vector<ad::Matrix> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.var.value());
  return out;
}

void Model::load_state(const std::vector<ad::Matrix>& values) {
  if (values.size() != params_.size()) {
    throw SchemaError("state has " + std::to_string(values.size()) +
                      " tensors, model has " + std::to_string(params_.size()));
  }
  for (std::size_t i = 0; i < values.size(); ++i) {
    auto& dst = params_[i].var.mutable_value();
    if (dst.rows() != values[i].rows() || dst.cols() != values[i].cols()) {
      throw SchemaError("shape mismatch for " + params_[i].name);
    }
    dst = values[i];
  }
}

namespace {

nlohmann::json config_to_json(const ModelConfig& c) {
  return {{"vocab_size", c.vocab_size}, {"max_seq_len", c.max_seq_len},
          {"hidden_dim", c.hidden_dim}, {"num_layers", c.num_layers},
          {"num_heads", c.num_heads},   {"ffn_dim", c.ffn_dim},
          {"dropout", c.dropout},       {"num_labels", c.num_labels}};
}

ModelConfig config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.max_seq_len = j.at("max_seq_len").get<int>();
  c.hidden_dim = j.at("hidden_dim").get<int>();
  c.num_layers = j.at("num_layers").get<int>();
  c.num_heads = j.at("num_heads").get<int>();
  c.ffn_dim = j.at("ffn_dim").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.num_labels = j.at("num_labels").get<int>();
  return c;
}

}  // namespace

void Model::save(const std::filesystem::path& path) const {
  nlohmann::json header;
  header["config"] = config_to_json(config_);
  header["dtype"] = "float64";
  header["tensors"] = nlohmann::json::array();
  for (const auto& p : params_) {
    header["tensors"].push_back(
        {{"name", p.name}, {"rows", p.var.rows()}, {"cols", p.var.cols()}});
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t n = text.size();
  out.write(reinterpret_cast<const char*>(&n), sizeof(n));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : params_) {
    const auto& m = p.var.value();
    out.write(reinterpret_cast<const char*>(m.data()),
              static_cast<std::streamsize>(m.size() * sizeof(double)));
  }
  if (!out) throw Error("short write on checkpoint " + path.string());
}

Model Model::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError("checkpoint not found: " + path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw SchemaError("not a checkpoint file: " + path.string());
  }
  std::uint64_t n = 0;
  in.read(reinterpret_cast<char*>(&n), sizeof(n));
  std::string text(n, '\0');
  in.read(text.data(), static_cast<std::streamsize>(n));
  if (!in) throw SchemaError("truncated checkpoint header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("bad checkpoint header: ") + e.what());
  }
  Model m(config_from_json(header.at("config")), 0);
  const auto& tensors = header.at("tensors");
  if (tensors.size() != m.params_.size()) {
    throw SchemaError("checkpoint tensor count does not match its config");
  }
  for (std::size_t i = 0; i < tensors.size(); ++i) {
    auto& p = m.params_[i];
    const auto& t = tensors[i];
    if (t.at("name").get<std::string>() != p.name ||
        t.at("rows").get<Eigen::Index>() != p.var.rows() ||
        t.at("cols").get<Eigen::Index>() != p.var.cols()) {
      throw SchemaError("checkpoint tensor " + t.at("name").get<std::string>() +
                        " does not match the model layout");
    }
    auto& dst = p.var.mutable_value();
    in.read(reinterpret_cast<char*>(dst.data()),
            static_cast<std::streamsize>(dst.size() * sizeof(double)));
  }
  if (!in) throw SchemaError("truncated checkpoint payload");
  return m;
}

std::vector<std::uint8_t> full_mask(std::size_t n) {
  return std::vector<std::uint8_t>(n, 1);
}

std::vector<std::uint8_t> mask_from_tokens(std::span<const int> tokens) {
  std::vector<std::uint8_t> m(tokens.size());
  for (std::size_t i = 0; i < tokens.size(); ++i) {
    m[i] = tokens[i] == special::kPad ? 0 : 1;
  }
  return m;
}

}  // namespace agm
