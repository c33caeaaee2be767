#include "evl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "evl/errors.hpp"
#include "evl/util.hpp"

namespace evl {

void EncoderConfig::validate(std::size_t n_leads, std::size_t n_samples) const {
  tokenizer.validate();
  if (width < 1 || blocks < 1 || heads < 1 || ffn_mult < 1 || pool < 1 || classes < 1) {
    throw ContractError("encoder sizes must be positive");
  }
  if (width % heads != 0) {
    throw ContractError("encoder width " + std::to_string(width) + " not divisible by " +
                        std::to_string(heads) + " heads");
  }
  const std::size_t per_lead = tokenizer.windows_per_lead(n_samples);
  if (per_lead % pool != 0) {
    throw ContractError("pool " + std::to_string(pool) + " does not divide " +
                        std::to_string(per_lead) + " windows per lead");
  }
  if (n_leads < 1) throw ContractError("encoder needs at least one lead");
}

nlohmann::json to_json(const EncoderConfig& c) {
  return {{"tokenizer", to_json(c.tokenizer)},
          {"width", c.width},
          {"blocks", c.blocks},
          {"heads", c.heads},
          {"ffn_mult", c.ffn_mult},
          {"pool", c.pool},
          {"classes", c.classes}};
}

EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("encoder config must be a JSON object");
  EncoderConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "tokenizer") c.tokenizer = tokenizer_config_from_json(v);
      else if (key == "width") c.width = v.get<std::size_t>();
      else if (key == "blocks") c.blocks = v.get<std::size_t>();
      else if (key == "heads") c.heads = v.get<std::size_t>();
      else if (key == "ffn_mult") c.ffn_mult = v.get<std::size_t>();
      else if (key == "pool") c.pool = v.get<std::size_t>();
      else if (key == "classes") c.classes = v.get<std::size_t>();
      else throw InputError("unknown encoder config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for encoder key '" + key + "': " + e.what());
    }
  }
  return c;
}

// ---- parameter sets --------------------------------------------------------

Parameter& ParameterSet::add(std::string name, Tensor value) {
  if (contains(name)) throw ContractError("duplicate parameter " + name);
  items_.push_back({std::move(name), std::move(value), {}});
  items_.back().zero_grad();
  return items_.back();
}

Parameter& ParameterSet::at(const std::string& name) {
  for (auto& p : items_)
    if (p.name == name) return p;
  throw InputError("no parameter named " + name);
}

const Parameter& ParameterSet::at(const std::string& name) const {
  for (const auto& p : items_)
    if (p.name == name) return p;
  throw InputError("no parameter named " + name);
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(items_.begin(), items_.end(), [&](const Parameter& p) { return p.name == name; });
}

std::size_t ParameterSet::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : items_) n += p.value.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& p : items_) p.zero_grad();
}

bool ParameterSet::operator==(const ParameterSet& other) const {
  if (items_.size() != other.items_.size()) return false;
  for (std::size_t i = 0; i < items_.size(); ++i) {
    if (items_[i].name != other.items_[i].name || !(items_[i].value == other.items_[i].value)) {
      return false;
    }
  }
  return true;
}

ParameterSet init_encoder(const EncoderConfig& cfg, std::size_t n_leads, std::size_t n_samples,
                          std::uint64_t seed) {
  cfg.validate(n_leads, n_samples);
  std::mt19937_64 rng(seed);
  const std::size_t d = cfg.width, e = cfg.tokenizer.embed_width, f = cfg.ffn_mult * d;
  const std::size_t len = cfg.length(n_leads, n_samples);
  ParameterSet p;
  p.add("embed.weight", init_uniform(e, d, rng));
  p.add("embed.bias", Tensor({1, d}, 0.0));
  p.add("position", uniform_tensor({len, d}, -0.1, 0.1, rng));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    const std::string pre = "block" + std::to_string(b) + ".";
    p.add(pre + "ln1.gain", Tensor({1, d}, 1.0));
    p.add(pre + "ln1.bias", Tensor({1, d}, 0.0));
    p.add(pre + "attn.query", init_uniform(d, d, rng));
    p.add(pre + "attn.key", init_uniform(d, d, rng));
    p.add(pre + "attn.value", init_uniform(d, d, rng));
    p.add(pre + "attn.output", init_uniform(d, d, rng));
    p.add(pre + "ln2.gain", Tensor({1, d}, 1.0));
    p.add(pre + "ln2.bias", Tensor({1, d}, 0.0));
    p.add(pre + "ffn.in", init_uniform(d, f, rng));
    p.add(pre + "ffn.in_bias", Tensor({1, f}, 0.0));
    p.add(pre + "ffn.out", init_uniform(f, d, rng));
    p.add(pre + "ffn.out_bias", Tensor({1, d}, 0.0));
  }
  p.add("final_ln.gain", Tensor({1, d}, 1.0));
  p.add("final_ln.bias", Tensor({1, d}, 0.0));
  p.add("head.weight", init_uniform(d, cfg.classes, rng));
  p.add("head.bias", Tensor({1, cfg.classes}, 0.0));
  return p;
}

std::vector<Var> bind_all(Tape& tape, const ParameterSet& params, bool trainable) {
  std::vector<Var> out;
  out.reserve(params.items().size());
  for (const auto& p : params.items()) out.push_back(tape.leaf(p.value, trainable));
  return out;
}

namespace {

// L x V averaging matrix: consecutive groups of `pool` tokens.
Tensor pooling_matrix(std::size_t tokens, std::size_t pool) {
  const std::size_t len = tokens / pool;
  Tensor m({len, tokens}, 0.0);
  const double w = 1.0 / static_cast<double>(pool);
  for (std::size_t i = 0; i < len; ++i)
    for (std::size_t k = 0; k < pool; ++k) m(i, i * pool + k) = w;
  return m;
}

}  // namespace

EncoderOutput encoder_forward(Tape& tape, const EncoderConfig& cfg, const ParameterSet& params,
                              const std::vector<Var>& leaves, const Tensor& tokens) {
  if (leaves.size() != params.items().size()) {
    throw ContractError("encoder leaves do not match the parameter set");
  }
  if (tokens.rank() != 2 || tokens.cols() != cfg.tokenizer.embed_width) {
    throw DimensionError("encoder tokens " + shape_str(tokens.shape()) + " do not have width " +
                         std::to_string(cfg.tokenizer.embed_width));
  }
  if (tokens.rows() % cfg.pool != 0) {
    throw DimensionError("token count " + std::to_string(tokens.rows()) +
                         " is not a multiple of pool " + std::to_string(cfg.pool));
  }
  std::size_t next = 0;
  auto take = [&](const char* expect) -> Var {
    if (params.items()[next].name.find(expect) == std::string::npos) {
      throw ContractError("parameter order mismatch at " + params.items()[next].name);
    }
    return leaves[next++];
  };

  EncoderOutput out;
  Var w_embed = take("embed.weight");
  Var b_embed = take("embed.bias");
  out.visual = add_row(matmul(tape.constant(tokens), w_embed), b_embed);
  Var position = take("position");
  Var x = add(matmul(tape.constant(pooling_matrix(tokens.rows(), cfg.pool)), out.visual), position);

  const std::size_t dh = cfg.width / cfg.heads;
  const double inv = 1.0 / std::sqrt(static_cast<double>(dh));
  for (std::size_t b = 0; b < cfg.blocks; ++b) {
    Var g1 = take("ln1.gain"), c1 = take("ln1.bias");
    Var wq = take("attn.query"), wk = take("attn.key"), wv = take("attn.value"), wo = take("attn.output");
    Var g2 = take("ln2.gain"), c2 = take("ln2.bias");
    Var w1 = take("ffn.in"), b1 = take("ffn.in_bias"), w2 = take("ffn.out"), b2 = take("ffn.out_bias");

    Var h = layer_norm(x, g1, c1);
    Var q = matmul(h, wq), k = matmul(h, wk), v = matmul(h, wv);
    std::vector<Var> heads;
    for (std::size_t i = 0; i < cfg.heads; ++i) {
      Var qi = slice_cols(q, i * dh, dh), ki = slice_cols(k, i * dh, dh), vi = slice_cols(v, i * dh, dh);
      heads.push_back(matmul(softmax_rows(scale(matmul(qi, transpose(ki)), inv)), vi));
    }
    x = add(x, matmul(concat_cols(heads), wo));
    Var u = layer_norm(x, g2, c2);
    x = add(x, add_row(matmul(gelu(add_row(matmul(u, w1), b1)), w2), b2));
  }
  Var gf = take("final_ln.gain"), cf = take("final_ln.bias");
  out.hidden = layer_norm(x, gf, cf);
  Var wh = take("head.weight"), bh = take("head.bias");
  out.logits = add_row(matmul(mean_rows(out.hidden), wh), bh);
  return out;
}

// ---- optimizer -------------------------------------------------------------

nlohmann::json to_json(const OptimizerConfig& c) {
  return {{"lr", c.lr},
          {"beta1", c.beta1},
          {"beta2", c.beta2},
          {"eps", c.eps},
          {"weight_decay", c.weight_decay},
          {"warmup_fraction", c.warmup_fraction},
          {"clip_norm", c.clip_norm}};
}

OptimizerConfig optimizer_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw InputError("optimizer config must be a JSON object");
  OptimizerConfig c;
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "lr") c.lr = v.get<double>();
      else if (key == "beta1") c.beta1 = v.get<double>();
      else if (key == "beta2") c.beta2 = v.get<double>();
      else if (key == "eps") c.eps = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "warmup_fraction") c.warmup_fraction = v.get<double>();
      else if (key == "clip_norm") c.clip_norm = v.get<double>();
      else throw InputError("unknown optimizer config key '" + key + "'");
    } catch (const nlohmann::json::exception& e) {
      throw InputError("bad value for optimizer key '" + key + "': " + e.what());
    }
  }
  if (!(c.lr > 0.0) || !(c.beta1 >= 0.0 && c.beta1 < 1.0) || !(c.beta2 > 0.0 && c.beta2 < 1.0) ||
      !(c.eps > 0.0) || !(c.weight_decay >= 0.0) ||
      !(c.warmup_fraction >= 0.0 && c.warmup_fraction < 1.0) || !(c.clip_norm >= 0.0)) {
    throw ContractError("optimizer config out of range");
  }
  return c;
}

double scheduled_lr(const OptimizerConfig& cfg, std::size_t step, std::size_t total_steps) {
  if (total_steps == 0) return 0.0;
  const auto warmup = static_cast<std::size_t>(std::ceil(cfg.warmup_fraction * static_cast<double>(total_steps)));
  if (step < warmup) return cfg.lr * static_cast<double>(step + 1) / static_cast<double>(warmup);
  const double span = static_cast<double>(total_steps - warmup);
  const double progress = span > 0.0 ? static_cast<double>(step - warmup) / span : 1.0;
  return 0.5 * cfg.lr * (1.0 + std::cos(M_PI * std::min(progress, 1.0)));
}

Adam::Adam(OptimizerConfig cfg, std::size_t total_steps) : cfg_(cfg), total_(total_steps) {}

double Adam::step(const std::vector<ParameterSet*>& sets) {
  std::vector<Parameter*> params;
  for (ParameterSet* s : sets)
    for (auto& p : s->items()) params.push_back(&p);
  if (m_.empty()) {
    for (Parameter* p : params) {
      m_.emplace_back(p->value.size(), 0.0);
      v_.emplace_back(p->value.size(), 0.0);
    }
  }
  if (m_.size() != params.size()) throw ContractError("optimizer parameter list changed");

  double sq = 0.0;
  for (Parameter* p : params)
    for (double g : p->grad.data()) sq += g * g;
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw TrainingError("non-finite gradient norm", t_);
  const double clip = (cfg_.clip_norm > 0.0 && norm > cfg_.clip_norm) ? cfg_.clip_norm / norm : 1.0;

  const double lr = scheduled_lr(cfg_, t_, total_);
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params.size(); ++k) {
    Parameter& p = *params[k];
    const bool decay = p.value.rows() > 1 && p.value.cols() > 1;
    auto w = p.value.data();
    auto g = p.grad.data();
    auto& m = m_[k];
    auto& v = v_[k];
    for (std::size_t i = 0; i < w.size(); ++i) {
      const double gi = g[i] * clip;
      m[i] = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gi;
      v[i] = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gi * gi;
      if (decay) w[i] -= lr * cfg_.weight_decay * w[i];
      w[i] -= lr * (m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg_.eps);
    }
  }
  return norm;
}

// ---- checkpoints -----------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'E', 'V', 'L', 'C', 'K', 'P', 'T', '\n'};

template <typename T>
void put(std::string& out, const T& v) {
  out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

void put_string(std::string& out, const std::string& s) {
  put(out, static_cast<std::uint32_t>(s.size()));
  out += s;
}

struct Reader {
  const std::string& bytes;
  std::size_t pos = 0;

  template <typename T>
  T get() {
    if (pos + sizeof(T) > bytes.size()) throw InputError("truncated checkpoint");
    T v;
    std::memcpy(&v, bytes.data() + pos, sizeof(T));
    pos += sizeof(T);
    return v;
  }
  std::string get_string() {
    const auto n = get<std::uint32_t>();
    if (pos + n > bytes.size()) throw InputError("truncated checkpoint");
    std::string s = bytes.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

bool Checkpoint::operator==(const Checkpoint& o) const {
  return config_hash == o.config_hash && step == o.step && metrics == o.metrics && params == o.params;
}

std::uint64_t model_hash(const EncoderConfig& cfg, std::size_t n_leads, std::size_t n_samples) {
  nlohmann::json j = to_json(cfg);
  j["n_leads"] = n_leads;
  j["n_samples"] = n_samples;
  return fnv1a64(j.dump());
}

std::string serialize(const Checkpoint& c) {
  std::string out(kMagic, sizeof kMagic);
  put(out, kCheckpointVersion);
  put(out, c.config_hash);
  put(out, c.step);
  put(out, static_cast<std::uint32_t>(c.metrics.size()));
  for (const auto& [name, value] : c.metrics) {
    put_string(out, name);
    put(out, value);
  }
  put(out, static_cast<std::uint32_t>(c.params.items().size()));
  for (const auto& p : c.params.items()) {
    put_string(out, p.name);
    put(out, static_cast<std::uint32_t>(p.value.rank()));
    for (std::size_t d : p.value.shape()) put(out, static_cast<std::uint64_t>(d));
    out.append(reinterpret_cast<const char*>(p.value.data().data()), p.value.size() * sizeof(double));
  }
  return out;
}

Checkpoint deserialize(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw InputError("not a checkpoint (bad magic)");
  }
  Reader r{bytes, sizeof kMagic};
  const auto version = r.get<std::uint8_t>();
  if (version != kCheckpointVersion) {
    throw InputError("unsupported checkpoint version " + std::to_string(version));
  }
  Checkpoint c;
  c.config_hash = r.get<std::uint64_t>();
  c.step = r.get<std::uint64_t>();
  const auto n_metrics = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_metrics; ++i) {
    std::string name = r.get_string();
    c.metrics[name] = r.get<double>();
  }
  const auto n_params = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < n_params; ++i) {
    std::string name = r.get_string();
    const auto rank = r.get<std::uint32_t>();
    if (rank == 0 || rank > 4) throw InputError("bad tensor rank in checkpoint");
    Shape shape;
    for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<std::size_t>(r.get<std::uint64_t>()));
    const std::size_t n = shape_numel(shape);
    if (r.pos + n * sizeof(double) > bytes.size()) throw InputError("truncated checkpoint");
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + r.pos, n * sizeof(double));
    r.pos += n * sizeof(double);
    c.params.add(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos != bytes.size()) throw InputError("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  const std::string bytes = serialize(ckpt);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return deserialize(ss.str());
}

Checkpoint load_checkpoint(const std::filesystem::path& path, std::uint64_t expected_hash) {
  Checkpoint c = load_checkpoint(path);
  if (c.config_hash != expected_hash) {
    throw InputError("checkpoint " + path.string() + " has config hash " + hex64(c.config_hash) +
                     ", expected " + hex64(expected_hash));
  }
  return c;
}

}  // namespace evl
