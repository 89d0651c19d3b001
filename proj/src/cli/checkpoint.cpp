#include "abmll/cli/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

#include <zlib.h>

#include "abmll/errors.hpp"

namespace abmll::cli {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

class Writer {
 public:
  template <typename T>
  void put(T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out_.append(buf, sizeof(T));
  }
  void put_string(std::string_view s) {
    put<std::uint64_t>(s.size());
    out_.append(s);
  }
  void put_tensor(const num::Tensor& t) {
    put<std::uint64_t>(t.shape().size());
    for (auto d : t.shape()) put<std::uint64_t>(d);
    put_doubles(t.values());
  }
  void put_doubles(std::span<const double> v) {
    put<std::uint64_t>(v.size());
    out_.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(double));
  }
  std::string take() { return std::move(out_); }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(std::string_view bytes, std::string section) : bytes_(bytes), section_(std::move(section)) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  std::string get_bytes(std::uint64_t n) {
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::string get_string() {
    const auto n = get<std::uint64_t>();
    need(n);
    std::string s(bytes_.substr(pos_, n));
    pos_ += n;
    return s;
  }
  std::vector<double> get_doubles() {
    const auto n = get<std::uint64_t>();
    if (n > (bytes_.size() - pos_) / sizeof(double)) fail();
    std::vector<double> v(n);
    std::memcpy(v.data(), bytes_.data() + pos_, n * sizeof(double));
    pos_ += n * sizeof(double);
    return v;
  }
  num::Tensor get_tensor(bool parameter) {
    const auto ndim = get<std::uint64_t>();
    if (ndim > 8) fail();
    num::Shape shape;
    for (std::uint64_t i = 0; i < ndim; ++i) shape.push_back(get<std::uint64_t>());
    auto values = get_doubles();
    if (values.size() != num::shape_numel(shape)) fail();
    return parameter ? num::Tensor::parameter(shape, std::move(values))
                     : num::Tensor::from(shape, std::move(values));
  }
  void finish() const {
    if (pos_ != bytes_.size()) fail();
  }
  [[noreturn]] void fail() const { throw IntegrityError("malformed checkpoint section '" + section_ + "'"); }

 private:
  void need(std::size_t n) const {
    if (n > bytes_.size() - pos_) fail();
  }
  std::string_view bytes_;
  std::string section_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::string_view name, std::string_view payload) {
  uLong crc = crc32(0L, Z_NULL, 0);
  crc = crc32(crc, reinterpret_cast<const Bytef*>(name.data()), static_cast<uInt>(name.size()));
  // zlib takes uInt lengths; feed large payloads in chunks.
  std::size_t pos = 0;
  while (pos < payload.size()) {
    const std::size_t n = std::min<std::size_t>(payload.size() - pos, 1u << 30);
    crc = crc32(crc, reinterpret_cast<const Bytef*>(payload.data() + pos), static_cast<uInt>(n));
    pos += n;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string encode_weights(const lm::BaseWeights& base) {
  Writer w;
  const auto named = base.named_tensors();
  w.put<std::uint64_t>(named.size());
  for (const auto& [name, t] : named) {
    w.put_string(name);
    w.put_tensor(t);
  }
  return w.take();
}

lm::BaseWeights decode_weights(std::string_view payload, const lm::ModelConfig& model) {
  Reader r(payload, "base_weights");
  lm::BaseWeights base = lm::BaseWeights::init(model, 0);
  const auto named = base.named_tensors();
  if (r.get<std::uint64_t>() != named.size()) r.fail();
  for (const auto& [name, t] : named) {
    if (r.get_string() != name) r.fail();
    auto loaded = r.get_tensor(false);
    if (loaded.shape() != t.shape()) r.fail();
    num::Tensor target = t;
    target.assign(loaded.values());
  }
  r.finish();
  return base;
}

std::string encode_posture(const lora::Posture& posture) {
  Writer w;
  w.put<std::uint64_t>(posture.layers().size());
  for (const auto& layer : posture.layers()) {
    w.put_string(layer.name);
    w.put<double>(layer.c);
    w.put<std::uint8_t>(layer.stochastic() ? 1 : 0);
    w.put_tensor(layer.mu.b);
    w.put_tensor(layer.mu.a);
    if (layer.sigma) {
      w.put_tensor(layer.sigma->b);
      w.put_tensor(layer.sigma->a);
    }
  }
  return w.take();
}

lora::Posture decode_posture(std::string_view payload, const lm::BaseWeights& base) {
  Reader r(payload, "posture");
  const auto n = r.get<std::uint64_t>();
  std::vector<lora::LayerAdapters> layers;
  for (std::uint64_t i = 0; i < n; ++i) {
    lora::LayerAdapters layer;
    layer.name = r.get_string();
    try {
      layer.w0 = base.tensor(layer.name);
    } catch (const Error&) {
      r.fail();
    }
    layer.c = r.get<double>();
    const auto stochastic = r.get<std::uint8_t>();
    layer.mu.b = r.get_tensor(true);
    layer.mu.a = r.get_tensor(true);
    if (stochastic) layer.sigma = lora::AdapterPair{r.get_tensor(true), r.get_tensor(true)};
    layers.push_back(std::move(layer));
  }
  r.finish();
  return lora::Posture(lora::Role::kGlobal, std::move(layers));
}

std::string encode_adam(const num::AdamState& adam) {
  Writer w;
  w.put<double>(adam.lr);
  w.put<double>(adam.beta1);
  w.put<double>(adam.beta2);
  w.put<double>(adam.eps);
  w.put<std::uint64_t>(adam.step);
  w.put<std::uint64_t>(adam.m.size());
  for (std::size_t k = 0; k < adam.m.size(); ++k) {
    w.put_doubles(adam.m[k]);
    w.put_doubles(adam.v[k]);
  }
  return w.take();
}

num::AdamState decode_adam(std::string_view payload) {
  Reader r(payload, "optimizer");
  num::AdamState adam;
  adam.lr = r.get<double>();
  adam.beta1 = r.get<double>();
  adam.beta2 = r.get<double>();
  adam.eps = r.get<double>();
  adam.step = r.get<std::uint64_t>();
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t k = 0; k < n; ++k) {
    adam.m.push_back(r.get_doubles());
    adam.v.push_back(r.get_doubles());
  }
  r.finish();
  return adam;
}

std::string encode_history(const std::vector<metatrain::EpochMetrics>& history) {
  Writer w;
  w.put<std::uint64_t>(history.size());
  for (const auto& m : history) {
    w.put<std::uint64_t>(m.epoch);
    w.put_string(metatrain::method_name(m.method));
    w.put<std::uint64_t>(m.seed);
    for (double v : {m.accuracy, m.ece, m.train_nll, m.kl_task, m.neg_log_prior, m.objective}) w.put<double>(v);
  }
  return w.take();
}

std::vector<metatrain::EpochMetrics> decode_history(std::string_view payload) {
  Reader r(payload, "history");
  std::vector<metatrain::EpochMetrics> out;
  const auto n = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < n; ++i) {
    metatrain::EpochMetrics m;
    m.epoch = r.get<std::uint64_t>();
    try {
      m.method = metatrain::parse_method(r.get_string());
    } catch (const ConfigError&) {
      r.fail();
    }
    m.seed = r.get<std::uint64_t>();
    for (double* v : {&m.accuracy, &m.ece, &m.train_nll, &m.kl_task, &m.neg_log_prior, &m.objective}) {
      *v = r.get<double>();
    }
    out.push_back(m);
  }
  r.finish();
  return out;
}

}  // namespace

std::string encode_container(const std::vector<Section>& sections) {
  Writer w;
  std::string out(kCheckpointMagic);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sections.size()));
  out += w.take();
  for (const auto& s : sections) {
    Writer sw;
    sw.put<std::uint32_t>(static_cast<std::uint32_t>(s.name.size()));
    out += sw.take();
    out += s.name;
    sw.put<std::uint64_t>(s.payload.size());
    out += sw.take();
    out += s.payload;
    sw.put<std::uint32_t>(crc_of(s.name, s.payload));
    out += sw.take();
  }
  return out;
}

std::vector<Section> decode_container(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw IntegrityError("not an ABMLL1 checkpoint (bad magic)");
  }
  Reader r(bytes.substr(kCheckpointMagic.size()), "header");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) {
    throw IntegrityError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto count = r.get<std::uint32_t>();
  std::vector<Section> sections;
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    Section s;
    s.name = r.get_bytes(name_len);
    s.payload = r.get_bytes(r.get<std::uint64_t>());
    const auto crc = r.get<std::uint32_t>();
    if (crc != crc_of(s.name, s.payload)) {
      throw IntegrityError("checksum mismatch in checkpoint section '" + s.name + "'");
    }
    sections.push_back(std::move(s));
  }
  r.finish();
  return sections;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw UsageError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw UsageError("failed writing " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw UsageError("cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string encode_base(const ExperimentConfig& config, const lm::BaseWeights& base) {
  return encode_container({{"kind", "base"}, {"config", to_text(config)}, {"base_weights", encode_weights(base)}});
}

std::string encode_run(const ExperimentConfig& config, const lm::BaseWeights& base,
                       const metatrain::RunState& state) {
  Writer run;
  run.put_string(metatrain::method_name(state.method));
  Writer rng;
  rng.put<std::uint64_t>(state.rng_seed);
  Writer epoch;
  epoch.put<std::uint64_t>(state.epoch);
  return encode_container({{"kind", "run"},
                           {"config", to_text(config)},
                           {"base_weights", encode_weights(base)},
                           {"run", run.take()},
                           {"posture", encode_posture(state.global)},
                           {"optimizer", encode_adam(state.adam)},
                           {"rng", rng.take()},
                           {"epoch", epoch.take()},
                           {"history", encode_history(state.history)}});
}

Checkpoint decode_checkpoint(std::string_view bytes) {
  std::map<std::string, std::string> sections;
  for (auto& s : decode_container(bytes)) sections[s.name] = std::move(s.payload);
  auto section = [&](const std::string& name) -> const std::string& {
    auto it = sections.find(name);
    if (it == sections.end()) throw IntegrityError("checkpoint lacks section '" + name + "'");
    return it->second;
  };
  Checkpoint ck;
  const auto& kind = section("kind");
  if (kind == "base") ck.kind = CheckpointKind::kBase;
  else if (kind == "run") ck.kind = CheckpointKind::kRun;
  else throw IntegrityError("unknown checkpoint kind '" + kind + "'");
  ck.config = parse_config(section("config"));
  ck.base = decode_weights(section("base_weights"), ck.config.model);
  if (ck.kind == CheckpointKind::kRun) {
    Reader run(section("run"), "run");
    const std::string method = run.get_string();
    run.finish();
    Reader rng(section("rng"), "rng");
    const auto seed = rng.get<std::uint64_t>();
    rng.finish();
    Reader epoch(section("epoch"), "epoch");
    const auto ep = epoch.get<std::uint64_t>();
    epoch.finish();
    ck.state.emplace(metatrain::RunState{metatrain::parse_method(method),
                                         decode_posture(section("posture"), ck.base),
                                         decode_adam(section("optimizer")), ep, seed,
                                         decode_history(section("history"))});
  }
  return ck;
}

}  // namespace abmll::cli
