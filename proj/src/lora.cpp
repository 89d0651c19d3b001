#include "abmll/lora.hpp"

#include <algorithm>
#include <atomic>

#include "abmll/errors.hpp"
#include "abmll/numerics/ops.hpp"

namespace abmll::lora {

namespace {
std::atomic<int> g_live{0};
std::atomic<int> g_peak{0};

void note_created() {
  const int now = ++g_live;
  int peak = g_peak.load();
  while (now > peak && !g_peak.compare_exchange_weak(peak, now)) {
  }
}
}  // namespace

AdapterPair AdapterPair::init(std::size_t d_out, std::size_t d_in, std::size_t rank,
                              std::mt19937_64& rng, double a_std) {
  if (rank == 0 || rank >= std::min(d_in, d_out)) {
    throw ConfigError("adapter rank " + std::to_string(rank) + " must be in [1, min(" +
                      std::to_string(d_out) + ", " + std::to_string(d_in) + "))");
  }
  std::normal_distribution<double> normal(0.0, a_std);
  std::vector<double> a(rank * d_in);
  for (auto& v : a) v = normal(rng);
  return {Tensor::parameter({d_out, rank}, std::vector<double>(d_out * rank, 0.0)),
          Tensor::parameter({rank, d_in}, std::move(a))};
}

Tensor adapter_delta(const AdapterPair& pair) { return num::matmul(pair.b, pair.a); }

Tensor effective_scale(const Tensor& raw, double c) {
  if (!(c > 0.0)) throw ConfigError("scale offset c must be positive");
  using namespace num;
  return sqrt(add_scalar(square(add_scalar(raw, c)), dist::kScaleFloor * dist::kScaleFloor));
}

dist::DiagonalGaussian layer_delta_distribution(const LayerAdapters& layer) {
  if (!layer.stochastic()) {
    throw ConfigError("layer " + layer.name + " has no scale adapters");
  }
  return {adapter_delta(layer.mu), effective_scale(adapter_delta(*layer.sigma), layer.c)};
}

dist::DiagonalGaussian layer_distribution(const LayerAdapters& layer) {
  auto delta = layer_delta_distribution(layer);
  return {num::add(delta.mean(), layer.w0), delta.scale()};
}

Tensor mean_weights(const LayerAdapters& layer) {
  return num::add(layer.w0, adapter_delta(layer.mu));
}

Tensor sample_weights(const LayerAdapters& layer, const Tensor& noise) {
  if (noise.shape() != layer.w0.shape()) {
    throw DimensionError("sample_weights: noise " + num::shape_string(noise.shape()) +
                         " vs weight " + num::shape_string(layer.w0.shape()));
  }
  if (!layer.stochastic()) return mean_weights(layer);
  return dist::reparam_sample(layer_distribution(layer), noise);
}

Posture::Posture(Role role, std::vector<LayerAdapters> layers)
    : role_(role), layers_(std::move(layers)), counted_(true) {
  note_created();
}

Posture::Posture(Posture&& other) noexcept
    : role_(other.role_), layers_(std::move(other.layers_)), counted_(other.counted_) {
  other.counted_ = false;
}

Posture& Posture::operator=(Posture&& other) noexcept {
  if (this != &other) {
    release();
    role_ = other.role_;
    layers_ = std::move(other.layers_);
    counted_ = other.counted_;
    other.counted_ = false;
  }
  return *this;
}

Posture::~Posture() { release(); }

void Posture::release() {
  if (counted_) --g_live;
  counted_ = false;
}

Posture Posture::clone(Role role) const {
  std::vector<LayerAdapters> copy;
  copy.reserve(layers_.size());
  for (const auto& layer : layers_) {
    LayerAdapters l{layer.name, layer.w0, layer.mu.clone(), std::nullopt, layer.c};
    if (layer.sigma) l.sigma = layer.sigma->clone();
    copy.push_back(std::move(l));
  }
  return Posture(role, std::move(copy));
}

bool Posture::stochastic() const {
  return !layers_.empty() && std::all_of(layers_.begin(), layers_.end(),
                                         [](const LayerAdapters& l) { return l.stochastic(); });
}

std::vector<Tensor> Posture::parameters() const {
  std::vector<Tensor> params;
  for (const auto& layer : layers_) {
    params.push_back(layer.mu.b);
    params.push_back(layer.mu.a);
    if (layer.sigma) {
      params.push_back(layer.sigma->b);
      params.push_back(layer.sigma->a);
    }
  }
  return params;
}

std::size_t Posture::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

int Posture::live_count() { return g_live.load(); }
int Posture::peak_count() { return g_peak.load(); }
void Posture::reset_peak() { g_peak.store(g_live.load()); }

Tensor posture_kl(const Posture& task, const Posture& global) {
  const auto& tl = task.layers();
  const auto& gl = global.layers();
  if (tl.size() != gl.size()) {
    throw ConfigError("posture_kl: " + std::to_string(tl.size()) + " task layers vs " +
                      std::to_string(gl.size()) + " global layers");
  }
  Tensor total = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < tl.size(); ++i) {
    if (tl[i].name != gl[i].name || tl[i].w0.shape() != gl[i].w0.shape()) {
      throw ConfigError("posture_kl: layer " + tl[i].name + " does not match " + gl[i].name);
    }
    total = num::add(total, dist::kl_diag_gaussian(layer_delta_distribution(tl[i]),
                                                   layer_delta_distribution(gl[i])));
  }
  return total;
}

Tensor posture_log_prior(const Posture& global, const dist::GammaPrior& prior,
                         dist::PriorSpread spread) {
  Tensor total = Tensor::scalar(0.0);
  for (const auto& layer : global.layers()) {
    auto d = layer_delta_distribution(layer);
    total = num::add(total, dist::log_prior_theta(d.mean(), d.scale(), layer.c, prior, spread));
  }
  return total;
}

}  // namespace abmll::lora
