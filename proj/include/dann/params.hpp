#pragma once

#include <cmath>
#include <deque>
#include <string>
#include <vector>

#include "dann/autodiff.hpp"
#include "dann/random.hpp"

namespace dann {

/// Owns named parameters in creation order. Addresses stay valid as more
/// parameters are added.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = delete;
  ParamStore& operator=(const ParamStore&) = delete;
  ParamStore(ParamStore&&) = default;
  ParamStore& operator=(ParamStore&&) = default;

  Parameter& add(std::string name, Tensor value) {
    if (find(name) != nullptr) throw Error("parameter '" + name + "' defined twice");
    params_.emplace_back(std::move(name), std::move(value));
    return params_.back();
  }

  Parameter* find(const std::string& name) {
    for (auto& p : params_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  Parameter& get(const std::string& name) {
    Parameter* p = find(name);
    if (p == nullptr) throw Error("no parameter named '" + name + "'");
    return *p;
  }

  std::vector<Parameter*> all() {
    std::vector<Parameter*> out;
    for (auto& p : params_) out.push_back(&p);
    return out;
  }

  std::size_t size() const noexcept { return params_.size(); }

  std::size_t scalar_count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

 private:
  std::deque<Parameter> params_;
};

/// Uniform(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
inline Tensor glorot_uniform(Rng& rng, Shape shape, std::size_t fan_in, std::size_t fan_out) {
  Tensor t(std::move(shape));
  const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
  for (double& v : t.data()) v = uniform(rng, -a, a);
  return t;
}

/// Dense layer y = x W + b with W stored [in x out].
struct Dense {
  Parameter* w = nullptr;
  Parameter* b = nullptr;

  static Dense create(ParamStore& store, const std::string& name, std::size_t in,
                      std::size_t out, Rng& rng) {
    Dense d;
    d.w = &store.add(name + ".w", glorot_uniform(rng, {in, out}, in, out));
    d.b = &store.add(name + ".b", Tensor(Shape{out}));
    return d;
  }

  std::size_t in() const { return w->value.rows(); }
  std::size_t out() const { return w->value.cols(); }

  Var operator()(Graph& g, Var x) const { return add(matmul(x, g.param(*w)), g.param(*b)); }
};

}  // namespace dann
