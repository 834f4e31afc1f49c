#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "gdist/ops.hpp"
#include "gdist/random.hpp"

namespace gdist::nn {

using ag::Var;

struct NamedParameter {
  std::string name;
  Var var;
};
using ParameterList = std::vector<NamedParameter>;

/// Seeded uniform fan-in initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline Var fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  Tensor t(std::move(shape));
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (auto& v : t.values()) v = uniform(rng, -bound, bound);
  return Var::parameter(std::move(t));
}

class Linear {
public:
  Linear() = default;
  Linear(std::size_t in, std::size_t out, Rng& rng, bool bias = true) : in_(in), out_(out) {
    weight = fan_in_uniform({out, in}, in, rng);
    if (bias) this->bias = fan_in_uniform({out}, in, rng);
  }

  Var forward(const Var& x) const { return ag::linear(x, weight, bias); }

  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    if (bias.defined()) out.push_back({prefix + ".bias", bias});
  }

  std::size_t in_features() const { return in_; }
  std::size_t out_features() const { return out_; }

  Var weight;
  Var bias;

private:
  std::size_t in_ = 0, out_ = 0;
};

class Conv3x3 {
public:
  Conv3x3() = default;
  Conv3x3(std::size_t in, std::size_t out, Rng& rng) {
    weight = fan_in_uniform({out, in, 3, 3}, in * 9, rng);
    bias = fan_in_uniform({out}, in * 9, rng);
  }
  Var forward(const Var& x) const { return ag::conv3x3(x, weight, bias); }
  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".weight", weight});
    out.push_back({prefix + ".bias", bias});
  }
  Var weight, bias;
};

class GroupNorm {
public:
  GroupNorm() = default;
  explicit GroupNorm(std::size_t channels)
      : gamma(Var::parameter(Tensor({channels}, 1.0))), beta(Var::parameter(Tensor({channels}, 0.0))) {}
  Var forward(const Var& x) const { return ag::group_norm(x, gamma, beta); }
  void collect(ParameterList& out, const std::string& prefix) const {
    out.push_back({prefix + ".gamma", gamma});
    out.push_back({prefix + ".beta", beta});
  }
  Var gamma, beta;
};

/// Single GRU layer unrolled over a sequence of [B,I] inputs, zero initial state.
class GRULayer {
public:
  GRULayer() = default;
  GRULayer(std::size_t input, std::size_t hidden, Rng& rng)
      : hidden_(hidden),
        ir_(input, hidden, rng), iz_(input, hidden, rng), in_(input, hidden, rng),
        hr_(hidden, hidden, rng), hz_(hidden, hidden, rng), hn_(hidden, hidden, rng) {}

  std::vector<Var> forward(std::span<const Var> xs) const {
    if (xs.empty()) throw PreconditionError("GRU over an empty sequence");
    const std::size_t B = xs[0].dim(0);
    Var h(Tensor({B, hidden_}));
    std::vector<Var> hs;
    hs.reserve(xs.size());
    for (const auto& x : xs) {
      Var r = ag::sigmoid(ag::add(ir_.forward(x), hr_.forward(h)));
      Var z = ag::sigmoid(ag::add(iz_.forward(x), hz_.forward(h)));
      Var n = ag::tanh(ag::add(in_.forward(x), ag::mul(r, hn_.forward(h))));
      h = ag::add(n, ag::mul(z, ag::sub(h, n)));
      hs.push_back(h);
    }
    return hs;
  }

  void collect(ParameterList& out, const std::string& prefix) const {
    ir_.collect(out, prefix + ".ir");
    iz_.collect(out, prefix + ".iz");
    in_.collect(out, prefix + ".in");
    hr_.collect(out, prefix + ".hr");
    hz_.collect(out, prefix + ".hz");
    hn_.collect(out, prefix + ".hn");
  }

  std::size_t hidden() const { return hidden_; }

private:
  std::size_t hidden_ = 0;
  Linear ir_, iz_, in_, hr_, hz_, hn_;
};

inline void zero_grad(const ParameterList& params) {
  for (auto p : params) p.var.zero_grad();
}

/// Copy values by name; every destination name must exist in the source with the same shape.
inline void copy_values(const ParameterList& from, const ParameterList& to) {
  std::map<std::string, const Var*> index;
  for (const auto& p : from) index[p.name] = &p.var;
  for (auto p : to) {
    auto it = index.find(p.name);
    if (it == index.end()) throw ShapeError("parameter '" + p.name + "' missing from source");
    if (it->second->shape() != p.var.shape())
      throw ShapeError("parameter '" + p.name + "' shape " + shape_str(it->second->shape()) + " vs " +
                       shape_str(p.var.shape()));
    p.var.mutable_value() = it->second->value();
  }
}

}  // namespace gdist::nn
