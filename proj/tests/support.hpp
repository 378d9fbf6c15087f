#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "etl/attack.hpp"
#include "etl/data.hpp"
#include "etl/models.hpp"
#include "etl/ops.hpp"
#include "etl/rng.hpp"
#include "etl/tensor.hpp"

namespace etl::testing {

// |analytic - numeric| scaled by the larger magnitude, floored at 1 so that
// near-zero gradients are compared absolutely.
inline double fd_error(double analytic, double numeric) {
  const double scale = std::max({1.0, std::abs(analytic), std::abs(numeric)});
  return std::abs(analytic - numeric) / scale;
}

// Uniform values in [lo, hi] whose magnitude stays at least `gap` away from
// zero, keeping relu/clip kinks out of reach of the finite-difference step.
inline Tensor random_tensor(Rng& rng, Shape shape, double lo = -1.0, double hi = 1.0,
                            double gap = 0.0) {
  std::vector<double> v(numel(shape));
  for (auto& x : v) {
    do {
      x = rng.uniform(lo, hi);
    } while (std::abs(x) < gap);
  }
  return Tensor(std::move(shape), std::move(v));
}

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

// Largest fd_error over every element of every input, comparing backward()
// against central differences with step h.
inline double gradient_error(const ScalarFn& f, const std::vector<Tensor>& inputs,
                             double h = 1e-6) {
  std::vector<Tensor> leaves;
  for (const auto& in : inputs) {
    Tensor t = in.clone();
    t.set_requires_grad(true);
    leaves.push_back(t);
  }
  f(leaves).backward();

  double worst = 0.0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      auto eval_at = [&](double delta) {
        std::vector<Tensor> probe;
        for (const auto& in : inputs) probe.push_back(in.clone());
        probe[i].mutable_values()[j] += delta;
        return f(probe).item();
      };
      const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
      const double analytic = leaves[i].has_grad() ? leaves[i].grad()[j] : 0.0;
      worst = std::max(worst, fd_error(analytic, numeric));
    }
  }
  return worst;
}

// Contracts a tensor-valued op to a scalar with fixed random weights so every
// output element contributes to the checked gradient.
inline ScalarFn weighted(std::function<Tensor(const std::vector<Tensor>&)> op,
                         std::uint64_t seed) {
  return [op, seed](const std::vector<Tensor>& in) {
    Tensor out = op(in);
    Rng rng(seed);
    Tensor w = random_tensor(rng, out.shape());
    return ops::sum(ops::mul(out, w));
  };
}

struct OpCase {
  std::string name;
  std::function<double(std::uint64_t seed)> run;  // returns max fd_error
};

// Every differentiable op exercised on small random shapes drawn from `seed`.
inline std::vector<OpCase> gradient_cases() {
  using V = std::vector<Tensor>;
  auto dim = [](Rng& r, std::size_t lo, std::size_t hi) { return lo + r.uniform_index(hi - lo + 1); };
  std::vector<OpCase> cases;
  auto binary = [&](std::string name, Tensor (*op)(const Tensor&, const Tensor&)) {
    cases.push_back({name, [op, dim](std::uint64_t s) {
                       Rng r(s);
                       const std::size_t a = dim(r, 1, 4), b = dim(r, 1, 5);
                       const bool broadcast = r.uniform() < 0.5;
                       Tensor x = random_tensor(r, {a, b});
                       Tensor y = broadcast ? random_tensor(r, {b}) : random_tensor(r, {a, b});
                       return gradient_error(
                           weighted([op](const V& v) { return op(v[0], v[1]); }, s + 1), {x, y});
                     }});
  };
  binary("add", ops::add);
  binary("sub", ops::sub);
  binary("mul", ops::mul);
  cases.push_back({"scale", [dim](std::uint64_t s) {
                     Rng r(s);
                     const double k = r.uniform(-3.0, 3.0);
                     Tensor x = random_tensor(r, {dim(r, 1, 6)});
                     return gradient_error(
                         weighted([k](const V& v) { return ops::scale(v[0], k); }, s + 1), {x});
                   }});
  cases.push_back({"matmul", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t m = dim(r, 1, 4), k = dim(r, 1, 5), n = dim(r, 1, 4);
                     return gradient_error(
                         weighted([](const V& v) { return ops::matmul(v[0], v[1]); }, s + 1),
                         {random_tensor(r, {m, k}), random_tensor(r, {k, n})});
                   }});
  cases.push_back({"conv2d", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t b = dim(r, 1, 2), h = dim(r, 3, 5), w = dim(r, 3, 5);
                     const std::size_t cin = dim(r, 1, 3), cout = dim(r, 1, 3), k = dim(r, 1, 3);
                     const std::size_t stride = dim(r, 1, 2), pad = r.uniform_index(2);
                     return gradient_error(
                         weighted(
                             [stride, pad](const V& v) {
                               return ops::conv2d(v[0], v[1], v[2], stride, pad);
                             },
                             s + 1),
                         {random_tensor(r, {b, h, w, cin}), random_tensor(r, {cout, k, k, cin}),
                          random_tensor(r, {cout})});
                   }});
  cases.push_back({"relu", [dim](std::uint64_t s) {
                     Rng r(s);
                     return gradient_error(
                         weighted([](const V& v) { return ops::relu(v[0]); }, s + 1),
                         {random_tensor(r, {dim(r, 1, 3), dim(r, 1, 5)}, -1.0, 1.0, 1e-3)});
                   }});
  cases.push_back({"avgpool2x2", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t b = dim(r, 1, 2), h = 2 * dim(r, 1, 2), w = 2 * dim(r, 1, 2);
                     return gradient_error(
                         weighted([](const V& v) { return ops::avgpool2x2(v[0]); }, s + 1),
                         {random_tensor(r, {b, h, w, dim(r, 1, 3)})});
                   }});
  cases.push_back({"flatten", [dim](std::uint64_t s) {
                     Rng r(s);
                     return gradient_error(
                         weighted([](const V& v) { return ops::flatten(v[0]); }, s + 1),
                         {random_tensor(r, {dim(r, 1, 3), dim(r, 1, 3), dim(r, 1, 3)})});
                   }});
  cases.push_back({"reshape", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t a = dim(r, 1, 3), b = dim(r, 1, 4);
                     return gradient_error(
                         weighted([a, b](const V& v) { return ops::reshape(v[0], {b, a}); }, s + 1),
                         {random_tensor(r, {a, b})});
                   }});
  cases.push_back({"sum", [dim](std::uint64_t s) {
                     Rng r(s);
                     return gradient_error([](const V& v) { return ops::sum(v[0]); },
                                           {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})});
                   }});
  cases.push_back({"mean", [dim](std::uint64_t s) {
                     Rng r(s);
                     return gradient_error([](const V& v) { return ops::mean(v[0]); },
                                           {random_tensor(r, {dim(r, 1, 4), dim(r, 1, 4)})});
                   }});
  cases.push_back({"softmax_cross_entropy", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t n = dim(r, 1, 5), c = dim(r, 2, 5);
                     std::vector<std::size_t> labels(n);
                     for (auto& l : labels) l = r.uniform_index(c);
                     return gradient_error(
                         [labels](const V& v) { return ops::softmax_cross_entropy(v[0], labels); },
                         {random_tensor(r, {n, c}, -3.0, 3.0)});
                   }});
  cases.push_back({"l2_normalize", [dim](std::uint64_t s) {
                     Rng r(s);
                     return gradient_error(
                         weighted([](const V& v) { return ops::l2_normalize(v[0]); }, s + 1),
                         {random_tensor(r, {dim(r, 1, 3), dim(r, 2, 5)}, -1.0, 1.0, 0.1)});
                   }});
  cases.push_back({"dot", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t n = dim(r, 1, 6);
                     return gradient_error([](const V& v) { return ops::dot(v[0], v[1]); },
                                           {random_tensor(r, {n}), random_tensor(r, {n})});
                   }});
  cases.push_back({"rowwise_dot", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t n = dim(r, 1, 4), d = dim(r, 1, 5);
                     Tensor b = r.uniform() < 0.5 ? random_tensor(r, {d}) : random_tensor(r, {n, d});
                     return gradient_error(
                         weighted([](const V& v) { return ops::rowwise_dot(v[0], v[1]); }, s + 1),
                         {random_tensor(r, {n, d}), b});
                   }});
  cases.push_back({"clip", [dim](std::uint64_t s) {
                     Rng r(s);
                     // Bounds at +-0.5 with inputs kept 1e-3 away from them.
                     std::vector<double> v(dim(r, 2, 8));
                     for (auto& x : v) {
                       do {
                         x = r.uniform(-1.0, 1.0);
                       } while (std::abs(std::abs(x) - 0.5) < 1e-3);
                     }
                     Tensor x(Shape{v.size()}, v);
                     return gradient_error(
                         weighted([](const V& in) { return ops::clip(in[0], -0.5, 0.5); }, s + 1),
                         {x});
                   }});
  cases.push_back({"cosine_similarity", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t n = dim(r, 2, 6);
                     return gradient_error(
                         [](const V& v) { return ops::cosine_similarity(v[0], v[1]); },
                         {random_tensor(r, {n}, -1.0, 1.0, 0.1), random_tensor(r, {n}, -1.0, 1.0, 0.1)});
                   }});
  cases.push_back({"rowwise_cosine", [dim](std::uint64_t s) {
                     Rng r(s);
                     const std::size_t n = dim(r, 1, 4), d = dim(r, 2, 5);
                     return gradient_error(
                         weighted([](const V& v) { return ops::rowwise_cosine(v[0], v[1]); }, s + 1),
                         {random_tensor(r, {n, d}, -1.0, 1.0, 0.1),
                          random_tensor(r, {d}, -1.0, 1.0, 0.1)});
                   }});
  cases.push_back({"encoder", [](std::uint64_t s) {
                     // Reduced architecture so every parameter can be perturbed.
                     const EncoderArch arch{{4, 4, 2}, 3, 2, 3, 3};
                     Encoder e = Encoder::init(s, arch);
                     e.conv1_mask()[1] = 0;
                     Rng r(s + 7);
                     Tensor px = random_tensor(r, {2, 4, 4, 2}, 0.0, 255.0);
                     Tensor w = random_tensor(r, {2, 3});
                     auto loss = [&](const Encoder& enc) {
                       return ops::sum(ops::mul(enc.forward(px), w));
                     };
                     e.set_trainable(true);
                     loss(e).backward();
                     const auto params = e.parameters();
                     double worst = 0.0;
                     const double h = 1e-6;
                     for (std::size_t i = 0; i < params.size(); ++i) {
                       for (std::size_t j = 0; j < params[i].size(); ++j) {
                         auto eval_at = [&](double delta) {
                           Encoder probe = e.clone();
                           probe.parameters()[i].mutable_values()[j] += delta;
                           return loss(probe).item();
                         };
                         const double numeric = (eval_at(h) - eval_at(-h)) / (2.0 * h);
                         const double analytic = params[i].has_grad() ? params[i].grad()[j] : 0.0;
                         worst = std::max(worst, fd_error(analytic, numeric));
                       }
                     }
                     return worst;
                   }});
  cases.push_back({"trigger loss", [](std::uint64_t s) {
                     const EncoderArch arch{{4, 4, 2}, 3, 2, 3, 3};
                     Encoder e = Encoder::init(s, arch);
                     Rng r(s + 3);
                     // Pixels and trigger keep x + t inside (0, 255).
                     Tensor px = random_tensor(r, {3, 4, 4, 2}, 20.0, 235.0);
                     ReferenceEmbedding ref;
                     for (int i = 0; i < 3; ++i) ref.vector.push_back(r.uniform(-1.0, 1.0));
                     ref.count = 1;
                     return gradient_error(
                         [&](const V& v) { return loss_pre(e, px, v[0], ref); },
                         {random_tensor(r, {4, 4, 2}, -10.0, 10.0)});
                   }});
  return cases;
}

// Small bundle for fast end-to-end unit tests.
inline DataConfig tiny_data_config(std::uint64_t seed = 7) {
  DataConfig c;
  c.seed = seed;
  c.shadow_size = 128;
  c.shadow_holdout_size = 32;
  c.pretext_per_class = 24;
  c.train_per_class = 16;
  c.test_per_class = 8;
  return c;
}

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("etl_" + tag + "_" + std::to_string(fnv1a64(tag) ^ reinterpret_cast<std::uintptr_t>(this)));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

}  // namespace etl::testing
