// SPDX-License-Identifier: Apache-2.0
#include "hyperfield/gradcheck_suite.hpp"

#include "hyperfield/forward_maps.hpp"
#include "hyperfield/gradcheck.hpp"
#include "hyperfield/hypernetwork.hpp"

#include <random>

namespace hyperfield {

namespace {

Tensor<double> rand(std::mt19937_64& rng, Shape shape, double lo = -1.0, double hi = 1.0) {
  return init::uniform<double>(std::move(shape), lo, hi, rng);
}

template <class Fn>
GradCheckEntry check(const std::string& name, Fn&& fn, std::vector<Tensor<double>> params) {
  std::size_t coords = 0;
  for (const auto& p : params) coords += static_cast<std::size_t>(p.size());
  return {name, finite_diff_check(std::forward<Fn>(fn), std::move(params)), coords};
}

std::vector<Tensor<double>> all_params(ParamStore<double>& store) {
  std::vector<Tensor<double>> out;
  for (auto& [name, t] : store) out.push_back(t);
  return out;
}

// Contracts any tensor to a scalar with fixed random weights.
struct Probe {
  std::mt19937_64 rng;
  std::map<Shape, Tensor<double>> weights;
  Tensor<double> operator()(const Tensor<double>& x) {
    auto it = weights.find(x.shape());
    if (it == weights.end()) it = weights.emplace(x.shape(), rand(rng, x.shape())).first;
    return sum(mul(x, it->second));
  }
};

}  // namespace

std::vector<GradCheckEntry> run_gradcheck_suite(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Probe probe{std::mt19937_64(seed + 1), {}};
  std::vector<GradCheckEntry> out;

  {
    Tensor<double> a = rand(rng, {3, 4}), b = rand(rng, {1, 4}, 0.5, 1.5);
    out.push_back(check("elementwise", [&] {
      Tensor<double> y = add(mul(sigmoid(a), exp(b)), sub(sin(a), cos(b)));
      y = add(y, add(softplus(a), log(b)));
      y = add(y, add(gelu(a), relu(add_scalar(a, 0.05))));
      return probe(add(y, clamp(scale(a, 0.5), -0.3, 0.3)));
    }, {a, b}));
  }
  {
    Tensor<double> x = rand(rng, {5, 4}), w = rand(rng, {3, 4}), bias = rand(rng, {3}), m = rand(rng, {3, 2});
    out.push_back(check("linear_algebra", [&] { return probe(matmul(linear(x, w, bias), m)); }, {x, w, bias, m}));
  }
  {
    Tensor<double> x = rand(rng, {4, 6}), y = rand(rng, {2, 6});
    out.push_back(check("shape_ops", [&] {
      Tensor<double> c = concat<double>({x, y}, 0);
      Tensor<double> s = slice(transpose(c), 1, 1, 4);
      return add(probe(reshape(s, {4, 6})), add(probe(sum(c, 1)), probe(cumsum_exclusive(c, 1))));
    }, {x, y}));
  }
  {
    Tensor<double> x = rand(rng, {4, 6}), g = rand(rng, {6}), b = rand(rng, {6});
    out.push_back(check("normalization", [&] {
      return add(add(probe(softmax(x, 1)), probe(layer_norm(x, g, b, 1e-5))),
                 add(probe(l2_normalize(x, 1, 1e-12)), mean(x)));
    }, {x, g, b}));
  }

  EncoderConfig ecfg;
  ecfg.width = 16;
  ecfg.depth = 2;
  ecfg.heads = 2;
  ecfg.patch = 4;
  ecfg.image_height = ecfg.image_width = 8;
  {
    ParamStore<double> store;
    EncoderStack<double> enc(store, ecfg, rng);
    const Tensor<double> image = rand(rng, {8, 8, 3}, 0.0, 1.0);
    const Tensor<double> wt = rand(rng, {3, 16});
    out.push_back(check("encoder", [&] {
      auto [d, w] = enc.encode(enc.embed_observation(image), wt);
      return add(probe(d), probe(w));
    }, all_params(store)));

    enc.attach_lora(LoraTargets::all, 2, 4.0, rng);
    std::vector<Tensor<double>> adapters;
    for (auto& [name, t] : store) {
      if (name.find(".lora_") == std::string::npos) continue;
      for (Index i = 0; i < t.size(); ++i) t.data()[i] = 0.3 * (static_cast<double>(rng() % 1000) / 500.0 - 1.0);
      adapters.push_back(t);
    }
    out.push_back(check("lora", [&] {
      auto [d, w] = enc.encode(enc.embed_observation(image), wt);
      return add(probe(d), probe(w));
    }, adapters));
  }

  InrArchitecture arch;
  arch.fourier_features = 3;
  arch.hidden_width = 4;
  arch.linear_layers = 3;
  arch.output_dim = 4;
  {
    ParamStore<double> store;
    const GroupPlan plan = plan_groups(arch, 8);
    const HeadBank<double> heads = HeadBank<double>::create(store, plan, 6, rng);
    const BaseParamBank<double> base = BaseParamBank<double>::create(store, plan, rng);
    Tensor<double> tokens = store.add("tokens", rand(rng, {plan.total_tokens, 6}));
    out.push_back(check("weight_generator", [&] {
      GeneratedINR<double> g = generate_weights(tokens, plan, heads, base, arch);
      Tensor<double> acc = Tensor<double>::scalar(0.0);
      for (const auto& l : g.layers) acc = add(acc, probe(l.weight));
      return acc;
    }, all_params(store)));
  }
  {
    ParamStore<double> store;
    const IpcBank<double> bank = IpcBank<double>::create(store, arch, 1, 2, 4, 6, rng);
    Tensor<double> tokens = store.add("tokens", rand(rng, {bank.plan.total_tokens, 6}));
    out.push_back(check("ipc", [&] {
      GeneratedINR<double> g = ipc_modulate(bank, tokens, arch);
      return probe(g.layers[1].weight);
    }, all_params(store)));
  }

  const Tensor<double> basis = sample_fourier_matrix<double>(arch, rng);
  GeneratedINR<double> gen;
  gen.arch = arch;
  std::vector<Tensor<double>> inr_params;
  for (const auto& s : arch.matrices()) {
    gen.layers.push_back({rand(rng, {s.out, s.in}), rand(rng, {s.out}, 0.1, 0.5)});
    inr_params.push_back(gen.layers.back().weight);
    inr_params.push_back(gen.layers.back().bias);
  }
  {
    const Tensor<double> coords = rand(rng, {6, 3});
    out.push_back(check("inr", [&] { return probe(Inr<double>(gen, basis, 0.5).evaluate(coords)); }, inr_params));
  }
  {
    Camera cam;
    cam.width = cam.height = 4;
    cam.focal = 4.0;
    cam.pose(2, 3) = 2.0;
    const RayBatch rays = make_rays(cam, {0, 5, 10, 15}, 0.5, 3.5);
    out.push_back(check("renderer", [&] {
      RenderResult<double> r = render_rays(Inr<double>(gen, basis, 0.5), rays, 6, true);
      return probe(r.rgb);
    }, inr_params));
  }
  {
    Tensor<double> mu = rand(rng, {5, 2}), lv = rand(rng, {5, 2}), y = rand(rng, {5, 2});
    out.push_back(check("losses", [&] {
      return add(mse_loss(mu, y), np_nll_loss(NpPrediction<double>{mu, lv}, y));
    }, {mu, lv}));
  }
  {
    ModelSpec spec;
    spec.encoder = ecfg;
    spec.inr.fourier_features = 2;
    spec.inr.hidden_width = 2;
    spec.inr.linear_layers = 2;
    spec.inr.output_dim = 4;
    spec.group_size = 4;
    spec.fourier_scale = 0.5;
    Hypernetwork<double> model(spec, seed + 7);
    // Zero biases put the ReLU densities exactly on their kink; move them off it.
    for (auto& [name, t] : model.params()) {
      if (name.rfind("hyper.bias.", 0) == 0) t.values() = rand(rng, t.shape(), 0.1, 0.5).values();
    }
    const Tensor<double> image = rand(rng, {8, 8, 3}, 0.0, 1.0);
    Camera cam;
    cam.width = cam.height = 8;
    cam.focal = 8.0;
    cam.pose(2, 3) = 2.0;
    const RayBatch rays = make_rays(cam, {3, 17, 36, 60}, 0.5, 3.5);
    const Tensor<double> target = rand(rng, {4, 3}, 0.0, 1.0);
    out.push_back(check("end_to_end", [&] {
      return mse_loss(render_rays(model.instantiate(image), rays, 4, true).rgb, target);
    }, all_params(model.params())));
  }
  return out;
}

}  // namespace hyperfield
