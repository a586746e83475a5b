#include "repdet/model.hpp"

#include <fmt/format.h>

#include <cmath>
#include <random>
#include <set>

#include "repdet/errors.hpp"
#include "repdet/lowering.hpp"

namespace repdet {
namespace {

// n-scale channel plan after the 0.25 width multiple.
constexpr int kC1 = 16, kC2 = 32, kC3 = 64, kC4 = 128, kC5 = 256;

std::string add_top_conv(GraphBuilder& b, const std::string& name, const std::string& input,
                         int in, int out, int k, int stride) {
  auto guard = b.scope(BlockKind::Conv, name, name);
  return lower(b, ConvBlock::standard(in, out, k, stride), name, name, input);
}

std::string add_top_c2f(GraphBuilder& b, const std::string& name, const std::string& input,
                        int in, int out, int n, bool emcm, bool shortcut) {
  const auto blk = C2fBlock::make(in, out, n, emcm ? C2fVariant::EMCM : C2fVariant::Standard, shortcut);
  return lower(b, blk, name, name, input);
}

std::string add_upsample(GraphBuilder& b, const std::string& name, const std::string& input) {
  auto guard = b.scope(BlockKind::Upsample, name, name);
  Layer l;
  l.name = name;
  l.kind = LayerKind::Upsample;
  l.inputs = {input};
  return b.add(std::move(l));
}

std::string add_concat(GraphBuilder& b, const std::string& name, std::vector<std::string> inputs) {
  auto guard = b.scope(BlockKind::Concat, name, name);
  Layer l;
  l.name = name;
  l.kind = LayerKind::Concat;
  l.inputs = std::move(inputs);
  return b.add(std::move(l));
}

std::uint64_t product(const std::vector<std::uint32_t>& dims) {
  std::uint64_t p = 1;
  for (auto d : dims) p *= d;
  return p;
}

[[noreturn]] void shape_fail(const Layer& l, const std::string& why) {
  throw ShapeError(fmt::format("layer '{}' ({}): {}", l.name, to_string(l.kind), why));
}

}  // namespace

ModelGraph build_model(ModelVariant variant, int nc) {
  return build_model(ModelOptions::for_variant(variant), nc);
}

ModelGraph build_model(const ModelOptions& options, int nc) {
  if (nc < 1) throw SpecError(fmt::format("class count must be >= 1, got {}", nc));
  HeadConfig head;
  head.nc = nc;
  head.level_channels = {kC3, kC4, kC5};

  GraphBuilder b;
  Layer in;
  in.name = "input";
  in.kind = LayerKind::Input;
  std::string x = b.add(std::move(in));

  // Backbone.
  x = add_top_conv(b, "backbone.0", x, 3, kC1, 3, 2);
  x = add_top_conv(b, "backbone.1", x, kC1, kC2, 3, 2);
  x = add_top_c2f(b, "backbone.2", x, kC2, kC2, 1, false, true);
  x = add_top_conv(b, "backbone.3", x, kC2, kC3, 3, 2);
  const std::string p3_tap = add_top_c2f(b, "backbone.4", x, kC3, kC3, 2, false, true);
  x = add_top_conv(b, "backbone.5", p3_tap, kC3, kC4, 3, 2);
  const std::string p4_tap = add_top_c2f(b, "backbone.6", x, kC4, kC4, 2, options.emcm, true);
  x = add_top_conv(b, "backbone.7", p4_tap, kC4, kC5, 3, 2);
  x = add_top_c2f(b, "backbone.8", x, kC5, kC5, 1, options.emcm, true);
  x = lower(b, SPPFBlock::make(kC5, kC5), "backbone.9", "backbone.9", x);
  if (options.attention) {
    x = lower(b, SegNextAttentionBlock::make(kC5), "backbone.10", "backbone.10", x);
  }
  const std::string p5_tap = x;

  // PAN neck: top-down then bottom-up.
  x = add_upsample(b, "neck.0", p5_tap);
  x = add_concat(b, "neck.1", {x, p4_tap});
  const std::string n1 = add_top_c2f(b, "neck.2", x, kC5 + kC4, kC4, 1, options.emcm, false);
  x = add_upsample(b, "neck.3", n1);
  x = add_concat(b, "neck.4", {x, p3_tap});
  const std::string out_p3 = add_top_c2f(b, "neck.5", x, kC4 + kC3, kC3, 1, false, false);
  x = add_top_conv(b, "neck.6", out_p3, kC3, kC3, 3, 2);
  x = add_concat(b, "neck.7", {x, n1});
  const std::string out_p4 = add_top_c2f(b, "neck.8", x, kC3 + kC4, kC4, 1, options.emcm, false);
  x = add_top_conv(b, "neck.9", out_p4, kC4, kC4, 3, 2);
  x = add_concat(b, "neck.10", {x, p5_tap});
  const std::string out_p5 = add_top_c2f(b, "neck.11", x, kC4 + kC5, kC5, 1, options.emcm, false);

  const std::array<std::string, 3> taps = {out_p3, out_p4, out_p5};
  const auto outs = options.rldd_head ? lower(b, RLDDHead::make(head), "head", taps)
                                      : lower(b, BaselineHead::make(head), "head", taps);

  ModelGraph g;
  g.options = options;
  g.head = head;
  g.layers = b.take_layers();
  g.outputs.assign(outs.begin(), outs.end());
  validate_graph(g);
  return g;
}

std::vector<Dims> infer_shapes(const ModelGraph& g, Dims input) {
  std::vector<Dims> dims(g.layers.size());
  std::map<std::string_view, std::size_t> index;
  auto in_dims = [&](const Layer& l, std::size_t k) -> const Dims& {
    if (k >= l.inputs.size()) shape_fail(l, "missing input");
    auto it = index.find(l.inputs[k]);
    if (it == index.end()) shape_fail(l, "input '" + l.inputs[k] + "' not computed yet");
    return dims[it->second];
  };
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const Layer& l = g.layers[i];
    Dims out{};
    switch (l.kind) {
      case LayerKind::Input:
        out = input;
        break;
      case LayerKind::Conv: {
        const auto& s = std::get<Conv2dSpec>(l.attrs);
        const Dims d = in_dims(l, 0);
        if (d.c != s.in_ch) shape_fail(l, fmt::format("axis c is {}, conv expects {}", d.c, s.in_ch));
        out = {d.n, s.out_ch, s.out_h(d.h), s.out_w(d.w)};
        if (out.h < 1 || out.w < 1) shape_fail(l, "output spatial size < 1");
        break;
      }
      case LayerKind::BatchNorm: {
        const auto& a = std::get<BatchNormAttrs>(l.attrs);
        out = in_dims(l, 0);
        if (out.c != a.channels) shape_fail(l, fmt::format("axis c is {}, BN has {}", out.c, a.channels));
        break;
      }
      case LayerKind::SiLU:
      case LayerKind::GELU:
      case LayerKind::Scale:
        out = in_dims(l, 0);
        break;
      case LayerKind::MaxPool:
      case LayerKind::AvgPool: {
        const auto& p = std::get<PoolSpec>(l.attrs);
        const Dims d = in_dims(l, 0);
        const int ph = d.h + 2 * p.padding;
        const int pw = d.w + 2 * p.padding;
        if (p.kernel > ph || p.kernel > pw) shape_fail(l, "pool kernel larger than padded input");
        out = {d.n, d.c, (ph - p.kernel) / p.stride + 1, (pw - p.kernel) / p.stride + 1};
        break;
      }
      case LayerKind::Upsample: {
        const Dims d = in_dims(l, 0);
        out = {d.n, d.c, 2 * d.h, 2 * d.w};
        break;
      }
      case LayerKind::Concat: {
        out = in_dims(l, 0);
        out.c = 0;
        for (std::size_t k = 0; k < l.inputs.size(); ++k) {
          const Dims d = in_dims(l, k);
          if (d.n != out.n || d.h != out.h || d.w != out.w) {
            shape_fail(l, fmt::format("input {} has {} but first input has spatial {}x{}",
                                      l.inputs[k], to_string(d), out.h, out.w));
          }
          out.c += d.c;
        }
        break;
      }
      case LayerKind::Slice: {
        const auto& s = std::get<SliceAttrs>(l.attrs);
        out = in_dims(l, 0);
        if (s.begin < 0 || s.count < 0 || s.begin + s.count > out.c) {
          shape_fail(l, fmt::format("slice [{}, {}) outside {} channels", s.begin, s.begin + s.count, out.c));
        }
        out.c = s.count;
        break;
      }
      case LayerKind::Add:
      case LayerKind::Mul: {
        out = in_dims(l, 0);
        for (std::size_t k = 1; k < l.inputs.size(); ++k) {
          if (in_dims(l, k) != out) {
            shape_fail(l, fmt::format("operand {} is {} vs {}", l.inputs[k],
                                      to_string(in_dims(l, k)), to_string(out)));
          }
        }
        break;
      }
    }
    dims[i] = out;
    index[l.name] = i;
  }
  return dims;
}

std::size_t ParamDecl::count() const { return static_cast<std::size_t>(product(dims)); }

std::vector<ParamDecl> layer_params(const Layer& layer) {
  std::vector<ParamDecl> out;
  switch (layer.kind) {
    case LayerKind::Conv: {
      const auto& s = std::get<Conv2dSpec>(layer.attrs);
      const Dims wd = s.weight_dims();
      out.push_back({layer.param_key + ".w",
                     {static_cast<std::uint32_t>(wd.n), static_cast<std::uint32_t>(wd.c),
                      static_cast<std::uint32_t>(wd.h), static_cast<std::uint32_t>(wd.w)},
                     true});
      if (s.has_bias) {
        out.push_back({layer.param_key + ".b", {static_cast<std::uint32_t>(s.out_ch)}, true});
      }
      break;
    }
    case LayerKind::BatchNorm: {
      const auto c = static_cast<std::uint32_t>(std::get<BatchNormAttrs>(layer.attrs).channels);
      out.push_back({layer.param_key + ".gamma", {c}, true});
      out.push_back({layer.param_key + ".beta", {c}, true});
      out.push_back({layer.param_key + ".mean", {c}, false});
      out.push_back({layer.param_key + ".var", {c}, false});
      break;
    }
    case LayerKind::Scale:
      out.push_back({layer.param_key, {1}, true});
      break;
    default:
      break;
  }
  return out;
}

ParamReport param_count(const ModelGraph& g) {
  ParamReport r;
  r.per_layer.assign(g.layers.size(), 0);
  std::set<std::string> seen;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    for (const auto& d : layer_params(g.layers[i])) {
      if (!seen.insert(d.name).second) continue;
      if (d.learnable) {
        r.per_layer[i] += d.count();
        r.total += d.count();
      } else {
        r.buffers += d.count();
      }
    }
  }
  return r;
}

FlopReport flop_count(const ModelGraph& g, Dims input) {
  const auto dims = infer_shapes(g, input);
  FlopReport r;
  r.macs.assign(g.layers.size(), 0);
  r.elementwise.assign(g.layers.size(), 0);
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const Layer& l = g.layers[i];
    const Dims& d = dims[i];
    switch (l.kind) {
      case LayerKind::Conv: {
        const auto& s = std::get<Conv2dSpec>(l.attrs);
        r.macs[i] = static_cast<std::uint64_t>(d.n) * s.out_ch * (s.in_ch / s.groups) * s.kh * s.kw *
                    static_cast<std::uint64_t>(d.h) * d.w;
        break;
      }
      case LayerKind::BatchNorm:
      case LayerKind::SiLU:
      case LayerKind::GELU:
      case LayerKind::MaxPool:
      case LayerKind::AvgPool:
      case LayerKind::Add:
      case LayerKind::Mul:
      case LayerKind::Scale:
        r.elementwise[i] = d.count();
        break;
      default:
        break;
    }
    r.total_macs += r.macs[i];
    r.total_elementwise += r.elementwise[i];
  }
  return r;
}

std::vector<SummaryRow> summarize(const ModelGraph& g, Dims input) {
  const auto dims = infer_shapes(g, input);
  const auto params = param_count(g);
  const auto flops = flop_count(g, input);
  std::vector<SummaryRow> rows;
  std::map<std::string, std::size_t> row_of;
  for (std::size_t i = 0; i < g.layers.size(); ++i) {
    const Layer& l = g.layers[i];
    if (l.scopes.empty()) continue;
    const Scope& top = l.scopes.front();
    auto [it, inserted] = row_of.try_emplace(top.instance, rows.size());
    if (inserted) rows.push_back({top.instance, std::string(to_string(top.kind)), "", 0, 0});
    SummaryRow& row = rows[it->second];
    row.params += params.per_layer[i];
    row.macs += flops.macs[i];
    row.out_shape = to_string(dims[i]);
  }
  // Heads emit three maps; list all of them.
  for (auto& row : rows) {
    if (row.name != "head") continue;
    std::string s;
    for (const auto& o : g.outputs) {
      if (!s.empty()) s += "+";
      s += to_string(dims[g.index_of(o)]);
    }
    row.out_shape = s;
  }
  return rows;
}

WeightStore init_weights(const ModelGraph& g, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  WeightStore store;
  for (const auto& l : g.layers) {
    for (const auto& d : layer_params(l)) {
      if (store.contains(d.name)) continue;
      StoredTensor t{d.dims, std::vector<float>(d.count(), 0.0f)};
      if (l.kind == LayerKind::Conv && d.name.ends_with(".w")) {
        const auto& s = std::get<Conv2dSpec>(l.attrs);
        const double bound = std::sqrt(1.0 / (static_cast<double>(s.in_ch / s.groups) * s.kh * s.kw));
        for (auto& v : t.values) {
          const double u = static_cast<double>(rng() >> 40) / 16777216.0;
          v = static_cast<float>((2.0 * u - 1.0) * bound);
        }
      } else if (d.name.ends_with(".gamma") || d.name.ends_with(".var") || l.kind == LayerKind::Scale) {
        std::fill(t.values.begin(), t.values.end(), 1.0f);
      }
      store.set(d.name, std::move(t));
    }
  }
  return store;
}

WeightStore seeded_weights(const ModelGraph& g, std::uint64_t seed) {
  WeightStore w = init_weights(g, seed);
  perturb_batch_norm(g, w, seed);
  return w;
}

void perturb_batch_norm(const ModelGraph& g, WeightStore& store, std::uint64_t seed) {
  std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
  auto uniform = [&](double lo, double hi) {
    const double u = static_cast<double>(rng() >> 40) / 16777216.0;
    return static_cast<float>(lo + (hi - lo) * u);
  };
  std::set<std::string> done;
  for (const auto& l : g.layers) {
    if (l.kind == LayerKind::BatchNorm && done.insert(l.param_key).second) {
      for (auto& v : store.at(l.param_key + ".gamma").values) v = uniform(0.5, 1.5);
      for (auto& v : store.at(l.param_key + ".beta").values) v = uniform(-0.2, 0.2);
      for (auto& v : store.at(l.param_key + ".mean").values) v = uniform(-0.2, 0.2);
      for (auto& v : store.at(l.param_key + ".var").values) v = uniform(0.5, 2.0);
    } else if (l.kind == LayerKind::Conv && std::get<Conv2dSpec>(l.attrs).has_bias &&
               done.insert(l.param_key).second) {
      for (auto& v : store.at(l.param_key + ".b").values) v = uniform(-0.1, 0.1);
    } else if (l.kind == LayerKind::Scale && done.insert(l.param_key).second) {
      for (auto& v : store.at(l.param_key).values) v = uniform(0.5, 1.5);
    }
  }
}

void validate_weights(const ModelGraph& g, const WeightStore& store) {
  std::set<std::string, std::less<>> expected;
  for (const auto& l : g.layers) {
    for (const auto& d : layer_params(l)) {
      expected.insert(d.name);
      const StoredTensor* t = store.find(d.name);
      if (t == nullptr) {
        throw ValidationError(fmt::format("layer '{}' needs tensor '{}' which is missing", l.name, d.name));
      }
      if (t->dims != d.dims) {
        throw ValidationError(fmt::format("tensor '{}' for layer '{}' has dims [{}], expected [{}]",
                                          d.name, l.name, fmt::join(t->dims, ","),
                                          fmt::join(d.dims, ",")));
      }
    }
  }
  for (const auto& [name, t] : store) {
    if (!expected.contains(name)) {
      throw ValidationError(fmt::format("tensor '{}' is not used by the graph", name));
    }
  }
}

Tensor random_input(Dims dims, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Tensor t(dims);
  for (auto& v : t.values()) {
    const double u = static_cast<double>(rng() >> 40) / 16777216.0;
    v = static_cast<float>(2.0 * u - 1.0);
  }
  return t;
}

}  // namespace repdet
