#include "repdet/cli.hpp"

#include <fmt/format.h>

#include <CLI11.hpp>
#include <algorithm>
#include <filesystem>
#include <optional>

#include "repdet/detect.hpp"
#include "repdet/errors.hpp"
#include "repdet/eval.hpp"
#include "repdet/fusion.hpp"
#include "repdet/model.hpp"
#include "repdet/ops.hpp"
#include "repdet/selftest.hpp"

namespace repdet {
namespace {

constexpr double kFuseTolerance = 1e-3;
constexpr int kVerifyInputs = 5;

// Raised for a failed --verify or selftest after the report has been printed.
class VerificationFailure : public Error {
 public:
  using Error::Error;
};

struct RunConfig {
  std::string model = "improved";
  int nc = 3;
  std::string weights;
  std::string out;
  std::string csv;
  std::string image;
  std::string annotate;
  std::string manifest;
  double conf = kDefaultConfThresh;
  double iou = kDefaultIouThresh;
  std::optional<double> score_cutoff;
  std::uint64_t seed = 0;
  bool verify = false;
};

std::string group_digits(std::uint64_t v) {
  std::string s = std::to_string(v);
  for (int i = static_cast<int>(s.size()) - 3; i > 0; i -= 3) s.insert(static_cast<std::size_t>(i), ",");
  return s;
}

void require_file(const std::string& path, const char* what) {
  if (!std::filesystem::is_regular_file(path)) throw IoError(fmt::format("{} '{}' does not exist", what, path));
}

// Loads --weights (train or deploy form) or falls back to seeded weights.
Model load_model(const RunConfig& cfg, int nc) {
  const ModelGraph g = build_model(parse_variant(cfg.model), nc);
  if (cfg.weights.empty()) return {g, seeded_weights(g, cfg.seed)};
  require_file(cfg.weights, "weights file");
  WeightStore w = load_weights(cfg.weights);
  try {
    validate_weights(g, w);
    return {g, std::move(w)};
  } catch (const ValidationError& unfused_error) {
    const ModelGraph deploy = fuse_model_graph(g, seeded_weights(g, 0)).graph;
    try {
      validate_weights(deploy, w);
    } catch (const ValidationError&) {
      throw unfused_error;
    }
    return {deploy, std::move(w)};
  }
}

std::vector<Detection> detect_image(const Model& m, const Image& img, const RunConfig& cfg,
                                    const std::vector<std::string>& names) {
  const Letterboxed lb = letterbox(img, m.graph.input.h);
  const auto maps = forward(m.graph, m.weights, lb.tensor);
  return nms(decode_detections(maps, m.graph.head, lb.meta, cfg.conf, names), cfg.iou);
}

void cmd_summarize(const RunConfig& cfg, std::ostream& out) {
  const ModelGraph g = build_model(parse_variant(cfg.model), cfg.nc);
  const auto rows = summarize(g, g.input);
  const auto params = param_count(g);
  const auto flops = flop_count(g);
  out << fmt::format("model: {}  nc: {}  input: {}\n", cfg.model, cfg.nc, to_string(g.input));
  out << fmt::format("{:<12} {:<18} {:<44} {:>12} {:>15}\n", "name", "kind", "out_shape", "params", "MACs");
  for (const auto& r : rows) {
    out << fmt::format("{:<12} {:<18} {:<44} {:>12} {:>15}\n", r.name, r.kind, r.out_shape, group_digits(r.params),
                       group_digits(r.macs));
  }
  out << fmt::format("total params: {}  BN buffers: {}  MACs: {}  GFLOPs: {:.2f}\n", group_digits(params.total),
                     group_digits(params.buffers), group_digits(flops.total_macs), 2.0 * flops.total_macs / 1e9);
  if (!cfg.csv.empty()) {
    std::string csv = "name,kind,out_shape,params,macs\n";
    for (const auto& r : rows) csv += fmt::format("{},{},{},{},{}\n", r.name, r.kind, r.out_shape, r.params, r.macs);
    csv += fmt::format("total,,,{},{}\n", params.total, flops.total_macs);
    write_file_atomic(cfg.csv, csv);
  }
}

void cmd_compare(const RunConfig& cfg, std::ostream& out) {
  struct Row {
    const char* name;
    ModelOptions opts;
  };
  const Row rows[] = {
      {"baseline", ModelOptions::for_variant(ModelVariant::Baseline)},
      {"+RLDD head", {true, false, false}},
      {"+C2f-EMCM", {false, true, false}},
      {"+SegNext attention", {false, false, true}},
      {"improved", ModelOptions::for_variant(ModelVariant::Improved)},
  };
  std::uint64_t base_total = 0;
  out << fmt::format("nc: {}\n{:<20} {:>12} {:>10} {:>9}\n", cfg.nc, "model", "params", "reduction", "GFLOPs");
  std::vector<SummaryRow> base_rows, improved_rows;
  for (const auto& r : rows) {
    const ModelGraph g = build_model(r.opts, cfg.nc);
    const auto p = param_count(g).total;
    if (base_total == 0) base_total = p;
    const double red = 100.0 * (static_cast<double>(base_total) - static_cast<double>(p)) / base_total;
    out << fmt::format("{:<20} {:>12} {:>9.1f}% {:>9.2f}\n", r.name, group_digits(p), red,
                       2.0 * flop_count(g).total_macs / 1e9);
    if (r.opts == ModelOptions::for_variant(ModelVariant::Baseline)) base_rows = summarize(g, g.input);
    if (r.opts == ModelOptions::for_variant(ModelVariant::Improved)) improved_rows = summarize(g, g.input);
  }
  // Per-block deltas localize where the parameter difference comes from.
  out << fmt::format("\n{:<12} {:<20} {:>12} {:>12} {:>12}\n", "block", "improved kind", "baseline", "improved", "delta");
  for (const auto& ir : improved_rows) {
    auto it = std::find_if(base_rows.begin(), base_rows.end(), [&](const SummaryRow& b) { return b.name == ir.name; });
    const std::uint64_t bp = it == base_rows.end() ? 0 : it->params;
    if (bp == ir.params) continue;
    out << fmt::format("{:<12} {:<20} {:>12} {:>12} {:>+12}\n", ir.name, ir.kind, group_digits(bp),
                       group_digits(ir.params), static_cast<std::int64_t>(ir.params) - static_cast<std::int64_t>(bp));
  }
}

void cmd_fuse(const RunConfig& cfg, std::ostream& out) {
  const Model m = load_model(cfg, cfg.nc);
  const Model fused = fuse_model_graph(m.graph, m.weights);
  out << fmt::format("layers: {} -> {}\n", m.graph.layers.size(), fused.graph.layers.size());
  out << fmt::format("params: {} -> {}\n", group_digits(param_count(m.graph).total),
                     group_digits(param_count(fused.graph).total));
  out << fmt::format("RepConv branch layers remaining: {}\n", count_repconv_branch_layers(fused.graph));
  if (cfg.verify) {
    double worst = 0;
    for (int i = 0; i < kVerifyInputs; ++i) {
      const Tensor x = random_input(m.graph.input, cfg.seed + 1000 + static_cast<std::uint64_t>(i));
      const auto a = forward(m.graph, m.weights, x);
      const auto b = forward(fused.graph, fused.weights, x);
      for (std::size_t k = 0; k < a.size(); ++k) worst = std::max<double>(worst, max_abs_diff(a[k], b[k]));
    }
    out << fmt::format("max head-output deviation over {} inputs: {:.3e}\n", kVerifyInputs, worst);
    if (!(worst < kFuseTolerance)) {
      throw VerificationFailure(fmt::format("fused model deviates by {:.3e} (limit {:.0e})", worst, kFuseTolerance));
    }
  }
  save_weights(fused.weights, cfg.out);
  out << fmt::format("wrote {}\n", cfg.out);
}

void cmd_infer(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.image, "image");
  const Model m = load_model(cfg, cfg.nc);
  const Image img = read_ppm(cfg.image);
  const auto dets = detect_image(m, img, cfg, default_class_names(cfg.nc));
  if (!cfg.annotate.empty()) write_ppm(annotate(img, dets), cfg.annotate);
  out << detections_to_json(dets);
}

void cmd_eval(const RunConfig& cfg, std::ostream& out) {
  require_file(cfg.manifest, "manifest");
  const Dataset data = load_dataset(cfg.manifest);
  if (data.items.empty()) throw ValidationError("manifest lists no items");
  const Model m = load_model(cfg, static_cast<int>(data.classes.size()));
  std::vector<std::vector<Detection>> per_image;
  for (const auto& item : data.items) per_image.push_back(detect_image(m, read_ppm(item.image), cfg, data.classes));
  EvalOptions opts;
  opts.score_cutoff = cfg.score_cutoff;
  const EvalReport r = evaluate(per_image, data, opts);
  const std::string json = report_to_json(r);
  if (!cfg.csv.empty()) write_file_atomic(cfg.csv, report_to_csv(r));
  if (cfg.out.empty()) {
    out << json;
  } else {
    write_file_atomic(cfg.out, json);
    out << report_to_csv(r);
  }
}

void cmd_selftest(const RunConfig& cfg, std::ostream& out) {
  const auto results = run_selftest(cfg.seed);
  int failed = 0;
  for (const auto& r : results) {
    out << fmt::format("{} {}: {}\n", r.passed ? "PASS" : "FAIL", r.name, r.detail);
    failed += r.passed ? 0 : 1;
  }
  if (failed) throw VerificationFailure(fmt::format("{} of {} self-checks failed", failed, results.size()));
}

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Lightweight shrimp-disease detector: model building, fusion, inference, evaluation"};
  app.require_subcommand(1);
  RunConfig cfg;
  const auto variants = CLI::IsMember({"baseline", "improved"});

  auto add_model = [&](CLI::App* c) {
    c->add_option("--model", cfg.model, "baseline or improved")->check(variants);
  };
  auto add_seed = [&](CLI::App* c) { c->add_option("--seed", cfg.seed, "seed for generated weights and inputs"); };
  auto add_nc = [&](CLI::App* c) { c->add_option("--nc", cfg.nc, "number of classes")->check(CLI::Range(1, 100000)); };
  auto add_thresholds = [&](CLI::App* c) {
    c->add_option("--conf", cfg.conf, "confidence threshold")->check(CLI::Range(0.0, 1.0));
    c->add_option("--iou", cfg.iou, "NMS IoU threshold")->check(CLI::Range(0.0, 1.0));
  };

  auto* summarize_cmd = app.add_subcommand("summarize", "per-block table of shapes, parameters and MACs");
  add_model(summarize_cmd);
  add_nc(summarize_cmd);
  summarize_cmd->add_option("--csv", cfg.csv, "also write the table as CSV");

  auto* compare_cmd = app.add_subcommand("compare", "baseline vs improved parameter totals");
  add_nc(compare_cmd);

  auto* fuse_cmd = app.add_subcommand("fuse", "collapse RepConv branches and fold batch norms");
  add_model(fuse_cmd);
  add_nc(fuse_cmd);
  add_seed(fuse_cmd);
  fuse_cmd->add_option("--weights", cfg.weights, "input weights (seeded weights when omitted)");
  fuse_cmd->add_option("--out", cfg.out, "output weights")->required();
  fuse_cmd->add_flag("--verify", cfg.verify, "compare fused and unfused outputs on seeded inputs");

  auto* infer_cmd = app.add_subcommand("infer", "detect objects in a PPM image");
  add_model(infer_cmd);
  add_nc(infer_cmd);
  add_seed(infer_cmd);
  add_thresholds(infer_cmd);
  infer_cmd->add_option("--weights", cfg.weights, "weights (seeded weights when omitted)");
  infer_cmd->add_option("--image", cfg.image, "input image (binary PPM)")->required();
  infer_cmd->add_option("--annotate", cfg.annotate, "write an annotated copy of the image");

  auto* eval_cmd = app.add_subcommand("eval", "precision, recall and mAP@0.5 over a manifest");
  add_model(eval_cmd);
  add_seed(eval_cmd);
  add_thresholds(eval_cmd);
  eval_cmd->add_option("--weights", cfg.weights, "weights (seeded weights when omitted)");
  eval_cmd->add_option("--manifest", cfg.manifest, "dataset manifest (JSON)")->required();
  eval_cmd->add_option("--out", cfg.out, "write the JSON report here instead of stdout");
  eval_cmd->add_option("--csv", cfg.csv, "also write the report as CSV");
  eval_cmd->add_option("--score-cutoff", cfg.score_cutoff, "report P/R at this operating point")
      ->check(CLI::Range(0.0, 1.0));

  auto* selftest_cmd = app.add_subcommand("selftest", "run the embedded property checks");
  add_seed(selftest_cmd);

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitUsage;
  }

  try {
    if (*summarize_cmd) cmd_summarize(cfg, out);
    if (*compare_cmd) cmd_compare(cfg, out);
    if (*fuse_cmd) cmd_fuse(cfg, out);
    if (*infer_cmd) cmd_infer(cfg, out);
    if (*eval_cmd) cmd_eval(cfg, out);
    if (*selftest_cmd) cmd_selftest(cfg, out);
    return kExitOk;
  } catch (const IoError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitIo;
  } catch (const FormatError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitIo;
  } catch (const SpecError& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitUsage;
  } catch (const Error& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitVerification;
  } catch (const std::exception& e) {
    err << "error: " << one_line(e.what()) << "\n";
    return kExitIo;
  }
}

}  // namespace repdet
