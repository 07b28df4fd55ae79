#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "mfssd/checkpoint.hpp"
#include "mfssd/data.hpp"
#include "mfssd/detector.hpp"
#include "mfssd/eval.hpp"
#include "mfssd/multibox.hpp"
#include "mfssd/optim.hpp"
#include "mfssd/slimming.hpp"

using nlohmann::json;
using nlohmann::ordered_json;
using namespace mfssd;

namespace {

void reject_unknown(const json& j, std::initializer_list<const char*> known,
                    const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    bool ok = false;
    for (const char* k : known)
      if (key == k) ok = true;
    if (!ok) throw UsageError("config: unknown key \"" + key + "\" in " + where);
  }
}

TrainConfig train_from_json(const json& j) {
  TrainConfig c;
  reject_unknown(j,
                 {"base_lr", "momentum", "weight_decay", "lr_step_epochs", "lr_step_factor",
                  "warmup_epochs", "sparsity_lambda", "epochs", "batch_size", "max_steps",
                  "iou_threshold", "neg_pos_ratio", "seed"},
                 "train");
  if (j.contains("base_lr")) c.base_lr = j["base_lr"].get<double>();
  if (j.contains("momentum")) c.momentum = j["momentum"].get<double>();
  if (j.contains("weight_decay")) c.weight_decay = j["weight_decay"].get<double>();
  if (j.contains("lr_step_epochs")) c.lr_step_epochs = j["lr_step_epochs"].get<std::vector<int>>();
  if (j.contains("lr_step_factor")) c.lr_step_factor = j["lr_step_factor"].get<double>();
  if (j.contains("warmup_epochs")) c.warmup_epochs = j["warmup_epochs"].get<int>();
  if (j.contains("sparsity_lambda")) c.sparsity_lambda = j["sparsity_lambda"].get<double>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<int>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<int>();
  if (j.contains("max_steps")) c.max_steps = j["max_steps"].get<int>();
  if (j.contains("iou_threshold")) c.iou_threshold = j["iou_threshold"].get<double>();
  if (j.contains("neg_pos_ratio")) c.neg_pos_ratio = j["neg_pos_ratio"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

json train_to_json(const TrainConfig& c) {
  return {{"base_lr", c.base_lr},
          {"momentum", c.momentum},
          {"weight_decay", c.weight_decay},
          {"lr_step_epochs", c.lr_step_epochs},
          {"lr_step_factor", c.lr_step_factor},
          {"warmup_epochs", c.warmup_epochs},
          {"sparsity_lambda", c.sparsity_lambda},
          {"epochs", c.epochs},
          {"batch_size", c.batch_size},
          {"max_steps", c.max_steps},
          {"iou_threshold", c.iou_threshold},
          {"neg_pos_ratio", c.neg_pos_ratio},
          {"seed", c.seed}};
}

DetectorConfig detector_from_json(const json& j) {
  DetectorConfig c;
  reject_unknown(j,
                 {"image_size", "classes", "width_a", "width_b", "width_c", "width_d",
                  "fusion", "pyramid_widths", "prior_counts", "s_min", "s_max"},
                 "detector");
  if (j.contains("image_size")) c.image_size = j["image_size"].get<int>();
  if (j.contains("classes")) c.classes = j["classes"].get<int>();
  if (j.contains("width_a")) c.width_a = j["width_a"].get<int>();
  if (j.contains("width_b")) c.width_b = j["width_b"].get<int>();
  if (j.contains("width_c")) c.width_c = j["width_c"].get<int>();
  if (j.contains("width_d")) c.width_d = j["width_d"].get<int>();
  if (j.contains("fusion")) {
    reject_unknown(j["fusion"], {"u_a", "u_b", "u_c"}, "detector.fusion");
    if (j["fusion"].contains("u_a")) c.fusion.u_a = j["fusion"]["u_a"].get<int>();
    if (j["fusion"].contains("u_b")) c.fusion.u_b = j["fusion"]["u_b"].get<int>();
    if (j["fusion"].contains("u_c")) c.fusion.u_c = j["fusion"]["u_c"].get<int>();
  }
  if (j.contains("pyramid_widths")) c.pyramid_widths = j["pyramid_widths"].get<std::vector<int>>();
  if (j.contains("prior_counts")) c.prior_counts = j["prior_counts"].get<std::vector<int>>();
  if (j.contains("s_min")) c.s_min = j["s_min"].get<double>();
  if (j.contains("s_max")) c.s_max = j["s_max"].get<double>();
  return c;
}

json detector_to_json(const DetectorConfig& c) {
  return {{"image_size", c.image_size},
          {"classes", c.classes},
          {"width_a", c.width_a},
          {"width_b", c.width_b},
          {"width_c", c.width_c},
          {"width_d", c.width_d},
          {"fusion", {{"u_a", c.fusion.u_a}, {"u_b", c.fusion.u_b}, {"u_c", c.fusion.u_c}}},
          {"pyramid_widths", c.pyramid_widths},
          {"prior_counts", c.prior_counts},
          {"s_min", c.s_min},
          {"s_max", c.s_max}};
}

json config_echo(const DetectorConfig& dc, const TrainConfig& tc, const PriorConfig& pc) {
  return {{"detector", detector_to_json(dc)},
          {"train", train_to_json(tc)},
          {"priors",
           {{"fmaps", pc.fmaps}, {"counts", pc.counts}, {"s_min", pc.s_min},
            {"s_max", pc.s_max}}}};
}

json load_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot open config file " + path);
  try {
    json j;
    f >> j;
    return j;
  } catch (const json::exception& e) {
    throw UsageError(std::string("config file ") + path + ": " + e.what());
  }
}

/// Rebuilds the runtime detector view (head lists, priors) from a stored
/// graph and its config echo. Works for pruned graphs too: pruning never
/// touches head channels or level geometry.
Detector detector_from_checkpoint(const Checkpoint& ck) {
  Detector det;
  det.graph = ck.graph;
  det.config = detector_from_json(ck.config.at("detector"));
  const json& pj = ck.config.at("priors");
  det.prior_config.fmaps = pj.at("fmaps").get<std::vector<int>>();
  det.prior_config.counts = pj.at("counts").get<std::vector<int>>();
  det.prior_config.s_min = pj.at("s_min").get<double>();
  det.prior_config.s_max = pj.at("s_max").get<double>();
  det.priors = generate_priors(det.prior_config);
  for (const auto& n : det.graph.nodes) {
    if (n.kind == NodeKind::head_loc) det.loc_heads.push_back(n.name);
    if (n.kind == NodeKind::head_conf) det.conf_heads.push_back(n.name);
  }
  if (det.loc_heads.empty() || det.loc_heads.size() != det.conf_heads.size())
    throw DataError("checkpoint graph lacks a paired set of detection heads");
  return det;
}

void require_same_topology(const GraphSpec& a, const GraphSpec& b, const std::string& what) {
  auto mismatch = [&](const std::string& detail) {
    throw UsageError(what + ": graph mismatch (" + detail + ")");
  };
  if (a.nodes.size() != b.nodes.size()) mismatch("node count");
  for (std::size_t i = 0; i < a.nodes.size(); ++i) {
    const GraphNode &x = a.nodes[i], &y = b.nodes[i];
    if (x.name != y.name || x.kind != y.kind || x.inputs != y.inputs) mismatch("node " + x.name);
    if (x.cout != y.cout || x.k != y.k || x.stride != y.stride || x.pad != y.pad ||
        x.out_h != y.out_h || x.out_w != y.out_w)
      mismatch("attributes of " + x.name);
  }
  if (a.outputs != b.outputs) mismatch("outputs");
}

TrainDataset to_train_data(const Dataset& ds) { return {ds.images, ds.annotations}; }

void check_data_compatible(const Dataset& ds, const DetectorConfig& dc) {
  if (ds.image_size != dc.image_size)
    throw UsageError("dataset images are " + std::to_string(ds.image_size) +
                     "px but the detector expects " + std::to_string(dc.image_size));
  if (ds.classes != dc.classes)
    throw UsageError("dataset has " + std::to_string(ds.classes) +
                     " classes but the detector expects " + std::to_string(dc.classes));
}

void emit(const ordered_json& j, const std::string& out_file) {
  if (out_file.empty()) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::ofstream f(out_file, std::ios::trunc);
    f << j.dump(2) << "\n";
    if (!f) throw DataError("cannot write " + out_file);
  }
}

struct TrainArgs {
  std::string data, out, config_file, init, log_file;
  std::optional<int> epochs, batch_size, max_steps;
  std::optional<double> lr, lambda;
  std::optional<std::uint64_t> seed;
};

void add_train_overrides(CLI::App* cmd, TrainArgs& a) {
  cmd->add_option("--epochs", a.epochs, "override the epoch count");
  cmd->add_option("--batch-size", a.batch_size, "override the batch size");
  cmd->add_option("--max-steps", a.max_steps, "stop after this many optimizer steps");
  cmd->add_option("--lr", a.lr, "override the base learning rate");
  cmd->add_option("--lambda", a.lambda, "override the batchnorm sparsity strength");
  cmd->add_option("--seed", a.seed, "override the training seed");
}

void apply_overrides(TrainConfig& tc, const TrainArgs& a) {
  if (a.epochs) tc.epochs = *a.epochs;
  if (a.batch_size) tc.batch_size = *a.batch_size;
  if (a.max_steps) tc.max_steps = *a.max_steps;
  if (a.lr) tc.base_lr = *a.lr;
  if (a.lambda) tc.sparsity_lambda = *a.lambda;
  if (a.seed) tc.seed = *a.seed;
}

int run_training(const TrainArgs& args, bool sparsify) {
  TrainConfig tc;
  DetectorConfig dc;
  if (!args.config_file.empty()) {
    const json cfg = load_json_file(args.config_file);
    reject_unknown(cfg, {"train", "detector"}, "top level");
    if (cfg.contains("train")) tc = train_from_json(cfg["train"]);
    if (cfg.contains("detector")) dc = detector_from_json(cfg["detector"]);
  }
  if (sparsify && tc.sparsity_lambda == 0.0) tc.sparsity_lambda = 1e-4;
  apply_overrides(tc, args);
  if (sparsify && tc.sparsity_lambda <= 0.0)
    throw UsageError("sparsify needs a positive --lambda");

  const Dataset ds = load_dataset(args.data);
  const Detector det = build_mfssd(dc);
  check_data_compatible(ds, dc);

  ParamStore ps;
  if (!args.init.empty()) {
    Checkpoint ck = load_checkpoint(args.init);
    require_same_topology(det.graph, ck.graph, "--init " + args.init);
    ps = std::move(ck.params);
  } else {
    std::mt19937_64 rng(tc.seed);
    ps = init_params(det.graph, {1, 3, dc.image_size, dc.image_size}, rng);
  }

  std::ofstream log_f;
  std::ostream* log = &std::cerr;
  if (!args.log_file.empty()) {
    log_f.open(args.log_file, std::ios::trunc);
    if (!log_f) throw DataError("cannot write " + args.log_file);
    log = &log_f;
  }
  const TrainResult res = train_detector(det, ps, to_train_data(ds), tc, log);

  save_checkpoint(args.out, det.graph, ps, {1, 3, dc.image_size, dc.image_size},
                  config_echo(dc, tc, det.prior_config));
  ordered_json summary;
  summary["checkpoint"] = args.out;
  summary["steps"] = res.steps;
  summary["final_loss"] = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
  summary["penalty"] = res.final_penalty;
  emit(summary, "");
  return 0;
}

int run_finetune(const std::string& ckpt, const TrainArgs& args) {
  Checkpoint ck = load_checkpoint(ckpt);
  const Detector det = detector_from_checkpoint(ck);
  TrainConfig tc = finetune_config(train_from_json(ck.config.at("train")));
  apply_overrides(tc, args);

  const Dataset ds = load_dataset(args.data);
  check_data_compatible(ds, det.config);

  std::ofstream log_f;
  std::ostream* log = &std::cerr;
  if (!args.log_file.empty()) {
    log_f.open(args.log_file, std::ios::trunc);
    if (!log_f) throw DataError("cannot write " + args.log_file);
    log = &log_f;
  }
  ParamStore ps = std::move(ck.params);
  const TrainResult res = train_detector(det, ps, to_train_data(ds), tc, log);

  save_checkpoint(args.out, det.graph, ps, ck.input_shape,
                  config_echo(det.config, tc, det.prior_config));
  ordered_json summary;
  summary["checkpoint"] = args.out;
  summary["steps"] = res.steps;
  summary["final_loss"] = res.epoch_loss.empty() ? 0.0 : res.epoch_loss.back();
  emit(summary, "");
  return 0;
}

int run_prune(const std::string& ckpt, const std::string& out, double ratio,
              const std::string& report_file) {
  Checkpoint ck = load_checkpoint(ckpt);
  const SizeReport before = size_report(ck.graph, ck.params);
  const PrunePlan plan = plan_prune(ck.graph, ck.params, ratio);
  PruneResult pruned = apply_prune(ck.graph, ck.params, plan);
  const SizeReport after = size_report(pruned.graph, pruned.params);
  check_params(pruned.graph, pruned.params, ck.input_shape);

  save_checkpoint(out, pruned.graph, pruned.params, ck.input_shape, ck.config);

  ordered_json report;
  report["checkpoint"] = out;
  report["ratio"] = ratio;
  report["threshold"] = plan.threshold;
  report["channels_considered"] = plan.considered;
  report["channels_dropped"] = plan.dropped;
  report["before"] = {{"trainable", before.trainable}, {"buffers", before.buffers},
                      {"bytes", before.bytes}};
  report["after"] = {{"trainable", after.trainable}, {"buffers", after.buffers},
                     {"bytes", after.bytes}};
  report["trainable_reduction"] = 1.0 - double(after.trainable) / double(before.trainable);
  report["byte_reduction"] = 1.0 - double(after.bytes) / double(before.bytes);
  emit(report, report_file);
  return 0;
}

int run_eval(const std::string& ckpt, const std::string& data, double score_threshold,
             double nms_iou, int top_k, double iou_threshold, const std::string& out_file) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const Detector det = detector_from_checkpoint(ck);
  const Dataset ds = load_dataset(data);
  check_data_compatible(ds, det.config);

  const std::size_t n_levels = det.loc_heads.size();
  std::vector<std::vector<Detection>> all_dets;
  for (const Tensor& img : ds.images) {
    Tensor input = Tensor::zeros({1, 3, ds.image_size, ds.image_size});
    for (std::int64_t i = 0; i < img.numel(); ++i) input.set(i, img.at(i));
    const std::vector<Tensor> outs = graph_forward_eval(det.graph, ck.params, input);
    const std::vector<Tensor> locs(outs.begin(), outs.begin() + n_levels);
    const std::vector<Tensor> confs(outs.begin() + n_levels, outs.end());
    all_dets.push_back(decode_detections(locs, confs, 0, det.priors, det.config.classes,
                                         score_threshold, nms_iou, top_k));
  }

  const EvalResult r = evaluate_map(all_dets, ds.annotations, ds.bbox_areas, iou_threshold);
  ordered_json out;
  out["map"] = r.map;
  ordered_json per_class = ordered_json::object();
  for (const auto& [cls, ap] : r.per_class) per_class[std::to_string(cls)] = ap;
  out["per_class"] = per_class;
  out["ap_small"] = r.ap_small ? json(*r.ap_small) : json(nullptr);
  out["ap_medium"] = r.ap_medium ? json(*r.ap_medium) : json(nullptr);
  out["ap_large"] = r.ap_large ? json(*r.ap_large) : json(nullptr);
  out["iou_threshold"] = r.iou_threshold;
  out["images"] = ds.images.size();
  emit(out, out_file);
  return 0;
}

int run_info(const std::string& ckpt) {
  const Checkpoint ck = load_checkpoint(ckpt);
  const SizeReport sz = size_report(ck.graph, ck.params);
  ordered_json out;
  out["input_shape"] = ck.input_shape;
  out["nodes"] = ck.graph.nodes.size();
  out["outputs"] = ck.graph.outputs;
  out["trainable"] = sz.trainable;
  out["buffers"] = sz.buffers;
  out["bytes"] = sz.bytes;
  ordered_json layers = ordered_json::array();
  for (const auto& n : ck.graph.nodes)
    if (is_conv_kind(n.kind) || n.kind == NodeKind::batchnorm)
      layers.push_back({{"name", n.name},
                        {"kind", node_kind_name(n.kind)},
                        {"channels", is_conv_kind(n.kind)
                                         ? n.cout
                                         : int(ck.params.bn.at(n.name).gamma.numel())}});
  out["layers"] = layers;
  out["config"] = ck.config;
  emit(out, "");
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"small-object detector: training, slimming and evaluation"};
  app.require_subcommand(1);

  DatasetSpec gen;
  std::string gen_out;
  auto* cmd_gen = app.add_subcommand("gen-data", "write a synthetic shape-detection dataset");
  cmd_gen->add_option("--out", gen_out, "output directory")->required();
  cmd_gen->add_option("--count", gen.count, "number of images");
  cmd_gen->add_option("--image-size", gen.image_size, "square image side in pixels");
  cmd_gen->add_option("--classes", gen.classes, "number of shape classes (1-3)");
  cmd_gen->add_option("--small-fraction", gen.small_fraction,
                      "share of objects below the 32x32-px area cutoff");
  cmd_gen->add_option("--min-objects", gen.min_objects, "minimum objects per image");
  cmd_gen->add_option("--max-objects", gen.max_objects, "maximum objects per image");
  cmd_gen->add_option("--seed", gen.seed, "generator seed");

  TrainArgs train_args;
  auto* cmd_train = app.add_subcommand("train", "train a detector from scratch or --init");
  cmd_train->add_option("--data", train_args.data, "dataset directory")->required();
  cmd_train->add_option("--out", train_args.out, "checkpoint output directory")->required();
  cmd_train->add_option("--config", train_args.config_file, "JSON config file");
  cmd_train->add_option("--init", train_args.init, "checkpoint to start from");
  cmd_train->add_option("--log", train_args.log_file, "JSONL training log (default stderr)");
  add_train_overrides(cmd_train, train_args);

  TrainArgs sparse_args;
  auto* cmd_sparse = app.add_subcommand(
      "sparsify", "train with an L1 pull on batchnorm scales (default lambda 1e-4)");
  cmd_sparse->add_option("--data", sparse_args.data, "dataset directory")->required();
  cmd_sparse->add_option("--out", sparse_args.out, "checkpoint output directory")->required();
  cmd_sparse->add_option("--config", sparse_args.config_file, "JSON config file");
  cmd_sparse->add_option("--init", sparse_args.init, "checkpoint to start from");
  cmd_sparse->add_option("--log", sparse_args.log_file, "JSONL training log");
  add_train_overrides(cmd_sparse, sparse_args);

  std::string prune_ckpt, prune_out, prune_report;
  double prune_ratio = 0;
  auto* cmd_prune = app.add_subcommand("prune", "drop low-scale channels globally");
  cmd_prune->add_option("--ckpt", prune_ckpt, "input checkpoint")->required();
  cmd_prune->add_option("--out", prune_out, "pruned checkpoint directory")->required();
  cmd_prune->add_option("--ratio", prune_ratio, "fraction of prunable channels to drop")
      ->required();
  cmd_prune->add_option("--report", prune_report, "write the JSON report here instead of stdout");

  std::string ft_ckpt;
  TrainArgs ft_args;
  auto* cmd_ft = app.add_subcommand("finetune",
                                    "resume training at base_lr/10 with the sparsity pull off");
  cmd_ft->add_option("--ckpt", ft_ckpt, "checkpoint to fine-tune")->required();
  cmd_ft->add_option("--data", ft_args.data, "dataset directory")->required();
  cmd_ft->add_option("--out", ft_args.out, "checkpoint output directory")->required();
  cmd_ft->add_option("--log", ft_args.log_file, "JSONL training log");
  add_train_overrides(cmd_ft, ft_args);

  std::string eval_ckpt, eval_data, eval_out;
  double eval_score = 0.05, eval_nms = 0.45, eval_iou = 0.5;
  int eval_topk = 100;
  auto* cmd_eval = app.add_subcommand("eval", "mean average precision over a dataset");
  cmd_eval->add_option("--ckpt", eval_ckpt, "checkpoint")->required();
  cmd_eval->add_option("--data", eval_data, "dataset directory")->required();
  cmd_eval->add_option("--score-threshold", eval_score, "minimum kept class score");
  cmd_eval->add_option("--nms", eval_nms, "per-class suppression IoU");
  cmd_eval->add_option("--top-k", eval_topk, "detections kept per image");
  cmd_eval->add_option("--iou", eval_iou, "matching IoU for the metric");
  cmd_eval->add_option("--out", eval_out, "write results here instead of stdout");

  std::string info_ckpt;
  auto* cmd_info = app.add_subcommand("info", "describe a checkpoint");
  cmd_info->add_option("--ckpt", info_ckpt, "checkpoint")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n";
    return 1;
  }

  try {
    if (cmd_gen->parsed()) {
      generate_dataset(gen, gen_out);
      ordered_json out;
      out["dir"] = gen_out;
      out["count"] = gen.count;
      out["image_size"] = gen.image_size;
      emit(out, "");
      return 0;
    }
    if (cmd_train->parsed()) return run_training(train_args, false);
    if (cmd_sparse->parsed()) return run_training(sparse_args, true);
    if (cmd_prune->parsed())
      return run_prune(prune_ckpt, prune_out, prune_ratio, prune_report);
    if (cmd_ft->parsed()) return run_finetune(ft_ckpt, ft_args);
    if (cmd_eval->parsed())
      return run_eval(eval_ckpt, eval_data, eval_score, eval_nms, eval_topk, eval_iou,
                      eval_out);
    if (cmd_info->parsed()) return run_info(info_ckpt);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const DataError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 3;
  }
  return 1;
}
