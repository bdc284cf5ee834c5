#include "cli.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "roomroam/dataset.hpp"
#include "roomroam/error.hpp"
#include "roomroam/layout.hpp"
#include "roomroam/model.hpp"
#include "roomroam/random.hpp"
#include "roomroam/service.hpp"
#include "roomroam/stats.hpp"
#include "roomroam/training.hpp"

namespace roomroam::cli {

namespace {

using json = nlohmann::json;

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::InvalidInput, "cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::ofstream open_out(const std::string& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::InvalidInput, "cannot write " + path);
  return out;
}

Layout read_layout_file(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::Schema, path + " is not valid JSON", e.what());
  }
  return layout_from_json(doc);
}

json num(double v) {
  if (std::isfinite(v)) return v;
  if (std::isnan(v)) return nullptr;
  return v > 0 ? "Infinity" : "-Infinity";
}

struct Options {
  // shared
  std::uint64_t seed = 0;
  std::string out;
  // gen / build-dataset
  std::string counts = "3:100,4:100,5:100";
  double room_width = 5.0;
  double room_height = 5.0;
  // simulate / build-dataset
  std::string layouts;
  int paths = 30;
  std::optional<std::uint64_t> split_seed;
  bool no_split = false;
  double episode_distance = SimConfig{}.episode_distance;
  // train / eval / analyze
  std::string dataset;
  std::string model_config;
  std::string train_config;
  std::string history;
  std::string pretrained;
  std::string name_table = std::string(ROOMROAM_DATA_DIR) + "/vit_b16_names.txt";
  std::string split = "test";
  // predict / rollout / serve
  std::string model;
  std::string layout;
  int scale = 16;
  std::string host = "0.0.0.0";
  int port = 8080;
  int sim_workers = 2;
  int time_budget_ms = 10000;
};

SimConfig sim_config(const Options& o) {
  SimConfig cfg;
  cfg.episode_distance = o.episode_distance;
  cfg.validate();
  return cfg;
}

void finish_dataset(std::vector<Sample>& samples, const Options& o, std::ostream& err) {
  if (!o.no_split) assign_splits(samples, SplitRatios{}, o.split_seed.value_or(o.seed));
  save_dataset(o.out, samples);
  err << "wrote " << samples.size() << " samples to " << o.out << "\n";
}

int cmd_gen(const Options& o, std::ostream&, std::ostream& err) {
  const auto records = generate_layouts(parse_group_counts(o.counts), o.seed, make_room(o.room_width, o.room_height));
  auto f = open_out(o.out);
  write_layouts(f, records);
  err << "wrote " << records.size() << " layouts to " << o.out << "\n";
  return 0;
}

int cmd_simulate(const Options& o, std::ostream&, std::ostream& err) {
  std::ifstream in(o.layouts);
  if (!in) throw Error(ErrorCode::InvalidInput, "cannot open " + o.layouts);
  const auto records = read_layouts(in);
  err << "simulating " << records.size() << " layouts x " << o.paths << " paths\n";
  auto samples = simulate_layouts(records, sim_config(o), o.paths, o.seed);
  finish_dataset(samples, o, err);
  return 0;
}

int cmd_build(const Options& o, std::ostream&, std::ostream& err) {
  auto samples = build_dataset(parse_group_counts(o.counts), sim_config(o), o.paths, o.seed,
                               make_room(o.room_width, o.room_height));
  finish_dataset(samples, o, err);
  return 0;
}

int cmd_train(const Options& o, std::ostream& out, std::ostream& err) {
  const auto mcfg = load_model_config(o.model_config);
  const auto tcfg = load_train_config(o.train_config);
  const auto samples = load_dataset(o.dataset);

  std::optional<ModelParams> init;
  if (!o.pretrained.empty()) {
    const auto train_set = select_split(samples, Split::Train);
    double mean = 0.0;
    for (const auto& s : train_set) mean += s.mean_resets;
    mean = train_set.empty() ? 0.0 : mean / static_cast<double>(train_set.size());
    init = import_pretrained(std::filesystem::path(o.pretrained), mcfg, o.name_table, derive_seed(tcfg.seed, 1), mean);
    err << "imported backbone from " << o.pretrained << "\n";
  }
  const auto result = train(samples, mcfg, tcfg, init ? &*init : nullptr, [&](const EpochRecord& r) {
    err << "epoch " << r.epoch << " train " << r.train_loss << " val " << r.val_loss << " lr " << r.lr << "\n";
  });
  save_model(o.out, result.best_params, mcfg);
  if (!o.history.empty()) {
    auto h = open_out(o.history);
    write_history_csv(h, result.history);
  }
  out << json{{"best_epoch", result.best_epoch},
              {"best_val_loss", num(result.best_val_loss)},
              {"epochs_run", result.history.size()},
              {"model", o.out}}
             .dump()
      << "\n";
  return 0;
}

int cmd_eval(const Options& o, std::ostream& out, std::ostream&) {
  const auto [params, cfg] = load_model(o.model);
  const auto samples = load_dataset(o.dataset);
  std::vector<Sample> subset = o.split == "all" ? samples : select_split(samples, split_from_string(o.split));
  if (subset.empty()) throw Error(ErrorCode::InvalidInput, "split '" + o.split + "' has no samples");
  const auto m = evaluate(params, cfg, subset);
  out << json{{"rmse", num(m.rmse)}, {"mae", num(m.mae)}, {"r2", num(m.r2)}, {"n", subset.size()}, {"split", o.split}}
             .dump()
      << "\n";
  return 0;
}

int cmd_predict(const Options& o, std::ostream& out, std::ostream&) {
  const std::string bytes = read_file(o.model);
  const auto [params, cfg] = deserialize(bytes);
  const auto layout = read_layout_file(o.layout);
  auto doc = prediction_to_json(predict(params, cfg, layout_to_image(layout, cfg.image_size)));
  doc["model_version"] = model_version_of(bytes);
  out << doc.dump() << "\n";
  return 0;
}

int cmd_rollout(const Options& o, std::ostream&, std::ostream& err) {
  if (o.scale < 1) throw Error(ErrorCode::InvalidInput, "--scale must be at least 1");
  const auto [params, cfg] = load_model(o.model);
  const auto layout = read_layout_file(o.layout);
  const auto pred = predict(params, cfg, layout_to_image(layout, cfg.image_size));
  const int n = pred.heatmap.grid * o.scale;
  auto f = open_out(o.out);
  f << "P5\n" << n << " " << n << "\n255\n";
  for (int r = 0; r < n; ++r)
    for (int c = 0; c < n; ++c)
      f.put(static_cast<char>(std::lround(255.0 * pred.heatmap.at(r / o.scale, c / o.scale))));
  err << "predicted resets " << pred.resets << "; heatmap written to " << o.out << "\n";
  return 0;
}

int cmd_analyze(const Options& o, std::ostream& out, std::ostream&) {
  out << to_json(analyze(load_dataset(o.dataset))).dump() << "\n";
  return 0;
}

int cmd_serve(const Options& o, std::ostream&, std::ostream& err) {
  ServiceConfig sc;
  sc.sim_workers = o.sim_workers;
  sc.time_budget_ms = o.time_budget_ms;
  Service service(sc);
  std::string model = o.model;
  if (const char* env = std::getenv("ROOMROAM_MODEL"); env && *env) model = env;
  if (!model.empty()) {
    service.load_model(model);
    err << "loaded model " << model << "\n";
  } else {
    err << "no model given; /api/predict answers 503 until one is configured\n";
  }
  err << "listening on " << o.host << ":" << o.port << "\n";
  run_server(service, o.host, o.port);
  return 0;
}

void report(std::ostream& err, std::string_view code, std::string_view message, std::string_view detail) {
  err << error_body(code, message, detail).dump() << "\n";
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Redirected-walking reset estimation: simulation, dataset, model and service"};
  app.name(args.empty() ? "roomroam" : args[0]);
  app.require_subcommand(1);
  Options o;

  const auto counts = [&](CLI::App* c) {
    c->add_option("--counts", o.counts, "objects:layouts per group, e.g. 3:100,4:100,5:100")->capture_default_str();
    c->add_option("--room-width", o.room_width, "room width in metres")->capture_default_str();
    c->add_option("--room-height", o.room_height, "room depth in metres")->capture_default_str();
  };
  const auto sim = [&](CLI::App* c) {
    c->add_option("--paths", o.paths, "random paths per layout")->capture_default_str()->check(CLI::Range(1, 100000));
    c->add_option("--episode-distance", o.episode_distance, "virtual metres walked per path")->capture_default_str();
    c->add_option("--split-seed", o.split_seed, "seed for the 6:2:2 train/val/test split (default: --seed)");
    c->add_flag("--no-split", o.no_split, "leave samples unassigned");
  };

  auto* gen = app.add_subcommand("gen", "sample random layouts");
  counts(gen);
  gen->add_option("--seed", o.seed)->required();
  gen->add_option("--out", o.out)->required();

  auto* simulate = app.add_subcommand("simulate", "simulate reset counts for a layout file");
  simulate->add_option("--layouts", o.layouts)->required();
  sim(simulate);
  simulate->add_option("--seed", o.seed)->required();
  simulate->add_option("--out", o.out)->required();

  auto* build = app.add_subcommand("build-dataset", "gen + simulate in one step");
  counts(build);
  sim(build);
  build->add_option("--seed", o.seed)->required();
  build->add_option("--out", o.out)->required();

  auto* trn = app.add_subcommand("train", "train a model on the train/val splits");
  trn->add_option("--dataset", o.dataset)->required();
  trn->add_option("--model-config", o.model_config)->required();
  trn->add_option("--train-config", o.train_config)->required();
  trn->add_option("--out", o.out)->required();
  trn->add_option("--history", o.history, "per-epoch CSV");
  trn->add_option("--pretrained", o.pretrained, "safetensors backbone weights");
  trn->add_option("--name-table", o.name_table, "name translation for --pretrained")->capture_default_str();

  auto* ev = app.add_subcommand("eval", "RMSE / MAE / R2 on a split");
  ev->add_option("--model", o.model)->required();
  ev->add_option("--dataset", o.dataset)->required();
  ev->add_option("--split", o.split, "train, val, test or all")
      ->capture_default_str()
      ->check(CLI::IsMember({"train", "val", "test", "all"}));

  auto* pr = app.add_subcommand("predict", "predict resets and heatmap for a layout");
  pr->add_option("--model", o.model)->required();
  pr->add_option("--layout", o.layout)->required();

  auto* ro = app.add_subcommand("rollout", "write the attention heatmap as PGM");
  ro->add_option("--model", o.model)->required();
  ro->add_option("--layout", o.layout)->required();
  ro->add_option("--out", o.out)->required();
  ro->add_option("--scale", o.scale, "pixels per heatmap cell")->capture_default_str();

  auto* an = app.add_subcommand("analyze", "Kruskal-Wallis and Levene over object-count groups");
  an->add_option("--dataset", o.dataset)->required();

  auto* sv = app.add_subcommand("serve", "HTTP prediction service");
  sv->add_option("--model", o.model, "model file (ROOMROAM_MODEL overrides)");
  sv->add_option("--host", o.host)->capture_default_str();
  sv->add_option("--port", o.port)->capture_default_str()->check(CLI::Range(0, 65535));
  sv->add_option("--sim-workers", o.sim_workers)->capture_default_str()->check(CLI::Range(1, 1024));
  sv->add_option("--time-budget-ms", o.time_budget_ms)->capture_default_str()->check(CLI::Range(1, 3600000));

  std::vector<std::string> rev(args.rbegin(), args.rend() - (args.empty() ? 0 : 1));
  try {
    app.parse(rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::Success&) {
    return 0;
  } catch (const CLI::ParseError& e) {
    report(err, "usage", e.what(), e.get_name());
    err << app.help();
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen(o, out, err);
    if (simulate->parsed()) return cmd_simulate(o, out, err);
    if (build->parsed()) return cmd_build(o, out, err);
    if (trn->parsed()) return cmd_train(o, out, err);
    if (ev->parsed()) return cmd_eval(o, out, err);
    if (pr->parsed()) return cmd_predict(o, out, err);
    if (ro->parsed()) return cmd_rollout(o, out, err);
    if (an->parsed()) return cmd_analyze(o, out, err);
    if (sv->parsed()) return cmd_serve(o, out, err);
  } catch (const Error& e) {
    report(err, to_string(e.code()), e.what(), e.detail());
    return 1;
  } catch (const std::exception& e) {
    report(err, "runtime", e.what(), "");
    return 1;
  }
  return 2;
}

int run(int argc, const char* const* argv) {
  return run(std::vector<std::string>(argv, argv + argc), std::cout, std::cerr);
}

}  // namespace roomroam::cli
